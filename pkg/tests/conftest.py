import textwrap

import pytest

from clic.dataset import PatientMeta, Sex, load_statement_table

# Excerpt in the layout of PTB-XL's scp_statements.csv (first column unnamed).
STATEMENTS_CSV = textwrap.dedent(
    """\
    ,description,diagnostic,form,rhythm,diagnostic_class,diagnostic_subclass,Statement Category,SCP-ECG Statement Description,AHA code,aECG REFID,CDISC Code,DICOM Code
    NDT,non-diagnostic T abnormalities,1.0,1.0,,STTC,STTC,other ST-T descriptive statements,non-diagnostic T abnormalities,,,,
    NST_,non-specific ST changes,1.0,1.0,,STTC,NST_,Basic roots for coding ST-T changes and abnormalities,non-specific ST changes,,MDC_ECG_RHY_STHILOST,,
    NORM,normal ECG,1.0,,,NORM,NORM,Normal/abnormal,normal ECG,1.0,,,F-000B7
    IMI,inferior myocardial infarction,1.0,,,MI,IMI,Myocardial Infarction,inferior myocardial infarction,,MDC_ECG_MI_INF,,
    ASMI,anteroseptal myocardial infarction,1.0,,,MI,AMI,Myocardial Infarction,anteroseptal myocardial infarction,,MDC_ECG_MI_ANTSEPT,,
    LVH,left ventricular hypertrophy,1.0,,,HYP,LVH,Hypertrophies,left ventricular hypertrophy,142.0,MDC_ECG_VENT_HYPERT_L,,
    LAFB,left anterior fascicular block,1.0,,,CD,LAFB/LPFB,Conduction disturbances,left anterior fascicular block,101.0,MDC_ECG_BLK_LAFB,,
    IRBBB,incomplete right bundle branch block,1.0,,,CD,IRBBB,Conduction disturbances,incomplete right bundle branch block,,MDC_ECG_BLK_RBBB_INCOMP,,
    ISC_,non-specific ischemic,1.0,,,STTC,ISC_,Basic roots for coding ST-T changes and abnormalities,ischemic ST-T changes,,,,
    LVOLT,low QRS voltages in the frontal and horizontal leads,,1.0,,,,other descriptive statements,low QRS voltages in the frontal and horizontal leads,,,,
    SR,sinus rhythm,,,1.0,,,other rhythm statements,sinus rhythm,21.0,MDC_ECG_RHY_SINUS,,
    AFIB,atrial fibrillation,,,1.0,,,Supraventricular Arrhythmias,atrial fibrillation,50.0,MDC_ECG_RHY_ATR_FIB,,
    """
)

# Rows in the layout of ptbxl_database.csv (column subset used by the loader plus a few extras).
DATABASE_CSV = textwrap.dedent(
    """\
    ecg_id,patient_id,age,sex,height,weight,nurse,site,device,recording_date,report,scp_codes,heart_axis,strat_fold,filename_lr,filename_hr
    1,15709.0,56.0,1,,63.0,2.0,0.0,CS-12   E,1984-11-09 09:17:34,sinusrhythmus periphere niederspannung,"{'NORM': 100.0, 'LVOLT': 0.0, 'SR': 0.0}",,3,records100/00000/00001_lr,records500/00000/00001_hr
    2,13243.0,19.0,0,,70.0,2.0,0.0,CS-12   E,1984-11-14 12:55:37,sinusbradykardie sonst normales ekg,"{'NORM': 80.0, 'SBRAD': 0.0}",,2,records100/00000/00002_lr,records500/00000/00002_hr
    3,20372.0,37.0,1,175.0,70.0,2.0,0.0,AT-6 C 5.5,1984-11-15 12:49:10,sinusrhythmus normales ekg,"{'NORM': 100.0, 'SR': 0.0}",,5,records100/00000/00003_lr,records500/00000/00003_hr
    4,17014.0,300.0,0,,,1.0,2.0,AT-60    3,1984-11-15 13:44:57,sinusrhythmus,"{'IMI': 35.0, 'LAFB': 100.0, 'SR': 0.0}",LAD,9,records100/00000/00004_lr,records500/00000/00004_hr
    5,17448.0,24.0,0,,,,,,1984-11-17 10:43:15,,"{'IMI': 100.0, 'NDT': 100.0, 'SR': 0.0}",,10,records100/00000/00005_lr,records500/00000/00005_hr
    """
)


@pytest.fixture
def statements_path(tmp_path):
    p = tmp_path / "scp_statements.csv"
    p.write_text(STATEMENTS_CSV)
    return p


@pytest.fixture
def table(statements_path):
    return load_statement_table(statements_path)


@pytest.fixture
def ptbxl_root(tmp_path, statements_path):
    (tmp_path / "ptbxl_database.csv").write_text(DATABASE_CSV)
    return tmp_path


@pytest.fixture
def full_meta():
    return PatientMeta(
        id="42",
        strat_fold=1,
        age=56,
        sex=Sex.FEMALE,
        height=175.0,
        weight=70.0,
        device="CS-12",
        scp_codes={"NST_": 100.0, "SR": 0.0},
        rhythm_codes=["SR"],
        form_codes=["NST_"],
    )


# --- acceptance verdicts ---------------------------------------------------------------
# Tests marked ``criterion(n, title)`` feed one PASS/FAIL/SKIP line per criterion
# into the terminal summary; details come from ``record_property("detail", ...)``.

_criteria = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion verified by the test")
    config.stash[_criteria] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (rep.when == "call" or not rep.passed):
        n, title = mark.args
        status = "SKIP" if rep.skipped else "FAIL" if rep.failed else "PASS"
        details = [v for k, v in item.user_properties if k == "detail"]
        if rep.skipped and isinstance(rep.longrepr, tuple):
            details.append(rep.longrepr[2].removeprefix("Skipped: "))
        entry = item.config.stash[_criteria].setdefault(n, {"title": title, "results": {}})
        entry["results"][item.nodeid] = (status, details)
    return rep


def pytest_terminal_summary(terminalreporter, config):
    criteria = config.stash.get(_criteria, {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(criteria):
        results = criteria[n]["results"].values()
        statuses = {s for s, _ in results}
        verdict = "FAIL" if "FAIL" in statuses else "PASS" if "PASS" in statuses else "SKIP"
        details = "; ".join(d for _, ds in results for d in ds)
        terminalreporter.write_line(f"criterion {n:>2} {verdict}  {criteria[n]['title']}" + (f": {details}" if details else ""))
