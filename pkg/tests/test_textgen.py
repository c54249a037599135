import dataclasses
import json
import re
import subprocess
import sys
import threading

import httpx
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from clic.dataset import Sex
from clic.errors import EmptyCompletion, HttpError, NonPositiveDimension
from clic.textgen import (
    SYSTEM_PROMPT,
    ContextText,
    LlmEndpointConfig,
    Provenance,
    ReportCache,
    bmi_category,
    build_prompt,
    cache_key,
    compute_bmi,
    generate_llm_report,
    generate_llm_reports,
    read_texts,
    render_dtt,
    write_texts,
)

CANONICAL = (
    "The patient is a 56-year-old female. "
    "The body mass index is 22.9 kg/m², classified as normal weight. "
    "The ECG was recorded with the CS-12 device. "
    "The rhythm is sinus rhythm. "
    "The morphology shows non-specific ST changes."
)
LABELS = ("NORM", "MI", "STTC", "CD", "HYP")


# --- BMI ---------------------------------------------------------------------

def test_bmi_formula():
    assert compute_bmi(70, 175) == pytest.approx(22.857142857142858, rel=1e-15)


def test_bmi_missing_height_is_absent():
    assert compute_bmi(70, None) is None
    assert compute_bmi(None, 175) is None


def test_bmi_rejects_zero_height():
    with pytest.raises(NonPositiveDimension):
        compute_bmi(60, 0)


@pytest.mark.parametrize(
    "bmi,cat",
    [(22.86, "normal weight"), (18.5, "normal weight"), (18.49, "underweight"),
     (25.0, "overweight"), (29.99, "overweight"), (30.0, "obese"), (31, "obese")],
)
def test_bmi_category_who_cutoffs(bmi, cat):
    assert bmi_category(bmi) == cat


@settings(max_examples=200)
@given(
    w=st.floats(20, 300), h=st.floats(50, 250), k=st.floats(0.1, 10),
)
def test_bmi_scaling_laws(w, h, k):
    b = compute_bmi(w, h)
    assert compute_bmi(w * k, h) == pytest.approx(k * b, rel=1e-12)
    assert compute_bmi(w, h * k) == pytest.approx(b / k**2, rel=1e-12)


# --- data-to-text --------------------------------------------------------------

def test_render_canonical_string(full_meta, table):
    ctx = render_dtt(full_meta, table)
    assert ctx.text == CANONICAL
    assert ctx.provenance is Provenance.DATA_TO_TEXT
    assert ctx.id == "42"


def test_render_without_height_drops_bmi_sentence(full_meta, table):
    text = render_dtt(dataclasses.replace(full_meta, height=None), table).text
    assert text == CANONICAL.replace("The body mass index is 22.9 kg/m², classified as normal weight. ", "")


def test_render_without_device_drops_device_sentence(full_meta, table):
    text = render_dtt(dataclasses.replace(full_meta, device=None), table).text
    assert "device" not in text
    assert text.count(".") == CANONICAL.count(".") - 1


def test_render_unknown_sex(full_meta, table):
    text = render_dtt(dataclasses.replace(full_meta, sex=Sex.UNKNOWN), table).text
    assert text.startswith("The patient is a 56-year-old patient of unrecorded sex.")


def test_render_article_before_vowel_sound_age(full_meta, table):
    text = render_dtt(dataclasses.replace(full_meta, age=81), table).text
    assert text.startswith("The patient is an 81-year-old female.")


def test_render_joins_multiple_statements(full_meta, table):
    meta = dataclasses.replace(full_meta, rhythm_codes=["SR", "AFIB"], form_codes=["NST_", "LVOLT"])
    text = render_dtt(meta, table).text
    assert "The rhythm is sinus rhythm; atrial fibrillation." in text
    assert "non-specific ST changes; low QRS voltages in the frontal and horizontal leads." in text


def test_render_is_repeatable(full_meta, table):
    assert render_dtt(full_meta, table).text.encode() == render_dtt(full_meta, table).text.encode()


def test_render_byte_identical_in_fresh_process(full_meta, table, statements_path):
    script = (
        "import sys, json\n"
        "from clic.dataset import PatientMeta, load_statement_table\n"
        "from clic.textgen import render_dtt\n"
        "meta = PatientMeta.from_dict(json.loads(sys.argv[1]))\n"
        "sys.stdout.buffer.write(render_dtt(meta, load_statement_table(sys.argv[2])).text.encode('utf-8'))\n"
    )
    out = subprocess.run(
        [sys.executable, "-c", script, json.dumps(full_meta.to_dict()), str(statements_path)],
        capture_output=True, check=True,
    ).stdout
    assert out == render_dtt(full_meta, table).text.encode("utf-8")


meta_fields = st.fixed_dictionaries({
    "age": st.one_of(st.none(), st.integers(18, 95)),
    "sex": st.sampled_from(list(Sex)),
    "height": st.one_of(st.none(), st.floats(120, 210)),
    "weight": st.one_of(st.none(), st.floats(35, 180)),
    "device": st.one_of(st.none(), st.sampled_from(["CS-12", "AT-6 C 5.5", "AT-60"])),
    "rhythm_codes": st.lists(st.sampled_from(["SR", "AFIB"]), unique=True),
    "form_codes": st.lists(st.sampled_from(["NST_", "LVOLT", "NDT"]), unique=True),
})


@settings(max_examples=200, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(fields=meta_fields)
def test_render_never_leaks_labels_or_none(full_meta, table, fields):
    text = render_dtt(dataclasses.replace(full_meta, **fields), table).text
    words = set(re.findall(r"[A-Za-z]+", text))
    assert not words & set(LABELS)
    assert "None" not in text


def test_text_round_trip(tmp_path, full_meta, table):
    texts = [render_dtt(full_meta, table),
             ContextText("7", "Report.", Provenance.LLM, {"model": "m", "temperature": 0.0, "prompt_hash": "ab"})]
    write_texts(tmp_path / "t.jsonl", texts)
    assert read_texts(tmp_path / "t.jsonl") == texts


# --- prompts -------------------------------------------------------------------

def test_system_prompt_constraints(full_meta, table):
    p = build_prompt(full_meta, table)
    assert "use only the information provided" in p.system
    assert "one paragraph" in p.system
    assert "cardiology specialist" in p.system
    assert p.system == SYSTEM_PROMPT


def test_prompt_serializes_every_field(full_meta, table):
    user = build_prompt(full_meta, table).user
    for fragment in ("Age: 56", "Sex: female", "Height: 175", "Weight: 70", "BMI: 22.9",
                     "CS-12", "sinus rhythm", "non-specific ST changes"):
        assert fragment in user


@settings(max_examples=100, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(fields=meta_fields)
def test_prompt_never_leaks_labels(full_meta, table, fields):
    p = build_prompt(dataclasses.replace(full_meta, **fields), table)
    words = set(re.findall(r"[A-Za-z]+", p.user))
    assert not words & set(LABELS)


def test_prompts_differ_only_in_age(full_meta, table):
    a = build_prompt(full_meta, table).user.splitlines()
    b = build_prompt(dataclasses.replace(full_meta, age=57), table).user.splitlines()
    diff = [(x, y) for x, y in zip(a, b) if x != y]
    assert len(a) == len(b)
    assert diff == [("Age: 56 years", "Age: 57 years")]


# --- LLM client ------------------------------------------------------------------

def _completion(content):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


class Recorder:
    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []
        self.lock = threading.Lock()

    def __call__(self, request):
        with self.lock:
            self.requests.append(request)
            r = self.responses.pop(0) if len(self.responses) > 1 else self.responses[0]
        return r(request) if callable(r) else r

    def client(self):
        return httpx.Client(transport=httpx.MockTransport(self))


ENDPOINT = LlmEndpointConfig(base_url="http://llm.test", api_key="secret")


def test_llm_pass_through(full_meta, table):
    rec = Recorder([_completion("Report text.")])
    ctx = generate_llm_report(build_prompt(full_meta, table), ENDPOINT, ReportCache(), "42", client=rec.client())
    assert ctx.text == "Report text."
    assert ctx.provenance is Provenance.LLM
    assert ctx.generator_params["model"] == ENDPOINT.model
    req = rec.requests[0]
    assert req.url == "http://llm.test/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer secret"
    body = json.loads(req.content)
    assert body["temperature"] == 0.0
    assert [m["role"] for m in body["messages"]] == ["system", "user"]


def test_llm_api_key_from_environment(monkeypatch, full_meta, table):
    monkeypatch.setenv("CLIC_LLM_API_KEY", "from-env")
    rec = Recorder([_completion("x")])
    generate_llm_report(build_prompt(full_meta, table), LlmEndpointConfig("http://llm.test"), ReportCache(),
                        client=rec.client())
    assert rec.requests[0].headers["authorization"] == "Bearer from-env"


def test_llm_output_collapsed_to_one_paragraph(full_meta, table):
    rec = Recorder([_completion("  First line.\n\nSecond   line.\n")])
    ctx = generate_llm_report(build_prompt(full_meta, table), ENDPOINT, ReportCache(), client=rec.client())
    assert ctx.text == "First line. Second line."


def test_llm_cache_hit_issues_no_request(full_meta, table):
    rec = Recorder([_completion("Report text.")])
    cache = ReportCache()
    prompt = build_prompt(full_meta, table)
    first = generate_llm_report(prompt, ENDPOINT, cache, "42", client=rec.client())
    second = generate_llm_report(prompt, ENDPOINT, cache, "42", client=rec.client())
    assert first == second
    assert len(rec.requests) == 1


def test_cache_key_covers_model_and_temperature(full_meta, table):
    p = build_prompt(full_meta, table)
    keys = {cache_key(p, "a", 0.0), cache_key(p, "b", 0.0), cache_key(p, "a", 0.7)}
    assert len(keys) == 3


def test_llm_429_five_times_raises_after_backoff(full_meta, table):
    rec = Recorder([httpx.Response(429)])
    sleeps = []
    with pytest.raises(HttpError) as info:
        generate_llm_report(build_prompt(full_meta, table), ENDPOINT, ReportCache(),
                            client=rec.client(), sleep=sleeps.append)
    assert info.value.status == 429
    assert len(rec.requests) == 5
    assert sleeps == [1, 2, 4, 8]
    assert sum(sleeps) >= 15


def test_llm_recovers_after_transient_errors(full_meta, table):
    rec = Recorder([httpx.Response(503), httpx.Response(429), _completion("ok")])
    sleeps = []
    ctx = generate_llm_report(build_prompt(full_meta, table), ENDPOINT, ReportCache(),
                              client=rec.client(), sleep=sleeps.append)
    assert ctx.text == "ok"
    assert sleeps == [1, 2]


def test_llm_client_error_not_retried(full_meta, table):
    rec = Recorder([httpx.Response(400)])
    with pytest.raises(HttpError):
        generate_llm_report(build_prompt(full_meta, table), ENDPOINT, ReportCache(),
                            client=rec.client(), sleep=lambda s: None)
    assert len(rec.requests) == 1


def test_llm_timeout_raises_timeout_error(full_meta, table):
    def boom(request):
        raise httpx.ReadTimeout("slow", request=request)

    rec = Recorder([boom])
    with pytest.raises(TimeoutError):
        generate_llm_report(build_prompt(full_meta, table), ENDPOINT, ReportCache(),
                            client=rec.client(), sleep=lambda s: None)
    assert len(rec.requests) == 5


def test_llm_empty_completion(full_meta, table):
    rec = Recorder([_completion("   \n ")])
    with pytest.raises(EmptyCompletion):
        generate_llm_report(build_prompt(full_meta, table), ENDPOINT, ReportCache(), client=rec.client())


def test_fabricated_numbers_are_logged(full_meta, table, caplog):
    rec = Recorder([_completion("Heart rate 72 bpm.")])
    generate_llm_report(build_prompt(full_meta, table), ENDPOINT, ReportCache(), "42", client=rec.client())
    assert "72" in caplog.text


def test_cache_file_round_trip(tmp_path, full_meta, table):
    path = tmp_path / "cache.jsonl"
    rec = Recorder([_completion("Report text.")])
    prompt = build_prompt(full_meta, table)
    stored = generate_llm_report(prompt, ENDPOINT, ReportCache(path), "42", client=rec.client())
    reloaded = ReportCache(path).get(cache_key(prompt, ENDPOINT.model, ENDPOINT.temperature))
    assert reloaded == stored
    assert reloaded.generator_params == stored.generator_params
    line = json.loads(path.read_text().splitlines()[0])
    assert {"id", "prompt_hash", "model", "text"} <= set(line)


def test_parallel_generation_writes_each_record_once(tmp_path, full_meta, table):
    metas = [dataclasses.replace(full_meta, id=str(i), age=20 + i) for i in range(12)]

    def reply(request):
        user = json.loads(request.content)["messages"][1]["content"]
        return _completion("Echo " + user.splitlines()[1])

    rec = Recorder([reply])
    path = tmp_path / "cache.jsonl"
    out = generate_llm_reports(metas, table, dataclasses.replace(ENDPOINT, max_workers=4),
                               ReportCache(path), client=rec.client())
    assert [c.id for c in out] == [m.id for m in metas]
    assert out[3].text == "Echo Age: 23 years"
    lines = path.read_text().splitlines()
    assert len(lines) == 12
    assert all(json.loads(ln) for ln in lines)
