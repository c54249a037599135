"""ECG records, PTB-XL metadata, single-label derivation, fold splits and a
synthetic dataset generator.

WFDB support is limited to what the PTB-XL 500 Hz release uses: a single
``.dat`` file per record in storage format 16 (16-bit little-endian two's
complement, samples interleaved frame by frame).
"""
from __future__ import annotations

import ast
import csv
import enum
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    InvalidConfig,
    InvalidFold,
    LengthMismatch,
    MalformedHeader,
    MissingSample,
    ParseError,
    UnsupportedFormat,
)

logger = logging.getLogger(__name__)

LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")

WFDB_INVALID_SAMPLE = -32768
WFDB_DEFAULT_GAIN = 200.0

# PTB-XL stores ages above 89 as 300 for anonymisation.
PTBXL_AGE_SENTINEL = 300
PTBXL_AGE_CAP = 90


class Superclass(enum.IntEnum):
    NORM = 0
    MI = 1
    STTC = 2
    CD = 3
    HYP = 4


class Sex(str, enum.Enum):
    MALE = "male"
    FEMALE = "female"
    UNKNOWN = "unknown"


# --------------------------------------------------------------------------
# WFDB
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SignalInfo:
    file_name: str
    fmt: int
    gain: float
    baseline: int
    lead_name: str
    units: str = "mV"
    adc_resolution: int = 16
    adc_zero: int = 0
    initial_value: int = 0
    checksum: int = 0
    block_size: int = 0


@dataclass(frozen=True)
class SignalSpec:
    record_name: str
    n_signals: int
    sampling_rate: float
    n_samples: int
    signals: tuple[SignalInfo, ...]

    @property
    def gains(self) -> list[float]:
        return [s.gain for s in self.signals]

    @property
    def baselines(self) -> list[int]:
        return [s.baseline for s in self.signals]

    @property
    def lead_names(self) -> list[str]:
        return [s.lead_name for s in self.signals]


@dataclass
class EcgRecord:
    """Calibrated signal matrix, shape ``(n_leads, n_samples)``, in mV."""

    id: str
    samples: np.ndarray
    sampling_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[1] == 0:
            raise ValueError(f"record {self.id}: expected a non-empty (leads, samples) matrix")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"record {self.id}: non-finite samples")

    @property
    def n_leads(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


_GAIN_RE = re.compile(r"^([-+]?[\d.]+(?:[eE][-+]?\d+)?)(?:\(([-+]?\d+)\))?(?:/(\S+))?$")


def _number(tok: str, kind, what: str):
    try:
        return kind(tok)
    except ValueError:
        raise MalformedHeader(f"non-numeric {what}: {tok!r}") from None


def parse_header(text: str) -> SignalSpec:
    """Parse the content of a WFDB ``.hea`` file."""
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise MalformedHeader("empty header")

    rec = lines[0].split()
    if len(rec) < 4:
        raise MalformedHeader(f"record line needs name, n_signals, fs, n_samples: {lines[0]!r}")
    name = rec[0]
    if "/" in name:
        raise UnsupportedFormat("multi-segment records are not supported")
    n_signals = _number(rec[1], int, "signal count")
    fs = _number(re.split(r"[/(]", rec[2])[0], float, "sampling frequency")
    n_samples = _number(rec[3], int, "sample count")
    if n_signals <= 0 or fs <= 0 or n_samples <= 0:
        raise MalformedHeader("signal count, frequency and length must be positive")

    sig_lines = lines[1:]
    if len(sig_lines) != n_signals:
        raise MalformedHeader(f"expected {n_signals} signal lines, found {len(sig_lines)}")

    signals = []
    for ln in sig_lines:
        tok = ln.split(maxsplit=8)
        if len(tok) < 3:
            raise MalformedHeader(f"signal line needs file, format and gain: {ln!r}")
        fmt_tok = tok[1]
        if not fmt_tok.isdigit():
            if re.match(r"^\d+", fmt_tok):
                raise UnsupportedFormat(f"format modifiers are not supported: {fmt_tok!r}")
            raise MalformedHeader(f"non-numeric storage format: {fmt_tok!r}")
        fmt = int(fmt_tok)
        if fmt != 16:
            raise UnsupportedFormat(f"storage format {fmt} (only 16 is supported)")

        m = _GAIN_RE.match(tok[2])
        if m is None:
            raise MalformedHeader(f"bad gain field: {tok[2]!r}")
        gain = _number(m.group(1), float, "gain")
        if gain < 0:
            raise MalformedHeader(f"negative gain: {gain}")
        if gain == 0:
            gain = WFDB_DEFAULT_GAIN
        units = m.group(3) or "mV"

        extra = [_number(t, int, "signal field") for t in tok[3:8]]
        adc_res, adc_zero, init, checksum, block = (extra + [16, 0, 0, 0, 0][len(extra):])[:5]
        baseline = int(m.group(2)) if m.group(2) is not None else adc_zero
        lead = tok[8].strip() if len(tok) > 8 else ""
        signals.append(
            SignalInfo(tok[0], fmt, gain, baseline, lead, units, adc_res, adc_zero, init, checksum, block)
        )

    return SignalSpec(name, n_signals, fs, n_samples, tuple(signals))


def decode_raw(spec: SignalSpec, data: bytes) -> np.ndarray:
    """Return the stored integers as an ``(n_signals, n_samples)`` int16 array."""
    expected = 2 * spec.n_signals * spec.n_samples
    if len(data) != expected:
        raise LengthMismatch(f"{spec.record_name}: expected {expected} bytes, got {len(data)}")
    frames = np.frombuffer(data, dtype="<i2").reshape(spec.n_samples, spec.n_signals)
    return frames.T.copy()


def decode_signal(spec: SignalSpec, data: bytes, record_id: str | None = None) -> EcgRecord:
    raw = decode_raw(spec, data)
    bad = raw == WFDB_INVALID_SAMPLE
    if bad.any():
        lead, idx = np.argwhere(bad)[0]
        raise MissingSample(f"{spec.record_name}: missing sample in signal {lead} at index {idx}")
    gains = np.asarray(spec.gains, dtype=np.float64)[:, None]
    baselines = np.asarray(spec.baselines, dtype=np.float64)[:, None]
    physical = (raw.astype(np.float64) - baselines) / gains
    return EcgRecord(record_id or spec.record_name, physical, spec.sampling_rate)


def encode_signal(raw: np.ndarray) -> bytes:
    """Inverse of :func:`decode_raw`: frame-interleave and pack as ``<i2``."""
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError("raw must be (n_signals, n_samples)")
    if raw.min(initial=0) < -32768 or raw.max(initial=0) > 32767:
        raise ValueError("raw values outside the 16-bit range")
    return np.ascontiguousarray(raw.T).astype("<i2").tobytes()


def digitize(samples: np.ndarray, gains: Sequence[float], baselines: Sequence[int]) -> np.ndarray:
    """Convert physical values to storage integers (round half to even)."""
    g = np.asarray(gains, dtype=np.float64)[:, None]
    b = np.asarray(baselines, dtype=np.float64)[:, None]
    raw = np.rint(np.asarray(samples, dtype=np.float64) * g + b)
    if raw.min() <= WFDB_INVALID_SAMPLE or raw.max() > 32767:
        raise ValueError("signal does not fit the format-16 range at this gain")
    return raw.astype(np.int16)


def format_header(spec: SignalSpec) -> str:
    fs = f"{spec.sampling_rate:g}"
    out = [f"{spec.record_name} {spec.n_signals} {fs} {spec.n_samples}"]
    for s in spec.signals:
        out.append(
            f"{s.file_name} {s.fmt} {s.gain:g}({s.baseline})/{s.units} {s.adc_resolution} "
            f"{s.adc_zero} {s.initial_value} {s.checksum} {s.block_size} {s.lead_name}"
        )
    return "\n".join(out) + "\n"


def write_record(
    directory: str | Path,
    record_name: str,
    raw: np.ndarray,
    sampling_rate: float,
    gains: Sequence[float],
    baselines: Sequence[int],
    lead_names: Sequence[str] = LEADS,
) -> SignalSpec:
    """Write ``raw`` (int16, ``(n_signals, n_samples)``) as a format-16 record."""
    raw = np.asarray(raw)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dat_name = f"{record_name}.dat"
    signals = []
    for i in range(raw.shape[0]):
        # WFDB checksum: 16-bit signed sum of all samples of the signal
        cs = int(raw[i].astype(np.int64).sum()) & 0xFFFF
        cs = cs - 0x10000 if cs >= 0x8000 else cs
        signals.append(
            SignalInfo(dat_name, 16, float(gains[i]), int(baselines[i]), lead_names[i],
                       initial_value=int(raw[i, 0]), checksum=cs)
        )
    spec = SignalSpec(record_name, raw.shape[0], float(sampling_rate), raw.shape[1], tuple(signals))
    (directory / f"{record_name}.hea").write_text(format_header(spec), encoding="ascii")
    (directory / dat_name).write_bytes(encode_signal(raw))
    return spec


def read_record(path: str | Path, record_id: str | None = None) -> EcgRecord:
    """Read ``<path>.hea`` and its ``.dat`` file; ``path`` has no extension."""
    path = Path(path)
    spec = parse_header(path.with_suffix(".hea").read_text(encoding="ascii"))
    files = {s.file_name for s in spec.signals}
    if len(files) != 1:
        raise UnsupportedFormat("signals spread over several .dat files")
    data = (path.parent / files.pop()).read_bytes()
    return decode_signal(spec, data, record_id or spec.record_name)


# --------------------------------------------------------------------------
# Metadata
# --------------------------------------------------------------------------


@dataclass
class PatientMeta:
    id: str
    strat_fold: int
    age: float | None = None
    sex: Sex = Sex.UNKNOWN
    height: float | None = None
    weight: float | None = None
    device: str | None = None
    scp_codes: dict[str, float] = field(default_factory=dict)
    rhythm_codes: list[str] = field(default_factory=list)
    form_codes: list[str] = field(default_factory=list)
    filename: str | None = None

    def __post_init__(self):
        self.sex = Sex(self.sex)
        if not 1 <= self.strat_fold <= 10:
            raise InvalidFold(f"record {self.id}: strat_fold {self.strat_fold} outside 1-10")
        if self.age is not None and self.age < 0:
            raise ValueError(f"record {self.id}: negative age")
        for code, lik in self.scp_codes.items():
            if not 0 <= lik <= 100:
                raise ValueError(f"record {self.id}: likelihood {lik} for {code} outside 0-100")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sex"] = self.sex.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PatientMeta":
        return cls(**d)


@dataclass(frozen=True)
class Statement:
    code: str
    is_diagnostic: bool
    diagnostic_class: Superclass | None
    is_rhythm: bool
    is_form: bool
    description: str

    def __post_init__(self):
        if (self.diagnostic_class is not None) != self.is_diagnostic:
            raise ValueError(f"{self.code}: diagnostic_class must be set iff is_diagnostic")


StatementTable = Mapping[str, Statement]


def _flag(value: str | None) -> bool:
    if value is None or not value.strip():
        return False
    return float(value) != 0.0


def load_statement_table(path: str | Path) -> dict[str, Statement]:
    """Load PTB-XL's ``scp_statements.csv``.

    The first (unnamed) column holds the statement code.
    """
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        col = {name: i for i, name in enumerate(header)}
        for row in reader:
            if not row:
                continue
            code = row[0].strip().upper()
            get = lambda name: row[col[name]] if name in col and col[name] < len(row) else ""
            diagnostic = _flag(get("diagnostic"))
            cls_name = get("diagnostic_class").strip()
            diag_class = Superclass[cls_name] if diagnostic and cls_name else None
            table[code] = Statement(
                code=code,
                is_diagnostic=diag_class is not None,
                diagnostic_class=diag_class,
                is_rhythm=_flag(get("rhythm")),
                is_form=_flag(get("form")),
                description=get("description").strip(),
            )
    return table


def parse_scp_codes(text: str) -> dict[str, float]:
    """Parse the ``scp_codes`` column, e.g. ``"{'NORM': 100.0, 'SR': 0.0}"``."""
    try:
        value = ast.literal_eval(text.strip())
    except (ValueError, SyntaxError, MemoryError, RecursionError) as exc:
        raise ParseError(f"cannot parse scp_codes {text!r}: {exc}") from None
    if not isinstance(value, dict):
        raise ParseError(f"scp_codes is not a map: {text!r}")
    out = {}
    for key, lik in value.items():
        if not isinstance(key, str):
            raise ParseError(f"scp code keys must be quoted strings: {key!r}")
        if isinstance(lik, bool) or not isinstance(lik, (int, float)) or not math.isfinite(lik):
            raise ParseError(f"non-numeric likelihood for {key!r}: {lik!r}")
        if not 0 <= lik <= 100:
            raise ParseError(f"likelihood for {key!r} outside 0-100: {lik}")
        out[key.strip().upper()] = float(lik)
    return out


def derive_superclasses(scp: Mapping[str, float], table: StatementTable) -> dict[Superclass, float]:
    """Max likelihood per diagnostic superclass; rhythm/form-only codes are ignored."""
    classes: dict[Superclass, float] = {}
    for code, lik in scp.items():
        st = table.get(code)
        if st is None:
            logger.warning("unknown scp code %r skipped", code)
            continue
        if st.diagnostic_class is None:
            continue
        prev = classes.get(st.diagnostic_class)
        classes[st.diagnostic_class] = lik if prev is None else max(prev, lik)
    return classes


def select_label(classes: Mapping[Superclass, float], threshold: float = 50.0) -> Superclass | None:
    """Single diagnostic class of a record, or None when the record is dropped.

    A class is retained when its likelihood is at least ``threshold`` or exactly 0
    (PTB-XL's "likelihood unknown"). The record keeps a label only if exactly one
    class survives.
    """
    kept = {c for c, lik in classes.items() if lik >= threshold or lik == 0}
    if len(kept) != 1:
        return None
    return Superclass(next(iter(kept)))


def _opt_float(value: str) -> float | None:
    value = value.strip()
    if not value:
        return None
    x = float(value)
    return None if math.isnan(x) else x


def load_ptbxl_metadata(path: str | Path, table: StatementTable) -> list[PatientMeta]:
    """Read ``ptbxl_database.csv`` into :class:`PatientMeta` rows."""
    metas = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ecg_id = str(int(float(row["ecg_id"])))
            scp = parse_scp_codes(row["scp_codes"])
            age = _opt_float(row.get("age", ""))
            if age is not None and age >= PTBXL_AGE_SENTINEL:
                age = float(PTBXL_AGE_CAP)
            sex_raw = _opt_float(row.get("sex", ""))
            sex = {0.0: Sex.MALE, 1.0: Sex.FEMALE}.get(sex_raw, Sex.UNKNOWN)
            rhythm = [c for c in scp if c in table and table[c].is_rhythm]
            form = [c for c in scp if c in table and table[c].is_form]
            device = (row.get("device") or "").strip() or None
            metas.append(
                PatientMeta(
                    id=ecg_id,
                    strat_fold=int(float(row["strat_fold"])),
                    age=age,
                    sex=sex,
                    height=_opt_float(row.get("height", "")),
                    weight=_opt_float(row.get("weight", "")),
                    device=device,
                    scp_codes=scp,
                    rhythm_codes=rhythm,
                    form_codes=form,
                    filename=(row.get("filename_hr") or "").strip() or None,
                )
            )
    return metas


def label_records(
    metas: Iterable[PatientMeta], table: StatementTable, threshold: float = 50.0
) -> list[tuple[PatientMeta, Superclass]]:
    """Keep the records that carry exactly one diagnostic superclass."""
    kept = []
    for meta in metas:
        label = select_label(derive_superclasses(meta.scp_codes, table), threshold)
        if label is not None:
            kept.append((meta, label))
    return kept


def class_supports(labelled: Iterable[tuple[PatientMeta, Superclass]], fold: int = 10) -> dict[str, int]:
    counts = {c.name: 0 for c in Superclass}
    for meta, label in labelled:
        if meta.strat_fold == fold:
            counts[label.name] += 1
    return counts


def load_ptbxl(root: str | Path, threshold: float = 50.0):
    """Statement table plus the labelled records of a PTB-XL download."""
    root = Path(root)
    table = load_statement_table(root / "scp_statements.csv")
    metas = load_ptbxl_metadata(root / "ptbxl_database.csv", table)
    return table, label_records(metas, table, threshold)


def load_ptbxl_signal(root: str | Path, meta: PatientMeta) -> EcgRecord:
    if meta.filename is None:
        raise ValueError(f"record {meta.id} has no signal filename")
    rec = read_record(Path(root) / meta.filename, meta.id)
    if rec.n_leads != len(LEADS):
        raise ValueError(f"record {meta.id}: expected 12 leads, got {rec.n_leads}")
    return rec


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def __iter__(self):
        return iter((self.train, self.val, self.test))


TRAIN_FOLDS = range(1, 9)
VAL_FOLD = 9
TEST_FOLD = 10


def build_split(records: Iterable[tuple[str, int]]) -> DatasetSplit:
    """Folds 1-8 train, 9 validation, 10 test. Input order is preserved."""
    split = DatasetSplit([], [], [])
    seen = set()
    for rid, fold in records:
        if not isinstance(fold, (int, np.integer)) or not 1 <= fold <= 10:
            raise InvalidFold(f"record {rid}: fold {fold!r} outside 1-10")
        if rid in seen:
            raise ValueError(f"duplicate record id {rid!r}")
        seen.add(rid)
        if fold == TEST_FOLD:
            split.test.append(rid)
        elif fold == VAL_FOLD:
            split.val.append(rid)
        else:
            split.train.append(rid)
    return split


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------


def manifest_line(meta: PatientMeta, label: Superclass) -> str:
    d = {"id": meta.id, "label": label.name, "fold": meta.strat_fold, "meta": meta.to_dict()}
    return json.dumps(d, sort_keys=True, ensure_ascii=False)


def write_manifest(path: str | Path, rows: Iterable[tuple[PatientMeta, Superclass]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for meta, label in rows:
            fh.write(manifest_line(meta, label) + "\n")


def read_manifest(path: str | Path) -> list[tuple[PatientMeta, Superclass]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                rows.append((PatientMeta.from_dict(d["meta"]), Superclass[d["label"]]))
    return rows


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

# Statement table covering the codes emitted by the synthesizer.
SYNTHETIC_STATEMENTS: dict[str, Statement] = {
    "NORM": Statement("NORM", True, Superclass.NORM, False, False, "normal ECG"),
    "IMI": Statement("IMI", True, Superclass.MI, False, False, "inferior myocardial infarction"),
    "ISC_": Statement("ISC_", True, Superclass.STTC, False, False, "non-specific ischemic"),
    "CLBBB": Statement("CLBBB", True, Superclass.CD, False, False, "complete left bundle branch block"),
    "LVH": Statement("LVH", True, Superclass.HYP, False, False, "left ventricular hypertrophy"),
    "SR": Statement("SR", False, None, True, False, "sinus rhythm"),
}
_SYNTH_CODE = {Superclass.NORM: "NORM", Superclass.MI: "IMI", Superclass.STTC: "ISC_",
               Superclass.CD: "CLBBB", Superclass.HYP: "LVH"}

# Seed for the fixed per-class waveform parameters; independent of the sampling seed.
_DESIGN_SEED = 20_240_611
N_COMPONENTS = 4


@dataclass(frozen=True)
class DemographicProfile:
    age_range: tuple[float, float] = (20.0, 90.0)
    p_male: float = 0.5
    bmi_range: tuple[float, float] = (18.0, 35.0)
    devices: tuple[str, ...] = ("CS-12", "AT-6")


@dataclass(frozen=True)
class SynthConfig:
    n_records: int = 500
    n_classes: int = 5
    signal_length: int = 1000
    sampling_rate: float = 100.0
    class_priors: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    confound_pairs: tuple[tuple[int, int], ...] = ()
    demographic_profiles: tuple[DemographicProfile, ...] | None = None
    noise_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_records < 1 or self.signal_length < 1 or self.sampling_rate <= 0:
            raise InvalidConfig("n_records, signal_length and sampling_rate must be positive")
        if not 2 <= self.n_classes <= len(Superclass):
            raise InvalidConfig(f"n_classes must be in 2..{len(Superclass)}")
        pri = np.asarray(self.class_priors, dtype=np.float64)
        if pri.shape != (self.n_classes,) or np.any(pri < 0) or abs(pri.sum() - 1.0) > 1e-9:
            raise InvalidConfig("class_priors must be n_classes non-negative values summing to 1")
        for pair in self.confound_pairs:
            a, b = pair
            if not (0 <= a < self.n_classes and 0 <= b < self.n_classes) or a == b:
                raise InvalidConfig(f"invalid confound pair {pair}")
        if self.demographic_profiles is not None and len(self.demographic_profiles) != self.n_classes:
            raise InvalidConfig("need one demographic profile per class")
        if self.noise_std < 0:
            raise InvalidConfig("noise_std must be non-negative")

    def profiles(self) -> tuple[DemographicProfile, ...]:
        return self.demographic_profiles or (DemographicProfile(),) * self.n_classes


def confound_config(
    pair: tuple[int, int] = (Superclass.CD, Superclass.STTC), **overrides
) -> SynthConfig:
    """Config where the two classes of ``pair`` share the waveform model and
    differ only in demographics: the first is older men, the second younger women."""
    a, b = int(pair[0]), int(pair[1])
    profiles = [DemographicProfile()] * 5
    profiles[a] = DemographicProfile(age_range=(65.0, 90.0), p_male=1.0, bmi_range=(25.0, 35.0))
    profiles[b] = DemographicProfile(age_range=(20.0, 45.0), p_male=0.0, bmi_range=(18.5, 25.0))
    kw = dict(confound_pairs=((a, b),), demographic_profiles=tuple(profiles))
    kw.update(overrides)
    return SynthConfig(**kw)


def class_waveforms(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-class component frequencies ``(C, K)`` in Hz and amplitudes ``(C, 12, K)`` in mV.

    Confounded classes copy the waveform parameters of their partner.
    """
    rng = np.random.default_rng(_DESIGN_SEED)
    nyq = cfg.sampling_rate / 2
    freqs = np.empty((cfg.n_classes, N_COMPONENTS))
    amps = np.empty((cfg.n_classes, len(LEADS), N_COMPONENTS))
    for c in range(cfg.n_classes):
        # distinct frequency band per class, kept under Nyquist
        base = np.array([1.0, 3.0, 6.0, 10.0]) * (1.0 + 0.35 * c)
        freqs[c] = np.minimum(base + rng.uniform(0.0, 0.3, N_COMPONENTS), 0.8 * nyq)
        amps[c] = rng.uniform(0.2, 1.0, (len(LEADS), N_COMPONENTS))
    for a, b in cfg.confound_pairs:
        freqs[b] = freqs[a]
        amps[b] = amps[a]
    return freqs, amps


@dataclass
class Sample:
    record: EcgRecord
    meta: PatientMeta
    label: Superclass

    def __iter__(self):
        return iter((self.record, self.meta, self.label))


def synthesize_dataset(cfg: SynthConfig, seed: int | None = None) -> list[Sample]:
    """Generate class-conditioned 12-lead signals with demographic metadata.

    Signals are sums of class-specific sinusoids with random phases and
    amplitude jitter plus white noise. Folds are assigned round-robin within
    each class so every fold sees every class.
    """
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    freqs, amps = class_waveforms(cfg)
    profiles = cfg.profiles()
    t = np.arange(cfg.signal_length) / cfg.sampling_rate

    labels = rng.choice(cfg.n_classes, size=cfg.n_records, p=np.asarray(cfg.class_priors))
    folds = np.empty(cfg.n_records, dtype=int)
    for c in range(cfg.n_classes):
        idx = np.flatnonzero(labels == c)
        folds[idx] = np.arange(len(idx)) % 10 + 1

    samples = []
    width = len(str(cfg.n_records))
    for i in range(cfg.n_records):
        c = int(labels[i])
        phase = rng.uniform(0.0, 2 * np.pi, N_COMPONENTS)
        jitter = 1.0 + 0.1 * rng.standard_normal(N_COMPONENTS)
        waves = np.sin(2 * np.pi * freqs[c][:, None] * t[None, :] + phase[:, None])
        sig = (amps[c] * jitter) @ waves
        sig = sig + cfg.noise_std * rng.standard_normal(sig.shape)

        prof = profiles[c]
        age = float(rng.integers(int(prof.age_range[0]), int(prof.age_range[1]) + 1))
        male = rng.random() < prof.p_male
        height = float(np.clip(rng.normal(176.0 if male else 163.0, 7.0), 145.0, 205.0))
        bmi = rng.uniform(*prof.bmi_range)
        weight = round(bmi * (height / 100.0) ** 2, 1)
        device = prof.devices[int(rng.integers(len(prof.devices)))]

        rid = f"synth-{i:0{width}d}"
        label = Superclass(c)
        meta = PatientMeta(
            id=rid,
            strat_fold=int(folds[i]),
            age=age,
            sex=Sex.MALE if male else Sex.FEMALE,
            height=round(height, 1),
            weight=weight,
            device=device,
            scp_codes={_SYNTH_CODE[label]: 100.0, "SR": 0.0},
            rhythm_codes=["SR"],
            form_codes=[],
        )
        samples.append(Sample(EcgRecord(rid, sig, cfg.sampling_rate), meta, label))
    return samples
