"""Clinical context text from patient metadata.

Two generators share the same fields: a deterministic template (data-to-text)
and a prompt sent to an OpenAI-compatible chat-completion endpoint, whose
replies are cached permanently in an append-only JSONL file.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .dataset import PatientMeta, Sex, StatementTable
from .errors import EmptyCompletion, HttpError, NonPositiveDimension

logger = logging.getLogger(__name__)

API_KEY_ENV = "CLIC_LLM_API_KEY"


class Provenance(str, enum.Enum):
    DATA_TO_TEXT = "DataToText"
    LLM = "LLM"


@dataclass(frozen=True)
class ContextText:
    id: str
    text: str
    provenance: Provenance
    generator_params: Mapping | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"empty context text for {self.id}")
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "provenance": self.provenance.value,
            "generator_params": dict(self.generator_params) if self.generator_params else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ContextText":
        return cls(d["id"], d["text"], Provenance(d["provenance"]), d.get("generator_params"))


def write_texts(path: str | Path, texts: Iterable[ContextText]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in texts:
            fh.write(json.dumps(t.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def read_texts(path: str | Path) -> list[ContextText]:
    with open(path, encoding="utf-8") as fh:
        return [ContextText.from_dict(json.loads(ln)) for ln in fh if ln.strip()]


# --------------------------------------------------------------------------
# BMI
# --------------------------------------------------------------------------


def compute_bmi(weight: float | None, height: float | None) -> float | None:
    """Body mass index from weight in kg and height in cm; None if either is missing."""
    for name, value in (("weight", weight), ("height", height)):
        if value is not None and value <= 0:
            raise NonPositiveDimension(f"{name} must be positive, got {value}")
    if weight is None or height is None:
        return None
    return weight / (height / 100.0) ** 2


def bmi_category(bmi: float) -> str:
    # WHO adult cut-offs, left-closed intervals
    if bmi < 18.5:
        return "underweight"
    if bmi < 25.0:
        return "normal weight"
    if bmi < 30.0:
        return "overweight"
    return "obese"


# --------------------------------------------------------------------------
# Shared field verbalisation
# --------------------------------------------------------------------------


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:g}"


def _article(word: str) -> str:
    # ages read with a leading vowel sound: 8, 11, 18, 80-89, 8xx
    digits = re.match(r"\d+", word)
    if digits:
        d = digits.group()
        return "an" if d.startswith("8") or d in ("11", "18") else "a"
    return "an" if word[:1].lower() in "aeiou" else "a"


def _descriptions(codes: Sequence[str], table: StatementTable) -> list[str]:
    out = []
    for code in codes:
        st = table.get(code)
        desc = st.description if st is not None and st.description else code
        if desc not in out:
            out.append(desc)
    return out


def _safe_bmi(meta: PatientMeta) -> float | None:
    try:
        return compute_bmi(meta.weight, meta.height)
    except NonPositiveDimension:
        logger.warning("record %s: non-positive height/weight ignored", meta.id)
        return None


# --------------------------------------------------------------------------
# Data-to-text
# --------------------------------------------------------------------------


def render_dtt(meta: PatientMeta, table: StatementTable) -> ContextText:
    """Render the canonical template.

    Sentences, in order: age and sex; BMI with category; device; rhythm
    statements; morphology statements. Sentences whose fields are missing are
    omitted, except sex, which falls back to "patient of unrecorded sex".
    """
    sex = {Sex.MALE: "male", Sex.FEMALE: "female"}.get(meta.sex, "patient of unrecorded sex")
    if meta.age is not None:
        age = _fmt_num(meta.age)
        who = f"{_article(age)} {age}-year-old {sex}"
    else:
        who = f"{_article(sex)} {sex}"
    parts = [f"The patient is {who}."]

    bmi = _safe_bmi(meta)
    if bmi is not None:
        parts.append(f"The body mass index is {bmi:.1f} kg/m², classified as {bmi_category(bmi)}.")
    if meta.device:
        parts.append(f"The ECG was recorded with the {meta.device} device.")
    rhythm = _descriptions(meta.rhythm_codes, table)
    if rhythm:
        parts.append(f"The rhythm is {'; '.join(rhythm)}.")
    form = _descriptions(meta.form_codes, table)
    if form:
        parts.append(f"The morphology shows {'; '.join(form)}.")
    return ContextText(meta.id, " ".join(parts), Provenance.DATA_TO_TEXT)


# --------------------------------------------------------------------------
# Prompt-guided generation
# --------------------------------------------------------------------------

SYSTEM_PROMPT = (
    "You are a cardiology specialist writing a concise clinical ECG report. "
    "Write exactly one paragraph. You must use only the information provided in the patient data. "
    "Do not invent measurements or findings that are not given, such as heart rate, "
    "intervals, axis or voltage values, and do not state a diagnosis."
)


@dataclass(frozen=True)
class PromptMessages:
    system: str
    user: str

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.system}, {"role": "user", "content": self.user}]

    def digest(self) -> str:
        payload = json.dumps([self.system, self.user], ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def build_prompt(meta: PatientMeta, table: StatementTable) -> PromptMessages:
    lines = ["Patient data:"]
    if meta.age is not None:
        lines.append(f"Age: {_fmt_num(meta.age)} years")
    lines.append(f"Sex: {meta.sex.value if meta.sex != Sex.UNKNOWN else 'not recorded'}")
    if meta.height is not None:
        lines.append(f"Height: {_fmt_num(meta.height)} cm")
    if meta.weight is not None:
        lines.append(f"Weight: {_fmt_num(meta.weight)} kg")
    bmi = _safe_bmi(meta)
    if bmi is not None:
        lines.append(f"BMI: {bmi:.1f} kg/m² ({bmi_category(bmi)})")
    if meta.device:
        lines.append(f"Recording device: {meta.device}")
    rhythm = _descriptions(meta.rhythm_codes, table)
    if rhythm:
        lines.append(f"Rhythm: {'; '.join(rhythm)}")
    form = _descriptions(meta.form_codes, table)
    if form:
        lines.append(f"Morphology: {'; '.join(form)}")
    return PromptMessages(SYSTEM_PROMPT, "\n".join(lines))


@dataclass
class LlmEndpointConfig:
    base_url: str
    model: str = "llama-3.1-8b-instruct"
    temperature: float = 0.0
    max_tokens: int = 400
    timeout: float = 60.0
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    max_workers: int = 4
    min_interval: float = 0.0  # seconds between request starts, per endpoint
    api_key: str | None = field(default=None, repr=False)

    def resolved_api_key(self) -> str | None:
        return self.api_key if self.api_key is not None else os.environ.get(API_KEY_ENV)


def cache_key(prompt: PromptMessages, model: str, temperature: float) -> str:
    payload = json.dumps(
        {"system": prompt.system, "user": prompt.user, "model": model, "temperature": float(temperature)},
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ReportCache:
    """Append-only JSONL store of generated reports keyed by prompt/model/temperature.

    Writes are serialised with a lock; each record is a single ``write`` call.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._entries: dict[str, ContextText] = {}
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    try:
                        d = json.loads(line)
                    except json.JSONDecodeError:
                        logger.warning("skipping corrupt cache line in %s", self.path)
                        continue
                    self._entries[d["key"]] = ContextText.from_dict(d["context"])

    def __len__(self):
        return len(self._entries)

    def get(self, key: str) -> ContextText | None:
        return self._entries.get(key)

    def put(self, key: str, ctx: ContextText) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = ctx
            if self.path is None:
                return
            params = ctx.generator_params or {}
            rec = {
                "key": key,
                "id": ctx.id,
                "prompt_hash": params.get("prompt_hash"),
                "model": params.get("model"),
                "text": ctx.text,
                "context": ctx.to_dict(),
            }
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


class _RateLimiter:
    def __init__(self, min_interval: float, clock=time.monotonic, sleep=time.sleep):
        self.min_interval = min_interval
        self.clock, self.sleep = clock, sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self):
        if self.min_interval <= 0:
            return
        with self._lock:
            now = self.clock()
            delay = self._next - now
            self._next = max(now, self._next) + self.min_interval
        if delay > 0:
            self.sleep(delay)


def single_paragraph(text: str) -> str:
    return " ".join(text.split())


_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?")


def unsupported_numbers(report: str, prompt: PromptMessages) -> list[str]:
    """Numbers in the report that do not occur in the prompt's patient data."""
    allowed = set(_NUMBER_RE.findall(prompt.user))
    return [n for n in _NUMBER_RE.findall(report) if n not in allowed]


def _request_completion(
    prompt: PromptMessages,
    endpoint: LlmEndpointConfig,
    client: httpx.Client,
    sleep: Callable[[float], None],
    limiter: _RateLimiter | None,
) -> str:
    url = endpoint.base_url.rstrip("/") + "/v1/chat/completions"
    body = {
        "model": endpoint.model,
        "temperature": endpoint.temperature,
        "max_tokens": endpoint.max_tokens,
        "messages": prompt.messages(),
    }
    headers = {}
    key = endpoint.resolved_api_key()
    if key:
        headers["Authorization"] = f"Bearer {key}"

    delay = endpoint.backoff_base
    for attempt in range(1, endpoint.max_attempts + 1):
        last = attempt == endpoint.max_attempts
        if limiter is not None:
            limiter.wait()
        try:
            resp = client.post(url, json=body, headers=headers, timeout=endpoint.timeout)
        except httpx.TimeoutException as exc:
            if last:
                raise TimeoutError(f"chat completion timed out after {attempt} attempts") from exc
            logger.warning("timeout (attempt %d), retrying in %.1fs", attempt, delay)
        else:
            if resp.is_success:
                try:
                    return resp.json()["choices"][0]["message"]["content"] or ""
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise HttpError(f"unexpected completion payload: {exc}", resp.status_code) from exc
            retryable = resp.status_code == 429 or resp.status_code >= 500
            if not retryable or last:
                raise HttpError(
                    f"chat completion failed with HTTP {resp.status_code} after {attempt} attempt(s)",
                    resp.status_code,
                )
            logger.warning("HTTP %d (attempt %d), retrying in %.1fs", resp.status_code, attempt, delay)
        sleep(delay)
        delay *= endpoint.backoff_factor
    raise AssertionError("unreachable")


def generate_llm_report(
    prompt: PromptMessages,
    endpoint: LlmEndpointConfig,
    cache: ReportCache,
    record_id: str = "",
    *,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
    limiter: _RateLimiter | None = None,
) -> ContextText:
    """Return the cached report for ``prompt`` or request one from the endpoint."""
    key = cache_key(prompt, endpoint.model, endpoint.temperature)
    hit = cache.get(key)
    if hit is not None:
        return hit if hit.id == record_id or not record_id else ContextText(
            record_id, hit.text, hit.provenance, hit.generator_params
        )

    own = client is None
    client = client or httpx.Client()
    try:
        content = _request_completion(prompt, endpoint, client, sleep, limiter)
    finally:
        if own:
            client.close()
    text = single_paragraph(content)
    if not text:
        raise EmptyCompletion(f"empty completion for record {record_id!r}")
    extra = unsupported_numbers(text, prompt)
    if extra:
        logger.warning("record %s: report mentions numbers absent from the input: %s", record_id, extra)

    params = {"model": endpoint.model, "temperature": endpoint.temperature, "prompt_hash": prompt.digest()}
    ctx = ContextText(record_id, text, Provenance.LLM, params)
    cache.put(key, ctx)
    return ctx


def generate_llm_reports(
    metas: Sequence[PatientMeta],
    table: StatementTable,
    endpoint: LlmEndpointConfig,
    cache: ReportCache,
    *,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[ContextText]:
    """Reports for many records, up to ``endpoint.max_workers`` requests in flight."""
    limiter = _RateLimiter(endpoint.min_interval, sleep=sleep)
    own = client is None
    client = client or httpx.Client()

    def one(meta):
        return generate_llm_report(
            build_prompt(meta, table), endpoint, cache, meta.id, client=client, sleep=sleep, limiter=limiter
        )

    try:
        if endpoint.max_workers <= 1:
            return [one(m) for m in metas]
        with ThreadPoolExecutor(max_workers=endpoint.max_workers) as pool:
            return list(pool.map(one, metas))
    finally:
        if own:
            client.close()
