"""Command-line pipeline: prepare/synth -> text -> embed -> train -> eval/export -> report.

All artifacts live under the configured output directory::

    manifest.jsonl, signals.npy
    texts/{dtt,llm}.jsonl, texts/llm_cache.jsonl
    embeddings/{dtt,llm}.clicemb
    runs/{mode}/{seed}/{checkpoint.pt,loss_curve.csv,metrics.json}
    exports/{mode}/{seed}_{split}.csv
    report.{md,csv,json}

Exit status: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import httpx
import numpy as np

from .config import RunConfig, load_raw_config, validate_config
from .dataset import (
    SYNTHETIC_STATEMENTS,
    Superclass,
    SynthConfig,
    class_supports,
    confound_config,
    load_ptbxl,
    load_ptbxl_signal,
    load_statement_table,
    read_manifest,
    synthesize_dataset,
    write_manifest,
)
from .errors import ClicError, ConfigParseError, ConfigValidationError
from .metrics import AggregateReport, aggregate_runs, export_embeddings, render_table
from .model import Mode
from .pipeline import build_split_data, model_config_for
from .textenc import (
    TEXT_DIM,
    EmbeddingStore,
    HashEmbedder,
    HttpEmbeddingProvider,
    embed_records,
    load_embedding_file,
    write_embedding_file,
)
from .textgen import ReportCache, generate_llm_reports, read_texts, render_dtt, write_texts
from .training import evaluate, load_checkpoint, run_experiment

logger = logging.getLogger("clic")

MODE_ORDER = [Mode.ECG_ONLY, Mode.ECG_ATTR, Mode.CLIC_DTT, Mode.CLIC_LLM]
DISPLAY_NAMES = {
    Mode.ECG_ONLY: "ECG-only",
    Mode.ECG_ATTR: "ECG+Attr",
    Mode.CLIC_DTT: "CLIC-DtT",
    Mode.CLIC_LLM: "CLIC-LLM",
}
TEXT_KINDS = {Mode.CLIC_DTT: "dtt", Mode.CLIC_LLM: "llm"}


class UsageError(ClicError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# Workspace
# --------------------------------------------------------------------------


class Workspace:
    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.jsonl"

    @property
    def signals(self) -> Path:
        return self.root / "signals.npy"

    @property
    def runs(self) -> Path:
        return self.root / "runs"

    def texts(self, kind: str) -> Path:
        return self.root / "texts" / f"{kind}.jsonl"

    def embeddings(self, kind: str) -> Path:
        return self.root / "embeddings" / f"{kind}.clicemb"

    def run_dir(self, mode: Mode, seed: int) -> Path:
        return self.runs / mode.value / str(seed)

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run `clic {hint}` first")
        return path


@contextmanager
def _atomic(path: Path):
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _write_text(path: Path, text: str) -> None:
    with _atomic(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# Data stages
# --------------------------------------------------------------------------


def _statement_table(cfg: RunConfig):
    if cfg.data.source == "ptbxl":
        return load_statement_table(cfg.data.ptbxl_root / "scp_statements.csv")
    return SYNTHETIC_STATEMENTS


def _synth_config(cfg: RunConfig) -> SynthConfig:
    s = cfg.data.synthetic
    kwargs = dict(n_records=s.n_records, signal_length=s.signal_length, sampling_rate=s.sampling_rate,
                  noise_std=s.noise_std, seed=s.seed)
    if s.confound_pair is None:
        return SynthConfig(**kwargs)
    return confound_config(pair=tuple(Superclass[n] for n in s.confound_pair), **kwargs)


def _save_dataset(ws: Workspace, rows, signals: np.ndarray) -> None:
    with _atomic(ws.signals) as tmp:
        with open(tmp, "wb") as fh:
            np.save(fh, signals)
    with _atomic(ws.manifest) as tmp:
        write_manifest(tmp, rows)


def cmd_synth(cfg: RunConfig, args, ws: Workspace) -> None:
    samples = synthesize_dataset(_synth_config(cfg))
    rows = [(s.meta, s.label) for s in samples]
    signals = np.stack([s.record.samples for s in samples]).astype(np.float32)
    _save_dataset(ws, rows, signals)
    print(f"wrote {len(rows)} synthetic records to {ws.manifest}")


def cmd_prepare(cfg: RunConfig, args, ws: Workspace) -> None:
    if cfg.data.source == "synthetic":
        cmd_synth(cfg, args, ws)
        return
    root = cfg.data.ptbxl_root
    _, rows = load_ptbxl(root, cfg.data.likelihood_threshold)
    if not rows:
        raise ValueError("no single-label records found")
    first = load_ptbxl_signal(root, rows[0][0]).samples
    ws.root.mkdir(parents=True, exist_ok=True)
    with _atomic(ws.signals) as tmp:
        arr = np.lib.format.open_memmap(tmp, mode="w+", dtype=np.float32, shape=(len(rows),) + first.shape)
        for i, (meta, _) in enumerate(rows):
            samples = load_ptbxl_signal(root, meta).samples
            if samples.shape != first.shape:
                raise ValueError(f"record {meta.id}: shape {samples.shape}, expected {first.shape}")
            arr[i] = samples
        arr.flush()
        del arr
    with _atomic(ws.manifest) as tmp:
        write_manifest(tmp, rows)
    supports = class_supports(rows, fold=10)
    print(f"wrote {len(rows)} records; test-fold supports: "
          + ", ".join(f"{name} {n}" for name, n in supports.items()))


def cmd_text_dtt(cfg: RunConfig, args, ws: Workspace) -> None:
    rows = read_manifest(ws.require(ws.manifest, "prepare"))
    table = _statement_table(cfg)
    with _atomic(ws.texts("dtt")) as tmp:
        write_texts(tmp, (render_dtt(meta, table) for meta, _ in rows))
    print(f"wrote {len(rows)} data-to-text descriptions to {ws.texts('dtt')}")


def cmd_text_llm(cfg: RunConfig, args, ws: Workspace) -> None:
    rows = read_manifest(ws.require(ws.manifest, "prepare"))
    ids = [m.id for m, _ in rows]
    if cfg.text.llm_texts is not None:
        given = {t.id: t for t in read_texts(cfg.text.llm_texts)}
        missing = [i for i in ids if i not in given]
        if missing:
            raise ValueError(f"{len(missing)} records lack an LLM report in {cfg.text.llm_texts}, e.g. {missing[0]}")
        texts = [given[i] for i in ids]
    else:
        if not cfg.llm.base_url:
            raise ValueError("llm.base_url is not configured")
        cache = ReportCache(ws.root / "texts" / "llm_cache.jsonl")
        texts = generate_llm_reports([m for m, _ in rows], _statement_table(cfg), cfg.llm.endpoint(), cache)
    with _atomic(ws.texts("llm")) as tmp:
        write_texts(tmp, texts)
    print(f"wrote {len(texts)} LLM reports to {ws.texts('llm')}")


def _text_provider(cfg: RunConfig):
    kind = cfg.text.provider_kind
    if kind == "hash":
        return HashEmbedder(TEXT_DIM)
    if kind == "http":
        return HttpEmbeddingProvider(cfg.text.provider_arg, model=cfg.text.http_model, dim=TEXT_DIM)
    return None


def cmd_embed(cfg: RunConfig, args, ws: Workspace) -> None:
    rows = read_manifest(ws.require(ws.manifest, "prepare"))
    ids = [m.id for m, _ in rows]
    if args.mode is not None:
        if cfg.mode not in TEXT_KINDS:
            raise ValueError(f"mode {cfg.mode.value} uses no text embeddings")
        kinds = [TEXT_KINDS[cfg.mode]]
    else:
        kinds = [k for k in ("dtt", "llm") if ws.texts(k).exists() or cfg.text.provider_kind == "precomputed"]
        if not kinds:
            raise FileNotFoundError("no texts found; run `clic text-dtt` or `clic text-llm` first")
    provider = _text_provider(cfg)
    for kind in kinds:
        if provider is None:
            src = load_embedding_file(cfg.text.precomputed_path(kind), dim=TEXT_DIM)
            missing = [i for i in ids if i not in src]
            if missing:
                raise ValueError(f"precomputed {kind} embeddings lack {len(missing)} records, e.g. {missing[0]}")
            store = EmbeddingStore(TEXT_DIM, src.provider, {i: src[i] for i in ids})
        else:
            texts = {t.id: t for t in read_texts(ws.require(ws.texts(kind), f"text-{kind}"))}
            store = embed_records(provider, [texts[i] for i in ids], TEXT_DIM)
        ws.embeddings(kind).parent.mkdir(parents=True, exist_ok=True)
        write_embedding_file(store, ws.embeddings(kind))
        print(f"wrote {len(store)} {kind} embeddings ({store.provider}) to {ws.embeddings(kind)}")


# --------------------------------------------------------------------------
# Training stages
# --------------------------------------------------------------------------


def _split_data(cfg: RunConfig, ws: Workspace):
    rows = read_manifest(ws.require(ws.manifest, "prepare"))
    signals = np.load(ws.require(ws.signals, "prepare"), mmap_mode="r")
    store = None
    kind = TEXT_KINDS.get(cfg.mode)
    if kind is not None:
        store = load_embedding_file(ws.require(ws.embeddings(kind), "embed"), dim=TEXT_DIM)
    data = build_split_data(rows, signals, cfg.mode, store)
    return data, model_config_for(cfg.mode, data, TEXT_DIM, **cfg.encoder_overrides())


def _dump_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg: RunConfig, args, ws: Workspace) -> None:
    data, mcfg = _split_data(cfg, ws)
    result = run_experiment(mcfg, cfg.train_config(), data, out_dir=ws.runs, jobs=cfg.jobs)
    agg = result.aggregate
    print(f"{cfg.mode.value}: macro_f1 {agg['macro_f1'].cell()} accuracy {agg['accuracy'].cell()} "
          f"over {agg['accuracy'].n_runs} seed(s)")


def _trained_models(cfg: RunConfig, ws: Workspace, data, mcfg):
    for seed in cfg.train.seeds:
        ckpt = ws.require(ws.run_dir(cfg.mode, seed) / "checkpoint.pt", "train")
        model, payload = load_checkpoint(ckpt, expected=mcfg)
        if payload["preprocessing"]["context_scale"] != data.context_scale:
            raise ValueError(f"{ckpt}: context scaling differs from the current data")
        yield seed, model


def cmd_eval(cfg: RunConfig, args, ws: Workspace) -> None:
    data, mcfg = _split_data(cfg, ws)
    split = getattr(data, args.split)
    reports = []
    for seed, model in _trained_models(cfg, ws, data, mcfg):
        report = evaluate(model, split, cfg.train.batch_size).report()
        _dump_json(ws.run_dir(cfg.mode, seed) / f"eval_{args.split}.json", report.to_json(cfg.mode.value, seed))
        print(f"{cfg.mode.value} seed {seed} {args.split}: macro_f1 {report.macro_f1:.3f} "
              f"accuracy {report.accuracy:.3f}")
        reports.append(report)
    agg = aggregate_runs(reports)
    _dump_json(ws.runs / cfg.mode.value / f"eval_{args.split}_aggregate.json", agg.to_json())


def cmd_export_embeddings(cfg: RunConfig, args, ws: Workspace) -> None:
    data, mcfg = _split_data(cfg, ws)
    split = getattr(data, args.split)
    for seed, model in _trained_models(cfg, ws, data, mcfg):
        path = ws.root / "exports" / cfg.mode.value / f"{seed}_{args.split}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with _atomic(path) as tmp:
            export_embeddings(model, split, tmp, cfg.train.batch_size)
        print(f"wrote {len(split)} embeddings to {path}")


def cmd_report(cfg: RunConfig, args, ws: Workspace) -> None:
    aggs = {}
    for mode in MODE_ORDER:
        p = ws.runs / mode.value / "aggregate.json"
        if p.exists():
            aggs[DISPLAY_NAMES[mode]] = AggregateReport.from_json(json.loads(p.read_text()))
    if not aggs:
        raise FileNotFoundError(f"no aggregate results under {ws.runs}; run `clic train` first")
    md = render_table(aggs, "markdown")
    _write_text(ws.root / "report.md", md)
    _write_text(ws.root / "report.csv", render_table(aggs, "csv"))
    _write_text(ws.root / "report.json", render_table(aggs, "json"))
    sys.stdout.write(md)


COMMANDS = {
    "prepare": (cmd_prepare, "load PTB-XL (or synthesize) and write the manifest and signals"),
    "synth": (cmd_synth, "write a synthetic dataset"),
    "text-dtt": (cmd_text_dtt, "render data-to-text descriptions"),
    "text-llm": (cmd_text_llm, "generate or import LLM reports"),
    "embed": (cmd_embed, "embed texts with the configured provider"),
    "train": (cmd_train, "train one model per seed and aggregate test metrics"),
    "eval": (cmd_eval, "re-evaluate trained checkpoints"),
    "export-embeddings": (cmd_export_embeddings, "write penultimate-layer embeddings as CSV"),
    "report": (cmd_report, "render the results table across modes"),
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--mode", choices=[m.value for m in Mode], help="model variant")
    common.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
    common.add_argument("--jobs", type=int, help="seed runs trained concurrently")
    common.add_argument("--out", type=Path, help="output directory")

    parser = _Parser(prog="clic", description="ECG classification with contextual text.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("eval", "export-embeddings"):
            p.add_argument("--split", choices=["train", "val", "test"], default="test")
    return parser


def _load_config(args) -> RunConfig:
    raw = load_raw_config(args.config)
    if args.mode is not None:
        raw["mode"] = args.mode
    if args.seeds is not None:
        raw.setdefault("train", {})
        if not isinstance(raw["train"], dict):
            raise ConfigValidationError("expected a mapping", "train")
        raw["train"]["seeds"] = args.seeds
    if args.jobs is not None:
        raw["jobs"] = args.jobs
    if args.out is not None:
        raw["out"] = str(args.out.resolve())
    elif "out" not in raw:
        raw["out"] = str(Path("out").resolve())
    return validate_config(raw)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigParseError, ConfigValidationError) as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1

    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    handler = COMMANDS[args.command][0]
    try:
        handler(cfg, args, Workspace(cfg.out))
    except (ClicError, OSError, ValueError, httpx.HTTPError, TimeoutError) as exc:
        print(f"clic {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0
