"""Experiment runs, sweeps and summary reports.

A run directory holds:

``config.toml``    the exact configuration that produced the run
``report.jsonl``   the report stream: one JSON object per line, keys sorted
``summary.json``   final metrics (mean of the last five rounds)
``timings.json``   per-round wall-clock seconds (kept out of the stream)

The stream's first line is a header
``{"type": "header", "format": "flguard-report", "version": 1, "config_digest": ..., "malicious": [...]}``
followed by one ``{"type": "round", ...}`` record per round with fields
``round, selected, malicious_selected, survivors, scores, acc, asr,
update_norm, diagnostics``. A failed run ends with
``{"type": "failure", "error": "..."}``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import make_trigger_testset
from .config import ConfigError, ExperimentConfig, load_config, serialize_config
from .data import Dataset, generate_synthetic, partition, spec_from_degree
from .engine import FLContext, make_roster, run_round
from .nn import init_params
from .seeding import derive_seeds

log = logging.getLogger("flguard")

STREAM_FORMAT = "flguard-report"
STREAM_VERSION = 1
SUMMARY_WINDOW = 5
SWEEP_AXES = ("noniid_degree", "n_malicious", "poison_rate", "temperature", "layers")


@dataclass
class RunArchive:
    config: ExperimentConfig
    records: list[dict]
    summary: dict
    malicious: list[int]
    timings: list[float] = field(default_factory=list)
    failed: bool = False
    error: str | None = None
    axis_value: object = None

    def stream_text(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def build_context(config: ExperimentConfig) -> tuple[FLContext, np.ndarray]:
    seed = config.seed
    spec = config.model_spec()
    C = config.num_classes
    full = generate_synthetic(
        C, config.dims, config.train_per_class + config.test_per_class, config.separation,
        derive_seeds(seed, -1, -1, "dataset"),
    )
    train_idx, held_idx = [], []
    for c in range(C):
        idx = np.flatnonzero(full.labels == c)
        train_idx.append(idx[: config.train_per_class])
        held_idx.append(idx[config.train_per_class :])
    train_idx = np.sort(np.concatenate(train_idx))
    held_idx = np.sort(np.concatenate(held_idx))
    pool = Dataset(full.features[train_idx], full.labels[train_idx], C)
    rng = np.random.default_rng(derive_seeds(seed, -1, -1, "aux"))
    aux_pick = np.zeros(len(held_idx), dtype=bool)
    aux_pick[rng.choice(len(held_idx), size=config.aux_size, replace=False)] = True
    aux = full.batch(held_idx[aux_pick])
    test = full.batch(held_idx[~aux_pick])

    part = partition(pool, config.partition_spec(), config.n_clients, derive_seeds(seed, -1, -1, "partition"))
    roster = make_roster(part, config.n_malicious, seed)
    attack = config.attack_config()
    triggered = make_trigger_testset(test, attack.trigger) if attack.trigger is not None else None
    ctx = FLContext(
        spec=spec,
        pool=pool,
        roster=roster,
        aux=aux,
        test=test,
        triggered_test=triggered,
        attack=attack,
        defense=config.defense_config(),
        hyper=config.hyper(),
        per_round=config.per_round,
        master_seed=seed,
    )
    return ctx, init_params(spec, derive_seeds(seed, -1, -1, "init"))


def summarize(records: Sequence[dict], window: int = SUMMARY_WINDOW) -> dict:
    rounds = [r for r in records if r.get("type") == "round"]
    tail = rounds[-window:]
    out: dict = {"rounds": len(rounds), "window": len(tail)}
    out["acc"] = float(np.mean([r["acc"] for r in tail])) if tail else None
    asr = [r["asr"] for r in tail if r["asr"] is not None]
    out["asr"] = float(np.mean(asr)) if asr and len(asr) == len(tail) else None
    return out


def _write_run(archive: RunArchive, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.toml").write_text(serialize_config(archive.config), encoding="utf-8")
    (out_dir / "report.jsonl").write_text(archive.stream_text(), encoding="utf-8")
    (out_dir / "summary.json").write_text(json.dumps(archive.summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (out_dir / "timings.json").write_text(json.dumps(archive.timings) + "\n", encoding="utf-8")


def run_experiment(config: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> RunArchive:
    """Run every round of ``config``; persist the archive when ``out_dir`` is given.

    Exceptions are recorded in the stream as a failure marker and re-raised.
    """
    records: list[dict] = []
    timings: list[float] = []
    archive = RunArchive(config, records, {}, [], timings)
    try:
        ctx, theta = build_context(config)
        archive.malicious = sorted(ctx.roster.malicious)
        records.append({
            "type": "header",
            "format": STREAM_FORMAT,
            "version": STREAM_VERSION,
            "config_digest": config.digest(),
            "malicious": archive.malicious,
        })
        for r in range(config.rounds):
            theta, rep = run_round(ctx, theta, r)
            records.append(rep.record())
            timings.append(rep.elapsed_s)
            log.info("round %d acc=%.4f asr=%s survivors=%d/%d", r, rep.acc, rep.asr,
                     len(rep.survivors), len(rep.selected))
        archive.summary = summarize(records)
    except Exception as exc:
        archive.failed = True
        archive.error = f"{type(exc).__name__}: {exc}"
        records.append({"type": "failure", "error": archive.error})
        archive.summary = summarize(records)
        if out_dir is not None:
            _write_run(archive, Path(out_dir))
        raise
    if out_dir is not None:
        _write_run(archive, Path(out_dir))
    return archive


def apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "noniid_degree":
        spec = spec_from_degree(config.partition, float(value), config.num_classes)
        return config.with_values(partition_degree=spec.degree)
    if axis == "n_malicious":
        return config.with_values(n_malicious=int(value))
    if axis == "poison_rate":
        return config.with_values(poison_rate=float(value))
    if axis == "temperature":
        return config.with_values(tau_temp=float(value))
    if axis == "layers":
        return config.with_values(n_layers=int(value), layers=[])
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def sweep(
    config: ExperimentConfig, axis: str, values: Sequence, out_dir: str | os.PathLike | None = None
) -> list[RunArchive]:
    """One run per axis value, all sharing the base seed. Failed cells are marked, not fatal."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    archives = []
    for i, value in enumerate(values):
        cell_dir = Path(out_dir) / f"{i:03d}_{axis}_{value}" if out_dir is not None else None
        try:
            cfg = apply_axis(config, axis, value)
        except (ValueError, ConfigError) as exc:
            archives.append(RunArchive(config, [], {}, [], failed=True, error=str(exc), axis_value=value))
            continue
        try:
            arch = run_experiment(cfg, cell_dir)
        except Exception as exc:
            arch = RunArchive(cfg, [], {}, [], failed=True, error=f"{type(exc).__name__}: {exc}")
        arch.axis_value = value
        archives.append(arch)
    return archives


def exclusion_quality(records: Sequence[dict]) -> tuple[float | None, float | None]:
    """(precision, recall) of excluded clients against the true malicious set, pooled over rounds."""
    excluded = true_pos = malicious = 0
    for r in records:
        if r.get("type") != "round":
            continue
        bad = set(r["malicious_selected"])
        out = set(r["selected"]) - set(r["survivors"])
        excluded += len(out)
        true_pos += len(out & bad)
        malicious += len(bad)
    precision = true_pos / excluded if excluded else None
    recall = true_pos / malicious if malicious else None
    return precision, recall


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


REPORT_COLUMNS = ("digest", "axis_value", "defense", "attack", "partition", "acc", "asr", "excl_precision", "excl_recall", "status")
CURVE_COLUMNS = ("digest", "round", "acc", "asr", "n_survivors", "n_selected")


def report_rows(archives: Sequence[RunArchive]) -> list[dict]:
    rows = []
    for a in archives:
        p, r = exclusion_quality(a.records)
        rows.append({
            "digest": a.config.digest(),
            "axis_value": a.axis_value,
            "defense": a.config.defense,
            "attack": a.config.attack,
            "partition": f"{a.config.partition}({a.config.partition_degree:g})",
            "acc": a.summary.get("acc"),
            "asr": a.summary.get("asr"),
            "excl_precision": p,
            "excl_recall": r,
            "status": "failed" if a.failed else "ok",
        })
    return rows


def report(archives: Sequence[RunArchive], out_dir: str | os.PathLike | None = None) -> str:
    """Summary table text; with ``out_dir``, also ``summary.tsv`` and ``curves.tsv`` plot data.

    ``summary.tsv`` columns: digest, axis_value, defense, attack, partition,
    acc, asr, excl_precision, excl_recall, status.
    ``curves.tsv`` columns: digest, round, acc, asr, n_survivors, n_selected.
    Undefined values are written as ``n/a``.
    """
    if not archives:
        raise ValueError("report needs at least one archive")
    rows = report_rows(archives)
    widths = {c: max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in REPORT_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS)]
    lines += ["  ".join(_fmt(r[c]).ljust(widths[c]) for c in REPORT_COLUMNS) for r in rows]
    text = "\n".join(line.rstrip() for line in lines) + "\n"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.tsv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
        with open(out / "curves.tsv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(CURVE_COLUMNS)
            for a in archives:
                for rec in a.records:
                    if rec.get("type") == "round":
                        w.writerow([a.config.digest(), rec["round"], _fmt(rec["acc"]), _fmt(rec["asr"]),
                                    len(rec["survivors"]), len(rec["selected"])])
        (out / "report.txt").write_text(text, encoding="utf-8")
    return text


def load_archive(run_dir: str | os.PathLike) -> RunArchive:
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.toml")
    records = [json.loads(line) for line in (run_dir / "report.jsonl").read_text(encoding="utf-8").splitlines() if line]
    header = records[0] if records and records[0].get("type") == "header" else {}
    failure = next((r for r in records if r.get("type") == "failure"), None)
    return RunArchive(
        config, records, summarize(records), header.get("malicious", []),
        failed=failure is not None, error=failure["error"] if failure else None,
    )


def find_runs(root: str | os.PathLike) -> list[Path]:
    return sorted(p.parent for p in Path(root).rglob("report.jsonl"))
