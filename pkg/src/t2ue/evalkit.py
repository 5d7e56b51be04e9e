"""Retrieval and classification metrics, timing, checkpoint sweeps and report files."""

from __future__ import annotations

import csv
import json
import logging
import re
import statistics
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
TABLE_COLUMNS = ("run_id", "kind", "paradigm", "architecture", "noise", "defense", "poison_ratio",
                 "metric", "value")


# --- ranks --------------------------------------------------------------------

def rank_of_correct(similarity_row, correct_index: int) -> int:
    """1-based rank; equal scores rank the lower candidate index first."""
    row = np.asarray(similarity_row, dtype=np.float64)
    if not 0 <= correct_index < len(row):
        raise IndexError(f"correct_index {correct_index} out of range for {len(row)} candidates")
    if not np.isfinite(row).all():
        raise ValueError("similarity row has non-finite scores")
    s = row[correct_index]
    return int(1 + (row > s).sum() + (row[:correct_index] == s).sum())


def median_rank(ranks: Iterable[float]) -> float:
    ranks = list(ranks)
    if not ranks:
        raise ValueError("median of an empty rank list")
    return float(statistics.median(ranks))


def diagonal_ranks(sim: np.ndarray) -> np.ndarray:
    """Rank of the diagonal entry within each row, same tie rule as rank_of_correct."""
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    diag = sim[np.arange(n), np.arange(n)][:, None]
    lower = np.arange(n)[None, :] < np.arange(n)[:, None]
    return 1 + (sim > diag).sum(1) + ((sim == diag) & lower).sum(1)


@dataclass
class RetrievalResult:
    direction: str
    hit_at: dict[int, float]
    medr: float
    ranks: list[int] = field(repr=False)

    def summary(self) -> dict:
        return {"direction": self.direction, "medr": self.medr,
                **{f"hit@{k}": v for k, v in sorted(self.hit_at.items())}}

    def metrics(self, prefix: str = "") -> dict[str, float]:
        """Numeric fields keyed like ``{prefix}i2t_hit@1``."""
        head = f"{prefix}{self.direction.lower()}_"
        return {head + k: v for k, v in self.summary().items() if k != "direction"}


def result_from_ranks(direction: str, ranks, k_list=(1, 5, 10)) -> RetrievalResult:
    ranks = [int(r) for r in ranks]
    hits = {k: 100.0 * sum(r <= k for r in ranks) / len(ranks) for k in k_list}
    return RetrievalResult(direction, hits, median_rank(ranks), ranks)


def retrieval_from_similarity(sim, k_list=(1, 5, 10)) -> tuple[RetrievalResult, RetrievalResult]:
    """I2T and T2I results for a square image x text similarity matrix with pairs on the diagonal."""
    sim = np.asarray(sim, dtype=np.float64)
    return (result_from_ranks("I2T", diagonal_ranks(sim), k_list),
            result_from_ranks("T2I", diagonal_ranks(sim.T), k_list))


def class_pools(samples) -> list[list[int]]:
    """Split a class-balanced set into pools holding one sample per class.

    Within a pool every caption names a different class, so the correct caption
    is identifiable from the image alone.
    """
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.class_id, []).append(i)
    n = min(len(v) for v in by_class.values())
    return [[by_class[c][j] for c in sorted(by_class)] for j in range(n)]


def retrieval_eval(model, samples, k_list=(1, 5, 10), pools: list[list[int]] | None = None
                   ) -> tuple[RetrievalResult, RetrievalResult]:
    """Embed every image and caption once, rank within each pool, aggregate all ranks."""
    with torch.no_grad():
        from .surrogate import images_tensor
        img = model.encode_image(images_tensor(samples)).double().numpy()
        txt, _ = model.encode_text([s.caption for s in samples])
        txt = txt.double().numpy()
    if pools is None:
        pools = [list(range(len(samples)))]
    i2t, t2i = [], []
    for pool in pools:
        caps = [samples[i].caption for i in pool]
        if len(set(caps)) < len(caps):
            warnings.warn("duplicate captions in a retrieval pool; ties resolved by index", stacklevel=2)
        sim = img[pool] @ txt[pool].T
        i2t.extend(diagonal_ranks(sim))
        t2i.extend(diagonal_ranks(sim.T))
    return result_from_ranks("I2T", i2t, k_list), result_from_ranks("T2I", t2i, k_list)


def classify_eval(model, samples, batch_size: int = 512) -> float:
    """Top-1 accuracy in percent, rounded to 2 decimals; ties go to the lowest class index."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty set")
    from .surrogate import images_tensor
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            logits = model(images_tensor(chunk))
            labels = torch.tensor([s.class_id for s in chunk])
            correct += int((logits.argmax(1) == labels).sum())
    return round(100.0 * correct / len(samples), 2)


# --- timing and sweeps -----------------------------------------------------------

def median_time(fn: Callable[[], object], reps: int = 3) -> float:
    if reps < 1:
        raise ValueError("reps must be >= 1")
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(statistics.median(times))


def time_generation(method: str, dataset, reps: int = 3, *, generator=None, surrogate=None, spec=None,
                    em_config=None, seed: int = 0) -> float:
    """Median wall-clock seconds to produce sample-wise noise for every sample in ``dataset``.

    Excludes dataset I/O. t2ue covers plan construction and generator forward passes;
    em covers the whole bilevel loop; random covers sampling and quantization.
    """
    from . import protector, victim

    if method == "t2ue":
        if generator is None or surrogate is None or spec is None:
            raise ValueError("t2ue timing needs generator, surrogate and spec")

        def run():
            plan = protector.make_plan("sample_wise", spec, seed, split=dataset[0].id.split("-")[0],
                                       template_policy="own", epsilon=generator.epsilon)
            plan.entries = {s.id: plan.entries[s.id] for s in dataset}
            return protector.noise_bank(generator, surrogate, plan)
    elif method == "em":
        cfg = em_config or victim.EMConfig(mode="sample_wise")

        def run():
            return victim.em_baseline_noise(dataset, cfg)
    elif method == "random":
        def run():
            return victim.random_noise_bank(dataset, 8 / 255, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    return median_time(run, reps)


_EPOCH_RE = re.compile(r"epoch(\d+)")


def sweep_checkpoints(checkpoint_dir: str | Path, eval_fn: Callable[[Path], float],
                      out_dir: str | Path | None = None, pattern: str = "generator_epoch*.ckpt"
                      ) -> list[tuple[int, float]]:
    """Evaluate every readable generator checkpoint; returns (epoch, metric) sorted by epoch."""
    from .generator import GeneratorModel

    paths = sorted(Path(checkpoint_dir).glob(pattern))
    if len(paths) < 2:
        raise ValueError(f"need at least 2 checkpoints in {checkpoint_dir}, found {len(paths)}")
    curve = []
    for p in paths:
        try:
            GeneratorModel.load(p)
        except Exception as e:  # noqa: BLE001 - any unreadable file is skipped
            log.warning("skipping unreadable checkpoint %s: %s", p, e)
            continue
        m = _EPOCH_RE.search(p.name)
        epoch = int(m.group(1)) if m else len(curve)
        curve.append((epoch, float(eval_fn(p))))
    curve.sort()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "sweep.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "metric"])
            w.writerows(curve)
        line_plot(out_dir / "sweep.svg", {"victim accuracy": curve}, "generator epoch", "clean test top-1 (%)")
    return curve


# --- report -----------------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "runs", "criteria"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "meta": {"type": "object"},
        "runs": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["kind", "metrics"],
                "properties": {
                    "kind": {"type": "string"},
                    "config": {"type": "object"},
                    "metrics": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
                    "curve": {"type": "array", "items": {"type": "array", "items": {"type": ["number", "null"]}}},
                    "zero_contact": {"type": "boolean"},
                },
            },
        },
        "criteria": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["passed", "detail"],
                "properties": {"passed": {"type": "boolean"}, "detail": {"type": "string"}},
            },
        },
    },
}


def canonical(obj):
    """Round floats to 6 significant digits, recursively; tuples become lists."""
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(f"{x:.6g}") if np.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonical(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_canonical(obj) -> str:
    return json.dumps(canonical(obj), sort_keys=True, indent=1) + "\n"


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)


def line_plot(path: str | Path, series: dict[str, list], xlabel: str, ylabel: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "t2ue"
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, pts in sorted(series.items()):
        if pts:
            xs, ys = zip(*[(p[0], p[1]) for p in pts])
            ax.plot(xs, ys, marker=".", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def emit_report(results: dict, out_dir: str | Path) -> dict[str, Path]:
    """Write report.json, tables.csv and one SVG per group of learning curves."""
    runs = results.get("runs") or {}
    if not runs:
        raise ValueError("no results to report")
    report = canonical({"schema_version": REPORT_SCHEMA_VERSION, "meta": results.get("meta", {}),
                        "runs": runs, "criteria": results.get("criteria", {})})
    validate_report(report)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"report": out_dir / "report.json", "tables": out_dir / "tables.csv"}
    paths["report"].write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")

    with open(paths["tables"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TABLE_COLUMNS)
        for run_id in sorted(runs):
            run = report["runs"][run_id]
            cfg = run.get("config", {})
            for metric in sorted(run["metrics"]):
                w.writerow([run_id, run["kind"], cfg.get("paradigm", ""), cfg.get("architecture", ""),
                            cfg.get("noise", ""), cfg.get("defense", ""), cfg.get("poison_ratio", ""),
                            metric, run["metrics"][metric]])

    groups: dict[str, dict[str, list]] = {}
    for run_id in sorted(runs):
        run = report["runs"][run_id]
        if run.get("curve"):
            groups.setdefault(run["kind"], {})[run_id] = [(r[0], r[2]) for r in run["curve"]]
    for kind, series in groups.items():
        paths[f"plot_{kind}"] = line_plot(out_dir / f"curves_{kind}.svg", series, "epoch", "clean test metric")
    return paths
