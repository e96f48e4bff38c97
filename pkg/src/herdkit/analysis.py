"""Post-training analysis: distance shift, ensembles, collapse checks, sweeps and plot data."""

from __future__ import annotations

import csv
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from torch import nn

from .config import (
    ConfigError, ExperimentConfig, MetricsLog, ProbeConfig, config_from_dict, dump_config,
    parse_document,
)
from .data import Dataset
from .probes import extract_embeddings, run_probe

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


def cosine_distance(u, v) -> float:
    """``1 - u.v / (|u| |v|)``, clipped to ``[0, 2]``."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(u), NORM_EPS) * max(np.linalg.norm(v), NORM_EPS)
    return float(np.clip(1.0 - u @ v / denom, 0.0, 2.0))


def paired_cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.maximum(np.linalg.norm(a, axis=1), NORM_EPS)
    nb = np.maximum(np.linalg.norm(b, axis=1), NORM_EPS)
    return np.clip(1.0 - np.einsum("ij,ij->i", a, b) / (na * nb), 0.0, 2.0)


@dataclass
class DistanceShiftReport:
    d_before: np.ndarray
    d_after: np.ndarray
    sample_indices: np.ndarray
    pairing: np.ndarray  # row i is compared with row pairing[i]
    pairing_seed: int

    @property
    def pairs(self) -> list:
        return list(zip(self.d_before.tolist(), self.d_after.tolist()))

    @property
    def mean_before(self) -> float:
        return float(self.d_before.mean())

    @property
    def mean_after(self) -> float:
        return float(self.d_after.mean())

    @property
    def fraction_increased(self) -> float:
        return float(np.mean(self.d_after > self.d_before))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("image_index", "paired_index", "d_before", "d_after"))
            for i, j, b, a in zip(self.sample_indices, self.sample_indices[self.pairing],
                                  self.d_before, self.d_after):
                writer.writerow((int(i), int(j), repr(float(b)), repr(float(a))))


def distance_shift(
    model_init: nn.Module,
    model_trained: nn.Module,
    dataset: Dataset,
    sample_size: int = 2048,
    pairing_seed: int = 0,
) -> DistanceShiftReport:
    """Cosine distances of shuffled image pairs before and after training.

    One seeded permutation pairs the rows for both models.
    """
    if model_init is None:
        raise ValueError("missing initialization checkpoint")
    rng = np.random.default_rng(pairing_seed)
    size = min(sample_size, len(dataset))
    sample = np.sort(rng.choice(len(dataset), size=size, replace=False))
    pairing = rng.permutation(size)
    subset = Dataset(dataset.images[sample], dataset.labels[sample], dataset.split)
    before = extract_embeddings([model_init], subset).features.double().numpy()
    after = extract_embeddings([model_trained], subset).features.double().numpy()
    return DistanceShiftReport(
        paired_cosine_distances(before, before[pairing]),
        paired_cosine_distances(after, after[pairing]),
        sample, pairing, pairing_seed,
    )


def embedding_spread(model: nn.Module, dataset: Dataset, size: int = 1024) -> float:
    """Mean over feature dimensions of the per-dimension std across ``size`` images."""
    feats = extract_embeddings([model], dataset, size).features.double()
    return float(feats.std(dim=0).mean())


def ensemble_eval(
    models: Sequence[nn.Module],
    fit_set: Dataset,
    test_set: Dataset,
    sizes: Sequence[int],
    probe_cfg: ProbeConfig = ProbeConfig(),
    kind: str = "linear",
    seed: int = 0,
) -> list:
    """Probe the concatenated embeddings of the first ``k`` models for each ``k`` in ``sizes``."""
    results = []
    for k in sizes:
        if not 1 <= k <= len(models):
            raise ValueError(f"ensemble size {k} outside 1..{len(models)}")
        chosen = list(models[:k])
        fit = extract_embeddings(chosen, fit_set, probe_cfg.fit_subset)
        test = extract_embeddings(chosen, test_set, probe_cfg.test_subset)
        results.append((k, run_probe(kind, fit, test, probe_cfg, seed, num_classes=10)))
    return results


SWEEP_AXES = {
    "peers": "num_peers",
    "teachers": "num_teachers",
    "lr": "learning_rate",
    "loss": "loss_kind",
}
SUMMARY_HEADER = (
    "run_id", "status", "num_peers", "num_teachers", "learning_rate", "loss_kind", "master_seed",
    "final_step", "mean_final_accuracy", "mean_final_macro_f1", "error",
)


@dataclass
class SweepSpec:
    base: ExperimentConfig
    axes: dict  # axis name ("peers", "teachers", "lr", "loss") -> list of values
    replicate_seeds: list = field(default_factory=lambda: [0])
    max_runs: int = 64

    def __post_init__(self):
        if not self.axes:
            raise ConfigError("a sweep needs at least one axis")
        for name, values in self.axes.items():
            if name not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {name!r}")
            if not values:
                raise ConfigError(f"sweep axis {name!r} is empty")
        if not self.replicate_seeds:
            raise ConfigError("replicate_seeds must be non-empty")
        if len(self.grid()) > self.max_runs:
            raise ConfigError(f"sweep has {len(self.grid())} runs, cap is {self.max_runs}")

    def grid(self) -> list[dict]:
        """Config changes for every grid point and replicate, in run order."""
        names = list(self.axes)
        points = []
        for values in itertools.product(*(self.axes[n] for n in names)):
            for seed in self.replicate_seeds:
                changes = {SWEEP_AXES[n]: v for n, v in zip(names, values)}
                points.append({**changes, "master_seed": seed})
        return points


def load_sweep_spec(text: str) -> SweepSpec:
    """Base config keys at top level plus a ``[sweep]`` table of axis lists."""
    doc = parse_document(text)
    sweep = doc.pop("sweep", None)
    if not isinstance(sweep, dict):
        raise ConfigError("missing [sweep] table")
    seeds = sweep.pop("replicate_seeds", [doc.get("master_seed", 0)])
    max_runs = sweep.pop("max_runs", 64)
    return SweepSpec(config_from_dict(doc), sweep, list(seeds), int(max_runs))


def _run_id(index: int, point: dict, spec: SweepSpec) -> str:
    parts = [f"{n}={point[SWEEP_AXES[n]]}" for n in spec.axes]
    return f"run_{index:03d}_" + "_".join(parts) + f"_seed={point['master_seed']}"


def _execute(job: tuple) -> dict:
    from .herd import train  # deferred: keeps worker start-up cheap

    base, changes = job
    try:
        cfg = base.replace(**changes)
        run_dir = Path(cfg.output_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        result = train(cfg)
    except Exception as exc:  # per-run failures are recorded, the sweep continues
        log.warning("sweep run %s failed: %s", changes.get("output_dir"), exc)
        return {"status": "error", "error": f"{type(exc).__name__}: {exc}"}
    final = {}
    for rec in result.probe_records:
        final.setdefault(rec.peer_id, rec)
        if rec.step >= final[rec.peer_id].step:
            final[rec.peer_id] = rec
    accs = [r.result.accuracy for r in final.values()]
    f1s = [r.result.macro_f1 for r in final.values()]
    return {
        "status": "ok", "error": "",
        "final_step": len(result.reports),
        "mean_final_accuracy": repr(float(np.mean(accs))) if accs else "",
        "mean_final_macro_f1": repr(float(np.mean(f1s))) if f1s else "",
    }


def sweep_workers() -> int:
    try:
        return max(1, int(os.environ.get("HERDKIT_THREADS", "1")))
    except ValueError:
        return 1


def run_sweep(spec: SweepSpec, sweep_dir: Union[str, Path], workers: Optional[int] = None) -> Path:
    """One fully seeded run per grid point, plus a merged ``sweep_summary.csv``."""
    sweep_dir = Path(sweep_dir)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for index, point in enumerate(spec.grid()):
        run_dir = sweep_dir / _run_id(index, point, spec)
        jobs.append((spec.base, {**point, "output_dir": str(run_dir)}))
    workers = workers or sweep_workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_execute, jobs))
    else:
        outcomes = [_execute(job) for job in jobs]

    summary = sweep_dir / "sweep_summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.DictWriter(fh, SUMMARY_HEADER, lineterminator="\n", restval="")
        writer.writeheader()
        for (base, changes), outcome in zip(jobs, outcomes):
            merged = {f: getattr(base, f) for f in ("num_peers", "num_teachers",
                                                    "learning_rate", "loss_kind")}
            merged.update(changes)
            writer.writerow({
                "run_id": Path(changes["output_dir"]).name,
                "num_peers": merged["num_peers"], "num_teachers": merged["num_teachers"],
                "learning_rate": repr(float(merged["learning_rate"])),
                "loss_kind": merged["loss_kind"],
                "master_seed": changes["master_seed"], **outcome,
            })
    (sweep_dir / "sweep_base.toml").write_text(dump_config(spec.base))
    return sweep_dir


PLOT_KINDS = ("group-dynamics", "loss", "grad-norm", "distance-shift")


def emit_plot_data(source, kind: str, path: Union[str, Path], metric: str = "linear_accuracy",
                   svg_path: Optional[Union[str, Path]] = None) -> int:
    """Write long-format plot data; returns the number of data rows.

    ``group-dynamics``, ``loss`` and ``grad-norm`` take a :class:`MetricsLog` and
    emit ``series,step,value`` with one series per peer. ``distance-shift`` takes
    a :class:`DistanceShiftReport` and emits ``d_before,d_after`` scatter pairs.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    if kind == "distance-shift":
        header = ("d_before", "d_after")
        rows = [(repr(float(b)), repr(float(a))) for b, a in source.pairs]
    else:
        name = {"group-dynamics": metric, "loss": "loss", "grad-norm": "grad_norm"}[kind]
        header = ("series", "step", "value")
        rows = [(f"peer-{peer}" if peer != "ensemble" else "ensemble", step, repr(value))
                for step, peer, _, value in source.select(name)]
        rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    if svg_path is not None:
        _render_svg(kind, header, rows, svg_path)
    return len(rows)


def _render_svg(kind, header, rows, svg_path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "distance-shift":
        xs = [float(r[0]) for r in rows]
        ys = [float(r[1]) for r in rows]
        ax.scatter(xs, ys, s=2)
        ax.plot([0, 2], [0, 2], "k--", lw=0.8)
        ax.set_xlabel("cosine distance (untrained)")
        ax.set_ylabel("cosine distance (trained)")
    else:
        for series, group in itertools.groupby(rows, key=lambda r: r[0]):
            group = list(group)
            ax.plot([g[1] for g in group], [float(g[2]) for g in group], label=series)
        ax.set_xlabel("step")
        ax.set_ylabel(kind)
        if rows:
            ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)


def load_metrics(run_dir: Union[str, Path]) -> MetricsLog:
    return MetricsLog.from_csv(Path(run_dir) / "metrics.csv")


def final_probe_accuracy(metrics: MetricsLog, metric: str = "linear_accuracy") -> dict:
    """Last logged value of ``metric`` for each peer."""
    out = {}
    for step, peer, _, value in metrics.select(metric):
        out[peer] = value
    return out
