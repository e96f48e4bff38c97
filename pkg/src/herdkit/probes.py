"""Frozen-backbone evaluation: embedding extraction, KNN / linear / MLP probes, macro-F1."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig, MetricsLog, ProbeConfig, derive_seed
from .data import Dataset, eval_batches
from .models import DivergenceError, LEAKY_SLOPE, embed


@dataclass
class EmbeddingTable:
    features: torch.Tensor  # M x D
    labels: np.ndarray
    source_peer_ids: tuple = ()

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ProbeResult:
    probe_kind: str
    macro_f1: float
    accuracy: float
    train_size: int
    test_size: int


@torch.no_grad()
def extract_embeddings(
    models: Sequence[nn.Module],
    dataset: Dataset,
    subset: Optional[int] = None,
    peer_ids: Optional[Sequence] = None,
    batch_size: int = 256,
) -> EmbeddingTable:
    """Eval-mode embeddings of unaugmented images; several models are concatenated feature-wise."""
    if isinstance(models, nn.Module):
        models = [models]
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    if len({getattr(m, "arch_id", type(m).__name__) for m in models}) > 1:
        raise ValueError("models must share an architecture")
    dataset = dataset.subset(subset)
    dtype = next(models[0].parameters()).dtype
    rows = []
    for batch in eval_batches(dataset, batch_size):
        pixels = batch.pixels.to(dtype)
        rows.append(torch.cat([embed(m, pixels, "eval") for m in models], dim=1))
    features = torch.cat(rows) if rows else torch.empty(0, 0, dtype=dtype)
    ids = tuple(peer_ids) if peer_ids is not None else tuple(range(len(models)))
    return EmbeddingTable(features, dataset.labels.copy(), ids)


def confusion_counts(predictions, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def macro_f1(predictions, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1, in percent.

    A class that appears in neither predictions nor labels scores 0.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    cm = confusion_counts(predictions, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    return float(100.0 * f1.mean())


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(100.0 * np.mean(predictions == labels))


def _num_classes(train: EmbeddingTable, test: EmbeddingTable, num_classes: Optional[int]) -> int:
    if num_classes is not None:
        return num_classes
    return int(max(train.labels.max(initial=0), test.labels.max(initial=0))) + 1


def _result(kind, preds, train, test, num_classes) -> ProbeResult:
    return ProbeResult(
        kind, macro_f1(preds, test.labels, num_classes), accuracy(preds, test.labels),
        len(train), len(test),
    )


def _pairwise_distances(queries: torch.Tensor, points: torch.Tensor, metric: str) -> torch.Tensor:
    if metric == "euclidean":
        sq = (queries * queries).sum(1, keepdim=True) + (points * points).sum(1) - 2 * queries @ points.T
        return sq.clamp_min(0).sqrt()
    if metric == "cosine":
        qn = queries / queries.norm(dim=1, keepdim=True).clamp_min(1e-12)
        pn = points / points.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return 1 - qn @ pn.T
    raise ValueError(f"unknown metric {metric!r}")


def knn_predict(
    train: EmbeddingTable, queries: torch.Tensor, k: int, num_classes: int,
    metric: str = "euclidean", chunk: int = 256,
) -> np.ndarray:
    """Majority vote among the ``k`` nearest fit points.

    Equal-distance neighbours are ordered by fit index. Vote ties go to the tied
    class with the smallest summed neighbour distance, then the smallest label.
    """
    if len(train) == 0:
        raise ValueError("empty fit set")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(train))
    points = train.features
    fit_labels = np.asarray(train.labels)
    preds = []
    for start in range(0, queries.shape[0], chunk):
        dist = _pairwise_distances(queries[start:start + chunk].to(points.dtype), points, metric)
        dist = dist.double().numpy()
        nn_idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
        nn_dist = np.take_along_axis(dist, nn_idx, axis=1)
        nn_lab = fit_labels[nn_idx]
        rows = np.repeat(np.arange(len(nn_idx)), k)
        counts = np.zeros((len(nn_idx), num_classes), dtype=np.int64)
        sums = np.zeros((len(nn_idx), num_classes))
        np.add.at(counts, (rows, nn_lab.ravel()), 1)
        np.add.at(sums, (rows, nn_lab.ravel()), nn_dist.ravel())
        tied = counts == counts.max(axis=1, keepdims=True)
        preds.append(np.argmin(np.where(tied, sums, np.inf), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def knn_probe(
    train: EmbeddingTable, test: EmbeddingTable, k: int = 5,
    metric: str = "euclidean", num_classes: Optional[int] = None,
) -> ProbeResult:
    if train.dim != test.dim:
        raise ValueError(f"feature dims differ: {train.dim} vs {test.dim}")
    num_classes = _num_classes(train, test, num_classes)
    preds = knn_predict(train, test.features, k, num_classes, metric)
    return _result("knn", preds, train, test, num_classes)


def _fan_in_uniform_(layer: nn.Linear, gen: torch.Generator) -> None:
    bound = math.sqrt(1.0 / layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()


def build_probe_head(kind: str, dim: int, num_classes: int, cfg: ProbeConfig, seed: int,
                     dtype=torch.float32) -> nn.Module:
    if kind == "linear":
        head = nn.Linear(dim, num_classes)
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
    elif kind == "mlp":
        if cfg.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be >= 1")
        gen = torch.Generator().manual_seed(seed)
        head = nn.Sequential(
            nn.Linear(dim, cfg.mlp_hidden), nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(cfg.mlp_hidden, num_classes),
        )
        _fan_in_uniform_(head[0], gen)
        _fan_in_uniform_(head[2], gen)
    else:
        raise ValueError(f"unknown probe head {kind!r}")
    return head.to(dtype)


def fit_probe_head(head: nn.Module, train: EmbeddingTable, cfg: ProbeConfig, seed: int) -> nn.Module:
    """Plain minibatch SGD on softmax cross-entropy over frozen features."""
    opt = torch.optim.SGD(head.parameters(), lr=cfg.probe_lr)
    gen = torch.Generator().manual_seed(seed)
    x = train.features
    y = torch.as_tensor(np.asarray(train.labels), dtype=torch.long)
    for epoch in range(cfg.probe_epochs):
        order = torch.randperm(len(y), generator=gen)
        for start in range(0, len(y), cfg.probe_batch_size):
            idx = order[start:start + cfg.probe_batch_size]
            loss = F.cross_entropy(head(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite probe loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    return head


@torch.no_grad()
def predict_head(head: nn.Module, features: torch.Tensor, chunk: int = 4096) -> np.ndarray:
    out = [head(features[i:i + chunk]).argmax(1) for i in range(0, features.shape[0], chunk)]
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def _trained_probe(kind, train, test, cfg, seed, num_classes) -> ProbeResult:
    if train.dim != test.dim:
        raise ValueError(f"feature dims differ: {train.dim} vs {test.dim}")
    if len(train) == 0:
        raise ValueError("empty fit set")
    num_classes = _num_classes(train, test, num_classes)
    head = build_probe_head(kind, train.dim, num_classes, cfg, seed, train.features.dtype)
    fit_probe_head(head, train, cfg, seed)
    return _result(kind, predict_head(head, test.features), train, test, num_classes)


def linear_probe(train: EmbeddingTable, test: EmbeddingTable, cfg: ProbeConfig = ProbeConfig(),
                 seed: int = 0, num_classes: Optional[int] = None) -> ProbeResult:
    """Zero-initialized affine classifier on frozen features."""
    return _trained_probe("linear", train, test, cfg, seed, num_classes)


def mlp_probe(train: EmbeddingTable, test: EmbeddingTable, cfg: ProbeConfig = ProbeConfig(),
              seed: int = 0, num_classes: Optional[int] = None) -> ProbeResult:
    """One hidden LeakyReLU layer of width ``cfg.mlp_hidden``, trained like the linear probe."""
    return _trained_probe("mlp", train, test, cfg, seed, num_classes)


def run_probe(kind: str, train: EmbeddingTable, test: EmbeddingTable, cfg: ProbeConfig,
              seed: int = 0, num_classes: Optional[int] = None) -> ProbeResult:
    if kind == "knn":
        return knn_probe(train, test, cfg.knn_k, num_classes=num_classes)
    if kind == "linear":
        return linear_probe(train, test, cfg, seed, num_classes)
    if kind == "mlp":
        return mlp_probe(train, test, cfg, seed, num_classes)
    raise ValueError(f"unknown probe kind {kind!r}")


@dataclass(frozen=True)
class ProbeRecord:
    step: int
    peer_id: object
    result: ProbeResult

    header = ("step", "peer_id", "probe_kind", "macro_f1", "accuracy", "fit_size", "test_size")

    def row(self) -> tuple:
        r = self.result
        return (self.step, self.peer_id, r.probe_kind, repr(r.macro_f1), repr(r.accuracy),
                r.train_size, r.test_size)


def evaluation_hook(
    peers: Sequence[nn.Module],
    step: int,
    cfg: ExperimentConfig,
    fit_set: Dataset,
    test_set: Dataset,
    log: Optional[MetricsLog] = None,
) -> list[ProbeRecord]:
    """Probe each configured peer at ``step``; peers are read, never modified."""
    if cfg.eval_every_batches == 0:
        return []
    pcfg = cfg.probe_config
    peer_ids = pcfg.hook_peers if pcfg.hook_peers is not None else range(len(peers))
    records = []
    for peer_id in peer_ids:
        model = peers[peer_id]
        fit = extract_embeddings([model], fit_set, pcfg.fit_subset, [peer_id])
        test = extract_embeddings([model], test_set, pcfg.test_subset, [peer_id])
        for kind in pcfg.hook_probes:
            seed = derive_seed(cfg.master_seed, f"probe-{kind}-step-{step}-peer-{peer_id}")
            result = run_probe(kind, fit, test, pcfg, seed, num_classes=10)
            records.append(ProbeRecord(step, peer_id, result))
            if log is not None:
                log.append(step, peer_id, f"{kind}_macro_f1", result.macro_f1)
                log.append(step, peer_id, f"{kind}_accuracy", result.accuracy)
    return records
