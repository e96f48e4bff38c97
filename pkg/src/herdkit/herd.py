"""Peer-group self-distillation: role sampling, the stop-gradient step and the training loop.

Every batch, one peer is drawn as the student and ``T`` distinct others as
teachers. All of them see the same view of the batch; the student regresses onto
each teacher's output and only the student's optimizer steps.
"""

from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
from torch import nn

from .config import ExperimentConfig, MetricsLog, derive_seed, dump_config
from .data import Dataset, ImageBatch, epoch_batches, load_cifar10, num_batches, random_hflip
from .losses import get_loss
from .models import DivergenceError, embed, init_model, save_checkpoint
from .probes import ProbeRecord, evaluation_hook

log = logging.getLogger(__name__)

FLIP_PROBABILITY = 0.5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ADAMW_WEIGHT_DECAY = 0.01

TRAIN_LOG_HEADER = ("step", "student_id", "teacher_ids", "loss", "grad_norm")


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float) -> list:
    """Return ``theta - lr * g`` for every parameter."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    out = []
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
        out.append(p - lr * g)
    return out


class SGD(torch.optim.Optimizer):
    """Plain SGD: no momentum, no weight decay."""

    def __init__(self, params, lr: float):
        super().__init__(params, {"lr": lr})

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            params = [p for p in group["params"] if p.grad is not None]
            for p, new in zip(params, sgd_step(params, [p.grad for p in params], group["lr"])):
                p.copy_(new)


def make_optimizer(model: nn.Module, kind: str, lr: float) -> torch.optim.Optimizer:
    if kind == "sgd":
        return SGD(model.parameters(), lr)
    if kind == "adam":
        return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS,
                                weight_decay=0.0)
    if kind == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS,
                                 weight_decay=ADAMW_WEIGHT_DECAY)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class PeerPool:
    peers: list
    optimizers: list
    step_counts: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.peers) != len(self.optimizers):
            raise ValueError("one optimizer per peer required")
        if not self.step_counts:
            self.step_counts = [0] * len(self.peers)

    def __len__(self):
        return len(self.peers)


def build_pool(cfg: ExperimentConfig, dtype: torch.dtype = torch.float32) -> PeerPool:
    """Independently initialized peers, each with its own optimizer created once."""
    peers = []
    for i in range(cfg.num_peers):
        model = init_model(cfg.arch_id, derive_seed(cfg.master_seed, f"peer-init-{i}")).to(dtype)
        model.peer_id = i
        peers.append(model)
    optimizers = [make_optimizer(m, cfg.optimizer_kind, cfg.learning_rate) for m in peers]
    return PeerPool(peers, optimizers)


def sample_roles(n: int, t: int, rng: random.Random) -> tuple[int, list[int]]:
    """Draw ``t + 1`` distinct peers; the first is the student."""
    if t < 1 or t + 1 > n:
        raise ValueError(f"cannot draw a student and {t} teachers from {n} peers")
    idxs = rng.sample(range(n), t + 1)
    return idxs[0], idxs[1:]


def role_rng(master_seed: int, step: int) -> random.Random:
    return random.Random(derive_seed(master_seed, f"role-sample-{step}"))


@dataclass(frozen=True)
class BatchReport:
    global_step: int
    student_id: int
    teacher_ids: tuple
    loss_value: float
    grad_norm: float

    def row(self) -> tuple:
        return (self.global_step, self.student_id, ";".join(map(str, self.teacher_ids)),
                repr(self.loss_value), repr(self.grad_norm))


def train_batch(
    pool: PeerPool,
    batch: ImageBatch,
    cfg: ExperimentConfig,
    rng: random.Random,
    global_step: int = 0,
    metrics: Optional[MetricsLog] = None,
    loss_scale: float = 1.0,
) -> BatchReport:
    """One distillation step on an already-augmented batch."""
    student_id, teacher_ids = sample_roles(len(pool), cfg.num_teachers, rng)
    loss_fn = get_loss(cfg.loss_kind)
    student = pool.peers[student_id]
    dtype = next(student.parameters()).dtype
    view = batch.pixels.to(dtype)

    with torch.no_grad():
        # batch statistics, running stats left alone: teachers stay side-effect free
        targets = [embed(pool.peers[i], view, "train", update_stats=False) for i in teacher_ids]
    out = embed(student, view, "train")
    losses = [loss_fn(out, target) for target in targets]
    loss = torch.stack(losses).mean() * loss_scale
    if not torch.isfinite(loss):
        raise DivergenceError(
            f"non-finite loss at step {global_step}: student={student_id} teachers={teacher_ids}"
        )

    opt = pool.optimizers[student_id]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    grads = [p.grad for p in student.parameters() if p.grad is not None]
    grad_norm = float(torch.linalg.vector_norm(torch.stack([g.norm() for g in grads])))
    opt.step()
    pool.step_counts[student_id] += 1

    report = BatchReport(global_step, student_id, tuple(teacher_ids), loss.item(), grad_norm)
    if metrics is not None:
        metrics.append(global_step, student_id, "loss", report.loss_value)
        metrics.append(global_step, student_id, "grad_norm", report.grad_norm)
    return report


def write_train_log(reports: Sequence[BatchReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAIN_LOG_HEADER)
        writer.writerows(r.row() for r in reports)


def write_probe_log(records: Sequence[ProbeRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ProbeRecord.header)
        writer.writerows(r.row() for r in records)


@dataclass
class TrainResult:
    pool: PeerPool
    metrics: MetricsLog
    reports: list
    probe_records: list
    output_dir: Optional[Path]


def train(
    cfg: ExperimentConfig,
    train_set: Optional[Dataset] = None,
    test_set: Optional[Dataset] = None,
    write_outputs: bool = True,
    on_step: Optional[Callable[[BatchReport], None]] = None,
) -> TrainResult:
    """Run the full sequential training loop described by ``cfg``.

    Writes ``config.snapshot.toml``, ``peer_{i}.init.ckpt`` (before any update),
    ``train_log.csv``, ``probe_log.csv``, ``metrics.csv`` and ``peer_{i}.final.ckpt``
    under ``cfg.output_dir``. A failed run leaves a ``FAILED`` marker and no final
    checkpoints.
    """
    if train_set is None:
        train_set = load_cifar10(cfg.dataset_dir, "train")
    train_set = train_set.subset(cfg.train_subset_size)
    if cfg.eval_every_batches and test_set is None:
        test_set = load_cifar10(cfg.dataset_dir, "test")

    out_dir = Path(cfg.output_dir) if write_outputs else None
    pool = build_pool(cfg)
    metrics = MetricsLog()
    reports: list[BatchReport] = []
    records: list[ProbeRecord] = []

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "FAILED").unlink(missing_ok=True)
        (out_dir / "config.snapshot.toml").write_text(dump_config(cfg))
        for i, model in enumerate(pool.peers):
            save_checkpoint(model, out_dir / f"peer_{i}.init.ckpt")

    def hook(step):
        if cfg.eval_every_batches:
            records.extend(evaluation_hook(pool.peers, step, cfg, train_set, test_set, metrics))

    total = cfg.epochs * num_batches(len(train_set), cfg.batch_size)
    step = 0
    try:
        hook(0)
        for epoch in range(cfg.epochs):
            seed = derive_seed(cfg.master_seed, f"data-shuffle-epoch-{epoch}")
            for batch in epoch_batches(train_set, cfg.batch_size, seed, first_step=step):
                view = random_hflip(batch, FLIP_PROBABILITY,
                                    derive_seed(cfg.master_seed, f"flip-{step}"))
                report = train_batch(pool, view, cfg, role_rng(cfg.master_seed, step),
                                     step + 1, metrics)
                step += 1
                reports.append(report)
                if on_step is not None:
                    on_step(report)
                if cfg.eval_every_batches and step % cfg.eval_every_batches == 0:
                    hook(step)
            log.info("epoch %d/%d done (%d/%d batches)", epoch + 1, cfg.epochs, step, total)
        if cfg.eval_every_batches and step % cfg.eval_every_batches:
            hook(step)
    except BaseException as exc:
        if out_dir is not None:
            write_train_log(reports, out_dir / "train_log.csv")
            (out_dir / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        raise

    if out_dir is not None:
        write_train_log(reports, out_dir / "train_log.csv")
        write_probe_log(records, out_dir / "probe_log.csv")
        metrics.to_csv(out_dir / "metrics.csv")
        for i, model in enumerate(pool.peers):
            save_checkpoint(model, out_dir / f"peer_{i}.final.ckpt")
    return TrainResult(pool, metrics, reports, records, out_dir)
