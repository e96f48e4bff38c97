"""Distillation losses between a student embedding and a (frozen) teacher embedding."""

import torch

NORM_EPS = 1e-12


def _check(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean of ``(a - b)**2`` over all ``B * D`` elements."""
    _check(a, b)
    return ((a - b) ** 2).mean()


def cosine_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``1 - cos(a_i, b_i)``; norms are clamped at 1e-12."""
    _check(a, b)
    a = a.flatten(1)
    b = b.flatten(1)
    na = a.norm(dim=1).clamp_min(NORM_EPS)
    nb = b.norm(dim=1).clamp_min(NORM_EPS)
    return (1.0 - (a * b).sum(dim=1) / (na * nb)).mean()


def salient_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per sample, the largest squared difference over feature dimensions; batch mean.

    Only the single most divergent dimension of each sample receives gradient.
    """
    _check(a, b)
    sq = ((a - b) ** 2).flatten(1)
    return sq.max(dim=1).values.mean()


LOSSES = {"mse": mse_loss, "cosine": cosine_loss, "salient": salient_loss}


def get_loss(kind: str):
    try:
        return LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}; expected one of {sorted(LOSSES)}") from None

