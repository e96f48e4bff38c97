"""Backbone architectures, initialization, embedding forward pass and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Callable, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DivergenceError(FloatingPointError):
    """Non-finite values showed up in a forward pass or loss."""


class CheckpointError(ValueError):
    pass


def _conv(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1)


class SimpleCNN(nn.Module):
    """Four 3x3 conv blocks with two 2x2 max-pools; embeddings are the flat final map.

    For a 32x32 input the feature map is 256 x 8 x 8, i.e. 16384 features.
    """

    arch_id = "simple_cnn"
    input_shape = (3, 32, 32)
    embed_dim = 256 * 8 * 8

    def __init__(self):
        super().__init__()
        self.layers = nn.Sequential(
            _conv(3, 64), nn.BatchNorm2d(64, BN_EPS, BN_MOMENTUM), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(64, 128), nn.BatchNorm2d(128, BN_EPS, BN_MOMENTUM), nn.LeakyReLU(LEAKY_SLOPE),
            nn.MaxPool2d(2),
            _conv(128, 256), nn.BatchNorm2d(256, BN_EPS, BN_MOMENTUM), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(256, 256), nn.BatchNorm2d(256, BN_EPS, BN_MOMENTUM), nn.LeakyReLU(LEAKY_SLOPE),
            nn.MaxPool2d(2),
        )
        self.init_seed = None

    def forward(self, x: torch.Tensor, update_stats: bool = True) -> torch.Tensor:
        for layer in self.layers:
            if isinstance(layer, nn.BatchNorm2d) and self.training and not update_stats:
                # batch statistics without touching running stats or the counter
                x = F.batch_norm(x, None, None, layer.weight, layer.bias, True, 0.0, layer.eps)
            else:
                x = layer(x)
        return x.flatten(1)


ARCHITECTURES: dict[str, Callable[[], nn.Module]] = {"simple_cnn": SimpleCNN}


def register_architecture(arch_id: str, factory: Callable[[], nn.Module]) -> None:
    ARCHITECTURES[arch_id] = factory


def build(arch_id: str) -> nn.Module:
    try:
        factory = ARCHITECTURES[arch_id]
    except KeyError:
        raise ValueError(f"unknown architecture {arch_id!r}") from None
    return factory()


def init_model(arch_id: str, seed: int) -> nn.Module:
    """Build ``arch_id`` with fan-in uniform conv weights drawn from ``seed``.

    Conv weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), conv biases 0, BN scale 1,
    shift 0, running mean 0 and running variance 1.
    """
    model = build(arch_id)
    gen = torch.Generator().manual_seed(int(seed) % (1 << 64))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                bound = math.sqrt(1.0 / fan_in)
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()
    model.init_seed = int(seed)
    model.train()
    return model


def _as_pixels(batch) -> torch.Tensor:
    return batch.pixels if hasattr(batch, "pixels") else batch


def embed(model: nn.Module, batch, mode: str = "eval", update_stats: bool = True) -> torch.Tensor:
    """Forward ``batch`` through ``model`` and return the ``B x D`` embedding.

    ``mode="train"`` normalizes with batch statistics (and updates running stats
    unless ``update_stats`` is false); ``mode="eval"`` uses running statistics.
    The module's own train/eval flag is restored afterwards.
    """
    pixels = _as_pixels(batch)
    expected = tuple(getattr(model, "input_shape", pixels.shape[1:]))
    if pixels.dim() != 4 or tuple(pixels.shape[1:]) != expected:
        raise ValueError(f"input shape {tuple(pixels.shape)} does not match (B, {expected})")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = model.training
    model.train(mode == "train")
    try:
        out = model(pixels, update_stats=update_stats)
    finally:
        model.train(was_training)
    if not torch.isfinite(out).all():
        raise DivergenceError("non-finite activations in forward pass")
    return out


def param_count(model: nn.Module) -> int:
    """Learnable scalars only; running statistics are buffers and excluded."""
    return sum(p.numel() for p in model.parameters())


# Checkpoint layout (all integers little-endian):
#   8 bytes   magic b"HERDCKPT"
#   4 bytes   format version (uint32, currently 1)
#   8 bytes   manifest length L (uint64)
#   L bytes   UTF-8 JSON manifest: {"arch_id", "init_seed", "payload_bytes",
#             "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
#   payload   raw tensor bytes, concatenated in manifest order; offsets are
#             relative to the payload start. Floats are "<f4" (or "<f8" for
#             64-bit models), BN update counters "<i8".
MAGIC = b"HERDCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


def _state_arrays(model: nn.Module) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        out.append((name, np.array(arr, dtype=arr.dtype.newbyteorder("<"), order="C")))
    return out


def checkpoint_bytes(model: nn.Module) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, arr in _state_arrays(model):
        raw = arr.tobytes()
        tensors.append({
            "name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
            "offset": offset, "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({
        "arch_id": getattr(model, "arch_id", "simple_cnn"),
        "init_seed": getattr(model, "init_seed", None),
        "payload_bytes": offset,
        "tensors": tensors,
    }, sort_keys=True).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks)


def save_checkpoint(model: nn.Module, path: Union[str, Path]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)


def model_from_bytes(blob: bytes) -> nn.Module:
    if len(blob) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError("not a herdkit checkpoint (bad magic or version)")
    start = _HEADER.size + mlen
    if len(blob) < start:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(blob[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    payload = blob[start:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"payload is {len(payload)} bytes, manifest declares {manifest['payload_bytes']}"
        )
    model = build(manifest["arch_id"])
    expected = model.state_dict()
    state = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["nbytes"] != count * dtype.itemsize or entry["offset"] + entry["nbytes"] > len(payload):
            raise CheckpointError(f"manifest/payload mismatch for {entry['name']}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(dtype.newbyteorder("=")))
    if set(state) != set(expected):
        raise CheckpointError("checkpoint tensors do not match the architecture")
    for name, tensor in state.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"shape mismatch for {name}")
    float_dtype = next(t.dtype for t in state.values() if t.is_floating_point())
    model.to(float_dtype)
    model.load_state_dict(state)
    model.init_seed = manifest.get("init_seed")
    model.train()
    return model


def load_checkpoint(path: Union[str, Path]) -> nn.Module:
    return model_from_bytes(Path(path).read_bytes())
