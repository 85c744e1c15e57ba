"""Small neural-network layer built on torch: functional layer wrappers,
gradients, the Adam step, and a versioned checkpoint container.

Checkpoint layout (little-endian)::

    8 bytes   magic  b"RISCKPT\\0"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header {"version", "topology", "extra", "tensors": [...]}
    ...       raw tensor bytes, concatenated in header order

Each tensor entry records name, dtype, shape, byte offset and byte count.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"RISCKPT\0"
CHECKPOINT_VERSION = 1

__all__ = [
    "ModelParams",
    "CheckpointError",
    "CheckpointVersionError",
    "activation",
    "dense_forward",
    "conv3d_forward",
    "grad",
    "make_optimizer",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
    "model_params",
    "load_state",
    "seeded_init",
]


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class ModelParams:
    topology: dict
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def activation(x, kind: str = "relu"):
    t = torch.as_tensor(x)
    if kind == "relu":
        y = F.relu(t)
    elif kind == "sigmoid":
        y = torch.sigmoid(t)
    elif kind == "silu":
        y = F.silu(t)
    elif kind == "identity":
        y = t
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return y.numpy() if isinstance(x, np.ndarray) else y


def _as_tensor_like(layer, x):
    w = next(layer.parameters())
    return torch.as_tensor(x, dtype=w.dtype)


def dense_forward(layer: torch.nn.Linear, x):
    t = _as_tensor_like(layer, x)
    if t.shape[-1] != layer.in_features:
        raise ValueError(f"input width {t.shape[-1]} != layer width {layer.in_features}")
    with torch.no_grad():
        y = layer(t)
    return y.numpy() if isinstance(x, np.ndarray) else y


def conv3d_forward(layer: torch.nn.Conv3d, grid):
    """Apply a 3D convolution to a (C, X, Y, Z) or (B, C, X, Y, Z) grid."""
    t = _as_tensor_like(layer, grid)
    squeeze = t.ndim == 4
    if squeeze:
        t = t[None]
    if t.ndim != 5 or t.shape[1] != layer.in_channels:
        raise ValueError(f"expected {layer.in_channels} input channels, got shape {tuple(t.shape)}")
    with torch.no_grad():
        y = layer(t)
    y = y[0] if squeeze else y
    return y.numpy() if isinstance(grid, np.ndarray) else y


def seeded_init(module: torch.nn.Module, seed: int) -> None:
    """Fan-in scaled uniform init of every dense/conv layer from one seed."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (torch.nn.Linear, torch.nn.Conv3d, torch.nn.ConvTranspose3d)):
            fan_in = m.weight[0].numel() if not isinstance(m, torch.nn.ConvTranspose3d) \
                else m.weight.shape[0] * m.weight[0, 0].numel()
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=g)


def grad(model: torch.nn.Module, loss_fn, batch) -> dict[str, np.ndarray]:
    """Gradients of ``loss_fn(model, batch)`` for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, batch)
    if loss.ndim != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    loss.backward()
    out = {}
    for name, p in model.named_parameters():
        g = p.grad
        out[name] = np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy()
    return out


def make_optimizer(model: torch.nn.Module, lr: float = 1e-3) -> torch.optim.Adam:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    return torch.optim.Adam(model.parameters(), lr=lr)


def optimizer_step(optimizer: torch.optim.Optimizer, model: torch.nn.Module,
                   grads: dict[str, np.ndarray]) -> None:
    """Load ``grads`` into the parameters and take one optimizer step."""
    for name, p in model.named_parameters():
        p.grad = torch.as_tensor(grads[name], dtype=p.dtype).clone()
    optimizer.step()


def model_params(model: torch.nn.Module, topology: dict, extra: dict | None = None) -> ModelParams:
    tensors = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    return ModelParams(topology=dict(topology), tensors=tensors, extra=dict(extra or {}))


def load_state(model: torch.nn.Module, params: ModelParams) -> torch.nn.Module:
    state = {k: torch.from_numpy(np.array(v)) for k, v in params.tensors.items()}
    model.load_state_dict(state)
    return model


def save_checkpoint(params: ModelParams, path) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in params.tensors.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"version": params.version, "topology": params.topology,
                         "extra": params.extra, "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {header.get('version')!r}, expected {CHECKPOINT_VERSION}")
    body = raw[12 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        lo, n = e["offset"], e["nbytes"]
        if lo + n > len(body):
            raise CheckpointError(f"{path}: truncated tensor data for {e['name']}")
        arr = np.frombuffer(body[lo:lo + n], dtype=np.dtype("<" + e["dtype"]))
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(body) != expected:
        raise CheckpointError(f"{path}: {len(body)} data bytes, header describes {expected}")
    return ModelParams(topology=header["topology"], tensors=tensors,
                       extra=header.get("extra", {}), version=header["version"])
