"""AdamW with decoupled weight decay, exponential learning-rate decay to a
floor, and the binary checkpoint container shared by all trained modules."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamWConfig:
    peak_lr: float = 1e-4
    min_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    total_steps: int = 10000  # step at which the decayed lr reaches min_lr


class AdamW:
    """Adam moments with bias correction; weight decay applied directly to
    parameters rather than through the gradients."""

    def __init__(self, params: dict[str, Tensor], cfg: AdamWConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}
        if cfg.total_steps > 0 and cfg.min_lr < cfg.peak_lr:
            self._gamma = (cfg.min_lr / cfg.peak_lr) ** (1.0 / cfg.total_steps)
        else:
            self._gamma = 1.0

    def lr_at(self, step: int) -> float:
        return max(self.cfg.min_lr, self.cfg.peak_lr * self._gamma**step)

    def step(self, grads: dict[Tensor, np.ndarray] | None = None) -> float:
        """Apply one update from `.grad` fields (or an explicit gradient map);
        returns the learning rate used. Non-finite gradients reject the step."""
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1**self.step_count
        bc2 = 1.0 - c.beta2**self.step_count
        for name, p in self.params.items():
            g = grads.get(p) if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise ContractError(f"non-finite gradient for parameter {name!r}; step rejected")
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - c.beta1) * (g - m)
            v += (1.0 - c.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data -= lr * update
            if c.weight_decay:
                p.data -= lr * c.weight_decay * p.data
        return lr


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"PVCK"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, params: dict[str, np.ndarray], step: int, config: dict) -> None:
    """Container: magic "PVCK", u32 header length, JSON header (names,
    shapes, step, config + hash), then float32 little-endian payloads in
    header order."""
    names = sorted(params)
    header = {
        "params": [{"name": n, "shape": list(np.asarray(params[n]).shape)} for n in names],
        "step": int(step),
        "config": config,
        "config_hash": config_hash(config),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ContractError(f"{path}: not a checkpoint container")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) < count * 4:
                raise ContractError(f"{path}: truncated payload for {entry['name']!r}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return params, int(header["step"]), header
