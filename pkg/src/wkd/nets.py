"""Small deterministic conv nets with hand-written backward passes.

Architecture: a stack of 3x3 convolutions (padding 1, per-stage stride) each
followed by ReLU, global average pooling and a linear classifier. An optional
1x1 projector maps the last-stage feature map to another channel count (the
student side of feature distillation).

Taps exposed by :meth:`ConvNet.forward`:

``last``
    last-stage feature map ``(B, F, h, w)`` after ReLU
``penultimate``
    pooled features ``(B, F)`` fed to the classifier
``projected``
    projector output ``(B, T, h, w)`` (only when a projector is configured)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._io import atomic_write_bytes
from .errors import InvalidSpec, ShapeMismatch, StaleForward, ValidationError
from .numerics import prng

CONV_GAIN = 2.0  # He init for ReLU layers
LINEAR_GAIN = 1.0


@dataclass(frozen=True)
class ConvNetSpec:
    in_channels: int = 1
    height: int = 16
    width: int = 16
    stages: tuple = ((8, 2), (8, 2))  # (filters, stride) per stage
    n_classes: int = 12
    projector: int | None = None  # output channels of the 1x1 projector

    def __post_init__(self):
        if not self.stages:
            raise InvalidSpec("a net needs at least one conv stage")
        for filters, stride in self.stages:
            if filters < 1 or stride < 1:
                raise InvalidSpec(f"bad stage ({filters}, {stride})")
        if self.n_classes < 2:
            raise InvalidSpec("need at least two classes")

    def feature_shape(self):
        h, w = self.height, self.width
        for _, s in self.stages:
            h, w = (h - 1) // s + 1, (w - 1) // s + 1
        return self.stages[-1][0], h, w


def _patches(xp, stride, ho, wo):
    """``(B, C, Hp, Wp)`` padded input -> ``(B*ho*wo, C*9)`` columns."""
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * 9)


@dataclass
class _Cache:
    shapes: dict = field(default_factory=dict)
    cols: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    last: np.ndarray | None = None


class ConvNet:
    def __init__(self, spec: ConvNetSpec, seed: int = 0):
        self.spec = spec
        self.params: dict[str, np.ndarray] = {}
        rng = prng(seed)
        c_in = spec.in_channels
        for i, (filters, _) in enumerate(spec.stages):
            fan_in = c_in * 9
            self.params[f"conv{i}.w"] = rng.normal(0.0, np.sqrt(CONV_GAIN / fan_in), (filters, c_in, 3, 3))
            self.params[f"conv{i}.b"] = np.zeros(filters)
            c_in = filters
        self.params["fc.w"] = rng.normal(0.0, np.sqrt(LINEAR_GAIN / c_in), (spec.n_classes, c_in))
        self.params["fc.b"] = np.zeros(spec.n_classes)
        if spec.projector:
            self.params["proj.w"] = rng.normal(0.0, np.sqrt(LINEAR_GAIN / c_in), (spec.projector, c_in))
            self.params["proj.b"] = np.zeros(spec.projector)
        self._cache: _Cache | None = None

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "ConvNet":
        other = ConvNet.__new__(ConvNet)
        other.spec = self.spec
        other.params = {k: v.copy() for k, v in self.params.items()}
        other._cache = None
        return other

    def forward(self, x):
        """Logits ``(B, n)`` and the tap dictionary for a batch ``(B, C, H, W)``."""
        x = np.asarray(x, dtype=float)
        spec = self.spec
        if x.ndim != 4 or x.shape[1:] != (spec.in_channels, spec.height, spec.width):
            raise ShapeMismatch(f"expected (B, {spec.in_channels}, {spec.height}, {spec.width}), got {x.shape}")
        cache = _Cache()
        cache.shapes["x"] = x.shape
        h = x
        for i, (filters, stride) in enumerate(spec.stages):
            b, c, hh, ww = h.shape
            ho, wo = (hh - 1) // stride + 1, (ww - 1) // stride + 1
            xp = np.pad(h, ((0, 0), (0, 0), (1, 1), (1, 1)))
            cols = _patches(xp, stride, ho, wo)
            w = self.params[f"conv{i}.w"].reshape(filters, -1)
            z = cols @ w.T + self.params[f"conv{i}.b"]
            mask = z > 0
            h = np.where(mask, z, 0.0).reshape(b, ho, wo, filters).transpose(0, 3, 1, 2)
            cache.cols.append(cols)
            cache.masks.append(mask)
            cache.shapes[i] = (b, c, hh, ww, ho, wo)
        pooled = h.mean(axis=(2, 3))
        logits = pooled @ self.params["fc.w"].T + self.params["fc.b"]
        taps = {"last": h, "penultimate": pooled}
        if "proj.w" in self.params:
            taps["projected"] = (np.einsum("tc,bchw->bthw", self.params["proj.w"], h)
                                 + self.params["proj.b"][None, :, None, None])
        cache.last = h
        cache.shapes["pooled"] = pooled
        self._cache = cache
        return logits, taps

    def backward(self, grad_logits=None, grad_taps=None) -> dict[str, np.ndarray]:
        """Parameter gradients from upstream gradients on logits and taps."""
        cache = self._cache
        if cache is None:
            raise StaleForward("backward called before forward")
        h = cache.last
        pooled = cache.shapes["pooled"]
        bsz = h.shape[0]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        grad_taps = grad_taps or {}
        if grad_logits is None:
            grad_logits = np.zeros((bsz, self.spec.n_classes))
        grad_logits = np.asarray(grad_logits, dtype=float)
        if grad_logits.shape != (bsz, self.spec.n_classes):
            raise StaleForward(f"logit gradient shape {grad_logits.shape} does not match the last forward")

        grads["fc.w"] = grad_logits.T @ pooled
        grads["fc.b"] = grad_logits.sum(axis=0)
        d_pooled = grad_logits @ self.params["fc.w"]
        if "penultimate" in grad_taps:
            d_pooled = d_pooled + _checked(grad_taps["penultimate"], pooled.shape)
        dh = np.broadcast_to((d_pooled / (h.shape[2] * h.shape[3]))[:, :, None, None], h.shape).copy()
        if "last" in grad_taps:
            dh += _checked(grad_taps["last"], h.shape)
        if "projected" in grad_taps:
            if "proj.w" not in self.params:
                raise ValidationError("net has no projector")
            dp = _checked(grad_taps["projected"], (bsz, self.spec.projector) + h.shape[2:])
            grads["proj.w"] = np.einsum("bthw,bchw->tc", dp, h)
            grads["proj.b"] = dp.sum(axis=(0, 2, 3))
            dh += np.einsum("tc,bthw->bchw", self.params["proj.w"], dp)

        for i in reversed(range(len(self.spec.stages))):
            filters, stride = self.spec.stages[i]
            b, c, hh, ww, ho, wo = cache.shapes[i]
            dz = dh.transpose(0, 2, 3, 1).reshape(-1, filters) * cache.masks[i]
            grads[f"conv{i}.w"] = (dz.T @ cache.cols[i]).reshape(filters, c, 3, 3)
            grads[f"conv{i}.b"] = dz.sum(axis=0)
            if i == 0:
                break
            dcols = (dz @ self.params[f"conv{i}.w"].reshape(filters, -1)).reshape(b, ho, wo, c, 3, 3)
            dxp = np.zeros((b, c, hh + 2, ww + 2))
            for di in range(3):
                for dj in range(3):
                    dxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += (
                        dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2))
            dh = dxp[:, :, 1:-1, 1:-1]
        return grads


def _checked(g, shape):
    g = np.asarray(g, dtype=float)
    if g.shape != tuple(shape):
        raise StaleForward(f"tap gradient shape {g.shape} does not match the last forward {tuple(shape)}")
    return g


def sgd_step(params, grads, velocity, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In-place momentum SGD: ``v = momentum*v + g + wd*w``; ``w -= lr*v``."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        d = g + weight_decay * w if weight_decay else g
        v = velocity.get(name)
        v = d.copy() if v is None else momentum * v + d
        velocity[name] = v
        w -= lr * v


# -- checkpoints -------------------------------------------------------------
# A text manifest (one "name,d1xd2x..." line per array, then "END") followed
# by all arrays as little-endian float64 in manifest order.

def save_checkpoint(path, params: dict[str, np.ndarray]) -> Path:
    lines = [f"{name},{'x'.join(str(d) for d in arr.shape)}" for name, arr in params.items()]
    header = ("\n".join(lines) + "\nEND\n").encode("ascii")
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in params.values())
    return atomic_write_bytes(path, header + body)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    end = data.index(b"\nEND\n")
    manifest = data[:end].decode("ascii").splitlines()
    offset = end + len(b"\nEND\n")
    out = {}
    for line in manifest:
        name, dims = line.rsplit(",", 1)
        shape = tuple(int(d) for d in dims.split("x")) if dims else ()
        count = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)
        offset += 8 * count
    if offset != len(data):
        raise ValidationError("checkpoint has trailing bytes")
    return out
