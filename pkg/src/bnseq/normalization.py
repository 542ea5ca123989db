"""Normalization layers over ``(B, T, C, S)`` feature maps.

B indexes sequences in the batch, T frames, C channels and S spatial
positions.  Batch-dependent kinds (``BN``, ``BN_per_timestep``) use batch
statistics in train mode and running statistics in eval mode; every other
kind computes the same function in both modes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, StateError

KINDS = ("BN", "BN_per_timestep", "FrozenBN", "GN", "LN", "IN")
BATCH_DEPENDENT = frozenset({"BN", "BN_per_timestep"})
USES_RUNNING_STATS = frozenset({"BN", "BN_per_timestep", "FrozenBN"})

# reduction axes of a (B, T, C, S) input; GN reduces over its own grouped view
REDUCTION_AXES = {
    "BN": (0, 1, 3),
    "BN_per_timestep": (0, 3),
    "LN": (2, 3),
    "IN": (3,),
}


class NormLayer:
    """One normalization layer with per-channel affine parameters.

    Running statistics start out uninitialized (``None``); the first
    running-stat update starts the moving average from mean 0 / variance 1.
    """

    def __init__(self, kind: str, channels: int, groups: int = 4, eps: float = 1e-5,
                 momentum: float = 0.1):
        if kind not in KINDS:
            raise ValueError(f"unknown norm kind {kind!r}; expected one of {KINDS}")
        if eps < 0:
            raise ValueError("eps must be non-negative")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if kind == "GN" and (groups < 1 or channels % groups):
            raise ValueError(f"groups={groups} must divide channels={channels}")
        self.kind = kind
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None
        self.training = True

    def __repr__(self):
        extra = f", groups={self.groups}" if self.kind == "GN" else ""
        return f"NormLayer({self.kind}, C={self.channels}{extra}, mode={self.mode})"

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    @property
    def batch_dependent(self) -> bool:
        return self.kind in BATCH_DEPENDENT

    @property
    def stats_initialized(self) -> bool:
        return self.running_mean is not None and self.running_var is not None

    def train(self, flag: bool = True) -> "NormLayer":
        self.training = flag
        return self

    def eval(self) -> "NormLayer":
        return self.train(False)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def set_running_stats(self, mean, var):
        mean = np.array(mean, dtype=np.float64).reshape(self.channels)
        var = np.array(var, dtype=np.float64).reshape(self.channels)
        if (var < 0).any():
            raise ValueError("running variance must be non-negative")
        self.running_mean, self.running_var = mean, var

    def uses_batch_stats(self) -> bool:
        return self.training and self.batch_dependent

    def __call__(self, x: Tensor) -> Tensor:
        return norm_forward(self, x)


def _check_input(layer: NormLayer, x: Tensor):
    if x.ndim != 4:
        raise ShapeError(f"norm layers expect (B, T, C, S) input, got shape {x.shape}")
    if x.shape[2] != layer.channels:
        raise ShapeError(f"input has {x.shape[2]} channels, layer expects {layer.channels}")


def _standardize(x: Tensor, axes: tuple[int, ...], eps: float) -> tuple[Tensor, Tensor, Tensor]:
    mu = x.mean(axes, keepdims=True)
    v = x.var(axes, keepdims=True)
    return (x - mu) / ad.sqrt(v + eps), mu, v


def _affine(layer: NormLayer, xhat: Tensor) -> Tensor:
    c = layer.channels
    return xhat * layer.gamma.reshape(1, 1, c, 1) + layer.beta.reshape(1, 1, c, 1)


def normalize(layer: NormLayer, x: Tensor) -> Tensor:
    """Standardize ``x`` per the layer's kind and mode, without the affine map
    and without touching running statistics."""
    _check_input(layer, x)
    kind = layer.kind
    if kind in USES_RUNNING_STATS and not layer.uses_batch_stats():
        if not layer.stats_initialized:
            raise StateError(f"{kind} layer has no running statistics to normalize with")
        shape = (1, 1, layer.channels, 1)
        scale = 1.0 / np.sqrt(layer.running_var + layer.eps)
        return (x - layer.running_mean.reshape(shape)) * scale.reshape(shape)
    if kind == "GN":
        b, t, c, s = x.shape
        grouped = x.reshape(b, t, layer.groups, c // layer.groups, s)
        xhat, _, _ = _standardize(grouped, (3, 4), layer.eps)
        return xhat.reshape(b, t, c, s)
    xhat, _, _ = _standardize(x, REDUCTION_AXES[kind], layer.eps)
    return xhat


def norm_forward(layer: NormLayer, x: Tensor) -> Tensor:
    """Apply the layer; train-mode BN kinds also update running statistics."""
    _check_input(layer, x)
    if layer.uses_batch_stats():
        xhat, mu, v = _standardize(x, REDUCTION_AXES[layer.kind], layer.eps)
        # BN_per_timestep keeps per-channel running stats: average the
        # per-timestep batch statistics over time
        update_running_stats(layer, mu.data.mean(axis=(0, 1, 3)), v.data.mean(axis=(0, 1, 3)))
        return _affine(layer, xhat)
    return _affine(layer, normalize(layer, x))


def update_running_stats(layer: NormLayer, batch_mean, batch_var):
    """r <- (1 - m) r + m b for both running mean and (biased) running variance."""
    if not layer.batch_dependent:
        raise StateError(f"{layer.kind} layers keep no updatable running statistics")
    batch_mean = np.asarray(batch_mean, dtype=np.float64).reshape(layer.channels)
    batch_var = np.asarray(batch_var, dtype=np.float64).reshape(layer.channels)
    if not layer.stats_initialized:
        layer.running_mean = np.zeros(layer.channels)
        layer.running_var = np.ones(layer.channels)
    m = layer.momentum
    layer.running_mean = (1.0 - m) * layer.running_mean + m * batch_mean
    layer.running_var = (1.0 - m) * layer.running_var + m * batch_var


def freeze_bn(layer: NormLayer) -> NormLayer:
    """Turn a BN layer into FrozenBN.

    The returned layer shares ``gamma``/``beta`` (still trainable) and keeps a
    copy of the running statistics, which it never updates.
    """
    if layer.kind not in USES_RUNNING_STATS:
        raise StateError(f"cannot freeze a batch-independent {layer.kind} layer")
    if not layer.stats_initialized:
        raise StateError("cannot freeze a layer whose running statistics are uninitialized")
    frozen = NormLayer("FrozenBN", layer.channels, eps=layer.eps, momentum=layer.momentum)
    frozen.gamma, frozen.beta = layer.gamma, layer.beta
    frozen.set_running_stats(layer.running_mean, layer.running_var)
    frozen.training = layer.training
    return frozen


def group_stats_oracle(x: np.ndarray, groups: int) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass mean/variance of each group's (channels, S) slice, by explicit loops."""
    b, t, c, s = x.shape
    size = c // groups
    means = np.empty((b, t, groups))
    variances = np.empty((b, t, groups))
    for i in range(b):
        for j in range(t):
            for k in range(groups):
                vals = x[i, j, k * size:(k + 1) * size, :].ravel()
                m = vals.sum() / vals.size
                means[i, j, k] = m
                variances[i, j, k] = ((vals - m) ** 2).sum() / vals.size
    return means, variances


def norm_equivalences_check(channels: int, groups: int, x, tol: float = 1e-10) -> dict:
    """Compare GN(1) with LN, GN(C) with IN, and GN(groups) with a loop oracle."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    eps = 1e-5

    def run(kind, g=1):
        return NormLayer(kind, channels, groups=g, eps=eps)(x).data

    report = {
        "gn1_vs_ln": float(np.abs(run("GN", 1) - run("LN")).max()),
        "gnC_vs_in": float(np.abs(run("GN", channels) - run("IN")).max()),
    }
    means, variances = group_stats_oracle(x.data, groups)
    size = channels // groups
    expected = (x.data - np.repeat(means, size, axis=2)[..., None]) / np.sqrt(
        np.repeat(variances, size, axis=2)[..., None] + eps)
    report["gn_vs_oracle"] = float(np.abs(run("GN", groups) - expected).max())
    report["passed"] = all(v < tol for v in report.values())
    return report
