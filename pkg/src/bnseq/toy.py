"""The impossible "equal to the other sample?" task.

Each batch holds two binary inputs and each sample must predict whether it
equals the other sample.  A per-sample model sees one input only and cannot
beat chance; a train-mode BN layer couples the two samples through the batch
statistics and solves it, then fails once running statistics replace them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Linear
from .normalization import NormLayer

NET_KINDS = ("BN", "GN")


@dataclass(frozen=True)
class ToyTaskInstance:
    x: np.ndarray        # (2,) in {0, 1}
    labels: np.ndarray   # (2,) bool: x_i == x_other

    @classmethod
    def from_pair(cls, x1: int, x2: int) -> "ToyTaskInstance":
        x = np.array([x1, x2], dtype=np.float64)
        same = bool(x1 == x2)
        return cls(x, np.array([same, same]))


def toy_batches(seed: int = 0):
    """Endless stream of uniformly drawn instances."""
    rng = np.random.default_rng(seed)
    while True:
        x1, x2 = rng.integers(0, 2, size=2)
        yield ToyTaskInstance.from_pair(int(x1), int(x2))


def _pairs(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    x = rng.integers(0, 2, size=(n, 2)).astype(np.float64)
    return x, (x[:, 0] == x[:, 1])


@dataclass
class ToyConfig:
    hidden: int = 8
    steps: int = 2000
    lr: float = 0.05
    groups: int = 4
    momentum: float = 0.1
    eval_batches: int = 10_000


class ToyNet:
    """scalar -> Linear(hidden) -> BN or GN -> ReLU -> Linear(2) -> softmax."""

    def __init__(self, kind: str = "BN", cfg: ToyConfig | None = None, seed: int = 0):
        if kind not in NET_KINDS:
            raise ValueError(f"toy net kind must be one of {NET_KINDS}")
        cfg = cfg or ToyConfig()
        rng = np.random.default_rng(seed)
        self.kind = kind
        self.cfg = cfg
        self.inp = Linear(1, cfg.hidden, rng)
        self.norm = NormLayer(kind, cfg.hidden, groups=cfg.groups, momentum=cfg.momentum)
        self.out = Linear(cfg.hidden, 2, rng)

    def parameters(self):
        return self.inp.parameters() + self.norm.parameters() + self.out.parameters()

    def train(self, flag: bool = True):
        self.norm.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def logits(self, x: Tensor, norm: NormLayer | None = None) -> Tensor:
        """``x``: (B, N) values; column j is one batch of B samples when
        ``norm`` reduces per column, otherwise a single batch (N = 1)."""
        norm = norm or self.norm
        b, n = x.shape
        h = self.inp(x.reshape(b, n, 1))                     # (B, N, hidden)
        h = norm(h.reshape(b, n, self.cfg.hidden, 1))
        return self.out(ad.relu(h.reshape(b, n, self.cfg.hidden)))


def _column_norm(net: ToyNet) -> NormLayer:
    """A view of the net's norm that treats every column as its own batch."""
    if net.kind == "GN" or not net.norm.training:
        return net.norm
    layer = NormLayer("BN_per_timestep", net.cfg.hidden)
    layer.gamma, layer.beta = net.norm.gamma, net.norm.beta
    return layer


def predict(net: ToyNet, x: np.ndarray) -> np.ndarray:
    """Predicted "equal" flags for a (2, N) array of N independent batches."""
    with ad.no_grad():
        z = net.logits(Tensor._wrap(np.asarray(x, dtype=np.float64)), _column_norm(net))
    return z.data.argmax(-1).astype(bool)


def train_toy(kind: str = "BN", cfg: ToyConfig | None = None, seed: int = 0) -> ToyNet:
    """Plain SGD on the mean cross-entropy of each two-sample batch."""
    cfg = cfg or ToyConfig()
    net = ToyNet(kind, cfg, seed).train()
    stream = toy_batches(seed + 1)
    params = net.parameters()
    for _ in range(cfg.steps):
        inst = next(stream)
        z = net.logits(Tensor._wrap(inst.x[:, None]))
        loss = -ad.log_softmax(z)[np.arange(2), 0, inst.labels.astype(np.int64)].mean()
        for p in params:
            p.grad = None
        loss.backward()
        for p in params:
            p.data = p.data - cfg.lr * p.grad
    return net


def run_toy_experiment(net_kind: str = "BN", steps: int | None = None, seed: int = 0,
                       cfg: ToyConfig | None = None) -> dict:
    """Train, then score on fresh batches with batch statistics (train mode)
    and with running statistics (eval mode)."""
    cfg = cfg or ToyConfig()
    if steps is not None:
        cfg = ToyConfig(**{**cfg.__dict__, "steps": steps})
    net = train_toy(net_kind, cfg, seed)
    x, same = _pairs(cfg.eval_batches, np.random.default_rng(seed + 2))
    labels = np.repeat(same[None], 2, axis=0)
    report = {"net": net_kind, "steps": cfg.steps, "eval_batches": cfg.eval_batches}
    for mode, flag in (("train_mode", True), ("eval_mode", False)):
        net.train(flag)
        pred = predict(net, x.T)
        report[f"{mode}_acc"] = float((pred == labels).mean())
        report[f"{mode}_prediction_histogram"] = {"False": int((~pred).sum()), "True": int(pred.sum())}
    report["leakage"] = leakage_witness(net)
    return report


def leakage_witness(net: ToyNet, x=(0.0, 1.0), step: float = 1e-6) -> dict:
    """d(sample-1 "equal" logit)/d x_2 by autodiff and central differences,
    in train mode and in eval mode.  Running statistics are left untouched."""
    out = {}
    saved = net.norm.training
    for mode, flag in (("train", True), ("eval", False)):
        net.train(flag)
        layer = _column_norm(net)
        inp = Tensor(np.array(x, dtype=np.float64)[:, None], requires_grad=True)
        net.logits(inp, layer)[0, 0, 1].backward()

        def f(x2):
            with ad.no_grad():
                return float(net.logits(Tensor._wrap(np.array([[x[0]], [x2]])), layer).data[0, 0, 1])

        out[mode] = {"autodiff": float(inp.grad[1, 0]),
                     "finite_difference": (f(x[1] + step) - f(x[1] - step)) / (2 * step)}
    net.train(saved)
    return out
