"""Frame backbone, LSTM temporal model, task heads and losses."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, record
from .errors import ShapeError
from .normalization import NormLayer

PRESENT, INSIDE, OUTSIDE = 0, 1, 2
TASKS = ("phase", "anticipation")


@dataclass
class ModelConfig:
    task: str = "phase"
    in_channels: int = 8
    widths: tuple = (32, 32)
    hidden: int = 64
    n_phases: int = 4
    n_instruments: int = 2
    horizon: float = 32.0
    norm: str = "GN"
    groups: int = 4
    eps: float = 1e-5
    momentum: float = 0.1
    aux_weight: float = 0.01

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class Block:
    """Channel-mixing linear map at every (frame, position), then norm, then ReLU."""

    def __init__(self, n_in: int, n_out: int, norm: NormLayer, rng):
        self.linear = Linear(n_in, n_out, rng)
        self.norm = norm

    def pre_norm(self, x: Tensor) -> Tensor:
        return self.linear(x.transpose(0, 1, 3, 2)).transpose(0, 1, 3, 2)

    def __call__(self, x: Tensor, capture: list | None = None) -> Tensor:
        h = self.norm(self.pre_norm(x))
        if capture is not None:
            capture.append(h)
        return ad.relu(h)

    def parameters(self):
        return self.linear.parameters() + self.norm.parameters()


class Backbone:
    """Stack of blocks over ``(B, T, C, S)`` frames; the spatial axis is
    mean-pooled after the last block, giving ``(B, T, D)`` features."""

    def __init__(self, in_channels: int, widths, norm: str = "GN", groups: int = 4,
                 eps: float = 1e-5, momentum: float = 0.1, rng=None):
        rng = np.random.default_rng(rng)
        self.in_channels = in_channels
        self.blocks: list[Block] = []
        n_in = in_channels
        for w in widths:
            layer = NormLayer(norm, w, groups=groups, eps=eps, momentum=momentum)
            self.blocks.append(Block(n_in, w, layer, rng))
            n_in = w
        self.out_features = n_in
        self.frozen_blocks = 0

    @property
    def norm_layers(self) -> list[NormLayer]:
        return [b.norm for b in self.blocks]

    def __call__(self, x: Tensor, capture: list | None = None) -> Tensor:
        return backbone_forward(self, x, capture)

    def parameters(self, include_frozen: bool = False) -> list[Tensor]:
        start = 0 if include_frozen else self.frozen_blocks
        return [p for b in self.blocks[start:] for p in b.parameters()]


def backbone_forward(bb: Backbone, x: Tensor, capture: list | None = None) -> Tensor:
    if x.ndim != 4 or x.shape[2] != bb.in_channels:
        raise ShapeError(f"backbone expects (B, T, {bb.in_channels}, S) input, got {x.shape}")
    h = x
    for block in bb.blocks:
        h = block(h, capture)
    return h.mean(3)


# -- LSTM ---------------------------------------------------------------------

@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LstmState":
        return cls(Tensor._wrap(np.zeros((batch, hidden))), Tensor._wrap(np.zeros((batch, hidden))))

    def detach(self) -> "LstmState":
        return LstmState(ad.detach(self.h), ad.detach(self.c))

    def __getitem__(self, rows) -> "LstmState":
        return LstmState(Tensor._wrap(self.h.data[rows]), Tensor._wrap(self.c.data[rows]))


def _sig(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_sequence(x: Tensor, h0: Tensor, c0: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Run an LSTM over ``x`` of shape (B, T, D) as one differentiable op.

    Gates are ordered (input, forget, cell, output).  Returns (B, T, 2H):
    the hidden state h_t in the first H channels and the cell state c_t in
    the last H.
    """
    bsz, steps, _ = x.shape
    hidden = w_h.shape[0]
    if h0.shape != (bsz, hidden) or c0.shape != (bsz, hidden):
        raise ShapeError(f"state shapes {h0.shape}, {c0.shape} do not match ({bsz}, {hidden})")
    H = hidden
    gates = np.empty((bsz, steps, 4 * H))
    hs = np.empty((bsz, steps + 1, H))
    cs = np.empty((bsz, steps + 1, H))
    tanh_c = np.empty((bsz, steps, H))
    hs[:, 0], cs[:, 0] = h0.data, c0.data
    for t in range(steps):
        # per-step projection keeps results bit-identical for any chunking
        z = x.data[:, t] @ w_x.data + b.data + hs[:, t] @ w_h.data
        i, f, o = _sig(z[:, :H]), _sig(z[:, H:2 * H]), _sig(z[:, 3 * H:])
        g = np.tanh(z[:, 2 * H:3 * H])
        c = f * cs[:, t] + i * g
        cs[:, t + 1] = c
        tanh_c[:, t] = np.tanh(c)
        hs[:, t + 1] = o * tanh_c[:, t]
        gates[:, t, :H], gates[:, t, H:2 * H], gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:] = i, f, g, o
    out = np.concatenate([hs[:, 1:], cs[:, 1:]], axis=-1)

    def backward(grad):
        gh, gc = grad[..., :H], grad[..., H:]
        dz = np.empty_like(gates)
        dh_next = np.zeros((bsz, H))
        dc_next = np.zeros((bsz, H))
        wh_t = w_h.data.T
        for t in range(steps - 1, -1, -1):
            i, f = gates[:, t, :H], gates[:, t, H:2 * H]
            g, o = gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:]
            dh = gh[:, t] + dh_next
            th = tanh_c[:, t]
            dc = gc[:, t] + dc_next + dh * o * (1.0 - th * th)
            dz[:, t, :H] = dc * g * i * (1.0 - i)
            dz[:, t, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, t, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, t, 3 * H:] = dh * th * o * (1.0 - o)
            dh_next = dz[:, t] @ wh_t
            dc_next = dc * f
        dz2 = dz.reshape(-1, 4 * H)
        dx = dz @ w_x.data.T
        dwx = x.data.reshape(-1, x.shape[-1]).T @ dz2
        dwh = hs[:, :-1].reshape(-1, H).T @ dz2
        return dx, dh_next, dc_next, dwx, dwh, dz2.sum(axis=0)

    return record(out, (x, h0, c0, w_x, w_h, b), backward, "lstm")


class LSTM:
    def __init__(self, n_in: int, hidden: int, rng=None):
        rng = np.random.default_rng(rng)
        k = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.w_x = Tensor(rng.uniform(-k, k, size=(n_in, 4 * hidden)), requires_grad=True)
        self.w_h = Tensor(rng.uniform(-k, k, size=(hidden, 4 * hidden)), requires_grad=True)
        self.b = Tensor(rng.uniform(-k, k, size=4 * hidden), requires_grad=True)

    def parameters(self):
        return [self.w_x, self.w_h, self.b]

    def __call__(self, features: Tensor, state: LstmState | None = None):
        return lstm_forward(self, features, state)


def lstm_forward(lstm: LSTM, features: Tensor, state: LstmState | None = None):
    """Return per-frame hidden states (B, T, H) and the final state."""
    bsz = features.shape[0]
    H = lstm.hidden
    if state is None:
        state = LstmState.zeros(bsz, H)
    if state.h.shape != (bsz, H) or state.c.shape != (bsz, H):
        raise ShapeError(f"state width {state.h.shape} does not match ({bsz}, {H})")
    hc = lstm_sequence(features, state.h, state.c, lstm.w_x, lstm.w_h, lstm.b)
    outputs = hc[:, :, :H]
    final = LstmState(hc[:, -1, :H], hc[:, -1, H:])
    return outputs, final


# -- heads and losses ---------------------------------------------------------

class PhaseHead:
    def __init__(self, hidden: int, n_phases: int, rng):
        self.linear = Linear(hidden, n_phases, rng)

    def __call__(self, h: Tensor) -> dict:
        return {"probs": ad.softmax(self.linear(h))}

    def parameters(self):
        return self.linear.parameters()


class AnticipationHead:
    """Per instrument: a regression output squashed into [0, horizon] and a
    3-way (present, inside, outside) classification."""

    def __init__(self, hidden: int, n_instruments: int, horizon: float, rng):
        self.n = n_instruments
        self.horizon = float(horizon)
        self.reg = Linear(hidden, n_instruments, rng)
        self.cls = Linear(hidden, 3 * n_instruments, rng)

    def __call__(self, h: Tensor) -> dict:
        reg = ad.sigmoid(self.reg(h)) * self.horizon
        logits = self.cls(h)
        logits = logits.reshape(logits.shape[:-1] + (self.n, 3))
        return {"reg": reg, "cls": ad.softmax(logits)}

    def parameters(self):
        return self.reg.parameters() + self.cls.parameters()


def phase_loss(probs: Tensor, labels) -> Tensor:
    """Mean over frames of -log probs[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[-1]
    if labels.shape != probs.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match probs {probs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"phase labels must lie in [0, {k})")
    if np.abs(probs.data.sum(axis=-1) - 1.0).max(initial=0.0) > 1e-9:
        raise ValueError("probability rows must sum to 1")
    flat = probs.reshape(-1, k)
    picked = flat[np.arange(labels.size), labels.ravel()]
    return -ad.log(picked).mean()


def anticipation_targets(t_remaining, horizon: float):
    """Clamp remaining time to the horizon and derive the 3-way class.

    Returns ``(y, c)`` with ``y = min(t, h)`` and ``c`` in
    {PRESENT (y == 0), INSIDE (0 < y < h), OUTSIDE (y == h)}.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    t = np.asarray(t_remaining, dtype=np.float64)
    if (t < 0).any():
        raise ValueError("remaining time must be non-negative")
    y = np.minimum(t, horizon)
    c = np.where(y == 0, PRESENT, np.where(y < horizon, INSIDE, OUTSIDE))
    if np.ndim(y) == 0:
        return float(y), int(c)
    return y, c.astype(np.int64)


def anticipation_loss(reg: Tensor, cls: Tensor, y, c, aux_weight: float = 0.01) -> Tensor:
    """Mean over frames of sum_i SmoothL1(reg_i, y_i) - aux_weight * log cls_i[c_i]."""
    if aux_weight < 0:
        raise ValueError("aux_weight must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    c = np.asarray(c, dtype=np.int64)
    if reg.shape != y.shape or cls.shape[:-1] != c.shape or cls.shape[-1] != 3:
        raise ShapeError(f"shapes reg {reg.shape}, cls {cls.shape}, y {y.shape}, c {c.shape} disagree")
    n_inst = reg.shape[-1]
    frames = reg.size // n_inst
    reg_term = ad.smooth_l1(reg, y).sum() / frames
    flat = cls.reshape(-1, 3)
    picked = flat[np.arange(c.size), c.ravel()]
    cls_term = -ad.log(picked).sum() / frames
    return reg_term + cls_term * aux_weight


# -- full model ---------------------------------------------------------------

class SequenceModel:
    """Backbone -> LSTM -> task head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg.in_channels, cfg.widths, cfg.norm, cfg.groups,
                                 cfg.eps, cfg.momentum, rng)
        self.lstm = LSTM(self.backbone.out_features, cfg.hidden, rng)
        if cfg.task == "phase":
            self.head = PhaseHead(cfg.hidden, cfg.n_phases, rng)
        else:
            self.head = AnticipationHead(cfg.hidden, cfg.n_instruments, cfg.horizon, rng)
        self.training = True

    @property
    def norm_layers(self) -> list[NormLayer]:
        return self.backbone.norm_layers

    @property
    def batch_dependent(self) -> bool:
        return any(n.batch_dependent for n in self.norm_layers)

    def train(self, flag: bool = True) -> "SequenceModel":
        self.training = flag
        for n in self.norm_layers:
            n.train(flag)
        return self

    def eval(self) -> "SequenceModel":
        return self.train(False)

    def parameters(self, include_frozen: bool = False) -> list[Tensor]:
        return (self.backbone.parameters(include_frozen) + self.lstm.parameters()
                + self.head.parameters())

    def forward(self, x: Tensor, state: LstmState | None = None, capture: list | None = None):
        """``x``: (B, T, C, S) frames.  Returns (head outputs, final LSTM state)."""
        feats = self.backbone(x, capture)
        h, final = self.lstm(feats, state)
        return self.head(h), final

    __call__ = forward

    def loss(self, outputs: dict, targets: dict) -> Tensor:
        if self.cfg.task == "phase":
            return phase_loss(outputs["probs"], targets["phase"])
        return anticipation_loss(outputs["reg"], outputs["cls"], targets["y"], targets["c"],
                                 self.cfg.aux_weight)

    def clone(self) -> "SequenceModel":
        return copy.deepcopy(self)

    def state_dict(self) -> dict:
        """Flat name -> array mapping of parameters and running statistics."""
        out = {}
        for i, block in enumerate(self.backbone.blocks):
            out[f"backbone.{i}.weight"] = block.linear.weight.data
            out[f"backbone.{i}.bias"] = block.linear.bias.data
            out[f"backbone.{i}.gamma"] = block.norm.gamma.data
            out[f"backbone.{i}.beta"] = block.norm.beta.data
            if block.norm.stats_initialized:
                out[f"backbone.{i}.running_mean"] = block.norm.running_mean
                out[f"backbone.{i}.running_var"] = block.norm.running_var
        out["lstm.w_x"], out["lstm.w_h"], out["lstm.b"] = (p.data for p in self.lstm.parameters())
        for j, p in enumerate(self.head.parameters()):
            out[f"head.{j}"] = p.data
        return {k: np.array(v) for k, v in out.items()}

    def load_state_dict(self, state: dict):
        for i, block in enumerate(self.backbone.blocks):
            block.linear.weight.data = np.array(state[f"backbone.{i}.weight"])
            block.linear.bias.data = np.array(state[f"backbone.{i}.bias"])
            block.norm.gamma.data = np.array(state[f"backbone.{i}.gamma"])
            block.norm.beta.data = np.array(state[f"backbone.{i}.beta"])
            if f"backbone.{i}.running_mean" in state:
                block.norm.set_running_stats(state[f"backbone.{i}.running_mean"],
                                             state[f"backbone.{i}.running_var"])
        for p, key in zip(self.lstm.parameters(), ("lstm.w_x", "lstm.w_h", "lstm.b")):
            p.data = np.array(state[key])
        for j, p in enumerate(self.head.parameters()):
            p.data = np.array(state[f"head.{j}"])
