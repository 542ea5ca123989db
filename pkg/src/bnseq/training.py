"""Batch schedules, hidden-state carrying, AdamW and the train/evaluate loops.

Protocols used throughout:

* SWE  - hidden state reset for every training sequence; each test frame is
  predicted from a window of the training length ending at that frame.
* CHE  - training as SWE, but at test time the state is carried across the
  whole video.
* CHT  - batches in temporal order with the (detached) state carried across
  batches during training too; evaluation as CHE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, EndOfEpoch, StateError
from .model import LstmState, SequenceModel
from .normalization import freeze_bn

SCHEDULE_KINDS = ("iid", "temporal")
POLICIES = ("reset_each_batch", "carry_eval_only", "carry_train_and_eval")
PROTOCOL_POLICY = {"SWE": "reset_each_batch", "CHE": "carry_eval_only", "CHT": "carry_train_and_eval"}


@dataclass
class SequenceBatch:
    frames: np.ndarray      # (B, T, C, S)
    targets: dict           # "phase": (B, T) or "y"/"c": (B, T, n_instruments)
    vids: list
    offsets: list

    @property
    def shape(self):
        return self.frames.shape[:2]


def video_targets(video, task: str, start: int = 0, stop: int | None = None) -> dict:
    stop = video.length if stop is None else stop
    if task == "phase":
        return {"phase": video.phases[start:stop]}
    y, c = video.anticipation()
    return {"y": y[start:stop], "c": c[start:stop]}


def _stack(videos, task, windows) -> SequenceBatch:
    frames = np.stack([videos[v].frames[o:o + n] for v, o, n in windows])
    parts = [video_targets(videos[v], task, o, o + n) for v, o, n in windows]
    targets = {k: np.stack([p[k] for p in parts]) for k in parts[0]}
    return SequenceBatch(frames, targets, [videos[v].vid for v, _, _ in windows],
                         [o for _, o, _ in windows])


class BatchSchedule:
    """Serves the batches of one epoch.

    ``iid``: every batch holds ``n_seq`` windows of ``seq_len`` frames at
    uniformly random (video, offset); an epoch has total_frames //
    (n_seq * seq_len) batches.  ``temporal``: one window per batch, each
    video cut into contiguous non-overlapping windows (the last one may be
    shorter), videos visited round-robin so every video advances in order.
    """

    def __init__(self, kind: str, seq_len: int, n_seq: int = 1, seed: int = 0, task: str = "phase"):
        if kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {kind!r}")
        if seq_len < 1 or n_seq < 1:
            raise ConfigError("seq_len and n_seq must be positive")
        if kind == "temporal" and n_seq != 1:
            raise ConfigError("temporal schedules hold exactly one sequence per batch")
        self.kind = kind
        self.seq_len = seq_len
        self.n_seq = n_seq
        self.task = task
        self.rng = np.random.default_rng(seed)
        self._queue: list = []
        self._videos: list = []

    def __repr__(self):
        return f"BatchSchedule({self.kind}, {self.n_seq}x{self.seq_len})"

    @property
    def batch_frames(self) -> int:
        return self.n_seq * self.seq_len

    def windows(self, videos) -> list:
        """The (video index, offset, length) windows of one epoch, grouped per batch."""
        if not videos:
            raise ValueError("dataset is empty")
        if self.kind == "temporal":
            per_video = [[(i, o, min(self.seq_len, v.length - o)) for o in range(0, v.length, self.seq_len)]
                         for i, v in enumerate(videos)]
            order = self.rng.permutation(len(videos))
            out = []
            for step in range(max(len(w) for w in per_video)):
                for i in order:
                    if step < len(per_video[i]):
                        out.append([per_video[i][step]])
            return out
        shortest = min(v.length for v in videos)
        if self.n_seq > 1 and self.seq_len > shortest:
            raise ConfigError(f"seq_len {self.seq_len} exceeds the shortest video ({shortest} frames)")
        total = sum(v.length for v in videos)
        n_batches = max(1, total // self.batch_frames)
        out = []
        for _ in range(n_batches):
            batch = []
            for _ in range(self.n_seq):
                i = int(self.rng.integers(len(videos)))
                n = min(self.seq_len, videos[i].length)
                o = int(self.rng.integers(videos[i].length - n + 1))
                batch.append((i, o, n))
            out.append(batch)
        return out

    def start_epoch(self, videos):
        self._videos = list(videos)
        self._queue = self.windows(self._videos)[::-1]

    def next_batch(self) -> SequenceBatch:
        if not self._queue:
            raise EndOfEpoch()
        return _stack(self._videos, self.task, self._queue.pop())

    def epoch(self, videos):
        self.start_epoch(videos)
        while True:
            try:
                yield self.next_batch()
            except EndOfEpoch:
                return


def next_batch(schedule: BatchSchedule, dataset=None) -> SequenceBatch:
    """Next batch of the running epoch; starts an epoch over ``dataset`` if none is active."""
    if dataset is not None and not schedule._queue:
        schedule.start_epoch(dataset)
    return schedule.next_batch()


class HiddenStateStore:
    """Per-video LSTM states carried across training batches."""

    def __init__(self, policy: str, hidden: int):
        if policy not in POLICIES:
            raise ConfigError(f"unknown hidden-state policy {policy!r}")
        self.policy = policy
        self.hidden = hidden
        self.states: dict = {}

    @property
    def carries_in_training(self) -> bool:
        return self.policy == "carry_train_and_eval"

    def reset(self):
        self.states.clear()

    def initial(self, batch: SequenceBatch) -> LstmState:
        zero = LstmState.zeros(len(batch.vids), self.hidden)
        if not self.carries_in_training:
            return zero
        h, c = zero.h.data, zero.c.data
        for row, (vid, off) in enumerate(zip(batch.vids, batch.offsets)):
            if off > 0 and vid in self.states:
                h[row], c[row] = self.states[vid]
        return zero

    def update(self, batch: SequenceBatch, final: LstmState):
        if not self.carries_in_training:
            return
        for row, vid in enumerate(batch.vids):
            # value-only copies: nothing here can reach a previous graph
            self.states[vid] = (final.h.data[row].copy(), final.c.data[row].copy())


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(opt: OptimizerState, params, grads):
    """One bias-corrected Adam update with decoupled weight decay."""
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        key = id(p)
        m = opt.m.get(key)
        v = opt.v.get(key)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        opt.m[key], opt.v[key] = m, v
        p.data = p.data * (1.0 - opt.lr * opt.weight_decay) - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def check_policy(schedule: BatchSchedule, store: HiddenStateStore):
    if store.carries_in_training and not (schedule.kind == "temporal" and schedule.n_seq == 1):
        raise ConfigError("carry-hidden training needs a temporal single-sequence schedule")


def train_epoch(model: SequenceModel, videos, schedule: BatchSchedule, store: HiddenStateStore,
                opt: OptimizerState | None) -> dict:
    """One pass over the schedule's batches.  ``opt=None`` runs forward and
    backward without parameter updates.  Returns mean loss and batch count."""
    check_policy(schedule, store)
    model.train()
    store.reset()
    params = model.parameters()
    losses = []
    for batch in schedule.epoch(videos):
        state = store.initial(batch)
        out, final = model(Tensor._wrap(batch.frames), state)
        loss = model.loss(out, batch.targets)
        for p in params:
            p.grad = None
        loss.backward()
        if opt is not None:
            adamw_step(opt, params, [p.grad for p in params])
        store.update(batch, final)
        losses.append(loss.item())
    return {"loss": float(np.mean(losses)), "batches": len(losses)}


# -- evaluation ------------------------------------------------------------------

def _head_numpy(model: SequenceModel, h: Tensor) -> dict:
    return {k: v.data for k, v in model.head(h).items()}


def evaluate(model: SequenceModel, video, mode: str = "CHE", window: int | None = None) -> dict:
    """Online per-frame outputs for one video (batch-dependent norms use
    running statistics).

    ``mode="CHE"`` carries the state through the whole video.  ``mode="SWE"``
    predicts frame t from the window of ``window`` frames ending at t, started
    from a zero state (shorter prefix windows near the video start).
    Returns the head outputs with the leading batch axis removed.
    """
    if mode not in ("CHE", "SWE"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "SWE" and (window is None or window <= 0):
        raise ValueError("SWE needs a positive window")
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            x = Tensor._wrap(video.frames[None])
            if mode == "CHE":
                out, _ = model(x)
                return {k: v.data[0] for k, v in out.items()}
            feats = model.backbone(x)                   # (1, T, D)
            steps = video.length
            prefix = min(window, steps)
            h_prefix, _ = model.lstm(feats[:, :prefix])  # frames 0..prefix-1
            hs = [h_prefix.data[0]]
            if steps > window:
                idx = np.arange(window)[None, :] + np.arange(1, steps - window + 1)[:, None]
                wins = Tensor._wrap(feats.data[0][idx])  # (T - window, window, D)
                h_win, _ = model.lstm(wins)
                hs.append(h_win.data[:, -1])
            h = Tensor._wrap(np.concatenate(hs, axis=0)[None])
            return {k: v[0] for k, v in _head_numpy(model, h).items()}
    finally:
        model.train(was_training)


def predict_phases(outputs: dict) -> np.ndarray:
    return outputs["probs"].argmax(axis=-1)


def evaluate_videos(model: SequenceModel, videos, mode: str = "CHE", window: int | None = None) -> list:
    return [evaluate(model, v, mode, window) for v in videos]


# -- freezing ----------------------------------------------------------------------

def partial_freeze(model: SequenceModel, k_blocks: int) -> SequenceModel:
    """Exclude the bottom ``k_blocks`` backbone blocks from optimization.

    Their normalization layers keep their mode: a BN layer in a frozen block
    still normalizes with (and accumulates) batch statistics in train mode.
    """
    n = len(model.backbone.blocks)
    if not 0 <= k_blocks <= n:
        raise ValueError(f"k_blocks must lie in [0, {n}]")
    model.backbone.frozen_blocks = k_blocks
    for i, block in enumerate(model.backbone.blocks):
        for p in block.linear.parameters() + block.norm.parameters():
            p.requires_grad = i >= k_blocks
    return model


def burn_in_frozen_bn(model: SequenceModel, videos, seq_len: int = 16, n_seq: int = 4, seed: int = 0):
    """Estimate statistics for FrozenBN layers from one i.i.d. epoch of
    forward passes with batch statistics, then freeze them."""
    layers = model.norm_layers
    if not all(n.kind == "FrozenBN" for n in layers):
        raise StateError("burn-in applies to FrozenBN models only")
    for n in layers:
        n.kind = "BN"
        n.training = True
        n.running_mean = n.running_var = None
    schedule = BatchSchedule("iid", seq_len, n_seq, seed=seed, task=model.cfg.task)
    with ad.no_grad():
        for batch in schedule.epoch(videos):
            model.backbone(Tensor._wrap(batch.frames))
    for block in model.backbone.blocks:
        block.norm = freeze_bn(block.norm)
    model.train(model.training)
    return model
