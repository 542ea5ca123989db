"""Synthetic "surgical" workflow videos.

Each video walks through phases 0..K-1 in order.  A frame is its phase
prototype (a C x S pattern) plus Gaussian noise, plus one offset per video
shared by every channel and position (think exposure), plus a per-channel
signature for every instrument present in that frame.  Two phases share one
prototype, so telling them apart from a single frame is impossible; only the
order of phases (temporal context) disambiguates them.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import anticipation_targets

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class WorkflowConfig:
    n_phases: int = 4
    channels: int = 8
    spatial: int = 16
    # relative phase durations, rescaled per video to a length in length_range
    duration_mean: tuple = (70.0, 40.0, 100.0, 40.0)
    duration_std: tuple = (12.0, 8.0, 20.0, 8.0)
    shared_prototype: tuple | None = (0, 2)
    separation: float = 1.0
    noise: float = 1.0
    # per-video offset shared by all channels and positions (exposure-like
    # nuisance); its std is video_offset * noise
    video_offset: float = 1.0
    n_instruments: int = 2
    onset_rate: float = 0.02
    # onset-rate multiplier per (instrument, phase)
    affinity: tuple = ((1.0, 0.2, 0.6, 0.0), (0.0, 0.6, 0.2, 1.0))
    burst_range: tuple = (2, 6)
    signature: float = 2.0
    horizon: float = 32.0
    n_train: int = 24
    n_val: int = 6
    n_test: int = 12
    length_range: tuple = (192, 320)
    seed: int = 0

    def validate(self):
        if self.n_phases < 2:
            raise ValueError("need at least two phases")
        if len(self.duration_mean) != self.n_phases or len(self.duration_std) != self.n_phases:
            raise ValueError("duration_mean/duration_std need one entry per phase")
        if min(self.duration_mean) < 1:
            raise ValueError("mean phase durations must be >= 1")
        if self.video_offset < 0:
            raise ValueError("video_offset must be non-negative")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        aff = np.asarray(self.affinity, dtype=float)
        if aff.shape != (self.n_instruments, self.n_phases) or (aff < 0).any():
            raise ValueError("affinity must be a non-negative (instruments x phases) table")
        lo, hi = self.length_range
        if not 0 < lo <= hi or lo < self.n_phases:
            raise ValueError("invalid length_range")
        if self.shared_prototype is not None:
            a, b = self.shared_prototype
            if a == b or not (0 <= a < self.n_phases and 0 <= b < self.n_phases):
                raise ValueError("shared_prototype must name two distinct phases")
        return self


@dataclass
class WorkflowVideo:
    vid: str
    frames: np.ndarray            # (T, C, S)
    phases: np.ndarray            # (T,) ints in [0, K)
    occurrences: list             # per instrument: sorted frame indices where it is present
    horizon: float = 32.0

    @property
    def length(self) -> int:
        return len(self.phases)

    @property
    def split(self) -> str:
        return self.vid.split("-")[0]

    def remaining_time(self) -> np.ndarray:
        """(T, n_instruments) frames until the next occurrence (inf if none)."""
        t = np.arange(self.length)
        out = np.full((self.length, len(self.occurrences)), np.inf)
        for i, occ in enumerate(self.occurrences):
            occ = np.asarray(occ, dtype=np.int64)
            if occ.size == 0:
                continue
            nxt = np.searchsorted(occ, t, side="left")
            valid = nxt < occ.size
            out[valid, i] = occ[nxt[valid]] - t[valid]
        return out

    def anticipation(self) -> tuple[np.ndarray, np.ndarray]:
        """Regression targets and 3-way classes, each (T, n_instruments)."""
        return anticipation_targets(self.remaining_time(), self.horizon)

    def presence(self) -> np.ndarray:
        out = np.zeros((self.length, len(self.occurrences)), dtype=bool)
        for i, occ in enumerate(self.occurrences):
            out[np.asarray(occ, dtype=np.int64), i] = True
        return out


@dataclass
class WorkflowDataset:
    train: list
    val: list
    test: list
    n_phases: int
    channels: int
    spatial: int
    horizon: float
    n_instruments: int
    config: WorkflowConfig | None = None
    prototypes: np.ndarray | None = field(default=None, repr=False)

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def videos(self):
        return self.train + self.val + self.test

    def checksum(self) -> str:
        h = hashlib.sha256()
        for v in self.videos():
            h.update(v.vid.encode())
            h.update(np.ascontiguousarray(v.frames).tobytes())
            h.update(np.ascontiguousarray(v.phases).tobytes())
            for occ in v.occurrences:
                h.update(np.asarray(occ, dtype=np.int64).tobytes())
        return h.hexdigest()

    def channel_stats(self, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and (biased) variance over all frames and positions."""
        allf = np.concatenate([v.frames for v in self.split(split)], axis=0)
        return allf.mean(axis=(0, 2)), allf.var(axis=(0, 2))


def _prototypes(cfg: WorkflowConfig, rng: np.random.Generator) -> np.ndarray:
    protos = rng.normal(size=(cfg.n_phases, cfg.channels, cfg.spatial)) * cfg.separation
    if cfg.shared_prototype is not None:
        a, b = cfg.shared_prototype
        protos[b] = protos[a]
    return protos


def _durations(cfg: WorkflowConfig, length: int, rng) -> np.ndarray:
    raw = rng.normal(cfg.duration_mean, cfg.duration_std)
    raw = np.maximum(raw, 1.0)
    d = np.maximum(np.round(raw * length / raw.sum()).astype(np.int64), 1)
    d[np.argmax(d)] += length - d.sum()
    if d.min() < 1:  # only reachable for very short videos
        d = np.maximum(d, 1)
        while d.sum() > length:
            d[np.argmax(d)] -= 1
    return d


def _occurrences(cfg: WorkflowConfig, phases: np.ndarray, rng) -> list:
    aff = np.asarray(cfg.affinity, dtype=float)
    lo, hi = cfg.burst_range
    out = []
    for i in range(cfg.n_instruments):
        p = np.clip(cfg.onset_rate * aff[i, phases], 0.0, 1.0)
        onsets = np.flatnonzero(rng.random(len(phases)) < p)
        present = np.zeros(len(phases), dtype=bool)
        for t0 in onsets:
            present[t0:t0 + int(rng.integers(lo, hi + 1))] = True
        out.append(np.flatnonzero(present))
    return out


def generate_video(cfg: WorkflowConfig, vid: str, prototypes: np.ndarray, signatures: np.ndarray,
                   rng: np.random.Generator) -> WorkflowVideo:
    length = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
    durations = _durations(cfg, length, rng)
    phases = np.repeat(np.arange(cfg.n_phases), durations)
    occ = _occurrences(cfg, phases, rng)
    frames = prototypes[phases] + cfg.noise * rng.normal(size=(length, cfg.channels, cfg.spatial))
    frames += cfg.noise * cfg.video_offset * rng.normal()
    for i, o in enumerate(occ):
        frames[o] += signatures[i]
    return WorkflowVideo(vid, frames, phases, occ, cfg.horizon)


def generate_dataset(cfg: WorkflowConfig | None = None) -> WorkflowDataset:
    """Deterministic train/val/test split of synthetic videos for ``cfg.seed``."""
    cfg = (cfg or WorkflowConfig()).validate()
    root = np.random.SeedSequence(cfg.seed)
    proto_seq, sig_seq, video_seq = root.spawn(3)
    prototypes = _prototypes(cfg, np.random.default_rng(proto_seq))
    sig_rng = np.random.default_rng(sig_seq)
    # one offset per channel, constant over positions
    signatures = sig_rng.normal(size=(cfg.n_instruments, cfg.channels, 1))
    signatures *= cfg.signature / np.sqrt((signatures ** 2).mean(axis=(1, 2), keepdims=True))
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    per_video = iter(video_seq.spawn(sum(counts.values())))
    splits = {}
    for name in SPLITS:
        splits[name] = [generate_video(cfg, f"{name}-{j:03d}", prototypes, signatures,
                                       np.random.default_rng(next(per_video)))
                        for j in range(counts[name])]
    return WorkflowDataset(**splits, n_phases=cfg.n_phases, channels=cfg.channels,
                           spatial=cfg.spatial, horizon=cfg.horizon,
                           n_instruments=cfg.n_instruments, config=cfg, prototypes=prototypes)


def difficulty_knobs(cfg: WorkflowConfig, separation: float | None = None, noise: float | None = None,
                     ambiguous: bool | None = None, signature: float | None = None) -> WorkflowConfig:
    """Return a copy of ``cfg`` with the difficulty controls replaced.

    ``ambiguous`` toggles the shared prototype between the first and the
    longest later phase.  ``signature`` is the RMS amplitude of an instrument's
    additive pattern; it only shows at frames where the instrument is present.
    """
    changes = {}
    if separation is not None:
        changes["separation"] = float(separation)
    if noise is not None:
        changes["noise"] = float(noise)
    if signature is not None:
        changes["signature"] = float(signature)
    if ambiguous is not None:
        if ambiguous:
            later = 1 + int(np.argmax(cfg.duration_mean[1:]))
            changes["shared_prototype"] = (0, later)
        else:
            changes["shared_prototype"] = None
    return dataclasses.replace(cfg, **changes).validate()


def bayes_frame_accuracy(ds: WorkflowDataset, split: str = "test") -> float:
    """Accuracy of the per-frame MAP phase classifier that knows the
    prototypes, the noise level and the training phase priors (per-video
    offsets and instrument signatures ignored).  This is the memoryless ceiling."""
    if ds.prototypes is None or ds.config is None:
        raise ValueError("dataset carries no generating prototypes")
    priors = np.bincount(np.concatenate([v.phases for v in ds.train]), minlength=ds.n_phases)
    log_prior = np.log(np.maximum(priors, 1) / priors.sum())
    noise2 = max(ds.config.noise, 1e-12) ** 2
    correct = total = 0
    protos = ds.prototypes.reshape(ds.n_phases, -1)
    for v in ds.split(split):
        f = v.frames.reshape(v.length, -1)
        d2 = ((f[:, None, :] - protos[None]) ** 2).sum(-1)
        score = -0.5 * d2 / noise2 + log_prior
        correct += int((score.argmax(1) == v.phases).sum())
        total += v.length
    return correct / total


def validate_video(v: WorkflowVideo) -> None:
    """Raise AssertionError if a video breaks the workflow invariants."""
    steps = np.diff(v.phases)
    assert ((steps == 0) | (steps == 1)).all(), f"{v.vid}: phases not a monotone walk"
    assert v.phases[0] == 0, f"{v.vid}: does not start in phase 0"
    y, c = v.anticipation()
    pres = v.presence()
    assert (y[pres] == 0).all() and (c[pres] == 0).all(), f"{v.vid}: occurrence frame not present"
    assert (y[~pres] > 0).all(), f"{v.vid}: non-occurrence frame with zero target"


# -- text export -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: WorkflowDataset, path) -> None:
    """Write the dataset in the plain-text exchange format.

    Line 1: ``K C S h n_instruments``.  Then per video: ``id T``, the T phase
    labels, one line per instrument holding ``count idx...``, and T lines of
    C*S feature values (shortest round-trip repr, lossless for float64).
    Video ids are ``<split>-<nnn>``.
    """
    path = Path(path)
    lines = [f"{ds.n_phases} {ds.channels} {ds.spatial} {_fmt(ds.horizon)} {ds.n_instruments}"]
    for v in ds.videos():
        lines.append(f"{v.vid} {v.length}")
        lines.append(" ".join(str(int(p)) for p in v.phases))
        for occ in v.occurrences:
            lines.append(" ".join([str(len(occ))] + [str(int(i)) for i in occ]))
        for row in v.frames.reshape(v.length, -1):
            lines.append(" ".join(_fmt(x) for x in row))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path) -> WorkflowDataset:
    with open(path) as fh:
        lines = fh.read().split("\n")
    k, c, s, h, n_inst = lines[0].split()
    k, c, s, n_inst, h = int(k), int(c), int(s), int(n_inst), float(h)
    splits = {name: [] for name in SPLITS}
    i = 1
    while i < len(lines) and lines[i].strip():
        vid, length = lines[i].split()
        length = int(length)
        phases = np.array(lines[i + 1].split(), dtype=np.int64)
        occ = []
        for j in range(n_inst):
            parts = lines[i + 2 + j].split()
            occ.append(np.array(parts[1:1 + int(parts[0])], dtype=np.int64))
        start = i + 2 + n_inst
        rows = [np.array(lines[start + t].split(), dtype=np.float64) for t in range(length)]
        frames = np.stack(rows).reshape(length, c, s)
        v = WorkflowVideo(vid, frames, phases, occ, h)
        splits[v.split].append(v)
        i = start + length
    return WorkflowDataset(**splits, n_phases=k, channels=c, spatial=s, horizon=h, n_instruments=n_inst)
