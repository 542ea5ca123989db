"""Experiment configs, the grid runner and the diagnostic probes.

A grid file is YAML::

    dataset: {video_offset: 1.0}          # WorkflowConfig overrides
    base: {task: phase, epochs: 25}       # shared ExperimentConfig fields
    grid: {norm: [BN, GN], schedule: [4x16, 1x64], protocol: [SWE]}
    seeds: [0, 1, 2]

Every (grid point, seed) pair is one training run.  Result rows are
``(config_hash, seed, epoch, split, metric, value)``: the training loss and
the validation selection metric for every epoch, then the test metrics at
the epoch with the best validation score.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .metrics import MetricReport, video_accuracy
from .model import ModelConfig, SequenceModel
from .normalization import BATCH_DEPENDENT, KINDS, REDUCTION_AXES
from .training import (PROTOCOL_POLICY, BatchSchedule, HiddenStateStore, OptimizerState, adamw_step,
                       burn_in_frozen_bn, evaluate_videos, partial_freeze, predict_phases, train_epoch)
from .workflow import WorkflowConfig, WorkflowDataset, generate_dataset

TASKS = ("phase", "anticipation")
PROTOCOLS = ("SWE", "CHE", "CHT")
CSV_COLUMNS = ("config_hash", "seed", "epoch", "split", "metric", "value")


def parse_schedule(text: str) -> tuple[int, int]:
    """``"4x16"`` -> (4, 16)."""
    try:
        n, length = str(text).lower().replace("×", "x").split("x")
        return int(n), int(length)
    except ValueError:
        raise ConfigError(f"schedule must look like '4x16', got {text!r}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "phase"
    norm: str = "GN"
    groups: int = 4
    n_seq: int = 1
    seq_len: int = 64
    protocol: str = "CHE"
    freeze_blocks: int = 0
    # burn in BN statistics and train with them frozen
    freeze_bn: bool = False
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 0.01
    widths: tuple = (32, 32)
    hidden: int = 64
    aux_weight: float = 0.01
    momentum: float = 0.1
    # "best_val": test at the best validation epoch; "last": at the final epoch
    selection: str = "best_val"
    dataset: tuple = ()   # sorted (key, value) WorkflowConfig overrides

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "schedule" in d:
            d["n_seq"], d["seq_len"] = parse_schedule(d.pop("schedule"))
        if "dataset" in d:
            d["dataset"] = tuple(sorted((k, _freeze(v)) for k, v in dict(d["dataset"]).items()))
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def schedule(self) -> str:
        return f"{self.n_seq}x{self.seq_len}"

    @property
    def model_norm(self) -> str:
        return "FrozenBN" if self.freeze_bn else self.norm

    def validate(self) -> "ExperimentConfig":
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.norm not in KINDS:
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "CHT" and self.n_seq != 1:
            raise ConfigError("CHT needs single-sequence batches (n_seq = 1)")
        if self.freeze_bn and self.norm not in BATCH_DEPENDENT:
            raise ConfigError(f"freeze_bn needs a BN layer, got {self.norm}")
        if self.norm == "FrozenBN" and not self.freeze_bn:
            raise ConfigError("use norm: BN with freeze_bn: true for frozen statistics")
        if not 0 <= self.freeze_blocks <= len(self.widths):
            raise ConfigError(f"freeze_blocks must lie in [0, {len(self.widths)}]")
        if self.selection not in ("best_val", "last"):
            raise ConfigError(f"unknown selection {self.selection!r}")
        if self.epochs < 1 or self.lr <= 0 or self.seq_len < 1 or self.n_seq < 1:
            raise ConfigError("epochs, lr, n_seq and seq_len must be positive")
        self.workflow_config()
        return self

    def workflow_config(self) -> WorkflowConfig:
        try:
            return dataclasses.replace(WorkflowConfig(), **dict(self.dataset)).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad dataset overrides: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["dataset"] = {k: _thaw(v) for k, v in self.dataset}
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _freeze(v):
    return tuple(_freeze(x) for x in v) if isinstance(v, (list, tuple)) else v


def _thaw(v):
    return [_thaw(x) for x in v] if isinstance(v, tuple) else v


@dataclass(frozen=True)
class ResultRow:
    config_hash: str
    seed: int
    epoch: int
    split: str
    metric: str
    value: float


@dataclass
class RunResult:
    config: ExperimentConfig
    seed: int
    rows: list
    best_epoch: int
    test: MetricReport
    model: SequenceModel | None = None


# -- single runs -------------------------------------------------------------------

def build_model(cfg: ExperimentConfig, ds: WorkflowDataset, seed: int) -> SequenceModel:
    mcfg = ModelConfig(task=cfg.task, in_channels=ds.channels, widths=tuple(cfg.widths), hidden=cfg.hidden,
                       n_phases=ds.n_phases, n_instruments=ds.n_instruments, horizon=ds.horizon,
                       norm=cfg.model_norm, groups=cfg.groups, momentum=cfg.momentum,
                       aux_weight=cfg.aux_weight)
    return SequenceModel(mcfg, seed=seed)


def eval_mode(cfg: ExperimentConfig) -> tuple[str, int | None]:
    return ("SWE", cfg.seq_len) if cfg.protocol == "SWE" else ("CHE", None)


def score(model: SequenceModel, videos, cfg: ExperimentConfig, **meta) -> MetricReport:
    mode, window = eval_mode(cfg)
    outs = evaluate_videos(model, videos, mode, window)
    if cfg.task == "phase":
        return MetricReport.for_phase([predict_phases(o) for o in outs], [v.phases for v in videos],
                                      model.cfg.n_phases, **meta)
    return MetricReport.for_anticipation([o["reg"] for o in outs], [v.anticipation()[0] for v in videos],
                                         model.cfg.horizon, **meta)


def selection_metric(cfg: ExperimentConfig) -> tuple[str, float]:
    """Name of the validation metric and its sign (+1: higher is better)."""
    return ("accuracy", 1.0) if cfg.task == "phase" else ("mean_wMAE", -1.0)


def train_run(cfg: ExperimentConfig, ds: WorkflowDataset, seed: int, keep_model: bool = False) -> RunResult:
    """Train one config/seed, select the best validation epoch, report test metrics there."""
    cfg.validate()
    h = cfg.hash()
    model = build_model(cfg, ds, seed)
    if cfg.freeze_bn:
        burn_in_frozen_bn(model, ds.train, seed=seed)
    partial_freeze(model, cfg.freeze_blocks)
    kind = "temporal" if cfg.protocol == "CHT" else "iid"
    schedule = BatchSchedule(kind, cfg.seq_len, cfg.n_seq, seed=seed + 10_000, task=cfg.task)
    store = HiddenStateStore(PROTOCOL_POLICY[cfg.protocol], cfg.hidden)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    metric, sign = selection_metric(cfg)
    rows, best, best_score, snapshot = [], -1, -np.inf, None
    for epoch in range(cfg.epochs):
        stats = train_epoch(model, ds.train, schedule, store, opt)
        val = getattr(score(model, ds.val, cfg), metric)
        rows.append(ResultRow(h, seed, epoch, "train", "loss", stats["loss"]))
        rows.append(ResultRow(h, seed, epoch, "val", metric, val))
        if cfg.selection == "best_val" and sign * val > best_score:
            best, best_score, snapshot = epoch, sign * val, model.state_dict()
    if cfg.selection == "last":
        best = cfg.epochs - 1
    else:
        model.load_state_dict(snapshot)
    test = score(model, ds.test, cfg, seed=seed, config_hash=h)
    rows.extend(ResultRow(h, seed, best, "test", k, float(v)) for k, v in test.scalars().items())
    return RunResult(cfg, seed, rows, best, test, model if keep_model else None)


def _run_job(args):
    cfg, ds, seed = args
    return train_run(cfg, ds, seed).rows


def run_grid(configs, seeds, ds: WorkflowDataset | None = None, workers: int = 1):
    """Run every valid config for every seed.

    Returns ``(rows, failures)``; ``failures`` lists ``(config, message)``
    for configs rejected by validation, which are skipped.  Rows come back
    in (config, seed) order regardless of ``workers``.
    """
    valid, failures = [], []
    for cfg in configs:
        try:
            valid.append(cfg.validate())
        except ConfigError as exc:
            failures.append((cfg, str(exc)))
    jobs = []
    cache = {}
    for cfg in valid:
        data = ds
        if data is None:
            key = cfg.dataset
            if key not in cache:
                cache[key] = generate_dataset(cfg.workflow_config())
            data = cache[key]
        jobs.extend((cfg, data, s) for s in seeds)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_job, jobs))
    else:
        chunks = [_run_job(j) for j in jobs]
    return [r for chunk in chunks for r in chunk], failures


def expand_grid(spec: dict) -> tuple[list, list]:
    """Configs and seeds described by a parsed grid document."""
    base = dict(spec.get("base") or {})
    if spec.get("dataset"):
        base["dataset"] = spec["dataset"]
    axes = spec.get("grid") or {}
    names = list(axes)
    configs = []
    for values in itertools.product(*(axes[n] for n in names)):
        configs.append(ExperimentConfig.from_dict({**base, **dict(zip(names, values))}))
    seeds = [int(s) for s in spec.get("seeds", [0, 1, 2])]
    return configs, seeds


def load_grid(path) -> tuple[list, list]:
    with open(path) as fh:
        spec = yaml.safe_load(fh) or {}
    if not isinstance(spec, dict):
        raise ConfigError(f"{path}: grid file must hold a mapping")
    return expand_grid(spec)


# -- result tables -------------------------------------------------------------------

def emit(rows, fmt: str, path) -> None:
    """Write rows as CSV (columns ``CSV_COLUMNS``) or as a JSON list of objects."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            if fmt == "csv":
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                for r in rows:
                    w.writerow([r.config_hash, r.seed, r.epoch, r.split, r.metric, repr(float(r.value))])
            elif fmt == "json":
                json.dump([asdict(r) for r in rows], fh, indent=1)
                fh.write("\n")
            else:
                raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc.strerror}") from exc


def load_rows(path) -> list:
    path = Path(path)
    if path.suffix == ".json":
        return [ResultRow(**d) for d in json.loads(path.read_text())]
    with open(path, newline="") as fh:
        return [ResultRow(r["config_hash"], int(r["seed"]), int(r["epoch"]), r["split"], r["metric"],
                          float(r["value"])) for r in csv.DictReader(fh)]


def summarize(rows, split: str = "test") -> dict:
    """Mean over seeds of each (config_hash, metric) on ``split``."""
    acc: dict = {}
    for r in rows:
        if r.split == split:
            acc.setdefault((r.config_hash, r.metric), []).append(r.value)
    return {k: float(np.mean(v)) for k, v in acc.items()}


# -- model files -------------------------------------------------------------------

def save_model(model: SequenceModel, path, exp: ExperimentConfig | None = None) -> None:
    meta = {"model": {**asdict(model.cfg), "widths": list(model.cfg.widths)},
            "experiment": exp.to_dict() if exp else None,
            "frozen_blocks": model.backbone.frozen_blocks}
    np.savez(path, __meta__=np.array(json.dumps(meta)), **model.state_dict())


def load_model(path) -> tuple[SequenceModel, ExperimentConfig | None]:
    with np.load(path) as z:
        meta = json.loads(str(z["__meta__"]))
        state = {k: z[k] for k in z.files if k != "__meta__"}
    mcfg = meta["model"]
    mcfg["widths"] = tuple(mcfg["widths"])
    model = SequenceModel(ModelConfig(**mcfg))
    model.load_state_dict(state)
    partial_freeze(model, meta["frozen_blocks"])
    exp = ExperimentConfig.from_dict(meta["experiment"]) if meta["experiment"] else None
    return model, exp


# -- diagnostics ----------------------------------------------------------------------

def probe_batches(videos, n_seq: int, seq_len: int, seed: int = 0) -> list:
    """Frame batches shaped like an ``n_seq x seq_len`` training schedule."""
    kind = "temporal" if n_seq == 1 else "iid"
    return [b.frames for b in BatchSchedule(kind, seq_len, n_seq, seed=seed).epoch(list(videos))]


def feature_shift_probe(model: SequenceModel, batches) -> dict:
    """Per norm layer: how far batch statistics sit from the statistics used at test time.

    For every batch, each layer's input is computed along the test-time
    (eval-mode) path; the batch mean/variance of that input (as train mode
    would use them) are compared to the running statistics via
    mean_c |mu_b - mu_r| / sqrt(var_r + eps) + |(var_b + eps) / (var_r + eps) - 1|.
    Batch-independent layers score 0.
    """
    layers = model.norm_layers
    totals = np.zeros(len(layers))
    n = 0
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            for frames in batches:
                h = Tensor._wrap(np.asarray(frames, dtype=np.float64))
                for i, block in enumerate(model.backbone.blocks):
                    pre = block.pre_norm(h)
                    layer = block.norm
                    if layer.kind in BATCH_DEPENDENT:
                        axes = REDUCTION_AXES[layer.kind]
                        mu_b = pre.data.mean(axis=axes, keepdims=True)
                        var_b = pre.data.var(axis=axes, keepdims=True)
                        shape = (1, 1, layer.channels, 1)
                        mu_r = layer.running_mean.reshape(shape)
                        var_r = layer.running_var.reshape(shape) + layer.eps
                        totals[i] += float(np.mean(np.abs(mu_b - mu_r) / np.sqrt(var_r)
                                                   + np.abs((var_b + layer.eps) / var_r - 1.0)))
                    h = ad.relu(block.norm(pre))
                n += 1
    finally:
        model.train(was_training)
    per_layer = (totals / max(n, 1)).tolist()
    return {"per_layer": per_layer, "mean": float(np.mean(per_layer))}


def _chunked_reg(model: SequenceModel, videos, seq_len: int, carry_state: bool) -> list:
    preds = []
    with ad.no_grad():
        for v in videos:
            state, parts = None, []
            for o in range(0, v.length, seq_len):
                out, state = model(Tensor._wrap(v.frames[None, o:o + seq_len]), state if carry_state else None)
                parts.append(out["reg"].data[0])
            preds.append(np.concatenate(parts, axis=0))
    return preds


def anticipation_cheat_eval(model: SequenceModel, videos, mode: str = "global_stats",
                            seq_len: int | None = None, carry_state: bool = False) -> dict:
    """wMAE and per-frame traces under honest or batch-statistics evaluation.

    Each video is cut into consecutive chunks of ``seq_len`` frames and each
    chunk runs as one batch, starting from a zero state as in training (or
    carrying it when ``carry_state``, matching carry-hidden training).
    ``global_stats`` runs the chunks in eval mode with running statistics;
    ``batch_stats`` runs them in train mode, so batch statistics mix every
    frame of a chunk into each prediction and this mode deliberately reads
    future frames.  Only the statistics differ between the two modes.  With
    ``seq_len=None``, ``global_stats`` is the plain online evaluation over
    whole videos.
    """
    if model.cfg.task != "anticipation":
        raise ValueError("cheat evaluation needs an anticipation model")
    if mode not in ("global_stats", "batch_stats"):
        raise ValueError(f"unknown cheat-eval mode {mode!r}")
    if mode == "global_stats" and seq_len is None:
        preds = [o["reg"] for o in evaluate_videos(model, videos, "CHE")]
    else:
        if not seq_len or seq_len < 1:
            raise ValueError("chunked cheat evaluation needs a positive seq_len")
        if mode == "batch_stats" and not model.batch_dependent:
            warnings.warn("model has no batch-dependent layer; batch_stats equals global_stats", stacklevel=2)
        preds = _chunked_reg(model.clone().train(mode == "batch_stats"), videos, seq_len, carry_state)
    targets = [v.anticipation()[0] for v in videos]
    report = MetricReport.for_anticipation(preds, targets, model.cfg.horizon)
    return {"mode": mode, "wMAE": report.wMAE, "mean_wMAE": report.mean_wMAE,
            "report": report, "trace": [{"vid": v.vid, "pred": p, "target": t}
                                        for v, p, t in zip(videos, preds, targets)]}


def pre_occurrence_mask(video, seq_len: int) -> np.ndarray:
    """(T, n_instruments) frames that precede, inside the same chunk, a frame
    where the instrument is present, and are not themselves present."""
    present = video.presence()
    mask = np.zeros_like(present)
    for o in range(0, video.length, seq_len):
        chunk = present[o:o + seq_len]
        # any presence strictly later in the chunk
        later = np.flip(np.cumsum(np.flip(chunk, 0), 0), 0) - chunk
        mask[o:o + seq_len] = (later > 0) & ~chunk
    return mask


def cheat_comparison(model: SequenceModel, videos, seq_len: int, carry_state: bool = False) -> dict:
    """Honest vs batch-statistics evaluation side by side, plus the mean
    error on frames shortly before an in-chunk occurrence."""
    honest = anticipation_cheat_eval(model, videos, "global_stats", seq_len, carry_state)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cheat = anticipation_cheat_eval(model, videos, "batch_stats", seq_len, carry_state)
    masks = [pre_occurrence_mask(v, seq_len) for v in videos]

    def pre_err(run):
        errs = [np.abs(tr["pred"] - tr["target"])[m] for tr, m in zip(run["trace"], masks)]
        errs = np.concatenate(errs)
        return float(errs.mean()) if errs.size else float("nan")

    return {"global_wMAE": honest["mean_wMAE"], "batch_wMAE": cheat["mean_wMAE"],
            "relative_gap": (honest["mean_wMAE"] - cheat["mean_wMAE"]) / honest["mean_wMAE"],
            "global_pre_occurrence_err": pre_err(honest), "batch_pre_occurrence_err": pre_err(cheat),
            "max_abs_diff": max(float(np.abs(a["pred"] - b["pred"]).max())
                                for a, b in zip(honest["trace"], cheat["trace"])),
            "honest": honest, "cheat": cheat}


def memoryless_baseline(ds: WorkflowDataset, steps: int = 300, lr: float = 0.05, seed: int = 0) -> float:
    """Test video accuracy of per-frame softmax regression on standardized frames."""
    x = np.concatenate([v.frames.reshape(v.length, -1) for v in ds.train])
    y = np.concatenate([v.phases for v in ds.train])
    mu, sd = x.mean(0), x.std(0) + 1e-8
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(0, 0.01, size=(x.shape[1], ds.n_phases)), requires_grad=True)
    b = Tensor(np.zeros(ds.n_phases), requires_grad=True)
    xt = Tensor._wrap((x - mu) / sd)
    opt = OptimizerState(lr=lr, weight_decay=0.0)
    rows = np.arange(len(y))
    for _ in range(steps):
        w.grad = b.grad = None
        loss = -ad.log_softmax(xt @ w + b)[rows, y].mean()
        loss.backward()
        adamw_step(opt, [w, b], [w.grad, b.grad])
    preds = [(((v.frames.reshape(v.length, -1) - mu) / sd) @ w.data + b.data).argmax(1) for v in ds.test]
    return video_accuracy(preds, [v.phases for v in ds.test])

