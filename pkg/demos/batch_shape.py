"""Phase recognition with one long clip per batch versus four short clips,
for BN and GN.  A single seed with few epochs, so expect about a minute and
noisy numbers; the acceptance suite averages three seeds at 25 epochs."""

import sys

from bnseq.experiments import ExperimentConfig, feature_shift_probe, probe_batches, train_run
from bnseq.workflow import generate_dataset

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
cfg0 = ExperimentConfig(task="phase", norm="GN", protocol="SWE", epochs=epochs)
ds = generate_dataset(cfg0.workflow_config())

for norm in ("GN", "BN"):
    for schedule in ("1x64", "4x16"):
        cfg = ExperimentConfig.from_dict({"task": "phase", "norm": norm, "schedule": schedule,
                                          "protocol": "SWE", "epochs": epochs})
        res = train_run(cfg, ds, seed=0, keep_model=True)
        shift = feature_shift_probe(res.model, probe_batches(ds.test, cfg.n_seq, cfg.seq_len))["mean"]
        print(f"{norm} {schedule}: test accuracy {res.test.accuracy:.3f}, feature shift {shift:.3f}")
