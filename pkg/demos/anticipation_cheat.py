"""Train a BN anticipation model on single 32-frame clips, then score it
with running statistics and with per-clip batch statistics.  The second
score is lower because batch statistics carry information about upcoming
instrument occurrences.  A few minutes on one CPU."""

import numpy as np

from bnseq.experiments import ExperimentConfig, cheat_comparison, pre_occurrence_mask, train_run
from bnseq.workflow import generate_dataset

cfg = ExperimentConfig.from_dict({"task": "anticipation", "norm": "BN", "schedule": "1x32",
                                  "protocol": "CHE", "epochs": 24, "selection": "last"})
ds = generate_dataset(cfg.workflow_config())
model = train_run(cfg, ds, seed=0, keep_model=True).model
res = cheat_comparison(model, ds.test, 32)
print(f"wMAE with running statistics {res['global_wMAE']:.2f}, with batch statistics "
      f"{res['batch_wMAE']:.2f} ({res['relative_gap']:.0%} lower)")
print(f"error just before an in-clip occurrence: {res['global_pre_occurrence_err']:.2f} -> "
      f"{res['batch_pre_occurrence_err']:.2f}")

video = ds.test[0]
honest, cheat = res["honest"]["trace"][0], res["cheat"]["trace"][0]
frames = np.flatnonzero(pre_occurrence_mask(video, cfg.seq_len)[:, 0])[:12]
print("frames shortly before instrument 0 appears later in the same clip (first test video):")
print("frame  target  honest  cheat")
for t in frames:
    print(f"{t:5d}  {cheat['target'][t, 0]:6.1f}  {honest['pred'][t, 0]:6.1f}  {cheat['pred'][t, 0]:5.1f}")
