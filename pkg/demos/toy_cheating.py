"""Train the two-sample equality net with BN and GN and compare train-mode
and eval-mode accuracy.  Runs in a few seconds."""

import json

from bnseq.toy import run_toy_experiment

for kind in ("BN", "GN"):
    rep = run_toy_experiment(kind)
    print(f"{kind}: batch statistics {rep['train_mode_acc']:.3f}, running statistics "
          f"{rep['eval_mode_acc']:.3f}, eval histogram {rep['eval_mode_prediction_histogram']}")
    print("  d(logit_1)/d(x_2):", json.dumps(rep["leakage"]))
