"""Lorenz switching study with the GRU baseline fitted on the same split.

    python scripts/run_lorenz.py --seeds 0 1 2 3 4 --out lorenz_results.json
"""
import argparse
import json

import numpy as np

from ds3m.baselines import baseline_predict_windows, baseline_train
from ds3m.config import TrainConfig
from ds3m.evaluation import rmse
from ds3m.experiments import run_lorenz


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    rows = []
    for s in args.seeds:
        r = run_lorenz(s, TrainConfig(seed=s), S=args.samples)
        base, _ = baseline_train(r.split, TrainConfig(seed=s), hidden_dim=20)
        base_rmse = rmse(r.split.test.y[:, -1, :], baseline_predict_windows(base, r.split.test, r.split.normalizer))
        row = {"seed": s, "rmse": r.forecast.rmse, "gru_rmse": base_rmse, "ratio": r.forecast.rmse / base_rmse,
               "forecast_acc": r.forecast.accuracy, "segment_acc": r.inference.accuracy,
               "gamma": r.gamma.tolist(), "best_epoch": r.extra["report"].best_epoch}
        rows.append(row)
        print(json.dumps(row), flush=True)
    med = {k: float(np.median([r[k] for r in rows])) for k in ("forecast_acc", "segment_acc", "ratio")}
    print("median", json.dumps(med))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"runs": rows, "median": med}, fh, indent=1)


if __name__ == "__main__":
    main()
