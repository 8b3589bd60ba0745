"""Train the toy network on 200 phantoms and score it on 32 held-out ones."""
import argparse
import logging
import time

from neuroseg.experiments import run_experiment, smoke_run_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", default="runs/smoke")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t0 = time.perf_counter()
    res = run_experiment(smoke_run_config(args.epochs), args.out)
    print(f"finished in {time.perf_counter() - t0:.0f}s, best epoch {res.train_result.best_epoch}")
    for conv, rep in res.test_reports.items():
        print(f"{conv:>15}: dsc {rep.dsc:.4f}  iou {rep.iou:.4f}  macro_f1 {rep.macro_f1:.4f}")
    print(f"{'clDice':>15}: {res.test_cldice:.4f}")


if __name__ == "__main__":
    main()
