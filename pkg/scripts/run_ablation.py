"""Loss or architecture ablation on toy phantoms; writes per-seed and summary CSVs."""
import argparse
import logging

from neuroseg.experiments import TUBULE_RICH, run_ablation, smoke_run_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", choices=["loss", "architecture"], default="loss")
    ap.add_argument("--variants", nargs="*", default=None, help="subset of the grid (default: all)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--tubule-rich", action="store_true", help="3-5 tubules per phantom")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = smoke_run_config(args.epochs, TUBULE_RICH if args.tubule_rich else None)
    for row in run_ablation(cfg, args.grid, args.seeds, args.out, args.variants):
        print(row)


if __name__ == "__main__":
    main()
