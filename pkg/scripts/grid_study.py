"""Identification accuracy against training-grid resolution, force- and stress-complete.

    python3 scripts/grid_study.py --grids 10 20 40 --epochs 2000
"""

import argparse
import time

from elastinet import data, networks as nw, training as tr
from elastinet.elasticity import ELASTIC_FIELDS, MaterialParams


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grids", type=int, nargs="+", default=[10, 20, 40])
    p.add_argument("--modes", nargs="+", default=["force", "stress"])
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    print("mode,grid,lambda,mu,best_loss,best_epoch,seconds")
    for mode in a.modes:
        for n in a.grids:
            t0 = time.perf_counter()
            ds = data.generate_elastic_dataset(data.GridSpec(n, n), 1.0, 0.5, mode=mode)
            model = nw.build_field_model(ELASTIC_FIELDS, nw.TABLE1["i"], seed=a.seed)
            cfg = tr.TrainingConfig(max_epochs=a.epochs, patience=min(500, a.epochs), normalize=True,
                                    seed=a.seed)
            hist, ck = tr.train(model, MaterialParams(2.0, 2.0), ds, cfg)
            print(f"{mode},{n},{ck.params.lam:.6f},{ck.params.mu:.6f},{hist.best_loss:.4e},"
                  f"{hist.best_epoch},{time.perf_counter() - t0:.1f}", flush=True)


if __name__ == "__main__":
    main()
