"""Compare activations (tanh, relu) and network layouts (independent, single) on one dataset.

    python3 scripts/architecture_study.py --grid 20 --epochs 600
"""

import argparse
import itertools

from elastinet import data, networks as nw, training as tr
from elastinet.elasticity import ELASTIC_FIELDS, MaterialParams


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--arch", default="5x20")
    p.add_argument("--epochs", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    ds = data.generate_elastic_dataset(data.GridSpec(a.grid, a.grid), 1.0, 0.5)
    print("activation,layout,final_loss,best_loss,lambda,mu")
    for act, layout in itertools.product(("tanh", "relu"), ("independent", "single")):
        arch = nw.NetworkArch.parse(a.arch, activation=act, mode=layout)
        model = nw.build_field_model(ELASTIC_FIELDS, arch, seed=a.seed)
        cfg = tr.TrainingConfig(max_epochs=a.epochs, patience=min(500, a.epochs), normalize=True, seed=a.seed)
        hist, ck = tr.train(model, MaterialParams(2.0, 2.0), ds, cfg)
        print(f"{act},{layout},{hist.total[-1]:.4e},{hist.best_loss:.4e},"
              f"{ck.params.lam:.5f},{ck.params.mu:.5f}", flush=True)


if __name__ == "__main__":
    main()
