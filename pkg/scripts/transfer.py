"""Pretrain on mu = 0.5, then retrain on other mu and compare with training from scratch.

    python3 scripts/transfer.py --grid 40 --pretrain 1000 --epochs 300
"""

import argparse

from elastinet import data, networks as nw, training as tr
from elastinet.elasticity import ELASTIC_FIELDS, MaterialParams


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", type=int, default=40)
    p.add_argument("--pretrain", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--mus", type=float, nargs="+", default=[2.0, 1.5, 1.0, 0.1])
    p.add_argument("--fraction", type=float, default=0.01,
                   help="converged once the loss is below this fraction of the scratch initial loss")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    grid = data.GridSpec(a.grid, a.grid)
    model = nw.build_field_model(ELASTIC_FIELDS, nw.TABLE1["i"], seed=a.seed)
    cfg = tr.TrainingConfig(max_epochs=a.pretrain, patience=min(500, a.pretrain), normalize=True, seed=a.seed)
    _, ck = tr.train(model, MaterialParams(2.0, 2.0), data.generate_elastic_dataset(grid, 1.0, 0.5), cfg)
    print(f"pretrained: lambda={ck.params.lam:.5f} mu={ck.params.mu:.5f}")

    cfg = tr.TrainingConfig(max_epochs=a.epochs, patience=a.epochs, seed=a.seed)
    print("mu,retrain_L0,scratch_L0,retrain_epochs,scratch_epochs,retrain_mu,scratch_mu")
    for mu in a.mus:
        new = data.generate_elastic_dataset(grid, 1.0, mu)
        hist, rck = tr.retrain(ck, new, cfg)
        prepared = tr.prepare_dataset(new, cfg, ck.normalization)
        fresh = nw.build_field_model(ELASTIC_FIELDS, ck.model.arch, seed=a.seed)
        scratch, sck = tr.train(fresh, ck.params, prepared, cfg, _prepared=True)
        tau = a.fraction * scratch.initial_loss
        print(f"{mu},{hist.initial_loss:.4e},{scratch.initial_loss:.4e},{hist.converged_epoch(tau)},"
              f"{scratch.converged_epoch(tau)},{rck.params.mu:.5f},{sck.params.mu:.5f}", flush=True)


if __name__ == "__main__":
    main()
