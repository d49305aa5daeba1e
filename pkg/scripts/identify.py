"""Identify lambda and mu from manufactured data with one network architecture.

    python3 scripts/identify.py --grid 40 --arch 5x20 --epochs 2000 --out runs/identify
"""

import argparse
import logging
from pathlib import Path

from elastinet import data, networks as nw, training as tr
from elastinet.elasticity import ELASTIC_FIELDS, MaterialParams


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", type=int, default=40)
    p.add_argument("--arch", default="5x20")
    p.add_argument("--activation", default="tanh", choices=("tanh", "relu"))
    p.add_argument("--network-mode", default="independent", choices=("independent", "single"))
    p.add_argument("--data-mode", default="force", choices=("force", "stress"))
    p.add_argument("--epochs", type=int, default=10000)
    p.add_argument("--patience", type=int, default=500)
    p.add_argument("--lambda0", type=float, default=2.0)
    p.add_argument("--mu0", type=float, default=2.0)
    p.add_argument("--raw", action="store_true", help="skip normalization")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/identify")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    ds = data.generate_elastic_dataset(data.GridSpec(a.grid, a.grid), 1.0, 0.5, mode=a.data_mode)
    arch = nw.NetworkArch.parse(a.arch, activation=a.activation, mode=a.network_mode)
    model = nw.build_field_model(ELASTIC_FIELDS, arch, seed=a.seed)
    cfg = tr.TrainingConfig(max_epochs=a.epochs, patience=min(a.patience, a.epochs), seed=a.seed,
                            normalize=not a.raw, log_every=100)
    hist, ck = tr.train(model, MaterialParams(a.lambda0, a.mu0), ds, cfg)

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    hist.to_csv(out / "history.csv")
    tr.save_checkpoint(ck, out / "best.ckpt.json")
    print(f"grid {a.grid}x{a.grid} arch {a.arch} {a.activation}/{a.network_mode}: "
          f"lambda={ck.params.lam:.6f} mu={ck.params.mu:.6f} best loss {hist.best_loss:.3e} "
          f"at epoch {hist.best_epoch} ({hist.stop_reason} after {hist.last_epoch})")


if __name__ == "__main__":
    main()
