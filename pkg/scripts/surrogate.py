"""Train a surrogate with mu as an input and report errors at unseen mu.

    python3 scripts/surrogate.py --grid 20 --epochs 800
"""

import argparse

import numpy as np

from elastinet import data, networks as nw, training as tr
from elastinet.elasticity import exact_displacement, exact_stress


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--epochs", type=int, default=800)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    parts = [data.generate_elastic_dataset(data.GridSpec(a.grid, a.grid), 1.0, m) for m in data.SURROGATE_MU]
    cfg = tr.TrainingConfig(max_epochs=a.epochs, patience=min(500, a.epochs), normalize=True, mode="solve",
                            seed=a.seed)
    hist, ck = tr.train_surrogate(parts, cfg, nw.TABLE1["i"])
    print(f"best loss {hist.best_loss:.3e} at epoch {hist.best_epoch}")

    pts = data.sample_grid(data.GridSpec(41, 41))
    ux, uy = exact_displacement(pts[:, 0], pts[:, 1])
    k = int(np.argmax(np.hypot(ux, uy)))
    print("mu,displacement_error_at_max,sxx_rel_error,sxy_rel_error")
    for mu in np.linspace(0.3, 4.5, 10):
        pred = ck.predict(np.column_stack([pts, np.full(len(pts), mu)]))
        u_err = np.hypot(pred["ux"][k] - ux[k], pred["uy"][k] - uy[k]) / np.hypot(ux[k], uy[k])
        sxx, _, sxy = exact_stress(pts[:, 0], pts[:, 1], 1.0, mu)
        e_xx = np.max(np.abs(pred["sxx"] - sxx)) / np.max(np.abs(sxx))
        e_xy = np.max(np.abs(pred["sxy"] - sxy)) / np.max(np.abs(sxy))
        print(f"{mu:.3f},{u_err:.5f},{e_xx:.5f},{e_xy:.5f}")


if __name__ == "__main__":
    main()
