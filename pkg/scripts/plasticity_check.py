"""Evaluate the plasticity loss on homogeneous states from a radial-return integration.

Prints every loss term for an elastic, an at-yield and a plastic state, under
both flow coefficients and both consistency-term variants, plus the yield
stress gradient around the true value.

    python3 scripts/plasticity_check.py
"""

import sys
from pathlib import Path

import numpy as np

from elastinet import autodiff as ad, data, plasticity as pl
from elastinet.elasticity import MaterialParams

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import return_mapping, stress_components  # noqa: E402

LAM, MU, SY = 19.44e9, 29.17e9, 243.0e6


def state(strain):
    stress = stress_components(return_mapping(strain, LAM, MU, SY)["stress"])
    pts = data.sample_grid(data.GridSpec(6, 6))
    ds, rec = data.normalize(pl.homogeneous_dataset(pts, strain, stress, SY, LAM, MU))
    return pl.homogeneous_model(strain, stress, rec), ds


def main():
    elastic = np.array([1.0e-3, -0.5e-3, 0.2e-3])
    states = {
        "elastic": tuple(elastic),
        "at_yield": tuple(elastic * SY / return_mapping(elastic, LAM, MU, SY)["q"]),
        "plastic": (5.0e-3, -3.0e-3, 2.0e-3),
    }
    variants = {"consistent": (pl.FLOW_CONSISTENT, False), "clipped": (pl.FLOW_CONSISTENT, True),
                "literal_flow": (pl.FLOW_LITERAL, False)}
    for name, strain in states.items():
        model, ds = state(strain)
        for vname, (flow, clipped) in variants.items():
            rep = pl.plasticity_loss(model, MaterialParams(LAM, MU, SY), ds, flow_coefficient=flow,
                                     clipped=clipped)
            terms = " ".join(f"{k}={v:.2e}" for k, v in rep.terms.items() if not k.startswith("data_"))
            print(f"{name:9s} {vname:12s} total={rep.total:.2e} {terms}")
    model, ds = state(states["plastic"])
    for f in (0.8, 0.9, 1.0, 1.1, 1.2):
        rep = pl.plasticity_loss(model, MaterialParams(LAM, MU, f * SY, trainable={"sigma_y"}), ds)
        g = ad.parameter_gradient(rep.tape, rep.nodes["total"], ["sigma_y"])["sigma_y"]
        print(f"sigma_y = {f:.1f} x true: loss {rep.total:.3e}, d loss / d sigma_y {float(g):+.3e}")


if __name__ == "__main__":
    main()
