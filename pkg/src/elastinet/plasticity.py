"""Plane-strain von Mises elastoplasticity residuals and the KKT-penalized loss.

Tensor components are ordered (xx, yy, zz, xy); ``eps_zz = 0``. The
equivalent plastic strain is taken from the networks themselves, as the
equivalent of ``e_ij - s_ij / (2 mu)``.

The helpers accept plain floats/arrays or graph nodes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .elasticity import (LossReport, MaterialParams, build_report, material_nodes, mean_square,
                         momentum_terms, observation_constants, scaled, strains, sum_terms)
from .networks import DenseNetwork, FieldModel, NetworkArch
from .normalization import NormalizationRecord

PLASTIC_FIELDS = ("ux", "uy", "sxx", "syy", "szz", "sxy")
PLASTIC_TERMS = tuple(f"data_{f}" for f in PLASTIC_FIELDS) + (
    "momentum_x", "momentum_y",
    "constitutive_xx", "constitutive_yy", "constitutive_zz", "constitutive_xy",
    "consistency", "kkt_positivity", "kkt_negativity", "kkt_complementarity",
)
# flow-rule factor multiplying s_ij/q: 3/2 is the associative von Mises normal;
# 2/3 is the coefficient as printed in the reference formulation
FLOW_CONSISTENT = 1.5
FLOW_LITERAL = 2.0 / 3.0
Q_GUARD = 1e-8


def _sqrt(v):
    return ad.sqrt(v) if isinstance(v, ad.Node) else np.sqrt(v)


def _sign(v):
    return ad.sign(v) if isinstance(v, ad.Node) else np.sign(v)


def _abs(v):
    return ad.absolute(v) if isinstance(v, ad.Node) else np.abs(v)


def deviatoric(xx, yy, zz, xy):
    third = (xx + yy + zz) * (1.0 / 3.0)
    return xx - third, yy - third, zz - third, xy


def contraction(t):
    """``t_ij t_ij`` for a symmetric tensor; the shear component counts twice."""
    xx, yy, zz, xy = t
    return xx * xx + yy * yy + zz * zz + xy * xy * 2.0


def equivalent_stress(s):
    return _sqrt(contraction(s) * 1.5)


def equivalent_strain(e):
    return _sqrt(contraction(e) * (2.0 / 3.0))


def plastic_multiplier_formula(eps_bar, sigma_y, mu):
    """``eps_bar - sigma_y / (3 mu)``, signed (no clipping)."""
    if not isinstance(mu, ad.Node) and np.any(np.asarray(mu) <= 0):
        raise ValueError(f"mu must be positive, got {mu}")
    if isinstance(mu, ad.Node):
        return eps_bar - sigma_y * ad.inv(mu) * (1.0 / 3.0)
    return eps_bar - sigma_y / (3.0 * mu)


def kkt_penalties(eps_p, F):
    """(positivity, negativity, complementarity) penalties.

    ``(1 - sign(eps_p)) |eps_p|``, ``(1 + sign(F)) |F|`` and ``|eps_p F|``.
    """
    pos = (1.0 - _sign(eps_p)) * _abs(eps_p) if not isinstance(eps_p, ad.Node) else \
        ad.mul(ad.sub(eps_p.tape.one(), ad.sign(eps_p)), ad.absolute(eps_p))
    neg = (1.0 + _sign(F)) * _abs(F) if not isinstance(F, ad.Node) else \
        ad.mul(ad.add(F.tape.one(), ad.sign(F)), ad.absolute(F))
    comp = _abs(eps_p * F)
    return pos, neg, comp


def plastic_quantities(fields, material, record: NormalizationRecord,
                       flow_coefficient: float = FLOW_CONSISTENT) -> dict:
    """Kinematic, deviatoric and yield quantities as graph nodes (physical units)."""
    tape = fields["ux"].value.tape
    mu, sy = material["mu"], material["sigma_y"]
    exx, eyy, exy = strains(fields, record)
    zero = tape.constant(0.0)
    ekk = ad.add(exx, eyy)
    e = deviatoric(exx, eyy, zero, exy)
    sig = tuple(scaled(fields[f].value, record.scale(f)) for f in ("sxx", "syy", "szz", "sxy"))
    s = deviatoric(*sig)
    q = equivalent_stress(s)
    eps_bar = equivalent_strain(e)
    two_mu_inv = ad.mul(tape.constant(0.5), ad.inv(mu))
    ep_net = tuple(ad.sub(ei, ad.mul(si, two_mu_inv)) for ei, si in zip(e, s))
    eps_p = equivalent_strain(ep_net)
    # flow direction s/q, switched off where q is negligible against the yield stress
    mask = ad.relu(ad.sign(ad.sub(q, ad.mul(tape.constant(Q_GUARD), sy))))
    ratio = ad.inv(ad.mul(q, mask))
    ep = tuple(ad.mul(ad.mul(eps_p, tape.constant(flow_coefficient)), ad.mul(si, ratio)) for si in s)
    return {
        "strain": (exx, eyy, zero, exy), "ekk": ekk, "e": e, "stress": sig, "s": s,
        "q": q, "F": ad.sub(q, sy), "eps_bar": eps_bar, "eps_p": eps_p, "ep": ep,
    }


def assemble_plastic(fields, material, obs, record: NormalizationRecord,
                     flow_coefficient: float = FLOW_CONSISTENT, clipped: bool = False) -> dict:
    """All sixteen terms plus ``"total"``.

    ``clipped`` replaces ``eps_bar - sigma_y/(3 mu)`` by its positive part in the
    consistency residual so elastic regions are not penalized.
    """
    missing = [c for c in PLASTIC_FIELDS + ("fx", "fy") if c not in obs]
    if missing:
        raise KeyError(f"observed columns {missing} required for plastic data are missing")
    tape = fields["ux"].value.tape
    lam, mu, sy = material["lambda"], material["mu"], material["sigma_y"]
    pq = plastic_quantities(fields, material, record, flow_coefficient)

    terms = {f"data_{f}": mean_square(ad.sub(fields[f].value, obs[f])) for f in PLASTIC_FIELDS}
    terms.update(momentum_terms(fields, obs, record))

    bulk = ad.mul(ad.add(lam, ad.mul(tape.constant(2.0 / 3.0), mu)), pq["ekk"])
    two_mu = ad.add(mu, mu)
    for k, comp in enumerate(("xx", "yy", "zz", "xy")):
        dev = ad.mul(two_mu, ad.sub(pq["e"][k], pq["ep"][k]))
        pred = dev if comp == "xy" else ad.add(bulk, dev)
        r = ad.sub(pred, pq["stress"][k])
        terms[f"constitutive_{comp}"] = mean_square(scaled(r, 1.0 / record.scale("s" + comp)))

    onset = plastic_multiplier_formula(pq["eps_bar"], sy, mu)
    if clipped:
        onset = ad.relu(onset)
    strain_inv = 1.0 / record.strain
    stress_inv = 1.0 / record.stress
    terms["consistency"] = mean_square(scaled(ad.sub(onset, pq["eps_p"]), strain_inv))
    pos, neg, comp = kkt_penalties(pq["eps_p"], pq["F"])
    terms["kkt_positivity"] = mean_square(scaled(pos, strain_inv))
    terms["kkt_negativity"] = mean_square(scaled(neg, stress_inv))
    terms["kkt_complementarity"] = mean_square(scaled(comp, strain_inv * stress_inv))
    terms["total"] = sum_terms({k: terms[k] for k in PLASTIC_TERMS})
    return terms


def plasticity_loss(model, params: MaterialParams, batch, record: NormalizationRecord | None = None,
                    flow_coefficient: float = FLOW_CONSISTENT, clipped: bool = False) -> LossReport:
    if params.sigma_y is None:
        raise ValueError("plasticity loss needs sigma_y")
    if "szz" not in batch.columns:
        raise KeyError("observed column 'szz' required for plastic data is missing")
    if batch.n_points == 0:
        raise ValueError("empty batch")
    record = record or batch.normalization
    tape = ad.Tape()
    x = tape.variable("X", batch.points)
    inputs = getattr(model, "inputs", batch.inputs)
    fields = model.field_nodes(tape, x)
    mat = material_nodes(tape, params, record, x, inputs)
    obs = observation_constants(tape, batch, PLASTIC_FIELDS + ("fx", "fy"))
    nodes = assemble_plastic(fields, mat, obs, record, flow_coefficient, clipped)
    return build_report(tape, nodes)


# --- homogeneous states ----------------------------------------------------------

def homogeneous_model(strain, stress, record: NormalizationRecord | None = None) -> FieldModel:
    """Single-layer linear networks reproducing a uniform strain/stress state exactly.

    ``strain`` is (exx, eyy, exy) and ``stress`` (sxx, syy, szz, sxy). The
    displacement is ``ux = exx x + exy y``, ``uy = exy x + eyy y``.
    """
    record = record or NormalizationRecord()
    exx, eyy, exy = strain
    arch = NetworkArch(1, 1, activation="linear")
    nets = {}
    rows = {"ux": [exx, exy], "uy": [exy, eyy]}
    for name, w in rows.items():
        s = record.scale(name)
        nets[name] = DenseNetwork([np.array([w], dtype=float) / s], [np.zeros(1)], ["linear"])
    for name, v in zip(("sxx", "syy", "szz", "sxy"), stress):
        s = record.scale(name)
        nets[name] = DenseNetwork([np.zeros((1, 2))], [np.array([v], dtype=float) / s], ["linear"])
    return FieldModel(PLASTIC_FIELDS, ("x", "y"), arch, nets)


def homogeneous_dataset(points, strain, stress, sigma_y=None, lam=None, mu=None):
    """Data for a uniform state: linear displacements, constant stresses, zero forces."""
    from .data import Dataset

    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    exx, eyy, exy = strain
    n = len(pts)
    cols = {
        "ux": exx * x + exy * y,
        "uy": exy * x + eyy * y,
        "sxx": np.full(n, float(stress[0])),
        "syy": np.full(n, float(stress[1])),
        "szz": np.full(n, float(stress[2])),
        "sxy": np.full(n, float(stress[3])),
        "fx": np.zeros(n),
        "fy": np.zeros(n),
    }
    return Dataset(pts, cols, mode="force", problem="plastic",
                   params={"lambda": lam, "mu": mu, "sigma_y": sigma_y})
