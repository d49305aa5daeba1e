"""Plane-strain linear elasticity: manufactured solution and the composite loss.

The loss has ten mean-of-squares terms: five data misfits, two momentum
residuals ``sigma_ij,j + f_i`` and three constitutive residuals. Strains come
only from derivatives of the displacement networks; stresses come from their
own networks and enter the constitutive law only as residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .networks import FieldEval
from .normalization import NormalizationRecord

PI = np.pi
Q_DEFAULT = 4.0

ELASTIC_FIELDS = ("ux", "uy", "sxx", "syy", "sxy")
ELASTIC_TERMS = tuple(f"data_{f}" for f in ELASTIC_FIELDS) + (
    "momentum_x", "momentum_y", "constitutive_xx", "constitutive_yy", "constitutive_xy",
)
PARAM_NAMES = ("lambda", "mu", "sigma_y")


@dataclass(frozen=True)
class MaterialParams:
    lam: float | None
    mu: float | None
    sigma_y: float | None = None
    trainable: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "trainable", frozenset(self.trainable))
        unknown = self.trainable - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown trainable parameters {sorted(unknown)}")
        for name in self.trainable:
            if self.get(name) is None:
                raise ValueError(f"trainable parameter {name!r} has no value")
        if self.mu is not None and self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        fixed = not ({"lambda", "mu"} & self.trainable)
        if fixed and self.lam is not None and self.mu is not None and self.lam + 2 * self.mu / 3 <= 0:
            raise ValueError("lambda + 2 mu / 3 must be positive")

    def get(self, name: str):
        return {"lambda": self.lam, "mu": self.mu, "sigma_y": self.sigma_y}[name]

    def as_dict(self) -> dict:
        return {name: self.get(name) for name in PARAM_NAMES}

    def with_values(self, **values) -> "MaterialParams":
        keys = {"lambda": "lam", "mu": "mu", "sigma_y": "sigma_y"}
        return replace(self, **{keys[k]: v for k, v in values.items()})

    def with_trainable(self, names) -> "MaterialParams":
        return replace(self, trainable=frozenset(names))


# --- manufactured solution --------------------------------------------------

def exact_displacement(x, y, Q=Q_DEFAULT):
    ux = np.cos(2 * PI * x) * np.sin(PI * y)
    uy = np.sin(PI * x) * Q * y**4 / 4
    return ux, uy


def exact_displacement_gradient(x, y, Q=Q_DEFAULT):
    """(ux_x, ux_y, uy_x, uy_y)."""
    return (
        -2 * PI * np.sin(2 * PI * x) * np.sin(PI * y),
        PI * np.cos(2 * PI * x) * np.cos(PI * y),
        PI * np.cos(PI * x) * Q * y**4 / 4,
        np.sin(PI * x) * Q * y**3,
    )


def exact_strain(x, y, Q=Q_DEFAULT):
    ux_x, ux_y, uy_x, uy_y = exact_displacement_gradient(x, y, Q)
    return ux_x, uy_y, 0.5 * (ux_y + uy_x)


def exact_stress(x, y, lam, mu, Q=Q_DEFAULT):
    exx, eyy, exy = exact_strain(x, y, Q)
    return (
        (lam + 2 * mu) * exx + lam * eyy,
        (lam + 2 * mu) * eyy + lam * exx,
        2 * mu * exy,
    )


def exact_stress_gradient(x, y, lam, mu, Q=Q_DEFAULT):
    """Spatial derivatives of the exact stresses, keyed like ``"sxx_x"``."""
    exx_x = -4 * PI**2 * np.cos(2 * PI * x) * np.sin(PI * y)
    exx_y = -2 * PI**2 * np.sin(2 * PI * x) * np.cos(PI * y)
    eyy_x = PI * np.cos(PI * x) * Q * y**3
    eyy_y = 3 * np.sin(PI * x) * Q * y**2
    exy_x = 0.5 * (-2 * PI**2 * np.sin(2 * PI * x) * np.cos(PI * y) - PI**2 * np.sin(PI * x) * Q * y**4 / 4)
    exy_y = 0.5 * (-PI**2 * np.cos(2 * PI * x) * np.sin(PI * y) + PI * np.cos(PI * x) * Q * y**3)
    return {
        "sxx_x": (lam + 2 * mu) * exx_x + lam * eyy_x,
        "sxx_y": (lam + 2 * mu) * exx_y + lam * eyy_y,
        "syy_x": (lam + 2 * mu) * eyy_x + lam * exx_x,
        "syy_y": (lam + 2 * mu) * eyy_y + lam * exx_y,
        "sxy_x": 2 * mu * exy_x,
        "sxy_y": 2 * mu * exy_y,
    }


def exact_body_force(x, y, lam, mu, Q=Q_DEFAULT):
    cx2, sy = np.cos(2 * PI * x), np.sin(PI * y)
    fx = (lam * (4 * PI**2 * cx2 * sy - PI * np.cos(PI * x) * Q * y**3)
          + mu * (9 * PI**2 * cx2 * sy - PI * np.cos(PI * x) * Q * y**3))
    fy = (lam * (-3 * np.sin(PI * x) * Q * y**2 + 2 * PI**2 * np.sin(2 * PI * x) * np.cos(PI * y))
          + mu * (-6 * np.sin(PI * x) * Q * y**2 + 2 * PI**2 * np.sin(2 * PI * x) * np.cos(PI * y)
                  + PI**2 * np.sin(PI * x) * Q * y**4 / 4))
    return fx, fy


@dataclass
class ExactElasticFields:
    """Field provider returning the manufactured fields as constants.

    Stands in for a :class:`~elastinet.networks.FieldModel` when a loss must be
    evaluated at the exact solution. Values are divided by the record's
    column scales, like network outputs.
    """

    lam: float
    mu: float
    Q: float = Q_DEFAULT
    record: NormalizationRecord = field(default_factory=NormalizationRecord)

    def field_nodes(self, tape: ad.Tape, x: ad.Node) -> dict[str, FieldEval]:
        pts = np.asarray(x.value)
        px, py = pts[:, 0], pts[:, 1]
        ux, uy = exact_displacement(px, py, self.Q)
        ux_x, ux_y, uy_x, uy_y = exact_displacement_gradient(px, py, self.Q)
        sxx, syy, sxy = exact_stress(px, py, self.lam, self.mu, self.Q)
        ds = exact_stress_gradient(px, py, self.lam, self.mu, self.Q)
        raw = {
            "ux": (ux, ux_x, ux_y),
            "uy": (uy, uy_x, uy_y),
            "sxx": (sxx, ds["sxx_x"], ds["sxx_y"]),
            "syy": (syy, ds["syy_x"], ds["syy_y"]),
            "sxy": (sxy, ds["sxy_x"], ds["sxy_y"]),
        }
        out = {}
        for name, (v, vx, vy) in raw.items():
            s = self.record.scale(name)
            out[name] = FieldEval(tape.constant(v / s), tape.constant(vx / s), tape.constant(vy / s))
        return out


# --- loss assembly ----------------------------------------------------------

@dataclass
class LossReport:
    terms: dict[str, float]
    total: float
    nodes: dict[str, ad.Node] | None = field(default=None, repr=False)
    tape: ad.Tape | None = field(default=None, repr=False)


def scaled(node: ad.Node, s: float) -> ad.Node:
    return node if s == 1.0 else ad.mul(node, node.tape.constant(s))


def mean_square(r: ad.Node) -> ad.Node:
    return ad.mean(ad.power(r, 2))


def sum_terms(terms: dict[str, ad.Node]) -> ad.Node:
    it = iter(terms.values())
    tot = next(it)
    for t in it:
        tot = ad.add(tot, t)
    return tot


def material_nodes(tape: ad.Tape, params: MaterialParams, record: NormalizationRecord,
                   x: ad.Node | None = None, inputs=()) -> dict[str, ad.Node]:
    """Material parameters as nodes.

    Trainable ones become variables holding ``value / scale`` (named
    ``"lambda"``, ``"mu"``, ``"sigma_y"``). A ``mu`` input feature overrides
    the parameter with the per-row input column.
    """
    out = {}
    for name in PARAM_NAMES:
        v = params.get(name)
        if v is None:
            continue
        if name in params.trainable:
            s = record.param_scale(name)
            out[name] = scaled(tape.variable(name, v / s), s)
        else:
            out[name] = tape.constant(v)
    if "mu" in inputs:
        out["mu"] = ad.column(x, list(inputs).index("mu"))
    return out


def require(obs: dict, names, mode: str):
    for name in names:
        if name not in obs:
            raise KeyError(f"observed column {name!r} required for {mode} data is missing")


def momentum_terms(fields, obs, record) -> dict[str, ad.Node]:
    """``sigma_ij,j + f_i`` for x and y, divided by the momentum magnitude."""
    sxx_x = scaled(fields["sxx"].dx, record.scale("sxx"))
    sxy_y = scaled(fields["sxy"].dy, record.scale("sxy"))
    sxy_x = scaled(fields["sxy"].dx, record.scale("sxy"))
    syy_y = scaled(fields["syy"].dy, record.scale("syy"))
    fx = scaled(obs["fx"], record.scale("fx"))
    fy = scaled(obs["fy"], record.scale("fy"))
    m = 1.0 / record.momentum
    return {
        "momentum_x": mean_square(scaled(ad.add(ad.add(sxx_x, sxy_y), fx), m)),
        "momentum_y": mean_square(scaled(ad.add(ad.add(sxy_x, syy_y), fy), m)),
    }


def strains(fields, record):
    exx = scaled(fields["ux"].dx, record.scale("ux"))
    eyy = scaled(fields["uy"].dy, record.scale("uy"))
    half = fields["ux"].value.tape.constant(0.5)
    exy = ad.mul(half, ad.add(scaled(fields["ux"].dy, record.scale("ux")),
                              scaled(fields["uy"].dx, record.scale("uy"))))
    return exx, eyy, exy


def assemble_elastic(fields: dict[str, FieldEval], material: dict[str, ad.Node],
                     obs: dict[str, ad.Node], record: NormalizationRecord) -> dict[str, ad.Node]:
    """All ten terms plus ``"total"`` as graph nodes."""
    require(obs, ELASTIC_FIELDS + ("fx", "fy"), "elastic")
    terms = {}
    for f in ELASTIC_FIELDS:
        terms[f"data_{f}"] = mean_square(ad.sub(fields[f].value, obs[f]))
    terms.update(momentum_terms(fields, obs, record))

    lam, mu = material["lambda"], material["mu"]
    exx, eyy, exy = strains(fields, record)
    l2m = ad.add(lam, ad.add(mu, mu))
    sxx = scaled(fields["sxx"].value, record.scale("sxx"))
    syy = scaled(fields["syy"].value, record.scale("syy"))
    sxy = scaled(fields["sxy"].value, record.scale("sxy"))
    rxx = ad.sub(ad.add(ad.mul(l2m, exx), ad.mul(lam, eyy)), sxx)
    ryy = ad.sub(ad.add(ad.mul(l2m, eyy), ad.mul(lam, exx)), syy)
    rxy = ad.sub(ad.mul(ad.add(mu, mu), exy), sxy)
    terms["constitutive_xx"] = mean_square(scaled(rxx, 1.0 / record.scale("sxx")))
    terms["constitutive_yy"] = mean_square(scaled(ryy, 1.0 / record.scale("syy")))
    terms["constitutive_xy"] = mean_square(scaled(rxy, 1.0 / record.scale("sxy")))
    terms["total"] = sum_terms({k: terms[k] for k in ELASTIC_TERMS})
    return terms


def build_report(tape: ad.Tape, nodes: dict[str, ad.Node]) -> LossReport:
    vals = {k: float(v.value) for k, v in nodes.items()}
    tot = vals.pop("total")
    return LossReport(vals, tot, nodes, tape)


def observation_constants(tape: ad.Tape, batch, names) -> dict[str, ad.Node]:
    return {n: tape.constant(batch.columns[n]) for n in names if n in batch.columns}


def elastic_loss(model, params: MaterialParams, batch, record: NormalizationRecord | None = None) -> LossReport:
    """Evaluate the elastic loss of ``model`` (or any field provider) on ``batch``.

    ``batch`` is a :class:`~elastinet.data.Dataset`; its normalization record
    is used unless ``record`` is given.
    """
    if batch.n_points == 0:
        raise ValueError("empty batch")
    record = record or batch.normalization
    tape = ad.Tape()
    x = tape.variable("X", batch.points)
    inputs = getattr(model, "inputs", batch.inputs)
    fields = model.field_nodes(tape, x)
    missing = [f for f in ELASTIC_FIELDS if f not in fields]
    if missing:
        raise ValueError(f"model lacks fields {missing}")
    mat = material_nodes(tape, params, record, x, inputs)
    obs = observation_constants(tape, batch, ELASTIC_FIELDS + ("fx", "fy"))
    nodes = assemble_elastic(fields, mat, obs, record)
    return build_report(tape, nodes)
