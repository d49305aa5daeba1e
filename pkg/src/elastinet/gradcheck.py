"""Finite-difference checks of network input derivatives and loss parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import elastic_dataset_at, normalize
from .elasticity import ELASTIC_FIELDS, MaterialParams
from .networks import FieldModel, NetworkArch, build_field_model
from .training import LossGraph, _values

FD_STEP = 1e-6


def relative_error(a, b) -> float:
    """``max|a - b| / max|b|`` (absolute error when ``b`` vanishes)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    ref = float(np.max(np.abs(b))) if b.size else 0.0
    return err / ref if ref > 0 else err


@dataclass
class GradCheckResult:
    arch: NetworkArch
    n_points: int
    n_params: int
    input_error: float
    param_error: float
    worst_param: str

    @property
    def max_error(self) -> float:
        return max(self.input_error, self.param_error)


def random_problem(arch: NetworkArch, n_points: int, seed: int = 0, lam: float = 1.0, mu: float = 0.5):
    """Random points in the unit square with normalized manufactured data and a fresh model."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, 1.0, size=(n_points, 2))
    ds, _ = normalize(elastic_dataset_at(pts, lam, mu))
    model = build_field_model(ELASTIC_FIELDS, arch, seed=seed)
    # perturb around the truth so both parameter gradients are nonzero
    params = MaterialParams(lam * 1.3, mu * 0.8, trainable=frozenset({"lambda", "mu"}))
    return model, params, ds


def check_input_derivatives(model: FieldModel, graph: LossGraph, values: dict, points, h: float = FD_STEP) -> float:
    """Graph x/y derivatives of every field against central differences of the plain forward pass."""
    fields = graph.fields
    ad.evaluate(graph.tape, graph.bindings(values, points, {n: np.zeros(len(points)) for n in graph.obs_names}))
    worst = 0.0
    for k in range(2):
        step = np.zeros(points.shape[1])
        step[k] = h
        plus = model.predict(points + step)
        minus = model.predict(points - step)
        for name in model.fields:
            fd = (plus[name] - minus[name]) / (2 * h)
            node = fields[name].dx if k == 0 else fields[name].dy
            worst = max(worst, relative_error(node.value, fd))
    return worst


def check_parameter_gradients(graph: LossGraph, values: dict, points, columns, h: float = FD_STEP):
    """Analytic gradient of the total loss against central differences, entry by entry.

    Returns the worst per-array relative error and the name of that array.
    """
    _, grads = graph.gradient(values, points, columns)
    worst, worst_name = 0.0, ""
    for name in graph.param_names:
        base = np.array(values[name], dtype=np.float64)
        fd = np.zeros_like(base)
        flat = fd.reshape(-1)
        for i in range(base.size):
            trial = base.copy().reshape(-1)
            trial[i] = base.reshape(-1)[i] + h
            up = graph.evaluate({**values, name: trial.reshape(base.shape)}, points, columns)["total"]
            trial[i] = base.reshape(-1)[i] - h
            down = graph.evaluate({**values, name: trial.reshape(base.shape)}, points, columns)["total"]
            flat[i] = (up - down) / (2 * h)
        err = relative_error(grads[name], fd)
        if err >= worst:
            worst, worst_name = err, name
    return worst, worst_name


def gradient_check(arch: NetworkArch, n_points: int = 100, seed: int = 0, h: float = FD_STEP) -> GradCheckResult:
    model, params, ds = random_problem(arch, n_points, seed)
    graph = LossGraph(model, params, ds)
    values = _values(model, params, ds.normalization)
    in_err = check_input_derivatives(model, graph, values, ds.points, h)
    p_err, p_name = check_parameter_gradients(graph, values, ds.points, ds.columns, h)
    return GradCheckResult(arch, n_points, model.n_params, in_err, p_err, p_name)


def random_architectures(n: int, seed: int = 0, max_layers: int = 4, max_neurons: int = 12):
    """``n`` random small tanh architectures mixing network modes.

    ReLU is left out: a central difference straddling a kink is not a valid
    reference for the one-sided slope.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(NetworkArch(int(rng.integers(2, max_layers + 1)), int(rng.integers(2, max_neurons + 1)),
                               mode="independent" if i % 3 != 2 else "single"))
    return out
