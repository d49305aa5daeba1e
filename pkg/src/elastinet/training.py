"""Adam training loop, identification tracking, checkpoints and transfer learning."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, concatenate_with_mu, normalize, with_central_difference_forces
from .elasticity import (ELASTIC_FIELDS, ELASTIC_TERMS, PARAM_NAMES, LossReport, MaterialParams,
                         assemble_elastic, material_nodes)
from .networks import DenseNetwork, FieldModel, NetworkArch, build_field_model
from .normalization import NormalizationRecord
from .plasticity import FLOW_CONSISTENT, PLASTIC_FIELDS, PLASTIC_TERMS, assemble_plastic

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training aborted; ``history`` holds everything recorded up to the failure."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history


class NonFiniteGradientError(TrainingError, FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class CheckpointError(ValueError):
    pass


@dataclass
class TrainingConfig:
    batch_size: int = 64
    max_epochs: int = 10000
    patience: int = 500
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = "identify"  # or "solve"
    flow_coefficient: float = FLOW_CONSISTENT
    clipped: bool = False
    normalize: bool = False
    term_every: int = 10
    log_every: int = 0
    arch: NetworkArch | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.patience < 1 or self.patience > max(self.max_epochs, 1):
            raise ValueError("patience must be in [1, max_epochs]")
        if self.mode not in ("identify", "solve"):
            raise ValueError(f"unknown mode {self.mode!r}")


# --- Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(theta, g, m, v, t: int, config: TrainingConfig):
    """Bias-corrected Adam update of arrays at step ``t`` (1-based); returns (theta, m, v)."""
    b1, b2 = config.beta1, config.beta2
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * (g * g)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    return theta - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps), m, v


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainingConfig) -> dict:
    """One Adam update of named arrays; returns new parameter arrays, updates ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        out[name], state.m[name], state.v[name] = adam_update(p, g, m, v, state.t, config)
    return out


class _Packing:
    """Named arrays laid out in one flat vector, so the optimizer runs as a few array ops."""

    def __init__(self, values: dict):
        self.names = list(values)
        self.shapes = [np.shape(values[n]) for n in self.names]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    def pack(self, d: dict, default=None) -> np.ndarray:
        parts = []
        for n, s in zip(self.names, self.shapes):
            a = d.get(n, default)
            parts.append(np.zeros(s) if a is None else np.asarray(a, dtype=np.float64))
        return np.concatenate([np.ravel(p) for p in parts])

    def unpack(self, flat: np.ndarray) -> dict:
        b = self.bounds
        return {n: flat[b[i]:b[i + 1]].reshape(s) for i, (n, s) in enumerate(zip(self.names, self.shapes))}

    def first_nonfinite(self, flat: np.ndarray) -> str:
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        return self.names[int(np.searchsorted(self.bounds, bad, side="right")) - 1]


# --- loss graph -------------------------------------------------------------------

def problem_fields(problem: str) -> tuple[str, ...]:
    return PLASTIC_FIELDS if problem == "plastic" else ELASTIC_FIELDS


def problem_terms(problem: str) -> tuple[str, ...]:
    return PLASTIC_TERMS if problem == "plastic" else ELASTIC_TERMS


class LossGraph:
    """The loss built once on a tape and replayed on any batch.

    Inputs, observations, network weights and trainable material parameters
    are all tape variables, so a batch only rebinds values.
    """

    def __init__(self, model: FieldModel, params: MaterialParams, dataset: Dataset,
                 flow_coefficient: float = FLOW_CONSISTENT, clipped: bool = False):
        self.problem = dataset.problem
        self.record = dataset.normalization
        self.params = params
        template = dataset.subset(np.arange(min(dataset.n_points, 64)))
        tape = ad.Tape()
        x = tape.variable("X", template.points)
        names = problem_fields(self.problem) + ("fx", "fy")
        missing = [n for n in names if n not in dataset.columns]
        if missing:
            raise KeyError(f"observed columns {missing} required for "
                           f"{dataset.mode}-complete {self.problem} data are missing")
        obs = {n: tape.variable(f"obs:{n}", template.columns[n]) for n in names}
        fields = model.field_nodes(tape, x)
        mat = material_nodes(tape, params, self.record, x, model.inputs)
        if self.problem == "plastic":
            nodes = assemble_plastic(fields, mat, obs, self.record, flow_coefficient, clipped)
        else:
            nodes = assemble_elastic(fields, mat, obs, self.record)
        self.tape, self.nodes, self.obs_names, self.fields = tape, nodes, names, fields
        self.loss = nodes["total"]
        self.material_names = tuple(n for n in PARAM_NAMES if n in params.trainable)
        self.param_names = tuple(model.graph_parameters()) + self.material_names

    def bindings(self, values: dict, points, columns) -> dict:
        b = dict(values)
        b["X"] = points
        for n in self.obs_names:
            b[f"obs:{n}"] = columns[n]
        return b

    def evaluate(self, values: dict, points, columns) -> dict[str, float]:
        ad.evaluate(self.tape, self.bindings(values, points, columns))
        return {k: float(v.value) for k, v in self.nodes.items()}

    def gradient(self, values: dict, points, columns):
        ad.evaluate(self.tape, self.bindings(values, points, columns))
        grads = ad.parameter_gradient(self.tape, self.loss, self.param_names)
        return float(self.loss.value), grads


# --- history ----------------------------------------------------------------------

@dataclass
class TrainingHistory:
    problem: str = "elastic"
    epochs: list = field(default_factory=list)
    total: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    params: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    initial_loss: float | None = None
    initial_terms: dict | None = None
    best_epoch: int = 0
    best_loss: float | None = None
    stop_reason: str = ""
    aborted: dict | None = None
    scratch_initial_loss: float | None = None

    @property
    def initial_loss_ratio(self) -> float | None:
        if self.scratch_initial_loss is None or self.initial_loss is None:
            return None
        return self.initial_loss / self.scratch_initial_loss

    @property
    def last_epoch(self) -> int:
        return self.epochs[-1] if self.epochs else 0

    def final_params(self) -> dict:
        return self.params[-1] if self.params else {}

    def converged_epoch(self, threshold: float) -> int | None:
        """First epoch whose loss is at or below ``threshold`` (0 = already at start)."""
        if self.initial_loss is not None and self.initial_loss <= threshold:
            return 0
        for e, v in zip(self.epochs, self.total):
            if v <= threshold:
                return e
        return None

    def to_csv(self, path) -> None:
        names = problem_terms(self.problem)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "total_loss"] + [f"term_{n}" for n in names]
                       + ["lambda", "mu", "sigma_y", "seconds"])
            for e, tot, tm, pr, sec in zip(self.epochs, self.total, self.terms, self.params, self.seconds):
                row = [e, repr(tot)]
                row += [repr(tm[n]) if tm else "" for n in names]
                row += [repr(pr[n]) if pr.get(n) is not None else "" for n in PARAM_NAMES]
                row.append(f"{sec:.6f}")
                w.writerow(row)


class EarlyStopping:
    """Stop once ``patience`` epochs pass without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch = loss, epoch
            return False
        return epoch - self.best_epoch >= self.patience


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


# --- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: FieldModel
    params: MaterialParams
    normalization: NormalizationRecord = field(default_factory=NormalizationRecord)
    adam: AdamState | None = None
    seed: int = 0
    problem: str = "elastic"
    loss: float | None = None
    version: int = CHECKPOINT_VERSION

    def predict(self, points) -> dict[str, np.ndarray]:
        """Network fields at ``points`` in physical units."""
        raw = self.model.predict(points)
        return {k: v * self.normalization.scale(k) for k, v in raw.items()}


def _tolist(a):
    return np.asarray(a).tolist()


def save_checkpoint(ck: Checkpoint, path) -> None:
    m = ck.model
    doc = {
        "version": ck.version,
        "arch": {**m.arch.to_dict(), "fields": list(m.fields), "inputs": list(m.inputs)},
        "fields": {
            name: {"W": [_tolist(W) for W in net.weights], "b": [_tolist(b) for b in net.biases],
                   "activations": list(net.activations)}
            for name, net in m.networks.items()
        },
        "material": {**ck.params.as_dict(), "trainable": sorted(ck.params.trainable)},
        "normalization": ck.normalization.to_dict(),
        "adam": None if ck.adam is None else {
            "t": ck.adam.t,
            "m": {k: _tolist(v) for k, v in ck.adam.m.items()},
            "v": {k: _tolist(v) for k, v in ck.adam.v.items()},
        },
        "seed": ck.seed,
        "problem": ck.problem,
        "loss": ck.loss,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint {path}: {exc}") from None
    version = doc.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})")
    try:
        a = doc["arch"]
        arch = NetworkArch(a["layers"], a["neurons"], a["activation"], a["mode"])
        nets = {
            name: DenseNetwork([np.array(W, dtype=np.float64).reshape(len(W), -1) for W in f["W"]],
                               [np.array(b, dtype=np.float64) for b in f["b"]], list(f["activations"]))
            for name, f in doc["fields"].items()
        }
        model = FieldModel(tuple(a["fields"]), tuple(a["inputs"]), arch, nets)
        mat = doc["material"]
        params = MaterialParams(mat.get("lambda"), mat.get("mu"), mat.get("sigma_y"),
                                frozenset(mat.get("trainable", ())))
        adam = None
        if doc.get("adam"):
            ad_ = doc["adam"]
            adam = AdamState({k: np.array(v, dtype=np.float64) for k, v in ad_["m"].items()},
                             {k: np.array(v, dtype=np.float64) for k, v in ad_["v"].items()}, int(ad_["t"]))
        return Checkpoint(model, params, NormalizationRecord.from_dict(doc.get("normalization")), adam,
                          int(doc.get("seed", 0)), doc.get("problem", "elastic"), doc.get("loss"), version)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from None


# --- training ---------------------------------------------------------------------

def prepare_dataset(ds: Dataset, config: TrainingConfig, record: NormalizationRecord | None = None) -> Dataset:
    """Recover missing forces and apply normalization as configured."""
    if ds.n_points == 0:
        raise ValueError("empty dataset")
    if ("fx" not in ds.columns or "fy" not in ds.columns):
        if ds.mode == "force":
            raise KeyError("force-complete data must carry 'fx' and 'fy'")
        ds = with_central_difference_forces(ds)
    if record is not None and not record.is_identity:
        if ds.normalization.is_identity:
            ds = apply_normalization(ds, record)
    elif config.normalize and ds.normalization.is_identity:
        ds, _ = normalize(ds)
    return ds


def apply_normalization(ds: Dataset, record: NormalizationRecord) -> Dataset:
    cols = {k: v / record.scale(k) for k, v in ds.columns.items()}
    return replace(ds, columns=cols, normalization=NormalizationRecord(dict(record.scales)),
                   params=dict(ds.params))


def _material_for_mode(params: MaterialParams, config: TrainingConfig, problem: str) -> MaterialParams:
    if config.mode == "solve":
        return params.with_trainable(())
    if params.trainable:
        return params
    names = ["lambda", "mu"] + (["sigma_y"] if problem == "plastic" else [])
    return params.with_trainable([n for n in names if params.get(n) is not None])


def _values(model: FieldModel, params: MaterialParams, record: NormalizationRecord) -> dict:
    vals = dict(model.graph_parameters())
    for n in PARAM_NAMES:
        if n in params.trainable:
            vals[n] = np.float64(params.get(n) / record.param_scale(n))
    return vals


def _physical(values: dict, params: MaterialParams, record: NormalizationRecord) -> dict:
    out = {}
    for n in PARAM_NAMES:
        if n in params.trainable:
            out[n] = float(values[n]) * record.param_scale(n)
        else:
            out[n] = params.get(n)
    return out


def _write_back(model: FieldModel, values: dict) -> None:
    model.load_graph_parameters(values)


def initial_loss(model: FieldModel, params: MaterialParams, dataset: Dataset,
                 config: TrainingConfig) -> float:
    ds = prepare_dataset(dataset, config)
    params = _material_for_mode(params, config, ds.problem)
    graph = LossGraph(model, params, ds, config.flow_coefficient, config.clipped)
    return graph.evaluate(_values(model, params, ds.normalization), ds.points, ds.columns)["total"]


def train(model: FieldModel, params: MaterialParams, dataset: Dataset, config: TrainingConfig,
          adam: AdamState | None = None, _prepared: bool = False):
    """Mini-batch Adam with reshuffling and early stopping.

    ``model`` is trained in place; the returned checkpoint holds a copy of the
    best-loss state. In identify mode the trainable material parameters are
    updated alongside the network weights.
    """
    ds = dataset if _prepared else prepare_dataset(dataset, config)
    record = ds.normalization
    params = _material_for_mode(params, config, ds.problem)
    graph = LossGraph(model, params, ds, config.flow_coefficient, config.clipped)
    start = _values(model, params, record)
    packing = _Packing(start)
    theta = packing.pack(start)
    state = adam if adam is not None else AdamState()
    m = packing.pack(state.m)
    v = packing.pack(state.v)
    t = state.t
    rng = np.random.default_rng(config.seed)
    hist = TrainingHistory(problem=ds.problem)
    terms_names = problem_terms(ds.problem)

    def snapshot():
        return theta.copy(), AdamState(packing.unpack(m.copy()), packing.unpack(v.copy()), t)

    def finish(best_theta):
        _write_back(model, packing.unpack(best_theta))

    try:
        full = graph.evaluate(packing.unpack(theta), ds.points, ds.columns)
        reason = None if np.isfinite(full["total"]) else "non-finite initial loss"
    except ad.NonFiniteError as exc:
        reason = str(exc)
    if reason is not None:
        hist.aborted = {"epoch": 0, "batch": None, "reason": reason}
        hist.stop_reason = "non-finite"
        raise TrainingError(f"epoch 0: {reason}", hist)
    hist.initial_loss = full["total"]
    hist.initial_terms = {k: full[k] for k in terms_names}
    stopper = EarlyStopping(config.patience)
    stopper.update(0, full["total"])
    best_theta, best_adam = snapshot()
    hist.best_loss = full["total"]
    hist.stop_reason = "max_epochs"

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        for b, idx in enumerate(epoch_batches(ds.n_points, config.batch_size, rng)):
            cols = {n: ds.columns[n][idx] for n in graph.obs_names}
            try:
                loss, grads = graph.gradient(packing.unpack(theta), ds.points[idx], cols)
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite batch loss")
                g = packing.pack(grads)
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradientError(packing.first_nonfinite(g))
                t += 1
                theta, m, v = adam_update(theta, g, m, v, t, config)
            except (FloatingPointError, ad.NonFiniteError) as exc:
                hist.aborted = {"epoch": epoch, "batch": b, "reason": str(exc)}
                hist.stop_reason = "non-finite"
                finish(best_theta)
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}", hist) from exc
        current = packing.unpack(theta)
        try:
            full = graph.evaluate(current, ds.points, ds.columns)
        except ad.NonFiniteError as exc:
            hist.aborted = {"epoch": epoch, "batch": None, "reason": str(exc)}
            hist.stop_reason = "non-finite"
            finish(best_theta)
            raise TrainingError(f"epoch {epoch}: {exc}", hist) from exc
        hist.epochs.append(epoch)
        hist.total.append(full["total"])
        log_terms = config.term_every > 0 and epoch % config.term_every == 0
        hist.terms.append({k: full[k] for k in terms_names} if log_terms else None)
        hist.params.append(_physical(current, params, record))
        hist.seconds.append(time.perf_counter() - t0)
        if full["total"] < hist.best_loss:
            hist.best_loss, hist.best_epoch = full["total"], epoch
            best_theta, best_adam = snapshot()
        if config.log_every and epoch % config.log_every == 0:
            log.info("epoch %d loss %.6e %s", epoch, full["total"],
                     {k: val for k, val in hist.params[-1].items() if k in params.trainable})
        if stopper.update(epoch, full["total"]):
            hist.stop_reason = "patience"
            break

    finish(best_theta)
    best = packing.unpack(best_theta)
    best_params = params.with_values(**{k: val for k, val in _physical(best, params, record).items()
                                        if k in params.trainable})
    ck = Checkpoint(model.copy(), best_params, NormalizationRecord(dict(record.scales)), best_adam,
                    config.seed, ds.problem, hist.best_loss)
    return hist, ck


def _copy_adam(state: AdamState) -> AdamState:
    return AdamState({k: np.array(v) for k, v in state.m.items()},
                     {k: np.array(v) for k, v in state.v.items()}, state.t)


def _layer_shapes(model: FieldModel) -> list:
    return [(name, [W.shape for W in net.weights]) for name, net in model.networks.items()]


def retrain(checkpoint: Checkpoint, dataset: Dataset, config: TrainingConfig,
            init_params: MaterialParams | None = None):
    """Continue training from ``checkpoint`` on new data.

    The history also records the initial loss of a freshly initialized model
    (same architecture and seed, material parameters ``init_params`` or the
    checkpoint's) on the same data, for the transfer-learning comparison.
    """
    model = checkpoint.model.copy()
    if config.arch is not None:
        fresh = build_field_model(model.fields, config.arch, model.inputs, config.seed)
        if _layer_shapes(fresh) != _layer_shapes(model) or config.arch.activation != model.arch.activation:
            raise ValueError(f"architecture mismatch: checkpoint {_layer_shapes(model)} "
                             f"vs config {_layer_shapes(fresh)}")
    # new data is scaled exactly like the data the checkpoint was trained on
    ds = prepare_dataset(dataset, replace(config, normalize=False), checkpoint.normalization)
    if ds.problem != checkpoint.problem:
        raise ValueError(f"checkpoint is for {checkpoint.problem} data, dataset is {ds.problem}")
    params = checkpoint.params
    scratch_params = init_params or params
    scratch = build_field_model(model.fields, model.arch, model.inputs, config.seed)
    scratch_l0 = initial_loss(scratch, scratch_params, ds, replace(config, normalize=False))
    adam = _copy_adam(checkpoint.adam) if checkpoint.adam is not None else None
    hist, ck = train(model, params, ds, config, adam=adam, _prepared=True)
    hist.scratch_initial_loss = scratch_l0
    return hist, ck


def train_surrogate(datasets, config: TrainingConfig, arch: NetworkArch | None = None):
    """Train a model with mu as a third input over datasets generated at several mu."""
    datasets = list(datasets)
    mus = sorted({d.params.get("mu") for d in datasets})
    if len(mus) < 2:
        raise ValueError("a surrogate needs datasets at two or more distinct mu values")
    lams = {d.params.get("lambda") for d in datasets}
    if len(lams) != 1 or None in lams:
        raise ValueError("all surrogate datasets must share one known lambda")
    ready = [d if {"fx", "fy"} <= set(d.columns) else with_central_difference_forces(d) for d in datasets]
    merged = concatenate_with_mu(ready)
    arch = arch or config.arch or NetworkArch(5, 20)
    model = build_field_model(problem_fields(merged.problem), arch, ("x", "y", "mu"), config.seed)
    params = MaterialParams(lams.pop(), None)
    cfg = replace(config, mode="solve")
    hist, ck = train(model, params, merged, cfg)
    return hist, ck


def config_dict(config: TrainingConfig) -> dict:
    d = asdict(config)
    if config.arch is not None:
        d["arch"] = config.arch.to_dict()
    return d


def evaluate_loss(checkpoint: Checkpoint, dataset: Dataset, config: TrainingConfig | None = None) -> LossReport:
    """Loss terms of a checkpoint on a dataset (normalized with the checkpoint's record)."""
    config = config or TrainingConfig(mode="solve")
    ds = prepare_dataset(dataset, config, checkpoint.normalization)
    params = checkpoint.params.with_trainable(())
    graph = LossGraph(checkpoint.model, params, ds, config.flow_coefficient, config.clipped)
    vals = graph.evaluate(_values(checkpoint.model, params, ds.normalization), ds.points, ds.columns)
    tot = vals.pop("total")
    return LossReport(vals, tot)
