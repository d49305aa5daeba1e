"""Datasets: manufactured-solution generation, grids, force recovery, CSV I/O."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .elasticity import exact_body_force, exact_displacement, exact_stress, Q_DEFAULT
from .normalization import NormalizationRecord

MODES = ("stress", "force")
PROBLEMS = ("elastic", "plastic")
INPUT_COLUMNS = ("x", "y", "mu")
FIELD_COLUMNS = ("ux", "uy", "sxx", "syy", "szz", "sxy", "fx", "fy")
SURROGATE_MU = (1 / 4, 2 / 3, 3 / 2, 4.0)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    bounds: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)  # xmin, xmax, ymin, ymax

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2 points per axis, got {self.nx}x{self.ny}")
        x0, x1, y0, y1 = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate bounds {self.bounds}")

    @classmethod
    def parse(cls, text: str, bounds=None) -> "GridSpec":
        try:
            nx, ny = (int(p) for p in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"grid must look like NXxNY, got {text!r}") from None
        return cls(nx, ny) if bounds is None else cls(nx, ny, tuple(bounds))

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.bounds[0], self.bounds[1], self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.bounds[2], self.bounds[3], self.ny)

    @property
    def spacing(self) -> tuple[float, float]:
        x0, x1, y0, y1 = self.bounds
        return (x1 - x0) / (self.nx - 1), (y1 - y0) / (self.ny - 1)


def sample_grid(spec: GridSpec) -> np.ndarray:
    """(nx*ny, 2) points, x varying fastest, corners included."""
    X, Y = np.meshgrid(spec.xs, spec.ys)
    return np.column_stack([X.ravel(), Y.ravel()])


@dataclass
class Dataset:
    points: np.ndarray
    columns: dict[str, np.ndarray]
    mode: str = "force"
    problem: str = "elastic"
    inputs: tuple[str, ...] = ("x", "y")
    params: dict = field(default_factory=dict)
    normalization: NormalizationRecord = field(default_factory=NormalizationRecord)
    grid: GridSpec | None = None
    provenance: str = "analytical"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != len(self.inputs):
            raise DatasetError(f"points must have shape (N, {len(self.inputs)})")
        if self.mode not in MODES:
            raise DatasetError(f"unknown mode {self.mode!r}")
        if self.problem not in PROBLEMS:
            raise DatasetError(f"unknown problem {self.problem!r}")
        n = len(self.points)
        for k, v in self.columns.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (n,):
                raise DatasetError(f"column {k!r} has shape {v.shape}, expected ({n},)")
            self.columns[k] = v
        if self.grid is not None and self.grid.nx * self.grid.ny != n:
            raise DatasetError("grid size does not match number of points")

    @property
    def n_points(self) -> int:
        return len(self.points)

    def required_columns(self) -> tuple[str, ...]:
        cols = ("ux", "uy", "sxx", "syy", "sxy")
        if self.problem == "plastic":
            cols += ("szz",)
        if self.mode == "force":
            cols += ("fx", "fy")
        return cols

    def validate(self):
        for c in self.required_columns():
            if c not in self.columns:
                raise DatasetError(f"missing column {c!r} for {self.mode}-complete {self.problem} data")

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, points=self.points[idx], columns={k: v[idx] for k, v in self.columns.items()},
                       params=dict(self.params), grid=None)


# --- generation ---------------------------------------------------------------

def generate_elastic_dataset(spec: GridSpec, lam: float, mu: float, Q: float = Q_DEFAULT,
                             mode: str = "force") -> Dataset:
    """Manufactured-solution data on a uniform grid.

    Force-complete data carries the closed-form body forces; stress-complete
    data leaves them out (see :func:`with_central_difference_forces`).
    """
    ds = elastic_dataset_at(sample_grid(spec), lam, mu, Q, mode)
    ds.grid = spec
    return ds


def elastic_dataset_at(points, lam: float, mu: float, Q: float = Q_DEFAULT, mode: str = "force") -> Dataset:
    """Manufactured-solution data at arbitrary (N, 2) points."""
    if mode not in MODES:
        raise DatasetError(f"unknown mode {mode!r}")
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    ux, uy = exact_displacement(x, y, Q)
    sxx, syy, sxy = exact_stress(x, y, lam, mu, Q)
    cols = {"ux": ux, "uy": uy, "sxx": sxx, "syy": syy, "sxy": sxy}
    if mode == "force":
        cols["fx"], cols["fy"] = exact_body_force(x, y, lam, mu, Q)
    return Dataset(pts, cols, mode=mode, params={"lambda": lam, "mu": mu, "sigma_y": None, "Q": Q})


def central_difference_forces(sxx, syy, sxy, spec: GridSpec):
    """Body forces ``f_i = -sigma_ij,j`` from stresses on a uniform grid.

    Stress arrays are (ny, nx) or flat in :func:`sample_grid` order. Interior
    points use central differences, edges one-sided second-order stencils.
    Returns flat (fx, fy).
    """
    if spec.nx < 3 or spec.ny < 3:
        raise DatasetError(f"central differences need a grid of at least 3x3, got {spec.nx}x{spec.ny}")
    shape = (spec.ny, spec.nx)
    hx, hy = spec.spacing
    sxx, syy, sxy = (np.asarray(a, dtype=np.float64).reshape(shape) for a in (sxx, syy, sxy))
    dsxx_dx = np.gradient(sxx, hx, axis=1, edge_order=2)
    dsxy_dy = np.gradient(sxy, hy, axis=0, edge_order=2)
    dsxy_dx = np.gradient(sxy, hx, axis=1, edge_order=2)
    dsyy_dy = np.gradient(syy, hy, axis=0, edge_order=2)
    return -(dsxx_dx + dsxy_dy).ravel(), -(dsxy_dx + dsyy_dy).ravel()


def with_central_difference_forces(ds: Dataset) -> Dataset:
    """Fill ``fx``/``fy`` of gridded data by differencing the stress columns."""
    grid = ds.grid or infer_grid(ds.points)
    if grid is None:
        raise DatasetError("force recovery needs data on a full uniform grid")
    if ds.normalization.is_identity:
        s = {c: 1.0 for c in ("sxx", "syy", "sxy")}
    else:
        s = {c: ds.normalization.scale(c) for c in ("sxx", "syy", "sxy")}
    fx, fy = central_difference_forces(ds.columns["sxx"] * s["sxx"], ds.columns["syy"] * s["syy"],
                                       ds.columns["sxy"] * s["sxy"], grid)
    cols = dict(ds.columns)
    rec = NormalizationRecord(dict(ds.normalization.scales))
    if not ds.normalization.is_identity:
        for name, v in (("fx", fx), ("fy", fy)):
            sc = _max_abs(v)
            rec.scales[name] = sc
            cols[name] = v / sc
    else:
        cols["fx"], cols["fy"] = fx, fy
    return replace(ds, columns=cols, grid=grid, normalization=rec)


def infer_grid(points: np.ndarray) -> GridSpec | None:
    """Recognise points laid out as :func:`sample_grid` produces them."""
    if points.shape[1] < 2 or len(points) < 4:
        return None
    xs = np.unique(points[:, 0])
    ys = np.unique(points[:, 1])
    if len(xs) * len(ys) != len(points) or len(xs) < 2 or len(ys) < 2:
        return None
    spec = GridSpec(len(xs), len(ys), (xs[0], xs[-1], ys[0], ys[-1]))
    expected = sample_grid(spec)
    if not np.allclose(points[:, :2], expected, rtol=0, atol=1e-9 * max(1.0, np.abs(expected).max())):
        return None
    return spec


def interpolate_to_grid(ds: Dataset, target: GridSpec) -> Dataset:
    """Tensor-product cubic-spline resampling of every column onto ``target``.

    Not-a-knot splines along each axis: C2, and exact for polynomials up to
    degree three per axis.
    """
    src = ds.grid or infer_grid(ds.points)
    if src is None:
        raise DatasetError("interpolation source must be a full uniform grid")
    if src.nx < 4 or src.ny < 4:
        raise DatasetError("cubic interpolation needs at least 4 points per axis")
    sx0, sx1, sy0, sy1 = src.bounds
    tx0, tx1, ty0, ty1 = target.bounds
    tol = 1e-12 * max(1.0, abs(sx1 - sx0), abs(sy1 - sy0))
    if tx0 < sx0 - tol or tx1 > sx1 + tol or ty0 < sy0 - tol or ty1 > sy1 + tol:
        raise DatasetError(f"target bounds {target.bounds} fall outside source bounds {src.bounds}")
    cols = {}
    for name, v in ds.columns.items():
        grid_vals = v.reshape(src.ny, src.nx)
        along_x = CubicSpline(src.xs, grid_vals, axis=1)(np.clip(target.xs, sx0, sx1))
        cols[name] = CubicSpline(src.ys, along_x, axis=0)(np.clip(target.ys, sy0, sy1)).ravel()
    return replace(ds, points=sample_grid(target), columns=cols, grid=target, params=dict(ds.params))


# --- normalization -------------------------------------------------------------

def _max_abs(v) -> float:
    m = float(np.max(np.abs(v))) if len(v) else 0.0
    return m if m > 0 else 1.0


def normalize(ds: Dataset) -> tuple[Dataset, NormalizationRecord]:
    """Divide every field column by its max absolute value (1 for all-zero columns)."""
    if ds.n_points == 0:
        raise DatasetError("empty dataset")
    if not ds.normalization.is_identity:
        raise DatasetError("dataset is already normalized")
    scales = {name: _max_abs(v) for name, v in ds.columns.items()}
    ext = [np.ptp(ds.points[:, i]) for i in range(min(2, ds.points.shape[1]))]
    length = max(ext) if max(ext) > 0 else 1.0
    scales["length"] = float(length)
    rec = NormalizationRecord(scales)
    cols = {name: v / scales[name] for name, v in ds.columns.items()}
    return replace(ds, columns=cols, normalization=rec, params=dict(ds.params)), rec


def denormalize(ds: Dataset) -> Dataset:
    rec = ds.normalization
    cols = {name: v * rec.scale(name) for name, v in ds.columns.items()}
    return replace(ds, columns=cols, normalization=NormalizationRecord(), params=dict(ds.params))


# --- combination --------------------------------------------------------------

def concatenate_with_mu(datasets) -> Dataset:
    """Stack per-mu datasets, appending each one's mu as a third input column."""
    datasets = list(datasets)
    if not datasets:
        raise DatasetError("no datasets")
    mus = [d.params.get("mu") for d in datasets]
    if any(m is None for m in mus):
        raise DatasetError("every dataset needs a mu value")
    names = set(datasets[0].columns)
    for d in datasets:
        if set(d.columns) != names:
            raise DatasetError("datasets carry different columns")
        if not d.normalization.is_identity:
            raise DatasetError("concatenate raw datasets and normalize the result")
    pts = np.vstack([np.column_stack([d.points[:, :2], np.full(d.n_points, m)])
                     for d, m in zip(datasets, mus)])
    cols = {k: np.concatenate([d.columns[k] for d in datasets]) for k in sorted(names)}
    params = dict(datasets[0].params)
    params["mu"] = None
    return Dataset(pts, cols, mode=datasets[0].mode, problem=datasets[0].problem,
                   inputs=("x", "y", "mu"), params=params, provenance=datasets[0].provenance)


# --- CSV I/O -------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(ds: Dataset, path) -> None:
    """CSV with a header row plus a ``.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [c for c in FIELD_COLUMNS if c in ds.columns] + sorted(set(ds.columns) - set(FIELD_COLUMNS))
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.inputs) + names)
        for i in range(ds.n_points):
            w.writerow([_fmt(v) for v in ds.points[i]] + [_fmt(ds.columns[c][i]) for c in names])
    meta = {
        "mode": ds.mode,
        "problem": ds.problem,
        "lambda": ds.params.get("lambda"),
        "mu": ds.params.get("mu"),
        "sigma_y": ds.params.get("sigma_y"),
        "normalization": ds.normalization.to_dict(),
    }
    if "Q" in ds.params:
        meta["Q"] = ds.params["Q"]
    meta_path(path).write_text(json.dumps(meta, indent=2))


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name[: -len(path.suffix)] + ".meta.json" if path.suffix else path.name + ".meta.json")


def load_dataset(path, mode: str | None = None, problem: str | None = None) -> Dataset:
    path = Path(path)
    meta = {}
    mp = meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text())
    mode = mode or meta.get("mode", "force")
    problem = problem or meta.get("problem", "elastic")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError("empty dataset: no header")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if not body:
        raise DatasetError("empty dataset")
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DatasetError(f"line {k}: {len(r)} cells, header has {len(header)}")
    try:
        data = np.array([[float(c) for c in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"non-numeric cell: {exc}") from None
    for c in ("x", "y"):
        if c not in header:
            raise DatasetError(f"missing required column {c!r}")
    inputs = tuple(c for c in INPUT_COLUMNS if c in header)
    pts = data[:, [header.index(c) for c in inputs]]
    cols = {h: data[:, i] for i, h in enumerate(header) if h not in INPUT_COLUMNS}
    params = {k: meta.get(k) for k in ("lambda", "mu", "sigma_y")}
    if "Q" in meta:
        params["Q"] = meta["Q"]
    ds = Dataset(pts, cols, mode=mode, problem=problem, inputs=inputs, params=params,
                 normalization=NormalizationRecord.from_dict(meta.get("normalization")),
                 provenance="external-file")
    ds.validate()
    ds.grid = infer_grid(pts) if len(inputs) == 2 else None
    return ds

