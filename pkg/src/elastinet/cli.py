"""Command-line front end: generate, train, retrain, surrogate, eval, gradcheck.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure. Errors
are reported as one JSON line on standard error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (DatasetError, GridSpec, elastic_dataset_at, generate_elastic_dataset, load_dataset,
                   normalize, sample_grid, save_dataset, with_central_difference_forces)
from .elasticity import PARAM_NAMES, Q_DEFAULT, MaterialParams, exact_displacement, exact_stress
from .gradcheck import gradient_check
from .networks import NetworkArch, build_field_model
from .training import (CheckpointError, TrainingConfig, TrainingError, config_dict, evaluate_loss,
                       load_checkpoint, problem_fields, retrain, save_checkpoint, train, train_surrogate)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
GRADCHECK_TOL = 1e-6
SEED_ENV = "ELASTINET_SEED"


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def fmt(v) -> str:
    """Full double precision (17 significant digits)."""
    return "none" if v is None else f"{float(v):.17g}"


def emit(key: str, value) -> None:
    print(f"{key}={fmt(value) if isinstance(value, (float, np.floating)) or value is None else value}")


# --- config files ----------------------------------------------------------------

def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for k, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{k}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip().strip('"').strip("'")
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(value: str, kind):
    if kind is bool:
        low = str(value).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(f"cannot read {value!r} as {kind.__name__}") from None


# option name -> (type, default); the config file, flags and --set all use these keys
OPTIONS = {
    "batch_size": (int, 64),
    "max_epochs": (int, 10000),
    "patience": (int, 500),
    "learning_rate": (float, 1e-3),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "mode": (str, "identify"),
    "flow_coefficient": (float, 1.5),
    "clipped": (bool, False),
    "normalize": (bool, True),
    "term_every": (int, 10),
    "log_every": (int, 0),
    "arch": (str, "5x20"),
    "activation": (str, "tanh"),
    "network_mode": (str, "independent"),
    "lambda0": (float, None),
    "mu0": (float, None),
    "sigma_y0": (float, None),
}


def resolve_options(args) -> dict:
    """Defaults, then the config file, then explicit flags, then ``--set`` overrides."""
    opts = {k: d for k, (_, d) in OPTIONS.items()}
    layers = []
    if getattr(args, "config", None):
        layers.append(read_config_file(args.config))
    layers.append({k: getattr(args, k) for k in OPTIONS if getattr(args, k, None) is not None})
    layers.append(parse_overrides(getattr(args, "set", None)))
    for layer in layers:
        for k, v in layer.items():
            if k == "seed":
                continue
            if k not in OPTIONS:
                raise UsageError(f"unknown option {k!r}")
            kind = OPTIONS[k][0]
            opts[k] = v if not isinstance(v, str) or kind is str else _coerce(v, kind)
    opts["seed"] = resolve_seed(args, layers)
    opts["_explicit"] = set().union(*(layer.keys() for layer in layers))
    return opts


def resolve_seed(args, layers=()) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    for layer in reversed(layers):
        if "seed" in layer and layer["seed"] is not None:
            return int(layer["seed"])
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def training_config(opts: dict) -> TrainingConfig:
    names = {f.name for f in dc_fields(TrainingConfig)}
    kw = {k: v for k, v in opts.items() if k in names and k != "arch"}
    kw["arch"] = architecture(opts)
    try:
        return TrainingConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def architecture(opts: dict) -> NetworkArch:
    try:
        return NetworkArch.parse(opts["arch"], activation=opts["activation"], mode=opts["network_mode"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _grid(text: str) -> GridSpec:
    try:
        return GridSpec.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# --- manifests -------------------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, argv, config: dict, seed: int, inputs=(), outputs=()) -> None:
    doc = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256(p) for p in inputs if Path(p).exists()},
        "outputs": {str(p): sha256(p) for p in outputs if Path(p).exists()},
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, default=str))


def _meta_files(paths):
    out = []
    for p in paths:
        p = Path(p)
        out.append(p)
        meta = p.with_name(p.stem + ".meta.json")
        if meta.exists():
            out.append(meta)
    return out


# --- commands --------------------------------------------------------------------

def cmd_generate(args, argv) -> int:
    if args.problem != "elastic":
        raise UsageError("only the manufactured elastic problem can be generated; "
                         "plastic data must be supplied as CSV")
    spec = _grid(args.grid)
    ds = generate_elastic_dataset(spec, args.lam, args.mu, args.Q, args.mode)
    out = Path(args.out)
    save_dataset(ds, out)
    meta = out.with_name(out.stem + ".meta.json")
    config = {"problem": args.problem, "grid": args.grid, "lambda": args.lam, "mu": args.mu,
              "Q": args.Q, "mode": args.mode}
    write_manifest(out.with_name(out.stem + ".manifest.json"), "generate", argv, config,
                   resolve_seed(args), outputs=[out, meta])
    emit("points", ds.n_points)
    emit("out", out)
    return EXIT_OK


def _prepare(ds, opts):
    if "fx" not in ds.columns or "fy" not in ds.columns:
        ds = with_central_difference_forces(ds)
    if opts["normalize"] and ds.normalization.is_identity:
        ds, _ = normalize(ds)
    return ds


def _material(ds, opts, mode: str) -> MaterialParams:
    """Known values in solve mode; initial guesses (default 1 in normalized units) in identify mode."""
    rec = ds.normalization
    guesses = {"lambda": opts["lambda0"], "mu": opts["mu0"], "sigma_y": opts["sigma_y0"]}
    plastic = ds.problem == "plastic"
    values = {}
    for n in PARAM_NAMES:
        if n == "sigma_y" and not plastic:
            values[n] = None
            continue
        if mode == "solve":
            v = guesses[n] if guesses[n] is not None else ds.params.get(n)
            if v is None:
                raise UsageError(f"solve mode needs a value for {n} (dataset metadata or --{n.replace('_', '-')}0)")
        else:
            v = guesses[n] if guesses[n] is not None else rec.param_scale(n)
        values[n] = float(v)
    trainable = () if mode == "solve" else [n for n in PARAM_NAMES if values[n] is not None]
    try:
        return MaterialParams(values["lambda"], values["mu"], values["sigma_y"], frozenset(trainable))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _report(hist, ck) -> None:
    emit("epochs", hist.last_epoch)
    emit("best_epoch", hist.best_epoch)
    emit("stop_reason", hist.stop_reason)
    emit("best_loss", hist.best_loss)
    for n in PARAM_NAMES:
        v = ck.params.get(n)
        if v is not None:
            emit(n, v)


def _run_training(args, argv, command, run):
    opts = resolve_options(args)
    cfg = training_config(opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        hist, ck, inputs = run(opts, cfg)
    except TrainingError as exc:
        if exc.history is not None:
            exc.history.to_csv(out / "history.csv")
        raise NumericalFailure(str(exc)) from None
    hist.to_csv(out / "history.csv")
    save_checkpoint(ck, out / "best.ckpt.json")
    resolved = config_dict(cfg)
    resolved.update({k: opts[k] for k in ("lambda0", "mu0", "sigma_y0", "activation", "network_mode")})
    write_manifest(out / "manifest.json", command, argv, resolved, cfg.seed,
                   inputs=_meta_files(inputs), outputs=[out / "history.csv", out / "best.ckpt.json"])
    _report(hist, ck)
    return hist, ck


def cmd_train(args, argv) -> int:
    def run(opts, cfg):
        ds = _prepare(load_dataset(args.data), opts)
        params = _material(ds, opts, cfg.mode)
        model = build_field_model(problem_fields(ds.problem), cfg.arch, ds.inputs, cfg.seed)
        hist, ck = train(model, params, ds, cfg)
        return hist, ck, [args.data]

    _run_training(args, argv, "train", run)
    return EXIT_OK


def cmd_retrain(args, argv) -> int:
    def run(opts, cfg):
        ck0 = load_checkpoint(args.init)
        ds = load_dataset(args.data)
        if not {"arch", "activation", "network_mode"} & opts["_explicit"]:
            cfg.arch = None  # keep the checkpoint's architecture
        scratch = None
        if opts["lambda0"] is not None or opts["mu0"] is not None:
            scratch = ck0.params.with_values(**{k: opts[f"{k}0"] for k in ("lambda", "mu")
                                                if opts[f"{k}0"] is not None})
        hist, ck = retrain(ck0, ds, cfg, init_params=scratch)
        emit("initial_loss", hist.initial_loss)
        emit("scratch_initial_loss", hist.scratch_initial_loss)
        emit("initial_loss_ratio", hist.initial_loss_ratio)
        return hist, ck, [args.init, args.data]

    _run_training(args, argv, "retrain", run)
    return EXIT_OK


def cmd_surrogate(args, argv) -> int:
    paths = [p for p in args.data.split(",") if p]

    def run(opts, cfg):
        datasets = [load_dataset(p) for p in paths]
        hist, ck = train_surrogate(datasets, cfg, cfg.arch)
        return hist, ck, paths

    _run_training(args, argv, "surrogate", run)
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    ck = load_checkpoint(args.ckpt)
    spec = _grid(args.grid)
    pts = sample_grid(spec)
    surrogate = "mu" in ck.model.inputs
    lam = args.lam if args.lam is not None else ck.params.lam
    mu = args.mu if args.mu is not None else ck.params.mu
    if surrogate:
        if args.mu is None:
            raise UsageError("a surrogate checkpoint needs --mu")
        model_pts = np.column_stack([pts, np.full(len(pts), args.mu)])
    else:
        model_pts = pts
    pred = ck.predict(model_pts)
    cols = {f"pred_{k}": v for k, v in pred.items()}
    errors = {}
    if args.exact:
        if lam is None or mu is None:
            raise UsageError("--exact needs lambda and mu")
        ux, uy = exact_displacement(pts[:, 0], pts[:, 1], args.Q)
        sxx, syy, sxy = exact_stress(pts[:, 0], pts[:, 1], lam, mu, args.Q)
        exact = {"ux": ux, "uy": uy, "sxx": sxx, "syy": syy, "sxy": sxy}
        for k, v in exact.items():
            if k in pred:
                cols[f"exact_{k}"] = v
                cols[f"err_{k}"] = pred[k] - v
                denom = float(np.linalg.norm(v))
                errors[k] = float(np.linalg.norm(pred[k] - v)) / (denom if denom > 0 else 1.0)
        if ck.problem == "elastic" and not surrogate:
            ds = elastic_dataset_at(pts, lam, mu, args.Q)
            emit("loss", evaluate_loss(ck, ds).total)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = ["x", "y"] + (["mu"] if surrogate else []) + list(cols)
    table = np.column_stack([model_pts] + [cols[k] for k in cols])
    with out.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    for k, e in errors.items():
        emit(f"rel_error_{k}", e)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "eval", argv,
                   {"grid": args.grid, "exact": args.exact, "lambda": lam, "mu": mu, "Q": args.Q},
                   resolve_seed(args), inputs=[args.ckpt], outputs=[out])
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    seed = resolve_seed(args)
    try:
        arch = NetworkArch.parse(args.arch, activation=args.activation, mode=args.network_mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res = gradient_check(arch, args.points, seed)
    emit("input_derivative_error", res.input_error)
    emit("parameter_gradient_error", res.param_error)
    emit("max_relative_error", res.max_error)
    if args.out:
        write_manifest(Path(args.out), "gradcheck", argv,
                       {"arch": args.arch, "points": args.points, "activation": args.activation,
                        "network_mode": args.network_mode, "max_relative_error": res.max_error}, seed)
    if not res.max_error < GRADCHECK_TOL:
        raise NumericalFailure(f"gradient check failed: max relative error {fmt(res.max_error)} "
                               f"(worst parameter {res.worst_param})")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def _training_flags(p) -> None:
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("identify", "solve"))
    p.add_argument("--arch", help="LAYERSxNEURONS, e.g. 5x20")
    p.add_argument("--activation", choices=("tanh", "relu"))
    p.add_argument("--network-mode", dest="network_mode", choices=("independent", "single"))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--lambda0", type=float)
    p.add_argument("--mu0", type=float)
    p.add_argument("--sigma-y0", dest="sigma_y0", type=float)
    p.add_argument("--flow-coefficient", dest="flow_coefficient", type=float)
    p.add_argument("--clipped", action="store_const", const=True)
    p.add_argument("--normalize", dest="normalize", action="store_const", const=True)
    p.add_argument("--raw", dest="normalize", action="store_const", const=False,
                   help="train on unnormalized data")
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elastinet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="manufactured-solution dataset")
    g.add_argument("--problem", default="elastic", choices=("elastic", "plastic"))
    g.add_argument("--grid", default="100x100")
    g.add_argument("--lambda", dest="lam", type=float, default=1.0)
    g.add_argument("--mu", type=float, default=0.5)
    g.add_argument("--Q", type=float, default=Q_DEFAULT)
    g.add_argument("--mode", default="force", choices=("force", "stress"))
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train (solve or identify) on one dataset")
    t.add_argument("--data", required=True)
    _training_flags(t)

    r = sub.add_parser("retrain", help="continue from a checkpoint on new data")
    r.add_argument("--init", required=True, help="checkpoint to start from")
    r.add_argument("--data", required=True)
    _training_flags(r)

    s = sub.add_parser("surrogate", help="train with mu as an input over several datasets")
    s.add_argument("--data", required=True, help="comma-separated dataset paths")
    _training_flags(s)

    e = sub.add_parser("eval", help="predict fields on a grid")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--grid", default="100x100")
    e.add_argument("--out", required=True)
    e.add_argument("--exact", action="store_true", help="compare with the closed-form solution")
    e.add_argument("--lambda", dest="lam", type=float)
    e.add_argument("--mu", type=float)
    e.add_argument("--Q", type=float, default=Q_DEFAULT)
    e.add_argument("--seed", type=int)

    c = sub.add_parser("gradcheck", help="finite-difference check of all derivatives")
    c.add_argument("--arch", default="2x10")
    c.add_argument("--points", type=int, default=20)
    c.add_argument("--activation", default="tanh", choices=("tanh", "relu"))
    c.add_argument("--network-mode", dest="network_mode", default="independent",
                   choices=("independent", "single"))
    c.add_argument("--seed", type=int)
    c.add_argument("--out", help="optional manifest path")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "retrain": cmd_retrain,
    "surrogate": cmd_surrogate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("no command given; choose one of " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        if "invalid choice" in str(exc):
            parser.print_usage(sys.stderr)
        return _fail("usage", str(exc), EXIT_USAGE)
    except NumericalFailure as exc:
        return _fail("numerical", str(exc), EXIT_NUMERIC)
    except (ad.NonFiniteError, FloatingPointError) as exc:
        return _fail("numerical", str(exc), EXIT_NUMERIC)
    except (DatasetError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        return _fail("input", str(msg), EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
