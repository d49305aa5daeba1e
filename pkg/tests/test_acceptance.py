"""Acceptance criteria 1-11.

Each criterion is a function returning ``(passed, detail)``. Under pytest every
criterion is one test that also prints a ``PASS``/``FAIL`` line; run this file
directly (``python3 tests/test_acceptance.py [numbers...]``) to get the lines
without pytest.

The training criteria (3, 4, 5, 7, 8) take minutes each and are marked slow.
"""

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from elastinet import autodiff as ad  # noqa: E402
from elastinet import data  # noqa: E402
from elastinet import elasticity as el  # noqa: E402
from elastinet import gradcheck as gc  # noqa: E402
from elastinet import networks as nw  # noqa: E402
from elastinet import plasticity as pl  # noqa: E402
from elastinet import training as tr  # noqa: E402
from oracles import return_mapping, stress_components  # noqa: E402

NET_I = nw.TABLE1["i"]
INIT = el.MaterialParams(2.0, 2.0)
# yielding plate material (Pa)
LAM, MU, SY = 19.44e9, 29.17e9, 243.0e6
# transfer: a run counts as converged at the first epoch whose full loss is
# at most this fraction of the freshly initialized model's initial loss
CONVERGED_FRACTION = 0.01


def identify(grid: int, max_epochs: int, activation: str = "tanh", seed: int = 0):
    ds = data.generate_elastic_dataset(data.GridSpec(grid, grid), 1.0, 0.5)
    arch = nw.NetworkArch(NET_I.layers, NET_I.neurons, activation=activation)
    model = nw.build_field_model(el.ELASTIC_FIELDS, arch, seed=seed)
    cfg = tr.TrainingConfig(max_epochs=max_epochs, patience=500, normalize=True, seed=seed)
    return tr.train(model, INIT, ds, cfg)


def _within(ck, lam_band, mu_band):
    lam, mu = ck.params.lam, ck.params.mu
    ok = lam_band[0] <= lam <= lam_band[1] and mu_band[0] <= mu <= mu_band[1]
    return ok, lam, mu


# --- criteria -----------------------------------------------------------------------

def criterion_1():
    """Gradient fidelity on 5 random architectures, 100 points each."""
    t0 = time.perf_counter()
    worst = 0.0
    for k, arch in enumerate(gc.random_architectures(5, seed=2024)):
        res = gc.gradient_check(arch, n_points=100, seed=k)
        worst = max(worst, res.max_error)
    dt = time.perf_counter() - t0
    return worst < 1e-6 and dt < 60, f"max relative error {worst:.2e}, {dt:.1f} s"


def criterion_2():
    """Exact fields give zero loss; symbolic momentum residual vanishes on 21x21."""
    from oracles import manufactured_solution
    import sympy as sp

    ds = data.generate_elastic_dataset(data.GridSpec(21, 21), 1.0, 0.5)
    rep = el.elastic_loss(el.ExactElasticFields(1.0, 0.5), el.MaterialParams(1.0, 0.5), ds)
    syms, _, _, stress, (fx, fy) = manufactured_solution(4.0)
    x, y = syms[0], syms[1]
    subs = {syms[2]: 1.0, syms[3]: 0.5}
    rx = sp.lambdify((x, y), (sp.diff(stress["sxx"], x) + sp.diff(stress["sxy"], y)).subs(subs), "numpy")
    ry = sp.lambdify((x, y), (sp.diff(stress["sxy"], x) + sp.diff(stress["syy"], y)).subs(subs), "numpy")
    px, py = ds.points[:, 0], ds.points[:, 1]
    # the symbolic stress divergence balanced by the package's closed-form body force
    fxn, fyn = el.exact_body_force(px, py, 1.0, 0.5)
    res = max(np.max(np.abs(rx(px, py) + fxn)), np.max(np.abs(ry(px, py) + fyn)))
    ok = rep.total < 1e-12 and max(rep.terms.values()) < 1e-12 and res < 1e-9
    return ok, f"total loss {rep.total:.1e}, momentum residual {res:.1e}"


def criterion_3():
    """Net-i identification on force-complete 40x40 data from lambda0 = mu0 = 2."""
    t0 = time.perf_counter()
    hist, ck = identify(40, max_epochs=1500)
    ok, lam, mu = _within(ck, (0.95, 1.05), (0.475, 0.525))
    return ok, (f"lambda={lam:.5f} mu={mu:.5f} after {hist.last_epoch} epochs "
                f"(best {hist.best_epoch}), {time.perf_counter() - t0:.0f} s")


def criterion_4():
    """Same setup on 10x10 data: within 10% of the truth."""
    t0 = time.perf_counter()
    hist, ck = identify(10, max_epochs=10000)
    ok, lam, mu = _within(ck, (0.9, 1.1), (0.45, 0.55))
    return ok, (f"lambda={lam:.5f} mu={mu:.5f} after {hist.last_epoch} epochs "
                f"({hist.stop_reason}), {time.perf_counter() - t0:.0f} s")


def criterion_5():
    """Identical runs with relu and tanh: tanh ends with the lower total loss."""
    finals = {}
    for act in ("tanh", "relu"):
        hist, _ = identify(20, max_epochs=600, activation=act)
        finals[act] = (hist.total[-1], hist.best_loss)
    ok = finals["tanh"][0] < finals["relu"][0] and finals["tanh"][1] < finals["relu"][1]
    return ok, (f"final loss tanh {finals['tanh'][0]:.3e} vs relu {finals['relu'][0]:.3e} "
                f"(best {finals['tanh'][1]:.3e} vs {finals['relu'][1]:.3e})")


def _cd_error(n):
    ds = data.generate_elastic_dataset(data.GridSpec(n, n), 1.0, 0.5, mode="stress")
    rec = data.with_central_difference_forces(ds)
    fx, fy = el.exact_body_force(ds.points[:, 0], ds.points[:, 1], 1.0, 0.5)
    return max(np.max(np.abs(rec.columns["fx"] - fx)), np.max(np.abs(rec.columns["fy"] - fy)))


def criterion_6():
    """Central-difference forces converge at second order (50x50 vs 100x100)."""
    ratio = _cd_error(50) / _cd_error(100)
    return 3.5 <= ratio <= 4.5, f"error ratio {ratio:.3f}"


def criterion_7():
    """Transfer from mu = 0.5 to mu in {2, 1.5, 1, 0.1} on 40x40 grids."""
    t0 = time.perf_counter()
    grid = data.GridSpec(40, 40)
    _, ck = identify(40, max_epochs=1000)
    cfg = tr.TrainingConfig(max_epochs=300, patience=300)
    lines, ok = [], True
    for mu in (2.0, 1.5, 1.0, 0.1):
        new = data.generate_elastic_dataset(grid, 1.0, mu)
        hist, _ = tr.retrain(ck, new, cfg)
        prepared = tr.prepare_dataset(new, cfg, ck.normalization)
        fresh = nw.build_field_model(el.ELASTIC_FIELDS, ck.model.arch, seed=cfg.seed)
        scratch, _ = tr.train(fresh, ck.params, prepared, cfg, _prepared=True)
        assert scratch.initial_loss == hist.scratch_initial_loss
        tau = CONVERGED_FRACTION * scratch.initial_loss
        e_re = hist.converged_epoch(tau)
        e_sc = scratch.converged_epoch(tau)
        # a scratch run that never converges is credited with cap + 1 epochs (a lower bound)
        e_sc_bound = e_sc if e_sc is not None else cfg.max_epochs + 1
        good = (hist.initial_loss < scratch.initial_loss and e_re is not None
                and e_re < 0.5 * e_sc_bound)
        ok &= good
        lines.append(f"mu={mu}: L0 {hist.initial_loss:.3g}<{scratch.initial_loss:.3g}, "
                     f"epochs {e_re} vs {e_sc if e_sc is not None else '>' + str(cfg.max_epochs)}")
    return ok, "; ".join(lines) + f"; {time.perf_counter() - t0:.0f} s"


def criterion_8():
    """Surrogate over mu in {1/4, 2/3, 3/2, 4}; displacement error at 10 unseen mu."""
    t0 = time.perf_counter()
    parts = [data.generate_elastic_dataset(data.GridSpec(20, 20), 1.0, m) for m in data.SURROGATE_MU]
    cfg = tr.TrainingConfig(max_epochs=800, patience=500, normalize=True, mode="solve")
    _, ck = tr.train_surrogate(parts, cfg, NET_I)
    pts = data.sample_grid(data.GridSpec(41, 41))
    ux, uy = el.exact_displacement(pts[:, 0], pts[:, 1])
    mag = np.hypot(ux, uy)
    k = int(np.argmax(mag))
    errors = []
    for mu in np.linspace(0.3, 4.5, 10):
        pred = ck.predict(np.column_stack([pts, np.full(len(pts), mu)]))
        errors.append(np.hypot(pred["ux"][k] - ux[k], pred["uy"][k] - uy[k]) / mag[k])
    worst = max(errors)
    return worst < 0.10, f"worst displacement error {worst:.4f}, {time.perf_counter() - t0:.0f} s"


def _plastic_state(strain, n=6):
    out = return_mapping(strain, LAM, MU, SY)
    stress = stress_components(out["stress"])
    ds, rec = data.normalize(pl.homogeneous_dataset(data.sample_grid(data.GridSpec(n, n)), strain, stress,
                                                    SY, LAM, MU))
    return pl.homogeneous_model(strain, stress, rec), ds


def _states():
    elastic = (1.0e-3, -0.5e-3, 0.2e-3)
    q = return_mapping(elastic, LAM, MU, SY)["q"]
    return {"elastic": elastic, "at_yield": tuple(np.array(elastic) * SY / q),
            "plastic": (5.0e-3, -3.0e-3, 2.0e-3)}


def criterion_9():
    """Plasticity loss terms on elastic, at-yield and plastic oracle states."""
    params = el.MaterialParams(LAM, MU, SY)
    cons = ("constitutive_xx", "constitutive_yy", "constitutive_zz", "constitutive_xy")
    parts, ok = [], True
    for name, strain in _states().items():
        model, ds = _plastic_state(strain)
        t = pl.plasticity_loss(model, params, ds).terms
        worst = max(t[k] for k in cons)
        good = worst < 1e-8 and t["kkt_negativity"] < 1e-10 and t["kkt_positivity"] == 0.0
        if name != "elastic":
            good &= t["kkt_complementarity"] < 1e-10
        ok &= good
        parts.append(f"{name}: constitutive {worst:.1e}, KKT- {t['kkt_negativity']:.1e}, "
                     f"KKTc {t['kkt_complementarity']:.1e}")
    return ok, "; ".join(parts)


def criterion_10():
    """sigma_Y gradient vanishes at the truth and not at +-10%."""
    model, ds = _plastic_state(_states()["plastic"])
    grads = {}
    for f in (1.0, 0.9, 1.1):
        params = el.MaterialParams(LAM, MU, f * SY, trainable={"sigma_y"})
        rep = pl.plasticity_loss(model, params, ds)
        grads[f] = float(ad.parameter_gradient(rep.tape, rep.nodes["total"], ["sigma_y"])["sigma_y"])
    ok = abs(grads[1.0]) < 1e-6 and abs(grads[0.9]) > 1e-6 and abs(grads[1.1]) > 1e-6
    return ok, f"gradient {grads[1.0]:.1e} at truth, {grads[0.9]:.3g} at -10%, {grads[1.1]:.3g} at +10%"


def criterion_11():
    """Seeded histories replay bitwise; checkpoint and dataset round trips are lossless."""
    ds = data.generate_elastic_dataset(data.GridSpec(8, 8), 1.0, 0.5)
    runs = []
    for _ in range(2):
        model = nw.build_field_model(el.ELASTIC_FIELDS, nw.NetworkArch(3, 10), seed=5)
        cfg = tr.TrainingConfig(max_epochs=20, patience=20, batch_size=16, seed=9, normalize=True)
        runs.append(tr.train(model, INIT, ds, cfg))
    (h1, c1), (h2, c2) = runs
    replay = h1.total == h2.total and h1.params == h2.params and h1.terms == h2.terms
    with tempfile.TemporaryDirectory() as tmp:
        tr.save_checkpoint(c1, Path(tmp) / "c.json")
        back = tr.load_checkpoint(Path(tmp) / "c.json")
        pts = np.random.default_rng(0).uniform(size=(100, 2))
        a, b = c1.predict(pts), back.predict(pts)
        ck_ok = all(np.array_equal(a[k], b[k]) for k in a) and back.params == c1.params
        data.save_dataset(ds, Path(tmp) / "d.csv")
        d2 = data.load_dataset(Path(tmp) / "d.csv")
        ds_ok = np.array_equal(d2.points, ds.points) and all(
            np.array_equal(d2.columns[k], v) for k, v in ds.columns.items())
    return replay and ck_ok and ds_ok, f"replay {replay}, checkpoint {ck_ok}, dataset {ds_ok}"


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 12)}
SLOW = {3, 4, 5, 7, 8}


def run_criterion(n):
    t0 = time.perf_counter()
    try:
        ok, detail = CRITERIA[n]()
    except Exception as exc:  # a crash is a failure, reported on the same line
        ok, detail = False, f"error: {exc!r}"
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {CRITERIA[n].__doc__.strip()}  [{detail}]"
    return ok, line, time.perf_counter() - t0


@pytest.mark.parametrize("n", [pytest.param(n, marks=pytest.mark.slow) if n in SLOW else n
                               for n in range(1, 12)])
def test_criterion(n, capsys):
    ok, line, _ = run_criterion(n)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    chosen = [int(a) for a in sys.argv[1:]] or list(range(1, 12))
    results = []
    for n in chosen:
        ok, line, dt = run_criterion(n)
        print(line, flush=True)
        results.append(ok)
    sys.exit(0 if all(results) else 1)
