"""Independent oracles and the verification suite behind ``learnres check``.

The oracles here deliberately avoid the code paths they check: transport cost
is computed by the north-west-corner coupling on sorted supports, xi by
explicit O(n^2) rank counting, and gradients by central differences.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import predictor as P
from .scale import PRESETS, Boundaries, ScaleConfig, clamp_scale_factor


@dataclass(frozen=True)
class CheckConfig:
    points: int = 100
    h: float = 1e-5
    tol: float = 1e-4
    seed: int = 0
    pairs: int = 500
    bins: int = 16
    xi_samples: int = 200
    inject_fault: str | None = None

    def __post_init__(self):
        if self.points < 1 or self.pairs < 1 or self.xi_samples < 1 or self.bins < 2:
            raise ValueError("points, pairs, xi_samples must be >= 1 and bins >= 2")
        if not (self.h > 0 and self.tol > 0):
            raise ValueError("h and tol must be positive")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# --- oracles ----------------------------------------------------------------


def monotone_coupling_w1(xs, p, ys, q) -> float:
    """Exact 1D optimal transport cost via the north-west-corner (monotone) plan."""
    xs, p = np.asarray(xs, float), np.asarray(p, float)
    ys, q = np.asarray(ys, float), np.asarray(q, float)
    ix, iy = np.argsort(xs, kind="stable"), np.argsort(ys, kind="stable")
    xs, p, ys, q = xs[ix], p[ix] / p.sum(), ys[iy], q[iy] / q.sum()
    i = j = 0
    pi, qj = p[0], q[0]
    cost = 0.0
    while i < len(p) and j < len(q):
        f = min(pi, qj)
        cost += f * abs(xs[i] - ys[j])
        pi -= f
        qj -= f
        if pi <= qj:
            i += 1
            if i < len(p):
                pi = p[i]
            qj = max(qj, 0.0)
        else:
            j += 1
            if j < len(q):
                qj = q[j]
    return cost


def xi_bruteforce(x, y, tie_seed=0) -> float:
    """Chatterjee's xi by direct counting; ties in x broken with the same draw
    sequence as :func:`learnres.losses.xi_correlation`."""
    n = len(x)
    rng = tie_seed if isinstance(tie_seed, np.random.Generator) else np.random.default_rng(tie_seed)
    u = rng.random(n)
    order = sorted(range(n), key=lambda i: (x[i], u[i]))
    ys = [y[i] for i in order]
    r = [sum(1 for b in ys if b <= a) for a in ys]
    s = sum(abs(r[i + 1] - r[i]) for i in range(n - 1))
    if len(set(ys)) == n:
        return 1.0 - 3.0 * s / (n * n - 1)
    l = [sum(1 for b in ys if b >= a) for a in ys]
    d = sum(li * (n - li) for li in l)
    if d == 0:
        return 0.0
    return 1.0 - n * s / (2.0 * d)


def random_histogram(rng: np.random.Generator, edges: np.ndarray, sparsity: float = 0.3) -> L.Histogram:
    m = rng.random(edges.size - 1) ** 2
    m[rng.random(m.size) < sparsity] = 0.0
    if m.sum() == 0:
        m[rng.integers(m.size)] = 1.0
    return L.Histogram(edges, m / m.sum())


def random_records(rng: np.random.Generator, n: int = 60) -> list[L.ObjectLossRecord]:
    areas = np.clip(rng.beta(1.5, 8.0, n), 1e-4, 1 - 1e-4)
    losses = 0.5 * np.log(areas / 0.05) ** 2 * np.exp(0.3 * rng.standard_normal(n))
    return [L.ObjectLossRecord(float(a), float(v)) for a, v in zip(areas, losses)]


# --- gradient suites --------------------------------------------------------


def _summarize(name, reports, wanted, tol):
    done = [r for r in reports if not r.skipped]
    worst = max((r.max_rel_error for r in done), default=float("nan"))
    ok = len(done) == wanted and all(r.passed for r in done)
    return CheckResult(name, ok, f"{len(done)} points, max rel err {worst:.3e} (tol {tol:g})")


def _collect(make_point, wanted, max_tries):
    reports = []
    tries = 0
    while len([r for r in reports if not r.skipped]) < wanted and tries < max_tries:
        tries += 1
        rep = make_point()
        if rep is not None:
            reports.append(rep)
    return reports


def grad_suite_bce(cfg: CheckConfig) -> CheckResult:
    rep = ad.check_gradients(lambda v: L.bce(0.3, ad.logistic(v[0])), [0.1], cfg.h, cfg.tol)
    return CheckResult("grad/bce_logistic", rep.passed, f"rel err {rep.max_rel_error:.3e}")


def grad_suite_scale_loss(cfg: CheckConfig, rng: np.random.Generator) -> CheckResult:
    area_ref = 600.0 * 800.0

    def point():
        scfg = ScaleConfig(0.2, float(rng.choice(list(PRESETS.values()))))
        lo = rng.uniform(0.0, 0.2)
        b = Boundaries(lo, lo + rng.uniform(0.05, 0.5))
        w, h = rng.uniform(5, 600, size=2)
        x0 = rng.normal(0.0, 2.0)
        f = lambda v: L.scale_loss_object(w, h, clamp_scale_factor(v[0], scfg), b, scfg, area_ref)
        return ad.check_gradients(f, [x0], cfg.h, cfg.tol, label="scale_loss_object")

    reports = _collect(point, cfg.points, 20 * cfg.points)
    return _summarize("grad/scale_loss_object (phi_raw)", reports, cfg.points, cfg.tol)


def grad_suite_distribution(cfg: CheckConfig, rng: np.random.Generator) -> CheckResult:
    edges = L.uniform_edges(L.DEFAULT_BINS)

    def point():
        records = random_records(rng)
        form = "likelihood" if rng.random() < 0.5 else "plain"
        tie = int(rng.integers(1 << 30))
        x0 = rng.uniform(math.log(0.7), math.log(12.0), size=2)
        f = lambda v: L.distribution_loss(records, L.BetaParams.from_log(v[0], v[1]), edges,
                                          L.DEFAULT_LAMBDA_BASE, form, tie)
        return ad.check_gradients(f, x0, cfg.h, cfg.tol, label="distribution_loss")

    reports = _collect(point, cfg.points, 20 * cfg.points)
    return _summarize("grad/distribution_loss (log alpha, log beta)", reports, cfg.points, cfg.tol)


def total_loss_problem(rng: np.random.Generator, n_scenes: int = 2):
    """A small fixed problem for checking the weighted total against predictor weights.

    Returns (pcfg, flat weights, tape objective, float objective, smooth test).
    Oracle scalars, boundaries, records and Beta parameters are held fixed, as
    they are inside one training step.
    """
    from .simulator import generate_dataset, SizeDistribution

    pcfg = P.PredictorConfig(init_seed=int(rng.integers(1 << 30)))
    params = P.init_params(pcfg, zero_head=False)
    scenes = generate_dataset(n_scenes, SizeDistribution(mean_objects=3.0), int(rng.integers(1 << 30)))
    scfg = ScaleConfig(0.2, float(rng.choice(list(PRESETS.values()))))
    lo = rng.uniform(0.0, 0.05)
    b = Boundaries(lo, lo + rng.uniform(0.05, 0.3))
    oracle = float(rng.uniform(0.2, 3.0))
    lambdas = L.LossWeights(*rng.uniform(0.1, 2.0, size=4))
    beta = L.BetaParams(float(rng.uniform(0.8, 5)), float(rng.uniform(1, 10)))
    dist = L.distribution_loss(random_records(rng), beta)
    feats = np.stack([s.features for s in scenes])

    def objective_tape(leaves):
        phis = [P.predict_scale(x, leaves, scfg, pcfg)[0] for x in feats]
        scale = L.scale_loss_batch([(s.objects, p, s.area_ref) for s, p in zip(scenes, phis)], b, scfg)
        return L.weighted_total_loss(oracle, oracle, scale, dist, lambdas)

    def objective_float(flat):
        prm = P.PredictorParams.from_flat(pcfg, flat)
        raw, _ = P.forward(prm, feats, pcfg.activation)
        phis = [clamp_scale_factor(float(r), scfg) for r in raw]
        scale = L.scale_loss_batch([(s.objects, p, s.area_ref) for s, p in zip(scenes, phis)], b, scfg)
        return L.weighted_total_loss(oracle, oracle, scale, dist, lambdas)

    def smooth(flat):
        prm = P.PredictorParams.from_flat(pcfg, flat)
        raw, _ = P.forward(prm, feats, pcfg.activation)
        s = 0.5 * (1.0 + np.tanh(0.5 * raw))
        return bool(np.all(np.abs(s * scfg.tau_max - scfg.tau_min) > 1e-4) and np.all(s < 1 - 1e-4))

    return pcfg, params.flat(), objective_tape, objective_float, smooth


def check_total_point(rng, cfg: CheckConfig) -> ad.GradCheckReport | None:
    pcfg, x0, f_tape, f_float, smooth = total_loss_problem(rng)
    if not smooth(x0):
        return None
    _, analytic, _ = ad.tape_gradient(f_tape, x0)
    numeric = np.empty_like(x0)
    for i in range(x0.size):
        up, dn = x0.copy(), x0.copy()
        up[i] += cfg.h
        dn[i] -= cfg.h
        numeric[i] = (f_float(up) - f_float(dn)) / (2 * cfg.h)
    return ad.GradCheckReport(x0, analytic, numeric, ad.relative_error(analytic, numeric), cfg.tol,
                              label="weighted_total_loss")


def grad_suite_total(cfg: CheckConfig, rng: np.random.Generator) -> CheckResult:
    reports = _collect(lambda: check_total_point(rng, cfg), cfg.points, 20 * cfg.points)
    return _summarize("grad/weighted_total_loss (all predictor weights)", reports, cfg.points, cfg.tol)


# --- metric and rank suites -------------------------------------------------


def wasserstein_suite(cfg: CheckConfig, rng: np.random.Generator) -> list[CheckResult]:
    edges = L.uniform_edges(cfg.bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    worst = 0.0
    for _ in range(cfg.pairs):
        p, q = random_histogram(rng, edges), random_histogram(rng, edges)
        worst = max(worst, abs(L.wasserstein_1d(p, q) - monotone_coupling_w1(centers, p.masses, centers, q.masses)))
    out = [CheckResult("wasserstein/oracle", worst <= 1e-9, f"{cfg.pairs} pairs, max |diff| {worst:.2e}")]
    bad = []
    for _ in range(cfg.pairs):
        p, q, r = (random_histogram(rng, edges) for _ in range(3))
        pq, qp = L.wasserstein_1d(p, q), L.wasserstein_1d(q, p)
        pr, qr = L.wasserstein_1d(p, r), L.wasserstein_1d(q, r)
        if min(pq, pr, qr) < 0:
            bad.append("non-negativity")
        if abs(pq - qp) > 1e-15:
            bad.append("symmetry")
        if pr > pq + qr + 1e-12:
            bad.append("triangle")
        if L.wasserstein_1d(p, p) != 0.0:
            bad.append("identity")
        if not np.array_equal(p.masses, q.masses) and pq <= 0:
            bad.append("indiscernibles")
    out.append(CheckResult("wasserstein/metric_axioms", not bad,
                           f"{cfg.pairs} triples, violations: {sorted(set(bad)) or 'none'}"))
    return out


def xi_suite(cfg: CheckConfig, rng: np.random.Generator) -> list[CheckResult]:
    wrong = []
    for n in range(3, 51):
        x = np.sort(rng.random(n))
        if L.xi_correlation(x, 3.0 * x + 1.0, 0) != (n - 2) / (n + 1):
            wrong.append(n)
        if L.xi_correlation(x, -x, 0) != (n - 2) / (n + 1):
            wrong.append(-n)
    out = [CheckResult("xi/monotone_exact", not wrong, f"n=3..50, mismatches: {wrong or 'none'}")]
    worst = 0.0
    for k in range(cfg.xi_samples):
        n = int(rng.integers(2, 60))
        if k % 2:
            x, y = rng.integers(0, 5, n).astype(float), rng.integers(0, 4, n).astype(float)
        else:
            x, y = rng.random(n), rng.random(n)
        seed = int(rng.integers(1 << 30))
        worst = max(worst, abs(L.xi_correlation(x, y, seed) - xi_bruteforce(list(x), list(y), seed)))
    out.append(CheckResult("xi/bruteforce", worst <= 1e-12, f"{cfg.xi_samples} samples, max |diff| {worst:.2e}"))
    return out


def run_all(cfg: CheckConfig = CheckConfig()) -> list[CheckResult]:
    rng = np.random.default_rng(cfg.seed)
    fault = ad.inject_fault(cfg.inject_fault) if cfg.inject_fault else contextlib.nullcontext()
    with fault:
        results = [
            grad_suite_bce(cfg),
            grad_suite_scale_loss(cfg, rng),
            grad_suite_distribution(cfg, rng),
            grad_suite_total(cfg, rng),
        ]
    if cfg.inject_fault:
        for r in results:
            if not r.passed:
                r.detail += f" [fault injected into op '{cfg.inject_fault}']"
    results += wasserstein_suite(cfg, rng)
    results += xi_suite(cfg, rng)
    return results
