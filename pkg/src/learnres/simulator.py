"""Synthetic scenes, the detection-loss oracle and the joint training loop.

The oracle stands in for a detector: an object of pixel area ``A`` seen at
scale ``phi`` has loss

    sharpness * ln(phi^2 * A / sweet_spot)^2 * difficulty * exp(noise_std * g)

with ``g`` standard normal. Inside :func:`train` the oracle is evaluated at
the resolution actually produced by :func:`~learnres.scale.scale_resolution`;
that rounding is piecewise constant, so no gradient reaches the predictor
through the oracle and the scale factor is shaped only by the scale loss.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import predictor as P
from .scale import (DEFAULT_STEEPNESS, Resolution, ScaleConfig, clamp_scale_factor,
                    effective_area_factor, scale_resolution)

log = logging.getLogger(__name__)

N_FEATURES = 16
_SKETCH_EDGES = np.linspace(-9.0, 0.0, 12)  # log normalized area, 11 bins


@dataclass(frozen=True)
class SceneObject:
    width: float
    height: float
    difficulty: float = 1.0

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True, eq=False)
class Scene:
    nominal: Resolution
    objects: tuple[SceneObject, ...]
    features: np.ndarray = field(repr=False)

    def __post_init__(self):
        for o in self.objects:
            if o.width > self.nominal.width or o.height > self.nominal.height:
                raise ValueError("object does not fit inside the image")
            if not o.difficulty > 0 or o.width <= 0 or o.height <= 0:
                raise ValueError("object sizes and difficulty must be positive")

    @property
    def area_ref(self) -> float:
        return float(self.nominal.area)

    def normalized_areas(self) -> np.ndarray:
        return np.array([o.area for o in self.objects]) / self.area_ref

    def mean_area(self) -> float:
        a = self.normalized_areas()
        return float(a.mean()) if a.size else float("nan")


@dataclass(frozen=True)
class SizeDistribution:
    """Generation parameters; areas are fractions of the image area.

    Each scene draws a log-mean offset (``scene_log_std``) shared by its
    objects, and each object adds its own offset (``object_log_std``); the
    location is chosen so the expected normalized area equals ``mean_area``.
    """

    mean_area: float = 0.08
    scene_log_std: float = 0.6
    object_log_std: float = 0.35
    aspect_log_std: float = 0.25
    mean_objects: float = 5.0
    min_objects: int = 1
    difficulty_log_std: float = 0.2
    short_side: int = 600
    long_side_range: tuple[int, int] = (600, 1000)
    max_area: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "long_side_range", tuple(int(v) for v in self.long_side_range))
        if not 0 < self.mean_area < self.max_area <= 1:
            raise ValueError("need 0 < mean_area < max_area <= 1")
        if min(self.scene_log_std, self.object_log_std, self.aspect_log_std, self.difficulty_log_std) < 0:
            raise ValueError("log standard deviations must be >= 0")
        if self.mean_objects < self.min_objects or self.min_objects < 0:
            raise ValueError("need 0 <= min_objects <= mean_objects")
        lo, hi = self.long_side_range
        if not self.short_side <= lo <= hi:
            raise ValueError("long side range must start at or above the short side")


@dataclass(frozen=True)
class OracleConfig:
    sweet_spot: float = 96.0**2
    sharpness: float = 0.25
    noise_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not (self.sweet_spot > 0 and self.sharpness > 0 and self.noise_std >= 0):
            raise ValueError("need sweet_spot > 0, sharpness > 0, noise_std >= 0")


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 3000
    batch: int = 16
    lr: float = 1e-2
    lr_beta: float = 1e-3
    lambdas: L.LossWeights = L.LossWeights()
    lambda_base: float = L.DEFAULT_LAMBDA_BASE
    form: str = "likelihood"
    lpf: bool = True
    bins: int = L.DEFAULT_BINS
    steepness: float = DEFAULT_STEEPNESS
    epsilon: float = L.BCE_EPSILON
    alpha0: float = 2.0
    beta0: float = 2.0
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if isinstance(self.lambdas, dict):
            object.__setattr__(self, "lambdas", L.LossWeights(**self.lambdas))
        if self.iters < 1 or self.batch < 1 or self.bins < 2 or self.log_every < 1:
            raise ValueError("iters, batch, log_every must be >= 1 and bins >= 2")
        if self.lr <= 0 or self.lr_beta < 0:
            raise ValueError("need lr > 0 and lr_beta >= 0")
        if self.form not in ("likelihood", "plain"):
            raise ValueError("form must be 'likelihood' or 'plain'")
        if not 0 <= self.lambda_base <= 1:
            raise ValueError("lambda_base must lie in [0, 1]")
        if self.alpha0 <= 0 or self.beta0 <= 0 or self.steepness <= 0:
            raise ValueError("alpha0, beta0, steepness must be positive")


# --- dataset ----------------------------------------------------------------


def scene_features(areas: np.ndarray) -> np.ndarray:
    """Fixed-width summary of a scene's normalized object areas.

    [count/10, mean, std, min, max of log area (scaled by 1/5, shifted), then
    an 11-bin occupancy sketch of log area].
    """
    f = np.zeros(N_FEATURES)
    f[0] = areas.size / 10.0
    if areas.size:
        la = np.log(areas)
        f[1:5] = (np.array([la.mean(), la.std(), la.min(), la.max()]) + np.array([4.0, 0.0, 4.0, 4.0])) / 2.0
        counts, _ = np.histogram(np.clip(la, _SKETCH_EDGES[0], _SKETCH_EDGES[-1]), bins=_SKETCH_EDGES)
        f[5:] = counts / areas.size
    return f


def make_scene(nominal: Resolution, objects: Sequence[SceneObject]) -> Scene:
    objects = tuple(objects)
    areas = np.array([o.area for o in objects]) / nominal.area
    return Scene(nominal, objects, scene_features(areas))


def generate_dataset(n_scenes: int, dist: SizeDistribution = SizeDistribution(), seed: int = 0) -> list[Scene]:
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    rng = np.random.default_rng(seed)
    total_var = dist.scene_log_std**2 + dist.object_log_std**2
    loc = math.log(dist.mean_area) - 0.5 * total_var
    scenes = []
    for _ in range(n_scenes):
        lo, hi = dist.long_side_range
        nominal = Resolution(int(rng.integers(lo, hi + 1)), dist.short_side)
        n_obj = dist.min_objects + int(rng.poisson(dist.mean_objects - dist.min_objects))
        scene_offset = rng.normal(0.0, dist.scene_log_std)
        objs = []
        for _ in range(n_obj):
            a = math.exp(loc + scene_offset + rng.normal(0.0, dist.object_log_std))
            a = min(a, dist.max_area)
            r = math.exp(rng.normal(0.0, dist.aspect_log_std))
            px = a * nominal.area
            w, h = math.sqrt(px * r), math.sqrt(px / r)
            if w > nominal.width:
                w, h = float(nominal.width), px / nominal.width
            if h > nominal.height:
                w, h = px / nominal.height, float(nominal.height)
            d = math.exp(rng.normal(0.0, dist.difficulty_log_std))
            objs.append(SceneObject(w, h, d))
        scenes.append(make_scene(nominal, objs))
    return scenes


def save_dataset(path, scenes: Sequence[Scene]) -> None:
    """One JSON object per line: ``{"width", "height", "objects": [[w, h, difficulty], ...]}``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in scenes:
            rec = {"width": s.nominal.width, "height": s.nominal.height,
                   "objects": [[o.width, o.height, o.difficulty] for o in s.objects]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(path) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                nominal = Resolution(int(rec["width"]), int(rec["height"]))
                objs = [SceneObject(float(w), float(h), float(d)) for w, h, d in rec["objects"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed scene record ({exc})") from exc
            scenes.append(make_scene(nominal, objs))
    return scenes


def feature_matrix(scenes: Sequence[Scene]) -> np.ndarray:
    return np.stack([s.features for s in scenes])


# --- oracle -----------------------------------------------------------------


def oracle_loss(obj: SceneObject, phi: float, oc: OracleConfig, step_seed: int | None = None) -> float:
    if phi <= 0:
        raise ValueError("scale factor must be positive")
    noise = 1.0
    if oc.noise_std > 0:
        g = np.random.default_rng(oc.seed if step_seed is None else step_seed).standard_normal()
        noise = math.exp(oc.noise_std * g)
    return oc.sharpness * math.log(phi * phi * obj.area / oc.sweet_spot) ** 2 * obj.difficulty * noise


def oracle_losses(scaled_areas: np.ndarray, difficulty: np.ndarray, oc: OracleConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Vectorized oracle on already-scaled pixel areas; noise drawn from ``rng``."""
    base = oc.sharpness * np.log(scaled_areas / oc.sweet_spot) ** 2 * difficulty
    if oc.noise_std > 0:
        base = base * np.exp(oc.noise_std * rng.standard_normal(base.shape))
    return base


def realized_area_factors(scenes: Sequence[Scene], phis) -> np.ndarray:
    """phi^2 as realised after snapping each scene's resolution."""
    return np.array([effective_area_factor(s.nominal, scale_resolution(s.nominal, float(p)))
                     for s, p in zip(scenes, phis)])


# --- training ---------------------------------------------------------------


REPORT_COLUMNS = (
    "iteration", "tau_min", "tau_max", "form", "lpf", "total_loss", "scale_loss", "dist_loss",
    "oracle_mean", "lambda_scale_eff", "lambda_dist_eff", "phi_mean", "phi_std",
    "boundary_lower", "boundary_upper", "alpha", "beta", "xi_coef", "pearson_size_phi",
)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class TrainReport:
    scale: ScaleConfig
    config: TrainConfig
    rows: list[dict] = field(default_factory=list)
    boundary_trajectory: list[tuple[int, float, float]] = field(default_factory=list)
    params: P.PredictorParams | None = None
    beta: L.BetaParams | None = None
    diverged: str | None = None

    def boundary_total_variation(self, upto: int | None = None) -> float:
        traj = np.array([(lo, hi) for it, lo, hi in self.boundary_trajectory
                         if upto is None or it <= upto])
        if len(traj) < 2:
            return 0.0
        return float(np.abs(np.diff(traj, axis=0)).sum())

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\r\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(row[k]) for k in REPORT_COLUMNS})

    def write_boundaries_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["iteration", "boundary_lower", "boundary_upper"])
            for it, lo, hi in self.boundary_trajectory:
                w.writerow([it, _fmt(lo), _fmt(hi)])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def pearson(x, y) -> float:
    """Pearson correlation; 0.0 when either side is constant (no linear association)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        return float("nan")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def _apply_update(params: P.PredictorParams, grads: P.PredictorParams, lr: float) -> None:
    for p, g in zip(params.weights + params.biases, grads.weights + grads.biases):
        p -= lr * g


def train(dataset: Sequence[Scene], pcfg: P.PredictorConfig, params: P.PredictorParams | None,
          scfg: ScaleConfig, oc: OracleConfig, tc: TrainConfig) -> TrainReport:
    """Jointly fit the predictor and the Beta parameters against the oracle.

    Per iteration: sample a batch, predict phi, evaluate the oracle at the
    snapped resolutions, build the scale loss and the distribution loss, weight
    them by the detached batch-mean oracle loss, step both parameter groups and
    refresh the boundaries. Raises :class:`TrainingDiverged` (carrying the
    partial report) on a non-finite loss. Scenes without objects are skipped.
    """
    dataset = [s for s in dataset if s.objects]
    if not dataset:
        raise ValueError("dataset has no scene with objects")
    params = P.init_params(pcfg) if params is None else params.copy()
    rng = np.random.default_rng(tc.seed)
    noise_rng = np.random.default_rng([tc.seed, oc.seed])
    tie_rng = np.random.default_rng([tc.seed, 1])
    edges = L.uniform_edges(tc.bins)
    feats = feature_matrix(dataset)
    n = len(dataset)
    batch = min(tc.batch, n)
    log_a, log_b = math.log(tc.alpha0), math.log(tc.beta0)
    report = TrainReport(scfg, tc)
    bounds = L.boundaries_from_beta(L.BetaParams(tc.alpha0, tc.beta0))
    report.boundary_trajectory.append((0, bounds.lower, bounds.upper))

    for it in range(1, tc.iters + 1):
        idx = np.sort(rng.choice(n, size=batch, replace=False))
        scenes = [dataset[i] for i in idx]
        raw, cache = P.forward(params, feats[idx], pcfg.activation)

        tape = ad.Tape()
        raw_leaves = [tape.var(r) for r in raw]
        phis = [clamp_scale_factor(v, scfg) for v in raw_leaves]
        phi_vals = np.array([p.data for p in phis])

        factors = realized_area_factors(scenes, phi_vals)
        obj_area = np.concatenate([[o.area for o in s.objects] for s in scenes])
        obj_diff = np.concatenate([[o.difficulty for o in s.objects] for s in scenes])
        obj_norm = np.concatenate([s.normalized_areas() for s in scenes])
        obj_scene = np.concatenate([[k] * len(s.objects) for k, s in enumerate(scenes)]).astype(int)
        o_loss = oracle_losses(obj_area * factors[obj_scene], obj_diff, oc, noise_rng)
        oracle_mean = float(o_loss.mean())
        if not np.all(np.isfinite(o_loss)):
            report.diverged = f"non-finite oracle loss at iteration {it}"
            report.params = params
            report.beta = L.BetaParams(math.exp(log_a), math.exp(log_b))
            raise TrainingDiverged(report.diverged, report)
        records = [L.ObjectLossRecord(float(a), float(v)) for a, v in zip(obj_norm, o_loss)]

        scale_loss = L.scale_loss_batch(
            [(s.objects, p, s.area_ref) for s, p in zip(scenes, phis)],
            bounds, scfg, steepness=tc.steepness, epsilon=tc.epsilon)

        la_v, lb_v = tape.var(log_a), tape.var(log_b)
        beta_v = L.BetaParams.from_log(la_v, lb_v)
        current = beta_v.detached()
        if tc.lpf:
            target, coef = L.smoothed_target(records, beta_v, edges, tc.lambda_base, tc.form,
                                             tie_seed=tie_rng, with_coef=True)
        else:
            target, coef = L.target_distribution(records, edges, tc.form), 1.0
        dist_loss = L.distribution_loss(records, beta_v, edges, target=target)

        total = L.weighted_total_loss(oracle_mean, oracle_mean, scale_loss, dist_loss, tc.lambdas)
        lam_s, lam_d = L.coupled_weights(oracle_mean, oracle_mean, tc.lambdas)
        total_val = ad.value_of(total)

        row = {
            "iteration": it, "tau_min": scfg.tau_min, "tau_max": scfg.tau_max, "form": tc.form,
            "lpf": int(tc.lpf), "total_loss": total_val, "scale_loss": ad.value_of(scale_loss),
            "dist_loss": ad.value_of(dist_loss), "oracle_mean": oracle_mean,
            "lambda_scale_eff": lam_s, "lambda_dist_eff": lam_d,
            "phi_mean": float(phi_vals.mean()), "phi_std": float(phi_vals.std()),
            "boundary_lower": bounds.lower, "boundary_upper": bounds.upper,
            "alpha": float(current.alpha), "beta": float(current.beta), "xi_coef": coef,
            "pearson_size_phi": pearson([s.mean_area() for s in scenes], phi_vals),
        }
        if not math.isfinite(total_val):
            report.rows.append(row)
            report.diverged = f"non-finite total loss at iteration {it}"
            report.params, report.beta = params, current
            raise TrainingDiverged(report.diverged, report)

        if isinstance(total, ad.Value):
            tape.backward(total)
        grad_raw = np.array([v.grad for v in raw_leaves])
        grads = P.backward(params, cache, grad_raw, pcfg.activation)
        _apply_update(params, grads, tc.lr)
        log_a -= tc.lr_beta * la_v.grad
        log_b -= tc.lr_beta * lb_v.grad
        tape.reset()

        bounds = L.boundaries_from_beta(L.BetaParams(math.exp(log_a), math.exp(log_b)))
        report.boundary_trajectory.append((it, bounds.lower, bounds.upper))
        if it % tc.log_every == 0 or it == tc.iters:
            report.rows.append(row)
            log.debug("iter %d total=%.4f phi=%.3f±%.3f B=[%.4f, %.4f]", it, total_val,
                      row["phi_mean"], row["phi_std"], bounds.lower, bounds.upper)

    report.params = params
    report.beta = L.BetaParams(math.exp(log_a), math.exp(log_b))
    return report


# --- evaluation -------------------------------------------------------------


def evaluate(dataset: Sequence[Scene], params: P.PredictorParams, pcfg: P.PredictorConfig,
             scfg: ScaleConfig, oc: OracleConfig, n_buckets: int = 5, hist_bins: int = 20) -> dict:
    """Inference-only metrics: phi histogram, bucketed phi by mean object size,
    mean oracle loss at snapped resolutions and size/phi correlation."""
    if not np.all(np.isfinite(params.flat())):
        raise ValueError("parameters must be finite")
    scenes = [s for s in dataset if s.objects]
    phi = P.predict_phi(params, feature_matrix(scenes), scfg, pcfg.activation)
    size = np.array([s.mean_area() for s in scenes])

    counts, edges = np.histogram(phi, bins=hist_bins, range=(scfg.tau_min, scfg.tau_max))
    cuts = np.quantile(size, np.linspace(0, 1, n_buckets + 1))
    which = np.clip(np.searchsorted(cuts, size, side="right") - 1, 0, n_buckets - 1)
    buckets = []
    for k in range(n_buckets):
        sel = which == k
        buckets.append({"size_lo": float(cuts[k]), "size_hi": float(cuts[k + 1]), "n": int(sel.sum()),
                        "mean_phi": float(phi[sel].mean()) if sel.any() else float("nan")})

    factors = realized_area_factors(scenes, phi)
    areas = np.concatenate([[o.area * f for o in s.objects] for s, f in zip(scenes, factors)])
    diff = np.concatenate([[o.difficulty for o in s.objects] for s in scenes])
    o_loss = oracle_losses(areas, diff, oc, np.random.default_rng(oc.seed))
    return {
        "n_scenes": len(scenes),
        "phi_mean": float(phi.mean()),
        "phi_std": float(phi.std()),
        "phi_histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        "buckets": buckets,
        "mean_oracle_loss": float(o_loss.mean()),
        "pearson_size_phi": pearson(size, phi),
    }


def report_to_dict(report: TrainReport) -> dict:
    return {"scale": asdict(report.scale), "train": asdict(report.config), "n_rows": len(report.rows)}
