"""Scale loss, distribution loss and their building blocks.

Functions that sit on a gradient path (``bce``, the scale losses,
``beta_pdf_histogram``, ``wasserstein_1d`` and ``distribution_loss``) accept
either floats or tape :class:`~learnres.autodiff.Value` objects. The measured
target distribution is always computed on plain floats and is a constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

from . import autodiff as ad
from .scale import DEFAULT_STEEPNESS, Boundaries, ScaleConfig, target_up_probability

BCE_EPSILON = 1e-6
DEFAULT_BINS = 32
DEFAULT_LAMBDA_BASE = 0.9

Form = Literal["likelihood", "plain"]


class InvalidParameter(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class DegenerateTarget(ValueError):
    pass


class IncompatibleSupport(ValueError):
    pass


class InsufficientData(ValueError):
    pass


# --- types ------------------------------------------------------------------


@dataclass(frozen=True)
class BetaParams:
    alpha: object = 2.0
    beta: object = 2.0

    def __post_init__(self):
        if not (ad.value_of(self.alpha) > 0 and ad.value_of(self.beta) > 0):
            raise InvalidParameter(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")

    @classmethod
    def from_log(cls, log_alpha, log_beta) -> "BetaParams":
        return cls(ad.exp(log_alpha), ad.exp(log_beta))

    def detached(self) -> "BetaParams":
        return BetaParams(ad.value_of(self.alpha), ad.value_of(self.beta))


@dataclass(frozen=True, eq=False)
class Histogram:
    """Masses over K bins; ``masses`` may be an object array of Values."""

    bin_edges: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        e = self.bin_edges
        if e.ndim != 1 or e.size < 2:
            raise ValueError("need at least one bin")
        if np.any(np.diff(e) <= 0) or e[0] < 0 or e[-1] > 1:
            raise ValueError("bin edges must be strictly ascending within [0, 1]")
        if len(self.masses) != e.size - 1:
            raise ValueError("masses/edges length mismatch")

    @property
    def k(self) -> int:
        return self.bin_edges.size - 1

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    def values(self) -> np.ndarray:
        return np.array([ad.value_of(m) for m in self.masses], dtype=float)


@dataclass(frozen=True)
class ObjectLossRecord:
    area: float
    loss_value: float

    def __post_init__(self):
        if not (0 < self.area < 1):
            raise ValueError(f"normalized area must lie in (0, 1), got {self.area}")
        if not self.loss_value >= 0:
            raise ValueError(f"loss must be non-negative, got {self.loss_value}")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    loc: float = 1.0
    scale: float = 1.0
    dist: float = 1.0

    def __post_init__(self):
        for name in ("cls", "loc", "scale", "dist"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def uniform_edges(k: int = DEFAULT_BINS) -> np.ndarray:
    if k < 1:
        raise ValueError("need k >= 1")
    return np.linspace(0.0, 1.0, k + 1)


def _same_support(p: Histogram, q: Histogram) -> None:
    if p.bin_edges.shape != q.bin_edges.shape or not np.array_equal(p.bin_edges, q.bin_edges):
        raise IncompatibleSupport("histograms do not share bin edges")


# --- scale loss -------------------------------------------------------------


def bce(target: float, predicted, epsilon: float = BCE_EPSILON):
    """Binary cross entropy against a continuous target, prediction clamped to
    [epsilon, 1 - epsilon]."""
    p = ad.clamp(predicted, epsilon, 1.0 - epsilon)
    return -(target * ad.log(p) + (1.0 - target) * ad.log(1.0 - p))


def scale_loss_object(width: float, height: float, phi, b: Boundaries, cfg: ScaleConfig,
                      area_ref: float, steepness: float = DEFAULT_STEEPNESS,
                      epsilon: float = BCE_EPSILON):
    y_up = target_up_probability(width, height, b, area_ref, steepness)
    return bce(y_up, phi / cfg.tau_max, epsilon)


def _wh(obj):
    if hasattr(obj, "width"):
        return obj.width, obj.height
    return obj[0], obj[1]


def scale_loss_batch(batch: Iterable[tuple], b: Boundaries, cfg: ScaleConfig, area_ref: float = 1.0,
                     steepness: float = DEFAULT_STEEPNESS, epsilon: float = BCE_EPSILON):
    """Mean over images of the per-image mean object loss.

    ``batch`` items are ``(objects, phi)`` or ``(objects, phi, area_ref)``,
    where ``objects`` holds ``(width, height, ...)`` tuples or objects with
    ``width``/``height`` attributes. Images without
    objects are skipped.
    """
    per_image = []
    for item in batch:
        objects, phi = item[0], item[1]
        ref = item[2] if len(item) > 2 else area_ref
        if not objects:
            continue
        terms = [scale_loss_object(*_wh(o), phi, b, cfg, ref, steepness, epsilon) for o in objects]
        per_image.append(ad.mean(terms))
    if not per_image:
        raise EmptyBatch("no image in the batch has any object")
    return ad.mean(per_image)


# --- Beta distribution ------------------------------------------------------


def beta_moments(params: BetaParams):
    a, b = params.alpha, params.beta
    s = a + b
    mean = a / s
    var = a * b / (s * s * (s + 1.0))
    return mean, var**0.5


def boundaries_from_beta(params: BetaParams, area_ref: float | None = None) -> Boundaries:
    mu, sigma = beta_moments(params.detached())
    return Boundaries(max(0.0, mu - sigma), mu + sigma, area_ref)


def beta_pdf_histogram(params: BetaParams, edges: np.ndarray | None = None) -> Histogram:
    """Beta density evaluated at bin centers times bin widths, normalized.

    Midpoint quadrature is the contract; the normalizing Beta function cancels
    and is never computed.
    """
    edges = uniform_edges() if edges is None else np.asarray(edges, dtype=float)
    if edges.size < 3:
        raise ValueError("need at least two bins")
    if isinstance(params.alpha, (int, float)) and isinstance(params.beta, (int, float)):
        if params.alpha <= 0 or params.beta <= 0:
            raise InvalidParameter("alpha and beta must be positive")
    centers = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    log_c = np.log(centers)
    log_1mc = np.log1p(-centers)
    a1 = params.alpha - 1.0
    b1 = params.beta - 1.0
    if not isinstance(params.alpha, ad.Value) and not isinstance(params.beta, ad.Value):
        logp = a1 * log_c + b1 * log_1mc + np.log(widths)
        m = np.exp(logp - logp.max())
        return Histogram(edges, m / m.sum())
    logp = [a1 * float(lc) + b1 * float(l1) + float(lw)
            for lc, l1, lw in zip(log_c, log_1mc, np.log(widths))]
    shift = max(ad.value_of(v) for v in logp)
    m = [ad.exp(v - shift) for v in logp]
    inv_total = 1.0 / ad.vsum(m)
    return Histogram(edges, np.array([mk * inv_total for mk in m], dtype=object))


# --- target distribution ----------------------------------------------------


def loss_weights(losses, form: Form) -> np.ndarray:
    losses = np.asarray(losses, dtype=float)
    if form == "likelihood":
        return np.exp(-losses)
    if form == "plain":
        return losses
    raise ValueError(f"unknown form {form!r}")


def bin_index(areas, edges: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, np.asarray(areas, dtype=float), side="right") - 1
    return np.clip(idx, 0, edges.size - 2)


def target_distribution(records: Sequence[ObjectLossRecord], edges: np.ndarray | None = None,
                        form: Form = "likelihood") -> Histogram:
    """Per-bin sum of loss-derived weights, divided by the overall sum."""
    edges = uniform_edges() if edges is None else np.asarray(edges, dtype=float)
    if not records:
        raise InsufficientData("need at least one record")
    areas = np.array([r.area for r in records])
    w = loss_weights([r.loss_value for r in records], form)
    masses = np.bincount(bin_index(areas, edges), weights=w, minlength=edges.size - 1)
    total = masses.sum()
    if not total > 0:
        raise DegenerateTarget("target weights sum to zero")
    return Histogram(edges, masses / total)


# --- Wasserstein ------------------------------------------------------------


def wasserstein_1d(p: Histogram, q: Histogram):
    """W1 between two histograms on shared bins, mass placed at bin centers.

    Computed as the sum over adjacent center gaps of |CDF_p - CDF_q|; on
    uniform bins the gap equals the bin width.
    """
    _same_support(p, q)
    gaps = np.diff(p.centers)
    cp = cq = 0.0
    terms = []
    for k in range(p.k - 1):
        cp = cp + p.masses[k]
        cq = cq + q.masses[k]
        terms.append(abs(cp - cq) * float(gaps[k]))
    return ad.vsum(terms)


# --- xi correlation ---------------------------------------------------------


def xi_correlation(x, y, tie_seed=0) -> float:
    """Chatterjee's xi_n with random tie-breaking in x.

    Uses the no-ties denominator n^2 - 1 when y has no ties and the general
    2 * sum l_i (n - l_i) otherwise. Numerator and denominator are kept as
    integers so the final division is correctly rounded. If y is constant the
    coefficient is defined as 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if y.size != n:
        raise ValueError("x and y differ in length")
    if n < 2:
        raise InsufficientData("xi correlation needs at least 2 points")
    rng = tie_seed if isinstance(tie_seed, np.random.Generator) else np.random.default_rng(tie_seed)
    order = np.lexsort((rng.random(n), x))
    ys = y[order]
    sorted_y = np.sort(ys)
    r = np.searchsorted(sorted_y, ys, side="right").astype(np.int64)
    s = int(np.abs(np.diff(r)).sum())
    if np.unique(y).size == n:
        return (n * n - 1 - 3 * s) / (n * n - 1)
    l = (n - np.searchsorted(sorted_y, ys, side="left")).astype(np.int64)
    d2 = 2 * int((l * (n - l)).sum())
    if d2 == 0:
        return 0.0
    return (d2 - n * s) / d2


# --- smoothing and distribution loss ----------------------------------------


def lpf(lambda_coef: float, x_prime: Histogram, x: Histogram) -> Histogram:
    """lambda * x_prime + (1 - lambda) * x, renormalized; endpoints return inputs as-is.

    Either input may carry tape Values, in which case so does the output.
    """
    _same_support(x_prime, x)
    lam = min(max(float(lambda_coef), 0.0), 1.0)
    if lam == 1.0:
        return x_prime
    if lam == 0.0:
        return x
    if x_prime.masses.dtype != object and x.masses.dtype != object:
        m = lam * x_prime.values() + (1.0 - lam) * x.values()
        return Histogram(x.bin_edges, m / m.sum())
    m = [lam * a + (1.0 - lam) * b for a, b in zip(x_prime.masses, x.masses)]
    inv_total = 1.0 / ad.vsum(m)
    return Histogram(x.bin_edges, np.array([v * inv_total for v in m], dtype=object))


def lpf_coefficient(records: Sequence[ObjectLossRecord], lambda_base: float, form: Form,
                    tie_seed=0) -> float:
    """lambda_base * |xi(area, loss weight)|, clamped to [0, 1]."""
    areas = [r.area for r in records]
    w = loss_weights([r.loss_value for r in records], form)
    xi = xi_correlation(areas, w, tie_seed)
    return min(max(lambda_base * abs(xi), 0.0), 1.0)


def smoothed_target(records, params: BetaParams, edges=None, lambda_base: float = DEFAULT_LAMBDA_BASE,
                    form: Form = "likelihood", tie_seed=0, *, with_coef: bool = False):
    """Blend the measured target toward the current Beta histogram.

    The weight on the measured target is lambda_base * |xi(area, weight)|.
    The Beta component keeps whatever gradient ``params`` carry; the measured
    part is a constant.
    """
    edges = uniform_edges() if edges is None else np.asarray(edges, dtype=float)
    t_loc = target_distribution(records, edges, form)
    coef = lpf_coefficient(records, lambda_base, form, tie_seed)
    out = lpf(coef, t_loc, beta_pdf_histogram(params, edges))
    return (out, coef) if with_coef else out


def distribution_loss(records, params: BetaParams, edges=None, lambda_base: float = DEFAULT_LAMBDA_BASE,
                      form: Form = "likelihood", tie_seed=0, *, target: Histogram | None = None):
    """Wasserstein distance from the Beta histogram to the smoothed target.

    Because the smoothed target contains the Beta histogram itself, on shared
    bins this equals ``coef * W(beta, T_loc)``: the xi gate scales how hard the
    Beta is pulled toward the measured target. Pass ``target`` to use a fixed
    target instead.
    """
    edges = uniform_edges() if edges is None else np.asarray(edges, dtype=float)
    if target is None:
        target = smoothed_target(records, params, edges, lambda_base, form, tie_seed)
    return wasserstein_1d(beta_pdf_histogram(params, edges), target)


# --- loss weighting ---------------------------------------------------------


def coupled_weights(cls_scalar, loc_scalar, lambdas: LossWeights) -> tuple[float, float]:
    """Effective scale/dist weights: (detached cls + detached loc) * base weight."""
    coupling = ad.value_of(cls_scalar) + ad.value_of(loc_scalar)
    return coupling * lambdas.scale, coupling * lambdas.dist


def weighted_total_loss(cls_scalar, loc_scalar, scale_loss_val, dist_loss_val, lambdas: LossWeights):
    lam_scale, lam_dist = coupled_weights(cls_scalar, loc_scalar, lambdas)
    return (lambdas.cls * cls_scalar + lambdas.loc * loc_scalar
            + lam_scale * scale_loss_val + lam_dist * dist_loss_val)
