"""Scale-factor range arithmetic, the boundary-aware target sigmoid and
resolution rounding."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .autodiff import logistic, max_const

DEFAULT_STEEPNESS = math.log(99.0)
TAU_MIN = 0.2
PRESETS = {"S": 1.25, "M": 1.50, "B": 1.75, "L": 2.00, "H": 2.25}


class InvalidBoundaries(ValueError):
    pass


@dataclass(frozen=True)
class ScaleConfig:
    tau_min: float = TAU_MIN
    tau_max: float = PRESETS["M"]

    def __post_init__(self):
        if not (0 < self.tau_min < self.tau_max):
            raise ValueError(f"need 0 < tau_min < tau_max, got {self.tau_min}, {self.tau_max}")

    @classmethod
    def preset(cls, name: str, tau_min: float = TAU_MIN) -> "ScaleConfig":
        try:
            return cls(tau_min, PRESETS[name.upper()])
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None

    @property
    def ratio(self) -> float:
        return self.tau_min / self.tau_max

    @property
    def span(self) -> float:
        return self.tau_max - self.tau_min


@dataclass(frozen=True)
class Boundaries:
    """Lower/upper object-area thresholds in normalized units.

    ``area_ref`` optionally records the pixel area the bounds were normalized by.
    """

    lower: float
    upper: float
    area_ref: float | None = None

    def __post_init__(self):
        if not (0 <= self.lower < self.upper):
            raise InvalidBoundaries(f"need 0 <= lower < upper, got {self.lower}, {self.upper}")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.upper - self.lower)

    def in_pixels(self) -> tuple[float, float]:
        if self.area_ref is None:
            raise ValueError("no area_ref recorded")
        return self.lower * self.area_ref, self.upper * self.area_ref


@dataclass(frozen=True)
class Resolution:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"resolution must be positive, got {self.width}x{self.height}")

    @property
    def area(self) -> int:
        return self.width * self.height


def clamp_scale_factor(phi_raw, cfg: ScaleConfig):
    """max(logistic(phi_raw) * tau_max, tau_min); works on floats and Values."""
    return max_const(logistic(phi_raw) * cfg.tau_max, cfg.tau_min)


def modified_sigmoid(area: float, b: Boundaries, steepness: float = DEFAULT_STEEPNESS) -> float:
    """Target up-scaling probability for a normalized area.

    1 below ``b.lower``, 0 above ``b.upper``; in between the bounds are mapped
    affinely onto [-1, 1] and passed through logistic(-steepness * z), so the
    default steepness gives 0.99 / 0.5 / 0.01 at lower / midpoint / upper.
    """
    if b.upper == b.lower:
        raise InvalidBoundaries("degenerate boundaries")
    if steepness <= 0:
        raise ValueError("steepness must be positive")
    if area > b.upper:
        return 0.0
    if area < b.lower:
        return 1.0
    z = (area - b.midpoint) / b.half_width
    return logistic(-steepness * z)


def target_up_probability(width: float, height: float, b: Boundaries, area_ref: float,
                          steepness: float = DEFAULT_STEEPNESS) -> float:
    if width <= 0 or height <= 0:
        raise ValueError("object width and height must be positive")
    if area_ref <= 0:
        raise ValueError("area_ref must be positive")
    return modified_sigmoid((width * height) / area_ref, b, steepness)


def round_to_multiple(x: float, step: int = 8) -> int:
    """Nearest positive multiple of ``step``; exact halves go to the even multiple."""
    return max(step, step * round(x / step))


def scale_resolution(res: Resolution, phi: float) -> Resolution:
    """Scale both sides by ``phi``, snapping the shorter side to a multiple of 8.

    The longer side follows the effective factor implied by the snapped short
    side, so the aspect ratio is kept to within a pixel.
    """
    if phi <= 0:
        raise ValueError("scale factor must be positive")
    short, long_ = sorted((res.width, res.height))
    new_short = round_to_multiple(phi * short)
    new_long = max(new_short, round(long_ * new_short / short))
    if res.width <= res.height:
        return Resolution(new_short, new_long)
    return Resolution(new_long, new_short)


def effective_area_factor(res: Resolution, scaled: Resolution) -> float:
    """Ratio of scaled to nominal pixel area (the realised phi squared)."""
    return scaled.area / res.area
