"""Landmark format registry and inter-ocular geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateAnnotationError, ValidationError

MIN_INTEROCULAR = 1e-6


@dataclass(frozen=True)
class LandmarkFormat:
    """A named landmark layout: point count and the eye index pair used for
    inter-ocular normalization."""

    name: str
    points: int
    interocular: tuple

    def validate(self) -> None:
        left, right = self.interocular
        if not (0 <= left < self.points and 0 <= right < self.points):
            raise ConfigError(
                f"format {self.name!r}: interocular indices {self.interocular} out of range "
                f"for {self.points} points"
            )
        if left == right:
            raise ConfigError(f"format {self.name!r}: interocular indices must differ")


class FormatRegistry:
    """Mutable registry of landmark formats; eye index pairs are overridable."""

    def __init__(self, formats=()):
        self._formats = {}
        for fmt in formats:
            self.register(fmt)

    def register(self, fmt: LandmarkFormat, replace: bool = False) -> None:
        fmt.validate()
        if fmt.name in self._formats and not replace:
            raise ConfigError(f"format {fmt.name!r} already registered")
        self._formats[fmt.name] = fmt

    def get(self, name: str) -> LandmarkFormat:
        try:
            return self._formats[name]
        except KeyError:
            raise ConfigError(
                f"format {name!r} not registered; known formats: "
                f"{', '.join(sorted(self._formats)) or '(none)'}"
            ) from None

    def __contains__(self, name: str) -> bool:
        return name in self._formats

    def names(self) -> list:
        return sorted(self._formats)


def default_registry() -> FormatRegistry:
    """The stock 51/68/98-point family.

    The 68-point layout uses outer eye corners (36, 45) and the 98-point
    layout (60, 72); the 51-point layout leads with two eye-center keypoints
    at indices (0, 1). All pairs can be overridden by re-registering.
    """
    return FormatRegistry(
        [
            LandmarkFormat("p51", 51, (0, 1)),
            LandmarkFormat("p68", 68, (36, 45)),
            LandmarkFormat("p98", 98, (60, 72)),
        ]
    )


def as_points(landmarks, fmt: LandmarkFormat) -> np.ndarray:
    """View a flat (2K,) annotation as (K, 2) rows of (x, y)."""
    arr = np.asarray(landmarks, dtype=np.float64).reshape(-1)
    if arr.shape[0] != 2 * fmt.points:
        raise ValidationError(
            f"annotation length {arr.shape[0]} does not match 2*{fmt.points} "
            f"for format {fmt.name!r}"
        )
    return arr.reshape(fmt.points, 2)


def interocular_distance(landmarks, fmt: LandmarkFormat) -> float:
    """Euclidean distance between the format's two eye points, in the same
    units as the coordinates. Translation of all points leaves it unchanged."""
    pts = as_points(landmarks, fmt)
    left, right = fmt.interocular
    d = float(np.linalg.norm(pts[left] - pts[right]))
    if d < MIN_INTEROCULAR:
        raise DegenerateAnnotationError(
            f"inter-ocular distance {d:.3e} below {MIN_INTEROCULAR} "
            f"for format {fmt.name!r}"
        )
    return d
