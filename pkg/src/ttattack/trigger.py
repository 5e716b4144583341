"""Trigger operators that mark victim inputs: corner patches and a sinusoidal overlay."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

CORNERS = ("tl", "tr", "bl", "br")


@dataclass(frozen=True)
class TriggerSpec:
    """Trigger parameters plus the grid geometry a flat input is folded into.

    Flat inputs of length ``dim`` are zero-padded to ``channels*height*width``
    and viewed as (channels, height, width).
    """

    kind: str
    dim: int
    height: int
    width: int
    channels: int = 1
    fraction: float = 0.15
    corners: tuple[str, ...] = CORNERS
    fill: float = 1.0
    frequency: int = 10
    amplitude: float = 16 / 255

    def __post_init__(self):
        if self.kind not in ("patch", "sig", "none"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if int(self.frequency) != self.frequency or self.frequency <= 0:
            raise ValueError("frequency must be a positive integer")
        if not 0 < self.fraction <= 0.5:
            raise ValueError("patch fraction must lie in (0, 0.5]")
        if any(c not in CORNERS for c in self.corners):
            raise ValueError(f"corners must be drawn from {CORNERS}")
        if self.dim > self.channels * self.height * self.width:
            raise ValueError("grid too small for input dimension")
        object.__setattr__(self, "corners", tuple(self.corners))

    @classmethod
    def for_dim(cls, kind: str, dim: int, channels: int = 1, **kw) -> "TriggerSpec":
        """Smallest square grid holding ``dim`` values over ``channels``."""
        side = math.isqrt(-(-dim // channels))
        if side * side * channels < dim:
            side += 1
        return cls(kind=kind, dim=dim, height=side, width=side, channels=channels, **kw)

    @property
    def patch_side(self) -> int:
        # round first so 0.3 * 10 -> 3, not 4
        return math.ceil(round(self.fraction * min(self.height, self.width), 9))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corners"] = list(self.corners)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        d = dict(d)
        d["corners"] = tuple(d.get("corners", CORNERS))
        return cls(**d)


def patch_mask(spec: TriggerSpec) -> np.ndarray:
    """Boolean (height, width) mask of the patched pixels."""
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    s = spec.patch_side
    for corner in spec.corners:
        rows = slice(0, s) if corner[0] == "t" else slice(spec.height - s, spec.height)
        cols = slice(0, s) if corner[1] == "l" else slice(spec.width - s, spec.width)
        mask[rows, cols] = True
    return mask


def _to_grid(x: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    total = spec.channels * spec.height * spec.width
    padded = np.zeros((x.shape[0], total))
    padded[:, : spec.dim] = x
    return padded.reshape(x.shape[0], spec.channels, spec.height, spec.width)


def apply_trigger(x, spec: TriggerSpec) -> np.ndarray:
    """Apply the trigger row-wise to an (N, dim) array or a single (dim,) vector."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    if rows.ndim != 2 or rows.shape[1] != spec.dim:
        raise ValueError(f"input of shape {x.shape} does not match trigger geometry dim={spec.dim}")
    if spec.kind == "none":
        return x.copy()
    grid = _to_grid(rows, spec)
    if spec.kind == "patch":
        grid[:, :, patch_mask(spec)] = spec.fill
    else:
        cols = np.arange(spec.width)
        wave = spec.amplitude * np.sin(2 * np.pi * spec.frequency * cols / spec.width)
        grid = np.clip(grid + wave, 0.0, 1.0)
    out = grid.reshape(rows.shape[0], -1)[:, : spec.dim]
    return out[0] if single else out
