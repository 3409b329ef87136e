"""Side-looking SAR viewing geometry on flat ground.

The sensor looks along +x (ground range). A world point (x, y, z) maps to
slant range ``x sin(theta) - z cos(theta)`` and azimuth ``y``; both are then
divided by the pixel spacing. Vertical lines therefore stay on one azimuth
row and elevated points move toward near range (layover).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SensorModel:
    """Incidence angle (degrees) and pixel spacings (meters) of a slant-range image."""

    theta: float
    spacing_rg: float
    spacing_az: float
    rg_origin: float = 0.0
    az_origin: float = 0.0
    _sin: float = field(init=False, repr=False, compare=False)
    _cos: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        vals = (self.theta, self.spacing_rg, self.spacing_az, self.rg_origin, self.az_origin)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("sensor parameters must be finite")
        if not 0.0 < self.theta < 90.0:
            raise ValueError(f"incidence angle must lie in (0, 90) degrees, got {self.theta}")
        if self.spacing_rg <= 0 or self.spacing_az <= 0:
            raise ValueError("pixel spacings must be positive")
        rad = math.radians(self.theta)
        object.__setattr__(self, "_sin", math.sin(rad))
        object.__setattr__(self, "_cos", math.cos(rad))

    @property
    def sin_theta(self) -> float:
        return self._sin

    @property
    def cos_theta(self) -> float:
        return self._cos

    def to_dict(self) -> dict:
        return {
            "theta_deg": self.theta,
            "spacing_rg_m": self.spacing_rg,
            "spacing_az_m": self.spacing_az,
            "rg_origin_px": self.rg_origin,
            "az_origin_px": self.az_origin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorModel":
        return cls(
            theta=float(d["theta_deg"]),
            spacing_rg=float(d["spacing_rg_m"]),
            spacing_az=float(d["spacing_az_m"]),
            rg_origin=float(d.get("rg_origin_px", 0.0)),
            az_origin=float(d.get("az_origin_px", 0.0)),
        )


def project(x, y, z, sensor: SensorModel):
    """Map world coordinates (meters) to continuous (rg, az) pixel coordinates.

    Accepts scalars or arrays; arrays broadcast.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
        raise ValueError("world coordinates must be finite")
    rg = (x * sensor.sin_theta - z * sensor.cos_theta) / sensor.spacing_rg + sensor.rg_origin
    az = y / sensor.spacing_az + sensor.az_origin
    if rg.ndim == 0:
        return float(rg), float(az)
    return rg, az


def ground_extent_px(d: float, sensor: SensorModel) -> float:
    """Slant-range pixel extent of a ground segment of length ``d`` along x."""
    return d * sensor.sin_theta / sensor.spacing_rg


def layover_px(h: float, sensor: SensorModel) -> float:
    """Layover length in range pixels of a wall of height ``h`` meters."""
    if not math.isfinite(h) or h < 0:
        raise ValueError(f"height must be finite and non-negative, got {h}")
    return h * sensor.cos_theta / sensor.spacing_rg


def shadow_px(h: float, sensor: SensorModel) -> float:
    """Slant-range extent of the ground shadow cast behind a wall of height ``h``."""
    if not math.isfinite(h) or h < 0:
        raise ValueError(f"height must be finite and non-negative, got {h}")
    return h * sensor.sin_theta * math.tan(math.radians(sensor.theta)) / sensor.spacing_rg


def height_from_layover(length_m: float, sensor: SensorModel | float) -> float:
    """Building height (meters) from a layover length given in meters.

    ``sensor`` may also be a bare incidence angle in degrees; unlike a
    SensorModel this accepts 0 (nadir), where layover equals height.
    """
    if not math.isfinite(length_m) or length_m < 0:
        raise ValueError(f"layover length must be finite and non-negative, got {length_m}")
    if isinstance(sensor, SensorModel):
        cos = sensor.cos_theta
    else:
        if not 0.0 <= sensor < 90.0:
            raise ValueError(f"incidence angle must lie in [0, 90) degrees, got {sensor}")
        cos = math.cos(math.radians(sensor))
    return length_m / cos
