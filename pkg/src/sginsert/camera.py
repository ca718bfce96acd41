"""Pinhole camera: pose from position/look-at/up, pixel-center ray generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import normalize


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov_y_deg: float = 50.0
    width: int = 640
    height: int = 360

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        self.up = np.asarray(self.up, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be positive")

    def basis(self):
        fwd = normalize(self.look_at - self.position)
        side = np.cross(fwd, self.up)
        if np.linalg.norm(side) < 1e-9:
            side = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        side = normalize(side)
        up = np.cross(side, fwd)
        return fwd, side, up

    def rays(self, jitter=None):
        """Pixel-center rays: (origins (H*W,3), dirs (H*W,3)), row-major.

        jitter, if given, is an (H, W, 2) array of offsets in [0,1) replacing
        the 0.5 pixel centering.
        """
        fwd, side, up = self.basis()
        h = np.tan(np.deg2rad(self.fov_y_deg) / 2.0)
        w = h * self.width / self.height
        ys, xs = np.meshgrid(
            np.arange(self.height, dtype=np.float64),
            np.arange(self.width, dtype=np.float64),
            indexing="ij",
        )
        if jitter is None:
            px = xs + 0.5
            py = ys + 0.5
        else:
            px = xs + jitter[..., 0]
            py = ys + jitter[..., 1]
        ndc_x = px / self.width * 2.0 - 1.0
        ndc_y = 1.0 - py / self.height * 2.0
        d = (
            fwd[None, None, :]
            + ndc_x[..., None] * w * side[None, None, :]
            + ndc_y[..., None] * h * up[None, None, :]
        )
        d = normalize(d).reshape(-1, 3)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d

    def to_dict(self):
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "fov_y_deg": self.fov_y_deg,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["position"], dtype=np.float64),
            np.array(d["look_at"], dtype=np.float64),
            np.array(d.get("up", [0.0, 0.0, 1.0]), dtype=np.float64),
            float(d.get("fov_y_deg", 50.0)),
            int(d.get("width", 640)),
            int(d.get("height", 360)),
        )
