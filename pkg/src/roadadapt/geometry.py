"""Surface-normal images from depth maps and pinhole camera intrinsics.

A depth map is back-projected to a camera-frame point cloud, per-pixel normals
are taken as the cross product of central-difference tangents, oriented toward
the camera, and encoded as a 3-channel image via (n + 1) / 2. Invalid pixels
(missing depth, border ring, degenerate stencils) encode exactly (0, 0, 0);
that point is provably outside the image of the unit sphere under the
encoding, so validity survives an 8-bit round trip.

Camera frame: x right, y down, z forward (optical axis). Depth is the z
coordinate in meters. On disk depth is 16-bit integer millimeters.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

# Cross products with norm below this are treated as degenerate stencils.
DEGENERATE_NORM = 1e-12


@dataclasses.dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        try:
            return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]))
        except KeyError as exc:
            raise ConfigError(f"intrinsics missing key {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CameraIntrinsics":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclasses.dataclass
class PointMap:
    """Camera-frame back-projection of a depth map."""

    points: np.ndarray  # (3, H, W) float64, zeros where invalid
    validity: np.ndarray  # (H, W) bool


@dataclasses.dataclass
class SurfaceNormalImage:
    """Unit normals encoded into [0, 1] via (n + 1) / 2."""

    channels: np.ndarray  # (3, H, W) float64 in [0, 1], exactly 0 where invalid
    validity: np.ndarray  # (H, W) bool

    def decode(self) -> np.ndarray:
        """Return (3, H, W) unit normals; invalid pixels decode to (0, 0, 0)."""
        normals = 2.0 * self.channels - 1.0
        normals[:, ~self.validity] = 0.0
        return normals


def depth_validity(depth: np.ndarray) -> np.ndarray:
    """Valid depth is finite and strictly positive; zero marks missing depth."""
    return np.isfinite(depth) & (depth > 0)


def backproject(depth: np.ndarray, intrinsics: CameraIntrinsics) -> PointMap:
    """Lift a (H, W) metric depth map to camera-frame 3-D points.

    X = (u - cx) * Z / fx, Y = (v - cy) * Z / fy, Z = depth(u, v).
    Pixels with missing depth stay invalid and carry the zero point.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ConfigError(f"depth must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    valid = depth_validity(depth)
    z = np.where(valid, depth, 0.0)
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    return PointMap(points=np.stack([x, y, z]), validity=valid)


def estimate_normals(pm: PointMap) -> SurfaceNormalImage:
    """Per-pixel unit normals of the back-projected surface.

    Tangents are central differences of the point field along u and v; the
    normal is their normalized cross product, flipped so it faces the camera
    (n . p <= 0). A pixel is valid only if it and its 4-neighborhood are valid
    and it is not on the border ring. Central differences of points sampled
    from a plane lie in that plane, so the estimator is exact on planes.
    """
    pts = pm.points
    valid = pm.validity
    _, h, w = pts.shape
    channels = np.zeros((3, h, w), dtype=np.float64)
    validity = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return SurfaceNormalImage(channels=channels, validity=validity)

    tang_u = pts[:, 1:-1, 2:] - pts[:, 1:-1, :-2]  # (3, H-2, W-2)
    tang_v = pts[:, 2:, 1:-1] - pts[:, :-2, 1:-1]
    normal = np.cross(tang_u, tang_v, axisa=0, axisb=0, axisc=0)
    norm = np.linalg.norm(normal, axis=0)
    degenerate = norm < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norm)
    normal = normal / safe

    # Flip normals that point away from the camera.
    center = pts[:, 1:-1, 1:-1]
    toward = np.sum(normal * center, axis=0)
    normal = np.where(toward > 0, -normal, normal)

    stencil_ok = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )
    interior_valid = stencil_ok & ~degenerate

    encoded = (normal + 1.0) / 2.0
    encoded[:, ~interior_valid] = 0.0
    channels[:, 1:-1, 1:-1] = encoded
    validity[1:-1, 1:-1] = interior_valid
    return SurfaceNormalImage(channels=channels, validity=validity)


def depth_to_normals(depth: np.ndarray, intrinsics: CameraIntrinsics) -> SurfaceNormalImage:
    """Convenience composition of backproject and estimate_normals."""
    return estimate_normals(backproject(depth, intrinsics))


def encode_to_uint8(sn: SurfaceNormalImage) -> np.ndarray:
    """Quantize the encoding to a (H, W, 3) uint8 image for the on-disk cache.

    Valid encodings stay at Euclidean distance >= 0.36 from the origin, so a
    quantized valid pixel can never collide with the all-zero invalid code.
    """
    img = np.rint(np.transpose(sn.channels, (1, 2, 0)) * 255.0).astype(np.uint8)
    img[~sn.validity] = 0
    return img


def decode_from_uint8(img: np.ndarray) -> SurfaceNormalImage:
    """Invert encode_to_uint8, restoring the unit-norm invariant.

    Quantization perturbs the norm by up to ~3e-3, so decoded vectors are
    re-normalized and re-encoded before being returned.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ConfigError(f"normal cache image must be (H, W, 3), got {img.shape}")
    validity = np.any(img != 0, axis=2)
    channels = np.transpose(img.astype(np.float64) / 255.0, (2, 0, 1))
    normals = 2.0 * channels - 1.0
    norm = np.linalg.norm(normals, axis=0)
    norm = np.where(validity & (norm > 0), norm, 1.0)
    normals = normals / norm
    channels = (normals + 1.0) / 2.0
    channels[:, ~validity] = 0.0
    return SurfaceNormalImage(channels=channels, validity=validity)
