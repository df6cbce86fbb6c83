import numpy as np
import pytest

from roadadapt.geometry import CameraIntrinsics


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=40.0, fy=40.0, cx=23.5, cy=23.5)


def plane_depth(
    normal: np.ndarray,
    offset: float,
    intrinsics: CameraIntrinsics,
    shape: tuple[int, int],
    z_max: float = 100.0,
) -> np.ndarray:
    """Depth map of the plane {p : normal . p = offset}; 0 where no valid hit.

    Pixels whose ray is (near-)parallel to the plane or whose hit lies behind
    the camera or beyond z_max get invalid depth.
    """
    h, w = shape
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    ray = np.stack(
        [
            np.broadcast_to((u - intrinsics.cx) / intrinsics.fx, shape),
            np.broadcast_to((v - intrinsics.cy) / intrinsics.fy, shape),
            np.ones(shape),
        ]
    )
    denom = np.tensordot(normal, ray, axes=(0, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = offset / denom
    valid = np.isfinite(z) & (np.abs(denom) > 1e-9) & (z > 1e-6) & (z < z_max)
    return np.where(valid, z, 0.0)
