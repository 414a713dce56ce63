"""Camera models and the multi-scale feature pyramids consumed by the encoder."""
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from gaussfusion.core.errors import ContractError, DimensionError
from gaussfusion.core.ops import linear
from gaussfusion.core.tensor import NumericArray, constant, lift, stack, where
from gaussfusion.scene.gaussians import SceneBounds

DEPTH_EPS = 1e-6


@dataclass
class CameraModel:
    """Pinhole camera as a 3x4 projection from homogeneous ego-frame points.

    The projection maps (x, y, z, 1) to (col * w, row * w, w); pixel centers sit
    at integer (row, col) and points with w <= 0 are invalid.
    """
    projection: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=float)
        if self.projection.shape != (3, 4):
            raise DimensionError(f"camera projection must be 3x4, got {self.projection.shape}")
        col, row = self.principal_point
        if not (0.0 <= col <= self.width - 1 and 0.0 <= row <= self.height - 1):
            raise ContractError(f"principal point ({col:.2f}, {row:.2f}) outside a {self.height}x{self.width} image")

    @property
    def principal_point(self) -> Tuple[float, float]:
        """(col, row) of the principal point, recovered from M M^T with M = K R."""
        m = self.projection[:, :3]
        a = m @ m.T
        return float(a[0, 2] / a[2, 2]), float(a[1, 2] / a[2, 2])

    @classmethod
    def looking(cls, yaw: float, height: int, width: int, fov: float = math.radians(90.0),
                mount_height: float = 1.5, position: Sequence[float] = (0.0, 0.0)) -> 'CameraModel':
        """Level camera at ``position`` and ``mount_height`` facing ``yaw`` (radians from +x)."""
        focal = 0.5 * width / math.tan(0.5 * fov)
        intrinsics = np.array([[focal, 0.0, (width - 1) / 2.0],
                               [0.0, focal, (height - 1) / 2.0],
                               [0.0, 0.0, 1.0]])
        forward = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        rotation = np.stack([right, down, forward])
        center = np.array([position[0], position[1], mount_height])
        extrinsics = np.concatenate([rotation, (-rotation @ center)[:, None]], axis=1)
        return cls(intrinsics @ extrinsics, height, width)

    def project_numpy(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, cols, depth) of (..., 3) points; rows/cols are NaN-free only where depth > 0."""
        hom = np.asarray(points) @ self.projection[:, :3].T + self.projection[:, 3]
        depth = hom[..., 2]
        safe = np.where(depth > DEPTH_EPS, depth, 1.0)
        return hom[..., 1] / safe, hom[..., 0] / safe, depth

    def project(self, points) -> Tuple[NumericArray, np.ndarray]:
        """Differentiable projection of (..., 3) points.

        Returns:
            Normalized (row, col) reference coordinates in [0, 1]^2 for in-image
            points, shape (..., 2), and the validity mask (..., ).
        """
        points = lift(points)
        hom = linear(points, constant(self.projection[:, :3].T), constant(self.projection[:, 3]))
        depth = hom[..., 2]
        in_front = depth.values > DEPTH_EPS
        safe = where(in_front, depth, 1.0)
        row = hom[..., 1] / safe
        col = hom[..., 0] / safe
        valid = (in_front & (row.values >= -0.5) & (row.values <= self.height - 0.5)
                 & (col.values >= -0.5) & (col.values <= self.width - 0.5))
        ref = stack([(row + 0.5) * (1.0 / self.height), (col + 0.5) * (1.0 / self.width)], axis=-1)
        return ref, valid

    def to_dict(self) -> dict:
        return {'projection': self.projection.tolist(), 'height': self.height, 'width': self.width}


@dataclass
class BevFeaturePyramid:
    """n_s BEV maps (d, H_l, W_l); rows run along x, columns along y."""
    levels: List[NumericArray]
    bounds: SceneBounds

    def __post_init__(self):
        if not self.levels:
            raise ContractError("a feature pyramid needs at least one level")
        dims = {lvl.shape[0] for lvl in self.levels}
        if len(dims) != 1 or any(lvl.ndim != 3 for lvl in self.levels):
            raise DimensionError(f"BEV levels must be (d, H, W) with a shared d, got {[l.shape for l in self.levels]}")

    @property
    def dim(self) -> int:
        return self.levels[0].shape[0]

    def normalize(self, xy):
        return self.bounds.normalize(xy)


@dataclass
class ImageFeaturePyramid:
    """n_s image maps (N, d, H_l, W_l) for N cameras."""
    levels: List[NumericArray]
    cameras: List[CameraModel] = field(default_factory=list)

    def __post_init__(self):
        if not self.levels:
            raise ContractError("a feature pyramid needs at least one level")
        views = {lvl.shape[0] for lvl in self.levels}
        dims = {lvl.shape[1] for lvl in self.levels}
        if len(views) != 1 or len(dims) != 1 or any(lvl.ndim != 4 for lvl in self.levels):
            raise DimensionError(f"image levels must be (N, d, H, W) with shared N and d, "
                                 f"got {[l.shape for l in self.levels]}")
        if self.cameras and len(self.cameras) != self.views:
            raise DimensionError(f"{len(self.cameras)} cameras for {self.views} views")

    @property
    def views(self) -> int:
        return self.levels[0].shape[0]

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]
