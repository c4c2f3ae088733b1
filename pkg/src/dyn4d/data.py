"""Frame-sequence datasets, cameras, and ray generation.

On-disk layout of a dataset directory:

    root/manifest.json          frame list, camera parameters, AABB
    root/rgb/frame_%04d.png     8-bit color, loaded as float32 / 255
    root/disp/frame_%04d.f32    raw little-endian float32, row-major
    root/mask/frame_%04d.png    optional covisibility mask, >127 = covisible

Cameras look down their local -z axis; a pixel (row, col) maps to the
camera-frame direction ((col-cx)/fx, -(row-cy)/fy, -1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image


class DatasetError(RuntimeError):
    """A dataset file is missing or unreadable."""


class ValidationError(ValueError):
    """A loaded value violates a dataset invariant."""


def read_image_png(path: Path) -> np.ndarray:
    """Load an 8-bit PNG as float32 in [0,1] (plain /255, no gamma)."""
    if not path.is_file():
        raise DatasetError(f"missing file: {path.name}")
    arr = np.asarray(Image.open(path))
    return arr.astype(np.float32) / 255.0


def write_image_png(path: Path, values: np.ndarray) -> None:
    """Write float values in [0,1] as 8-bit PNG (clamp, round half to even)."""
    q = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path)


def read_raw_f32(path: Path, height: int, width: int) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file: {path.name}")
    data = np.fromfile(path, dtype="<f4")
    if data.size != height * width:
        raise ValidationError(
            f"{path.name}: expected {height * width} float32 values, got {data.size}"
        )
    return data.reshape(height, width)


def write_raw_f32(path: Path, values: np.ndarray) -> None:
    np.ascontiguousarray(values, dtype="<f4").tofile(path)


@dataclass
class CameraPose:
    """Pinhole camera with world-from-camera rotation and camera center."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3) world-from-camera, orthonormal, det +1
    translation: np.ndarray  # (3,) camera center in world units
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 < self.near < self.far):
            raise ValidationError(f"require 0 < near < far, got ({self.near}, {self.far})")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-5:
            raise ValidationError(f"rotation is not orthonormal (max error {err:.2e})")
        if np.linalg.det(self.rotation) < 0:
            raise ValidationError("rotation has negative determinant")

    def optical_axis(self) -> np.ndarray:
        """World-space viewing direction (camera -z)."""
        return -self.rotation[:, 2]

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
            width=int(d["width"]), height=int(d["height"]),
            near=float(d["near"]), far=float(d["far"]),
        )


@dataclass
class FrameRecord:
    """One observed video frame with its camera and depth supervision."""

    rgb: np.ndarray  # (H,W,3) float32 in [0,1]
    disparity: np.ndarray  # (H,W) float32, affine-invariant, finite
    timestamp: float  # normalized video time in [0,1]
    camera: CameraPose
    covis_mask: Optional[np.ndarray] = None  # (H,W) bool, None = all valid

    def validate(self) -> None:
        h, w = self.camera.height, self.camera.width
        if self.rgb.shape != (h, w, 3):
            raise ValidationError(f"rgb shape {self.rgb.shape} != camera ({h}, {w}, 3)")
        if self.disparity.shape != (h, w):
            raise ValidationError(
                f"disparity shape {self.disparity.shape} does not match rgb {(h, w)}"
            )
        if self.rgb.min() < 0.0 or self.rgb.max() > 1.0:
            raise ValidationError("rgb values outside [0,1]")
        if not np.isfinite(self.disparity).all():
            raise ValidationError("disparity contains NaN/Inf")
        if not (0.0 <= self.timestamp <= 1.0):
            raise ValidationError(f"timestamp {self.timestamp} outside [0,1]")
        if self.covis_mask is not None and self.covis_mask.shape != (h, w):
            raise ValidationError("covis mask shape mismatch")


@dataclass
class SceneDataset:
    """Ordered frames plus the world-space bounds the fields live in."""

    frames: list
    aabb_min: np.ndarray  # (3,)
    aabb_max: np.ndarray  # (3,)

    def __post_init__(self):
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64).reshape(3)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64).reshape(3)

    @property
    def aabb_diagonal(self) -> float:
        return float(np.linalg.norm(self.aabb_max - self.aabb_min))

    def validate(self) -> None:
        if not np.all(self.aabb_max - self.aabb_min > 0):
            raise ValidationError("aabb must have positive extent on every axis")
        times = [f.timestamp for f in self.frames]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValidationError("frames are not sorted by timestamp")
        for i, frame in enumerate(self.frames):
            frame.validate()
            if not camera_sees_aabb(frame.camera, self.aabb_min, self.aabb_max):
                raise ValidationError(f"frame {i}: camera frustum does not intersect the aabb")


@dataclass
class RayBundle:
    """Per-pixel rays with their AABB-clipped parameter intervals."""

    origins: np.ndarray  # (N,3)
    directions: np.ndarray  # (N,3) unit norm
    t_near: np.ndarray  # (N,)
    t_far: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool; False means the ray misses the AABB

    def __len__(self) -> int:
        return self.origins.shape[0]


def ray_aabb_intersect(
    origins: np.ndarray,
    directions: np.ndarray,
    aabb_min: np.ndarray,
    aabb_max: np.ndarray,
) -> tuple:
    """Slab-method intersection. Returns (t_enter, t_exit, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (aabb_min[None, :] - origins) * inv
        t1 = (aabb_max[None, :] - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # axis-parallel rays: the slab constraint is satisfied iff the origin is inside
    par = directions == 0.0
    inside = (origins >= aabb_min[None, :]) & (origins <= aabb_max[None, :])
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_enter = lo.max(axis=1)
    t_exit = hi.min(axis=1)
    hit = (t_exit > t_enter) & (t_exit > 0)
    return t_enter, t_exit, hit


def generate_rays(
    camera: CameraPose,
    pixel_coords: Sequence,
    aabb_min: np.ndarray,
    aabb_max: np.ndarray,
) -> RayBundle:
    """Rays through the given (row, col) pixels, intervals clipped to the AABB.

    Rays that miss the AABB (or whose intersection falls outside the camera
    near/far range) come back with valid=False and an empty interval.
    """
    coords = np.asarray(pixel_coords, dtype=np.float64).reshape(-1, 2)
    rows, cols = coords[:, 0], coords[:, 1]
    dirs_cam = np.stack(
        [(cols - camera.cx) / camera.fx, -(rows - camera.cy) / camera.fy, -np.ones_like(rows)],
        axis=-1,
    )
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.translation, dirs.shape).copy()

    t_enter, t_exit, hit = ray_aabb_intersect(origins, dirs, np.asarray(aabb_min), np.asarray(aabb_max))
    t_near = np.maximum(t_enter, camera.near)
    t_far = np.minimum(t_exit, camera.far)
    valid = hit & (t_far > t_near)
    t_near = np.where(valid, t_near, 0.0)
    t_far = np.where(valid, t_far, 0.0)
    return RayBundle(origins, dirs, t_near, t_far, valid)


def project_point(camera: CameraPose, points: np.ndarray) -> tuple:
    """Project world points to (row, col); returns (rows, cols, in_front)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p_cam = (p - camera.translation) @ camera.rotation
    z = p_cam[:, 2]
    in_front = z < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = camera.cx + camera.fx * p_cam[:, 0] / (-z)
        rows = camera.cy - camera.fy * p_cam[:, 1] / (-z)
    return rows, cols, in_front


def camera_sees_aabb(
    camera: CameraPose, aabb_min: np.ndarray, aabb_max: np.ndarray, grid: int = 5
) -> bool:
    """True if any ray on a grid of sample pixels intersects the AABB."""
    rr = np.linspace(0, camera.height - 1, grid)
    cc = np.linspace(0, camera.width - 1, grid)
    coords = [(r, c) for r in rr for c in cc]
    rays = generate_rays(camera, coords, aabb_min, aabb_max)
    return bool(rays.valid.any())


def pixel_grid(height: int, width: int) -> np.ndarray:
    """All (row, col) pixel coordinates in row-major order, shape (H*W, 2)."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=-1).astype(np.float64)


def sample_virtual_camera(
    dataset: SceneDataset, rng_seed: int, rho: float = 0.1
) -> CameraPose:
    """Perturbed copy of a randomly picked dataset camera.

    The camera center moves by a uniform sample in a ball of radius
    rho * (AABB diagonal); the rotation is re-aimed so the optical axis
    passes through the original look-at point (the AABB center projected
    onto the original axis). Intrinsics are copied unchanged.
    """
    if not dataset.frames:
        raise ValidationError("dataset has no frames")
    rng = np.random.default_rng(rng_seed)
    base = dataset.frames[int(rng.integers(len(dataset.frames)))].camera
    radius = rho * dataset.aabb_diagonal
    if radius == 0.0:
        return CameraPose.from_dict(base.to_dict())

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset = direction * radius * rng.uniform() ** (1.0 / 3.0)
    center = base.translation + offset

    aabb_center = 0.5 * (dataset.aabb_min + dataset.aabb_max)
    axis = base.optical_axis()
    dist = max(float((aabb_center - base.translation) @ axis), 1e-6)
    look_at = base.translation + dist * axis

    forward = look_at - center
    forward /= np.linalg.norm(forward)
    up = base.rotation[:, 1]
    z_axis = -forward
    x_axis = np.cross(up, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.stack([x_axis, y_axis, z_axis], axis=-1)

    return CameraPose(
        fx=base.fx, fy=base.fy, cx=base.cx, cy=base.cy,
        rotation=rotation, translation=center,
        width=base.width, height=base.height, near=base.near, far=base.far,
    )


def _frame_paths(index: int) -> dict:
    return {
        "rgb": f"rgb/frame_{index:04d}.png",
        "disparity": f"disp/frame_{index:04d}.f32",
        "mask": f"mask/frame_{index:04d}.png",
    }


def save_dataset(dataset: SceneDataset, root_path) -> None:
    """Write the dataset in the on-disk layout described in the module docstring."""
    root = Path(root_path)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "disp").mkdir(exist_ok=True)
    if any(f.covis_mask is not None for f in dataset.frames):
        (root / "mask").mkdir(exist_ok=True)

    entries = []
    for i, frame in enumerate(dataset.frames):
        paths = _frame_paths(i)
        write_image_png(root / paths["rgb"], frame.rgb)
        write_raw_f32(root / paths["disparity"], frame.disparity)
        entry = {
            "rgb": paths["rgb"],
            "disparity": paths["disparity"],
            "timestamp": float(frame.timestamp),
            "camera": frame.camera.to_dict(),
        }
        if frame.covis_mask is not None:
            write_image_png(root / paths["mask"], frame.covis_mask.astype(np.float32))
            entry["mask"] = paths["mask"]
        entries.append(entry)

    manifest = {
        "aabb": {
            "min": [float(v) for v in dataset.aabb_min],
            "max": [float(v) for v in dataset.aabb_max],
        },
        "frames": entries,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(root_path) -> SceneDataset:
    """Load a dataset directory; validates every invariant before returning."""
    root = Path(root_path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError("missing file: manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    entries = manifest["frames"]
    n = len(entries)
    frames = []
    for i, entry in enumerate(entries):
        camera = CameraPose.from_dict(entry["camera"])
        rgb = read_image_png(root / entry["rgb"])
        if rgb.ndim == 2:
            rgb = np.repeat(rgb[:, :, None], 3, axis=2)
        disparity = read_raw_f32(root / entry["disparity"], camera.height, camera.width)
        if rgb.shape[:2] != disparity.shape:
            raise ValidationError(
                f"frame {i}: rgb shape {rgb.shape[:2]} != disparity shape {disparity.shape}"
            )
        mask = None
        if entry.get("mask"):
            mask = read_image_png(root / entry["mask"]) > (127.5 / 255.0)
        if "timestamp" in entry:
            timestamp = float(entry["timestamp"])
        else:
            # integer frame ids are rescaled to [0,1] by index
            timestamp = float(entry["frame_id"]) / max(n - 1, 1)
        frames.append(FrameRecord(rgb, disparity, timestamp, camera, mask))

    frames.sort(key=lambda f: f.timestamp)
    dataset = SceneDataset(
        frames,
        np.asarray(manifest["aabb"]["min"], dtype=np.float64),
        np.asarray(manifest["aabb"]["max"], dtype=np.float64),
    )
    dataset.validate()
    return dataset
