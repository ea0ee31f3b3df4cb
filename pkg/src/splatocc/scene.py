"""Synthetic multi-frame voxel scenes, surround camera rigs and projected LiDAR labels.

Scenes are described in a world voxel lattice as axis-aligned boxes. The ego
vehicle moves by whole voxels per frame, so each frame's ego-centred grid is an
exact window onto the world and static voxels agree bit-for-bit across frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GridGeometry, check_rigid, invert_rigid, transform_points, translation
from .metrics import cast_rays, fan_directions

INVALID_LABEL = -1


class SceneCapacityError(ValueError):
    """The recipe asks for more objects than the grid can hold."""


@dataclass
class VoxelGrid:
    geometry: GridGeometry
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.shape != self.geometry.dims:
            raise ValueError(f"labels shape {self.labels.shape} != dims {self.geometry.dims}")
        if self.num_classes < 2:
            raise ValueError("need at least one semantic class plus free")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        self.labels = self.labels.astype(np.uint8)

    @property
    def free_label(self) -> int:
        return self.num_classes - 1

    @property
    def dims(self):
        return self.geometry.dims

    @classmethod
    def empty(cls, geometry: GridGeometry, num_classes: int) -> "VoxelGrid":
        return cls(geometry, np.full(geometry.dims, num_classes - 1, np.uint8), num_classes)

    def occupied(self) -> np.ndarray:
        return self.labels != self.free_label


@dataclass
class CameraView:
    intrinsics: np.ndarray
    world_to_camera: np.ndarray
    width: int
    height: int
    near_plane: float = 0.1

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.world_to_camera = check_rigid(self.world_to_camera, "world_to_camera")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1 or not self.near_plane > 0:
            raise ValueError("invalid image size or near plane")

    fx = property(lambda self: float(self.intrinsics[0, 0]))
    fy = property(lambda self: float(self.intrinsics[1, 1]))
    cx = property(lambda self: float(self.intrinsics[0, 2]))
    cy = property(lambda self: float(self.intrinsics[1, 2]))
    R = property(lambda self: self.world_to_camera[:3, :3])
    t = property(lambda self: self.world_to_camera[:3, 3])

    @property
    def center(self) -> np.ndarray:
        return invert_rigid(self.world_to_camera)[:3, 3]

    def with_pose(self, world_to_camera) -> "CameraView":
        return CameraView(self.intrinsics, world_to_camera, self.width, self.height, self.near_plane)

    def project_point(self, p):
        """Pixel coordinates (pixel centres at half-integers) and camera depth."""
        q = transform_points(self.world_to_camera, p)
        return np.array([self.fx * q[0] / q[2] + self.cx, self.fy * q[1] / q[2] + self.cy]), q[2]

    def backproject(self, uv, depth):
        q = np.array([(uv[0] - self.cx) / self.fx * depth, (uv[1] - self.cy) / self.fy * depth, depth])
        return transform_points(invert_rigid(self.world_to_camera), q)

    def pixel_rays(self):
        """Unit ray directions (world) through every pixel centre: shape (H, W, 3)."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        d = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], -1)
        d = d @ self.R  # camera -> world rotation is R^T, applied to row vectors
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class GroundTruth2D:
    semantic: np.ndarray
    depth: np.ndarray
    valid_mask: np.ndarray
    dynamic_mask: np.ndarray

    @property
    def shape(self):
        return self.semantic.shape

    @classmethod
    def empty(cls, height: int, width: int) -> "GroundTruth2D":
        return cls(np.full((height, width), INVALID_LABEL, np.int16),
                   np.zeros((height, width)), np.zeros((height, width), bool),
                   np.zeros((height, width), bool))


@dataclass(frozen=True)
class Box:
    """World-lattice box: ``lo`` inclusive corner, ``size`` in voxels, optional per-frame motion."""

    cls: int
    lo: tuple[int, int, int]
    size: tuple[int, int, int]
    velocity: tuple[int, int, int] = (0, 0, 0)

    def at(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array(self.lo) + frame * np.array(self.velocity)
        return lo, lo + np.array(self.size)

    @property
    def is_moving(self) -> bool:
        return any(self.velocity)


@dataclass(frozen=True)
class SceneRecipe:
    num_classes: int = 8
    voxel_size: float = 0.5
    z_origin: float = -1.0
    ground_class: int = 0
    ground_thickness: int = 1
    sidewalk_class: int | None = 1
    sidewalk_width: int = 3
    occluder_pair: bool = True
    occluder_class: int = 4
    backdrop_class: int = 2
    occluder_distance: int = 4
    backdrop_distance: int = 9
    n_random_static: int = 3
    random_static_classes: tuple[int, ...] = (2, 3)
    random_size_min: tuple[int, int, int] = (2, 2, 2)
    random_size_max: tuple[int, int, int] = (4, 4, 5)
    n_dynamic: int = 1
    dynamic_class: int = 5
    dynamic_size: tuple[int, int, int] = (3, 2, 3)
    dynamic_speed: int = 1
    dynamic_class_set: tuple[int, ...] = (5, 6)
    ego_velocity: tuple[int, int, int] = (0, 2, 0)
    clear_radius: int = 2
    boxes: tuple[Box, ...] = ()
    frame_period: float = 0.5

    def __post_init__(self):
        if self.num_classes < 3 or self.num_classes > 256:
            raise ValueError("num_classes must be in [3, 256]")
        used = [self.ground_class, self.occluder_class, self.backdrop_class, self.dynamic_class,
                *self.random_static_classes, *(b.cls for b in self.boxes)]
        if self.sidewalk_class is not None:
            used.append(self.sidewalk_class)
        if max(used) >= self.num_classes - 1 or min(used) < 0:
            raise ValueError("recipe uses a class index outside [0, L-2]")
        object.__setattr__(self, "boxes", tuple(
            b if isinstance(b, Box) else Box(**b) for b in self.boxes))


@dataclass
class SceneSequence:
    frames: list[VoxelGrid]
    ego_poses: list[np.ndarray]
    dynamic_class_set: frozenset[int]
    frame_period: float
    boxes: list[Box] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != len(self.ego_poses) or not self.frames:
            raise ValueError("frames and ego_poses must be non-empty and aligned")
        self.ego_poses = [check_rigid(p, "ego pose") for p in self.ego_poses]
        self.dynamic_class_set = frozenset(int(c) for c in self.dynamic_class_set)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def geometry(self) -> GridGeometry:
        return self.frames[0].geometry

    @property
    def num_classes(self) -> int:
        return self.frames[0].num_classes

    def relative_pose(self, src: int, dst: int) -> np.ndarray:
        """Transform taking ego coordinates of frame ``src`` into ego coordinates of ``dst``."""
        return invert_rigid(self.ego_poses[dst]) @ self.ego_poses[src]


# --------------------------------------------------------------------------- generation

def ego_geometry(dims, recipe: SceneRecipe) -> GridGeometry:
    vs = recipe.voxel_size
    return GridGeometry(dims, (-dims[0] * vs / 2, -dims[1] * vs / 2, recipe.z_origin), vs)


def _overlaps(lo, hi, others, gap=1):
    for olo, ohi in others:
        if np.all(lo < ohi + gap) and np.all(olo < hi + gap):
            return True
    return False


def _ego_footprints(dims, recipe, n_frames, rad):
    """Keep-out boxes around the ego origin at each frame, in world indices."""
    centre = np.array([dims[0] // 2, dims[1] // 2])
    out = []
    for t in range(n_frames):
        c = centre + t * np.array(recipe.ego_velocity[:2])
        lo = np.array([c[0] - rad, c[1] - rad, 0])
        hi = np.array([c[0] + rad, c[1] + rad, dims[2]])
        out.append((lo, hi))
    return out


def _random_boxes(rng, dims, n_frames, recipe: SceneRecipe, placed):
    H, W, Z = dims
    g = recipe.ground_thickness
    smin = np.array(recipe.random_size_min)
    smax = np.array(recipe.random_size_max)
    smax = np.minimum(smax, [H, W, Z - g])
    requested = recipe.n_random_static * float(np.prod(smin[:2] + 1))
    if recipe.n_dynamic:
        requested += recipe.n_dynamic * (recipe.dynamic_size[0] + 1) * (
            recipe.dynamic_size[1] + 1 + recipe.dynamic_speed * max(n_frames - 1, 0))
    if requested > 0.5 * H * W:
        raise SceneCapacityError(
            f"recipe needs ~{requested:.0f} voxel footprints but the {H}x{W} grid offers {0.5 * H * W:.0f}")
    if np.any(smin > smax):
        raise SceneCapacityError("random box minimum size exceeds the grid")
    boxes = []
    keep_out = _ego_footprints(dims, recipe, n_frames, recipe.clear_radius)
    for n in range(recipe.n_random_static):
        for _ in range(500):
            size = rng.integers(smin, smax + 1)
            lo = np.array([rng.integers(0, H - size[0] + 1), rng.integers(0, W - size[1] + 1), g])
            hi = lo + size
            if _overlaps(lo, hi, placed) or _overlaps(lo, hi, keep_out, gap=0):
                continue
            cls = int(recipe.random_static_classes[n % len(recipe.random_static_classes)])
            boxes.append(Box(cls, tuple(int(v) for v in lo), tuple(int(v) for v in size)))
            placed.append((lo, hi))
            break
        else:
            raise SceneCapacityError(f"could not place static box {n} after 500 attempts")
    size = np.array(recipe.dynamic_size)
    vel = np.array([recipe.dynamic_speed, 0, 0])
    span = vel * max(n_frames - 1, 0)
    for n in range(recipe.n_dynamic if n_frames > 1 else 0):
        for _ in range(500):
            lo = np.array([rng.integers(0, max(H - size[0] - span[0], 0) + 1),
                           rng.integers(0, W - size[1] + 1), g])
            hi = lo + size + span
            if (hi > np.array(dims)).any():
                continue
            if _overlaps(lo, hi, placed) or _overlaps(lo, hi, keep_out, gap=0):
                continue
            boxes.append(Box(recipe.dynamic_class, tuple(int(v) for v in lo),
                             tuple(int(v) for v in size), tuple(int(v) for v in vel)))
            placed.append((lo, hi))
            break
        else:
            raise SceneCapacityError(f"could not place dynamic box {n} after 500 attempts")
    return boxes


def _occluder_boxes(dims, recipe: SceneRecipe):
    """A thin pole with a wider backdrop right behind it along the +x camera axis.

    Distances shrink to fit grids too short for the requested ones.
    """
    cx, cy = dims[0] // 2, dims[1] // 2
    g = recipe.ground_thickness
    h = dims[2] - g
    back = min(recipe.backdrop_distance, dims[0] - cx - 2)
    front = min(recipe.occluder_distance, back - 2)
    if front < recipe.clear_radius or cy - 3 < 0 or cy + 3 > dims[1]:
        raise SceneCapacityError("occluder pair does not fit in the grid")
    pole = Box(recipe.occluder_class, (cx + front, cy - 1, g), (1, 2, max(h - 1, 1)))
    wall = Box(recipe.backdrop_class, (cx + back, cy - 3, g), (2, 6, max(h - 2, 1)))
    return [pole, wall]


def _paint(labels, box: Box, frame: int, offset: np.ndarray):
    lo, hi = box.at(frame)
    lo = np.maximum(lo - offset, 0)
    hi = np.minimum(hi - offset, labels.shape)
    if np.all(hi > lo):
        labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = box.cls


def generate_scene(seed: int, dims=(32, 32, 8), n_frames: int = 3,
                   recipe: SceneRecipe | None = None) -> SceneSequence:
    """Deterministic synthetic sequence; frame 0's ego grid coincides with the world lattice."""
    recipe = recipe or SceneRecipe()
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or dims[0] < 8 or dims[1] < 8 or dims[2] < 4:
        raise ValueError(f"dims must be at least (8, 8, 4), got {dims}")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    geom = ego_geometry(dims, recipe)

    boxes = list(recipe.boxes)
    if recipe.occluder_pair:
        boxes.extend(_occluder_boxes(dims, recipe))
    placed = [b.at(0) for b in boxes]
    for b in recipe.boxes:
        if b.is_moving:
            lo, hi = b.at(0)
            placed.append((lo, hi + np.array(b.velocity) * max(n_frames - 1, 0)))
    boxes.extend(_random_boxes(rng, dims, n_frames, recipe, placed))

    frames, poses = [], []
    for t in range(n_frames):
        offset = np.array(recipe.ego_velocity) * t
        labels = np.full(dims, recipe.num_classes - 1, np.uint8)
        labels[:, :, :recipe.ground_thickness] = recipe.ground_class
        if recipe.sidewalk_class is not None and recipe.sidewalk_width > 0:
            # strip along x at the +y edge of the frame-0 footprint
            j0 = dims[1] - recipe.sidewalk_width - offset[1]
            j1 = dims[1] - offset[1]
            j0, j1 = max(j0, 0), min(j1, dims[1])
            if j1 > j0:
                labels[:, j0:j1, :recipe.ground_thickness] = recipe.sidewalk_class
        for b in sorted(boxes, key=lambda b: b.is_moving):
            _paint(labels, b, t, offset)
        frames.append(VoxelGrid(geom, labels, recipe.num_classes))
        poses.append(translation(offset * recipe.voxel_size))
    return SceneSequence(frames, poses, frozenset(recipe.dynamic_class_set), recipe.frame_period, boxes)


# --------------------------------------------------------------------------- sensors

def camera_from_ego(yaw_rad: float, pitch_rad: float, height: float) -> np.ndarray:
    """OpenCV camera (x right, y down, z forward) at ``height`` above the ego origin."""
    cy, sy = np.cos(yaw_rad), np.sin(yaw_rad)
    cp, sp = np.cos(pitch_rad), np.sin(pitch_rad)
    fwd = np.array([cp * cy, cp * sy, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(fwd, right)
    ego_from_cam = np.eye(4)
    ego_from_cam[:3, :3] = np.stack([right, down, fwd], axis=1)
    ego_from_cam[:3, 3] = [0.0, 0.0, height]
    return invert_rigid(ego_from_cam)


def intrinsics_from_fov(fov_deg: float, width: int, height: int) -> np.ndarray:
    f = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    return np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])


def make_camera_rig(n_cams: int, ego_pose=None, fov_deg: float = 90.0, resolution=(64, 48),
                    height: float = 0.5, pitch_deg: float = 0.0, near_plane: float = 0.1,
                    yaw_offset_deg: float = 0.0) -> list[CameraView]:
    """``n_cams`` pinhole cameras evenly spaced in yaw around the ego origin."""
    if n_cams < 1:
        raise ValueError("n_cams must be >= 1")
    if not 10.0 <= fov_deg <= 170.0:
        raise ValueError(f"fov_deg must lie in [10, 170], got {fov_deg}")
    width, h = int(resolution[0]), int(resolution[1])
    K = intrinsics_from_fov(fov_deg, width, h)
    ego_pose = np.eye(4) if ego_pose is None else check_rigid(ego_pose, "ego_pose")
    world_to_ego = invert_rigid(ego_pose)
    rig = []
    for c in range(n_cams):
        yaw = np.deg2rad(yaw_offset_deg) + 2.0 * np.pi * c / n_cams
        w2c = camera_from_ego(yaw, np.deg2rad(pitch_deg), height) @ world_to_ego
        rig.append(CameraView(K, w2c, width, h, near_plane))
    return rig


def simulate_lidar_points(grid: VoxelGrid, origin, n_azimuth: int = 360, n_elevation: int = 32,
                          elevation_range=(-30.0, 10.0)):
    """First-hit returns of a uniform ray fan: (points (P, 3), classes (P,))."""
    dirs = fan_directions(n_azimuth, n_elevation, *elevation_range)
    origin = np.asarray(origin, dtype=np.float64)
    cls, dist = cast_rays(grid, origin[None], dirs)
    hit = cls >= 0
    pts = origin + dirs[hit] * dist[hit, None]
    return pts, cls[hit]


def project_labels(points, classes, view: CameraView, dynamic_class_set=()) -> GroundTruth2D:
    """Z-buffered projection of labelled points; nearest point wins each pixel."""
    gt = GroundTruth2D.empty(view.height, view.width)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    classes = np.asarray(classes).reshape(-1)
    if points.shape[0] == 0:
        return gt
    q = transform_points(view.world_to_camera, points)
    front = q[:, 2] > view.near_plane
    q, classes = q[front], classes[front]
    u = view.fx * q[:, 0] / q[:, 2] + view.cx
    v = view.fy * q[:, 1] / q[:, 2] + view.cy
    px, py = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    inside = (px >= 0) & (px < view.width) & (py >= 0) & (py < view.height)
    px, py, z, classes = px[inside], py[inside], q[inside, 2], classes[inside]
    if z.size == 0:
        return gt
    pix = py * view.width + px
    order = np.lexsort((np.arange(z.size), z, pix))
    pix_sorted = pix[order]
    first = order[np.r_[True, pix_sorted[1:] != pix_sorted[:-1]]]
    flat_sem = gt.semantic.reshape(-1)
    flat_depth = gt.depth.reshape(-1)
    flat_sem[pix[first]] = classes[first]
    flat_depth[pix[first]] = z[first]
    gt.valid_mask.reshape(-1)[pix[first]] = True
    dyn = np.isin(classes[first], np.fromiter(dynamic_class_set, dtype=np.int64, count=len(dynamic_class_set)))
    gt.dynamic_mask.reshape(-1)[pix[first]] = dyn
    return gt


@dataclass(frozen=True)
class LidarSpec:
    n_azimuth: int = 360
    n_elevation: int = 32
    elevation_min_deg: float = -30.0
    elevation_max_deg: float = 10.0
    height: float = 0.5

    @property
    def origin(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.height])


def frame_ground_truth(scene: SceneSequence, frame: int, rig: list[CameraView],
                       lidar: LidarSpec, volume=None) -> list[GroundTruth2D]:
    """Per-camera labels for one frame; ``rig`` is expressed in that frame's ego coordinates.

    ``volume = (geometry, T)`` drops returns that ``T`` maps outside ``geometry``'s extent.
    """
    pts, cls = simulate_lidar_points(scene.frames[frame], lidar.origin, lidar.n_azimuth,
                                     lidar.n_elevation,
                                     (lidar.elevation_min_deg, lidar.elevation_max_deg))
    if volume is not None:
        geom, T = volume
        q = transform_points(T, pts)
        keep = np.all((q >= geom.origin_array) & (q <= geom.upper), axis=1)
        pts, cls = pts[keep], cls[keep]
    return [project_labels(pts, cls, view, scene.dynamic_class_set) for view in rig]
