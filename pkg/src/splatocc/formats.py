"""Little-endian binary formats (OGRID, OPARM, ORND), PPM/PGM images and the scene manifest."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .field import ParameterGrid
from .geometry import GridGeometry
from .scene import CameraView, SceneSequence, VoxelGrid

VERSION = 1

OGRID_MAGIC = b"OGRD"
OPARM_MAGIC = b"OPRM"
ORND_MAGIC = b"ORND"

_OGRID_HEAD = struct.Struct("<4sIIIIIdddd")
_OPARM_HEAD = struct.Struct("<4sIIIIIIIddddI")
_ORND_HEAD = struct.Struct("<4sIIII")

# palette version 1: classes 0..17, then the free class; index wraps for larger label sets
PALETTE_V1 = np.array([
    [128, 64, 128], [244, 35, 232], [70, 70, 70], [102, 102, 156], [190, 153, 153],
    [220, 20, 60], [255, 0, 0], [0, 0, 142], [0, 0, 70], [0, 60, 100],
    [0, 80, 100], [0, 0, 230], [119, 11, 32], [250, 170, 30], [220, 220, 0],
    [107, 142, 35], [152, 251, 152], [70, 130, 180],
], dtype=np.uint8)
FREE_COLOR = np.array([0, 0, 0], dtype=np.uint8)
DEPTH_RANGE_M = 20.0


class FormatError(ValueError):
    pass


def _read(path, magic: bytes, head: struct.Struct):
    raw = Path(path).read_bytes()
    if len(raw) < head.size or raw[:4] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    fields = head.unpack_from(raw)
    if fields[1] != VERSION:
        raise FormatError(f"{path}: unsupported version {fields[1]}")
    return raw, fields


# --------------------------------------------------------------------------- OGRID

def ogrid_bytes(grid: VoxelGrid) -> bytes:
    g = grid.geometry
    head = _OGRID_HEAD.pack(OGRID_MAGIC, VERSION, *g.dims, grid.num_classes, *g.origin, g.voxel_size)
    return head + np.asarray(grid.labels, np.uint8).ravel(order="F").tobytes()


def write_ogrid(path, grid: VoxelGrid):
    Path(path).write_bytes(ogrid_bytes(grid))


def read_ogrid(path) -> VoxelGrid:
    raw, f = _read(path, OGRID_MAGIC, _OGRID_HEAD)
    H, W, Z, L = f[2:6]
    body = np.frombuffer(raw, np.uint8, offset=_OGRID_HEAD.size)
    if body.size != H * W * Z:
        raise FormatError(f"{path}: expected {H * W * Z} labels, found {body.size}")
    labels = body.reshape((H, W, Z), order="F").copy()
    return VoxelGrid(GridGeometry((H, W, Z), f[6:9], f[9]), labels, L)


# --------------------------------------------------------------------------- OPARM

def layout_descriptor(params: ParameterGrid) -> str:
    d = f"mu:3,s:3,o:1,c:{params.n_logits}"
    return d + (",r:4" if params.has_rotation else "")


def oparm_bytes(params: ParameterGrid) -> bytes:
    g = params.geometry
    desc = layout_descriptor(params).encode("ascii")
    head = _OPARM_HEAD.pack(OPARM_MAGIC, VERSION, *g.dims, params.data.shape[-1], params.num_classes,
                            int(params.has_rotation), *g.origin, g.voxel_size, len(desc))
    payload = np.ascontiguousarray(params.data.transpose(2, 1, 0, 3)).astype("<f4")
    return head + desc + payload.tobytes()


def write_oparm(path, params: ParameterGrid):
    Path(path).write_bytes(oparm_bytes(params))


def read_oparm(path) -> ParameterGrid:
    raw, f = _read(path, OPARM_MAGIC, _OPARM_HEAD)
    H, W, Z, C, L, has_rot = f[2:8]
    geom = GridGeometry((H, W, Z), f[8:11], f[11])
    n_desc = f[12]
    desc = raw[_OPARM_HEAD.size:_OPARM_HEAD.size + n_desc].decode("ascii")
    body = np.frombuffer(raw, "<f4", offset=_OPARM_HEAD.size + n_desc)
    if body.size != H * W * Z * C:
        raise FormatError(f"{path}: payload holds {body.size} values, header implies {H * W * Z * C}")
    data = body.reshape(Z, W, H, C).transpose(2, 1, 0, 3).astype(np.float64)
    params = ParameterGrid(geom, L, np.ascontiguousarray(data), bool(has_rot))
    if layout_descriptor(params) != desc:
        raise FormatError(f"{path}: channel layout {desc!r} does not match the header")
    return params


# --------------------------------------------------------------------------- ORND

def ornd_bytes(planes: np.ndarray) -> bytes:
    """Planes shaped (P, H, W), written plane-major as f32."""
    P, H, W = planes.shape
    return _ORND_HEAD.pack(ORND_MAGIC, VERSION, H, W, P) + np.asarray(planes, "<f4").tobytes()


def render_planes(out) -> np.ndarray:
    sem = np.moveaxis(out.semantic, -1, 0)
    extra = np.stack([out.depth, out.alpha_acc, out.contrib_count.astype(np.float64)])
    return np.concatenate([sem, extra])


def write_ornd(path, out):
    Path(path).write_bytes(ornd_bytes(render_planes(out)))


def read_ornd(path) -> np.ndarray:
    raw, f = _read(path, ORND_MAGIC, _ORND_HEAD)
    H, W, P = f[2:5]
    body = np.frombuffer(raw, "<f4", offset=_ORND_HEAD.size)
    if body.size != P * H * W:
        raise FormatError(f"{path}: truncated plane data")
    return body.reshape(P, H, W).copy()


# --------------------------------------------------------------------------- images

def class_colors(labels: np.ndarray, free_label: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, np.int64)
    rgb = PALETTE_V1[np.mod(labels, len(PALETTE_V1))]
    bad = labels < 0
    if free_label is not None:
        bad |= labels == free_label
    rgb[bad] = FREE_COLOR
    return rgb


def write_ppm(path, rgb: np.ndarray):
    rgb = np.asarray(rgb, np.uint8)
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def write_pgm(path, gray: np.ndarray):
    gray = np.asarray(gray, np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())


def depth_to_gray(depth: np.ndarray, max_depth: float = DEPTH_RANGE_M) -> np.ndarray:
    return np.round(np.clip(depth / max_depth, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    kind, (w, h) = parts[0], map(int, parts[1].split())
    data = np.frombuffer(parts[3], np.uint8)
    return data.reshape(h, w, 3) if kind == b"P6" else data.reshape(h, w)


# --------------------------------------------------------------------------- manifest

def _view_dict(v: CameraView) -> dict:
    return {"intrinsics": np.asarray(v.intrinsics).ravel().tolist(),
            "world_to_camera": np.asarray(v.world_to_camera).ravel().tolist(),
            "width": v.width, "height": v.height, "near_plane": v.near_plane}


def _view_from(d: dict) -> CameraView:
    return CameraView(np.array(d["intrinsics"]).reshape(3, 3), np.array(d["world_to_camera"]).reshape(4, 4),
                      int(d["width"]), int(d["height"]), float(d["near_plane"]))


def write_scene(out_dir, scene: SceneSequence, rig, extra: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for t, (grid, pose) in enumerate(zip(scene.frames, scene.ego_poses)):
        name = f"frame_{t:03d}.ogrid"
        write_ogrid(out / name, grid)
        frames.append({"index": t, "grid": name, "ego_pose": np.asarray(pose).ravel().tolist()})
    manifest = {"format": "splatocc-scene", "version": VERSION, "num_classes": scene.num_classes,
                "dynamic_class_set": sorted(scene.dynamic_class_set),
                "frame_period": scene.frame_period, "frames": frames,
                "rig": [_view_dict(v) for v in rig], **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_scene(out_dir):
    out = Path(out_dir)
    m = json.loads((out / "manifest.json").read_text())
    frames = [read_ogrid(out / f["grid"]) for f in m["frames"]]
    poses = [np.array(f["ego_pose"]).reshape(4, 4) for f in m["frames"]]
    scene = SceneSequence(frames, poses, m["dynamic_class_set"], m["frame_period"])
    return scene, [_view_from(v) for v in m["rig"]], m
