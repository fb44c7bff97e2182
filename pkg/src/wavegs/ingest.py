"""Dataset ingestion: manifest schema, point-cloud accumulation and
object densification, LiDAR depth projection, and Gaussian
initialization from points.

A scene manifest is one JSON document with relative file references:
camera intrinsics, the static sensor-to-camera extrinsic, and per frame a
sensor pose (sensor to world), an image, a LiDAR cloud (sensor frame) and
the tracked 3D boxes in world coordinates. The format is dataset
agnostic; a KITTI tracking converter produces it (see cli.convert).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .appearance import SH_C0, constant_fit_weights, default_translations, sh_basis_size
from .geom import BoundingBox3D, CameraModel, Pose, quat_from_axis_angle
from .scenegraph import (
    GaussianSet,
    ObjectNode,
    SceneGraph,
    StaticAppearance,
    Trajectory,
    WaveletAppearance,
)

logger = logging.getLogger(__name__)

Array = np.ndarray

MANIFEST_VERSION = 1


@dataclass
class BoxObservation:
    track_id: int
    class_label: str
    box: BoundingBox3D          # world frame, yaw about the up axis


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    image: str                  # relative path
    cloud: str                  # relative path, sensor frame
    sensor_pose: Pose           # sensor -> world
    boxes: list[BoxObservation] = field(default_factory=list)

    def __post_init__(self):
        ids = [b.track_id for b in self.boxes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"frame {self.index}: duplicate track ids")


@dataclass
class SceneManifest:
    camera: CameraModel
    cam_from_sensor: Pose       # sensor -> camera
    frames: list[FrameRecord]
    conventions: dict = field(default_factory=lambda: {"up_axis": "z"})
    root: Path = Path(".")
    name: str = "scene"

    def __post_init__(self):
        times = [f.timestamp for f in self.frames]
        if any(b >= a for a, b in zip(times[1:], times[:-1])):
            raise ValueError("frame timestamps must strictly increase")

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel

    @property
    def time_window(self) -> tuple[float, float]:
        return self.frames[0].timestamp, self.frames[-1].timestamp

    def normalized_time(self, timestamp: float) -> float:
        t0, t1 = self.time_window
        return (timestamp - t0) / (t1 - t0) if t1 > t0 else 0.0

    def track_ids(self) -> list[int]:
        seen: dict[int, None] = {}
        for frame in self.frames:
            for box in frame.boxes:
                seen.setdefault(box.track_id, None)
        return list(seen)


def _pose_to_json(pose: Pose) -> dict:
    return {
        "rotation": [float(v) for v in pose.rotation],
        "translation": [float(v) for v in pose.translation],
    }


def _pose_from_json(data: dict) -> Pose:
    return Pose(np.array(data["rotation"]), np.array(data["translation"]))


def save_manifest(manifest: SceneManifest, path) -> None:
    cam = manifest.camera
    doc = {
        "version": MANIFEST_VERSION,
        "name": manifest.name,
        "camera": {
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "near": cam.near, "far": cam.far,
        },
        "cam_from_sensor": _pose_to_json(manifest.cam_from_sensor),
        "conventions": manifest.conventions,
        "frames": [
            {
                "index": f.index,
                "timestamp": f.timestamp,
                "image": f.image,
                "cloud": f.cloud,
                "sensor_pose": _pose_to_json(f.sensor_pose),
                "boxes": [
                    {
                        "track_id": b.track_id,
                        "class": b.class_label,
                        "center": [float(v) for v in b.box.center],
                        "size": [float(v) for v in b.box.size],
                        "yaw": float(b.box.yaw),
                    }
                    for b in f.boxes
                ],
            }
            for f in manifest.frames
        ],
    }
    io.write_json(path, doc)


def load_manifest(path, check_files: bool = True) -> SceneManifest:
    path = Path(path)
    doc = io.read_json(path)
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version")
    cam = CameraModel(**doc["camera"])
    frames = []
    for fd in doc["frames"]:
        boxes = [
            BoxObservation(
                track_id=bd["track_id"],
                class_label=bd["class"],
                box=BoundingBox3D(bd["center"], bd["size"], bd["yaw"]),
            )
            for bd in fd["boxes"]
        ]
        frames.append(
            FrameRecord(
                index=fd["index"],
                timestamp=fd["timestamp"],
                image=fd["image"],
                cloud=fd["cloud"],
                sensor_pose=_pose_from_json(fd["sensor_pose"]),
                boxes=boxes,
            )
        )
    manifest = SceneManifest(
        camera=cam,
        cam_from_sensor=_pose_from_json(doc["cam_from_sensor"]),
        frames=frames,
        conventions=doc.get("conventions", {"up_axis": "z"}),
        root=path.parent,
        name=doc.get("name", "scene"),
    )
    if check_files:
        for frame in manifest.frames:
            for rel in (frame.image, frame.cloud):
                if not manifest.path(rel).exists():
                    raise FileNotFoundError(f"manifest references missing file: {rel}")
    return manifest


# ---------------------------------------------------------------------------
# point-cloud operations


def _sample_point_colors(
    points_sensor: Array, image: Array, cam_from_sensor: Pose, cam: CameraModel
) -> Array:
    """Per-point RGB by projecting sensor-frame points into the frame's
    image; points outside the view fall back to mid gray."""
    colors = np.full((len(points_sensor), 3), 0.5)
    p_cam = cam_from_sensor.apply(points_sensor)
    z = p_cam[:, 2]
    ok = z > cam.near
    u = np.round(cam.fx * p_cam[ok, 0] / z[ok] + cam.cx).astype(np.int64)
    v = np.round(cam.fy * p_cam[ok, 1] / z[ok] + cam.cy).astype(np.int64)
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    idx = np.flatnonzero(ok)[inside]
    colors[idx] = image[v[inside], u[inside]]
    return colors


def voxel_downsample(points: Array, colors: Array | None, voxel: float):
    """Average points (and colors) per voxel; output in canonical voxel
    order so the result is independent of input ordering."""
    if voxel <= 0 or len(points) == 0:
        return points, colors
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    out_pts = np.zeros((len(counts), 3))
    np.add.at(out_pts, inverse, points)
    out_pts /= counts[:, None]
    out_col = None
    if colors is not None:
        out_col = np.zeros((len(counts), 3))
        np.add.at(out_col, inverse, colors)
        out_col /= counts[:, None]
    return out_pts, out_col


def accumulate_background_points(
    manifest: SceneManifest,
    margin: float = 0.1,
    voxel: float = 0.15,
):
    """World-frame background cloud: every frame's LiDAR points carried by
    the sensor pose, minus points inside any observed (inflated) box,
    colored by image projection, voxel-downsampled."""
    all_points = []
    all_colors = []
    for frame in manifest.frames:
        try:
            pts_sensor, _ = io.read_ply(manifest.path(frame.cloud))
        except (OSError, ValueError) as exc:
            logger.warning("skipping unreadable cloud %s: %s", frame.cloud, exc)
            continue
        colors = _sample_point_colors(
            pts_sensor,
            io.read_png(manifest.path(frame.image)),
            manifest.cam_from_sensor,
            manifest.camera,
        )
        pts_world = frame.sensor_pose.apply(pts_sensor)
        keep = np.ones(len(pts_world), dtype=bool)
        for obs in frame.boxes:
            keep &= ~obs.box.contains(pts_world, margin=margin)
        all_points.append(pts_world[keep])
        all_colors.append(colors[keep])
    if not all_points:
        return np.zeros((0, 3)), np.zeros((0, 3))
    points = np.concatenate(all_points, axis=0)
    colors = np.concatenate(all_colors, axis=0)
    return voxel_downsample(points, colors, voxel)


def box_world_pose(box: BoundingBox3D) -> Pose:
    """Object frame -> world for an annotated box (yaw about up axis)."""
    return Pose(quat_from_axis_angle([0.0, 0.0, 1.0], box.yaw), box.center)


def densify_object_points(
    manifest: SceneManifest,
    track_id: int,
    margin: float = 0.1,
    voxel: float = 0.0,
):
    """Object-frame cloud densified across every frame the track appears
    in: per frame, the ROI filter keeps in-box points, the inverse box
    pose carries them into the object frame, and frames concatenate in
    index order (canonical). Returns (points, colors, source frame ids)."""
    pieces = []
    found = False
    for frame in sorted(manifest.frames, key=lambda f: f.index):
        obs = next((b for b in frame.boxes if b.track_id == track_id), None)
        if obs is None:
            continue
        found = True
        pts_sensor, _ = io.read_ply(manifest.path(frame.cloud))
        pts_world = frame.sensor_pose.apply(pts_sensor)
        inside = obs.box.contains(pts_world, margin=margin)
        if not inside.any():
            continue
        colors = _sample_point_colors(
            pts_sensor[inside],
            io.read_png(manifest.path(frame.image)),
            manifest.cam_from_sensor,
            manifest.camera,
        )
        local = box_world_pose(obs.box).inverse().apply(pts_world[inside])
        pieces.append((frame.index, local, colors))
    if not found:
        raise KeyError(f"unknown track id {track_id}")
    if not pieces:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    points = np.concatenate([p for _, p, _ in pieces], axis=0)
    colors = np.concatenate([c for _, _, c in pieces], axis=0)
    frame_ids = np.concatenate(
        [np.full(len(p), fi, dtype=np.int64) for fi, p, _ in pieces]
    )
    if voxel > 0:
        points, colors = voxel_downsample(points, colors, voxel)
        frame_ids = np.zeros(len(points), dtype=np.int64)
    return points, colors, frame_ids


def lidar_to_depth(
    points_sensor: Array, cam_from_sensor: Pose, cam: CameraModel
):
    """Sparse depth map from a sensor-frame cloud: project every point,
    nearest depth wins per pixel. Returns (depth, valid mask)."""
    depth = np.zeros((cam.height, cam.width))
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    if len(points_sensor) == 0:
        return depth, mask
    p_cam = cam_from_sensor.apply(points_sensor)
    z = p_cam[:, 2]
    ok = (z > cam.near) & (z < cam.far)
    p_cam = p_cam[ok]
    z = z[ok]
    u = np.round(cam.fx * p_cam[:, 0] / z + cam.cx).astype(np.int64)
    v = np.round(cam.fy * p_cam[:, 1] / z + cam.cy).astype(np.int64)
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    u, v, z = u[inside], v[inside], z[inside]
    # nearest depth per pixel: process farthest first so closest lands last
    order = np.argsort(-z, kind="stable")
    depth[v[order], u[order]] = z[order]
    mask[v[order], u[order]] = True
    return depth, mask


# ---------------------------------------------------------------------------
# Gaussian initialization


def _nn_scales(points: Array, k: int = 3) -> Array:
    """Isotropic scale per point: mean distance to the k nearest
    neighbors (fewer when the cloud is tiny)."""
    n = len(points)
    if n == 1:
        return np.full(1, 0.1)
    kk = min(k, n - 1)
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=kk + 1)
    return np.maximum(dist[:, 1:].mean(axis=1), 1e-4)


def initialize_node_gaussians(
    points: Array,
    colors: Array | None,
    target: int | None = None,
    degree: int = 3,
    wavelet_dimension: int = 0,
    wavelet_scale: float = 0.3,
    shared_packs: bool = False,
    init_alpha: float = 0.1,
    seed: int = 0,
    fallback_box: BoundingBox3D | None = None,
    fallback_count: int = 64,
) -> GaussianSet:
    """One Gaussian per point: isotropic scale from the 3-NN distance,
    identity rotation, opacity init, and appearance seeded from the point
    color (degree-0 fit through the +0.5 color offset; wavelet packs get
    weights reproducing that color as a near-constant over time)."""
    rng = np.random.default_rng(seed)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        if fallback_box is None:
            raise ValueError("empty cloud and no fallback box")
        half = 0.5 * fallback_box.size
        local = rng.uniform(-half, half, size=(fallback_count, 3))
        points = fallback_box.pose().apply(local)
        colors = None
    if target is not None and len(points) > target:
        pick = np.sort(rng.choice(len(points), size=target, replace=False))
        points = points[pick]
        colors = colors[pick] if colors is not None else None
    n = len(points)
    if colors is None:
        colors = np.full((n, 3), 0.5)

    log_scales = np.log(np.repeat(_nn_scales(points)[:, None], 3, axis=1))
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    logits = np.full(n, float(np.log(init_alpha / (1.0 - init_alpha))))
    k = sh_basis_size(degree)
    dc = (colors - 0.5) / SH_C0

    if wavelet_dimension:
        p = 1 if shared_packs else n
        weights = np.zeros((p, 3, k, wavelet_dimension))
        unit = constant_fit_weights(wavelet_dimension, wavelet_scale)
        if shared_packs:
            weights[0, :, 0, :] = (colors.mean(axis=0) - 0.5)[:, None] / SH_C0 * unit
        else:
            weights[:, :, 0, :] = dc[:, :, None] * unit
        log_a = np.full((p, 3, k, wavelet_dimension), np.log(wavelet_scale))
        b = np.tile(default_translations(wavelet_dimension), (p, 3, k, 1))
        appearance = WaveletAppearance(degree, weights, log_a, b, shared=shared_packs)
    else:
        coeffs = np.zeros((n, 3, k))
        coeffs[:, :, 0] = dc
        appearance = StaticAppearance(degree, coeffs)
    return GaussianSet(points, log_scales, rotations, logits, appearance)


# ---------------------------------------------------------------------------
# scene construction and training frame sets


def object_trajectory(manifest: SceneManifest, track_id: int) -> Trajectory:
    """Trajectory from the box annotations, in normalized scene time."""
    times, rots, trans = [], [], []
    for frame in manifest.frames:
        obs = next((b for b in frame.boxes if b.track_id == track_id), None)
        if obs is None:
            continue
        pose = box_world_pose(obs.box)
        times.append(manifest.normalized_time(frame.timestamp))
        rots.append(pose.rotation)
        trans.append(pose.translation)
    if not times:
        raise KeyError(f"unknown track id {track_id}")
    return Trajectory(np.array(times), np.array(rots), np.array(trans))


def build_scene(manifest: SceneManifest, cfg) -> SceneGraph:
    """Initialize a trainable scene graph from a manifest: accumulated
    background cloud plus one densified node per track."""
    bg_pts, bg_col = accumulate_background_points(
        manifest, margin=cfg.box_margin, voxel=cfg.voxel_background
    )
    background = initialize_node_gaussians(
        bg_pts,
        bg_col,
        target=cfg.max_init_background,
        degree=cfg.sh_degree_background,
        seed=cfg.seed,
    )
    objects = []
    for track_id in manifest.track_ids():
        pts, col, _ = densify_object_points(
            manifest, track_id, margin=cfg.box_margin, voxel=cfg.voxel_object
        )
        sizes = []
        label = "object"
        for frame in manifest.frames:
            for obs in frame.boxes:
                if obs.track_id == track_id:
                    sizes.append(obs.box.size)
                    label = obs.class_label
        bbox = BoundingBox3D([0.0, 0.0, 0.0], np.max(sizes, axis=0))
        gauss = initialize_node_gaussians(
            pts,
            col,
            target=cfg.max_init_object,
            degree=cfg.sh_degree_objects,
            wavelet_dimension=cfg.wavelet_dimension,
            shared_packs=cfg.shared_packs,
            seed=cfg.seed + track_id,
            fallback_box=bbox,
        )
        traj = object_trajectory(manifest, track_id)
        traj.refine = cfg.refine_poses
        objects.append(
            ObjectNode(
                track_id=track_id,
                class_label=label,
                bbox=bbox,
                gaussians=gauss,
                trajectory=traj,
            )
        )
    t0, t1 = manifest.time_window
    meta = {
        "time_origin": t0,
        "time_scale": max(t1 - t0, 0.0),
        "conventions": manifest.conventions,
        "manifest_name": manifest.name,
    }
    return SceneGraph(background, objects, meta=meta)


@dataclass
class TrainFrame:
    index: int
    time: float                 # normalized scene time
    view: Pose                  # world -> camera
    image: Array
    depth: Array | None
    depth_mask: Array | None


@dataclass
class FrameSet:
    camera: CameraModel
    frames: list[TrainFrame]
    train_indices: list
    holdout_indices: list


def split_indices(n: int, fraction: float):
    """Frame-holdout split patterns: 0.75 holds out every 4th frame, 0.5
    every 2nd, 0.25 trains on every 4th; 1.0 trains and evaluates on
    identical sets (the image-reconstruction setting)."""
    idx = list(range(n))
    if fraction == 1.0:
        return idx, list(idx)
    if fraction == 0.75:
        holdout = [i for i in idx if i % 4 == 3]
    elif fraction == 0.5:
        holdout = [i for i in idx if i % 2 == 1]
    elif fraction == 0.25:
        train = [i for i in idx if i % 4 == 0]
        return train, [i for i in idx if i % 4 != 0]
    else:
        raise ValueError("split fraction must be one of 0.25, 0.5, 0.75, 1.0")
    train = [i for i in idx if i not in holdout]
    return train, holdout


def build_frameset(
    manifest: SceneManifest, split_fraction: float = 0.75, with_depth: bool = True
) -> FrameSet:
    """Load every frame's image, view pose, and LiDAR-projected depth."""
    frames = []
    for record in manifest.frames:
        image = io.read_png(manifest.path(record.image))
        depth = depth_mask = None
        if with_depth:
            pts, _ = io.read_ply(manifest.path(record.cloud))
            depth, depth_mask = lidar_to_depth(
                pts, manifest.cam_from_sensor, manifest.camera
            )
        view = manifest.cam_from_sensor.compose(record.sensor_pose.inverse())
        frames.append(
            TrainFrame(
                index=record.index,
                time=manifest.normalized_time(record.timestamp),
                view=view,
                image=image,
                depth=depth,
                depth_mask=depth_mask,
            )
        )
    train, holdout = split_indices(len(frames), split_fraction)
    return FrameSet(manifest.camera, frames, train, holdout)
