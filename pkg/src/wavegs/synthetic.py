"""Synthetic scene generator for desk-scale verification.

Builds a ground-truth scene graph from geometric primitives (a ground
plane and back wall for the background, an ellipsoidal blob for each
moving object), renders ground-truth images with the brute-force
reference rasterizer, simulates LiDAR by sampling rays through the
rendered depth, and writes a fully self-consistent manifest plus the
ground-truth checkpoint. Object colors follow a smooth hue ramp over
normalized time, realized exactly by the wavelet appearance model so the
data is representable by what training optimizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .appearance import SH_C0, default_translations, fit_wavelet_weights, sh_basis_size
from .geom import (
    BoundingBox3D,
    CameraModel,
    Pose,
    matrix_to_quat,
    quat_from_axis_angle,
)
from .ingest import BoxObservation, FrameRecord, SceneManifest, save_manifest
from .render import render_scene
from .scenegraph import (
    GaussianSet,
    ObjectNode,
    SceneGraph,
    StaticAppearance,
    Trajectory,
    WaveletAppearance,
    save_checkpoint,
)

Array = np.ndarray

# camera axes in world terms: x right, y down (-z_world), z forward (+y_world)
_R_WORLD_TO_CAM = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


@dataclass
class SynthSpec:
    frames: int = 30
    image_size: int = 128
    seed: int = 0
    n_objects: int = 1
    wavelet_dimension: int = 7
    ramp_amplitude: float = 0.28
    camera_speed: float = 0.15       # meters per frame along +y
    lidar_stride: int = 2
    frame_rate: float = 10.0
    background_spacing: float = 0.55
    object_gaussians: int = 320


def _camera(spec: SynthSpec) -> CameraModel:
    s = spec.image_size
    return CameraModel(
        fx=s * 0.86, fy=s * 0.86, cx=s / 2.0, cy=s / 2.0,
        width=s, height=s, near=0.2, far=120.0,
    )


def camera_pose_at(spec: SynthSpec, frame: int) -> Pose:
    """World -> camera view pose for a frame of the forward-moving rig."""
    position = np.array([0.0, -2.0 + spec.camera_speed * frame, 1.5])


    rotation = matrix_to_quat(_R_WORLD_TO_CAM)
    return Pose(rotation, -_R_WORLD_TO_CAM @ position)


def _grid_points(rng, xs, ys, zs, spacing):
    """Jittered lattice over an axis-aligned rectangle (one axis fixed)."""
    axes = [np.arange(lo, hi + 1e-9, spacing) for lo, hi in (xs, ys, zs)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    jitter = rng.uniform(-0.25 * spacing, 0.25 * spacing, size=grid.shape)
    for k, (lo, hi) in enumerate((xs, ys, zs)):
        if hi - lo < spacing:
            jitter[:, k] = 0.0
    return grid + jitter


def _background_gaussians(rng, spec: SynthSpec) -> GaussianSet:
    spacing = spec.background_spacing
    ground = _grid_points(rng, (-8.0, 8.0), (2.0, 26.0), (0.0, 0.0), spacing)
    wall = _grid_points(rng, (-8.0, 8.0), (26.0, 26.0), (0.0, 5.0), spacing)
    points = np.concatenate([ground, wall], axis=0)
    n = len(points)
    x, y, z = points.T
    colors = np.stack(
        [
            0.45 + 0.22 * np.sin(0.55 * x + 0.2 * y),
            0.45 + 0.22 * np.sin(0.38 * y + 1.3),
            0.50 + 0.20 * np.cos(0.45 * x - 0.25 * y + 0.6 * z),
        ],
        axis=1,
    )
    degree = 1
    coeffs = np.zeros((n, 3, sh_basis_size(degree)))
    coeffs[:, :, 0] = (colors - 0.5) / SH_C0
    coeffs[:, :, 1:] = rng.uniform(-0.04, 0.04, size=(n, 3, sh_basis_size(degree) - 1))
    scales = np.full((n, 3), 0.5 * spacing)
    scales[: len(ground), 2] = 0.08          # thin along the plane normal
    scales[len(ground):, 1] = 0.08
    return GaussianSet(
        points,
        np.log(scales),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full(n, 3.0),                     # alpha ~ 0.95
        StaticAppearance(degree, coeffs),
    )


def _object_gaussians(rng, spec: SynthSpec, frame_times: Array, phase: float):
    """Ellipsoid blob with a wavelet-encoded hue ramp over time."""
    size = np.array([3.2, 1.6, 1.4])
    n = spec.object_gaussians
    pts = rng.uniform(-1.0, 1.0, size=(n * 3, 3))
    pts = pts[np.sum(pts**2, axis=1) <= 1.0][:n]
    points = pts * (0.5 * size * 0.92)
    n = len(points)
    base = 0.5 + rng.uniform(-0.07, 0.07, size=(n, 3))
    channel_phase = phase + np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
    # target DC coefficient per (gaussian, channel, time)
    ramp = spec.ramp_amplitude * np.sin(
        2.0 * np.pi * frame_times[None, None, :] + channel_phase[None, :, None]
    )
    targets = (base[:, :, None] + ramp - 0.5) / SH_C0
    d = spec.wavelet_dimension
    degree = 1
    k = sh_basis_size(degree)
    weights = np.zeros((n, 3, k, d))
    weights[:, :, 0, :] = fit_wavelet_weights(targets, frame_times, d)
    log_a = np.full((n, 3, k, d), np.log(0.3))
    b = np.tile(default_translations(d), (n, 3, k, 1))
    gauss = GaussianSet(
        points,
        np.log(np.full((n, 3), 0.16)),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full(n, 3.5),                     # alpha ~ 0.97
        WaveletAppearance(degree, weights, log_a, b),
    )
    return gauss, BoundingBox3D([0.0, 0.0, 0.0], size)


def _object_trajectory(spec: SynthSpec, frame_times: Array, lane: int) -> Trajectory:
    start = np.array([-4.5, 15.0 + 3.0 * lane, 0.7])
    end = np.array([4.5, 11.0 + 3.0 * lane, 0.7])
    heading = float(np.arctan2(end[1] - start[1], end[0] - start[0]))
    rot = quat_from_axis_angle([0.0, 0.0, 1.0], heading)
    k = len(frame_times)
    translations = start[None, :] + (end - start)[None, :] * (
        np.linspace(0.0, 1.0, k)[:, None]
    )
    return Trajectory(frame_times, np.tile(rot, (k, 1)), translations)


def build_ground_truth_scene(spec: SynthSpec) -> SceneGraph:
    rng = np.random.default_rng(spec.seed)
    frame_times = np.linspace(0.0, 1.0, spec.frames)
    background = _background_gaussians(rng, spec)
    objects = []
    for j in range(spec.n_objects):
        gauss, bbox = _object_gaussians(rng, spec, frame_times, phase=0.9 * j)
        objects.append(
            ObjectNode(
                track_id=j + 1,
                class_label="car",
                bbox=bbox,
                gaussians=gauss,
                trajectory=_object_trajectory(spec, frame_times, lane=j),
            )
        )
    duration = (spec.frames - 1) / spec.frame_rate
    meta = {
        "time_origin": 0.0,
        "time_scale": duration,
        "conventions": {"up_axis": "z", "motion_plane_normal": [0.0, 0.0, 1.0]},
        "manifest_name": "synthetic",
    }
    return SceneGraph(background, objects, meta=meta)


def synth_scene_generate(out_dir, spec: SynthSpec | None = None):
    """Write a self-consistent synthetic dataset: ground-truth renders as
    images, ray-sampled LiDAR clouds, the manifest, and the ground-truth
    scene checkpoint. Deterministic for a fixed spec."""
    spec = spec or SynthSpec()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    cam = _camera(spec)
    scene = build_ground_truth_scene(spec)
    frame_times = np.linspace(0.0, 1.0, spec.frames)

    records = []
    for i in range(spec.frames):
        t = float(frame_times[i])
        view = camera_pose_at(spec, i)
        output, _ = render_scene(
            scene, view, cam, t, background=(0.0, 0.0, 0.0), use_reference=True,
            beta_support="contrib",
        )
        image_rel = f"images/{i:06d}.png"
        io.write_png(out_dir / image_rel, output.color)

        # simulated LiDAR: rays through a pixel lattice, depths from the
        # reference render, back-projected into the sensor (camera) frame
        stride = spec.lidar_stride
        vs, us = np.mgrid[0 : cam.height : stride, 0 : cam.width : stride]
        us = us.ravel()
        vs = vs.ravel()
        hit = output.accum[vs, us] > 0.5
        us, vs = us[hit], vs[hit]
        depths = output.depth[vs, us]
        points = np.stack(
            [
                (us - cam.cx) * depths / cam.fx,
                (vs - cam.cy) * depths / cam.fy,
                depths,
            ],
            axis=1,
        )
        colors = output.color[vs, us]
        cloud_rel = f"clouds/{i:06d}.ply"
        io.write_ply(out_dir / cloud_rel, points, colors)

        boxes = []
        for node in scene.objects:
            from .scenegraph import pose_at

            pose = pose_at(node.trajectory, t)
            if pose is None:
                continue
            w, x_, y_, z_ = pose.rotation
            yaw = float(np.arctan2(2.0 * (w * z_ + x_ * y_), 1.0 - 2.0 * (y_**2 + z_**2)))
            boxes.append(
                BoxObservation(
                    track_id=node.track_id,
                    class_label=node.class_label,
                    box=BoundingBox3D(pose.translation, node.bbox.size, yaw),
                )
            )
        records.append(
            FrameRecord(
                index=i,
                timestamp=i / spec.frame_rate,
                image=image_rel,
                cloud=cloud_rel,
                sensor_pose=view.inverse(),
                boxes=boxes,
            )
        )

    manifest = SceneManifest(
        camera=cam,
        cam_from_sensor=Pose.identity(),
        frames=records,
        conventions={"up_axis": "z", "motion_plane_normal": [0.0, 0.0, 1.0]},
        root=out_dir,
        name="synthetic",
    )
    save_manifest(manifest, out_dir / "manifest.json")
    save_checkpoint(out_dir / "gt_scene.wgsc", scene, extra={"source": "synthetic"})
    return manifest, scene
