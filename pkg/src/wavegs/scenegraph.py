"""Composite scene representation: a static background node plus rigid
object nodes with time-indexed trajectories, composable at any time into
one world-frame Gaussian set for rendering.

Object Gaussians live in their object reference frame and are carried
into the world by the trajectory pose for the query time; geometry is
rigid, so scales, opacities and appearance parameters ride along
unchanged. Composition is pure concatenation (background first), with
per-Gaussian node ids retained for occupancy accounting and editing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .appearance import sh_basis_size
from .geom import (
    BoundingBox3D,
    Pose,
    normalize_quaternion,
    quat_exp,
    quat_multiply,
    quat_slerp,
    quat_to_matrix,
)

Array = np.ndarray

BACKGROUND_NODE = "background"


@dataclass
class StaticAppearance:
    """Per-Gaussian static SH coefficients, shape (n, 3, (degree+1)^2)."""

    degree: int
    coeffs: Array

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 3 or self.coeffs.shape[1] != 3:
            raise ValueError("coeffs must have shape (n, 3, k)")
        if self.coeffs.shape[2] != sh_basis_size(self.degree):
            raise ValueError("coefficient count does not match degree")

    @property
    def count(self) -> int:
        return self.coeffs.shape[0]

    def copy(self) -> "StaticAppearance":
        return StaticAppearance(self.degree, self.coeffs.copy())


@dataclass
class WaveletAppearance:
    """Wavelet-modulated SH: every coefficient is a d-term Ricker sum.

    Arrays have shape (p, 3, k, d) where p is the pack count: p == n for
    per-Gaussian packs, p == 1 when one pack is shared across the node.
    Scales are stored as logs (positive reparameterization).
    """

    degree: int
    weights: Array
    log_scales: Array
    translations: Array
    shared: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        shape = self.weights.shape
        if self.log_scales.shape != shape or self.translations.shape != shape:
            raise ValueError("wavelet arrays must share one shape")
        if len(shape) != 4 or shape[1] != 3:
            raise ValueError("wavelet arrays must have shape (p, 3, k, d)")
        if shape[2] != sh_basis_size(self.degree):
            raise ValueError("coefficient count does not match degree")
        if shape[3] < 1:
            raise ValueError("wavelet dimension must be >= 1")
        if self.shared and shape[0] != 1:
            raise ValueError("shared packs require p == 1")

    @property
    def dimension(self) -> int:
        return self.weights.shape[3]

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "WaveletAppearance":
        return WaveletAppearance(
            self.degree,
            self.weights.copy(),
            self.log_scales.copy(),
            self.translations.copy(),
            self.shared,
        )


Appearance = StaticAppearance | WaveletAppearance


@dataclass
class GaussianSet:
    """Columnar store of Gaussian parameters for one node.

    Stored values are the raw optimizer parameters: scales as logs,
    opacities as logits, rotations as free quaternions normalized on use.
    """

    means: Array
    log_scales: Array
    rotations: Array
    opacity_logits: Array
    appearance: Appearance

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(
            self.opacity_logits, dtype=np.float64
        ).reshape(n)
        app_n = self.appearance.count
        if isinstance(self.appearance, WaveletAppearance) and self.appearance.shared:
            app_n = n
        if app_n != n:
            raise ValueError("appearance count does not match gaussian count")

    @property
    def n(self) -> int:
        return len(self.means)

    def scales(self) -> Array:
        return np.exp(self.log_scales)

    def opacities(self) -> Array:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def unit_rotations(self) -> Array:
        return normalize_quaternion(self.rotations)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.means.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.appearance.copy(),
        )

    def subset(self, indices) -> "GaussianSet":
        indices = np.asarray(indices)
        app = self.appearance
        if isinstance(app, StaticAppearance):
            new_app: Appearance = StaticAppearance(app.degree, app.coeffs[indices])
        elif app.shared:
            new_app = app.copy()
        else:
            new_app = WaveletAppearance(
                app.degree,
                app.weights[indices],
                app.log_scales[indices],
                app.translations[indices],
            )
        return GaussianSet(
            self.means[indices],
            self.log_scales[indices],
            self.rotations[indices],
            self.opacity_logits[indices],
            new_app,
        )


@dataclass
class Trajectory:
    """Time-sorted pose samples with an optional learnable SE(3) refinement
    per sample (disabled by default; deltas stay zero until trained)."""

    times: Array
    rotations: Array
    translations: Array
    delta_rotvecs: Array | None = None
    delta_translations: Array | None = None
    refine: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        k = len(self.times)
        if k < 1:
            raise ValueError("trajectory needs at least one sample")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must strictly increase")
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(k, 4)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(
            k, 3
        )
        if self.delta_rotvecs is None:
            self.delta_rotvecs = np.zeros((k, 3))
        if self.delta_translations is None:
            self.delta_translations = np.zeros((k, 3))
        self.delta_rotvecs = np.asarray(self.delta_rotvecs, dtype=np.float64).reshape(
            k, 3
        )
        self.delta_translations = np.asarray(
            self.delta_translations, dtype=np.float64
        ).reshape(k, 3)

    @property
    def window(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    @property
    def count(self) -> int:
        return len(self.times)

    def sample_pose(self, index: int) -> Pose:
        """Pose of one sample with its refinement delta applied."""
        rot = normalize_quaternion(self.rotations[index])
        trans = self.translations[index]
        if np.any(self.delta_rotvecs[index]) or np.any(self.delta_translations[index]):
            rot = quat_multiply(quat_exp(self.delta_rotvecs[index]), rot)
            trans = trans + self.delta_translations[index]
        return Pose(rot, trans)

    def copy(self) -> "Trajectory":
        return Trajectory(
            self.times.copy(),
            self.rotations.copy(),
            self.translations.copy(),
            self.delta_rotvecs.copy(),
            self.delta_translations.copy(),
            self.refine,
        )


@dataclass
class ObjectNode:
    """One rigid dynamic object: Gaussians in the object frame, an
    oriented box (object frame, centered at the origin), and the world
    trajectory that places it at render time."""

    track_id: int
    class_label: str
    bbox: BoundingBox3D
    gaussians: GaussianSet
    trajectory: Trajectory
    removed: bool = False
    # optional render-time -> appearance-time remap (set by trajectory edits)
    appearance_time_map: tuple[Array, Array] | None = None

    def appearance_time(self, t: float) -> float:
        if self.appearance_time_map is None:
            return t
        xs, ys = self.appearance_time_map
        return float(np.interp(t, xs, ys))


@dataclass
class SceneGraph:
    """Background node (index 0) plus m object nodes."""

    background: GaussianSet
    objects: list[ObjectNode] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [node.track_id for node in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("track ids must be unique within a scene")

    def object_by_id(self, track_id: int) -> ObjectNode:
        for node in self.objects:
            if node.track_id == track_id:
                return node
        raise KeyError(f"unknown track id {track_id}")

    def active_objects(self) -> list[ObjectNode]:
        return [node for node in self.objects if not node.removed]


def pose_at(traj: Trajectory, t: float) -> Pose | None:
    """Pose at time t: exact at samples, linear translation + slerp
    rotation between samples, None outside the visibility window."""
    times = traj.times
    if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
        return None
    idx = int(np.searchsorted(times, t))
    if idx < len(times) and abs(times[idx] - t) <= 1e-12:
        return traj.sample_pose(idx)
    if idx > 0 and abs(times[idx - 1] - t) <= 1e-12:
        return traj.sample_pose(idx - 1)
    lo, hi = idx - 1, idx
    u = (t - times[lo]) / (times[hi] - times[lo])
    p_lo, p_hi = traj.sample_pose(lo), traj.sample_pose(hi)
    rot = quat_slerp(p_lo.rotation, p_hi.rotation, u)
    trans = (1.0 - u) * p_lo.translation + u * p_hi.translation
    return Pose(rot, trans)


def transform_node(node: ObjectNode, t: float) -> GaussianSet:
    """Object Gaussians in the world frame at time t. Means are mapped by
    the trajectory pose, rotations left-composed with it; scales,
    opacities and appearance are untouched (rigid geometry). Not visible
    at t -> empty set."""
    pose = pose_at(node.trajectory, t)
    gauss = node.gaussians
    if pose is None or node.removed:
        return gauss.subset(np.zeros(0, dtype=np.int64))
    rotations = quat_multiply(pose.rotation, gauss.unit_rotations())
    return GaussianSet(
        pose.apply(gauss.means),
        gauss.log_scales.copy(),
        rotations,
        gauss.opacity_logits.copy(),
        gauss.appearance.copy(),
    )


@dataclass
class ComposedScene:
    """World-frame concatenation of all visible nodes at one time.

    Per-node bookkeeping is retained: `node_ids` holds a compact index per
    Gaussian into `node_keys` (background first), `poses` the world pose
    used for each entry (identity for the background), and `sources` the
    underlying parameter sets (referenced, never copied)."""

    time: float
    means: Array
    log_scales: Array
    rotations: Array          # world-frame unit quaternions
    local_rotations: Array    # node-frame quaternions as stored (unnormalized)
    opacity_logits: Array
    node_ids: Array
    node_keys: list           # BACKGROUND_NODE or object track_id
    node_slices: list[slice]
    poses: list[Pose]
    sources: list[GaussianSet]
    nodes: list[ObjectNode | None]

    @property
    def n(self) -> int:
        return len(self.means)


def compose(scene: SceneGraph, t: float) -> ComposedScene:
    """Concatenate the background and every visible object's transformed
    set; background is node 0. Count = n_background + sum of visible."""
    means = [scene.background.means]
    log_scales = [scene.background.log_scales]
    local_rots = [scene.background.rotations]
    world_rots = [scene.background.unit_rotations()]
    logits = [scene.background.opacity_logits]
    node_keys: list = [BACKGROUND_NODE]
    poses: list[Pose] = [Pose.identity()]
    sources: list[GaussianSet] = [scene.background]
    nodes: list[ObjectNode | None] = [None]
    counts = [scene.background.n]

    for node in scene.active_objects():
        pose = pose_at(node.trajectory, t)
        if pose is None:
            continue
        gauss = node.gaussians
        means.append(pose.apply(gauss.means))
        log_scales.append(gauss.log_scales)
        local_rots.append(gauss.rotations)
        world_rots.append(quat_multiply(pose.rotation, gauss.unit_rotations()))
        logits.append(gauss.opacity_logits)
        node_keys.append(node.track_id)
        poses.append(pose)
        sources.append(gauss)
        nodes.append(node)
        counts.append(gauss.n)

    node_ids = np.repeat(np.arange(len(counts)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    slices = [slice(int(offsets[i]), int(offsets[i + 1])) for i in range(len(counts))]
    return ComposedScene(
        time=t,
        means=np.concatenate(means, axis=0),
        log_scales=np.concatenate(log_scales, axis=0),
        rotations=np.concatenate(world_rots, axis=0),
        local_rotations=np.concatenate(local_rots, axis=0),
        opacity_logits=np.concatenate(logits, axis=0),
        node_ids=node_ids,
        node_keys=node_keys,
        node_slices=slices,
        poses=poses,
        sources=sources,
        nodes=nodes,
    )


# ---------------------------------------------------------------------------
# checkpoint serialization


def _appearance_state(prefix: str, app: Appearance, arrays: dict) -> dict:
    if isinstance(app, StaticAppearance):
        arrays[f"{prefix}.sh"] = app.coeffs
        return {"kind": "static", "degree": app.degree}
    arrays[f"{prefix}.wavelet_w"] = app.weights
    arrays[f"{prefix}.wavelet_log_a"] = app.log_scales
    arrays[f"{prefix}.wavelet_b"] = app.translations
    return {
        "kind": "wavelet",
        "degree": app.degree,
        "dimension": app.dimension,
        "shared": bool(app.shared),
    }


def _appearance_from_state(prefix: str, meta: dict, arrays: dict) -> Appearance:
    if meta["kind"] == "static":
        return StaticAppearance(meta["degree"], arrays[f"{prefix}.sh"])
    return WaveletAppearance(
        meta["degree"],
        arrays[f"{prefix}.wavelet_w"],
        arrays[f"{prefix}.wavelet_log_a"],
        arrays[f"{prefix}.wavelet_b"],
        shared=meta["shared"],
    )


def _gaussians_state(prefix: str, gauss: GaussianSet, arrays: dict) -> dict:
    arrays[f"{prefix}.means"] = gauss.means
    arrays[f"{prefix}.log_scales"] = gauss.log_scales
    arrays[f"{prefix}.rotations"] = gauss.rotations
    arrays[f"{prefix}.opacity_logits"] = gauss.opacity_logits
    return {"appearance": _appearance_state(prefix, gauss.appearance, arrays)}


def _gaussians_from_state(prefix: str, meta: dict, arrays: dict) -> GaussianSet:
    return GaussianSet(
        arrays[f"{prefix}.means"],
        arrays[f"{prefix}.log_scales"],
        arrays[f"{prefix}.rotations"],
        arrays[f"{prefix}.opacity_logits"],
        _appearance_from_state(prefix, meta["appearance"], arrays),
    )


def save_checkpoint(path, scene: SceneGraph, extra: dict | None = None) -> None:
    """Write the whole scene graph (parameters, trajectories, metadata) to
    the versioned container format; atomic and deterministic."""
    arrays: dict[str, Array] = {}
    header: dict = {
        "kind": "wavegs-scene",
        "meta": scene.meta,
        "extra": extra or {},
        "background": _gaussians_state("bg", scene.background, arrays),
        "objects": [],
    }
    for i, node in enumerate(scene.objects):
        prefix = f"obj{i}"
        traj = node.trajectory
        arrays[f"{prefix}.traj_times"] = traj.times
        arrays[f"{prefix}.traj_rotations"] = traj.rotations
        arrays[f"{prefix}.traj_translations"] = traj.translations
        arrays[f"{prefix}.traj_delta_rotvecs"] = traj.delta_rotvecs
        arrays[f"{prefix}.traj_delta_translations"] = traj.delta_translations
        entry = {
            "track_id": int(node.track_id),
            "class": node.class_label,
            "bbox_center": [float(v) for v in node.bbox.center],
            "bbox_size": [float(v) for v in node.bbox.size],
            "bbox_yaw": float(node.bbox.yaw),
            "removed": bool(node.removed),
            "refine": bool(traj.refine),
            "gaussians": _gaussians_state(prefix, node.gaussians, arrays),
            "has_time_map": node.appearance_time_map is not None,
        }
        if node.appearance_time_map is not None:
            arrays[f"{prefix}.time_map_x"] = node.appearance_time_map[0]
            arrays[f"{prefix}.time_map_y"] = node.appearance_time_map[1]
        header["objects"].append(entry)
    io.write_container(path, header, arrays)


def load_checkpoint(path) -> tuple[SceneGraph, dict]:
    """Read a scene checkpoint -> (scene, extra header dict)."""
    header, arrays = io.read_container(path)
    if header.get("kind") != "wavegs-scene":
        raise ValueError(f"{path}: not a scene checkpoint")
    background = _gaussians_from_state("bg", header["background"], arrays)
    objects = []
    for i, entry in enumerate(header["objects"]):
        prefix = f"obj{i}"
        traj = Trajectory(
            arrays[f"{prefix}.traj_times"],
            arrays[f"{prefix}.traj_rotations"],
            arrays[f"{prefix}.traj_translations"],
            arrays[f"{prefix}.traj_delta_rotvecs"],
            arrays[f"{prefix}.traj_delta_translations"],
            refine=entry["refine"],
        )
        time_map = None
        if entry.get("has_time_map"):
            time_map = (arrays[f"{prefix}.time_map_x"], arrays[f"{prefix}.time_map_y"])
        objects.append(
            ObjectNode(
                track_id=entry["track_id"],
                class_label=entry["class"],
                bbox=BoundingBox3D(
                    entry["bbox_center"], entry["bbox_size"], entry["bbox_yaw"]
                ),
                gaussians=_gaussians_from_state(prefix, entry["gaussians"], arrays),
                trajectory=traj,
                removed=entry["removed"],
                appearance_time_map=time_map,
            )
        )
    scene = SceneGraph(background, objects, meta=header.get("meta", {}))
    return scene, header.get("extra", {})


def export_geometry_ply(path, gauss: GaussianSet) -> None:
    """Gaussian geometry as PLY points with scale/rotation/opacity
    attributes for interoperability with external splat viewers."""
    n = gauss.n
    dtype = [("x", np.float32), ("y", np.float32), ("z", np.float32),
             ("opacity", np.float32)]
    dtype += [(f"scale_{i}", np.float32) for i in range(3)]
    dtype += [(f"rot_{i}", np.float32) for i in range(4)]
    rec = np.zeros(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = gauss.means.T.astype(np.float32)
    rec["opacity"] = gauss.opacities().astype(np.float32)
    for i in range(3):
        rec[f"scale_{i}"] = gauss.log_scales[:, i].astype(np.float32)
    rots = gauss.unit_rotations()
    for i in range(4):
        rec[f"rot_{i}"] = rots[:, i].astype(np.float32)
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {name}" for name in rec.dtype.names]
    lines.append("end_header")
    payload = ("\n".join(lines) + "\n").encode("ascii") + rec.tobytes()
    io.atomic_write_bytes(Path(path), payload)
