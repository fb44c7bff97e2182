"""Shared builders for randomized test scenes."""

from __future__ import annotations

import numpy as np

from wavegs.appearance import default_translations, sh_basis_size
from wavegs.geom import BoundingBox3D, CameraModel, Pose, quat_from_axis_angle
from wavegs.scenegraph import (
    GaussianSet,
    ObjectNode,
    SceneGraph,
    StaticAppearance,
    Trajectory,
    WaveletAppearance,
)


def random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_gaussians(
    rng,
    n,
    center=(0.0, 0.0, 6.0),
    spread=1.2,
    degree=1,
    wavelet_dim=0,
    coeff_scale=0.25,
    shared=False,
):
    """A compact cloud of Gaussians in front of a +z-looking camera.

    Coefficients stay small so colors land strictly inside the clamp and
    gradients are finite-difference friendly.
    """
    means = np.asarray(center) + rng.normal(size=(n, 3)) * spread
    log_scales = rng.uniform(np.log(0.12), np.log(0.45), size=(n, 3))
    rotations = random_unit_quats(rng, n)
    logits = rng.uniform(-1.0, 1.5, size=n)
    k = sh_basis_size(degree)
    if wavelet_dim:
        p = 1 if shared else n
        weights = rng.normal(size=(p, 3, k, wavelet_dim)) * coeff_scale
        log_a = np.log(rng.uniform(0.2, 0.5, size=(p, 3, k, wavelet_dim)))
        b = np.tile(default_translations(wavelet_dim), (p, 3, k, 1))
        b = b + rng.normal(size=b.shape) * 0.05
        app = WaveletAppearance(degree, weights, log_a, b, shared=shared)
    else:
        coeffs = rng.normal(size=(n, 3, k)) * coeff_scale
        coeffs[:, :, 0] += rng.uniform(-0.3, 0.3, size=(n, 3))
        app = StaticAppearance(degree, coeffs)
    return GaussianSet(means, log_scales, rotations, logits, app)


def small_camera(size=32):
    return CameraModel(
        fx=size * 1.2, fy=size * 1.2, cx=size / 2, cy=size / 2,
        width=size, height=size, near=0.2, far=100.0,
    )


def random_scene(
    rng,
    n_background=8,
    n_object=6,
    wavelet_dim=3,
    refine=False,
    object_degree=1,
    frame_times=(0.0, 0.5, 1.0),
):
    """Background + one moving object with wavelet appearance."""
    background = random_gaussians(rng, n_background, degree=2, spread=2.0)
    obj_gauss = random_gaussians(
        rng, n_object, center=(0.0, 0.0, 0.0), spread=0.35,
        degree=object_degree, wavelet_dim=wavelet_dim,
    )
    times = np.asarray(frame_times, dtype=np.float64)
    k = len(times)
    yaws = rng.uniform(-0.6, 0.6, size=k)
    rotations = np.stack(
        [quat_from_axis_angle([0, 0, 1], yaw) for yaw in yaws], axis=0
    )
    translations = np.stack(
        [
            np.array([-1.2 + 2.4 * i / max(k - 1, 1), 0.3, 6.0 + 0.4 * i])
            for i in range(k)
        ],
        axis=0,
    )
    traj = Trajectory(times, rotations, translations, refine=refine)
    if refine:
        traj.delta_rotvecs = rng.normal(size=(k, 3)) * 0.02
        traj.delta_translations = rng.normal(size=(k, 3)) * 0.02
    node = ObjectNode(
        track_id=1,
        class_label="car",
        bbox=BoundingBox3D([0.0, 0.0, 0.0], [2.4, 2.4, 2.4]),
        gaussians=obj_gauss,
        trajectory=traj,
    )
    return SceneGraph(background, [node], meta={"up_axis": "z"})


def looking_forward_view():
    """World == camera frame: identity view."""
    return Pose.identity()
