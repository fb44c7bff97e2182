"""Finite-difference harness for the differentiable render pipeline.

A scalar probe loss contracts the render outputs with fixed random
projection fields, so every output channel (color, depth, accumulation,
per-object occupancy) exercises its gradient path. Central differences on
the raw stored parameters are compared against the analytic backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wavegs.rasterizer import RasterSettings
from wavegs.render import render_backward, render_scene
from wavegs.scenegraph import SceneGraph, StaticAppearance


@dataclass
class Probe:
    """Fixed contraction fields defining the scalar loss."""

    w_color: np.ndarray
    w_depth: np.ndarray
    w_accum: np.ndarray
    w_beta: dict

    @staticmethod
    def create(rng, cam, track_ids, accum=None, use_depth=True, use_beta=True):
        """accum, when given, masks the depth weights to well-covered
        pixels (mirrors the masked depth loss; the normalized depth is
        meaningless and violently nonlinear where nothing rendered)."""
        w_depth = rng.normal(size=(cam.height, cam.width)) * (0.2 if use_depth else 0.0)
        if accum is not None:
            w_depth = w_depth * (accum > 0.3)
        return Probe(
            w_color=rng.normal(size=(cam.height, cam.width, 3)),
            w_depth=w_depth,
            w_accum=rng.normal(size=(cam.height, cam.width)) * 0.2,
            w_beta={tid: (rng.normal() if use_beta else 0.0) for tid in track_ids},
        )


def probe_loss(scene, view, cam, t, probe, settings, support=None):
    output, ctx = render_scene(
        scene, view, cam, t, settings=settings, beta_support="box"
    )
    value = float(
        np.sum(output.color * probe.w_color)
        + np.sum(output.depth * probe.w_depth)
        + np.sum(output.accum * probe.w_accum)
        + sum(
            probe.w_beta.get(tid, 0.0) * beta
            for tid, beta in output.per_object_beta.items()
        )
    )
    return value, ctx


def analytic_grads(scene, view, cam, t, probe, settings):
    _, ctx = probe_loss(scene, view, cam, t, probe, settings)
    return render_backward(
        ctx,
        grad_color=probe.w_color,
        grad_depth=probe.w_depth,
        grad_accum=probe.w_accum,
        grad_beta=probe.w_beta,
    )


def _param_arrays(scene: SceneGraph):
    """(label, array, analytic-extractor) triples over every stored
    parameter class in the scene."""
    entries = [
        ("bg.means", scene.background.means, lambda g: g.background.means),
        ("bg.log_scales", scene.background.log_scales, lambda g: g.background.log_scales),
        ("bg.rotations", scene.background.rotations, lambda g: g.background.rotations),
        ("bg.opacity", scene.background.opacity_logits, lambda g: g.background.opacity_logits),
    ]
    if isinstance(scene.background.appearance, StaticAppearance):
        entries.append(("bg.sh", scene.background.appearance.coeffs, lambda g: g.background.sh))
    for node in scene.objects:
        tid = node.track_id
        gauss = node.gaussians
        entries += [
            (f"obj{tid}.means", gauss.means, lambda g, t=tid: g.objects[t].means),
            (f"obj{tid}.log_scales", gauss.log_scales, lambda g, t=tid: g.objects[t].log_scales),
            (f"obj{tid}.rotations", gauss.rotations, lambda g, t=tid: g.objects[t].rotations),
            (f"obj{tid}.opacity", gauss.opacity_logits, lambda g, t=tid: g.objects[t].opacity_logits),
        ]
        app = gauss.appearance
        if isinstance(app, StaticAppearance):
            entries.append((f"obj{tid}.sh", app.coeffs, lambda g, t=tid: g.objects[t].sh))
        else:
            entries += [
                (f"obj{tid}.wavelet_w", app.weights, lambda g, t=tid: g.objects[t].wavelet_w),
                (f"obj{tid}.wavelet_log_a", app.log_scales, lambda g, t=tid: g.objects[t].wavelet_log_a),
                (f"obj{tid}.wavelet_b", app.translations, lambda g, t=tid: g.objects[t].wavelet_b),
            ]
        if node.trajectory.refine:
            entries += [
                (f"obj{tid}.pose_t", node.trajectory.delta_translations,
                 lambda g, t=tid: g.objects[t].pose_translations),
                (f"obj{tid}.pose_r", node.trajectory.delta_rotvecs,
                 lambda g, t=tid: g.objects[t].pose_rotvecs),
            ]
    return entries


def check_gradients(
    scene,
    view,
    cam,
    t,
    probe,
    settings=None,
    rng=None,
    samples_per_class=6,
    step=1e-4,
    rel_tol=1e-3,
    abs_floor=1e-8,
):
    """Compare analytic gradients against central differences.

    Samples a deterministic subset of scalars per parameter class.
    Returns a list of (label, analytic, numeric, error) failures; empty
    means the check passed.
    """
    settings = settings or RasterSettings.oracle()
    rng = rng or np.random.default_rng(0)
    grads = analytic_grads(scene, view, cam, t, probe, settings)
    failures = []
    for label, array, extract in _param_arrays(scene):
        g_analytic = extract(grads)
        flat = array.reshape(-1)
        count = min(samples_per_class, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        for pick in picks:
            original = flat[pick]
            flat[pick] = original + step
            up, _ = probe_loss(scene, view, cam, t, probe, settings)
            flat[pick] = original - step
            down, _ = probe_loss(scene, view, cam, t, probe, settings)
            flat[pick] = original
            numeric = (up - down) / (2.0 * step)
            analytic = g_analytic.reshape(-1)[pick]
            err = abs(numeric - analytic)
            scale = max(abs(numeric), abs(analytic))
            if err > abs_floor and err > rel_tol * scale:
                failures.append((f"{label}[{pick}]", analytic, numeric, err))
    return failures
