"""Scene-level differentiable rendering.

Forward: compose the scene graph at time t, activate parameters, project
each Gaussian (EWA affine approximation with screen-space dilation),
evaluate view- and time-dependent colors, and blend with the tile
rasterizer. Backward: exact adjoint of that whole chain, producing
gradients for means, log-scales, rotations, opacity logits, static SH
coefficients, wavelet weights/scales/translations and, when trajectory
refinement is enabled, per-sample SE(3) pose deltas.

Object view directions are expressed in the object frame (appearance is
attached to the rigid body); object occupancy statistics are averaged
over the projected 3D-box hull by default, using the annotated pose so
the support never depends on learnable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .appearance import ricker_with_grads, sh_basis, sh_basis_gradient
from .geom import (
    CameraModel,
    Pose,
    normalize_quaternion,
    quat_exp_jacobian,
    quat_left_matrix,
    quat_right_matrix,
    quat_to_matrix,
    quat_to_matrix_jacobian,
)
from .rasterizer import (
    RasterSettings,
    RenderOutput,
    SplatBatch,
    rasterize_backward,
    rasterize_forward,
    rasterize_reference,
)
from .scenegraph import (
    BACKGROUND_NODE,
    ComposedScene,
    SceneGraph,
    StaticAppearance,
    compose,
    pose_at,
)

Array = np.ndarray


def convex_hull_mask(points: Array, height: int, width: int) -> Array:
    """Filled convex hull of 2-D points over the integer pixel grid."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return np.zeros((height, width), dtype=bool)
    # Andrew's monotone chain, counter-clockwise hull
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(points_iter):
        chain: list[Array] = []
        for p in points_iter:
            while len(chain) >= 2 and np.cross(
                chain[-1] - chain[-2], p - chain[-2]
            ) <= 0:
                chain.pop()
            chain.append(p)
        return chain

    hull = half(pts)[:-1] + half(pts[::-1])[:-1]
    if len(hull) < 3:
        return np.zeros((height, width), dtype=bool)
    hull_arr = np.array(hull)
    ys, xs = np.mgrid[0:height, 0:width]
    mask = np.ones((height, width), dtype=bool)
    for i in range(len(hull_arr)):
        x0, y0 = hull_arr[i]
        x1, y1 = hull_arr[(i + 1) % len(hull_arr)]
        mask &= (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0.0
    return mask


def box_support_mask(
    node, t: float, view: Pose, cam: CameraModel
) -> Array | None:
    """Pixels covered by the object's projected 3D box at time t, from the
    annotated trajectory (learnable deltas excluded so the support set is
    parameter independent). None when fewer than 3 corners are visible."""
    traj = node.trajectory
    times = traj.times
    idx = int(np.searchsorted(times, t))
    base = None
    if idx < len(times) and abs(times[idx] - t) <= 1e-12:
        base = Pose(normalize_quaternion(traj.rotations[idx]), traj.translations[idx])
    elif idx > 0 and abs(times[idx - 1] - t) <= 1e-12:
        base = Pose(
            normalize_quaternion(traj.rotations[idx - 1]), traj.translations[idx - 1]
        )
    else:
        base = pose_at(traj, t)
    if base is None:
        return None
    corners_cam = view.apply(base.apply(node.bbox.corners()))
    visible = corners_cam[:, 2] > cam.near
    if visible.sum() < 3:
        return None
    vis = corners_cam[visible]
    px = np.stack(
        [cam.fx * vis[:, 0] / vis[:, 2] + cam.cx, cam.fy * vis[:, 1] / vis[:, 2] + cam.cy],
        axis=1,
    )
    mask = convex_hull_mask(px, cam.height, cam.width)
    return mask if mask.any() else None


@dataclass
class NodeAppearanceState:
    """Per-node intermediates of the color evaluation, kept for backward."""

    kind: str                      # "static" | "wavelet"
    degree: int
    dir_world: Array               # (n, 3) unit camera-to-gaussian
    dir_norm: Array                # (n,) length before normalization
    dir_eval: Array                # direction in the appearance frame
    basis: Array                   # (n, k)
    coeffs: Array                  # (n, 3, k) effective coefficients at t
    raw: Array                     # (n, 3) pre-offset colors
    time: float                    # appearance time used


@dataclass
class RenderContext:
    """Forward state retained for the analytic backward pass."""

    scene: SceneGraph
    composed: ComposedScene
    view: Pose
    cam: CameraModel
    settings: RasterSettings
    background: Array
    time: float
    kept: Array                    # composed indices that survived culling
    batch: SplatBatch
    support_masks: dict | None
    output: RenderOutput
    # activations / projection intermediates over kept splats
    p_cam: Array
    jw: Array                      # (m, 2, 3) J @ W
    jacobian: Array                # (m, 2, 3) projection jacobian
    cov_world: Array               # (m, 3, 3)
    scales_sq: Array               # (m, 3) exp(2 log_scales)
    rot_world: Array               # (m, 4) unit world quaternions
    rot_world_mat: Array           # (m, 3, 3)
    alphas: Array                  # (m,) sigmoid(opacity_logit)
    appearance: dict               # node index -> NodeAppearanceState
    pose_sample: dict              # node index -> trajectory sample index


@dataclass
class ParamGrads:
    """Gradients for one node's parameter arrays (matching storage)."""

    means: Array
    log_scales: Array
    rotations: Array
    opacity_logits: Array
    sh: Array | None = None
    wavelet_w: Array | None = None
    wavelet_log_a: Array | None = None
    wavelet_b: Array | None = None
    pose_translations: Array | None = None
    pose_rotvecs: Array | None = None
    # screen-space positional gradient norms, consumed by density control
    screen: Array | None = None


@dataclass
class SceneGrads:
    background: ParamGrads
    objects: dict = field(default_factory=dict)   # track_id -> ParamGrads


def _node_appearance(
    composed: ComposedScene,
    node_index: int,
    local_idx: Array,
    means_world: Array,
    cam_center: Array,
    t: float,
) -> NodeAppearanceState:
    source = composed.sources[node_index]
    node = composed.nodes[node_index]
    pose = composed.poses[node_index]
    app = source.appearance
    vec = means_world - cam_center
    norm = np.linalg.norm(vec, axis=1)
    norm = np.maximum(norm, 1e-12)
    dir_world = vec / norm[:, None]
    if node_index == 0:
        dir_eval = dir_world
    else:
        dir_eval = dir_world @ quat_to_matrix(pose.rotation)  # R^T d
    basis = sh_basis(dir_eval, app.degree)
    t_app = t if node is None else node.appearance_time(t)
    if isinstance(app, StaticAppearance):
        coeffs = app.coeffs[local_idx]
        kind = "static"
    else:
        if app.shared:
            weights, log_a, b = app.weights, app.log_scales, app.translations
        else:
            weights = app.weights[local_idx]
            log_a = app.log_scales[local_idx]
            b = app.translations[local_idx]
        psi, _, _ = ricker_with_grads(t_app, np.exp(log_a), b)
        coeffs = np.sum(weights * psi, axis=-1)
        if app.shared:
            coeffs = np.broadcast_to(coeffs, (len(means_world), 3, coeffs.shape[-1]))
        kind = "wavelet"
    raw = np.einsum("nck,nk->nc", coeffs, basis)
    return NodeAppearanceState(
        kind, app.degree, dir_world, norm, dir_eval, basis, coeffs, raw, t_app
    )


def cull_and_project(
    composed: ComposedScene,
    view: Pose,
    cam: CameraModel,
    settings: RasterSettings | None = None,
):
    """Project a composed world-frame set into screen-space splats.

    Drops Gaussians behind the near plane (or past far) and, when an
    extent is configured, those whose 3-sigma screen AABB misses the
    image. Colors are evaluated at the camera-to-Gaussian direction and
    the composed time. Returns (batch, kept indices, appearance states,
    projection intermediates).
    """
    settings = settings or RasterSettings()
    r_view = view.rotation_matrix()
    cam_center = view.inverse().translation
    p_cam_all = composed.means @ r_view.T + view.translation
    in_front = (p_cam_all[:, 2] > cam.near) & (p_cam_all[:, 2] < cam.far)

    kept = np.flatnonzero(in_front)
    p_cam = p_cam_all[kept]
    z = p_cam[:, 2]
    mean2d = np.stack(
        [cam.fx * p_cam[:, 0] / z + cam.cx, cam.fy * p_cam[:, 1] / z + cam.cy], axis=1
    )
    rot_world = normalize_quaternion(composed.rotations[kept])
    rot_mat = quat_to_matrix(rot_world)
    scales_sq = np.exp(2.0 * composed.log_scales[kept])
    cov_world = np.einsum(
        "nij,nj,nkj->nik", rot_mat, scales_sq, rot_mat
    )
    jac = np.zeros((len(kept), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * p_cam[:, 0] / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * p_cam[:, 1] / (z * z)
    jw = jac @ r_view
    cov2d = np.einsum("nij,njk,nlk->nil", jw, cov_world, jw)
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation

    if settings.extent_sigma is not None:
        a = cov2d[:, 0, 0]
        b = 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0])
        c = cov2d[:, 1, 1]
        lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
        radius = settings.extent_sigma * np.sqrt(lam_max)
        on_screen = (
            (mean2d[:, 0] + radius >= 0.0)
            & (mean2d[:, 0] - radius <= cam.width - 1.0)
            & (mean2d[:, 1] + radius >= 0.0)
            & (mean2d[:, 1] - radius <= cam.height - 1.0)
        )
        keep2 = np.flatnonzero(on_screen)
        kept = kept[keep2]
        p_cam = p_cam[keep2]
        mean2d = mean2d[keep2]
        rot_world = rot_world[keep2]
        rot_mat = rot_mat[keep2]
        scales_sq = scales_sq[keep2]
        cov_world = cov_world[keep2]
        jac = jac[keep2]
        jw = jw[keep2]
        cov2d = cov2d[keep2]

    alphas = 1.0 / (1.0 + np.exp(-composed.opacity_logits[kept]))
    colors = np.zeros((len(kept), 3))
    appearance: dict[int, NodeAppearanceState] = {}
    kept_nodes = composed.node_ids[kept]
    for node_index in range(len(composed.node_keys)):
        sel = np.flatnonzero(kept_nodes == node_index)
        if len(sel) == 0:
            continue
        local_idx = kept[sel] - composed.node_slices[node_index].start
        state = _node_appearance(
            composed,
            node_index,
            local_idx,
            composed.means[kept[sel]],
            cam_center,
            composed.time,
        )
        colors[sel] = np.clip(state.raw + 0.5, 0.0, 1.0)
        appearance[node_index] = state

    batch = SplatBatch(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=p_cam[:, 2].copy(),
        color=colors,
        alpha=alphas,
        node_id=kept_nodes.astype(np.int64),
        source=kept.astype(np.int64),
    )
    extras = {
        "p_cam": p_cam,
        "jacobian": jac,
        "jw": jw,
        "cov_world": cov_world,
        "scales_sq": scales_sq,
        "rot_world": rot_world,
        "rot_world_mat": rot_mat,
        "alphas": alphas,
    }
    return batch, kept, appearance, extras


def render_scene(
    scene: SceneGraph,
    view: Pose,
    cam: CameraModel,
    t: float,
    settings: RasterSettings | None = None,
    background=(0.0, 0.0, 0.0),
    beta_support: str = "box",
    use_reference: bool = False,
) -> tuple[RenderOutput, RenderContext]:
    """Render the scene graph at time t. Returns the image outputs plus
    the context needed to run render_backward."""
    settings = settings or RasterSettings()
    composed = compose(scene, t)
    batch, kept, appearance, extras = cull_and_project(
        composed, view, cam, settings
    )
    support = None
    if beta_support == "box":
        support = {}
        for node_index, node in enumerate(composed.nodes):
            if node is None:
                continue
            mask = box_support_mask(node, t, view, cam)
            if mask is not None:
                support[node_index] = mask
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if use_reference:
        output = rasterize_reference(batch, cam, bg, support_masks=support)
    else:
        output = rasterize_forward(batch, cam, bg, settings, support_masks=support)

    # re-key betas by track id, dropping the background entry
    keyed = {}
    for node_index, beta in output.per_object_beta.items():
        key = composed.node_keys[node_index]
        if key != BACKGROUND_NODE:
            keyed[key] = beta
    output.per_object_beta = keyed

    pose_sample: dict[int, int] = {}
    for node_index, node in enumerate(composed.nodes):
        if node is None or not node.trajectory.refine:
            continue
        times = node.trajectory.times
        idx = int(np.searchsorted(times, t))
        for cand in (idx, idx - 1):
            if 0 <= cand < len(times) and abs(times[cand] - t) <= 1e-12:
                pose_sample[node_index] = cand
                break

    ctx = RenderContext(
        scene=scene,
        composed=composed,
        view=view,
        cam=cam,
        settings=settings,
        background=bg,
        time=t,
        kept=kept,
        batch=batch,
        support_masks=support,
        output=output,
        p_cam=extras["p_cam"],
        jw=extras["jw"],
        jacobian=extras["jacobian"],
        cov_world=extras["cov_world"],
        scales_sq=extras["scales_sq"],
        rot_world=extras["rot_world"],
        rot_world_mat=extras["rot_world_mat"],
        alphas=extras["alphas"],
        appearance=appearance,
        pose_sample=pose_sample,
    )
    return output, ctx


def _empty_grads_for(source) -> ParamGrads:
    grads = ParamGrads(
        means=np.zeros_like(source.means),
        log_scales=np.zeros_like(source.log_scales),
        rotations=np.zeros_like(source.rotations),
        opacity_logits=np.zeros_like(source.opacity_logits),
    )
    app = source.appearance
    if isinstance(app, StaticAppearance):
        grads.sh = np.zeros_like(app.coeffs)
    else:
        grads.wavelet_w = np.zeros_like(app.weights)
        grads.wavelet_log_a = np.zeros_like(app.log_scales)
        grads.wavelet_b = np.zeros_like(app.translations)
    return grads


def render_backward(
    ctx: RenderContext,
    grad_color: Array,
    grad_depth: Array | None = None,
    grad_accum: Array | None = None,
    grad_beta: dict | None = None,
) -> SceneGrads:
    """Exact adjoint of render_scene for the given output gradients.

    grad_beta is keyed by track id. Gradients are returned per node in
    the storage layout of the underlying parameter arrays; splats culled
    in the forward pass contribute nothing.
    """
    composed = ctx.composed
    cam = ctx.cam
    kept = ctx.kept
    m = len(kept)

    grad_beta_nodes = None
    if grad_beta:
        grad_beta_nodes = {}
        for node_index, key in enumerate(composed.node_keys):
            if key in grad_beta:
                grad_beta_nodes[node_index] = grad_beta[key]

    splat_grads = rasterize_backward(
        ctx.batch,
        cam,
        grad_color=grad_color,
        grad_depth=grad_depth,
        grad_accum=grad_accum,
        grad_beta=grad_beta_nodes,
        background_color=ctx.background,
        settings=ctx.settings,
        support_masks=ctx.support_masks,
    )

    # ------- chain from splat space back to 3-D parameters (kept splats)
    d_mean2d = splat_grads.mean2d
    d_cov2d = splat_grads.cov2d
    d_alpha = splat_grads.alpha
    d_color = splat_grads.color
    d_depth = splat_grads.depth

    p_cam = ctx.p_cam
    z = p_cam[:, 2]
    jac = ctx.jacobian
    jw = ctx.jw
    cov_world = ctx.cov_world

    g_c = 0.5 * (d_cov2d + np.swapaxes(d_cov2d, 1, 2))
    d_cov_world = np.einsum("nji,njk,nkl->nil", jw, g_c, jw)
    d_jw = 2.0 * np.einsum("nij,njk,nkl->nil", g_c, jw, cov_world)
    d_jac = d_jw @ ctx.view.rotation_matrix().T

    # projection jacobian entries as functions of the camera-space point
    fx, fy = cam.fx, cam.fy
    x, y = p_cam[:, 0], p_cam[:, 1]
    z2 = z * z
    z3 = z2 * z
    d_pcam = np.zeros((m, 3))
    d_pcam[:, 0] -= d_jac[:, 0, 2] * fx / z2
    d_pcam[:, 1] -= d_jac[:, 1, 2] * fy / z2
    d_pcam[:, 2] += (
        -d_jac[:, 0, 0] * fx / z2
        - d_jac[:, 1, 1] * fy / z2
        + d_jac[:, 0, 2] * 2.0 * fx * x / z3
        + d_jac[:, 1, 2] * 2.0 * fy * y / z3
    )
    d_pcam += np.einsum("nji,nj->ni", jac, d_mean2d)
    d_pcam[:, 2] += d_depth
    d_means_world = d_pcam @ ctx.view.rotation_matrix()

    # covariance chain: Sigma = R diag(s^2) R^T
    rot_mat = ctx.rot_world_mat
    d_diag = np.einsum("nji,njk,nki->ni", rot_mat, d_cov_world, rot_mat)
    d_log_scales = d_diag * 2.0 * ctx.scales_sq
    d_rot_mat = 2.0 * np.einsum("nij,njk,nk->nik", d_cov_world, rot_mat, ctx.scales_sq)
    rot_jac = quat_to_matrix_jacobian(ctx.rot_world)
    d_qworld = np.einsum("nqij,nij->nq", rot_jac, d_rot_mat)

    # opacity chain
    d_logits = d_alpha * ctx.alphas * (1.0 - ctx.alphas)

    # ------- appearance chain per node
    kept_nodes = composed.node_ids[kept]
    d_coeffs_by_node: dict[int, Array] = {}
    d_dir_eval_by_node: dict[int, Array] = {}
    for node_index, state in ctx.appearance.items():
        sel = np.flatnonzero(kept_nodes == node_index)
        if len(sel) == 0:
            continue
        d_col = d_color[sel]
        interior = (state.raw > -0.5) & (state.raw < 0.5)
        d_raw = d_col * interior
        d_coeff = np.einsum("nc,nk->nck", d_raw, state.basis)
        d_basis = np.einsum("nc,nck->nk", d_raw, state.coeffs)
        basis_grad = sh_basis_gradient(state.dir_eval, state.degree)
        d_dir_eval = np.einsum("nk,nkd->nd", d_basis, basis_grad)
        pose = composed.poses[node_index]
        if node_index == 0:
            d_dir_world = d_dir_eval
        else:
            d_dir_world = d_dir_eval @ quat_to_matrix(pose.rotation).T
        # normalize adjoint: d v = (I - n n^T)/|v| d n
        n_dir = state.dir_world
        proj = d_dir_world - n_dir * np.sum(n_dir * d_dir_world, axis=1, keepdims=True)
        d_means_world[sel] += proj / state.dir_norm[:, None]
        d_coeffs_by_node[node_index] = d_coeff
        d_dir_eval_by_node[node_index] = d_dir_eval

    # ------- distribute to nodes
    scene = ctx.scene
    out = SceneGrads(background=_empty_grads_for(scene.background))
    node_grads: dict[int, ParamGrads] = {0: out.background}
    for node_index in range(1, len(composed.node_keys)):
        node = composed.nodes[node_index]
        grads = _empty_grads_for(node.gaussians)
        if node.trajectory.refine:
            grads.pose_translations = np.zeros_like(node.trajectory.delta_translations)
            grads.pose_rotvecs = np.zeros_like(node.trajectory.delta_rotvecs)
        out.objects[composed.node_keys[node_index]] = grads
        node_grads[node_index] = grads

    for node_index, grads in node_grads.items():
        sel = np.flatnonzero(kept_nodes == node_index)
        node_slice = composed.node_slices[node_index]
        local_idx = kept[sel] - node_slice.start
        source = composed.sources[node_index]
        pose = composed.poses[node_index]
        node = composed.nodes[node_index]

        grads.screen = np.zeros(source.n)
        np.add.at(
            grads.screen, local_idx, np.linalg.norm(d_mean2d[sel], axis=-1)
        )

        d_mu_w = d_means_world[sel]
        d_qw = d_qworld[sel]

        if node_index == 0:
            np.add.at(grads.means, local_idx, d_mu_w)
            d_qlocal_unit = d_qw
        else:
            rot_pose = quat_to_matrix(pose.rotation)
            np.add.at(grads.means, local_idx, d_mu_w @ rot_pose)
            # q_world = q_pose * q_local_unit
            d_qlocal_unit = d_qw @ quat_left_matrix(pose.rotation)

        # through local quaternion normalization
        q_raw = source.rotations[local_idx]
        q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
        q_unit = q_raw / q_norm
        d_qraw = (
            d_qlocal_unit
            - q_unit * np.sum(q_unit * d_qlocal_unit, axis=1, keepdims=True)
        ) / q_norm
        np.add.at(grads.rotations, local_idx, d_qraw)
        np.add.at(grads.log_scales, local_idx, d_log_scales[sel])
        np.add.at(grads.opacity_logits, local_idx, d_logits[sel])

        # appearance parameters
        d_coeff = d_coeffs_by_node.get(node_index)
        if d_coeff is not None:
            app = source.appearance
            if isinstance(app, StaticAppearance):
                np.add.at(grads.sh, local_idx, d_coeff)
            else:
                state = ctx.appearance[node_index]
                if app.shared:
                    a_log = app.log_scales
                    b = app.translations
                    w = app.weights
                else:
                    a_log = app.log_scales[local_idx]
                    b = app.translations[local_idx]
                    w = app.weights[local_idx]
                a_val = np.exp(a_log)
                psi, dpsi_da, dpsi_db = ricker_with_grads(state.time, a_val, b)
                dc = d_coeff[..., None]
                if app.shared:
                    grads.wavelet_w[0] += np.sum(dc * psi, axis=0)
                    grads.wavelet_log_a[0] += np.sum(
                        dc * w * dpsi_da * a_val, axis=0
                    )
                    grads.wavelet_b[0] += np.sum(dc * w * dpsi_db, axis=0)
                else:
                    np.add.at(grads.wavelet_w, local_idx, dc * psi)
                    np.add.at(
                        grads.wavelet_log_a, local_idx, dc * w * dpsi_da * a_val
                    )
                    np.add.at(grads.wavelet_b, local_idx, dc * w * dpsi_db)

        # optional pose-delta gradients (only at exact trajectory samples)
        if node_index in ctx.pose_sample and grads.pose_rotvecs is not None:
            sample = ctx.pose_sample[node_index]
            traj = node.trajectory
            pose_jac = quat_to_matrix_jacobian(pose.rotation)
            d_tpose = d_mu_w.sum(axis=0)
            d_qpose = np.zeros(4)
            if len(sel):
                # through the quaternion product q_world = q_pose * q_local
                q_local_unit = normalize_quaternion(source.rotations[local_idx])
                d_qpose += np.einsum(
                    "nq,nqp->p",
                    d_qw,
                    np.stack([quat_right_matrix(q) for q in q_local_unit], axis=0),
                )
                # through the mean transform mu_w = R(q_pose) mu_local + t
                outer_mu = np.einsum("ni,nj->ij", d_mu_w, source.means[local_idx])
                d_qpose += np.einsum("qij,ij->q", pose_jac, outer_mu)
                # through the object-frame view directions
                d_dir_eval = d_dir_eval_by_node.get(node_index)
                if d_dir_eval is not None:
                    state = ctx.appearance[node_index]
                    outer_dir = np.einsum("ni,nj->ij", state.dir_world, d_dir_eval)
                    d_qpose += np.einsum("qij,ij->q", pose_jac, outer_dir)
            rv = traj.delta_rotvecs[sample]
            base_q = normalize_quaternion(traj.rotations[sample])
            d_qexp = quat_right_matrix(base_q).T @ d_qpose
            grads.pose_rotvecs[sample] += quat_exp_jacobian(rv).T @ d_qexp
            grads.pose_translations[sample] += d_tpose

    return out
