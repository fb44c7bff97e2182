"""Losses, image metrics, Adam, density control, and the training loop.

The composite training objective is the sum of a color term (L1 mixed
with SSIM), an L1 depth term over LiDAR-covered pixels, and an entropy
term that pushes each object's accumulated occupancy toward 0 or 1. All
losses come with analytic gradient seeds for the render backward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from . import io
from .rasterizer import RasterSettings, RenderOutput
from .render import render_backward, render_scene
from .scenegraph import (
    SceneGraph,
    StaticAppearance,
    WaveletAppearance,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

Array = np.ndarray

ENTROPY_EPS = 1e-6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    # loss weights: lambda_c mixes SSIM into the color term; depth and
    # occupancy-entropy terms are scaled by lambda_d / lambda_a
    lambda_c: float = 0.2
    lambda_d: float = 0.05
    lambda_a: float = 0.01
    # per-class learning rates
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6       # exponential decay target
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacities: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_wavelet: float = 1e-3
    lr_pose: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    wavelet_eps: float = 1e-15
    # density control
    densify_from: int = 300
    densify_until: int = 1500
    densify_interval: int = 150
    densify_grad_threshold: float = 0.03  # mean |dL/d mean2d| in px units
    prune_alpha: float = 0.005
    split_scale_fraction: float = 0.01    # of scene extent
    max_gaussians: int = 200_000
    # model shape
    sh_degree_background: int = 3
    sh_degree_objects: int = 1
    wavelet_dimension: int = 7
    shared_packs: bool = False
    freeze_wavelet_weights: bool = False  # static-appearance control run
    refine_poses: bool = False
    # ingestion
    box_margin: float = 0.1
    voxel_background: float = 0.15
    voxel_object: float = 0.05
    max_init_background: int = 40_000
    max_init_object: int = 4_000
    # run control
    split_fraction: float = 0.75
    seed: int = 0
    eval_interval: int = 250
    checkpoint_interval: int = 1000
    background_color: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ValueError("lambda_c must lie in [0, 1]")
        if self.lambda_d < 0 or self.lambda_a < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        cfg = TrainConfig()
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config key: {key}")
            if isinstance(getattr(cfg, key), tuple):
                value = tuple(value)
            setattr(cfg, key, value)
        cfg.__post_init__()
        return cfg


# ---------------------------------------------------------------------------
# image losses and metrics


def l1_loss(pred: Array, gt: Array) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


def l1_loss_grad(pred: Array, gt: Array) -> Array:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return np.sign(pred - gt) / pred.size


_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> Array:
    xs = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: Array, kernel: Array) -> Array:
    r = len(kernel) // 2
    full = correlate1d(
        correlate1d(img, kernel, axis=0, mode="constant"), kernel, axis=1,
        mode="constant",
    )
    return full[r:-r, r:-r]


def _filter_valid_adjoint(grad: Array, kernel: Array, shape) -> Array:
    r = len(kernel) // 2
    padded = np.zeros(shape)
    padded[r : shape[0] - r, r : shape[1] - r] = grad
    return correlate1d(
        correlate1d(padded, kernel, axis=0, mode="constant"), kernel, axis=1,
        mode="constant",
    )


def _ssim_fields(pred_c: Array, gt_c: Array, kernel: Array):
    mu_x = _filter_valid(pred_c, kernel)
    mu_y = _filter_valid(gt_c, kernel)
    ex2 = _filter_valid(pred_c * pred_c, kernel)
    ey2 = _filter_valid(gt_c * gt_c, kernel)
    exy = _filter_valid(pred_c * gt_c, kernel)
    var_x = ex2 - mu_x * mu_x
    var_y = ey2 - mu_y * mu_y
    cov = exy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + _SSIM_C1
    a2 = 2.0 * cov + _SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + _SSIM_C1
    b2 = var_x + var_y + _SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim(pred: Array, gt: Array) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), standard
    stabilizers on unit dynamic range, averaged over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[..., None]
        gt = gt[..., None]
    kernel = _gaussian_window()
    if pred.shape[0] < len(kernel) or pred.shape[1] < len(kernel):
        raise ValueError("images smaller than the SSIM window")
    total = 0.0
    for c in range(pred.shape[2]):
        _, _, a1, a2, b1, b2 = _ssim_fields(pred[..., c], gt[..., c], kernel)
        total += float(np.mean(a1 * a2 / (b1 * b2)))
    return total / pred.shape[2]


def ssim_loss(pred: Array, gt: Array) -> float:
    """1 - SSIM; lies in [0, 2]."""
    return 1.0 - ssim(pred, gt)


def ssim_loss_grad(pred: Array, gt: Array) -> Array:
    """d(1 - SSIM)/d(pred), analytic adjoint of the windowed statistics."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    squeeze = pred.ndim == 2
    if squeeze:
        pred = pred[..., None]
        gt = gt[..., None]
    kernel = _gaussian_window()
    h, w, channels = pred.shape
    grad = np.zeros_like(pred)
    n_windows = (h - len(kernel) + 1) * (w - len(kernel) + 1) * channels
    for c in range(channels):
        x = pred[..., c]
        y = gt[..., c]
        mu_x, mu_y, a1, a2, b1, b2 = _ssim_fields(x, y, kernel)
        u = 1.0 / (b1 * b2)
        s = a1 * a2 * u
        # loss = 1 - mean(S): upstream weight per window
        gw = -1.0 / n_windows
        d_mu = gw * (2.0 * mu_y * a2 * u - 2.0 * mu_x * s / b1)
        d_varx = gw * (-s / b2)
        d_cov = gw * (2.0 * a1 * u)
        # var_x = Ex2 - mu_x^2, cov = Exy - mu_x mu_y
        d_mu = d_mu + d_varx * (-2.0 * mu_x) + d_cov * (-mu_y)
        d_ex2 = d_varx
        d_exy = d_cov
        grad[..., c] = (
            _filter_valid_adjoint(d_mu, kernel, (h, w))
            + _filter_valid_adjoint(d_ex2, kernel, (h, w)) * 2.0 * x
            + _filter_valid_adjoint(d_exy, kernel, (h, w)) * y
        )
    return grad[..., 0] if squeeze else grad


def color_loss(pred: Array, gt: Array, lambda_c: float) -> float:
    """(1 - lambda_c) L1 + lambda_c (1 - SSIM)."""
    if not 0.0 <= lambda_c <= 1.0:
        raise ValueError("lambda_c must lie in [0, 1]")
    return (1.0 - lambda_c) * l1_loss(pred, gt) + lambda_c * ssim_loss(pred, gt)


def depth_loss(
    pred: Array, gt: Array, mask: Array, lambda_d: float
) -> float:
    """lambda_d * mean |gt - pred| over masked (LiDAR-covered) pixels."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        logger.warning("depth loss: empty validity mask, returning 0")
        return 0.0
    return float(lambda_d * np.mean(np.abs(gt[mask] - pred[mask])))


def depth_loss_grad(pred: Array, gt: Array, mask: Array, lambda_d: float) -> Array:
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(np.asarray(pred, dtype=np.float64))
    count = int(mask.sum())
    if count == 0:
        return grad
    grad[mask] = lambda_d * np.sign(pred[mask] - gt[mask]) / count
    return grad


def binary_entropy(beta: float) -> float:
    b = min(max(beta, ENTROPY_EPS), 1.0 - ENTROPY_EPS)
    return float(-(b * np.log(b) + (1.0 - b) * np.log(1.0 - b)))


def accum_loss(betas, lambda_a: float) -> float:
    """lambda_a * mean over objects of the occupancy entropy."""
    betas = list(betas)
    if not betas:
        return 0.0
    return float(lambda_a * np.mean([binary_entropy(b) for b in betas]))


def accum_loss_grad(betas: dict, lambda_a: float) -> dict:
    if not betas:
        return {}
    scale = lambda_a / len(betas)
    out = {}
    for key, beta in betas.items():
        if ENTROPY_EPS < beta < 1.0 - ENTROPY_EPS:
            out[key] = scale * float(np.log((1.0 - beta) / beta))
        else:
            out[key] = 0.0
    return out


@dataclass
class LossBreakdown:
    total: float
    color: float
    l1: float
    ssim_term: float
    depth: float
    accum: float


@dataclass
class LossSeeds:
    """Gradients of the scalar loss w.r.t. the render outputs."""

    d_color: Array
    d_depth: Array
    d_beta: dict


def total_loss(
    output: RenderOutput,
    gt_image: Array,
    gt_depth: Array | None,
    depth_mask: Array | None,
    cfg: TrainConfig,
) -> tuple[LossBreakdown, LossSeeds]:
    """Composite loss: color + depth + occupancy entropy, plus its
    gradient seeds for the backward pass."""
    pred = output.color
    v_l1 = l1_loss(pred, gt_image)
    v_ssim = ssim_loss(pred, gt_image)
    v_color = (1.0 - cfg.lambda_c) * v_l1 + cfg.lambda_c * v_ssim
    d_color = (1.0 - cfg.lambda_c) * l1_loss_grad(pred, gt_image)
    if cfg.lambda_c > 0.0:
        d_color = d_color + cfg.lambda_c * ssim_loss_grad(pred, gt_image)

    if gt_depth is not None and depth_mask is not None:
        v_depth = depth_loss(output.depth, gt_depth, depth_mask, cfg.lambda_d)
        d_depth = depth_loss_grad(output.depth, gt_depth, depth_mask, cfg.lambda_d)
    else:
        v_depth = 0.0
        d_depth = np.zeros_like(output.depth)

    v_accum = accum_loss(output.per_object_beta.values(), cfg.lambda_a)
    d_beta = accum_loss_grad(output.per_object_beta, cfg.lambda_a)

    breakdown = LossBreakdown(
        total=v_color + v_depth + v_accum,
        color=v_color,
        l1=v_l1,
        ssim_term=v_ssim,
        depth=v_depth,
        accum=v_accum,
    )
    return breakdown, LossSeeds(d_color, d_depth, d_beta)


def psnr(pred: Array, gt: Array) -> float:
    """10 log10(1 / MSE) on unit range, capped at 100 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 1e-10:
        return 100.0
    return min(100.0, float(10.0 * np.log10(1.0 / mse)))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: Array
    v: Array
    step: int = 0

    @staticmethod
    def like(param: Array) -> "AdamState":
        return AdamState(np.zeros_like(param), np.zeros_like(param))


def adam_step(
    param: Array,
    grad: Array,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> int:
    """Bias-corrected Adam update in place. Non-finite gradient entries
    are skipped (their moments untouched); returns how many were skipped."""
    finite = np.isfinite(grad)
    skipped = int(grad.size - finite.sum())
    g = np.where(finite, grad, 0.0)
    state.step += 1
    state.m[finite] = beta1 * state.m[finite] + (1.0 - beta1) * g[finite]
    state.v[finite] = beta2 * state.v[finite] + (1.0 - beta2) * g[finite] ** 2
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    param -= np.where(finite, update, 0.0)
    return skipped


# ---------------------------------------------------------------------------
# scene-level optimizer plumbing


@dataclass
class ParamBinding:
    array: Array
    lr: float
    eps: float
    decay_final: float | None = None   # means get exponential lr decay


def scene_param_bindings(scene: SceneGraph, cfg: TrainConfig) -> dict[str, ParamBinding]:
    """Name -> live parameter array with its learning-rate policy."""
    bindings: dict[str, ParamBinding] = {}

    def gauss_bindings(prefix: str, gauss):
        bindings[f"{prefix}.means"] = ParamBinding(
            gauss.means, cfg.lr_means, cfg.adam_eps, cfg.lr_means_final
        )
        bindings[f"{prefix}.log_scales"] = ParamBinding(
            gauss.log_scales, cfg.lr_scales, cfg.adam_eps
        )
        bindings[f"{prefix}.rotations"] = ParamBinding(
            gauss.rotations, cfg.lr_rotations, cfg.adam_eps
        )
        bindings[f"{prefix}.opacity_logits"] = ParamBinding(
            gauss.opacity_logits, cfg.lr_opacities, cfg.adam_eps
        )
        app = gauss.appearance
        if isinstance(app, StaticAppearance):
            bindings[f"{prefix}.sh"] = ParamBinding(app.coeffs, cfg.lr_sh, cfg.adam_eps)
        elif not cfg.freeze_wavelet_weights:
            bindings[f"{prefix}.wavelet_w"] = ParamBinding(
                app.weights, cfg.lr_wavelet, cfg.wavelet_eps
            )
            bindings[f"{prefix}.wavelet_log_a"] = ParamBinding(
                app.log_scales, cfg.lr_wavelet, cfg.wavelet_eps
            )
            bindings[f"{prefix}.wavelet_b"] = ParamBinding(
                app.translations, cfg.lr_wavelet, cfg.wavelet_eps
            )

    gauss_bindings("bg", scene.background)
    for node in scene.objects:
        prefix = f"obj{node.track_id}"
        gauss_bindings(prefix, node.gaussians)
        if node.trajectory.refine:
            bindings[f"{prefix}.pose_t"] = ParamBinding(
                node.trajectory.delta_translations, cfg.lr_pose, cfg.adam_eps
            )
            bindings[f"{prefix}.pose_r"] = ParamBinding(
                node.trajectory.delta_rotvecs, cfg.lr_pose, cfg.adam_eps
            )
    return bindings


def grads_to_dict(grads) -> dict[str, Array]:
    """Flatten a SceneGrads into the binding namespace."""
    out = {
        "bg.means": grads.background.means,
        "bg.log_scales": grads.background.log_scales,
        "bg.rotations": grads.background.rotations,
        "bg.opacity_logits": grads.background.opacity_logits,
    }
    if grads.background.sh is not None:
        out["bg.sh"] = grads.background.sh
    for tid, g in grads.objects.items():
        prefix = f"obj{tid}"
        out[f"{prefix}.means"] = g.means
        out[f"{prefix}.log_scales"] = g.log_scales
        out[f"{prefix}.rotations"] = g.rotations
        out[f"{prefix}.opacity_logits"] = g.opacity_logits
        if g.sh is not None:
            out[f"{prefix}.sh"] = g.sh
        if g.wavelet_w is not None:
            out[f"{prefix}.wavelet_w"] = g.wavelet_w
            out[f"{prefix}.wavelet_log_a"] = g.wavelet_log_a
            out[f"{prefix}.wavelet_b"] = g.wavelet_b
        if g.pose_translations is not None:
            out[f"{prefix}.pose_t"] = g.pose_translations
            out[f"{prefix}.pose_r"] = g.pose_rotvecs
    return out


class SceneOptimizer:
    """Adam over every trainable array of a scene, one state per array.

    Learning rates follow the per-class table; means decay exponentially
    to their configured final value over the run. Density control events
    call rebuild() with per-node index maps to carry moments across the
    parameter reshuffle (survivors keep theirs, new Gaussians start cold).
    """

    def __init__(self, scene: SceneGraph, cfg: TrainConfig):
        self.cfg = cfg
        self.bindings = scene_param_bindings(scene, cfg)
        self.states = {
            name: AdamState.like(b.array) for name, b in self.bindings.items()
        }
        self.skipped_grads = 0

    def step(self, grads: dict[str, Array], iteration: int) -> None:
        cfg = self.cfg
        for name, binding in self.bindings.items():
            grad = grads.get(name)
            if grad is None:
                continue
            lr = binding.lr
            if binding.decay_final is not None and cfg.iterations > 1:
                frac = iteration / max(cfg.iterations - 1, 1)
                lr = binding.lr * (binding.decay_final / binding.lr) ** frac
            self.skipped_grads += adam_step(
                binding.array,
                grad,
                self.states[name],
                lr,
                cfg.adam_beta1,
                cfg.adam_beta2,
                binding.eps,
            )
        # rotations are stored free and renormalized after every update
        for name, binding in self.bindings.items():
            if name.endswith(".rotations"):
                norms = np.linalg.norm(binding.array, axis=-1, keepdims=True)
                binding.array /= np.maximum(norms, 1e-12)

    def rebuild(self, scene: SceneGraph, index_maps: dict[str, Array]) -> None:
        """Re-bind after density control. index_maps maps a node prefix
        ("bg" or "obj<tid>") to old-index-per-new-row (-1 for fresh)."""
        new_bindings = scene_param_bindings(scene, self.cfg)
        new_states = {}
        for name, binding in new_bindings.items():
            prefix = name.split(".")[0]
            old_state = self.states.get(name)
            idx = index_maps.get(prefix)
            if old_state is None or idx is None or name.endswith((".pose_t", ".pose_r")):
                new_states[name] = (
                    old_state
                    if old_state is not None
                    and old_state.m.shape == binding.array.shape
                    else AdamState.like(binding.array)
                )
                continue
            if old_state.m.shape == binding.array.shape and name.endswith(
                (".wavelet_w", ".wavelet_log_a", ".wavelet_b")
            ) and binding.array.shape[0] == 1:
                # shared packs are not per-Gaussian: keep state as is
                new_states[name] = old_state
                continue
            m = np.zeros_like(binding.array)
            v = np.zeros_like(binding.array)
            keep = idx >= 0
            m[keep] = old_state.m[idx[keep]]
            v[keep] = old_state.v[idx[keep]]
            new_states[name] = AdamState(m, v, old_state.step)
        self.bindings = new_bindings
        self.states = new_states


# ---------------------------------------------------------------------------
# density control


class DensityStats:
    """Accumulated screen-space positional gradient norms per node."""

    def __init__(self, scene: SceneGraph):
        self.grad_sum: dict[str, Array] = {}
        self.count: dict[str, Array] = {}
        self.reset(scene)

    def reset(self, scene: SceneGraph) -> None:
        self.grad_sum = {"bg": np.zeros(scene.background.n)}
        self.count = {"bg": np.zeros(scene.background.n)}
        for node in scene.objects:
            key = f"obj{node.track_id}"
            self.grad_sum[key] = np.zeros(node.gaussians.n)
            self.count[key] = np.zeros(node.gaussians.n)

    def update(self, grads) -> None:
        entries = [("bg", grads.background)]
        entries += [(f"obj{tid}", g) for tid, g in grads.objects.items()]
        for key, g in entries:
            if g.screen is None:
                continue
            touched = g.screen > 0.0
            self.grad_sum[key][touched] += g.screen[touched]
            self.count[key][touched] += 1.0


def _densify_node(gauss, stats_sum, stats_cnt, cfg, extent, rng):
    """Prune/clone/split one node's Gaussians. Returns (new set, index map)."""
    n = gauss.n
    alphas = gauss.opacities()
    keep = alphas >= cfg.prune_alpha
    avg = np.where(stats_cnt > 0, stats_sum / np.maximum(stats_cnt, 1.0), 0.0)
    dens = keep & (avg > cfg.densify_grad_threshold)
    world_scale = gauss.scales().max(axis=1)
    split = dens & (world_scale > cfg.split_scale_fraction * extent)
    clone = dens & ~split
    base = np.flatnonzero(keep & ~split)
    clone_idx = np.flatnonzero(clone)
    split_idx = np.flatnonzero(split)

    budget = cfg.max_gaussians - (len(base) + n)
    if len(clone_idx) + 2 * len(split_idx) > max(budget, 0):
        clone_idx = clone_idx[:0]
        split_idx = split_idx[:0]
        base = np.flatnonzero(keep)

    order = np.concatenate([base, clone_idx, split_idx, split_idx]).astype(np.int64)
    new = gauss.subset(order)
    n_split = len(split_idx)
    if n_split:
        rows = slice(len(order) - 2 * n_split, len(order))
        parents = np.concatenate([split_idx, split_idx])
        from .geom import quat_to_matrix, normalize_quaternion

        rot = quat_to_matrix(normalize_quaternion(gauss.rotations[parents]))
        scales = gauss.scales()[parents]
        noise = rng.standard_normal((2 * n_split, 3))
        offsets = np.einsum("nij,nj->ni", rot, scales * noise)
        new.means[rows] = gauss.means[parents] + offsets
        new.log_scales[rows] = gauss.log_scales[parents] - np.log(1.6)

    index_map = order.copy()
    index_map[len(base) :] = -1     # clones and children start cold
    return new, index_map


def density_control(
    scene: SceneGraph,
    stats: DensityStats,
    cfg: TrainConfig,
    rng: np.random.Generator,
    scene_extent: float,
) -> dict[str, Array]:
    """Prune low-opacity Gaussians; clone small / split large ones whose
    accumulated positional gradient exceeds the threshold. Object
    Gaussians stay in their node. Returns per-node index maps for the
    optimizer rebuild."""
    maps: dict[str, Array] = {}
    new_bg, maps["bg"] = _densify_node(
        scene.background,
        stats.grad_sum["bg"],
        stats.count["bg"],
        cfg,
        scene_extent,
        rng,
    )
    scene.background = new_bg
    for node in scene.objects:
        key = f"obj{node.track_id}"
        extent = float(np.linalg.norm(node.bbox.size))
        node.gaussians, maps[key] = _densify_node(
            node.gaussians, stats.grad_sum[key], stats.count[key], cfg, extent, rng
        )
    stats.reset(scene)
    return maps


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    scene: SceneGraph
    records: list
    checkpoints: list
    skipped_grads: int


def evaluate_frames(scene, frames, indices, cfg, settings=None):
    """PSNR/SSIM per frame (on 8-bit quantized renders, matching how
    ground truth images are stored). Returns (rows, mean psnr, mean ssim)."""
    settings = settings or RasterSettings()
    rows = []
    for idx in indices:
        frame = frames.frames[idx]
        output, _ = render_scene(
            scene,
            frame.view,
            frames.camera,
            frame.time,
            settings=settings,
            background=cfg.background_color,
        )
        pred = io.quantize_image(output.color) / 255.0
        rows.append(
            {
                "frame": int(frame.index),
                "psnr": psnr(pred, frame.image),
                "ssim": ssim(pred, frame.image),
            }
        )
    mean_psnr = float(np.mean([r["psnr"] for r in rows])) if rows else 0.0
    mean_ssim = float(np.mean([r["ssim"] for r in rows])) if rows else 0.0
    return rows, mean_psnr, mean_ssim


def _scene_extent(scene: SceneGraph) -> float:
    pts = scene.background.means
    if len(pts) == 0:
        return 1.0
    center = pts.mean(axis=0)
    return float(np.max(np.linalg.norm(pts - center, axis=1)))


def _diagnostic_dump(scene, breakdown, iteration, out_dir):
    stats = {
        "iteration": iteration,
        "loss": {
            "total": breakdown.total,
            "color": breakdown.color,
            "depth": breakdown.depth,
            "accum": breakdown.accum,
        },
        "background": {
            "n": scene.background.n,
            "mean_abs_means": float(np.mean(np.abs(scene.background.means))),
            "max_abs_logit": float(np.max(np.abs(scene.background.opacity_logits))),
        },
    }
    if out_dir is not None:
        io.write_json(Path(out_dir) / "diverged.json", stats)
    return stats


def train(
    scene: SceneGraph,
    frames,
    cfg: TrainConfig,
    out_dir=None,
    settings: RasterSettings | None = None,
    log_every: int = 10,
) -> TrainResult:
    """Optimize a scene against a frame set.

    Iterates shuffled training frames, renders, applies the composite
    loss, backpropagates through the full chain, steps Adam per class,
    and periodically runs density control, evaluates both splits, and
    writes checkpoints. Deterministic for a fixed seed.
    """
    settings = settings or RasterSettings()
    rng = np.random.default_rng(cfg.seed)
    optimizer = SceneOptimizer(scene, cfg)
    stats = DensityStats(scene)
    extent = _scene_extent(scene)
    records: list[dict] = []
    checkpoints: list[str] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    train_indices = list(frames.train_indices)
    order: list[int] = []

    def metrics_path():
        return out_dir / "metrics.jsonl" if out_dir is not None else None

    log_lines = []

    def emit(record):
        records.append(record)
        log_lines.append(io._json_bytes(record).decode())

    for iteration in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(train_indices))
        frame = frames.frames[order.pop()]
        output, ctx = render_scene(
            scene,
            frame.view,
            frames.camera,
            frame.time,
            settings=settings,
            background=cfg.background_color,
        )
        breakdown, seeds = total_loss(
            output, frame.image, frame.depth, frame.depth_mask, cfg
        )
        if not np.isfinite(breakdown.total):
            _diagnostic_dump(scene, breakdown, iteration, out_dir)
            raise TrainingDiverged(
                f"non-finite loss {breakdown.total} at iteration {iteration}"
            )
        grads = render_backward(
            ctx,
            grad_color=seeds.d_color,
            grad_depth=seeds.d_depth,
            grad_beta=seeds.d_beta,
        )
        optimizer.step(grads_to_dict(grads), iteration)
        stats.update(grads)

        if (
            cfg.densify_interval > 0
            and cfg.densify_from <= iteration < cfg.densify_until
            and (iteration - cfg.densify_from) % cfg.densify_interval == 0
            and iteration > cfg.densify_from
        ):
            densify_rng = np.random.default_rng((cfg.seed, iteration))
            maps = density_control(scene, stats, cfg, densify_rng, extent)
            optimizer.rebuild(scene, maps)

        if iteration % log_every == 0 or iteration == cfg.iterations - 1:
            emit(
                {
                    "kind": "train",
                    "iteration": iteration,
                    "frame": int(frame.index),
                    "loss": breakdown.total,
                    "color": breakdown.color,
                    "l1": breakdown.l1,
                    "ssim_loss": breakdown.ssim_term,
                    "depth": breakdown.depth,
                    "accum": breakdown.accum,
                    "n_gaussians": scene.background.n
                    + sum(n.gaussians.n for n in scene.objects),
                }
            )
        last = iteration == cfg.iterations - 1
        if cfg.eval_interval > 0 and (
            (iteration + 1) % cfg.eval_interval == 0 or last
        ):
            for split, indices in (
                ("train", frames.train_indices),
                ("holdout", frames.holdout_indices),
            ):
                if not len(indices):
                    continue
                _, m_psnr, m_ssim = evaluate_frames(
                    scene, frames, indices, cfg, settings
                )
                emit(
                    {
                        "kind": "eval",
                        "iteration": iteration,
                        "split": split,
                        "psnr": m_psnr,
                        "ssim": m_ssim,
                    }
                )
        if out_dir is not None and (
            (cfg.checkpoint_interval > 0 and (iteration + 1) % cfg.checkpoint_interval == 0)
            or last
        ):
            name = "final.wgsc" if last else f"ckpt_{iteration + 1:06d}.wgsc"
            path = out_dir / name
            save_checkpoint(
                path,
                scene,
                extra={"iteration": iteration + 1, "config": cfg.to_dict()},
            )
            checkpoints.append(str(path))

    if out_dir is not None:
        metrics_file = metrics_path()
        metrics_file.write_text("\n".join(log_lines) + "\n")
    return TrainResult(scene, records, checkpoints, optimizer.skipped_grads)
