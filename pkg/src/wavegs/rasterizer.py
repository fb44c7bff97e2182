"""Deterministic tile-based splat rasterization: forward, brute-force
reference, and the splat-level backward pass.

The tile renderer follows common splatting practice: 16x16 px tiles,
per-tile binning by the 3-sigma ellipse AABB, contributions below 1/255
skipped, transmittance early-out at 1e-4. The reference renderer is the
oracle: global per-pixel blend over every splat with none of those
shortcuts. With cutoffs disabled and unbounded binning the tile renderer
performs the identical arithmetic in the identical order, so the two
agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geom import CameraModel

Array = np.ndarray


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = 16
    extent_sigma: float | None = 3.0   # None: bin every splat everywhere
    alpha_skip: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    dilation: float = 0.3              # px^2 added to projected covariance

    @staticmethod
    def oracle() -> "RasterSettings":
        """Cutoff-free configuration: exact arithmetic, unbounded binning."""
        return RasterSettings(
            extent_sigma=None, alpha_skip=0.0, transmittance_floor=0.0
        )


@dataclass
class Splat2D:
    """One projected Gaussian ready for blending."""

    mean2d: Array
    cov2d: Array
    depth: float
    color: Array
    alpha: float
    node_id: int = 0
    source: int = 0

    def __post_init__(self):
        self.mean2d = np.asarray(self.mean2d, dtype=np.float64).reshape(2)
        self.cov2d = np.asarray(self.cov2d, dtype=np.float64).reshape(2, 2)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if not self.depth > 0:
            raise ValueError("splat depth must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("splat alpha must be in (0, 1]")
        a, b, c = self.cov2d[0, 0], self.cov2d[0, 1], self.cov2d[1, 1]
        if a <= 0 or c <= 0 or a * c - b * b <= 0:
            raise ValueError("cov2d must be symmetric positive definite")


@dataclass
class SplatBatch:
    """Columnar splat storage; the unit the kernels consume."""

    mean2d: Array
    cov2d: Array
    depth: Array
    color: Array
    alpha: Array
    node_id: Array
    source: Array

    @staticmethod
    def from_splats(splats) -> "SplatBatch":
        if isinstance(splats, SplatBatch):
            return splats
        splats = list(splats)
        if not splats:
            return SplatBatch(
                np.zeros((0, 2)),
                np.zeros((0, 2, 2)),
                np.zeros(0),
                np.zeros((0, 3)),
                np.zeros(0),
                np.zeros(0, dtype=np.int64),
                np.zeros(0, dtype=np.int64),
            )
        return SplatBatch(
            np.array([s.mean2d for s in splats], dtype=np.float64),
            np.array([s.cov2d for s in splats], dtype=np.float64),
            np.array([s.depth for s in splats], dtype=np.float64),
            np.array([s.color for s in splats], dtype=np.float64),
            np.array([s.alpha for s in splats], dtype=np.float64),
            np.array([s.node_id for s in splats], dtype=np.int64),
            np.array([s.source for s in splats], dtype=np.int64),
        )

    @property
    def n(self) -> int:
        return len(self.depth)


@dataclass
class RenderOutput:
    """color in [0,1], alpha-weighted mean depth (0 where nothing
    rendered), accumulation (1 - final transmittance), per-object mean
    accumulated opacity beta, and the per-node weight maps behind it."""

    color: Array
    depth: Array
    accum: Array
    per_object_beta: dict
    node_weight: Array
    node_keys: list


@dataclass
class SplatGrads:
    mean2d: Array
    cov2d: Array
    alpha: Array
    color: Array
    depth: Array


def _conic(cov2d: Array) -> Array:
    """Inverse of per-splat 2x2 covariances as (a, b, c) rows."""
    a = cov2d[:, 0, 0]
    b = 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0])
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0) or np.any(a <= 0):
        raise ValueError("cov2d must be positive definite")
    return np.stack([c / det, -b / det, a / det], axis=1)


def _bin_radius(batch: SplatBatch, settings: RasterSettings) -> Array:
    if settings.extent_sigma is None:
        return np.full(batch.n, -1.0)
    a = batch.cov2d[:, 0, 0]
    b = 0.5 * (batch.cov2d[:, 0, 1] + batch.cov2d[:, 1, 0])
    c = batch.cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    return settings.extent_sigma * np.sqrt(lam_max)


def _sorted_order(batch: SplatBatch) -> Array:
    """Front-to-back order: depth ascending, ties by source index. The
    key is a property of each splat, so the order is invariant under
    permutation of the input list."""
    return np.lexsort((batch.source, batch.node_id, batch.depth))


def _prepare(batch: SplatBatch, settings: RasterSettings):
    order = _sorted_order(batch)
    mean2d = np.ascontiguousarray(batch.mean2d[order])
    conic = np.ascontiguousarray(_conic(batch.cov2d[order]))
    color = np.ascontiguousarray(batch.color[order])
    depth = np.ascontiguousarray(batch.depth[order])
    alpha = np.ascontiguousarray(batch.alpha[order])
    radius = np.ascontiguousarray(_bin_radius(batch, settings)[order])
    node_raw = batch.node_id[order]
    node_keys = sorted(set(int(v) for v in batch.node_id))
    remap = {key: i for i, key in enumerate(node_keys)}
    node = np.array([remap[int(v)] for v in node_raw], dtype=np.int64)
    return order, mean2d, conic, color, depth, alpha, radius, node, node_keys


def _beta_from_weights(
    node_weight: Array, node_keys: list, support_masks: dict | None
) -> dict:
    betas = {}
    for i, key in enumerate(node_keys):
        weights = node_weight[i]
        if support_masks is not None and key in support_masks:
            mask = support_masks[key].astype(bool)
        else:
            mask = weights > 0.0
        count = int(mask.sum())
        betas[key] = float(weights[mask].sum() / count) if count else 0.0
    return betas


def rasterize_forward(
    splats,
    cam: CameraModel,
    background_color=(0.0, 0.0, 0.0),
    settings: RasterSettings | None = None,
    support_masks: dict | None = None,
) -> RenderOutput:
    """Tile-based front-to-back alpha blending of 2D splats.

    Per pixel, sorted splats contribute alpha_i * exp(-0.5 d^T conic d)
    weighted by running transmittance; the remainder falls to the
    background color. beta for each node is the mean accumulated node
    opacity over that node's support pixels (where it contributed, unless
    an explicit support mask is supplied).
    """
    settings = settings or RasterSettings()
    batch = SplatBatch.from_splats(splats)
    h, w = cam.height, cam.width
    bg = np.asarray(background_color, dtype=np.float64).reshape(3)
    out_color = np.empty((h, w, 3))
    out_accum = np.empty((h, w))
    out_depth_sum = np.empty((h, w))

    if batch.n == 0:
        out_color[:] = bg
        out_accum[:] = 0.0
        return RenderOutput(
            out_color,
            np.zeros((h, w)),
            out_accum,
            {},
            np.zeros((0, h, w)),
            [],
        )

    _, mean2d, conic, color, depth, alpha, radius, node, node_keys = _prepare(
        batch, settings
    )
    tiles_x = -(-w // settings.tile_size)
    tiles_y = -(-h // settings.tile_size)
    offsets, idx = _kernels.bin_splats(
        mean2d, radius, tiles_x, tiles_y, settings.tile_size, w, h
    )
    node_weight = np.zeros((len(node_keys), h, w))
    _kernels.forward_tiles(
        mean2d, conic, color, depth, alpha, node,
        offsets, idx, tiles_x, settings.tile_size, h, w,
        bg, settings.alpha_skip, settings.transmittance_floor,
        out_color, out_accum, out_depth_sum, node_weight,
    )
    depth_map = np.where(out_accum > 1e-12, out_depth_sum / np.maximum(out_accum, 1e-300), 0.0)
    betas = _beta_from_weights(node_weight, node_keys, support_masks)
    return RenderOutput(out_color, depth_map, out_accum, betas, node_weight, node_keys)


def rasterize_reference(
    splats,
    cam: CameraModel,
    background_color=(0.0, 0.0, 0.0),
    support_masks: dict | None = None,
) -> RenderOutput:
    """Brute-force oracle: same blending contract as rasterize_forward
    with no skip threshold, no early-out and no tiling."""
    batch = SplatBatch.from_splats(splats)
    h, w = cam.height, cam.width
    bg = np.asarray(background_color, dtype=np.float64).reshape(3)
    out_color = np.empty((h, w, 3))
    out_accum = np.empty((h, w))
    out_depth_sum = np.empty((h, w))
    if batch.n == 0:
        out_color[:] = bg
        out_accum[:] = 0.0
        return RenderOutput(
            out_color, np.zeros((h, w)), out_accum, {}, np.zeros((0, h, w)), []
        )
    _, mean2d, conic, color, depth, alpha, _, node, node_keys = _prepare(
        batch, RasterSettings.oracle()
    )
    node_weight = np.zeros((len(node_keys), h, w))
    _kernels.reference_forward(
        mean2d, conic, color, depth, alpha, node, h, w, bg,
        out_color, out_accum, out_depth_sum, node_weight,
    )
    depth_map = np.where(out_accum > 1e-12, out_depth_sum / np.maximum(out_accum, 1e-300), 0.0)
    betas = _beta_from_weights(node_weight, node_keys, support_masks)
    return RenderOutput(out_color, depth_map, out_accum, betas, node_weight, node_keys)


def rasterize_backward(
    splats,
    cam: CameraModel,
    grad_color: Array,
    grad_depth: Array | None = None,
    grad_accum: Array | None = None,
    grad_beta: dict | None = None,
    background_color=(0.0, 0.0, 0.0),
    settings: RasterSettings | None = None,
    support_masks: dict | None = None,
    node_weight: Array | None = None,
) -> SplatGrads:
    """Exact adjoint of rasterize_forward for the given output gradients.

    Returns per-splat gradients for mean2d, cov2d, alpha, color and depth
    (input order). The blend is replayed per tile back-to-front rather
    than stored, which bounds memory by tile size.
    """
    settings = settings or RasterSettings()
    batch = SplatBatch.from_splats(splats)
    h, w = cam.height, cam.width
    n = batch.n
    grads = SplatGrads(
        np.zeros((n, 2)), np.zeros((n, 2, 2)), np.zeros(n),
        np.zeros((n, 3)), np.zeros(n),
    )
    if n == 0:
        return grads
    bg = np.asarray(background_color, dtype=np.float64).reshape(3)
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    grad_depth = (
        np.zeros((h, w)) if grad_depth is None
        else np.ascontiguousarray(grad_depth, dtype=np.float64)
    )
    grad_accum = (
        np.zeros((h, w)) if grad_accum is None
        else np.ascontiguousarray(grad_accum, dtype=np.float64)
    )
    order, mean2d, conic, color, depth, alpha, radius, node, node_keys = _prepare(
        batch, settings
    )
    tiles_x = -(-w // settings.tile_size)
    tiles_y = -(-h // settings.tile_size)
    offsets, idx = _kernels.bin_splats(
        mean2d, radius, tiles_x, tiles_y, settings.tile_size, w, h
    )

    # per-node per-pixel occupancy gradient (from the beta statistics)
    grad_node_px = np.zeros((len(node_keys), h, w))
    if grad_beta:
        node_weight = np.zeros((len(node_keys), h, w))
        out_c = np.empty((h, w, 3))
        out_a = np.empty((h, w))
        out_d = np.empty((h, w))
        _kernels.forward_tiles(
            mean2d, conic, color, depth, alpha, node,
            offsets, idx, tiles_x, settings.tile_size, h, w,
            bg, settings.alpha_skip, settings.transmittance_floor,
            out_c, out_a, out_d, node_weight,
        )
        for i, key in enumerate(node_keys):
            g = grad_beta.get(key)
            if not g:
                continue
            if support_masks is not None and key in support_masks:
                mask = support_masks[key].astype(bool)
            else:
                mask = node_weight[i] > 0.0
            count = int(mask.sum())
            if count:
                grad_node_px[i][mask] = g / count

    entry_grads = np.zeros((len(idx), 10))
    _kernels.backward_tiles(
        mean2d, conic, color, depth, alpha, node,
        offsets, idx, tiles_x, settings.tile_size, h, w,
        bg, settings.alpha_skip, settings.transmittance_floor,
        grad_color, grad_accum, grad_depth, grad_node_px, entry_grads,
    )

    # reduce CSR slots onto splats in fixed entry order (thread invariant)
    d_sorted = np.zeros((n, 10))
    np.add.at(d_sorted, idx, entry_grads)
    dmean = np.zeros((n, 2))
    dcov = np.zeros((n, 2, 2))
    dalpha = np.zeros(n)
    dcolr = np.zeros((n, 3))
    ddepth = np.zeros(n)
    dmean[order] = d_sorted[:, 0:2]
    dalpha[order] = d_sorted[:, 5]
    dcolr[order] = d_sorted[:, 6:9]
    ddepth[order] = d_sorted[:, 9]
    # conic -> covariance: M = C^-1 => dC = -M Gm M with Gm symmetric
    gm = np.empty((n, 2, 2))
    gm[:, 0, 0] = d_sorted[:, 2]
    gm[:, 0, 1] = gm[:, 1, 0] = 0.5 * d_sorted[:, 3]
    gm[:, 1, 1] = d_sorted[:, 4]
    conic_mat = np.empty((n, 2, 2))
    conic_mat[:, 0, 0] = conic[:, 0]
    conic_mat[:, 0, 1] = conic_mat[:, 1, 0] = conic[:, 1]
    conic_mat[:, 1, 1] = conic[:, 2]
    dcov[order] = -np.einsum("nij,njk,nkl->nil", conic_mat, gm, conic_mat)
    grads.mean2d = dmean
    grads.cov2d = dcov
    grads.alpha = dalpha
    grads.color = dcolr
    grads.depth = ddepth
    return grads
