"""The registration model: encoders, matching and pose estimation wired
together, plus a ground-truth feature oracle with the same interface."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffgraph as dg
from . import matching as mt
from .dpnp import DegenerateConfigurationError, PnPProblem, PnPSolution, gauss_newton_refine, pnp_init
from .encoders import (PIXEL_DESCRIPTOR_DIM, POINT_DESCRIPTOR_DIM, make_encoder, pixel_descriptors,
                       point_descriptors, pool2)
from .geom import Pose
from .harness import Scene
from .metrics import SceneMetrics, ir, registration_accepted, rmse, rre, rte

POINT_ENCODER = "point_enc"
PIXEL_ENCODER = "pixel_enc"


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    hidden: tuple = (64, 64)
    block: int = 8
    level_weights: tuple = (0.5, 0.5)
    radius: float = 1.0
    num_superpoints: int | None = None        # None: one per superpixel
    attention: mt.AttentionConfig = field(default_factory=mt.AttentionConfig)
    tau_c: float = mt.DEFAULT_TAU
    threshold: float = mt.DEFAULT_THRESHOLD
    min_coarse: int = 8
    min_fine: int = 32
    prior_init: bool = True                   # also refine from the identity pose
    single_stage: bool = False
    sp_seed: int = 0

    def __post_init__(self):
        if self.attention.dim != self.dim:
            object.__setattr__(self, "attention", replace(self.attention, dim=self.dim))

    def encoders(self):
        return (make_encoder(POINT_ENCODER, POINT_DESCRIPTOR_DIM, self.dim, self.hidden),
                make_encoder(PIXEL_ENCODER, PIXEL_DESCRIPTOR_DIM, self.dim, self.hidden))

    def shared_param_names(self) -> list[str]:
        """Last layer of each encoder: the parameters GradNorm measures on."""
        out = []
        for enc in self.encoders():
            last = len(enc.sizes) - 2
            out += [f"{enc.name}.w{last}", f"{enc.name}.b{last}"]
        return out


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for enc in cfg.encoders():
        params.update(enc.init(rng))
    params.update(mt.init_attention(cfg.attention, rng))
    return params


# -- structure shared by training and inference ---------------------------

@dataclass
class SceneLayout:
    """Superpoints, superpixels and ground-truth labels of one scene."""

    superpoints: list
    superpixels: list
    blocks_per_row: int
    gt_cells: np.ndarray           # per point, -1 when not visible
    gt_blocks: np.ndarray          # per superpoint, majority block of visible members, -1 if none
    cell_block: np.ndarray         # block index of every level-0 cell


def cell_blocks(height: int, width: int, block: int) -> np.ndarray:
    out = np.full(height * width, -1, dtype=np.int64)
    for b, members in enumerate(mt.superpixel_members(height, width, block)):
        out[members] = b
    return out


def scene_layout(scene: Scene, cfg: ModelConfig, point_feats=None, level_feats=None) -> SceneLayout:
    k = scene.intrinsics
    bh, bw = mt.block_layout(k.height, k.width, cfg.block)
    n_sp = cfg.num_superpoints or bh * bw
    sps = mt.build_superpoints(scene.points, point_feats, cfg.radius, n_sp, cfg.sp_seed)
    levels = level_feats or [np.zeros((k.height * k.width, 1)), np.zeros((k.height * k.width // 4, 1))]
    spx = mt.build_superpixels((k.height, k.width), levels, cfg.block, cfg.level_weights)
    gt_cells = scene.gt_cells()
    cb = cell_blocks(k.height, k.width, cfg.block)
    gt_blocks = np.full(len(sps), -1, dtype=np.int64)
    for i, sp in enumerate(sps):
        cells = gt_cells[sp.members]
        cells = cells[cells >= 0]
        blocks = cb[cells]
        blocks = blocks[blocks >= 0]
        if blocks.size:
            gt_blocks[i] = int(np.argmax(np.bincount(blocks)))   # ties: lowest block
    return SceneLayout(sps, spx, bw, gt_cells, gt_blocks, cb)


@dataclass
class FeatureSet:
    """Inputs of the two matching stages (numpy values)."""

    coarse_points: np.ndarray      # per superpoint
    coarse_pixels: np.ndarray      # per superpixel
    points: np.ndarray             # per point
    cells: np.ndarray              # per level-0 cell


@dataclass
class GraphFeatures:
    """Graph nodes produced by the networks for one scene."""

    points: dg.Node
    cells: dg.Node
    cells_l1: dg.Node
    coarse_points: dg.Node
    coarse_pixels: dg.Node
    layout: SceneLayout


def _positions(scene: Scene, layout: SceneLayout):
    k = scene.intrinsics
    centroid = scene.points.mean(axis=0)
    pos_p = np.stack([sp.center for sp in layout.superpoints]) - centroid
    pos_p = pos_p / 5.0
    pos_i = np.stack([px.center for px in layout.superpixels]) / np.array([k.width, k.height]) * 2.0 - 1.0
    return pos_p, pos_i


def forward_features(scene: Scene, params: dict, cfg: ModelConfig, graph: dg.Graph,
                     layout: SceneLayout | None = None) -> GraphFeatures:
    point_mlp, pixel_mlp = (e.bind(graph, params) for e in cfg.encoders())
    fp = dg.normalize_rows(point_mlp(point_descriptors(scene.points)))
    fi0 = dg.normalize_rows(pixel_mlp(pixel_descriptors(scene.grid)))
    fi1 = dg.normalize_rows(pixel_mlp(pixel_descriptors(pool2(scene.grid))))
    if layout is None:
        layout = scene_layout(scene, cfg)
    k = scene.intrinsics
    sp_pool = mt.pooling_matrix([sp.members for sp in layout.superpoints], len(scene.points))
    sp_feat = dg.matmul(sp_pool, fp)
    px_feat = mt.superpixel_features((k.height, k.width), [fi0, fi1], cfg.block, cfg.level_weights)
    attn = {name: graph.params.get(name) or graph.param(name, params[name])
            for name in mt.attention_param_shapes(cfg.attention)}
    mlps = {key: m.bind(graph, params) for key, m in mt.attention_mlps(cfg.attention).items()}
    pos_p, pos_i = _positions(scene, layout)
    cp, ci = mt.attention_stack(sp_feat, px_feat, pos_p, pos_i, attn, mlps, cfg.attention)
    return GraphFeatures(fp, fi0, fi1, cp, ci, layout)


def oracle_features(scene: Scene, layout: SceneLayout) -> FeatureSet:
    """One-hot ground-truth features: block index (coarse) and cell index (fine).

    Rows without a ground-truth label are zero, so they sit at distance 1 from
    every candidate and never pass the confidence threshold.
    """
    n_blocks = len(layout.superpixels)
    n_cells = len(layout.cell_block)
    cp = np.zeros((len(layout.superpoints), n_blocks))
    ok = layout.gt_blocks >= 0
    cp[np.flatnonzero(ok), layout.gt_blocks[ok]] = 1.0
    pts = np.zeros((len(scene.points), n_cells))
    vis = layout.gt_cells >= 0
    pts[np.flatnonzero(vis), layout.gt_cells[vis]] = 1.0
    return FeatureSet(cp, np.eye(n_blocks), pts, np.eye(n_cells))


# -- inference ------------------------------------------------------------

@dataclass
class Registration:
    pose: Pose | None
    correspondences: mt.CorrespondenceSet
    coarse: mt.CorrespondenceSet | None
    solution: PnPSolution | None
    error: str | None = None


def match(feats: FeatureSet, layout: SceneLayout, cfg: ModelConfig, width: int) -> tuple:
    """Two-stage (or single-stage) matching on precomputed features."""
    if cfg.single_stage:
        fine = mt.single_stage_match(feats.points, feats.cells, cfg.threshold, cfg.tau_c, cfg.min_fine, width)
        return None, fine
    coarse = mt.coarse_match(feats.coarse_points, feats.coarse_pixels, cfg.threshold, cfg.tau_c,
                             cfg.min_coarse, layout.blocks_per_row)
    fine = mt.fine_match(coarse, layout.superpoints, layout.superpixels, feats.points, feats.cells,
                         cfg.threshold, cfg.tau_c, cfg.min_fine, width)
    return coarse, fine


def register_with_features(scene: Scene, feats: FeatureSet, layout: SceneLayout, cfg: ModelConfig) -> Registration:
    k = scene.intrinsics
    coarse, fine = match(feats, layout, cfg, k.width)
    if len(fine) == 0:
        return Registration(None, fine, coarse, None, "no correspondences")
    problem = PnPProblem(scene.points[fine.point_index], fine.pixels(), fine.confidence, k)
    sol = None
    errors = []
    for init in _initial_poses(problem, cfg):
        try:
            cand = gauss_newton_refine(problem, init)
        except (np.linalg.LinAlgError, ValueError) as exc:
            errors.append(str(exc))
            continue
        if sol is None or cand.residual < sol.residual:
            sol = cand
    if sol is None:
        return Registration(None, fine, coarse, None, "; ".join(errors) or "no initial pose")
    return Registration(sol.pose, fine, coarse, sol)


def _initial_poses(problem: PnPProblem, cfg: ModelConfig) -> list[Pose]:
    """Linear solution (when the system is not degenerate) and the prior pose."""
    inits = []
    try:
        inits.append(pnp_init(problem))
    except (DegenerateConfigurationError, np.linalg.LinAlgError):
        pass
    if cfg.prior_init:
        inits.append(Pose.identity())
    return inits


class Model:
    """Learned registration pipeline around a parameter dictionary."""

    def __init__(self, cfg: ModelConfig | None = None, params: dict | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)

    def features(self, scene: Scene) -> tuple[FeatureSet, SceneLayout]:
        g = dg.Graph()
        gf = forward_features(scene, self.params, self.cfg, g)
        return FeatureSet(gf.coarse_points.value, gf.coarse_pixels.value, gf.points.value, gf.cells.value), gf.layout

    def register(self, scene: Scene) -> Registration:
        feats, layout = self.features(scene)
        return register_with_features(scene, feats, layout, self.cfg)

    def evaluate(self, scene: Scene, threshold_deg: float = 10.0, threshold_m: float = 5.0) -> SceneMetrics:
        return evaluate_registration(scene, self.register(scene), threshold_deg, threshold_m)


class OracleModel:
    """Same pipeline, fed with ground-truth one-hot features."""

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()

    def register(self, scene: Scene) -> Registration:
        layout = scene_layout(scene, self.cfg)
        return register_with_features(scene, oracle_features(scene, layout), layout, self.cfg)

    def evaluate(self, scene: Scene, threshold_deg: float = 10.0, threshold_m: float = 5.0) -> SceneMetrics:
        return evaluate_registration(scene, self.register(scene), threshold_deg, threshold_m)


def evaluate_registration(scene: Scene, reg: Registration, threshold_deg: float = 10.0,
                          threshold_m: float = 5.0) -> SceneMetrics:
    """Metrics of one registration; a failed solve has infinite errors."""
    corr = reg.correspondences
    pts = scene.points[corr.point_index]
    pix = corr.pixels()
    ir_v = ir(pts, pix, scene.gt_pose, scene.intrinsics) if len(corr) else None
    rmse_v = rmse(pts, pix, scene.gt_pose, scene.intrinsics) if len(corr) else None
    if reg.pose is None:
        return SceneMetrics(scene.id, np.inf, np.inf, ir_v, rmse_v, False, len(corr), reg.error)
    e_r, e_t = rre(scene.gt_pose, reg.pose), rte(scene.gt_pose, reg.pose)
    return SceneMetrics(scene.id, e_r, e_t, ir_v, rmse_v, registration_accepted(e_r, e_t, threshold_deg, threshold_m),
                        len(corr))
