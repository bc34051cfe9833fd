"""Joint training of the three objectives with GradNorm task weighting."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import contrastive as cl
from . import diffgraph as dg
from . import matching as mt
from .dpnp import DegenerateConfigurationError, PnPProblem, dpnp_forward_backward, proj_loss
from .encoders import augment, point_descriptors
from .geom import Pose, cell_center
from .harness import Scene
from .model import ModelConfig, forward_features, init_params, scene_layout

log = logging.getLogger(__name__)

TASKS = ("contrast", "match", "proj")
N_TASKS = len(TASKS)
WEIGHT_MIN = 1e-3
WEIGHT_MAX = 10.0
DEADBAND = 1e-9


class TrainingError(RuntimeError):
    """A loss term became non-finite; the message names the term."""


@dataclass
class TaskWeights:
    """Loss weights for (contrast, match, proj) plus GradNorm state.

    ``active`` marks tasks that take part in training; inactive tasks keep a
    weight of 1 but contribute nothing to the total.
    """

    lambdas: np.ndarray = field(default_factory=lambda: np.ones(N_TASKS))
    alpha: float = 1.5
    initial_losses: np.ndarray | None = None
    active: np.ndarray = field(default_factory=lambda: np.ones(N_TASKS, dtype=bool))

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64).copy()
        self.active = np.asarray(self.active, dtype=bool).copy()
        if self.lambdas.shape != (N_TASKS,) or np.any(self.lambdas <= 0):
            raise ValueError("weights must be three positive numbers")
        if self.initial_losses is not None:
            self.initial_losses = np.asarray(self.initial_losses, dtype=np.float64).copy()

    @property
    def effective(self) -> np.ndarray:
        return np.where(self.active, self.lambdas, 0.0)


def total_loss(losses: Sequence, weights) -> object:
    """``sum_i lambda_i L_i``; works on floats or graph nodes.

    ``weights`` is a :class:`TaskWeights` (inactive tasks weigh zero) or a
    plain sequence of three numbers.
    """
    lam = weights.effective if isinstance(weights, TaskWeights) else np.asarray(weights, dtype=np.float64)
    if len(losses) != len(lam):
        raise ValueError("one weight per loss")
    out = None
    for w, loss in zip(lam, losses):
        term = dg.scale(loss, float(w)) if isinstance(loss, dg.Node) else float(w) * loss
        out = term if out is None else out + term
    return out


def gradnorm_update(weights: TaskWeights, grad_norms, losses, step_size: float) -> TaskWeights:
    """One GradNorm move of the task weights.

    With ``G_i = lambda_i g_i`` and the relative inverse training rate
    ``r_i = (L_i / L_i(0)) / mean(L / L(0))``, each weight steps against the
    sign of ``G_i - mean(G) r_i^alpha`` scaled by ``g_i / mean(g)`` (the
    gradient of the absolute gap with the target held fixed).  Weights are then
    clipped to [1e-3, 10] and rescaled so the active ones sum to their count.
    The first call records ``L(0)``.
    """
    g = np.asarray(grad_norms, dtype=np.float64)
    cur = np.asarray(losses, dtype=np.float64)
    if g.shape != (N_TASKS,) or np.any(g < 0):
        raise ValueError("gradient norms must be three non-negative numbers")
    act = weights.active & (g > 0)
    new = replace(weights)
    if new.initial_losses is None:
        new.initial_losses = cur.copy()
    if not np.any(act):
        return new
    l0 = np.where(new.initial_losses > 0, new.initial_losses, 1.0)
    ratio = cur / l0
    rate = np.ones(N_TASKS)
    mean_ratio = ratio[act].mean()
    if mean_ratio > 0:
        rate[act] = ratio[act] / mean_ratio
    big_g = new.lambdas * g
    target = big_g[act].mean() * np.power(np.maximum(rate, 0.0), weights.alpha)
    gap = big_g - target
    scale = np.maximum(np.abs(big_g), np.abs(target))
    sign = np.where(np.abs(gap) <= DEADBAND * scale, 0.0, np.sign(gap))
    lam = new.lambdas.copy()
    lam[act] -= step_size * sign[act] * g[act] / g[act].mean()
    lam = np.clip(lam, WEIGHT_MIN, WEIGHT_MAX)
    ta = weights.active
    lam[ta] *= ta.sum() / lam[ta].sum()
    lam[~ta] = 1.0
    new.lambdas = lam
    return new


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    decay: float = 1.0               # multiply lr by this every decay_every steps
    decay_every: int = 0
    steps: int = 300
    batch_size: int = 32             # contrastive pairs per step
    seed: int = 0
    use_gradnorm: bool = True
    use_dpnp: bool = True
    use_contrast: bool = True
    single_stage: bool = False
    gradnorm_lr: float = 0.025
    dpnp_points: int = 24
    dpnp_mode: str = "unrolled"
    dpnp_iters: int = 10
    lambda_t: float = 1.0
    contrast_weights: tuple = (0.5, 0.5)
    clip_norm: float = 5.0
    fine_negatives: str = "all"      # "all" cells or only the ground-truth "block"

    def __post_init__(self):
        if self.lr < 0 or self.steps < 0 or self.batch_size < 2:
            raise ValueError("learning rate and step budget must be non-negative, batch >= 2")

    def rate_at(self, step: int) -> float:
        if self.decay_every > 0:
            return self.lr * self.decay ** (step // self.decay_every)
        return self.lr

    def active_tasks(self) -> np.ndarray:
        return np.array([self.use_contrast, True, self.use_dpnp])


@dataclass
class LossReport:
    step: int
    total: float
    contrast: float
    match: float
    proj: float
    lambdas: tuple
    coarse: float
    fine: float
    proj_skipped: bool = False


# -- per-term losses ------------------------------------------------------

def _contrast_term(scene: Scene, graph: dg.Graph, params: dict, cfg: ModelConfig, tcfg: TrainConfig,
                   cell_feats: dg.Node, gt_cells: np.ndarray, rng: np.random.Generator) -> dg.Node | None:
    cloud1, kept1 = augment(scene.cloud, rng.integers(2 ** 32))
    cloud2, kept2 = augment(scene.cloud, rng.integers(2 ** 32))
    both = np.intersect1d(np.intersect1d(kept1, kept2), np.flatnonzero(gt_cells >= 0))
    # one point per cell so no two image rows coincide
    _, first = np.unique(gt_cells[both], return_index=True)
    cand = both[first]
    if len(cand) < 2:
        return None
    pick = np.sort(rng.choice(cand, size=min(tcfg.batch_size, len(cand)), replace=False))
    point_mlp = cfg.encoders()[0].bind(graph, params)
    z = []
    for cloud, kept in ((cloud1, kept1), (cloud2, kept2)):
        rows = np.searchsorted(kept, pick)
        z.append(dg.normalize_rows(point_mlp(point_descriptors(cloud.points)))[rows])
    h = cell_feats[gt_cells[pick]]
    batch = cl.ContrastBatch(z[0], z[1], h, cfg.tau_c)
    return cl.contrast_loss(batch, *tcfg.contrast_weights)


def _match_terms(gf, cfg: ModelConfig, single_stage: bool, fine_negatives: str = "all"):
    lay = gf.layout
    vis = np.flatnonzero(lay.gt_cells >= 0)
    if single_stage:
        fine = mt.match_loss(gf.points[vis], gf.cells, lay.gt_cells[vis], None, cfg.tau_c)
        return None, fine
    coarse = mt.match_loss(gf.coarse_points, gf.coarse_pixels, lay.gt_blocks, None, cfg.tau_c)
    cand = None
    if fine_negatives == "block":
        blocks = lay.cell_block[lay.gt_cells[vis]]
        cand = lay.cell_block[None, :] == blocks[:, None]
    fine = mt.match_loss(gf.points[vis], gf.cells, lay.gt_cells[vis], cand, cfg.tau_c)
    return coarse, fine


def _proj_term(scene: Scene, gf, cfg: ModelConfig, tcfg: TrainConfig, rng: np.random.Generator):
    lay = gf.layout
    k = scene.intrinsics
    vis = np.flatnonzero(lay.gt_cells >= 0)
    if len(vis) < 6:
        return None
    idx = np.sort(rng.choice(vis, size=min(tcfg.dpnp_points, len(vis)), replace=False))
    members = mt.superpixel_members(k.height, k.width, cfg.block)
    cand = np.stack([members[b] for b in lay.cell_block[lay.gt_cells[idx]]])
    cols, rows = np.arange(k.width * k.height) % k.width, np.arange(k.width * k.height) // k.width
    cell_xy = cell_center(cols, rows)
    pix, conf = mt.soft_pixels(gf.points[idx], gf.cells, cand, cell_xy, cfg.tau_c)
    problem = PnPProblem(scene.points[idx], pix, conf, k)
    try:
        res = dpnp_forward_backward(problem, tcfg.dpnp_mode, tcfg.dpnp_iters, fallback=Pose.identity())
    except (DegenerateConfigurationError, np.linalg.LinAlgError):
        return None
    sol = res.solution
    # a solve that misses by more than the image extent, or that pushes points
    # onto the depth barrier, has no useful gradient and would swamp the weighting
    if not np.isfinite(sol.residual) or sol.residual > max(k.width, k.height) or np.any(sol.behind):
        return None
    return proj_loss((res.rotation, res.translation), scene.gt_pose, problem, tcfg.lambda_t)


def _value(node) -> float:
    return float(node.value) if node is not None else 0.0


def _norm(grads: dict, names) -> float:
    return float(np.sqrt(sum(np.sum(grads[n] ** 2) for n in names)))


def train_step(scene: Scene, params: dict, weights: TaskWeights, cfg: ModelConfig, tcfg: TrainConfig,
               step: int = 0):
    """One SGD update on one scene followed by a GradNorm weight update.

    Returns ``(params, weights, report)``; the inputs are not modified.
    """
    rng = np.random.default_rng([tcfg.seed, step])
    graph = dg.Graph()
    term = "features"
    try:
        gf = forward_features(scene, params, cfg, graph, scene_layout(scene, cfg))
        term = "contrast"
        lc = _contrast_term(scene, graph, params, cfg, tcfg, gf.cells, gf.layout.gt_cells, rng) \
            if tcfg.use_contrast else None
        term = "match"
        coarse, fine = _match_terms(gf, cfg, tcfg.single_stage, tcfg.fine_negatives)
        parts = [m.loss for m in (coarse, fine) if m is not None and not m.empty]
        lm = parts[0] if len(parts) == 1 else (parts[0] + parts[1] if parts else None)
        term = "proj"
        lp = _proj_term(scene, gf, cfg, tcfg, rng) if tcfg.use_dpnp else None
    except dg.NonFiniteError as exc:
        raise TrainingError(f"step {step}: non-finite value in the {term} loss ({exc})") from exc
    losses = [lc, lm, lp]
    for name, loss in zip(TASKS, losses):
        if loss is not None and not np.isfinite(loss.value):
            raise TrainingError(f"step {step}: {name} loss is not finite")
    present = np.array([loss is not None for loss in losses])
    task_grads = [graph.backward(loss) if loss is not None else None for loss in losses]
    lam = weights.effective * present
    names = list(params)
    grad = {n: sum(lam[i] * task_grads[i][n] for i in range(N_TASKS) if task_grads[i] is not None
                   and n in task_grads[i]) for n in names}
    gnorm = float(np.sqrt(sum(np.sum(np.asarray(g) ** 2) for g in grad.values())))
    clip = tcfg.clip_norm / gnorm if tcfg.clip_norm and gnorm > tcfg.clip_norm else 1.0
    rate = tcfg.rate_at(step) * clip
    new_params = {n: params[n] - rate * grad[n] if isinstance(grad[n], np.ndarray) else params[n].copy()
                  for n in names}
    vals = np.array([_value(loss) for loss in losses])
    if tcfg.use_gradnorm:
        shared = cfg.shared_param_names()
        gn = np.array([_norm(tg, shared) if tg is not None else 0.0 for tg in task_grads])
        # tasks missing this step keep their loss history and weight
        cur = vals.copy()
        if weights.initial_losses is not None:
            cur[~present] = weights.initial_losses[~present]
        new_weights = gradnorm_update(weights, gn, cur, tcfg.gradnorm_lr)
    else:
        new_weights = replace(weights)
    total = float(np.sum(lam * vals))
    report = LossReport(step, total, vals[0], vals[1], vals[2], tuple(weights.lambdas.tolist()),
                        _value(coarse.loss) if coarse is not None else 0.0,
                        _value(fine.loss) if fine is not None else 0.0, lp is None and tcfg.use_dpnp)
    return new_params, new_weights, report


@dataclass
class TrainResult:
    params: dict
    weights: TaskWeights
    history: list


def train(scenes: Sequence[Scene], tcfg: TrainConfig, cfg: ModelConfig | None = None,
          params: dict | None = None, log_every: int = 0) -> TrainResult:
    """Run ``tcfg.steps`` steps, visiting scenes in a seeded shuffled order."""
    if not scenes and tcfg.steps > 0:
        raise ValueError("no training scenes")
    cfg = cfg or ModelConfig()
    cfg = replace(cfg, single_stage=tcfg.single_stage) if tcfg.single_stage != cfg.single_stage else cfg
    params = {k: v.copy() for k, v in (params or init_params(cfg, tcfg.seed)).items()}
    weights = TaskWeights(active=tcfg.active_tasks())
    rng = np.random.default_rng(tcfg.seed)
    order = []
    history = []
    for step in range(tcfg.steps):
        if not order:
            order = list(rng.permutation(len(scenes)))
        scene = scenes[order.pop()]
        params, weights, report = train_step(scene, params, weights, cfg, tcfg, step)
        history.append(report)
        if log_every and step % log_every == 0:
            log.info("step %d total %.4f contrast %.4f match %.4f proj %.4f", step, report.total,
                     report.contrast, report.match, report.proj)
    return TrainResult(params, weights, history)


# -- curve export ---------------------------------------------------------

CURVE_COLUMNS = ["step", "total", "contrast", "match", "proj", "λ1", "λ2", "λ3", "coarse", "fine"]


def curve_csv(history: Sequence[LossReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in history:
        w.writerow([r.step] + [f"{v:.10g}" for v in (r.total, r.contrast, r.match, r.proj, *r.lambdas,
                                                      r.coarse, r.fine)])
    return buf.getvalue()


def smooth(values, window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def curve_svg(history: Sequence[LossReport], series=("total", "contrast", "match", "proj"),
              width: int = 640, height: int = 360, window: int = 20) -> str:
    """Line chart of smoothed loss curves, each scaled to its own maximum."""
    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]
    pad = 40
    n = len(history)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" font-size="12" text-anchor="middle">step</text>']
    for j, name in enumerate(series):
        vals = smooth([getattr(r, name) for r in history], window)
        if n < 2 or not np.any(vals):
            continue
        top = np.max(np.abs(vals)) or 1.0
        xs = pad + (width - 2 * pad) * np.arange(n) / (n - 1)
        ys = height - pad - (height - 2 * pad) * vals / top
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
        col = colors[j % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 80}" y="{pad + 14 * j}" font-size="12" fill="{col}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def steps_to_fraction(values, fraction: float = 0.5, window: int = 20) -> int | None:
    """First step where the smoothed curve drops to ``fraction`` of its start."""
    s = smooth(values, window)
    if len(s) == 0 or s[0] <= 0:
        return None
    hit = np.flatnonzero(s <= fraction * s[0])
    return int(hit[0]) if hit.size else None


def report_dict(r: LossReport) -> dict:
    return asdict(r)
