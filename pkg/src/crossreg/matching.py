"""Two-stage matching: superpoint/superpixel construction, attention, coarse
block matching and point-level refinement inside matched blocks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .encoders import Mlp

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.9
DEFAULT_TAU = 0.07


# -- superpoints ----------------------------------------------------------

@dataclass
class SuperPoint:
    center: np.ndarray
    members: np.ndarray
    feature: np.ndarray | None = None


@dataclass
class SuperPixel:
    center: np.ndarray            # pixel coordinates (u, v) of the block centre
    members: np.ndarray           # level-0 cell indices, row-major, ascending
    feature: np.ndarray | None = None


def farthest_point_sampling(points: np.ndarray, k: int, seed=0) -> np.ndarray:
    """Indices of ``k`` points picked greedily by max-min distance.

    The first pick is drawn from ``seed``; ties go to the lowest index.
    """
    n = len(points)
    k = min(k, n)
    rng = np.random.default_rng(seed)
    picks = [int(rng.integers(n))]
    dist = np.linalg.norm(points - points[picks[0]], axis=1)
    while len(picks) < k:
        nxt = int(np.argmax(dist))
        picks.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(picks)


def build_superpoints(points: np.ndarray, features, r: float, num_centers: int,
                      seed=0) -> list[SuperPoint]:
    """Balls of radius ``r`` around farthest-point-sampled centres.

    Balls may overlap.  The pooled feature is the mean member embedding
    (``features`` may be an array or a graph node; the value is stored).
    """
    if r <= 0 or num_centers < 1:
        raise ValueError("need r > 0 and num_centers >= 1")
    points = np.asarray(points, dtype=np.float64)
    fv = features.value if isinstance(features, dg.Node) else features
    out = []
    dropped = 0
    for c in farthest_point_sampling(points, num_centers, seed):
        center = points[c]
        members = np.flatnonzero(np.linalg.norm(points - center, axis=1) < r)
        if members.size == 0:
            dropped += 1
            continue
        feat = None if fv is None else np.asarray(fv)[members].mean(axis=0)
        out.append(SuperPoint(center.copy(), members, feat))
    if dropped:
        log.warning("dropped %d empty superpoints", dropped)
    return out


def pooling_matrix(groups, n: int) -> np.ndarray:
    """Row-stochastic (len(groups), n) matrix averaging each group's members."""
    m = np.zeros((len(groups), n))
    for i, grp in enumerate(groups):
        m[i, grp] = 1.0 / len(grp)
    return m


# -- superpixels ----------------------------------------------------------

def block_layout(height: int, width: int, block: int) -> tuple[int, int]:
    if block < 1 or height < block or width < block:
        raise ValueError(f"grid {height}x{width} smaller than block size {block}")
    return height // block, width // block


def superpixel_members(height: int, width: int, block: int, level: int = 0) -> list[np.ndarray]:
    """Cell indices (in the level-``level`` grid) of every block, block-row-major."""
    bh, bw = block_layout(height, width, block)
    s = 2 ** level
    lw = width // s
    b = max(block // s, 1)
    out = []
    for br in range(bh):
        for bc in range(bw):
            rows = np.arange(br * b, (br + 1) * b)
            cols = np.arange(bc * b, (bc + 1) * b)
            out.append((rows[:, None] * lw + cols[None, :]).reshape(-1))
    return out


def build_superpixels(grid_shape: tuple[int, int], features: list, block: int = 8,
                      weights=None) -> list[SuperPixel]:
    """Partition the grid into ``block`` x ``block`` cell blocks.

    ``features[l]`` holds per-cell embeddings of pyramid level ``l`` (level
    ``l`` is the grid pooled 2^l times).  The pooled feature is
    ``sum_l weights[l] * mean(features[l] over the block)``.
    """
    h, w = grid_shape
    levels = len(features)
    if levels < 1:
        raise ValueError("need at least one pyramid level")
    weights = np.full(levels, 1.0 / levels) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (levels,) or np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
        raise ValueError("weights must be non-negative, one per level, summing to 1")
    base = superpixel_members(h, w, block, 0)
    pooled = np.zeros((len(base), np.asarray(_value(features[0])).shape[1]))
    for lvl in range(levels):
        groups = superpixel_members(h, w, block, lvl)
        fv = np.asarray(_value(features[lvl]))
        pooled += weights[lvl] * np.stack([fv[g].mean(axis=0) for g in groups])
    bh, bw = block_layout(h, w, block)
    out = []
    for i, members in enumerate(base):
        br, bc = divmod(i, bw)
        center = np.array([(bc + 0.5) * block, (br + 0.5) * block])
        out.append(SuperPixel(center, members, pooled[i]))
    return out


def _value(x):
    return x.value if isinstance(x, dg.Node) else x


def superpixel_features(grid_shape, features: list[dg.Node], block: int, weights) -> dg.Node:
    """Graph version of the pooled superpixel features, (num_blocks, d)."""
    h, w = grid_shape
    out = None
    for lvl, f in enumerate(features):
        groups = superpixel_members(h, w, block, lvl)
        term = dg.scale(dg.matmul(pooling_matrix(groups, f.shape[0]), f), float(weights[lvl]))
        out = term if out is None else out + term
    return out


# -- attention ------------------------------------------------------------

@dataclass(frozen=True)
class AttentionConfig:
    dim: int = 32
    layers: int = 2
    ffn_hidden: int = 64
    standard_cross_attention: bool = False


@dataclass
class AttentionWeights:
    """Projection matrices of one attention block, bound to graph nodes."""

    wq: dg.Node
    wk: dg.Node
    wv: dg.Node

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def attention_param_shapes(cfg: AttentionConfig) -> dict[str, tuple]:
    d = cfg.dim
    shapes = {}
    for layer in range(cfg.layers):
        for kind in ("self", "cross"):
            for m in ("wq", "wk", "wv"):
                shapes[f"attn{layer}.{kind}.{m}"] = (d, d)
    return shapes


def attention_mlps(cfg: AttentionConfig) -> dict[str, Mlp]:
    mlps = {f"attn{layer}.ffn": Mlp(f"attn{layer}.ffn", (cfg.dim, cfg.ffn_hidden, cfg.dim))
            for layer in range(cfg.layers)}
    mlps["pe_point"] = Mlp("pe_point", (3, cfg.dim, cfg.dim))
    mlps["pe_pixel"] = Mlp("pe_pixel", (2, cfg.dim, cfg.dim))
    return mlps


def init_attention(cfg: AttentionConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in attention_param_shapes(cfg).items():
        params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
    for mlp in attention_mlps(cfg).values():
        p = mlp.init(rng)
        # small last layer keeps the residual branches near identity at start
        last = f"{mlp.name}.w{len(mlp.sizes) - 2}"
        p[last] *= 0.1
        params.update(p)
    return params


def _softmax_attention(q: dg.Node, k: dg.Node, v: dg.Node) -> tuple[dg.Node, dg.Node]:
    c = q.shape[1]
    a = dg.softmax_row(dg.scale(q @ k.T, 1.0 / np.sqrt(c)))
    return a @ v, a


def self_attention(f: dg.Node, w: AttentionWeights, ffn=None, pos_encoding: dg.Node | None = None,
                   return_attention: bool = False):
    """``x + softmax(q k^T / sqrt(C)) v`` followed by a residual feed-forward block.

    ``x = f + pos_encoding`` when an encoding is given; ``ffn`` is a callable
    on nodes (a bound MLP) or None.
    """
    x = f if pos_encoding is None else f + pos_encoding
    out, a = _softmax_attention(x @ w.wq, x @ w.wk, x @ w.wv)
    y = x + out
    if ffn is not None:
        y = y + ffn(y)
    return (y, a) if return_attention else y


def cross_attention(fp: dg.Node, fi: dg.Node, w: AttentionWeights, standard: bool = False,
                    return_attention: bool = False):
    """Exchange information between the point side and the image side.

    Query-value form (default): the point output attends with image keys but takes
    values from the point side, and vice versa; this needs equal row counts.
    ``standard=True`` takes the values from the attended (key) side.
    Both outputs carry a residual connection; the weights are shared.
    """
    qp, kp, vp = fp @ w.wq, fp @ w.wk, fp @ w.wv
    qi, ki, vi = fi @ w.wq, fi @ w.wk, fi @ w.wv
    if not standard and fp.shape[0] != fi.shape[0]:
        raise dg.ShapeError(
            f"query-value cross attention needs equal counts, got {fp.shape[0]} and {fi.shape[0]}; "
            "use standard=True")
    out_p, ap = _softmax_attention(qp, ki, vi if standard else vp)
    out_i, ai = _softmax_attention(qi, kp, vp if standard else vi)
    res = (fp + out_p, fi + out_i)
    return (res, (ap, ai)) if return_attention else res


def attention_stack(fp: dg.Node, fi: dg.Node, pos_p: np.ndarray, pos_i: np.ndarray,
                    params: dict[str, dg.Node], mlps: dict, cfg: AttentionConfig):
    """Interleaved self/cross layers; returns unit-norm coarse features."""
    pe_p = mlps["pe_point"](pos_p)
    pe_i = mlps["pe_pixel"](pos_i)
    for layer in range(cfg.layers):
        ws = AttentionWeights(*(params[f"attn{layer}.self.{m}"] for m in ("wq", "wk", "wv")))
        wc = AttentionWeights(*(params[f"attn{layer}.cross.{m}"] for m in ("wq", "wk", "wv")))
        ffn = mlps[f"attn{layer}.ffn"]
        fp = self_attention(fp, ws, ffn, pe_p if layer == 0 else None)
        fi = self_attention(fi, ws, ffn, pe_i if layer == 0 else None)
        fp, fi = cross_attention(fp, fi, wc, standard=cfg.standard_cross_attention)
    return dg.normalize_rows(fp), dg.normalize_rows(fi)


# -- correspondences ------------------------------------------------------

@dataclass
class CorrespondenceSet:
    """Matched (point, cell) pairs with confidences.

    For the coarse stage ``point_index`` indexes superpoints and ``cells``
    superpixels; for the fine stage they index points and level-0 cells.
    ``width`` is the number of columns of the cell layout.
    """

    point_index: np.ndarray
    cells: np.ndarray
    confidence: np.ndarray
    stage: str
    width: int
    distance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.point_index = np.asarray(self.point_index, dtype=np.int64)
        self.cells = np.asarray(self.cells, dtype=np.int64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.distance is None:
            self.distance = np.zeros(len(self.point_index))
        if self.stage not in ("coarse", "fine"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if len(np.unique(self.point_index)) != len(self.point_index):
            raise ValueError("duplicate point indices in correspondence set")
        if np.any((self.confidence < 0) | (self.confidence > 1)):
            raise ValueError("confidences must lie in [0, 1]")

    def __len__(self):
        return len(self.point_index)

    def as_set(self) -> set:
        return set(zip(self.point_index.tolist(), self.cells.tolist()))

    def cols_rows(self) -> tuple[np.ndarray, np.ndarray]:
        return self.cells % self.width, self.cells // self.width

    def pixels(self) -> np.ndarray:
        """Centres of the matched cells (fine stage), pixel units."""
        c, r = self.cols_rows()
        return np.stack([c + 0.5, r + 0.5], axis=1).astype(np.float64)

    def to_text(self) -> str:
        """Lines ``point_index u v confidence stage`` (u, v = cell column, row)."""
        c, r = self.cols_rows()
        lines = [f"# width {self.width}"]
        for i, u, v, conf in zip(self.point_index, c, r, self.confidence):
            lines.append(f"{i} {u} {v} {conf:.17g} {self.stage}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, width: int | None = None) -> "CorrespondenceSet":
        idx, cells, conf, stages = [], [], [], set()
        rows = []
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#":
                if len(parts) == 3 and parts[1] == "width" and width is None:
                    width = int(parts[2])
                continue
            rows.append(parts)
        if width is None:
            raise ValueError("cell layout width unknown")
        for parts in rows:
            i, u, v, c, stage = parts
            idx.append(int(i))
            cells.append(int(v) * width + int(u))
            conf.append(float(c))
            stages.add(stage)
        if len(stages) > 1:
            raise ValueError("mixed stages in one correspondence file")
        stage = stages.pop() if stages else "fine"
        return cls(np.array(idx, dtype=np.int64), np.array(cells, dtype=np.int64), np.array(conf), stage, width)


def _softmax_conf(d: np.ndarray, tau: float) -> np.ndarray:
    z = -d / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def _select(idx, cells, conf, dist, threshold: float, min_keep: int):
    """Threshold filter, falling back to the ``min_keep`` most confident pairs."""
    keep = conf >= threshold
    if keep.sum() < min_keep and len(conf):
        order = np.lexsort((idx, -conf))
        keep = np.zeros(len(conf), dtype=bool)
        keep[order[:min_keep]] = True
    sel = np.flatnonzero(keep)
    sel = sel[np.argsort(idx[sel], kind="stable")]
    return idx[sel], cells[sel], conf[sel], dist[sel]


def coarse_match(sp_features: np.ndarray, px_features: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
                 tau: float = DEFAULT_TAU, min_keep: int = 0, width: int = 1) -> CorrespondenceSet:
    """Nearest superpixel for every superpoint by feature distance.

    Confidence is the softmax of negative distances over all superpixels;
    ties go to the lowest superpixel index.
    """
    sp = np.asarray(sp_features, dtype=np.float64)
    px = np.asarray(px_features, dtype=np.float64)
    if len(sp) == 0 or len(px) == 0:
        raise ValueError("need at least one superpoint and one superpixel")
    d = pairwise_distance(sp, px)
    best = np.argmin(d, axis=1)
    rows = np.arange(len(sp))
    conf = _softmax_conf(d, tau)[rows, best]
    i, c, cf, dd = _select(rows, best, conf, d[rows, best], threshold, min_keep)
    return CorrespondenceSet(i, c, cf, "coarse", width, dd)


def fine_match(coarse: CorrespondenceSet, superpoints: list[SuperPoint], superpixels: list[SuperPixel],
               point_features: np.ndarray, cell_features: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
               tau: float = DEFAULT_TAU, min_keep: int = 0, width: int = 1) -> CorrespondenceSet:
    """Point-to-cell matching restricted to coarsely matched block pairs.

    Every member point of a matched superpoint takes its nearest member cell of
    the matched superpixel.  A point reached through several block pairs keeps
    the most confident match (ties: lowest cell index).
    """
    pf = np.asarray(point_features, dtype=np.float64)
    cf = np.asarray(cell_features, dtype=np.float64)
    best: dict[int, tuple] = {}
    for s, b in zip(coarse.point_index, coarse.cells):
        members = superpoints[s].members
        cells = np.sort(superpixels[b].members)
        d = pairwise_distance(pf[members], cf[cells])
        arg = np.argmin(d, axis=1)
        conf = _softmax_conf(d, tau)[np.arange(len(members)), arg]
        for p, a, c, dist in zip(members, arg, conf, d[np.arange(len(members)), arg]):
            cand = (float(c), -int(cells[a]), float(dist))
            cur = best.get(int(p))
            if cur is None or cand[:2] > cur[:2]:
                best[int(p)] = cand
    if not best:
        return CorrespondenceSet(np.zeros(0), np.zeros(0), np.zeros(0), "fine", width)
    idx = np.array(sorted(best))
    cells = np.array([-best[i][1] for i in idx])
    conf = np.array([best[i][0] for i in idx])
    dist = np.array([best[i][2] for i in idx])
    i, c, cfd, dd = _select(idx, cells, conf, dist, threshold, min_keep)
    return CorrespondenceSet(i, c, cfd, "fine", width, dd)


def single_stage_match(point_features: np.ndarray, cell_features: np.ndarray, threshold: float = DEFAULT_THRESHOLD,
                       tau: float = DEFAULT_TAU, min_keep: int = 0, width: int = 1,
                       points: np.ndarray | None = None) -> CorrespondenceSet:
    """Every point against every cell, no block restriction (ablation baseline)."""
    pf = np.asarray(point_features, dtype=np.float64)
    idx = np.arange(len(pf)) if points is None else np.asarray(points)
    d = pairwise_distance(pf[idx], np.asarray(cell_features, dtype=np.float64))
    best = np.argmin(d, axis=1)
    r = np.arange(len(idx))
    conf = _softmax_conf(d, tau)[r, best]
    i, c, cf, dd = _select(idx, best, conf, d[r, best], threshold, min_keep)
    return CorrespondenceSet(i, c, cf, "fine", width, dd)


# -- training-side helpers ------------------------------------------------

@dataclass
class MatchLoss:
    loss: dg.Node
    n_pairs: int

    @property
    def empty(self) -> bool:
        return self.n_pairs == 0


def match_loss(queries: dg.Node, keys: dg.Node, positives: np.ndarray, candidates: np.ndarray | None = None,
               tau: float = DEFAULT_TAU) -> MatchLoss:
    """Mean InfoNCE of each query against its ground-truth key.

    ``positives[i]`` is the key index for query i (-1: no ground truth, skipped).
    ``candidates`` optionally restricts each query's negatives to a boolean
    (n_queries, n_keys) mask.  With no ground-truth pair the loss is a zero
    constant and ``n_pairs`` is 0.
    """
    positives = np.asarray(positives, dtype=np.int64)
    rows = np.flatnonzero(positives >= 0)
    if rows.size == 0:
        return MatchLoss(queries.graph.const(0.0), 0)
    q = queries[rows]
    sim = dg.scale(dg.cosine_similarity_rows(q, keys), 1.0 / tau)
    if candidates is not None:
        mask = np.where(np.asarray(candidates)[rows], 0.0, -1e30)
        mask[np.arange(rows.size), positives[rows]] = 0.0
        sim = sim + mask
    pos = sim[np.arange(rows.size), positives[rows]]
    return MatchLoss(dg.mean(dg.logsumexp_row(sim) - pos), int(rows.size))


def soft_pixels(point_feats: dg.Node, cell_feats: dg.Node, candidates: np.ndarray, cell_xy: np.ndarray,
                tau: float = DEFAULT_TAU) -> tuple[dg.Node, dg.Node]:
    """Differentiable expected pixel and confidence per point.

    ``candidates`` is an (n, k) array of cell indices per point; the expected
    pixel is the softmax(similarity / tau)-weighted mean of their centres and
    the confidence is the largest softmax weight.
    """
    n, k = candidates.shape
    sims = dg.sum(dg.reshape(cell_feats[candidates.reshape(-1)], (n, k, -1))
                  * dg.reshape(point_feats, (n, 1, -1)), axis=2)
    p = dg.softmax_row(dg.scale(sims, 1.0 / tau))
    xy = cell_xy[candidates]                                  # (n, k, 2)
    u = dg.sum(p * xy[:, :, 0], axis=1)
    v = dg.sum(p * xy[:, :, 1], axis=1)
    best = np.argmax(p.value, axis=1)
    conf = p[np.arange(n), best]
    return dg.stack([u, v], axis=1), conf
