"""Handcrafted descriptors and small MLP encoders for both modalities.

Descriptors are plain numpy (they carry no parameters); the MLPs run on a
:class:`~crossreg.diffgraph.Graph` so the embeddings can be differentiated
with respect to their weights.  Every embedding row is L2-normalised, so
cosine similarity between rows is a dot product.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffgraph as dg
from .geom import PointCloud, axis_angle_to_matrix

POINT_DESCRIPTOR_DIM = 9
PIXEL_DESCRIPTOR_DIM = 8


# -- point descriptors ----------------------------------------------------

def point_descriptors(points: np.ndarray, k: int = 8, density_radius: float = 0.75,
                      coord_scale: float = 5.0) -> np.ndarray:
    """Per-point raw features, shape (N, 9).

    Columns: centred xyz (3), distance to the local centroid, eigenvalue ratios
    l2/l1 and l3/l1 of the local covariance, height above the lowest point
    (up is -y), the fraction of a 32-point budget found within
    ``density_radius``, and a constant 1.  Lengths are divided by ``coord_scale``.
    """
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    centred = p - p.mean(axis=0)
    d2 = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1)
    kk = min(k, n - 1)
    # self is always the nearest (distance 0); a stable sort keeps ties ordered
    nbr = np.argsort(d2, axis=1, kind="stable")[:, : kk + 1]
    hood = p[nbr]                                   # (N, kk+1, 3)
    local_c = hood.mean(axis=1)
    dist_c = np.linalg.norm(p - local_c, axis=1)
    diff = hood - local_c[:, None, :]
    cov = np.einsum("nki,nkj->nij", diff, diff) / hood.shape[1]
    ev = np.linalg.eigvalsh(cov)[:, ::-1]           # descending
    ratios = np.zeros((n, 2))
    ok = ev[:, 0] > 1e-12
    ratios[ok] = np.clip(ev[ok, 1:] / ev[ok, :1], 0.0, 1.0)
    height = (p[:, 1].max() - p[:, 1])
    count = np.sum(d2 < density_radius ** 2, axis=1) - 1
    density = np.minimum(count, 32) / 32.0
    return np.column_stack([centred / coord_scale, dist_c / coord_scale, ratios,
                            height / coord_scale, density, np.ones(n)])


# -- pixel descriptors ----------------------------------------------------

def _shifted(a: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """``a[r + dr, c + dc]`` with edge replication."""
    h, w = a.shape
    rows = np.clip(np.arange(h) + dr, 0, h - 1)
    cols = np.clip(np.arange(w) + dc, 0, w - 1)
    return a[np.ix_(rows, cols)]


def pixel_descriptors(grid: np.ndarray) -> np.ndarray:
    """Per-cell raw features, shape (H*W, 8), cells in row-major order.

    Columns: normalised intensity, horizontal and vertical central-difference
    gradients, 2x2 mean pool, normalised column/row coordinates in [-1, 1],
    3x3 local variance, constant 1.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2 or g.size == 0:
        raise ValueError("grid must be a non-empty 2-D array")
    h, w = g.shape
    top = g.max()
    inten = g / top if top > 0 else g.copy()
    gx = 0.5 * (_shifted(inten, 0, 1) - _shifted(inten, 0, -1))
    gy = 0.5 * (_shifted(inten, 1, 0) - _shifted(inten, -1, 0))
    pool = 0.25 * (inten + _shifted(inten, 0, 1) + _shifted(inten, 1, 0) + _shifted(inten, 1, 1))
    win = np.stack([_shifted(inten, dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)])
    var = win.var(axis=0)
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    u = (cols + 0.5) / w * 2.0 - 1.0
    v = (rows + 0.5) / h * 2.0 - 1.0
    feats = [inten, gx, gy, pool, u, v, var, np.ones_like(inten)]
    return np.stack([f.reshape(-1) for f in feats], axis=1)


def pool2(grid: np.ndarray) -> np.ndarray:
    """2x2 average pooling (odd trailing row/column is dropped)."""
    g = np.asarray(grid, dtype=np.float64)
    h, w = (g.shape[0] // 2) * 2, (g.shape[1] // 2) * 2
    if h == 0 or w == 0:
        raise ValueError("grid too small to pool")
    g = g[:h, :w]
    return 0.25 * (g[0::2, 0::2] + g[1::2, 0::2] + g[0::2, 1::2] + g[1::2, 1::2])


# -- MLP ------------------------------------------------------------------

@dataclass(frozen=True)
class Mlp:
    """Fully connected relu network; parameters live outside, keyed by name."""

    name: str
    sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")

    @property
    def param_names(self) -> list[str]:
        out = []
        for i in range(len(self.sizes) - 1):
            out += [f"{self.name}.w{i}", f"{self.name}.b{i}"]
        return out

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            params[f"{self.name}.w{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            params[f"{self.name}.b{i}"] = np.zeros(fan_out)
        return params

    def bind(self, graph: dg.Graph, params: Mapping[str, np.ndarray]) -> "BoundMlp":
        nodes = {}
        for key in self.param_names:
            node = graph.params.get(key)
            if node is None:
                node = graph.param(key, params[key])
            nodes[key] = node
        return BoundMlp(self, graph, nodes)


@dataclass
class BoundMlp:
    mlp: Mlp
    graph: dg.Graph
    nodes: dict

    def __call__(self, x) -> dg.Node:
        if not isinstance(x, dg.Node):
            x = self.graph.const(x)
        n_layers = len(self.mlp.sizes) - 1
        for i in range(n_layers):
            x = x @ self.nodes[f"{self.mlp.name}.w{i}"] + self.nodes[f"{self.mlp.name}.b{i}"]
            if i < n_layers - 1:
                x = dg.relu(x)
        return x


def make_encoder(name: str, in_dim: int, out_dim: int = 32, hidden: tuple[int, ...] = (64, 64)) -> Mlp:
    return Mlp(name, (in_dim, *hidden, out_dim))


def embed(descriptors: np.ndarray, encoder: BoundMlp) -> dg.Node:
    return dg.normalize_rows(encoder(descriptors))


def encode_points(cloud: PointCloud, encoder: BoundMlp, **descriptor_kw) -> dg.Node:
    """Unit-norm embedding per point, (N, d)."""
    return embed(point_descriptors(cloud.points, **descriptor_kw), encoder)


def encode_image(grid: np.ndarray, encoder: BoundMlp) -> dg.Node:
    """Unit-norm embedding per grid cell, (H*W, d), row-major."""
    return embed(pixel_descriptors(grid), encoder)


# -- augmentation ---------------------------------------------------------

def augment(cloud: PointCloud, seed, max_rotation_deg: float = 10.0, jitter: float = 0.02,
            dropout: float = 0.05) -> tuple[PointCloud, np.ndarray]:
    """Random rigid rotation about the centroid, uniform jitter, point dropout.

    Returns the augmented cloud and the indices of the surviving points (in
    their original order).  ``jitter`` is the half-width of the uniform noise
    per coordinate.  At least one point always survives.
    """
    if not 0 <= max_rotation_deg <= 180:
        raise ValueError("max_rotation_deg must be in [0, 180]")
    if not 0 <= dropout <= 0.1:
        raise ValueError("dropout must be in [0, 0.1]")
    rng = np.random.default_rng(seed)
    p = cloud.points
    n = len(p)
    n_drop = int(np.floor(dropout * n))
    if n_drop:
        dropped = rng.choice(n, size=min(n_drop, n - 1), replace=False)
        kept = np.setdiff1d(np.arange(n), dropped)
    else:
        kept = np.arange(n)
    q = p[kept]
    if max_rotation_deg > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.deg2rad(rng.uniform(0.0, max_rotation_deg))
        r = axis_angle_to_matrix(axis * angle)
        c = p.mean(axis=0)
        q = (q - c) @ r.T + c
    if jitter > 0:
        q = q + rng.uniform(-jitter, jitter, size=q.shape)
    return PointCloud(q), kept


# -- checkpoints ----------------------------------------------------------

CHECKPOINT_HEADER = "# crossreg-checkpoint v1"


def save_params(path, params: Mapping[str, np.ndarray]) -> None:
    """Write named tensors as text.

    Layout: the header line, then per tensor a line
    ``tensor <name> <d1,d2,...>`` followed by one line holding the row-major
    values in ``%.17g`` (exact float64 round trip).  Names are sorted.
    """
    lines = [CHECKPOINT_HEADER]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"tensor {name} {shape}")
        lines.append(" ".join(f"{v:.17g}" for v in arr.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> dict[str, np.ndarray]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a crossreg checkpoint")
    out = {}
    i = 1
    while i < len(text):
        head = text[i].split()
        if not head:
            i += 1
            continue
        if head[0] != "tensor" or len(head) != 3:
            raise ValueError(f"{path}:{i + 1}: malformed tensor header")
        name, shape_s = head[1], head[2]
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        body = text[i + 1] if i + 1 < len(text) else ""
        vals = np.array([float(v) for v in body.split()], dtype=np.float64)
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"{path}: tensor {name} has {vals.size} values for shape {shape}")
        out[name] = vals.reshape(shape)
        i += 2
    return out
