"""Differentiable perspective-n-point.

A linear (DLT) initializer is refined by Gauss-Newton on the weighted
reprojection error.  The refinement can be replayed on a
:class:`~crossreg.diffgraph.Graph` for a fixed number of iterations
(``mode="unrolled"``) or differentiated at the converged solution through the
implicit-function theorem (``mode="implicit"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from .geom import (CameraIntrinsics, Pose, axis_angle_to_matrix, orthonormalize, skew)

DEPTH_BARRIER = 1e-3
MIN_CORRESPONDENCES = 6
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 20
DEFAULT_UNROLL = 10
MAX_HALVINGS = 8
MAX_STALLS = 3


class DegenerateConfigurationError(ValueError):
    """The correspondences do not determine a pose (too few, collinear, planar...)."""


def _value(x):
    return x.value if isinstance(x, dg.Node) else np.asarray(x, dtype=np.float64)


@dataclass
class PnPProblem:
    """Weighted 3D-2D correspondences.

    ``pixels`` and ``weights`` may be graph nodes; the solver then uses their
    values and :func:`dpnp_forward_backward` differentiates through them.
    """

    points: np.ndarray
    pixels: object
    weights: object
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        n = len(self.points)
        if self.points.shape != (n, 3):
            raise ValueError(f"points must be N x 3, got {self.points.shape}")
        if self.weights is None:
            self.weights = np.ones(n)
        if not isinstance(self.pixels, dg.Node):
            self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if not isinstance(self.weights, dg.Node):
            self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.pixel_values.shape != (n, 2) or self.weight_values.shape != (n,):
            raise ValueError("pixels must be N x 2 and weights length N")
        w = self.weight_values
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("weights must lie in [0, 1]")

    def __len__(self):
        return len(self.points)

    @property
    def pixel_values(self) -> np.ndarray:
        return _value(self.pixels)

    @property
    def weight_values(self) -> np.ndarray:
        return _value(self.weights)

    def detached(self) -> "PnPProblem":
        return PnPProblem(self.points, self.pixel_values.copy(), self.weight_values.copy(), self.intrinsics)

    # -- text format ------------------------------------------------------

    def to_text(self) -> str:
        k = self.intrinsics
        lines = ["# crossreg-pnp v1",
                 f"intrinsics {k.fx:.17g} {k.fy:.17g} {k.cx:.17g} {k.cy:.17g} {k.width} {k.height}"]
        for p, uv, w in zip(self.points, self.pixel_values, self.weight_values):
            lines.append(" ".join(f"{v:.17g}" for v in (*p, *uv, w)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PnPProblem":
        k = None
        rows = []
        for line in text.splitlines():
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "intrinsics":
                fx, fy, cx, cy = (float(v) for v in parts[1:5])
                k = CameraIntrinsics(fx, fy, cx, cy, int(parts[5]), int(parts[6]))
                continue
            if len(parts) != 6:
                raise ValueError(f"expected 'X Y Z u v weight', got {line!r}")
            rows.append([float(v) for v in parts])
        if k is None:
            raise ValueError("missing intrinsics header")
        a = np.array(rows, dtype=np.float64).reshape(-1, 6)
        return cls(a[:, :3], a[:, 3:5], a[:, 5], k)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "PnPProblem":
        return cls.from_text(Path(path).read_text())


@dataclass
class PnPSolution:
    pose: Pose
    residual: float                      # weighted RMS reprojection error, pixels
    iterations: int
    converged: bool
    history: list = field(default_factory=list)   # cost after every accepted step
    behind: np.ndarray | None = None     # points clamped by the depth barrier


# -- residuals ------------------------------------------------------------

def _project_clamped(pose_r, pose_t, points, k: CameraIntrinsics):
    cam = points @ pose_r.T + pose_t
    behind = cam[:, 2] <= DEPTH_BARRIER
    z = np.maximum(cam[:, 2], DEPTH_BARRIER)
    uv = np.stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy], axis=1)
    return uv, cam, z, behind


def _cost(r, t, problem: PnPProblem) -> float:
    uv, *_ = _project_clamped(r, t, problem.points, problem.intrinsics)
    res = uv - problem.pixel_values
    return float(np.sum(problem.weight_values * np.sum(res * res, axis=1)))


def _rms(cost: float, problem: PnPProblem) -> float:
    wsum = float(np.sum(problem.weight_values))
    return float(np.sqrt(cost / wsum)) if wsum > 0 else 0.0


# -- initialization -------------------------------------------------------

def _normalizer(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Similarity moving the weighted centroid to 0 and mean distance to sqrt(dim)."""
    d = x.shape[1]
    c = np.average(x, axis=0, weights=w)
    spread = np.average(np.linalg.norm(x - c, axis=1), weights=w)
    if spread <= 0:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(d) / spread
    t = np.eye(d + 1)
    t[:d, :d] *= s
    t[:d, d] = -s * c
    return t


def pnp_init(problem: PnPProblem) -> Pose:
    """Direct linear transform on normalised image coordinates.

    The 3x4 projection is recovered up to scale from the weighted homogeneous
    system; its left block is projected onto SO(3) (polar factor, sign chosen
    so det = +1) and the translation rescaled accordingly.
    """
    w = problem.weight_values
    use = w > 0
    if use.sum() < MIN_CORRESPONDENCES:
        raise DegenerateConfigurationError(
            f"need {MIN_CORRESPONDENCES} weighted correspondences, got {int(use.sum())}")
    k = problem.intrinsics
    pts = problem.points[use]
    uv = problem.pixel_values[use]
    wu = w[use]
    xn = np.stack([(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy], axis=1)
    t3 = _normalizer(pts, wu)
    t2 = _normalizer(xn, wu)
    ph = np.column_stack([pts, np.ones(len(pts))]) @ t3.T
    xh = np.column_stack([xn, np.ones(len(xn))]) @ t2.T
    n = len(pts)
    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = ph
    a[0::2, 8:12] = -xh[:, 0:1] * ph
    a[1::2, 4:8] = ph
    a[1::2, 8:12] = -xh[:, 1:2] * ph
    a *= np.repeat(wu, 2)[:, None]
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] <= 1e-9 * sv[0]:
        raise DegenerateConfigurationError("rank-deficient projection system")
    p = np.linalg.solve(t2, vt[-1].reshape(3, 4) @ t3)
    m = p[:, :3]
    if np.linalg.det(m) < 0:
        p = -p
        m = -m
    u, s, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        raise DegenerateConfigurationError("projection block is a reflection")
    scale = s.mean()
    if scale <= 0:
        raise DegenerateConfigurationError("zero projection scale")
    return Pose(orthonormalize(r), p[:, 3] / scale)


# -- Gauss-Newton ---------------------------------------------------------

def _normal_equations(r, t, problem: PnPProblem):
    k = problem.intrinsics
    uv, cam, z, behind = _project_clamped(r, t, problem.points, k)
    res = uv - problem.pixel_values
    w = problem.weight_values
    a = cam - t                                           # R P
    n = len(cam)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = k.fx / z
    dpi[:, 0, 2] = -k.fx * cam[:, 0] / z ** 2
    dpi[:, 1, 1] = k.fy / z
    dpi[:, 1, 2] = -k.fy * cam[:, 1] / z ** 2
    dx = np.zeros((n, 3, 6))
    dx[:, :, :3] = -np.stack([skew(v) for v in a])
    dx[:, :, 3:] = np.eye(3)
    jac = dpi @ dx                                        # (n, 2, 6)
    jac[behind] = 0.0
    h = np.einsum("n,nij,nik->jk", w, jac, jac)
    g = np.einsum("n,nij,ni->j", w, jac, res)
    return h, g, behind


def _step(r, t, h, g):
    try:
        delta = -np.linalg.solve(h, g)
    except np.linalg.LinAlgError:
        delta = -np.linalg.lstsq(h, g, rcond=None)[0]
    return delta


def _apply(r, t, delta, alpha):
    r_new = orthonormalize(axis_angle_to_matrix(alpha * delta[:3]) @ r)
    return r_new, t + alpha * delta[3:]


def _line_search(r, t, delta, cost, problem):
    """Largest alpha in {1, 1/2, ..., 1/2^8} that does not raise the cost."""
    alpha = 1.0
    for _ in range(MAX_HALVINGS + 1):
        r_new, t_new = _apply(r, t, delta, alpha)
        c_new = _cost(r_new, t_new, problem)
        if c_new <= cost:
            return alpha, r_new, t_new, c_new
        alpha *= 0.5
    return None


def gauss_newton_refine(problem: PnPProblem, init: Pose, max_iters: int = DEFAULT_MAX_ITERS,
                        tol: float = DEFAULT_TOL) -> PnPSolution:
    """Minimise the weighted squared reprojection error from ``init``.

    Steps are a left axis-angle increment on R and an additive increment on t,
    with backtracking so the cost never increases.  Three consecutive steps
    without a decrease end the run with ``converged=False`` and the best pose.
    """
    r, t = init.rotation.copy(), init.translation.copy()
    cost = _cost(r, t, problem)
    history = [cost]
    stalls = 0
    converged = False
    iters = 0
    behind = np.zeros(len(problem), dtype=bool)
    for _ in range(max_iters):
        h, g, behind = _normal_equations(r, t, problem)
        delta = _step(r, t, h, g)
        if not np.all(np.isfinite(delta)) or np.linalg.norm(delta) < tol:
            converged = bool(np.all(np.isfinite(delta)))
            break
        found = _line_search(r, t, delta, cost, problem)
        if found is None or found[3] >= cost:
            stalls += 1
            if found is not None:
                r, t = found[1], found[2]
            if stalls >= MAX_STALLS:
                break
            continue
        stalls = 0
        _, r, t, cost = found
        iters += 1
        history.append(cost)
    _, _, _, behind = _project_clamped(r, t, problem.points, problem.intrinsics)
    return PnPSolution(Pose(r, t), _rms(cost, problem), iters, converged, history, behind)


def solve_pnp(problem: PnPProblem, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
              fallback: Pose | None = None) -> PnPSolution:
    """Initializer then refinement.

    When the initializer reports a degenerate configuration and ``fallback`` is
    given, refinement starts from ``fallback`` instead of raising.
    """
    try:
        init = pnp_init(problem)
    except DegenerateConfigurationError:
        if fallback is None:
            raise
        init = fallback
    return gauss_newton_refine(problem, init, max_iters, tol)


# -- graph versions -------------------------------------------------------

def _graph_normal_equations(rot: dg.Node, trans: dg.Node, points: np.ndarray, pixels: dg.Node,
                            weights: dg.Node, k: CameraIntrinsics):
    """Gauss-Newton system ``H``, ``g`` and the cost as graph nodes."""
    a = points @ rot.T                                    # R P, (n, 3)
    cam = a + trans
    x, y = cam[:, 0], cam[:, 1]
    z = dg.clip_min(cam[:, 2], DEPTH_BARRIER)
    inv_z = 1.0 / z
    u = dg.scale(x * inv_z, k.fx) + k.cx
    v = dg.scale(y * inv_z, k.fy) + k.cy
    ru = u - pixels[:, 0]
    rv = v - pixels[:, 1]
    p0 = dg.scale(inv_z, k.fx)
    p2 = dg.scale(x * inv_z * inv_z, -k.fx)
    q1 = dg.scale(inv_z, k.fy)
    q2 = dg.scale(y * inv_z * inv_z, -k.fy)
    a0, a1, a2 = a[:, 0], a[:, 1], a[:, 2]
    zero = dg.scale(p0, 0.0)
    ju = dg.stack([p2 * a1, p0 * a2 - p2 * a0, -(p0 * a1), p0, zero, p2], axis=1)
    jv = dg.stack([q2 * a1 - q1 * a2, -(q2 * a0), q1 * a0, zero, q1, q2], axis=1)
    wcol = dg.reshape(weights, (-1, 1))
    h = (ju * wcol).T @ ju + (jv * wcol).T @ jv
    g = (ju * wcol).T @ ru + (jv * wcol).T @ rv
    cost = dg.sum(weights * (ru * ru + rv * rv))
    return h, g, cost


def _unrolled(problem: PnPProblem, init: Pose, iters: int, graph: dg.Graph):
    k = problem.intrinsics
    pixels, weights = problem.pixels, problem.weights
    rot = graph.const(init.rotation)
    trans = graph.const(init.translation)
    plain = problem.detached()
    for _ in range(iters):
        h, g, cost = _graph_normal_equations(rot, trans, problem.points, pixels, weights, k)
        sv = np.linalg.svd(h.value, compute_uv=False)
        if not np.isfinite(sv).all() or sv[-1] * 1e14 < sv[0]:
            break
        delta = -dg.solve(h, g)
        # steps run even at the optimum: the zero step still carries gradient
        found = _line_search(rot.value, trans.value, delta.value, cost.value.item(), plain)
        if found is not None:
            alpha = found[0]
        elif np.linalg.norm(delta.value) < 1e-8:
            alpha = 1.0          # rounding-level cost change at convergence
        else:
            break
        step = dg.scale(delta, alpha)
        rot = dg.project_so3(dg.so3_exp(step[0:3]) @ rot)
        trans = trans + step[3:6]
    return rot, trans


def _tangent_of_pose(r_star: np.ndarray) -> np.ndarray:
    """d [vec(R), t] / d (theta, dt) at theta = 0 for R = exp([theta]x) R*, (12, 6)."""
    jac = np.zeros((12, 6))
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        jac[:9, j] = (skew(e) @ r_star).reshape(-1)
    jac[9:, 3:] = np.eye(3)
    return jac


def _implicit(problem: PnPProblem, sol: PnPSolution, graph: dg.Graph):
    """Custom node [vec(R), t] with an implicit-function backward rule."""
    r_star = sol.pose.rotation
    t_star = sol.pose.translation
    pix_v = problem.pixel_values
    w_v = problem.weight_values
    k = problem.intrinsics

    def back(go):
        sub = dg.Graph(check_finite=False)
        theta = sub.param("theta", np.zeros(6))
        pix = sub.param("pixels", pix_v)
        wts = sub.param("weights", w_v)
        rot = dg.so3_exp(theta[0:3]) @ sub.const(r_star)
        trans = theta[3:6] + t_star
        _, g, _ = _graph_normal_equations(rot, trans, problem.points, pix, wts, k)
        d_theta = np.zeros((6, 6))
        d_pix = np.zeros((6,) + pix_v.shape)
        d_w = np.zeros((6,) + w_v.shape)
        for i in range(6):
            gt, gp, gw = sub.backward(g[i], wrt=[theta, pix, wts])
            d_theta[i], d_pix[i], d_w[i] = gt, gp, gw
        g_theta = _tangent_of_pose(r_star).T @ go
        try:
            lam = np.linalg.solve(d_theta.T, g_theta)
        except np.linalg.LinAlgError:
            lam = np.linalg.lstsq(d_theta.T, g_theta, rcond=None)[0]
        return [-np.tensordot(lam, jac, axes=1)
                for node, jac in ((problem.pixels, d_pix), (problem.weights, d_w))
                if isinstance(node, dg.Node)]

    parents = [n for n in (problem.pixels, problem.weights) if isinstance(n, dg.Node)]
    out = graph.custom(np.concatenate([r_star.reshape(-1), t_star]), parents, back, op="pnp_implicit")
    return dg.reshape(out[0:9], (3, 3)), out[9:12]


@dataclass
class DiffPnPResult:
    solution: PnPSolution
    rotation: dg.Node
    translation: dg.Node


def dpnp_forward_backward(problem: PnPProblem, mode: str = "unrolled", iters: int = DEFAULT_UNROLL,
                          init: Pose | None = None, fallback: Pose | None = None) -> DiffPnPResult:
    """Differentiable pose from correspondences whose pixels/weights are nodes.

    ``mode="unrolled"`` replays ``iters`` Gauss-Newton steps on the graph
    starting from a detached initial pose; ``mode="implicit"`` refines to
    convergence in numpy and differentiates the stationarity condition.  The
    returned rotation/translation nodes feed :func:`pose_loss` and
    :func:`reproj_loss`; calling ``graph.backward`` yields the gradients.
    """
    nodes = [n for n in (problem.pixels, problem.weights) if isinstance(n, dg.Node)]
    if not nodes:
        raise ValueError("problem carries no graph nodes to differentiate")
    graph = nodes[0].graph
    plain = problem.detached()
    if init is None:
        try:
            init = pnp_init(plain)
        except DegenerateConfigurationError:
            if fallback is None:
                raise
            init = fallback
    if mode == "unrolled":
        rot, trans = _unrolled(problem, init, iters, graph)
        pose = Pose(orthonormalize(rot.value), trans.value)
        cost = _cost(pose.rotation, pose.translation, plain)
        _, _, _, behind = _project_clamped(pose.rotation, pose.translation, plain.points, plain.intrinsics)
        sol = PnPSolution(pose, _rms(cost, plain), iters, True, [cost], behind)
        return DiffPnPResult(sol, rot, trans)
    if mode == "implicit":
        sol = gauss_newton_refine(plain, init)
        rot, trans = _implicit(problem, sol, graph)
        return DiffPnPResult(sol, rot, trans)
    raise ValueError(f"unknown mode {mode!r}")


# -- losses ---------------------------------------------------------------

def pose_loss(pred, gt: Pose, lambda_t: float = 1.0):
    """``||R - R_gt||_F^2 + lambda_t ||t - t_gt||^2``.

    ``pred`` is a :class:`Pose` (returns a float) or a (rotation, translation)
    pair of nodes (returns a node).
    """
    if isinstance(pred, Pose):
        dr = pred.rotation - gt.rotation
        dt = pred.translation - gt.translation
        return float(np.sum(dr * dr) + lambda_t * np.sum(dt * dt))
    rot, trans = pred
    dr = rot - gt.rotation
    dt = trans - gt.translation
    return dg.sum(dr * dr) + dg.scale(dg.sum(dt * dt), lambda_t)


def reproj_loss(pred, problem: PnPProblem):
    """``sum_i w_i ||pi(R P_i + t) - I_i||^2`` with the depth barrier."""
    if isinstance(pred, Pose) and not any(isinstance(x, dg.Node) for x in (problem.pixels, problem.weights)):
        return _cost(pred.rotation, pred.translation, problem)
    if isinstance(pred, Pose):
        g = (problem.pixels if isinstance(problem.pixels, dg.Node) else problem.weights).graph
        pred = (g.const(pred.rotation), g.const(pred.translation))
    rot, trans = pred
    k = problem.intrinsics
    cam = problem.points @ rot.T + trans
    z = dg.clip_min(cam[:, 2], DEPTH_BARRIER)
    u = dg.scale(cam[:, 0] / z, k.fx) + k.cx
    v = dg.scale(cam[:, 1] / z, k.fy) + k.cy
    ru = u - problem.pixels[:, 0]
    rv = v - problem.pixels[:, 1]
    return dg.sum((ru * ru + rv * rv) * problem.weights)


def proj_loss(pred, gt: Pose, problem: PnPProblem, lambda_t: float = 1.0):
    return pose_loss(pred, gt, lambda_t) + reproj_loss(pred, problem)
