"""Registration metrics: rotation/translation error, inlier ratio, RMSE and
registration recall, plus per-scene CSV export."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geom import CameraIntrinsics, Pose, euler_zyx, project_points

DEFAULT_TAU_PX = 3.0
DEFAULT_TAU_FRAME = math.sqrt(DEFAULT_TAU_PX)
DEFAULT_THRESHOLD_DEG = 10.0
DEFAULT_THRESHOLD_M = 5.0


def rre(gt: Pose, pred: Pose) -> float:
    """Sum of absolute ZYX Euler angles of ``R_gt^-1 R_pred``, degrees."""
    rel = gt.rotation.T @ pred.rotation
    return float(np.sum(np.abs(euler_zyx(rel))))


def rte(gt: Pose, pred: Pose) -> float:
    return float(np.linalg.norm(gt.translation - pred.translation))


def _reprojection_errors(points: np.ndarray, pixels: np.ndarray, gt: Pose, k: CameraIntrinsics) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(points) != len(pixels):
        raise ValueError("points and pixels must pair up")
    proj, _, front = project_points(points, gt, k)
    err = np.full(len(points), np.inf)
    err[front] = np.linalg.norm(proj[front] - pixels[front], axis=1)
    return err


def ir(points: np.ndarray, pixels: np.ndarray, gt: Pose, k: CameraIntrinsics,
       tau_px: float = DEFAULT_TAU_PX) -> float | None:
    """Fraction of pairs whose true projection lies strictly within ``tau_px``.

    Returns None (metric absent) for an empty set.  Points behind the camera
    under ``gt`` count as outliers.
    """
    err = _reprojection_errors(points, pixels, gt, k)
    if err.size == 0:
        return None
    return float(np.mean(err < tau_px))


def rmse(points: np.ndarray, pixels: np.ndarray, gt: Pose, k: CameraIntrinsics,
         conventional: bool = False) -> float | None:
    """``sqrt(mean ||proj - pixel||)``; ``conventional=True`` squares the norms first.

    Returns None for an empty set.
    """
    err = _reprojection_errors(points, pixels, gt, k)
    if err.size == 0:
        return None
    return float(np.sqrt(np.mean(err ** 2 if conventional else err)))


def rr(frame_rmse: Sequence[float | None], tau_frame: float = DEFAULT_TAU_FRAME) -> float:
    """Fraction of frames whose RMSE is strictly below ``tau_frame``.

    A frame without correspondences (RMSE absent) counts as not registered.
    """
    if len(frame_rmse) == 0:
        raise ValueError("rr needs at least one frame")
    hits = sum(1 for v in frame_rmse if v is not None and v < tau_frame)
    return hits / len(frame_rmse)


def registration_accepted(rre_deg: float, rte_m: float, threshold_deg: float = DEFAULT_THRESHOLD_DEG,
                          threshold_m: float = DEFAULT_THRESHOLD_M) -> bool:
    return bool(rre_deg < threshold_deg and rte_m < threshold_m)


# -- aggregation ----------------------------------------------------------

@dataclass
class SceneMetrics:
    scene_id: str
    rre: float
    rte: float
    ir: float | None
    rmse: float | None
    accepted: bool
    n_pairs: int = 0
    error: str | None = None


@dataclass
class MetricsReport:
    """Aggregate over frames; ``rre``/``rte`` are means over finite values."""

    rre: float
    rre_std: float
    rte: float
    rte_std: float
    ir: float | None
    rmse: float | None
    rr: float
    recall: float                 # fraction of frames passing registration_accepted
    n_pairs: int
    n_frames: int
    scenes: list = field(default_factory=list)

    @classmethod
    def from_scenes(cls, scenes: Sequence[SceneMetrics], tau_frame: float = DEFAULT_TAU_FRAME) -> "MetricsReport":
        scenes = list(scenes)
        if not scenes:
            raise ValueError("no scenes to aggregate")
        rres = _finite([s.rre for s in scenes])
        rtes = _finite([s.rte for s in scenes])
        irs = [s.ir for s in scenes if s.ir is not None]
        rmses = [s.rmse for s in scenes if s.rmse is not None]
        return cls(
            rre=_mean(rres), rre_std=_std(rres), rte=_mean(rtes), rte_std=_std(rtes),
            ir=float(np.mean(irs)) if irs else None,
            rmse=float(np.mean(rmses)) if rmses else None,
            rr=rr([s.rmse for s in scenes], tau_frame),
            recall=float(np.mean([s.accepted for s in scenes])),
            n_pairs=sum(s.n_pairs for s in scenes), n_frames=len(scenes), scenes=scenes)

    def median_rre(self) -> float:
        return float(np.median([s.rre for s in self.scenes]))


def _finite(v):
    a = np.asarray(v, dtype=np.float64)
    return a[np.isfinite(a)]


def _mean(a) -> float:
    return float(np.mean(a)) if len(a) else math.nan


def _std(a) -> float:
    return float(np.std(a)) if len(a) else math.nan


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    return f"{v:.6g}"


def pm(mean: float, std: float, digits: int = 2) -> str:
    """``mean±std`` in the usual table style, e.g. ``0.87±0.33``."""
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def metrics_csv(report: MetricsReport) -> str:
    """Per-scene rows ``scene_id,rre_deg,rte,ir,rmse,accepted`` and a summary row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scene_id", "rre_deg", "rte", "ir", "rmse", "accepted"])
    for s in report.scenes:
        w.writerow([s.scene_id, _fmt(s.rre), _fmt(s.rte), _fmt(s.ir), _fmt(s.rmse), _fmt(s.accepted)])
    irs = [s.ir for s in report.scenes if s.ir is not None]
    rmses = [s.rmse for s in report.scenes if s.rmse is not None]
    w.writerow(["mean±std", pm(report.rre, report.rre_std), pm(report.rte, report.rte_std),
                pm(_mean(irs), _std(irs)), pm(_mean(rmses), _std(rmses)), f"{report.recall:.4f}"])
    return buf.getvalue()
