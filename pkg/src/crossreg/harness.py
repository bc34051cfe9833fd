"""Synthetic image/point-cloud scenes with known poses, noise and occlusion
ablations, scene persistence and the benchmark runner."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geom import (CameraIntrinsics, Pose, PointCloud, cell_of, inverse, project_points, random_pose,
                   transform)
from .metrics import MetricsReport, SceneMetrics

log = logging.getLogger(__name__)

SCENE_HEADER = "# crossreg-scene v1"
MIN_VISIBLE = 50
MAX_RETRIES = 20
BACKGROUND = 0.05
DEPTH_MARGIN = 0.5
ALBEDO = {"ground": 0.35, "wall": 0.7, "cluster": 1.0}


class SceneGenerationError(RuntimeError):
    pass


def default_intrinsics(width: int = 32, height: int = 32) -> CameraIntrinsics:
    """Focal length of 28 cells per 32 cells of image, principal point at the centre."""
    return CameraIntrinsics(28.0 * width / 32.0, 28.0 * height / 32.0, width / 2.0, height / 2.0, width, height)


@dataclass(frozen=True)
class Scene:
    cloud: PointCloud
    grid: np.ndarray
    intrinsics: CameraIntrinsics
    gt_pose: Pose
    id: str

    def __post_init__(self):
        g = np.array(self.grid, dtype=np.float64)
        if g.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(f"grid shape {g.shape} does not match intrinsics")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    def visibility(self) -> np.ndarray:
        return visible_mask(self.points, self.gt_pose, self.intrinsics)

    def gt_pixels(self) -> np.ndarray:
        """True projection of every point (NaN behind the camera)."""
        uv, _, _ = project_points(self.points, self.gt_pose, self.intrinsics)
        return uv

    def gt_cells(self) -> np.ndarray:
        """Row-major cell index of each visible point, -1 otherwise."""
        vis = self.visibility()
        cols, rows, _ = cell_of(self.gt_pixels(), self.intrinsics)
        out = np.full(len(self.points), -1, dtype=np.int64)
        out[vis] = rows[vis] * self.intrinsics.width + cols[vis]
        return out

    def gt_correspondences(self) -> tuple[np.ndarray, np.ndarray]:
        """(point indices, exact pixels) of the visible points."""
        idx = np.flatnonzero(self.visibility())
        return idx, self.gt_pixels()[idx]

    def content_equal(self, other: "Scene") -> bool:
        return (np.array_equal(self.points, other.points) and np.array_equal(self.grid, other.grid)
                and self.intrinsics == other.intrinsics and self.gt_pose == other.gt_pose)


# -- rendering ------------------------------------------------------------

def _zbuffer(points: np.ndarray, pose: Pose, k: CameraIntrinsics, footprint: int = 1):
    uv, z, front = project_points(points, pose, k)
    cols, rows, inside = cell_of(uv, k)
    depth = np.full((k.height, k.width), np.inf)
    owner = np.full((k.height, k.width), -1, dtype=np.int64)
    # stable near-to-far order so the nearest point owns each cell
    order = np.argsort(np.where(front, z, np.inf), kind="stable")
    for i in order:
        if not front[i]:
            break
        for dr in range(-footprint, footprint + 1):
            for dc in range(-footprint, footprint + 1):
                r, c = rows[i] + dr, cols[i] + dc
                if 0 <= r < k.height and 0 <= c < k.width and z[i] < depth[r, c]:
                    depth[r, c] = z[i]
                    owner[r, c] = i
    return depth, owner, cols, rows, inside & front, z


def visible_mask(points: np.ndarray, pose: Pose, k: CameraIntrinsics) -> np.ndarray:
    """In the image and not hidden behind a nearer surface (z-buffer test)."""
    depth, _, cols, rows, inside, z = _zbuffer(points, pose, k)
    vis = np.zeros(len(points), dtype=bool)
    vis[inside] = z[inside] <= depth[rows[inside], cols[inside]] + DEPTH_MARGIN
    return vis


def render(points: np.ndarray, intensity: np.ndarray, pose: Pose, k: CameraIntrinsics) -> np.ndarray:
    """Splat each point over a 3x3 cell footprint; the nearest point wins a cell."""
    _, owner, *_ = _zbuffer(points, pose, k)
    grid = np.full((k.height, k.width), BACKGROUND)
    hit = owner >= 0
    grid[hit] = intensity[owner[hit]]
    return grid


# -- generation -----------------------------------------------------------

def _structure(rng: np.random.Generator, n: int):
    """Camera-frame points of a ground plane, walls and blobs, plus albedo."""
    n_ground = int(0.35 * n)
    n_wall = int(0.3 * n)
    n_cluster = n - n_ground - n_wall
    parts, kinds = [], []
    ground_y = 1.5 + rng.uniform(-0.2, 0.2)
    gz = rng.uniform(2.5, 9.0, n_ground)
    # ground spans slightly more than the horizontal field of view
    g = np.column_stack([gz * rng.uniform(-0.65, 0.65, n_ground),
                         ground_y + rng.normal(0.0, 0.02, n_ground), gz])
    parts.append(g)
    kinds += ["ground"] * n_ground
    # a back wall and one side wall, each a vertical plane with random offset
    n_back = n_wall // 2
    back_z = rng.uniform(7.0, 9.0)
    parts.append(np.column_stack([rng.uniform(-5.0, 5.0, n_back), rng.uniform(ground_y - 3.5, ground_y, n_back),
                                  back_z + rng.normal(0.0, 0.02, n_back)]))
    n_side = n_wall - n_back
    side_x = rng.choice([-1.0, 1.0]) * rng.uniform(1.8, 3.0)
    parts.append(np.column_stack([side_x + rng.normal(0.0, 0.02, n_side),
                                  rng.uniform(ground_y - 3.0, ground_y, n_side), rng.uniform(3.0, back_z, n_side)]))
    kinds += ["wall"] * n_wall
    n_blobs = int(rng.integers(3, 6))
    sizes = np.full(n_blobs, n_cluster // n_blobs)
    sizes[: n_cluster - sizes.sum()] += 1
    for s in sizes:
        c = np.array([rng.uniform(-1.8, 1.8), rng.uniform(ground_y - 2.0, ground_y - 0.3), rng.uniform(3.5, 7.0)])
        parts.append(c + rng.normal(0.0, 0.3, size=(s, 3)) * np.array([1.0, 1.5, 1.0]))
    kinds += ["cluster"] * n_cluster
    pts = np.vstack(parts)
    albedo = np.array([ALBEDO[kk] for kk in kinds])
    return pts, albedo


def generate_scene(seed: int, num_points: int = 300, grid: tuple[int, int] = (32, 32),
                   max_rotation_deg: float = 10.0, max_translation: float = 0.5,
                   min_visible: int = MIN_VISIBLE, scene_id: str | None = None) -> Scene:
    """Structured synthetic scene rendered from a random ground-truth pose.

    Points are laid out in the camera frame and mapped into the cloud frame
    with the inverse pose, so the pose maps cloud to camera as usual.  Cell
    intensity is the albedo of the nearest splatted point times a depth
    fall-off.
    """
    if num_points < min_visible:
        raise ValueError(f"num_points {num_points} < min_visible {min_visible}")
    w, h = grid
    k = default_intrinsics(w, h)
    for attempt in range(MAX_RETRIES):
        rng = np.random.default_rng([seed, attempt])
        pose = random_pose(rng.integers(2 ** 32), max_rotation_deg, max_translation)
        cam, albedo = _structure(rng, num_points)
        cloud = transform(inverse(pose), cam)
        intensity = albedo * np.minimum(1.0, 6.0 / np.maximum(cam[:, 2], 1e-6))
        vis = visible_mask(cloud, pose, k)
        if vis.sum() >= min_visible:
            grid_img = render(cloud, intensity, pose, k)
            return Scene(PointCloud(cloud), grid_img, k, pose, scene_id or f"scene_{seed:05d}")
    raise SceneGenerationError(f"seed {seed}: fewer than {min_visible} visible points after {MAX_RETRIES} tries")


# -- ablation -------------------------------------------------------------

_SETTING_RE = re.compile(r"^noise_([0-9.]+)_occlusion_(\d+)x(\d+)$")


@dataclass(frozen=True)
class AblationSetting:
    noise_sigma: float = 0.0
    occlusion_w: int = 0
    occlusion_h: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.occlusion_w < 0 or self.occlusion_h < 0:
            raise ValueError("ablation parameters must be non-negative")

    @property
    def name(self) -> str:
        return f"noise_{self.noise_sigma:g}_occlusion_{self.occlusion_w}x{self.occlusion_h}"

    @classmethod
    def parse(cls, text: str) -> "AblationSetting":
        m = _SETTING_RE.match(text.strip())
        if not m:
            raise ValueError(f"bad setting name {text!r}; expected noise_<s>_occlusion_<w>x<h>")
        return cls(float(m.group(1)), int(m.group(2)), int(m.group(3)))


def read_settings(path) -> list[AblationSetting]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(AblationSetting.parse(line))
    return out


def apply_ablation(scene: Scene, setting: AblationSetting, seed) -> Scene:
    """Gaussian noise on every point coordinate and one zeroed cell block.

    The block position is drawn uniformly from ``seed``; the pose is kept.
    """
    k = scene.intrinsics
    if setting.occlusion_w > k.width or setting.occlusion_h > k.height:
        raise ValueError(f"occlusion {setting.occlusion_w}x{setting.occlusion_h} larger than grid")
    if setting.noise_sigma == 0 and (setting.occlusion_w == 0 or setting.occlusion_h == 0):
        return scene
    rng = np.random.default_rng(seed)
    pts = scene.points
    if setting.noise_sigma > 0:
        pts = pts + rng.normal(0.0, setting.noise_sigma, size=pts.shape)
    grid = np.array(scene.grid)
    if setting.occlusion_w > 0 and setting.occlusion_h > 0:
        r0 = int(rng.integers(0, k.height - setting.occlusion_h + 1))
        c0 = int(rng.integers(0, k.width - setting.occlusion_w + 1))
        grid[r0:r0 + setting.occlusion_h, c0:c0 + setting.occlusion_w] = 0.0
    return replace(scene, cloud=PointCloud(pts), grid=grid)


# -- persistence ----------------------------------------------------------

def scene_to_text(scene: Scene) -> str:
    k = scene.intrinsics
    lines = [SCENE_HEADER, f"id {scene.id}",
             f"intrinsics {k.fx:.17g} {k.fy:.17g} {k.cx:.17g} {k.cy:.17g} {k.width} {k.height}",
             "pose " + " ".join(f"{v:.17g}" for v in scene.gt_pose.matrix().reshape(-1)),
             f"points {len(scene.points)}"]
    lines += [" ".join(f"{v:.17g}" for v in p) for p in scene.points]
    lines.append(f"grid {k.width} {k.height}")
    lines += [" ".join(f"{v:.17g}" for v in row) for row in scene.grid]
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> Scene:
    lines = text.splitlines()
    if not lines or lines[0] != SCENE_HEADER:
        raise ValueError("not a crossreg scene file")
    it = iter(lines[1:])

    def field(name):
        parts = next(it).split()
        if parts[0] != name:
            raise ValueError(f"expected '{name}', got '{parts[0]}'")
        return parts[1:]

    sid = " ".join(field("id"))
    fx, fy, cx, cy, w, h = field("intrinsics")
    k = CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
    m = np.array([float(v) for v in field("pose")]).reshape(3, 4)
    (n,) = field("points")
    pts = np.array([[float(v) for v in next(it).split()] for _ in range(int(n))]).reshape(-1, 3)
    gw, gh = (int(v) for v in field("grid"))
    grid = np.array([[float(v) for v in next(it).split()] for _ in range(gh)])
    if grid.shape != (gh, gw):
        raise ValueError("grid rows do not match the declared size")
    return Scene(PointCloud(pts), grid, k, Pose(m[:, :3], m[:, 3]), sid)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(scene_to_text(scene))


def load_scene(path) -> Scene:
    return scene_from_text(Path(path).read_text())


MANIFEST = "manifest.json"


def write_dataset(out_dir, scenes: Sequence[Scene], meta: dict | None = None) -> Path:
    """One text file per scene plus ``manifest.json`` listing them in order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for s in scenes:
        name = f"{s.id}.scene"
        save_scene(s, out / name)
        files.append({"id": s.id, "file": name, "points": len(s.points)})
    manifest = {"format": "crossreg-scene v1", "scenes": files, **(meta or {})}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / MANIFEST


def load_dataset(data_dir) -> list[Scene]:
    d = Path(data_dir)
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"{mpath}: manifest not found")
    manifest = json.loads(mpath.read_text())
    scenes = []
    for entry in manifest["scenes"]:
        p = d / entry["file"]
        if not p.is_file():
            raise FileNotFoundError(f"{p}: scene file not found")
        scenes.append(load_scene(p))
    return scenes


# -- benchmark ------------------------------------------------------------

@dataclass
class BenchmarkRow:
    setting: AblationSetting
    report: MetricsReport | None


def run_benchmark(evaluate: Callable[[Scene], SceneMetrics], scenes: Sequence[Scene],
                  settings: Sequence[AblationSetting], seed: int = 0, threads: int = 1) -> list[BenchmarkRow]:
    """Evaluate every scene under every setting.

    ``evaluate`` runs the full pipeline on one scene and returns its metrics;
    exceptions are recorded as failed scenes rather than aborting the run.
    """
    if not scenes:
        return []
    rows = []
    for si, setting in enumerate(settings):
        ablated = [apply_ablation(s, setting, [seed, si, j]) for j, s in enumerate(scenes)]

        def one(scene):
            try:
                return evaluate(scene)
            except Exception as exc:  # noqa: BLE001 - per-scene failures are data
                log.warning("scene %s failed: %s", scene.id, exc)
                return SceneMetrics(scene.id, np.inf, np.inf, None, None, False, 0, str(exc))

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(one, ablated))
        else:
            results = [one(s) for s in ablated]
        rows.append(BenchmarkRow(setting, MetricsReport.from_scenes(results)))
    return rows


def benchmark_csv(rows: Sequence[BenchmarkRow]) -> str:
    lines = ["setting,rre_mean,rre_std,rte_mean,rte_std,ir,rr"]
    for row in rows:
        r = row.report
        ir_s = "" if r.ir is None else f"{r.ir:.6g}"
        lines.append(f"{row.setting.name},{r.rre:.6g},{r.rre_std:.6g},{r.rte:.6g},{r.rte_std:.6g},{ir_s},{r.rr:.6g}")
    return "\n".join(lines) + "\n"
