"""
🧪 PickSight Synthetic Scenes
Analytic ray casting of spheres (fruits), capped cylinders (branches) and boxes (other
elements) into the frame layout the pipeline consumes. Ground truth is exact, which makes
these frames the oracle for every geometric test.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from app.errors import NoVisibilityError
from app.frame_ingest import (
    CameraFrame,
    CameraIntrinsics,
    SemanticClass,
    backproject_pixels,
    write_frame,
)
from app.pose_estimation import CAMERA_TO_WORK, WorkFrame, angles_about

logger = logging.getLogger(__name__)

GROUND_TRUTH_FILE = "ground_truth.json"

KIND_NONE, KIND_FRUIT, KIND_BRANCH, KIND_BOX = 0, 1, 2, 3
_MAX_DEPTH_UNITS = np.iinfo(np.uint16).max


def default_intrinsics(width: int = 640, height: int = 480, fx: float = 615.0) -> CameraIntrinsics:
    """Ideal pinhole with a RealSense-like field of view, principal point at the centre"""
    scale = width / 640.0
    return CameraIntrinsics(
        fx=fx * scale, fy=fx * scale,
        cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height, depth_scale=0.001,
    )


@dataclass
class FruitPrimitive:
    center: Tuple[float, float, float]
    radius: float
    instance_id: int


@dataclass
class BranchPrimitive:
    start: Tuple[float, float, float]
    end: Tuple[float, float, float]
    radius: float


@dataclass
class BoxPrimitive:
    lower: Tuple[float, float, float]
    upper: Tuple[float, float, float]


@dataclass
class SceneSpec:
    """Scene in the camera frame (metres)"""
    fruits: List[FruitPrimitive] = field(default_factory=list)
    branches: List[BranchPrimitive] = field(default_factory=list)
    boxes: List[BoxPrimitive] = field(default_factory=list)
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)
    depth_noise: float = 0.0
    work_rotation: List[List[float]] = field(default_factory=lambda: CAMERA_TO_WORK.tolist())

    def __post_init__(self):
        ids = [f.instance_id for f in self.fruits]
        if len(ids) != len(set(ids)):
            raise ValueError(f"fruit instance ids must be unique, got {ids}")
        if any(i <= 0 or i > _MAX_DEPTH_UNITS for i in ids):
            raise ValueError("fruit instance ids must lie in [1, 65535]")
        for prim in [*self.fruits, *self.branches]:
            if not prim.radius > 0:
                raise ValueError(f"primitive radius must be positive: {prim}")
        for box in self.boxes:
            if not all(lo < hi for lo, hi in zip(box.lower, box.upper)):
                raise ValueError(f"box lower corner must be below upper corner: {box}")
        if self.depth_noise < 0:
            raise ValueError("depth_noise must be >= 0")

    @property
    def work_frame(self) -> WorkFrame:
        return WorkFrame(np.asarray(self.work_rotation, dtype=np.float64))

    def fruit(self, instance_id: int) -> FruitPrimitive:
        for f in self.fruits:
            if f.instance_id == instance_id:
                return f
        raise KeyError(f"no fruit with instance id {instance_id}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'fruits': [{'center': list(map(float, f.center)), 'radius': f.radius, 'id': f.instance_id}
                       for f in self.fruits],
            'branches': [{'start': list(map(float, b.start)), 'end': list(map(float, b.end)),
                          'radius': b.radius} for b in self.branches],
            'boxes': [{'lower': list(map(float, b.lower)), 'upper': list(map(float, b.upper))}
                      for b in self.boxes],
            'intrinsics': self.intrinsics.to_dict(),
            'depth_noise': self.depth_noise,
            'work_rotation': [[float(v) for v in row] for row in self.work_rotation],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        intr = data.get('intrinsics')
        return cls(
            fruits=[FruitPrimitive(tuple(f['center']), float(f['radius']), int(f['id']))
                    for f in data.get('fruits', [])],
            branches=[BranchPrimitive(tuple(b['start']), tuple(b['end']), float(b['radius']))
                      for b in data.get('branches', [])],
            boxes=[BoxPrimitive(tuple(b['lower']), tuple(b['upper'])) for b in data.get('boxes', [])],
            intrinsics=CameraIntrinsics.from_dict(intr) if intr else default_intrinsics(),
            depth_noise=float(data.get('depth_noise', 0.0)),
            work_rotation=data.get('work_rotation', CAMERA_TO_WORK.tolist()),
        )

    @classmethod
    def from_file(cls, path) -> "SceneSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {})

    def to_file(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")
        return path


@dataclass
class RenderedScene:
    """Exact (pre-quantization) render: depth in metres, 0 where no primitive is hit"""
    depth_m: np.ndarray
    kind: np.ndarray
    instance: np.ndarray


# --- ray casting ---
# camera at origin; ray directions have unit depth component, so the ray parameter t
# equals the hit depth
def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    u, v = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                       np.arange(intr.height, dtype=np.float64))
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def intersect_sphere(rays: np.ndarray, center, radius: float) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64)
    a = np.einsum('...i,...i->...', rays, rays)
    b = -2.0 * rays @ c
    cc = float(c @ c - radius * radius)
    disc = b * b - 4.0 * a * cc
    t = np.full(rays.shape[:-1], np.inf)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    near = (-b - sq) / (2.0 * a)
    far = (-b + sq) / (2.0 * a)
    t_hit = np.where(near > 0, near, far)
    ok = hit & (t_hit > 0)
    t[ok] = t_hit[ok]
    return t


def intersect_cylinder(rays: np.ndarray, start, end, radius: float) -> np.ndarray:
    """Finite cylinder with flat caps"""
    p0 = np.asarray(start, dtype=np.float64)
    p1 = np.asarray(end, dtype=np.float64)
    axis = p1 - p0
    length = float(np.linalg.norm(axis))
    a_hat = axis / length
    w = -p0
    d_par = rays @ a_hat
    d_perp = rays - d_par[..., None] * a_hat
    w_perp = w - (w @ a_hat) * a_hat
    A = np.einsum('...i,...i->...', d_perp, d_perp)
    B = 2.0 * (d_perp @ w_perp)
    C = float(w_perp @ w_perp - radius * radius)
    disc = B * B - 4.0 * A * C
    t = np.full(rays.shape[:-1], np.inf)

    with np.errstate(divide='ignore', invalid='ignore'):
        sq = np.sqrt(np.where(disc >= 0, disc, 0.0))
        for sign in (-1.0, 1.0):
            ts = (-B + sign * sq) / (2.0 * A)
            s = (w @ a_hat) + ts * d_par
            ok = (disc >= 0) & (A > 0) & (ts > 0) & (s >= 0) & (s <= length)
            t = np.where(ok & (ts < t), ts, t)
        for cap in (p0, p1):
            tc = (cap @ a_hat) / d_par
            q = tc[..., None] * rays - cap
            ok = np.isfinite(tc) & (tc > 0) & (np.einsum('...i,...i->...', q, q) <= radius * radius)
            t = np.where(ok & (tc < t), tc, t)
    return t


def intersect_box(rays: np.ndarray, lower, upper) -> np.ndarray:
    """Axis-aligned box, slab method"""
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    t_enter = np.full(rays.shape[:-1], -np.inf)
    t_exit = np.full(rays.shape[:-1], np.inf)
    for axis in range(3):
        d = rays[..., axis]
        parallel = d == 0
        with np.errstate(divide='ignore', invalid='ignore'):
            t1 = lo[axis] / d
            t2 = hi[axis] / d
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        # a ray parallel to the slab is either always or never inside it
        inside_slab = lo[axis] <= 0 <= hi[axis]
        near = np.where(parallel, -np.inf if inside_slab else np.inf, near)
        far = np.where(parallel, np.inf if inside_slab else -np.inf, far)
        t_enter = np.maximum(t_enter, near)
        t_exit = np.minimum(t_exit, far)
    t = np.full(rays.shape[:-1], np.inf)
    ok = (t_exit >= t_enter) & (t_enter > 0)
    t[ok] = t_enter[ok]
    return t


def render_depth(spec: SceneSpec) -> RenderedScene:
    """Nearest analytic hit per pixel, before noise and quantization"""
    intr = spec.intrinsics
    rays = pixel_rays(intr)
    shape = (intr.height, intr.width)
    best = np.full(shape, np.inf)
    kind = np.zeros(shape, dtype=np.int8)
    instance = np.zeros(shape, dtype=np.int32)

    def merge(t: np.ndarray, k: int, iid: int = 0):
        closer = t < best
        best[closer] = t[closer]
        kind[closer] = k
        instance[closer] = iid

    for f in spec.fruits:
        merge(intersect_sphere(rays, f.center, f.radius), KIND_FRUIT, f.instance_id)
    for b in spec.branches:
        merge(intersect_cylinder(rays, b.start, b.end, b.radius), KIND_BRANCH)
    for b in spec.boxes:
        merge(intersect_box(rays, b.lower, b.upper), KIND_BOX)

    depth = np.where(np.isfinite(best), best, 0.0)
    return RenderedScene(depth, kind, instance)


def depth_noise_field(shape: Tuple[int, int], sigma: float, seed: int) -> np.ndarray:
    """Per-pixel Gaussian noise from a counter-based (Philox) stream in raster order"""
    if sigma <= 0:
        return np.zeros(shape)
    rng = np.random.Generator(np.random.Philox(key=seed))
    return rng.normal(0.0, sigma, size=shape)


def render_camera_frame(spec: SceneSpec, seed: int = 0,
                        frame_id: str = "synthetic") -> Tuple[CameraFrame, RenderedScene]:
    """In-memory frame (quantized depth + masks) together with the exact render"""
    intr = spec.intrinsics
    scene = render_depth(spec)
    hit = scene.kind != KIND_NONE
    z = scene.depth_m + depth_noise_field(scene.depth_m.shape, spec.depth_noise, seed)
    units = np.rint(np.clip(z, 0.0, None) / intr.depth_scale)
    depth = np.where(hit, np.clip(units, 0, _MAX_DEPTH_UNITS), 0).astype(np.uint16)

    fruit_mask = np.where(scene.kind == KIND_FRUIT, scene.instance, 0).astype(np.uint16)
    semantic = np.zeros(depth.shape, dtype=np.uint8)
    semantic[scene.kind == KIND_BRANCH] = SemanticClass.BRANCH_TRUNK
    semantic[scene.kind == KIND_BOX] = SemanticClass.OTHER_ELEMENT
    return CameraFrame(depth, fruit_mask, semantic, intr, frame_id), scene


def analytic_visible_angles(spec: SceneSpec, fruit_id: int,
                            scene: Optional[RenderedScene] = None) -> Tuple[float, float]:
    """Mean work-frame (theta, phi) of the fruit's unoccluded surface about its true centre"""
    scene = scene or render_depth(spec)
    fruit = spec.fruit(fruit_id)
    vs, us = np.nonzero((scene.kind == KIND_FRUIT) & (scene.instance == fruit_id))
    if vs.size == 0:
        raise NoVisibilityError(f"fruit {fruit_id} is fully occluded")
    exact = replace(spec.intrinsics, depth_scale=1.0)
    pts = backproject_pixels(us, vs, scene.depth_m[vs, us], exact)
    frame = spec.work_frame
    theta, phi = angles_about(frame.to_work(pts), frame.to_work(np.asarray(fruit.center)))
    return float(theta.mean()), float(phi.mean())


def ground_truth(spec: SceneSpec, scene: Optional[RenderedScene] = None) -> Dict[str, Any]:
    scene = scene or render_depth(spec)
    doc = spec.to_dict()
    frame = spec.work_frame
    for entry, fruit in zip(doc['fruits'], spec.fruits):
        entry['center_work'] = [float(v) for v in frame.to_work(np.asarray(fruit.center))]
        entry['visible_pixels'] = int(((scene.kind == KIND_FRUIT) & (scene.instance == fruit.instance_id)).sum())
        try:
            theta, phi = analytic_visible_angles(spec, fruit.instance_id, scene)
            entry['visible_angles_rad'] = [theta, phi]
        except NoVisibilityError:
            entry['visible_angles_rad'] = None
    return doc


def render_frame(spec: SceneSpec, out_dir, seed: int = 0) -> Path:
    """Write depth.png, fruit_mask.png, semantic_mask.png, intrinsics.json and ground_truth.json"""
    out = Path(out_dir)
    frame, scene = render_camera_frame(spec, seed, frame_id=out.name)
    write_frame(frame, out)
    (out / GROUND_TRUTH_FILE).write_text(json.dumps(ground_truth(spec, scene), indent=2), encoding="utf-8")
    logger.debug("rendered %s: %d fruits, %d hit pixels", out, len(spec.fruits), int((scene.kind > 0).sum()))
    return out


# --- scene builders ---
def place_fruit(distance: float, theta: float, phi: float,
                work_frame: Optional[WorkFrame] = None) -> np.ndarray:
    """Camera-frame centre of a fruit at ``distance`` whose camera-facing side points
    along work-frame azimuth ``theta`` and elevation ``phi``"""
    frame = work_frame or WorkFrame()
    toward_camera = np.array([math.cos(theta) * math.cos(phi),
                              math.sin(theta) * math.cos(phi),
                              math.sin(phi)])
    center_work = -distance * toward_camera
    return frame.rotation.T @ center_work


def random_scene(seed: int, n_fruits: int = 3, n_branches: int = 1,
                 intrinsics: Optional[CameraIntrinsics] = None,
                 depth_range: Tuple[float, float] = (0.35, 0.7),
                 radius_range: Tuple[float, float] = (0.035, 0.045),
                 depth_noise: float = 0.002) -> SceneSpec:
    """Non-overlapping apples spread over the field of view, plus horizontal branches"""
    rng = np.random.default_rng(seed)
    intr = intrinsics or default_intrinsics()
    fruits: List[FruitPrimitive] = []
    attempts = 0
    while len(fruits) < n_fruits and attempts < 200 * max(n_fruits, 1):
        attempts += 1
        z = rng.uniform(*depth_range)
        r = rng.uniform(*radius_range)
        u = rng.uniform(0.15, 0.85) * intr.width
        v = rng.uniform(0.15, 0.85) * intr.height
        c = np.array([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z])
        if all(np.linalg.norm(c - np.asarray(f.center)) > r + f.radius + 0.01 for f in fruits):
            fruits.append(FruitPrimitive(tuple(float(x) for x in c), float(r), len(fruits) + 1))
    branches = []
    for _ in range(n_branches):
        z = rng.uniform(depth_range[0], depth_range[1] + 0.1)
        y = rng.uniform(-0.15, 0.15) * z
        branches.append(BranchPrimitive((-0.6 * z, y, z), (0.6 * z, y + rng.uniform(-0.05, 0.05), z),
                                        float(rng.uniform(0.010, 0.020))))
    return SceneSpec(fruits=fruits, branches=branches, intrinsics=intr, depth_noise=depth_noise)
