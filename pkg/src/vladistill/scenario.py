"""Synthetic driving scenes: lanes, obstacles, kinematic ego rollouts, rasters.

Coordinates are metres. A scene lives in the ego-start frame (origin at the
first pose, x forward). Waypoints and ego states handed to models are in the
ego frame of the sample's own time step.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import RngStream

GENERATOR_VERSION = "scenes-1"

DT = 0.5
T = 6  # waypoints per trajectory, 0.5 s apart
T_MAX = 7.5  # seconds of ego track per scene
N_POSES = int(round(T_MAX / DT)) + 1
SAMPLES_PER_SCENE = int(round((T_MAX - T * DT) / DT)) + 1

WHEELBASE = 2.7
V_MIN, V_MAX = 4.0, 10.0
A_MAX = 1.5
STEER_MAX = 0.5
CURVATURE = {0: 0.0, 1: 0.02, 2: -0.02}
LANE_HALF_WIDTH = 3.0
LANE_LENGTH = 140.0
EGO_RADIUS = 1.0
MIN_CLEARANCE = 0.5

N_VIEWS = 3
GRID = 16
CELL = 2.0
VIEW_YAWS = (0.0, math.pi / 4, -math.pi / 4)  # front, front-left, front-right

N_BINS = 128
RANGE = 32.0
BIN_WIDTH = 2 * RANGE / N_BINS

HORIZON_STEPS = {"1s": 2, "2s": 4, "3s": 6}


@dataclass
class Scene:
    seed: int
    curvature: float
    length: float
    obstacles: np.ndarray  # (n, 3): x, y, radius
    ego_track: np.ndarray  # (N_POSES, 6): x, y, heading, v, a, steer
    instruction_id: int
    nudge: float = 0.0


@dataclass
class Observation:
    views: np.ndarray  # (3, 16, 16) float32 in [0, 1]
    ego_state: np.ndarray  # (5,): x, y, v, a, steer in the current ego frame
    instruction_id: int


@dataclass
class Sample:
    scene_seed: int
    t_index: int
    instruction_id: int
    ego_state: np.ndarray
    views: np.ndarray
    waypoints: np.ndarray  # (T, 2)
    future_ego: np.ndarray  # (T, 5)
    future_views: np.ndarray  # (T, 3, 16, 16)

    @property
    def sample_id(self) -> str:
        return f"{self.scene_seed}:{self.t_index}"


@dataclass
class Dataset:
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)
    seeds: dict[str, list[int]] = field(default_factory=dict)


# --------------------------------------------------------------------------
# lane geometry


def lane_point(kappa: float, s, d=0.0):
    """Position and heading of lane coordinate (s, d)."""
    s = np.asarray(s, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if abs(kappa) < 1e-12:
        return s + 0 * d, d + 0 * s, 0 * s
    th = kappa * s
    x = np.sin(th) / kappa - d * np.sin(th)
    y = (1 - np.cos(th)) / kappa + d * np.cos(th)
    return x, y, th


def lane_coords(kappa: float, x, y):
    """Inverse of ``lane_point``: (s, d) of scene points."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if abs(kappa) < 1e-12:
        return x, y
    sg = math.copysign(1.0, kappa)
    r = np.hypot(x, y - 1.0 / kappa)
    s = np.arctan2(sg * x, sg * (1.0 / kappa - y)) / kappa
    d = 1.0 / kappa - sg * r
    return s, d


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


# --------------------------------------------------------------------------
# kinematics


def kinematic_step(pose: np.ndarray, accel: float, steer: float, dt: float = DT) -> np.ndarray:
    """Constant-curvature, constant-acceleration arc over one step."""
    x, y, th, v = pose[:4]
    dist = v * dt + 0.5 * accel * dt * dt
    c = math.tan(steer) / WHEELBASE
    th2 = th + c * dist
    if abs(c) > 1e-12:
        x2 = x + (math.sin(th2) - math.sin(th)) / c
        y2 = y - (math.cos(th2) - math.cos(th)) / c
    else:
        x2 = x + dist * math.cos(th)
        y2 = y + dist * math.sin(th)
    return np.array([x2, y2, th2, v + accel * dt, accel, steer])


def _rollout(kappa, offset_fn, v0, accels):
    x0, y0, th0 = lane_point(kappa, 0.0, offset_fn(0.0))
    pose = np.array([float(x0), float(y0), float(th0), v0, 0.0, 0.0])
    track = []
    for k in range(N_POSES):
        v = pose[3]
        a = float(np.clip(accels[k], (V_MIN - v) / DT, (V_MAX - v) / DT))
        s_now, _ = lane_coords(kappa, pose[0], pose[1])
        look = max(6.0, 1.2 * v)
        tx, ty, _ = lane_point(kappa, float(s_now) + look, offset_fn(float(s_now) + look))
        dx, dy = float(tx) - pose[0], float(ty) - pose[1]
        lx = math.cos(pose[2]) * dx + math.sin(pose[2]) * dy
        ly = -math.sin(pose[2]) * dx + math.cos(pose[2]) * dy
        alpha = math.atan2(ly, lx)
        steer = math.atan(2 * WHEELBASE * math.sin(alpha) / math.hypot(lx, ly))
        steer = float(np.clip(steer, -STEER_MAX, STEER_MAX))
        pose = np.array([pose[0], pose[1], pose[2], v, a, steer])
        track.append(pose)
        pose = kinematic_step(pose, a, steer)
    return np.array(track)


def _clearance(track: np.ndarray, obs) -> float:
    ox, oy, r = obs
    return float(np.min(np.hypot(track[:, 0] - ox, track[:, 1] - oy)) - r - EGO_RADIUS)


def sample_scene(seed: int) -> Scene:
    """Deterministic scene for ``seed``; ego track clears every obstacle by >= 0.5 m."""
    rng = RngStream("scene", int(seed))
    instruction = rng.integers(0, 3)
    kappa = CURVATURE[instruction]
    v0 = V_MIN + (V_MAX - V_MIN) * float(rng.uniform((1,))[0])

    accels = np.zeros(N_POSES)
    k = 0
    while k < N_POSES:
        seg = rng.integers(2, 5)
        accels[k : k + seg] = A_MAX * (2 * float(rng.uniform((1,))[0]) - 1)
        k += seg

    obstacles = []
    nudge = 0.0
    offset = lambda s: 0.0 * s  # noqa: E731
    track = _rollout(kappa, offset, v0, accels)

    if rng.uniform((1,))[0] < 0.5:
        direction = {1: 1.0, 2: -1.0}.get(instruction, 1.0 if rng.uniform((1,))[0] < 0.5 else -1.0)
        for _ in range(100):
            s_o = 15.0 + 30.0 * float(rng.uniform((1,))[0])
            n = 0.35 + 0.35 * float(rng.uniform((1,))[0])
            r = 0.5 + 0.5 * float(rng.uniform((1,))[0])
            d_o = -direction * (r + EGO_RADIUS + MIN_CLEARANCE + 0.3 - n)

            def offset_fn(s, s_o=s_o, n=n):
                return direction * n * _smoothstep((np.asarray(s) - (s_o - 22.0)) / 18.0)

            cand = _rollout(kappa, offset_fn, v0, accels)
            ox, oy, _ = lane_point(kappa, s_o, d_o)
            obs = (float(ox), float(oy), r)
            if _clearance(cand, obs) >= MIN_CLEARANCE:
                track, nudge = cand, direction * n
                obstacles.append(obs)
                break

    n_extra = rng.integers(0, 4 - len(obstacles))
    for _ in range(n_extra):
        for _attempt in range(100):
            s_o = 10.0 + 80.0 * float(rng.uniform((1,))[0])
            side = 1.0 if rng.uniform((1,))[0] < 0.5 else -1.0
            d_o = side * (3.0 + 9.0 * float(rng.uniform((1,))[0]))
            r = 0.5 + 0.5 * float(rng.uniform((1,))[0])
            ox, oy, _ = lane_point(kappa, s_o, d_o)
            obs = (float(ox), float(oy), r)
            if _clearance(track, obs) >= MIN_CLEARANCE:
                obstacles.append(obs)
                break

    return Scene(
        seed=int(seed),
        curvature=kappa,
        length=LANE_LENGTH,
        obstacles=np.array(obstacles, dtype=np.float64).reshape(-1, 3),
        ego_track=track,
        instruction_id=instruction,
        nudge=nudge,
    )


def straight_scene(v: float = 5.0, curvature: float = 0.0, obstacles=(), seed: int = 0) -> Scene:
    """Constant-speed scene following the lane centre exactly (test fixture builder)."""
    steer = math.atan(curvature * WHEELBASE)
    pose = np.array([0.0, 0.0, 0.0, v, 0.0, steer])
    track = [pose]
    for _ in range(N_POSES - 1):
        pose = kinematic_step(pose, 0.0, steer)
        track.append(pose)
    inst = 0 if curvature == 0 else (1 if curvature > 0 else 2)
    return Scene(seed, curvature, LANE_LENGTH, np.array(obstacles, float).reshape(-1, 3), np.array(track), inst)


# --------------------------------------------------------------------------
# frames and observations


def to_ego_frame(pose: np.ndarray, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(pose[2]), math.sin(pose[2])
    d = np.asarray(pts, dtype=np.float64)[..., :2] - pose[:2]
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def to_scene_frame(pose: np.ndarray, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(pose[2]), math.sin(pose[2])
    p = np.asarray(pts, dtype=np.float64)
    return np.stack([pose[0] + c * p[..., 0] - s * p[..., 1], pose[1] + s * p[..., 0] + c * p[..., 1]], axis=-1)


def view_cell_centers(view: int) -> np.ndarray:
    """(16, 16, 2) cell centres of a view window in the ego frame.

    Row 0 is the far edge; column 0 is the leftmost (positive lateral) cell.
    """
    i = np.arange(GRID)[:, None]
    j = np.arange(GRID)[None, :]
    u = CELL * (GRID - i - 0.5) + 0 * j
    w = CELL * (GRID / 2 - j - 0.5) + 0 * i
    psi = VIEW_YAWS[view]
    ex = u * math.cos(psi) - w * math.sin(psi)
    ey = u * math.sin(psi) + w * math.cos(psi)
    return np.stack([ex, ey], axis=-1)


def _check_t(scene: Scene, t: int) -> None:
    if not 0 <= t < len(scene.ego_track):
        raise IndexError(f"time index {t} outside track of {len(scene.ego_track)} poses")


def render_views(scene: Scene, t: int) -> np.ndarray:
    """Three top-down rasters around the ego pose at index ``t``.

    Background 0, lane boundaries 0.5, obstacle disks 1.0.
    """
    _check_t(scene, t)
    pose = scene.ego_track[t]
    views = np.zeros((N_VIEWS, GRID, GRID), dtype=np.float32)
    for v in range(N_VIEWS):
        pts = to_scene_frame(pose, view_cell_centers(v))
        s, d = lane_coords(scene.curvature, pts[..., 0], pts[..., 1])
        on_lane = (s >= 0) & (s <= scene.length)
        boundary = on_lane & (np.abs(np.abs(d) - LANE_HALF_WIDTH) < CELL / 2)
        views[v][boundary] = 0.5
        for ox, oy, r in scene.obstacles:
            hit = np.hypot(pts[..., 0] - ox, pts[..., 1] - oy) <= r + CELL / 2
            views[v][hit] = 1.0
    return views


def ego_state(scene: Scene, t: int, frame_t: int | None = None) -> np.ndarray:
    """(x, y, v, a, steer) at ``t`` with position in the ego frame of ``frame_t``."""
    _check_t(scene, t)
    ref = scene.ego_track[t if frame_t is None else frame_t]
    pose = scene.ego_track[t]
    xy = to_ego_frame(ref, pose[None, :2])[0]
    return np.array([xy[0], xy[1], pose[3], pose[4], pose[5]], dtype=np.float32)


def observe(scene: Scene, t: int) -> Observation:
    return Observation(render_views(scene, t), ego_state(scene, t), scene.instruction_id)


def waypoints(scene: Scene, t: int) -> np.ndarray:
    """Ground-truth future positions t+1..t+T in the ego frame at t."""
    if t + T >= len(scene.ego_track):
        raise IndexError(f"need {T} future poses after index {t}")
    fut = scene.ego_track[t + 1 : t + T + 1, :2]
    return to_ego_frame(scene.ego_track[t], fut).astype(np.float32)


def make_sample(scene: Scene, t: int) -> Sample:
    return Sample(
        scene_seed=scene.seed,
        t_index=t,
        instruction_id=scene.instruction_id,
        ego_state=ego_state(scene, t),
        views=render_views(scene, t),
        waypoints=waypoints(scene, t),
        future_ego=np.stack([ego_state(scene, t + k, frame_t=t) for k in range(1, T + 1)]),
        future_views=np.stack([render_views(scene, t + k) for k in range(1, T + 1)]),
    )


# --------------------------------------------------------------------------
# tokenisation


def quantize(w: np.ndarray) -> tuple[np.ndarray, bool]:
    """Waypoints (T, 2) -> interleaved bin ids (2T,), plus an out-of-range flag.

    Coordinates are clamped to [-R, R]; each axis maps to 128 uniform bins.
    """
    w = np.asarray(w, dtype=np.float64)
    flagged = bool((np.abs(w) > RANGE).any())
    wc = np.clip(w, -RANGE, RANGE)
    bins = np.floor((wc + RANGE) / BIN_WIDTH).astype(np.int64)
    bins = np.clip(bins, 0, N_BINS - 1)
    return bins.reshape(-1), flagged


def dequantize(bins) -> np.ndarray:
    b = np.asarray(bins, dtype=np.int64).reshape(-1, 2)
    return (-RANGE + (b + 0.5) * BIN_WIDTH).astype(np.float32)


# --------------------------------------------------------------------------
# collisions


def collision_check(wps: np.ndarray, scene: Scene, t_index: int = 0, horizon_steps: int = T):
    """Per-step collision flags for ego-frame waypoints and the horizon rate.

    Step k collides iff the waypoint lies closer than obstacle radius plus
    the ego radius to any obstacle centre.
    """
    pts = to_scene_frame(scene.ego_track[t_index], np.asarray(wps, dtype=np.float64))
    hits = np.zeros(len(pts), dtype=bool)
    for ox, oy, r in scene.obstacles:
        hits |= np.hypot(pts[:, 0] - ox, pts[:, 1] - oy) < r + EGO_RADIUS
    h = min(horizon_steps, len(hits))
    return hits, float(hits[:h].mean()) if h else 0.0


# --------------------------------------------------------------------------
# datasets and shards


def scene_seeds(n_scenes: int, seed: int) -> list[int]:
    raw = RngStream("dataset", int(seed)).raw(n_scenes * 2)
    out: list[int] = []
    for v in raw:
        s = int(v >> np.uint64(33))
        if s not in out:
            out.append(s)
        if len(out) == n_scenes:
            break
    return out


def split_counts(n: int, ratio) -> tuple[int, int, int]:
    r = np.asarray(ratio, dtype=np.float64)
    r = r / r.sum()
    n_train = int(round(n * r[0]))
    n_val = int(round(n * r[1]))
    return n_train, n_val, n - n_train - n_val


def build_dataset(n_scenes: int, seed: int, split_ratio=(0.8, 0.1, 0.1), threads: int = 1) -> Dataset:
    if n_scenes < 10:
        raise ValueError("need at least 10 scenes")
    seeds = scene_seeds(n_scenes, seed)
    n_train, n_val, _ = split_counts(n_scenes, split_ratio)
    parts = {
        "train": seeds[:n_train],
        "val": seeds[n_train : n_train + n_val],
        "test": seeds[n_train + n_val :],
    }

    def scene_samples(s):
        sc = sample_scene(s)
        return [make_sample(sc, t) for t in range(SAMPLES_PER_SCENE)]

    from .parallel import ordered_map

    ds = Dataset(seeds=parts)
    for name, ss in parts.items():
        for chunk in ordered_map(scene_samples, ss, threads):
            getattr(ds, name).extend(chunk)
    return ds


def _fmt(a) -> list:
    return np.asarray(a, dtype=np.float32).astype(float).tolist()


def sample_record(s: Sample) -> dict:
    return {
        "scene_seed": s.scene_seed,
        "t_index": s.t_index,
        "instruction_id": s.instruction_id,
        "ego_state": _fmt(s.ego_state),
        "views": _fmt(s.views),
        "waypoints": _fmt(s.waypoints),
        "future_ego": _fmt(s.future_ego),
        "future_view_refs": [[s.scene_seed, s.t_index + k] for k in range(1, T + 1)],
    }


def record_sample(rec: dict, scenes: dict[int, Scene] | None = None) -> Sample:
    seed = int(rec["scene_seed"])
    if scenes is not None and seed in scenes:
        sc = scenes[seed]
    else:
        sc = sample_scene(seed)
        if scenes is not None:
            scenes[seed] = sc
    fv = np.stack([render_views(sc, int(t)) for _, t in rec["future_view_refs"]])
    return Sample(
        scene_seed=seed,
        t_index=int(rec["t_index"]),
        instruction_id=int(rec["instruction_id"]),
        ego_state=np.asarray(rec["ego_state"], np.float32),
        views=np.asarray(rec["views"], np.float32),
        waypoints=np.asarray(rec["waypoints"], np.float32),
        future_ego=np.asarray(rec["future_ego"], np.float32),
        future_views=fv.astype(np.float32),
    )


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_shards(ds: Dataset, out_dir, n_scenes: int, seed: int, split_ratio) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shards = []
    for split in ("train", "val", "test"):
        samples = getattr(ds, split)
        fname = f"{split}.jsonl"
        lines = [json.dumps(sample_record(s), separators=(",", ":")) for s in samples]
        _atomic_write(out / fname, "\n".join(lines) + ("\n" if lines else ""))
        shards.append({"file": fname, "split": split, "samples": len(samples), "scenes": len(ds.seeds[split])})
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "n_scenes": n_scenes,
        "seed": seed,
        "split_ratio": list(split_ratio),
        "shards": shards,
        "scene_seeds": ds.seeds,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "manifest.json"


def read_shard(path) -> list[Sample]:
    scenes: dict[int, Scene] = {}
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(record_sample(json.loads(line), scenes))
    return out


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("generator_version") != GENERATOR_VERSION:
        raise ValueError(f"shard generator version {manifest.get('generator_version')} != {GENERATOR_VERSION}")
    ds = Dataset(seeds={k: list(v) for k, v in manifest["scene_seeds"].items()})
    for sh in manifest["shards"]:
        setattr(ds, sh["split"], read_shard(d / sh["file"]))
    return ds
