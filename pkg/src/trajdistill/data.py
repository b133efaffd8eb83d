"""Scenes, trajectory windows, synthetic generation, and file formats.

A Scene is a set of agent tracks sampled on a shared integer clock with a
fixed step `dt` in seconds; positions are meters. Windows cut from a scene
pair an observed history with a future-velocity target and carry the
anchor-step neighborhood. All window features are relative to the anchor
position, so models trained on them are translation invariant by
construction.

Velocities are finite differences in m/s: v_t = (p_t - p_{t-1}) / dt. The
first history step repeats the following step's velocity. Future positions
are recovered exactly by cumulative integration from the anchor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ContractViolation, DataError, ParseError
from .numerics import RandomSource

# ---------------------------------------------------------------------------
# core containers


@dataclass
class Track:
    start: int
    positions: np.ndarray  # (L, 2) float32, one row per consecutive clock step

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise DataError(f"track positions must be (L, 2), got {self.positions.shape}")

    @property
    def length(self) -> int:
        return self.positions.shape[0]

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class Scene:
    scene_id: str
    dt: float
    tracks: dict[str, Track] = field(default_factory=dict)

    def __post_init__(self):
        if self.dt <= 0:
            raise DataError(f"dt must be positive, got {self.dt}")

    def position_at(self, agent_id: str, t: int) -> np.ndarray | None:
        tr = self.tracks.get(agent_id)
        if tr is None or not (tr.start <= t < tr.end):
            return None
        return tr.positions[t - tr.start]


@dataclass
class TrajectoryWindow:
    scene_id: str
    agent_id: str
    t_index: int                  # anchor step on the scene clock
    dt: float
    ego_history: np.ndarray       # (T, 6): rel pos, velocity, speed, heading
    neighbors: np.ndarray         # (max_neighbors, 6) anchor-step relative states
    neighbor_mask: np.ndarray     # (max_neighbors,) 1.0 where a row is real
    future_velocities: np.ndarray  # (P, 2) m/s
    anchor_position: np.ndarray   # (2,) absolute meters

    def future_positions(self) -> np.ndarray:
        return integrate_velocity(self.anchor_position, self.future_velocities, self.dt)


@dataclass
class WindowBatch:
    ego: np.ndarray            # (B, T, 6)
    neighbors: np.ndarray      # (B, N, 6)
    neighbor_mask: np.ndarray  # (B, N)
    target_v: np.ndarray       # (B, P, 2)
    anchors: np.ndarray        # (B, 2)
    dt: float
    meta: list[tuple[str, str, int]]

    @property
    def size(self) -> int:
        return self.ego.shape[0]


def integrate_velocity(anchor: np.ndarray, velocities: np.ndarray, dt: float) -> np.ndarray:
    """Positions implied by velocities: p_i = anchor + dt * sum(v[:i+1])."""
    v = np.asarray(velocities, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    if v.shape[-1] != 2 or a.shape[-1] != 2:
        raise ContractViolation(f"expected trailing dim 2, got {v.shape} and {a.shape}")
    out = a[..., None, :] + dt * np.cumsum(v, axis=-2)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# window construction


def _states_from_positions(positions: np.ndarray, dt: float, anchor: np.ndarray) -> np.ndarray:
    """Per-step relative state rows (rel pos, velocity, speed, heading)."""
    pos = positions.astype(np.float64)
    vel = np.empty_like(pos)
    vel[1:] = (pos[1:] - pos[:-1]) / dt
    vel[0] = vel[1]
    speed = np.hypot(vel[:, 0], vel[:, 1])
    heading = np.arctan2(vel[:, 1], vel[:, 0])
    rel = pos - anchor.astype(np.float64)
    return np.concatenate(
        [rel, vel, speed[:, None], heading[:, None]], axis=1
    ).astype(np.float32)


def _neighbor_rows(
    scene: Scene,
    ego_id: str,
    t: int,
    anchor: np.ndarray,
    ego_velocity: np.ndarray,
    max_neighbors: int,
    radius: float,
) -> tuple[np.ndarray, np.ndarray]:
    rows = np.zeros((max_neighbors, 6), dtype=np.float32)
    mask = np.zeros(max_neighbors, dtype=np.float32)
    found: list[tuple[float, np.ndarray]] = []
    for aid, tr in scene.tracks.items():
        if aid == ego_id or not (tr.start <= t < tr.end):
            continue
        p = tr.positions[t - tr.start].astype(np.float64)
        dp = p - anchor.astype(np.float64)
        dist = float(np.hypot(dp[0], dp[1]))
        if dist > radius:
            continue
        if t - 1 >= tr.start:
            v = (p - tr.positions[t - 1 - tr.start].astype(np.float64)) / scene.dt
        else:
            v = np.zeros(2)
        dv = v - ego_velocity.astype(np.float64)
        row = np.array(
            [dp[0], dp[1], dv[0], dv[1], np.hypot(v[0], v[1]), np.arctan2(v[1], v[0])],
            dtype=np.float32,
        )
        found.append((dist, row))
    found.sort(key=lambda item: item[0])
    for i, (_, row) in enumerate(found[:max_neighbors]):
        rows[i] = row
        mask[i] = 1.0
    return rows, mask


def make_windows(
    scene: Scene,
    history_len: int,
    horizon: int,
    stride: int = 1,
    max_neighbors: int = 8,
    neighbor_radius: float = 5.0,
) -> list[TrajectoryWindow]:
    """Every ego window with `history_len` observed and `horizon` future steps."""
    if history_len < 2 or horizon < 1 or stride < 1:
        raise ContractViolation(
            f"need history_len >= 2, horizon >= 1, stride >= 1; "
            f"got {history_len}, {horizon}, {stride}"
        )
    windows: list[TrajectoryWindow] = []
    span = history_len + horizon
    for aid in sorted(scene.tracks):
        tr = scene.tracks[aid]
        for i in range(0, tr.length - span + 1, stride):
            hist = tr.positions[i : i + history_len]
            anchor = hist[-1]
            states = _states_from_positions(hist, scene.dt, anchor)
            fut = tr.positions[i + history_len - 1 : i + history_len + horizon].astype(np.float64)
            fut_v = ((fut[1:] - fut[:-1]) / scene.dt).astype(np.float32)
            t_anchor = tr.start + i + history_len - 1
            nbr, mask = _neighbor_rows(
                scene, aid, t_anchor, anchor, states[-1, 2:4], max_neighbors, neighbor_radius
            )
            windows.append(
                TrajectoryWindow(
                    scene_id=scene.scene_id,
                    agent_id=aid,
                    t_index=t_anchor,
                    dt=scene.dt,
                    ego_history=states,
                    neighbors=nbr,
                    neighbor_mask=mask,
                    future_velocities=fut_v,
                    anchor_position=anchor.copy(),
                )
            )
    return windows


def stack_windows(windows: list[TrajectoryWindow]) -> WindowBatch:
    if not windows:
        raise DataError("cannot stack an empty window list")
    dt = windows[0].dt
    shapes = {
        (w.ego_history.shape, w.neighbors.shape, w.future_velocities.shape) for w in windows
    }
    if len(shapes) != 1 or any(abs(w.dt - dt) > 1e-9 for w in windows):
        raise DataError("windows in a batch must share shapes and dt")
    return WindowBatch(
        ego=np.stack([w.ego_history for w in windows]),
        neighbors=np.stack([w.neighbors for w in windows]),
        neighbor_mask=np.stack([w.neighbor_mask for w in windows]),
        target_v=np.stack([w.future_velocities for w in windows]),
        anchors=np.stack([w.anchor_position for w in windows]),
        dt=dt,
        meta=[(w.scene_id, w.agent_id, w.t_index) for w in windows],
    )


# ---------------------------------------------------------------------------
# target standardization


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32).reshape(2)
        self.std = np.asarray(self.std, dtype=np.float32).reshape(2)
        if np.any(self.std <= 0):
            raise ContractViolation(f"standardizer std must be positive, got {self.std}")

    @staticmethod
    def fit(windows: list[TrajectoryWindow]) -> "Standardizer":
        if not windows:
            raise DataError("cannot fit a standardizer on zero windows")
        v = np.concatenate([w.future_velocities.reshape(-1, 2) for w in windows], axis=0)
        mean = v.mean(axis=0, dtype=np.float64)
        std = np.maximum(v.std(axis=0, dtype=np.float64), 1e-6)
        return Standardizer(mean.astype(np.float32), std.astype(np.float32))

    @staticmethod
    def identity() -> "Standardizer":
        return Standardizer(np.zeros(2, dtype=np.float32), np.ones(2, dtype=np.float32))

    def transform(self, v: np.ndarray) -> np.ndarray:
        return ((np.asarray(v) - self.mean) / self.std).astype(np.float32)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z) * self.std + self.mean).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic branching scenes


@dataclass(frozen=True)
class SyntheticSpec:
    n_scenes: int = 60
    agents_per_scene: int = 3
    steps_per_agent: int = 44
    dt: float = 0.4
    speed_low: float = 0.8
    speed_high: float = 1.4
    turn_angle_deg: float = 55.0
    turn_steps: int = 4
    branch_low_frac: float = 0.35
    branch_high_frac: float = 0.55
    noise_std: float = 0.01
    spawn_box: float = 8.0

    def __post_init__(self):
        if self.n_scenes < 1 or self.agents_per_scene < 1:
            raise ContractViolation("need at least one scene and one agent")
        if self.steps_per_agent < 4:
            raise ContractViolation(f"steps_per_agent must be >= 4, got {self.steps_per_agent}")
        if not (0 < self.speed_low <= self.speed_high):
            raise ContractViolation("speed range must satisfy 0 < low <= high")
        if not (0 < self.branch_low_frac <= self.branch_high_frac < 1):
            raise ContractViolation("branch fractions must satisfy 0 < low <= high < 1")
        if self.dt <= 0 or self.noise_std < 0 or self.turn_steps < 1:
            raise ContractViolation("dt must be positive, noise_std >= 0, turn_steps >= 1")


def synth_generate(spec: SyntheticSpec, seed: int) -> list[Scene]:
    """Branching random walks: straight travel, then one of three turn
    choices (left, straight, right) drawn uniformly at a per-agent branch
    step, then straight travel again. The three-way split makes the future
    genuinely multimodal from any anchor before the branch."""
    rng = RandomSource(seed).fork(0x73796E)
    lo = max(2, int(spec.branch_low_frac * spec.steps_per_agent))
    hi = max(lo + 1, int(spec.branch_high_frac * spec.steps_per_agent))
    turn_rad = math.radians(spec.turn_angle_deg)
    scenes: list[Scene] = []
    for s in range(spec.n_scenes):
        tracks: dict[str, Track] = {}
        for a in range(spec.agents_per_scene):
            r = rng.fork(s * 65536 + a)
            pos0 = r.uniform((2,), -spec.spawn_box, spec.spawn_box).astype(np.float64)
            heading = float(r.uniform((1,), 0.0, 2.0 * math.pi)[0])
            speed = float(r.uniform((1,), spec.speed_low, spec.speed_high)[0])
            branch = int(r.integers(lo, hi, (1,))[0])
            choice = int(r.integers(0, 3, (1,))[0]) - 1  # -1 left, 0 straight, +1 right
            noise = r.gaussian((spec.steps_per_agent - 1, 2), 0.0, spec.noise_std)
            pts = np.empty((spec.steps_per_agent, 2), dtype=np.float64)
            pts[0] = pos0
            theta = heading
            for t in range(1, spec.steps_per_agent):
                if choice != 0 and branch <= t < branch + spec.turn_steps:
                    theta += choice * turn_rad / spec.turn_steps
                step = spec.dt * speed * np.array([math.cos(theta), math.sin(theta)])
                pts[t] = pts[t - 1] + step + noise[t - 1]
            tracks[f"a{a}"] = Track(start=0, positions=pts.astype(np.float32))
        scenes.append(Scene(scene_id=f"synth{s:04d}", dt=spec.dt, tracks=tracks))
    return scenes


def dataset_manifest(scenes: list[Scene]) -> dict:
    n_points = sum(tr.length for sc in scenes for tr in sc.tracks.values())
    return {
        "scenes": len(scenes),
        "agents": sum(len(sc.tracks) for sc in scenes),
        "points": n_points,
        "dt": scenes[0].dt if scenes else None,
    }


# ---------------------------------------------------------------------------
# plain-text trajectory files (frame, agent, x, y per line)


def load_trajectory_file(
    path: str, dt: float = 0.4, scene_id: str | None = None, max_gap: int = 2
) -> Scene:
    """Read whitespace-separated rows of (frame, agent, x, y).

    Frames may be sparse on a regular stride; the stride is inferred as the
    gcd of observed frame gaps. Missing interior steps up to `max_gap` are
    filled by linear interpolation; longer gaps split the agent into
    separately suffixed tracks.
    """
    per_agent: dict[str, dict[int, np.ndarray]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(path, line_no, f"expected 4 columns, got {len(parts)}")
            try:
                frame_f, x, y = float(parts[0]), float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise ParseError(path, line_no, f"non-numeric field: {exc}") from None
            if not frame_f.is_integer():
                raise ParseError(path, line_no, f"frame must be integral, got {parts[0]}")
            frame = int(frame_f)
            try:
                aid = str(int(float(parts[1])))
            except ValueError:
                aid = parts[1]
            obs = per_agent.setdefault(aid, {})
            if frame in obs:
                raise DataError(
                    f"{path}: agent {aid} observed twice at frame {frame} (line {line_no})"
                )
            if not obs:
                order.append(aid)
            obs[frame] = np.array([x, y], dtype=np.float64)
    if not per_agent:
        raise DataError(f"{path}: no observations")

    diffs: list[int] = []
    for obs in per_agent.values():
        frames = sorted(obs)
        diffs.extend(b - a for a, b in zip(frames, frames[1:]))
    stride = int(np.gcd.reduce(diffs)) if diffs else 1
    base = min(min(obs) for obs in per_agent.values())

    tracks: dict[str, Track] = {}
    for aid in order:
        obs = per_agent[aid]
        steps = sorted((frame - base) // stride for frame in obs)
        pts = {(frame - base) // stride: p for frame, p in obs.items()}
        segments: list[tuple[int, list[np.ndarray]]] = []
        seg_start, seg = steps[0], [pts[steps[0]]]
        for prev, cur in zip(steps, steps[1:]):
            gap = cur - prev
            if gap - 1 <= max_gap:
                for j in range(1, gap):
                    w = j / gap
                    seg.append((1.0 - w) * pts[prev] + w * pts[cur])
                seg.append(pts[cur])
            else:
                segments.append((seg_start, seg))
                seg_start, seg = cur, [pts[cur]]
        segments.append((seg_start, seg))
        for n, (start, seg) in enumerate(segments):
            key = aid if len(segments) == 1 else f"{aid}#{n}"
            tracks[key] = Track(start=start, positions=np.stack(seg).astype(np.float32))
    sid = scene_id if scene_id is not None else path.rsplit("/", 1)[-1]
    return Scene(scene_id=sid, dt=dt, tracks=tracks)


def split_windows(
    windows: list[TrajectoryWindow], fractions: tuple[float, float, float], seed: int
) -> tuple[list[TrajectoryWindow], list[TrajectoryWindow], list[TrajectoryWindow]]:
    """Deterministic shuffled train/val/test split."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ContractViolation(f"fractions must be nonnegative and sum to 1, got {fractions}")
    idx = list(range(len(windows)))
    rng = RandomSource(seed).fork(0x73706C)
    for i in range(len(idx) - 1, 0, -1):  # Fisher-Yates with the counter-based source
        j = int(rng.integers(0, i + 1, (1,))[0])
        idx[i], idx[j] = idx[j], idx[i]
    n = len(windows)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    picked = [windows[i] for i in idx]
    return picked[:n_train], picked[n_train : n_train + n_val], picked[n_train + n_val :]


# ---------------------------------------------------------------------------
# CSV interchange


_CSV_HEADER = ["scene_id", "agent_id", "t_index", "x", "y"]


def _fmt(v: np.float32) -> str:
    return np.format_float_positional(v, unique=True, trim="0")


def save_interchange(path: str, scenes: list[Scene]) -> None:
    """Write scenes as CSV rows; float32 coordinates round-trip bitwise."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for sc in scenes:
            for aid in sorted(sc.tracks):
                tr = sc.tracks[aid]
                for i in range(tr.length):
                    writer.writerow(
                        [sc.scene_id, aid, tr.start + i, _fmt(tr.positions[i, 0]), _fmt(tr.positions[i, 1])]
                    )


def load_interchange(path: str, dt: float) -> list[Scene]:
    rows: dict[str, dict[str, list[tuple[int, np.float32, np.float32]]]] = {}
    scene_order: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _CSV_HEADER:
            raise ParseError(path, 1, f"expected header {_CSV_HEADER}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(path, line_no, f"expected 5 columns, got {len(row)}")
            sid, aid, t_s, x_s, y_s = row
            try:
                t, x, y = int(t_s), np.float32(x_s), np.float32(y_s)
            except ValueError as exc:
                raise ParseError(path, line_no, f"bad field: {exc}") from None
            if sid not in rows:
                rows[sid] = {}
                scene_order.append(sid)
            rows[sid].setdefault(aid, []).append((t, x, y))
    scenes: list[Scene] = []
    for sid in scene_order:
        tracks: dict[str, Track] = {}
        for aid, obs in rows[sid].items():
            obs.sort(key=lambda o: o[0])
            ts = [o[0] for o in obs]
            if len(set(ts)) != len(ts):
                raise DataError(f"{path}: duplicate t_index for agent {aid} in scene {sid}")
            if ts != list(range(ts[0], ts[0] + len(ts))):
                raise DataError(f"{path}: agent {aid} in scene {sid} has gaps in t_index")
            pts = np.array([[o[1], o[2]] for o in obs], dtype=np.float32)
            tracks[aid] = Track(start=ts[0], positions=pts)
        scenes.append(Scene(scene_id=sid, dt=dt, tracks=tracks))
    return scenes
