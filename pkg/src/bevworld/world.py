"""Synthetic driving world: a long road corridor with static obstacles and
constant-velocity agents, observed as ego-centric bird's-eye-view crops.

Labels are exact world state; observations are corrupted by a circular
occlusion shadow behind obstacles plus i.i.d. class-flip noise, so the
posterior/prior split has something to disagree about. Everything is driven
by named counter-based substreams, which makes episodes reproducible and
lets action replay regenerate the exact label sequence.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import RngState

CLASS_FREE, CLASS_STATIC, CLASS_DYNAMIC = 0, 1, 2

EPISODE_MAGIC = b"TWLD"
EPISODE_VERSION = 1

STEER_LIMIT = 1.0  # |lateral velocity| bound, cells/step


class EpisodeFormatError(Exception):
    pass


class BadMagicError(EpisodeFormatError):
    pass


class VersionMismatchError(EpisodeFormatError):
    pass


class TruncatedPayloadError(EpisodeFormatError):
    pass


class ChecksumError(EpisodeFormatError):
    pass


class PlacementError(RuntimeError):
    """Raised when agents/obstacles cannot be placed after bounded retries."""


@dataclass(frozen=True)
class WorldConfig:
    height: int = 32
    width: int = 32
    z_slabs: int = 4
    n_classes: int = 3
    n_agents: int = 4
    ego_speed_range: tuple = (0.5, 1.5)
    occlusion_radius: int = 6
    obs_noise: float = 0.02
    t_observe: int = 4
    t_future: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("grid must be at least 8x8")
        if self.t_observe < 1 or self.t_future < 0:
            raise ValueError("need t_observe >= 1 and t_future >= 0")
        if not 0.0 <= self.obs_noise < 0.5:
            raise ValueError("obs_noise must be in [0, 0.5)")
        if self.z_slabs < 1 or self.n_classes != 3:
            raise ValueError("z_slabs >= 1 and exactly 3 classes required")

    @property
    def steps(self) -> int:
        return self.t_observe + self.t_future

    def fingerprint(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Episode:
    """One simulated drive. Grids are (steps, Z, H, W) uint8 class indices;
    actions are (velocity, steering) float32 pairs; motion rows are
    (vx, vy, dt) float32."""

    obs: np.ndarray
    labels: np.ndarray
    actions: np.ndarray
    motion: np.ndarray
    t_observe: int
    t_future: int
    n_agents: int

    @property
    def steps(self) -> int:
        return self.labels.shape[0]

    @property
    def grid_shape(self) -> tuple:
        return self.labels.shape[1:]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.t_observe == other.t_observe
            and self.t_future == other.t_future
            and self.n_agents == other.n_agents
            and np.array_equal(self.obs, other.obs)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.motion, other.motion)
        )


def to_onehot(grid: np.ndarray, n_classes: int = 3) -> np.ndarray:
    """(Z,H,W) class indices -> (Z*C,H,W) one-hot float64."""
    z, h, w = grid.shape
    eye = np.eye(n_classes)
    return eye[grid.reshape(-1)].reshape(z, h, w, n_classes).transpose(0, 3, 1, 2).reshape(z * n_classes, h, w)


# ---------------------------------------------------------------------------
# world construction


@dataclass
class Agent:
    row: float
    col: float
    vx: float
    length: int = 2
    height: int = 2

    def cells(self) -> list[tuple[int, int]]:
        r, c = int(round(self.row)), int(round(self.col))
        return [(r, c + i) for i in range(self.length)]


@dataclass
class WorldState:
    cfg: WorldConfig
    static: np.ndarray  # (Z, Hw, Ww) uint8, free/static only
    agents: list
    road_top: int
    road_bottom: int  # exclusive

    def render(self) -> np.ndarray:
        grid = self.static.copy()
        z_cap = self.static.shape[0]
        for ag in self.agents:
            for r, c in ag.cells():
                if 0 <= r < grid.shape[1] and 0 <= c < grid.shape[2]:
                    grid[: min(ag.height, z_cap), r, c] = CLASS_DYNAMIC
        return grid


def _world_dims(cfg: WorldConfig) -> tuple:
    hw = cfg.height + 8
    ww = cfg.width + int(math.ceil(cfg.steps * cfg.ego_speed_range[1])) + 8
    return hw, ww


def build_static_world(cfg: WorldConfig, rng: RngState) -> WorldState:
    hw, ww = _world_dims(cfg)
    z = cfg.z_slabs
    static = np.zeros((z, hw, ww), dtype=np.uint8)

    road_half = max(3, cfg.height // 8)
    road_top = hw // 2 - road_half
    road_bottom = hw // 2 + road_half

    # off-road obstacles: small blocks with a height in [1, Z] slabs
    offroad_rows = [(1, road_top - 2), (road_bottom + 1, hw - 1)]
    area = sum(max(0, b - a) for a, b in offroad_rows) * ww
    n_obstacles = max(4, area // 28)
    occupied = np.zeros((hw, ww), dtype=bool)
    placed = 0
    for _ in range(int(n_obstacles * 30)):
        if placed >= n_obstacles:
            break
        band = offroad_rows[int(rng.integers(0, 2))]
        if band[1] <= band[0]:
            continue
        size = int(rng.integers(2, 4))
        r = int(rng.integers(band[0], max(band[0] + 1, band[1] - size)))
        c = int(rng.integers(1, ww - size - 1))
        if occupied[r - 1 : r + size + 1, c - 1 : c + size + 1].any():
            continue
        hgt = int(rng.integers(1, z + 1))
        static[:hgt, r : r + size, c : c + size] = CLASS_STATIC
        occupied[r : r + size, c : c + size] = True
        placed += 1

    return WorldState(cfg=cfg, static=static, agents=[], road_top=road_top, road_bottom=road_bottom)


def place_agents(world: WorldState, rng: RngState) -> None:
    cfg = world.cfg
    z = cfg.z_slabs
    taken: list = []
    for _ in range(cfg.n_agents):
        for attempt in range(200):
            row = int(rng.integers(world.road_top + 1, world.road_bottom - 1))
            col = float(rng.integers(2, world.static.shape[2] - 4))
            speed = 0.4 + 0.8 * float(rng.uniform())
            vx = speed if rng.uniform() < 0.5 else -speed
            cand = Agent(row=float(row), col=col, vx=vx, height=min(2, z))
            cells = set(cand.cells())
            if any(cells & set(a.cells()) for a in taken):
                continue
            taken.append(cand)
            break
        else:
            raise PlacementError(f"could not place {cfg.n_agents} agents on the road")
    world.agents = taken


def step_agents(world: WorldState, rng: RngState) -> None:
    """Constant velocity with bounded lateral jitter; bounce off static cells
    and world edges, hold position on agent-agent conflicts. The dynamic-cell
    count is invariant under all of these rules."""
    cfg = world.cfg
    ww = world.static.shape[2]
    new_states = []
    claimed: set = set()
    for ag in world.agents:
        drow = 0.0
        if rng.uniform() < 0.15:
            drow = float(rng.integers(0, 2)) * 2.0 - 1.0  # +/-1 lateral nudge
        row = min(max(ag.row + drow, world.road_top + 1.0), world.road_bottom - 2.0)
        col = ag.col + ag.vx
        vx = ag.vx
        cand = Agent(row=row, col=col, vx=vx, length=ag.length, height=ag.height)
        cells = cand.cells()
        off_edge = any(not (0 <= c < ww) for _, c in cells)
        hits_static = any(
            0 <= c < ww and world.static[0, r, c] == CLASS_STATIC for r, c in cells
        )
        if off_edge or hits_static:
            vx = -vx
            cand = Agent(row=ag.row, col=ag.col, vx=vx, length=ag.length, height=ag.height)
            cells = cand.cells()
        if any((r, c) in claimed for r, c in cells):
            cand = Agent(row=ag.row, col=ag.col, vx=vx, length=ag.length, height=ag.height)
            cells = cand.cells()
        claimed.update(cells)
        new_states.append(cand)
    world.agents = new_states


# ---------------------------------------------------------------------------
# ego and observation


@dataclass
class EgoState:
    row: float
    col: float
    phase: float
    lane_row: float


def init_ego(world: WorldState, rng: RngState) -> EgoState:
    cfg = world.cfg
    lane = (world.road_top + world.road_bottom) / 2.0
    phase = float(rng.uniform(0.0, 2.0 * math.pi))
    return EgoState(row=lane, col=float(cfg.width // 2 + 2), phase=phase, lane_row=lane)


def ego_policy(cfg: WorldConfig, ego: EgoState, t: int, rng: RngState) -> np.ndarray:
    lo, hi = cfg.ego_speed_range
    mid, amp = (lo + hi) / 2.0, (hi - lo) / 2.0
    velocity = mid + amp * math.sin(2.0 * math.pi * t / 5.0 + ego.phase)
    velocity = min(max(velocity, lo), hi)
    steering = 0.5 * (ego.lane_row - ego.row) + 0.2 * float(rng.uniform(-1.0, 1.0))
    steering = min(max(steering, -STEER_LIMIT), STEER_LIMIT)
    return np.array([velocity, steering], dtype=np.float32)


def apply_action(world: WorldState, ego: EgoState, action: np.ndarray) -> None:
    cfg = world.cfg
    hw, ww = world.static.shape[1:]
    # float32 action values drive the update so replay from file is exact
    ego.col = min(max(ego.col + float(action[0]), cfg.width // 2), ww - cfg.width // 2 - 1)
    ego.row = min(max(ego.row + float(action[1]), cfg.height // 2), hw - cfg.height // 2 - 1)


def crop_window(cfg: WorldConfig, ego: EgoState) -> tuple:
    r0 = int(round(ego.row)) - cfg.height // 2
    c0 = int(round(ego.col)) - cfg.width // 2
    return r0, c0


def render_crop(world: WorldState, ego: EgoState) -> np.ndarray:
    r0, c0 = crop_window(world.cfg, ego)
    return world.render()[:, r0 : r0 + world.cfg.height, c0 : c0 + world.cfg.width].copy()


def occlusion_mask(cfg: WorldConfig, label_crop: np.ndarray) -> np.ndarray:
    """Cells shadowed by a slab-0 static blocker on the ray from the ego
    (crop center), out to occlusion_radius cells behind the blocker."""
    h, w = label_crop.shape[1:]
    if cfg.occlusion_radius <= 0:
        return np.zeros((h, w), dtype=bool)
    blockers = label_crop[0] == CLASS_STATIC
    er, ec = h // 2, w // 2
    mask = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            dist = math.hypot(r - er, c - ec)
            if dist < 1.5:
                continue
            n_steps = int(dist * 2)
            for k in range(2, n_steps):
                fr = er + (r - er) * k / n_steps
                fc = ec + (c - ec) * k / n_steps
                br, bc = int(round(fr)), int(round(fc))
                if (br, bc) == (r, c):
                    break
                if blockers[br, bc]:
                    if dist - math.hypot(br - er, bc - ec) <= cfg.occlusion_radius:
                        mask[r, c] = True
                    break
    return mask


def corrupt_observation(cfg: WorldConfig, label_crop: np.ndarray, rng: RngState) -> np.ndarray:
    obs = label_crop.copy()
    occluded = occlusion_mask(cfg, label_crop)
    obs[:, occluded] = CLASS_FREE
    # class-flip noise; draw shapes are fixed so the stream stays aligned
    flips = rng.uniform(shape=obs.shape) < cfg.obs_noise
    offsets = rng.integers(1, cfg.n_classes, shape=obs.shape).astype(np.uint8)
    obs = np.where(flips, (obs + offsets) % cfg.n_classes, obs).astype(np.uint8)
    return obs


# ---------------------------------------------------------------------------
# episode generation


def simulate_episode(cfg: WorldConfig, seed: int, replay_actions: np.ndarray | None = None) -> Episode:
    """Roll one episode. With replay_actions given, the recorded actions are
    applied instead of the scripted policy; world streams are unaffected, so
    the label sequence reproduces exactly."""
    base = RngState(seed)
    layout_rng = base.spawn("layout")
    agent_rng = base.spawn("agents")
    ego_rng = base.spawn("ego")
    noise_rng = base.spawn("noise")

    world = build_static_world(cfg, layout_rng)
    place_agents(world, agent_rng)
    ego = init_ego(world, ego_rng)

    steps = cfg.steps
    labels = np.zeros((steps, cfg.z_slabs, cfg.height, cfg.width), dtype=np.uint8)
    obs = np.zeros_like(labels)
    actions = np.zeros((steps, 2), dtype=np.float32)
    motion = np.zeros((steps, 3), dtype=np.float32)

    for t in range(steps):
        crop = render_crop(world, ego)
        labels[t] = crop
        obs[t] = corrupt_observation(cfg, crop, noise_rng)
        if replay_actions is not None:
            a = np.asarray(replay_actions[t], dtype=np.float32)
        else:
            a = ego_policy(cfg, ego, t, ego_rng)
        actions[t] = a
        motion[t] = (a[0], a[1], 1.0)
        step_agents(world, agent_rng)
        apply_action(world, ego, a)

    return Episode(
        obs=obs,
        labels=labels,
        actions=actions,
        motion=motion,
        t_observe=cfg.t_observe,
        t_future=cfg.t_future,
        n_agents=cfg.n_agents,
    )


# ---------------------------------------------------------------------------
# episode files


def write_episode(ep: Episode, path) -> None:
    steps, z, h, w = ep.labels.shape
    header = EPISODE_MAGIC + struct.pack("<H", EPISODE_VERSION)
    header += struct.pack("<7I", h, w, z, 3, ep.t_observe, ep.t_future, ep.n_agents)
    payload = (
        np.ascontiguousarray(ep.labels, dtype=np.uint8).tobytes()
        + np.ascontiguousarray(ep.obs, dtype=np.uint8).tobytes()
        + np.ascontiguousarray(ep.actions, dtype="<f4").tobytes()
        + np.ascontiguousarray(ep.motion, dtype="<f4").tobytes()
    )
    crc = zlib.crc32(payload)
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))


def read_episode(path) -> Episode:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != EPISODE_MAGIC:
        raise BadMagicError(f"{path}: not an episode file")
    if len(raw) < 6:
        raise TruncatedPayloadError(f"{path}: header truncated")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != EPISODE_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {EPISODE_VERSION}")
    if len(raw) < 6 + 28:
        raise TruncatedPayloadError(f"{path}: header truncated")
    h, w, z, c, t_obs, t_fut, n_agents = struct.unpack("<7I", raw[6:34])
    steps = t_obs + t_fut
    grid_bytes = steps * z * h * w
    expected = grid_bytes * 2 + steps * 2 * 4 + steps * 3 * 4
    body = raw[34:]
    if len(body) != expected + 4:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(body) - 4} bytes, header implies {expected}"
        )
    payload, (crc,) = body[:expected], struct.unpack("<I", body[expected:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    off = 0
    labels = np.frombuffer(payload, dtype=np.uint8, count=grid_bytes, offset=off).reshape(steps, z, h, w)
    off += grid_bytes
    obs = np.frombuffer(payload, dtype=np.uint8, count=grid_bytes, offset=off).reshape(steps, z, h, w)
    off += grid_bytes
    actions = np.frombuffer(payload, dtype="<f4", count=steps * 2, offset=off).reshape(steps, 2)
    off += steps * 8
    motion = np.frombuffer(payload, dtype="<f4", count=steps * 3, offset=off).reshape(steps, 3)
    return Episode(
        obs=obs.copy(),
        labels=labels.copy(),
        actions=actions.copy(),
        motion=motion.copy(),
        t_observe=t_obs,
        t_future=t_fut,
        n_agents=n_agents,
    )


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Manifest:
    root: Path
    fingerprint: str
    entries: list = field(default_factory=list)  # (relpath, split, sha256)

    def paths(self, split: str | None = None) -> list:
        return [self.root / p for p, s, _ in self.entries if split is None or s == split]


def _split_for(index: int) -> str:
    return "val" if index % 4 == 3 else "train"


def make_dataset(cfg: WorldConfig, n_episodes: int, seed: int, out_dir) -> Path:
    """Write n episodes (seeds seed+i) plus a manifest; returns manifest path."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"fingerprint\t{cfg.fingerprint()}"]
    for i in range(n_episodes):
        ep = simulate_episode(cfg, seed + i)
        name = f"ep_{i:05d}.twld"
        write_episode(ep, out / name)
        sha = hashlib.sha256((out / name).read_bytes()).hexdigest()
        lines.append(f"{name}\t{_split_for(i)}\t{sha}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> Manifest:
    path = Path(path)
    lines = path.read_text().strip().split("\n")
    first = lines[0].split("\t")
    if first[0] != "fingerprint" or len(first) != 2:
        raise EpisodeFormatError(f"{path}: missing fingerprint line")
    entries = []
    for line in lines[1:]:
        rel, split, sha = line.split("\t")
        entries.append((rel, split, sha))
    return Manifest(root=path.parent, fingerprint=first[1], entries=entries)


def load_split(manifest: Manifest, split: str) -> list:
    return [read_episode(p) for p in manifest.paths(split)]
