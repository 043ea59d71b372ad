"""Synthetic 2D world: ray-cast scans, pose-embedding "image" features, trajectories.

The world is a rectangular floor plan with axis-aligned rectangular obstacles.
Some rectangles are marked as noise regions. Inside them the sensors read from
a jittered pose (``position_sigma``) and the image feature gets additive
Gaussian noise (``feature_sigma``). This gives the data a known aleatoric
structure.

Image feature construction, with ``u = (2x/W - 1, 2y/H - 1, cos θ, sin θ)``::

    feat = L @ u + 0.5 * sin(Ω @ u + β)

``L``, ``Ω`` and ``β`` are drawn once from ``feature_seed``. ``L`` has full
column rank, which keeps the map injective enough to regress pose from it.
Since ``u`` carries ``(cos θ, sin θ)``, headings 180° apart never alias.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Pose2D
from .errors import ConfigurationError, DomainError, GenerationError

GENERATOR_VERSION = "1"
PATTERNS = ("loop", "zigzag", "back_and_forth", "rotation")
SPLITS = ("train", "val", "test")
# sequence-count proportions of the largest real dataset (66 / 16 / 16)
DEFAULT_SPLIT_RATIO = (66, 16, 16)
DEFAULT_COUNTS = {"loop": 16, "zigzag": 16, "back_and_forth": 12, "rotation": 8}


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ConfigurationError(f"degenerate rectangle {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def segments(self):
        a, b, c, d = ((self.xmin, self.ymin), (self.xmax, self.ymin),
                      (self.xmax, self.ymax), (self.xmin, self.ymax))
        return [(a, b), (b, c), (c, d), (d, a)]


@dataclass(frozen=True)
class NoiseRegion:
    rect: Rect
    position_sigma: float = 0.0
    feature_sigma: float = 0.0


@dataclass(frozen=True)
class WorldSpec:
    width: float = 12.0
    height: float = 8.0
    obstacles: tuple[Rect, ...] = ()
    scan_rays: int = 64
    scan_max_range: float = 12.0
    noise_regions: tuple[NoiseRegion, ...] = ()
    image_dim: int = 16
    feature_seed: int = 0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ConfigurationError("world width and height must be positive")
        if self.scan_rays < 1:
            raise ConfigurationError("scan_rays must be positive")
        if not self.scan_max_range > 0:
            raise ConfigurationError("scan_max_range must be positive")
        if self.image_dim < 4:
            raise ConfigurationError("image_dim must be at least 4")
        for ob in self.obstacles:
            if ob.xmin < 0 or ob.ymin < 0 or ob.xmax > self.width or ob.ymax > self.height:
                raise ConfigurationError(f"obstacle {ob} lies outside the floor plan")
        for reg in self.noise_regions:
            if reg.position_sigma < 0 or reg.feature_sigma < 0:
                raise ConfigurationError("noise sigmas must be non-negative")

    def is_free(self, x: float, y: float) -> bool:
        if not (0.0 < x < self.width and 0.0 < y < self.height):
            return False
        return not any(ob.contains(x, y) for ob in self.obstacles)

    def noise_at(self, x: float, y: float) -> tuple[float, float]:
        """(position_sigma, feature_sigma) of the first region containing the point."""
        for reg in self.noise_regions:
            if reg.rect.contains(x, y):
                return reg.position_sigma, reg.feature_sigma
        return 0.0, 0.0

    def in_noise_region(self, x: float, y: float) -> bool:
        return any(reg.rect.contains(x, y) for reg in self.noise_regions)

    def segments(self) -> np.ndarray:
        segs = Rect(0.0, 0.0, self.width, self.height).segments()
        for ob in self.obstacles:
            segs += ob.segments()
        return np.array(segs, dtype=np.float64)  # (S, 2, 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        try:
            obstacles = tuple(Rect(**o) for o in d.pop("obstacles", ()))
            regions = tuple(
                NoiseRegion(Rect(**r["rect"]), float(r.get("position_sigma", 0.0)),
                            float(r.get("feature_sigma", 0.0)))
                for r in d.pop("noise_regions", ())
            )
            return cls(obstacles=obstacles, noise_regions=regions, **d)
        except (TypeError, KeyError) as exc:
            raise ConfigurationError(f"invalid world spec: {exc}") from exc


def default_world() -> WorldSpec:
    """12 m x 8 m room, one block, and a noisy strip along the east wall.

    The block is off-center so that no rotation of the room maps scans onto
    each other.
    """
    return WorldSpec(
        width=12.0,
        height=8.0,
        obstacles=(Rect(3.5, 4.2, 5.5, 6.0),),
        noise_regions=(NoiseRegion(Rect(8.5, 0.0, 12.0, 8.0), position_sigma=0.5, feature_sigma=0.5),),
    )


@dataclass
class SampleTuple:
    image_feat: np.ndarray
    scan: np.ndarray
    pose: Pose2D
    sequence_id: str
    index_in_sequence: int

    @property
    def sample_id(self) -> str:
        return f"{self.sequence_id}:{self.index_in_sequence:05d}"


def _check_pose(world: WorldSpec, pose: Pose2D):
    if not world.is_free(pose.x, pose.y):
        raise DomainError(f"pose ({pose.x:.6g}, {pose.y:.6g}) is not in free space")


def raycast_scan(world: WorldSpec, pose: Pose2D) -> np.ndarray:
    """Ranges along ``scan_rays`` equally spaced bearings, starting at the robot heading.

    Exact ray/segment intersection against walls and obstacle edges, clamped
    to ``scan_max_range``.
    """
    _check_pose(world, pose)
    n = world.scan_rays
    bearings = pose.theta + 2.0 * math.pi * np.arange(n) / n
    d = np.stack([np.cos(bearings), np.sin(bearings)], axis=1)  # (n, 2)
    segs = world.segments()
    a = segs[:, 0, :]
    e = segs[:, 1, :] - a  # (S, 2)
    w = a - np.array([pose.x, pose.y])  # (S, 2)
    # o + t d = a + u e  =>  t = (w x e) / (d x e),  u = (w x d) / (d x e)
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]  # (n, S)
    w_x_e = w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]  # (S,)
    w_x_d = w[None, :, 0] * d[:, None, 1] - w[None, :, 1] * d[:, None, 0]  # (n, S)
    # near-parallel pairs overflow or divide by zero; the hit mask discards them
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = w_x_e[None, :] / denom
        u = w_x_d / denom
    hit = (np.abs(denom) > 1e-15) & (t > 0.0) & (u >= -1e-12) & (u <= 1.0 + 1e-12)
    t = np.where(hit, t, np.inf)
    return np.minimum(t.min(axis=1), world.scan_max_range)


@lru_cache(maxsize=16)
def _feature_map(image_dim: int, feature_seed: int):
    rng = np.random.default_rng([feature_seed, 7])
    L = rng.standard_normal((image_dim, 4)) / 2.0
    omega = 1.5 * rng.standard_normal((image_dim, 4))
    beta = rng.uniform(0.0, 2.0 * math.pi, image_dim)
    for arr in (L, omega, beta):
        arr.setflags(write=False)
    return L, omega, beta


def clean_image_feature(world: WorldSpec, x: float, y: float, theta: float) -> np.ndarray:
    L, omega, beta = _feature_map(world.image_dim, world.feature_seed)
    u = np.array([2.0 * x / world.width - 1.0, 2.0 * y / world.height - 1.0,
                  math.cos(theta), math.sin(theta)])
    return L @ u + 0.5 * np.sin(omega @ u + beta)


def synth_image_feature(world: WorldSpec, pose: Pose2D, rng: np.random.Generator | None = None) -> np.ndarray:
    """Seeded smooth embedding of the pose plus region-dependent feature noise.

    Noise is drawn only when the pose lies in a region with positive
    ``feature_sigma``. In that case ``rng`` is required.
    """
    feat = clean_image_feature(world, pose.x, pose.y, pose.theta)
    _, sigma = world.noise_at(pose.x, pose.y)
    if sigma > 0.0:
        if rng is None:
            raise ConfigurationError("rng required for noisy region")
        feat = feat + sigma * rng.standard_normal(feat.shape)
    return feat


@dataclass(frozen=True)
class TrajectorySpec:
    """One sequence. ``waypoints`` is a closed polygon for loops, an open polyline otherwise.

    Rotation sequences use ``waypoints[0]`` as the fixed position.
    """

    sequence_id: str
    pattern: str
    waypoints: tuple[tuple[float, float], ...]
    step: float = 0.1
    angle_step: float = math.radians(10.0)
    start_heading: float = 0.0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigurationError(f"unknown trajectory pattern {self.pattern!r}")
        if not self.waypoints:
            raise ConfigurationError("trajectory needs at least one waypoint")
        if self.pattern != "rotation" and len(self.waypoints) < 2:
            raise ConfigurationError(f"{self.pattern} trajectory needs >= 2 waypoints")
        if self.step <= 0 or self.angle_step <= 0:
            raise ConfigurationError("step and angle_step must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["waypoints"] = [list(w) for w in self.waypoints]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySpec":
        try:
            d = dict(d)
            d["waypoints"] = tuple((float(x), float(y)) for x, y in d["waypoints"])
            return cls(**d)
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigurationError(f"invalid trajectory spec: {exc}") from exc


def loop(sequence_id: str, xmin: float, ymin: float, xmax: float, ymax: float, step: float = 0.1) -> TrajectorySpec:
    return TrajectorySpec(sequence_id, "loop",
                          ((xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)), step=step)


def zigzag(sequence_id: str, start, end, amplitude: float, legs: int, step: float = 0.1) -> TrajectorySpec:
    (x0, y0), (x1, y1) = start, end
    length = math.hypot(x1 - x0, y1 - y0)
    nx, ny = -(y1 - y0) / length, (x1 - x0) / length
    pts = [(x0, y0)]
    for k in range(1, legs):
        f = k / legs
        sign = 1.0 if k % 2 else -1.0
        pts.append((x0 + f * (x1 - x0) + sign * amplitude * nx, y0 + f * (y1 - y0) + sign * amplitude * ny))
    pts.append((x1, y1))
    return TrajectorySpec(sequence_id, "zigzag", tuple(pts), step=step)


def back_and_forth(sequence_id: str, a, b, repeats: int, step: float = 0.1) -> TrajectorySpec:
    pts = [tuple(a)]
    for _ in range(repeats):
        pts += [tuple(b), tuple(a)]
    return TrajectorySpec(sequence_id, "back_and_forth", tuple(pts), step=step)


def rotation(sequence_id: str, center, angle_step: float = math.radians(10.0),
             start_heading: float = 0.0) -> TrajectorySpec:
    return TrajectorySpec(sequence_id, "rotation", (tuple(center),), angle_step=angle_step,
                          start_heading=start_heading)


def trajectory_poses(spec: TrajectorySpec) -> list[Pose2D]:
    """Ground-truth poses at fixed arc-length (or angle) steps. Heading follows the path."""
    if spec.pattern == "rotation":
        cx, cy = spec.waypoints[0]
        n = int(round(2.0 * math.pi / spec.angle_step))
        return [Pose2D.from_angle(cx, cy, spec.start_heading + k * spec.angle_step) for k in range(n + 1)]

    pts = np.array(spec.waypoints, dtype=np.float64)
    closed = spec.pattern == "loop"
    if closed:
        pts = np.vstack([pts, pts[:1]])
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    keep = seg_len > 0
    pts0, seg, seg_len = pts[:-1][keep], seg[keep], seg_len[keep]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    n_steps = int(math.floor(total / spec.step + 1e-9))
    if closed and abs(n_steps * spec.step - total) < 1e-9:
        n_steps -= 1  # last sample would duplicate the start
    poses = []
    for k in range(n_steps + 1):
        s = k * spec.step
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        frac = (s - cum[i]) / seg_len[i]
        x, y = pts0[i] + frac * seg[i]
        theta = math.atan2(seg[i, 1], seg[i, 0])
        poses.append(Pose2D.from_angle(float(x), float(y), theta))
    return poses


def _substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _sensing_pose(world: WorldSpec, pose: Pose2D, rng: np.random.Generator) -> Pose2D:
    sigma, _ = world.noise_at(pose.x, pose.y)
    if sigma <= 0.0:
        return pose
    for _ in range(100):
        dx, dy = sigma * rng.standard_normal(2)
        if world.is_free(pose.x + dx, pose.y + dy):
            return Pose2D(pose.x + dx, pose.y + dy, pose.cos, pose.sin)
    return pose


def generate_sequence(world: WorldSpec, spec: TrajectorySpec, seed: int) -> list[SampleTuple]:
    poses = trajectory_poses(spec)
    for k, pose in enumerate(poses):
        if not world.is_free(pose.x, pose.y):
            raise GenerationError(
                f"sequence {spec.sequence_id}: pose {k} at ({pose.x:.3f}, {pose.y:.3f}, "
                f"{math.degrees(pose.theta):.1f} deg) is not in free space",
                pose=pose, sequence_id=spec.sequence_id,
            )
    rng = _substream(seed, spec.sequence_id)
    samples = []
    for k, pose in enumerate(poses):
        sensed = _sensing_pose(world, pose, rng)
        feat = clean_image_feature(world, sensed.x, sensed.y, sensed.theta)
        _, fsigma = world.noise_at(pose.x, pose.y)
        if fsigma > 0.0:
            feat = feat + fsigma * rng.standard_normal(feat.shape)
        samples.append(SampleTuple(feat, raycast_scan(world, sensed), pose, spec.sequence_id, k))
    return samples


def split_sequences(sequence_ids: Sequence[str], seed: int, ratio=DEFAULT_SPLIT_RATIO) -> dict[str, list[str]]:
    """Assign whole sequences to train/val/test. Every split gets at least one sequence when n >= 3."""
    ids = list(sequence_ids)
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate sequence ids")
    n = len(ids)
    order = [ids[i] for i in _substream(seed, "split").permutation(n)]
    total = float(sum(ratio))
    n_val = int(round(n * ratio[1] / total))
    n_test = int(round(n * ratio[2] / total))
    if n >= 3:
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = n - n_val - n_test
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


@dataclass
class Dataset:
    world: WorldSpec
    seed: int
    samples: list[SampleTuple]
    splits: dict[str, list[str]]
    trajectories: list[TrajectorySpec] = field(default_factory=list)

    def split(self, name: str) -> list[SampleTuple]:
        wanted = set(self.splits[name])
        return [s for s in self.samples if s.sequence_id in wanted]

    def header(self) -> dict:
        return {"record": "header", "generator_version": GENERATOR_VERSION, "seed": self.seed,
                "world": self.world.to_dict()}

    def manifest(self) -> dict:
        counts = {name: len(self.split(name)) for name in SPLITS}
        return {**self.header(), "record": "manifest", "splits": self.splits, "tuple_counts": counts,
                "total_tuples": len(self.samples)}


def generate_dataset(world: WorldSpec, trajectories: Sequence[TrajectorySpec], seed: int,
                     ratio=DEFAULT_SPLIT_RATIO) -> Dataset:
    samples: list[SampleTuple] = []
    for spec in trajectories:
        samples.extend(generate_sequence(world, spec, seed))
    splits = split_sequences([t.sequence_id for t in trajectories], seed, ratio)
    return Dataset(world, seed, samples, splits, list(trajectories))


def plan_trajectories(world: WorldSpec, seed: int, counts: dict[str, int] | None = None,
                      step: float = 0.3, max_tries: int = 200) -> list[TrajectorySpec]:
    """Random collision-free sequences of each pattern.

    Candidates that leave free space are redrawn. After ``max_tries`` misses
    for one sequence a GenerationError is raised.
    """
    counts = counts or DEFAULT_COUNTS
    rng = _substream(seed, "plan")
    W, H = world.width, world.height
    specs = []
    for pattern in PATTERNS:
        for i in range(counts.get(pattern, 0)):
            sid = f"{pattern}-{i:03d}"
            for _ in range(max_tries):
                if pattern == "loop":
                    inset = rng.uniform(0.6, 2.6)
                    cand = loop(sid, inset, inset * H / W + 0.3, W - inset, H - inset * H / W - 0.3, step)
                elif pattern == "zigzag":
                    band = rng.uniform(0.6, H - 0.6 - 1.6)
                    y0, y1 = band, band + 1.6
                    if rng.random() < 0.5:
                        start, end = (0.6, y0 + 0.8), (W - 0.6, y0 + 0.8)
                    else:
                        start, end = (W - 0.6, y0 + 0.8), (0.6, y0 + 0.8)
                    cand = zigzag(sid, start, end, 0.7, int(rng.integers(4, 9)), step)
                elif pattern == "back_and_forth":
                    a = (rng.uniform(0.5, W - 0.5), rng.uniform(0.5, H - 0.5))
                    ang = rng.uniform(0, 2 * math.pi)
                    length = rng.uniform(2.0, 5.0)
                    b = (a[0] + length * math.cos(ang), a[1] + length * math.sin(ang))
                    cand = back_and_forth(sid, a, b, int(rng.integers(2, 4)), step)
                else:
                    c = (rng.uniform(0.5, W - 0.5), rng.uniform(0.5, H - 0.5))
                    cand = rotation(sid, c, math.radians(5.0), rng.uniform(-math.pi, math.pi))
                if all(world.is_free(p.x, p.y) for p in trajectory_poses(cand)):
                    specs.append(cand)
                    break
            else:
                raise GenerationError(f"could not place a collision-free {pattern} sequence {sid}")
    return specs


def linear_pose_dataset(n: int, seed: int, image_dim: int = 16, scan_dim: int = 32,
                        scan_max_range: float = 12.0, sequence_length: int = 50,
                        map_seed: int = 0, prefix: str = "lin") -> list[SampleTuple]:
    """Noiseless toy set where x, y and θ are fixed linear functions of the features.

    The linear map depends only on ``map_seed``, so sets drawn with different
    ``seed`` values share it. Image features are U(-1, 1) and scan ranges are
    U(0.5, max_range). Positions have roughly unit standard deviation.
    """
    w = np.random.default_rng([map_seed, 13]).standard_normal((3, image_dim + scan_dim))
    rng = np.random.default_rng([seed, 11])
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    w *= math.sqrt(3.0)  # unit variance per output for U(-1, 1) inputs
    samples = []
    for i in range(n):
        img = rng.uniform(-1.0, 1.0, image_dim)
        scan = rng.uniform(0.5, scan_max_range, scan_dim)
        u = np.concatenate([img, 2.0 * scan / scan_max_range - 1.0])
        x, y, theta = w @ u
        seq, idx = divmod(i, sequence_length)
        samples.append(SampleTuple(img, scan, Pose2D.from_angle(x, y, theta), f"{prefix}-{seq:03d}", idx))
    return samples


def _sample_record(s: SampleTuple) -> dict:
    return {
        "record": "sample",
        "sample_id": s.sample_id,
        "sequence_id": s.sequence_id,
        "index_in_sequence": s.index_in_sequence,
        "pose": {"x": s.pose.x, "y": s.pose.y, "cos": s.pose.cos, "sin": s.pose.sin},
        "image_feat": s.image_feat.tolist(),
        "scan": s.scan.tolist(),
    }


def write_dataset(directory, dataset: Dataset) -> tuple[Path, Path]:
    """Write ``dataset.jsonl`` (header line, then one sample per line) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data_path = directory / "dataset.jsonl"
    header = dataset.header()
    header["trajectories"] = [t.to_dict() for t in dataset.trajectories]
    with open(data_path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in dataset.samples:
            fh.write(json.dumps(_sample_record(s), sort_keys=True) + "\n")
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(dataset.manifest(), indent=2, sort_keys=True) + "\n")
    return data_path, manifest_path


def read_dataset(path) -> Dataset:
    """Load a dataset directory (or its ``dataset.jsonl``) together with its manifest."""
    path = Path(path)
    data_path = path / "dataset.jsonl" if path.is_dir() else path
    manifest_path = data_path.parent / "manifest.json"
    if not data_path.exists():
        raise FileNotFoundError(f"dataset file {data_path} not found")
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest {manifest_path} not found")
    samples = []
    with open(data_path) as fh:
        header = json.loads(fh.readline())
        if header.get("record") != "header":
            raise ConfigurationError(f"{data_path}: first line is not a header record")
        for line in fh:
            r = json.loads(line)
            p = r["pose"]
            samples.append(SampleTuple(
                np.asarray(r["image_feat"], dtype=np.float64),
                np.asarray(r["scan"], dtype=np.float64),
                Pose2D(p["x"], p["y"], p["cos"], p["sin"]),
                r["sequence_id"],
                int(r["index_in_sequence"]),
            ))
    manifest = json.loads(manifest_path.read_text())
    world = WorldSpec.from_dict(header["world"])
    trajectories = [TrajectorySpec.from_dict(t) for t in header.get("trajectories", [])]
    return Dataset(world, int(header["seed"]), samples, manifest["splits"], trajectories)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
