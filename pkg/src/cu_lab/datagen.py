"""Synthetic datasets: the multivariate-Laplace toy trajectories and small
multi-modal driving scenes.

Trajectory arrays follow the ``(2T, m)`` layout: row ``2t`` holds the x
coordinates of all ``m`` agents at timestamp ``t`` and row ``2t + 1`` the y
coordinates. Each row is therefore one ``m``-vector "slice" across agents.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import random_correlation

from . import stats
from .errors import ConfigError, DefinitenessError, ParseError, ValidationError
from .textio import encode_array, read_lines, write_lines

FORMAT_VERSION = 1

STRAIGHT, LEFT, RIGHT, STOP = range(4)
ARCHETYPES = ("straight", "left", "right", "stop")


@dataclass
class Instance:
    id: str
    past: np.ndarray
    future: np.ndarray
    gt_mean: np.ndarray | None = None
    gt_sigma: np.ndarray | None = None
    gt_lambda: float | None = None
    label: np.ndarray | None = None


@dataclass
class Dataset:
    """Column-oriented collection of instances sharing ``m``, ``T-``, ``T+``.

    ``labels`` optionally carries the per-agent behaviour archetype of scene
    data. Ground-truth arrays are either all present (synthetic toy data) or
    all absent.
    """

    m: int
    t_minus: int
    t_plus: int
    ids: list[str]
    past: np.ndarray
    future: np.ndarray
    gt_mean: np.ndarray | None = None
    gt_sigma: np.ndarray | None = None
    gt_lambda: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.ids)
        expect = {
            "past": (n, 2 * self.t_minus, self.m),
            "future": (n, 2 * self.t_plus, self.m),
            "gt_mean": (n, 2 * self.t_plus, self.m),
            "gt_sigma": (n, self.m, self.m),
            "gt_lambda": (n,),
            "labels": (n, self.m),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.int64 if name == "labels" else np.float64)
            if arr.shape != shape:
                raise ValidationError(f"{name}: shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        gt = [self.gt_mean is None, self.gt_sigma is None, self.gt_lambda is None]
        if len(set(gt)) != 1:
            raise ValidationError("ground-truth fields must be all present or all absent")

    @property
    def synthetic(self) -> bool:
        return self.gt_mean is not None

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Instance:
        pick = lambda a: None if a is None else a[i]
        lam = None if self.gt_lambda is None else float(self.gt_lambda[i])
        return Instance(self.ids[i], self.past[i], self.future[i], pick(self.gt_mean),
                        pick(self.gt_sigma), lam, pick(self.labels))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.m, self.t_minus, self.t_plus, [self.ids[i] for i in idx],
                       self.past[idx], self.future[idx], pick(self.gt_mean),
                       pick(self.gt_sigma), pick(self.gt_lambda), pick(self.labels))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.m, self.t_minus, self.t_plus, self.ids) != (other.m, other.t_minus, other.t_plus, other.ids):
            return False
        for name in ("past", "future", "gt_mean", "gt_sigma", "gt_lambda", "labels"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.m, self.t_minus, self.t_plus, self.ids)).encode())
        for name in ("past", "future", "gt_mean", "gt_sigma", "gt_lambda", "labels"):
            a = getattr(self, name)
            h.update(name.encode())
            if a is not None:
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# toy problem
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters of the quaternary-Laplace toy dataset.

    ``sigma_gt=None`` draws a random correlation matrix with eigenvalues in
    [0.3, 2] from ``seed``. ``phi_per`` chooses one exponential mixing draw
    per (timestamp, dim) slice or one per instance. ``agent_order="shuffled"``
    presents the agents of each instance in a random order, so the stored
    per-instance ``gt_sigma`` is the correspondingly permuted matrix.
    """

    m: int = 4
    timestamps: int = 50
    dims: int = 2
    sigma_gt: np.ndarray | None = None
    lambda_gt: float = 1.0
    counts: tuple[int, int, int] = (36000, 7000, 7000)
    seed: int = 0
    position_range: tuple[float, float] = (-10.0, 10.0)
    speed_range: tuple[float, float] = (0.1, 1.0)
    phi_per: str = "slice"
    agent_order: str = "fixed"

    def __post_init__(self):
        if self.dims != 2:
            raise ConfigError("only planar (dims=2) trajectories are supported")
        if self.m < 1 or self.timestamps < 1:
            raise ConfigError("m and timestamps must be positive")
        if len(self.counts) != 3 or min(self.counts) <= 0:
            raise ConfigError("counts must be three positive integers")
        if not self.lambda_gt > 0:
            raise ConfigError("lambda_gt must be positive")
        if self.phi_per not in ("slice", "instance"):
            raise ConfigError(f"phi_per must be 'slice' or 'instance', got {self.phi_per!r}")
        if self.agent_order not in ("fixed", "shuffled"):
            raise ConfigError(f"agent_order must be 'fixed' or 'shuffled', got {self.agent_order!r}")
        if self.sigma_gt is None:
            self.sigma_gt = random_correlation_matrix(self.m, stats.make_rng(self.seed))
        self.sigma_gt = np.asarray(self.sigma_gt, dtype=np.float64)
        if self.sigma_gt.shape != (self.m, self.m):
            raise ConfigError(f"sigma_gt must be {self.m}x{self.m}")
        stats.cholesky(self.sigma_gt)


def random_correlation_matrix(m: int, rng: np.random.Generator,
                              eig_range: tuple[float, float] = (0.3, 2.0)) -> np.ndarray:
    """Correlation matrix whose eigenvalues lie in ``eig_range``."""
    if m == 1:
        return np.ones((1, 1))
    lo, hi = eig_range
    budget = (m - lo * m) / (hi - lo)  # sum of the unit-interval weights
    while True:
        w = rng.dirichlet(np.ones(m)) * budget
        if np.all(w <= 1.0):
            break
    eigs = lo + (hi - lo) * w
    eigs *= m / eigs.sum()
    c = random_correlation.rvs(eigs, random_state=rng)
    c = 0.5 * (c + c.T)
    np.fill_diagonal(c, 1.0)
    return c


def straight_lines(rng: np.random.Generator, n: int, m: int, timestamps: int,
                   position_range, speed_range) -> np.ndarray:
    """Constant-velocity trajectories in the ``(n, 2T, m)`` layout."""
    p0 = rng.uniform(*position_range, size=(n, 2, m))
    speed = rng.uniform(*speed_range, size=(n, m))
    heading = rng.uniform(0.0, 2.0 * np.pi, size=(n, m))
    vel = np.stack([speed * np.cos(heading), speed * np.sin(heading)], axis=1)
    t = np.arange(timestamps, dtype=np.float64)
    traj = p0[:, None] + t[None, :, None, None] * vel[:, None]  # (n, T, 2, m)
    return traj.reshape(n, 2 * timestamps, m)


def laplace_noise(rng: np.random.Generator, n: int, slices: int, chol: np.ndarray,
                  lam: float, phi_per: str) -> np.ndarray:
    """``(n, slices, m)`` noise ``g * sqrt(Phi)`` with ``g ~ N(0, L L^T)``."""
    m = chol.shape[0]
    g = rng.standard_normal((n, slices, m)) @ chol.T
    shape = (n, slices) if phi_per == "slice" else (n, 1)
    phi = stats.exp_sample(lam, rng, int(np.prod(shape))).reshape(shape)
    return g * np.sqrt(phi)[..., None]


def gen_toy(spec: SyntheticSpec) -> dict[str, Dataset]:
    """Train/val/test partitions of toy instances.

    Every instance has one straight-line mean trajectory per agent and two
    independent Laplace-noised observations of it: ``past`` is the network
    input and ``future`` the regression target. Both span all timestamps.
    """
    rngs = stats.split_rng(spec.seed, 3)
    chol = stats.cholesky(spec.sigma_gt)
    t, m = spec.timestamps, spec.m
    out = {}
    for split, n, rng in zip(("train", "val", "test"), spec.counts, rngs):
        mean = straight_lines(rng, n, m, t, spec.position_range, spec.speed_range)
        sigma = np.broadcast_to(spec.sigma_gt, (n, m, m)).copy()
        past = mean + laplace_noise(rng, n, 2 * t, chol, spec.lambda_gt, spec.phi_per)
        future = mean + laplace_noise(rng, n, 2 * t, chol, spec.lambda_gt, spec.phi_per)
        if spec.agent_order == "shuffled":
            perms = np.argsort(rng.random((n, m)), axis=1)
            rows = np.arange(n)[:, None]
            mean = np.take_along_axis(mean, perms[:, None, :], axis=2)
            past = np.take_along_axis(past, perms[:, None, :], axis=2)
            future = np.take_along_axis(future, perms[:, None, :], axis=2)
            sigma = sigma[rows[:, :, None], perms[:, :, None], perms[:, None, :]]
        ids = [f"{split}-{i:06d}" for i in range(n)]
        out[split] = Dataset(m, t, t, ids, past, future, mean, sigma,
                             np.full(n, spec.lambda_gt))
    return out


# ---------------------------------------------------------------------------
# multi-modal scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    """Desk-scale multi-agent scenes with behaviour archetypes.

    Agent 0 leads: its archetype is drawn uniformly and its manoeuvre starts
    ``lead_steps`` steps before the end of the observed window, so it is
    partly visible in the past. Each follower copies the leader's archetype
    with probability ``coupling`` and otherwise draws its own. Followers
    start manoeuvring at the first future step.
    """

    m: int = 4
    archetypes: int = 3
    noise: float = 0.05
    t_minus: int = 10
    t_plus: int = 15
    counts: tuple[int, int, int] = (2000, 300, 300)
    seed: int = 0
    coupling: float = 0.8
    lead_steps: int = 3
    turn_rate: float = 0.12
    speed_range: tuple[float, float] = (0.5, 1.5)
    position_range: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        if not 2 <= self.archetypes <= len(ARCHETYPES):
            raise ConfigError(f"archetypes must be in [2, {len(ARCHETYPES)}], got {self.archetypes}")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("coupling must lie in [0, 1]")
        if self.m < 1 or self.t_minus < 1 or self.t_plus < 1:
            raise ConfigError("m, t_minus and t_plus must be positive")
        if not 0 <= self.lead_steps < self.t_minus:
            raise ConfigError("lead_steps must be in [0, t_minus)")
        if len(self.counts) != 3 or min(self.counts) <= 0:
            raise ConfigError("counts must be three positive integers")


def _roll_out(start, heading, speed, kinds, onset, steps, turn_rate):
    """Unicycle roll-out of ``steps`` positions after ``start``.

    ``onset`` is the (per-agent) step index at which the manoeuvre begins.
    Returns ``(n, steps, 2, m)``.
    """
    n, m = heading.shape
    pos = start.copy()
    head = heading.copy()
    out = np.empty((n, steps, 2, m))
    for s in range(steps):
        active = s >= onset
        yaw = np.where(active & (kinds == LEFT), turn_rate, 0.0) - np.where(active & (kinds == RIGHT), turn_rate, 0.0)
        head = head + yaw
        decay = np.where(active & (kinds == STOP), np.clip(1.0 - (s - onset + 1) / 6.0, 0.0, 1.0), 1.0)
        v = speed * decay
        pos = pos + np.stack([v * np.cos(head), v * np.sin(head)], axis=1)
        out[:, s] = pos
    return out


def gen_scenes(spec: SceneSpec) -> dict[str, Dataset]:
    rngs = stats.split_rng(spec.seed, 3)
    m, tm, tp = spec.m, spec.t_minus, spec.t_plus
    out = {}
    for split, n, rng in zip(("train", "val", "test"), spec.counts, rngs):
        leader = rng.integers(0, spec.archetypes, size=n)
        own = rng.integers(0, spec.archetypes, size=(n, m))
        copy = rng.random((n, m)) < spec.coupling
        kinds = np.where(copy, leader[:, None], own)
        kinds[:, 0] = leader
        start = rng.uniform(*spec.position_range, size=(n, 2, m))
        heading = rng.uniform(0.0, 2.0 * np.pi, size=(n, m))
        speed = rng.uniform(*spec.speed_range, size=(n, m))
        onset = np.full((n, m), tm)  # measured from the first generated step
        onset[:, 0] = tm - spec.lead_steps
        path = _roll_out(start, heading, speed, kinds, onset, tm + tp, spec.turn_rate)
        path = path + spec.noise * rng.standard_normal(path.shape)
        past = path[:, :tm].reshape(n, 2 * tm, m)
        future = path[:, tm:].reshape(n, 2 * tp, m)
        ids = [f"{split}-{i:06d}" for i in range(n)]
        out[split] = Dataset(m, tm, tp, ids, past, future, labels=kinds)
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save(dataset: Dataset, path) -> None:
    header = {
        "version": FORMAT_VERSION,
        "m": dataset.m,
        "t_minus": dataset.t_minus,
        "t_plus": dataset.t_plus,
        "count": len(dataset),
        "synthetic": dataset.synthetic,
        "labels": dataset.labels is not None,
    }

    def records():
        for i in range(len(dataset)):
            rec = {"id": dataset.ids[i], "past": encode_array(dataset.past[i]),
                   "future": encode_array(dataset.future[i])}
            if dataset.synthetic:
                rec["gt_mean"] = encode_array(dataset.gt_mean[i])
                rec["gt_sigma"] = encode_array(dataset.gt_sigma[i])
                rec["gt_lambda"] = float(dataset.gt_lambda[i])
            if dataset.labels is not None:
                rec["label"] = dataset.labels[i].tolist()
            yield rec

    write_lines(path, header, records())


def _field(rec: dict, name: str, size: int, where: str) -> np.ndarray:
    if name not in rec:
        raise ValidationError(f"{where}: missing field {name!r}")
    vals = rec[name]
    if not isinstance(vals, list) or len(vals) != size:
        got = len(vals) if isinstance(vals, list) else type(vals).__name__
        raise ValidationError(f"{where}: field {name!r} has {got} values, header declares {size}")
    arr = np.asarray(vals, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{where}: field {name!r} has non-finite values")
    return arr


def load(path) -> Dataset:
    header, records = read_lines(path)
    for key in ("version", "m", "t_minus", "t_plus", "count"):
        if key not in header:
            raise ParseError(f"{path}: line 1: header lacks {key!r}")
    if header["version"] != FORMAT_VERSION:
        raise ParseError(f"{path}: line 1: unsupported version {header['version']!r}")
    m, tm, tp, count = (int(header[k]) for k in ("m", "t_minus", "t_plus", "count"))
    synthetic = bool(header.get("synthetic", False))
    has_labels = bool(header.get("labels", False))
    ids, past, future, gmean, gsig, glam, labels = [], [], [], [], [], [], []
    for lineno, rec in records:
        where = f"{path}: line {lineno} (record {len(ids)})"
        if len(ids) == count:
            raise ValidationError(f"{where}: more records than the declared count {count}")
        if not isinstance(rec.get("id"), str):
            raise ValidationError(f"{where}: missing string field 'id'")
        ids.append(rec["id"])
        past.append(_field(rec, "past", 2 * tm * m, where).reshape(2 * tm, m))
        future.append(_field(rec, "future", 2 * tp * m, where).reshape(2 * tp, m))
        if synthetic:
            gmean.append(_field(rec, "gt_mean", 2 * tp * m, where).reshape(2 * tp, m))
            gsig.append(_field(rec, "gt_sigma", m * m, where).reshape(m, m))
            lam = rec.get("gt_lambda")
            if not isinstance(lam, (int, float)) or not lam > 0:
                raise ValidationError(f"{where}: gt_lambda must be a positive number")
            glam.append(float(lam))
        elif any(k in rec for k in ("gt_mean", "gt_sigma", "gt_lambda")):
            raise ValidationError(f"{where}: ground-truth fields in a non-synthetic file")
        if has_labels:
            lab = rec.get("label")
            if not isinstance(lab, list) or len(lab) != m:
                raise ValidationError(f"{where}: label must list {m} archetypes")
            labels.append(lab)
    if len(ids) != count:
        raise ParseError(f"{path}: file ends after {len(ids)} records, header declares {count}")
    shape_past, shape_future = (0, 2 * tm, m), (0, 2 * tp, m)
    stack = lambda xs, shape: np.stack(xs) if xs else np.zeros(shape)
    return Dataset(
        m, tm, tp, ids, stack(past, shape_past), stack(future, shape_future),
        stack(gmean, shape_future) if synthetic else None,
        stack(gsig, (0, m, m)) if synthetic else None,
        np.asarray(glam) if synthetic else None,
        np.asarray(labels, dtype=np.int64).reshape(-1, m) if has_labels else None,
    )


def save_splits(splits: dict[str, Dataset], directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, ds in splits.items():
        paths[name] = directory / f"{name}.jsonl"
        save(ds, paths[name])
    return paths


def load_splits(directory, names=("train", "val", "test")) -> dict[str, Dataset]:
    directory = Path(directory)
    return {name: load(directory / f"{name}.jsonl") for name in names}
