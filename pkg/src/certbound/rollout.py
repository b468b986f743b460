"""Toy environments, scripted policies and return-labelled datasets.

ChainWorld
    Positions ``0..chain_length``; the agent starts at 0 and the goal is
    ``chain_length``. Each step the policy proposes a direction (+1 is right);
    with probability ``slip`` the executed move is reversed. Positions are
    clamped at 0. Entering the goal yields reward ``reward_max`` and ends the
    episode; every other step yields 0. Features: ``[position / chain_length]``.

LineWorld
    A 1-D point mass with state ``[position, velocity]`` started at rest at a
    position drawn uniformly from ``[start_low, start_high]``. The force
    ``u`` (bounded by ``force_bound``) updates the state by semi-implicit
    Euler with step ``dt``::

        v' = v + dt * u + noise_scale * sqrt(dt) * N(0, 1)
        x' = x + dt * v'

    and the step reward is ``reward_max * max(0, 1 - |x' - goal|)``. Episodes
    always last ``horizon`` steps. Features: ``[position, velocity]`` plus the
    elapsed-time fraction ``t / horizon`` when ``time_feature`` is set.

Policies are fixed controllers perturbed by additive Gaussian action noise
whose scale is set by the expertise tier. In ChainWorld the controller always
proposes +1 and the executed direction is the sign of ``1 + noise``; in
LineWorld it is the PD law ``u = clip(kp (goal - x) - kd v + noise)``.

Seeding: episode ``i`` of stream ``s`` for root seed ``r`` uses
``numpy.random.default_rng(SeedSequence([r, s, i]))``. Stream 0 is the
validation set and stream 1 the test set.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .fileio import atomic_write_text

__all__ = [
    "EnvSpec",
    "PolicySpec",
    "Trajectory",
    "LabeledDataset",
    "SplitPlan",
    "DatasetError",
    "DegenerateDataError",
    "TIER_NOISE",
    "VALID_STREAM",
    "TEST_STREAM",
    "run_episode",
    "discounted_returns",
    "first_visit_filter",
    "thin",
    "collect_dataset",
    "make_split_plan",
    "episode_seed",
    "save_dataset",
    "load_dataset",
]

TIER_NOISE = {"starter": 0.5, "intermediate": 0.2, "expert": 0.0}
ENV_KINDS = ("chain", "line")
VALID_STREAM = 0
TEST_STREAM = 1


class DatasetError(ValueError):
    """Malformed or unusable dataset."""


class DegenerateDataError(DatasetError):
    """Raised when a dataset cannot be normalized (all returns zero)."""


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "line"
    horizon: int = 100
    gamma: float = 0.99
    reward_max: float = 1.0
    # ChainWorld
    chain_length: int = 10
    slip: float = 0.1
    # LineWorld
    goal: float = 1.0
    force_bound: float = 1.0
    noise_scale: float = 0.1
    dt: float = 0.1
    start_low: float = -2.0
    start_high: float = 0.0
    time_feature: bool = True

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.reward_max < 0:
            raise ValueError("reward_max must be nonnegative")
        if self.chain_length < 1 or not (0.0 <= self.slip <= 1.0):
            raise ValueError("invalid ChainWorld parameters")
        if self.force_bound <= 0 or self.dt <= 0 or self.noise_scale < 0:
            raise ValueError("invalid LineWorld parameters")
        if self.start_low > self.start_high:
            raise ValueError("start_low must not exceed start_high")

    @property
    def feature_dim(self) -> int:
        if self.kind == "chain":
            return 1
        return 3 if self.time_feature else 2

    @property
    def return_bound(self) -> float:
        """Largest achievable discounted return, R (1 - gamma^H) / (1 - gamma)."""
        return self.reward_max * (1.0 - self.gamma**self.horizon) / (1.0 - self.gamma)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PolicySpec:
    tier: str = "expert"
    kp: float = 1.0
    kd: float = 2.5
    instance: int = 0

    def __post_init__(self):
        if self.tier not in TIER_NOISE:
            raise ValueError(f"unknown tier {self.tier!r}")

    @property
    def noise(self) -> float:
        return TIER_NOISE[self.tier]

    @classmethod
    def for_instance(cls, tier: str, instance: int) -> "PolicySpec":
        """Controller gains for policy instance ``instance``.

        Instance 0 is the nominal controller; other instances draw log-normal
        gain perturbations, standing in for independently trained policies.
        """
        if instance == 0:
            return cls(tier=tier, instance=0)
        rng = np.random.default_rng([9173, instance])
        kp, kd = np.exp(rng.normal(0.0, 0.5, size=2))
        return cls(tier=tier, kp=float(kp), kd=float(2.5 * kd), instance=instance)


@dataclass
class Trajectory:
    features: np.ndarray  # (n_steps, feature_dim), state before each action
    states: list  # hashable state ids for first-visit, None for continuous states
    actions: np.ndarray
    rewards: np.ndarray
    episode: int = 0
    seed: int = 0

    def __post_init__(self):
        n = len(self.rewards)
        if not (len(self.features) == len(self.states) == len(self.actions) == n):
            raise ValueError("trajectory field lengths differ")

    def __len__(self) -> int:
        return len(self.rewards)


def episode_seed(root_seed: int, stream: int, episode: int) -> int:
    return int(np.random.SeedSequence([root_seed, stream, episode]).generate_state(1, np.uint64)[0])


def _run_chain(env: EnvSpec, policy: PolicySpec, rng: np.random.Generator):
    pos = 0
    feats, states, actions, rewards = [], [], [], []
    for _ in range(env.horizon):
        feats.append([pos / env.chain_length])
        states.append(pos)
        proposal = 1.0 + policy.noise * rng.standard_normal() if policy.noise > 0 else 1.0
        direction = 1 if proposal >= 0 else -1
        if env.slip > 0 and rng.random() < env.slip:
            direction = -direction
        actions.append(direction)
        pos = min(max(pos + direction, 0), env.chain_length)
        done = pos == env.chain_length
        rewards.append(env.reward_max if done else 0.0)
        if done:
            break
    return feats, states, actions, rewards


def _run_line(env: EnvSpec, policy: PolicySpec, rng: np.random.Generator):
    x = rng.uniform(env.start_low, env.start_high) if env.start_high > env.start_low else env.start_low
    v = 0.0
    feats, actions, rewards = [], [], []
    sq_dt = math.sqrt(env.dt)
    for t in range(env.horizon):
        f = [x, v, t / env.horizon] if env.time_feature else [x, v]
        feats.append(f)
        u = policy.kp * (env.goal - x) - policy.kd * v
        if policy.noise > 0:
            u += policy.noise * rng.standard_normal()
        u = min(max(u, -env.force_bound), env.force_bound)
        actions.append(u)
        v = v + env.dt * u
        if env.noise_scale > 0:
            v += env.noise_scale * sq_dt * rng.standard_normal()
        x = x + env.dt * v
        rewards.append(env.reward_max * max(0.0, 1.0 - abs(x - env.goal)))
    return feats, [None] * len(rewards), actions, rewards


def run_episode(env: EnvSpec, policy: PolicySpec, seed: int, episode: int = 0) -> Trajectory:
    """Roll out the frozen policy for one episode (at most ``env.horizon`` steps)."""
    rng = np.random.default_rng(seed)
    runner = _run_chain if env.kind == "chain" else _run_line
    feats, states, actions, rewards = runner(env, policy, rng)
    return Trajectory(
        features=np.asarray(feats, dtype=np.float64).reshape(len(rewards), env.feature_dim),
        states=states,
        actions=np.asarray(actions, dtype=np.float64),
        rewards=np.asarray(rewards, dtype=np.float64),
        episode=episode,
        seed=seed,
    )


def discounted_returns(traj, gamma: float) -> list[float]:
    """G_t = r_t + gamma * G_{t+1}, with G = 0 past the last step.

    Accepts a :class:`Trajectory` or a plain sequence of rewards.
    """
    if not (0.0 <= gamma <= 1.0):
        raise ValueError("gamma must lie in [0, 1]")
    rewards = traj.rewards if isinstance(traj, Trajectory) else traj
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = float(rewards[t]) + gamma * acc
        out[t] = acc
    return out


def first_visit_filter(states: Sequence[Hashable | None], values: Sequence) -> list[int]:
    """Indices of the first occurrence of each state; ``None`` states are all distinct."""
    if len(states) != len(values):
        raise ValueError("states and values differ in length")
    seen = set()
    keep = []
    for i, s in enumerate(states):
        if s is None:
            keep.append(i)
        elif s not in seen:
            seen.add(s)
            keep.append(i)
    return keep


def thin(samples: Sequence, stride: int) -> list:
    """Keep the elements at positions 0, stride, 2*stride, ..."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(samples[::stride])


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, d)
    g_raw: np.ndarray  # (n,)
    g_norm: np.ndarray  # (n,)
    episode: np.ndarray  # (n,) episode id of each sample
    step: np.ndarray  # (n,) time step within the episode
    g_max: float
    gamma: float
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.g_raw)

    @property
    def n_episodes(self) -> int:
        return int(self.meta.get("n_episodes", len(np.unique(self.episode))))

    @property
    def episode_ids(self) -> np.ndarray:
        return np.unique(self.episode)

    def select(self, mask_or_idx) -> "LabeledDataset":
        idx = np.asarray(mask_or_idx)
        sub = LabeledDataset(
            self.features[idx], self.g_raw[idx], self.g_norm[idx], self.episode[idx], self.step[idx],
            self.g_max, self.gamma, dict(self.meta),
        )
        sub.meta["n_episodes"] = len(np.unique(sub.episode))
        return sub

    def first_episodes(self, k: int) -> "LabeledDataset":
        """Samples of the ``k`` lowest episode ids, renormalized by their own maximum return."""
        ids = self.episode_ids[:k]
        if len(ids) < k:
            raise ValueError(f"dataset has only {len(ids)} episodes, asked for {k}")
        sub = self.select(np.isin(self.episode, ids))
        return sub.renormalized(_dataset_g_max(sub.g_raw))

    def renormalized(self, g_max: float) -> "LabeledDataset":
        out = replace(self, g_norm=self.g_raw / g_max, g_max=float(g_max), meta=dict(self.meta))
        out.meta["g_max"] = float(g_max)
        return out


def _dataset_g_max(g_raw: np.ndarray) -> float:
    g_max = float(np.max(g_raw)) if len(g_raw) else 0.0
    if g_max <= 0.0:
        raise DegenerateDataError("all returns are zero; cannot normalize targets")
    return g_max


def collect_dataset(
    env: EnvSpec,
    policy: PolicySpec,
    n_episodes: int,
    stride: int,
    seed: int,
    stream: int = VALID_STREAM,
    g_max: float | None = None,
) -> LabeledDataset:
    """Roll out ``n_episodes`` and build (features, return) samples.

    Per episode: discounted returns, first-visit filter, then thinning. Targets
    are divided by ``g_max``, which defaults to the largest raw return in this
    dataset; pass the validation value when building a test set.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    feats, g, eps, steps = [], [], [], []
    for i in range(n_episodes):
        traj = run_episode(env, policy, episode_seed(seed, stream, i), episode=i)
        returns = discounted_returns(traj, env.gamma)
        keep = thin(first_visit_filter(traj.states, returns), stride)
        feats.append(traj.features[keep])
        g.extend(returns[k] for k in keep)
        eps.extend([i] * len(keep))
        steps.extend(keep)
    g_raw = np.asarray(g, dtype=np.float64)
    scale = _dataset_g_max(g_raw) if g_max is None else float(g_max)
    if scale <= 0:
        raise DegenerateDataError("g_max must be positive")
    meta = {
        "env": env.to_dict(),
        "tier": policy.tier,
        "gamma": env.gamma,
        "stride": stride,
        "seed": seed,
        "g_max": scale,
        "n_episodes": n_episodes,
    }
    return LabeledDataset(
        features=np.concatenate(feats, axis=0),
        g_raw=g_raw,
        g_norm=g_raw / scale,
        episode=np.asarray(eps, dtype=np.int64),
        step=np.asarray(steps, dtype=np.int64),
        g_max=scale,
        gamma=env.gamma,
        meta=meta,
    )


# dataset files: CSV "episode,step,f0..f{d-1},g_raw,g_norm" plus a JSON sidecar
# {env, tier, gamma, stride, seed, g_max, n_episodes} at <path>.json
_META_KEYS = ("env", "tier", "gamma", "stride", "seed", "g_max", "n_episodes")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_dataset(ds: LabeledDataset, path) -> None:
    path = Path(path)
    d = ds.features.shape[1]
    header = ["episode", "step", *[f"f{j}" for j in range(d)], "g_raw", "g_norm"]
    fmt = "{:.17g}".format
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for k in range(len(ds)):
        w.writerow([int(ds.episode[k]), int(ds.step[k]), *map(fmt, ds.features[k]), fmt(ds.g_raw[k]), fmt(ds.g_norm[k])])
    meta = {k: ds.meta.get(k) for k in _META_KEYS}
    meta["g_max"] = ds.g_max
    meta["gamma"] = ds.gamma
    atomic_write_text(path, buf.getvalue())
    atomic_write_text(_sidecar(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> LabeledDataset:
    """Read a dataset written by :func:`save_dataset`; raises :class:`DatasetError` on any defect."""
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError, csv.Error) as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    if not isinstance(meta, dict):
        raise DatasetError("dataset metadata must be a JSON object")
    missing = [k for k in _META_KEYS if k not in meta]
    if missing:
        raise DatasetError(f"dataset metadata lacks {missing}")
    if not rows:
        raise DatasetError("dataset file is empty")
    header, body = rows[0], rows[1:]
    if header[:2] != ["episode", "step"] or header[-2:] != ["g_raw", "g_norm"]:
        raise DatasetError(f"unexpected dataset header {header}")
    d = len(header) - 4
    if d < 1 or header[2:-2] != [f"f{j}" for j in range(d)]:
        raise DatasetError(f"unexpected feature columns {header[2:-2]}")
    if not body:
        raise DatasetError("dataset has no samples")
    if any(len(r) != len(header) for r in body):
        raise DatasetError("ragged dataset rows")
    try:
        arr = np.array([[float(x) for x in r] for r in body], dtype=np.float64)
        g_max, gamma = float(meta["g_max"]), float(meta["gamma"])
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"non-numeric dataset entry: {exc}") from exc
    g_raw, g_norm = arr[:, -2], arr[:, -1]
    if not np.all(np.isfinite(arr)) or np.any(g_raw < 0):
        raise DatasetError("dataset contains negative or non-finite values")
    if not (math.isfinite(g_max) and g_max > 0):
        raise DegenerateDataError("dataset g_max must be positive")
    return LabeledDataset(
        features=arr[:, 2:-2].copy(),
        g_raw=g_raw.copy(),
        g_norm=g_norm.copy(),
        episode=arr[:, 0].astype(np.int64),
        step=arr[:, 1].astype(np.int64),
        g_max=g_max,
        gamma=gamma,
        meta=meta,
    )


@dataclass(frozen=True)
class SplitPlan:
    """Ordered episode counts ``[c_1, ..., c_T]``; portion t holds the next c_t episodes."""

    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if not self.counts or any(c < 1 for c in self.counts):
            raise ValueError("every portion needs at least one episode")

    @property
    def depth(self) -> int:
        return len(self.counts)

    @property
    def n_episodes(self) -> int:
        return sum(self.counts)

    def portions(self, ds: LabeledDataset) -> list[np.ndarray]:
        """Sample indices of S_1..S_T, assigning episodes in increasing id order."""
        ids = ds.episode_ids
        if len(ids) != self.n_episodes:
            raise ValueError(f"plan covers {self.n_episodes} episodes, dataset has {len(ids)}")
        out, start = [], 0
        for c in self.counts:
            out.append(np.flatnonzero(np.isin(ds.episode, ids[start : start + c])))
            start += c
        return out

    def suffix_sizes(self, ds: LabeledDataset) -> list[int]:
        """N_t = |S_{>=t}| for t = 1..T."""
        sizes = [len(p) for p in self.portions(ds)]
        return [sum(sizes[t:]) for t in range(len(sizes))]


def make_split_plan(n_episodes: int, depth: int) -> SplitPlan:
    """Episode counts for a ``depth``-portion recursion over ``n_episodes``.

    Built from the last portion backwards: each portion takes half (rounded
    down) of the episodes not yet assigned, capped so that every earlier
    portion keeps at least one episode; the first two portions share the
    final remainder, the smaller one first. For 100 episodes this gives
    ``[3, 4, 6, 12, 25, 50]`` at depth 6 and ``[50, 50]`` at depth 2.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if n_episodes < depth:
        raise ValueError(f"cannot split {n_episodes} episodes into {depth} portions")
    if depth == 1:
        return SplitPlan((n_episodes,))
    counts = [0] * depth
    remaining = n_episodes
    for t in range(depth - 1, 1, -1):
        c = max(1, min(remaining // 2, remaining - t))
        counts[t] = c
        remaining -= c
    counts[0] = remaining // 2
    counts[1] = remaining - counts[0]
    return SplitPlan(tuple(counts))
