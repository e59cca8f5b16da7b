"""Transition storage: offline datasets, the online ring buffer, sampling and persistence."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .envs import TabularPolicy, exact_policy_return, value_iteration
from .errors import ConfigurationError, EmptySourceError, FormatError, InvalidArgumentError

TIERS = ("expert", "medium", "random")
MEDIUM_EPSILON = 0.3
HEADER_TAG = "moorl-dataset"
HEADER_VERSION = "v1"


@dataclass(frozen=True)
class Transition:
    state: object
    action: object
    reward: float
    next_state: object
    done: bool
    t: int = 0  # time index within the episode


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.rewards)

    def transitions(self) -> list[Transition]:
        return [Transition(_item(self.states[i]), _item(self.actions[i]), float(self.rewards[i]),
                           _item(self.next_states[i]), bool(self.dones[i]), int(self.t[i]))
                for i in range(len(self))]


def _item(x):
    return x.item() if np.ndim(x) == 0 else np.array(x)


def _layout(discrete: bool, state_dim: int, action_dim: int):
    """Array shapes and dtypes for one transition of each kind."""
    if discrete:
        return (), np.int64, (), np.int64
    return (state_dim,), np.float64, (action_dim,), np.float64


class _Storage:
    """Column arrays shared by the ring buffer and the offline dataset."""

    def __init__(self, capacity: int, discrete: bool, state_dim: int, action_dim: int):
        s_shape, s_dtype, a_shape, a_dtype = _layout(discrete, state_dim, action_dim)
        self.discrete = discrete
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.states = np.zeros((capacity,) + s_shape, dtype=s_dtype)
        self.actions = np.zeros((capacity,) + a_shape, dtype=a_dtype)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity,) + s_shape, dtype=s_dtype)
        self.dones = np.zeros(capacity, dtype=bool)
        self.t = np.zeros(capacity, dtype=np.int64)

    def write(self, i: int, tr: Transition) -> None:
        if not np.isfinite(tr.reward):
            raise InvalidArgumentError("transition reward must be finite")
        self.states[i] = tr.state
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.next_states[i] = tr.next_state
        self.dones[i] = tr.done
        self.t[i] = tr.t

    def gather(self, idx) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx], self.t[idx])


class ReplayBuffer(_Storage):
    """Fixed-capacity ring buffer; the oldest entry is overwritten first."""

    def __init__(self, capacity: int, discrete: bool, state_dim: int = 1, action_dim: int = 1):
        if capacity < 1:
            raise InvalidArgumentError("capacity must be positive")
        super().__init__(capacity, discrete, state_dim, action_dim)
        self.capacity = capacity
        self.size = 0
        self.write_cursor = 0

    @classmethod
    def for_env(cls, env, capacity: int = 1_000_000) -> "ReplayBuffer":
        return cls(capacity, env.discrete, env.obs_dim, env.action_dim)

    def __len__(self):
        return self.size

    def push(self, tr: Transition) -> None:
        self.write(self.write_cursor, tr)
        self.write_cursor = (self.write_cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def all(self) -> Batch:
        if self.size < self.capacity:
            return self.gather(slice(0, self.size))
        order = np.r_[self.write_cursor:self.capacity, 0:self.write_cursor]
        return self.gather(order)


def buffer_push(buffer: ReplayBuffer, tr: Transition) -> None:
    buffer.push(tr)


class OfflineDataset(_Storage):
    """Immutable transition set with provenance metadata."""

    def __init__(self, transitions, metadata: dict, discrete: bool,
                 state_dim: int = 1, action_dim: int = 1):
        transitions = list(transitions)
        super().__init__(len(transitions), discrete, state_dim, action_dim)
        for i, tr in enumerate(transitions):
            self.write(i, tr)
        self.size = len(transitions)
        meta = dict(metadata)
        meta["size"] = self.size
        meta["reference_returns"] = dict(meta.get("reference_returns", {}))
        self.metadata = meta
        for arr in (self.states, self.actions, self.rewards, self.next_states, self.dones, self.t):
            arr.flags.writeable = False

    def __len__(self):
        return self.size

    @property
    def env_id(self) -> str:
        return self.metadata.get("env_id", "")

    @property
    def tier(self) -> str:
        return self.metadata.get("tier", "")

    def all(self) -> Batch:
        return self.gather(slice(0, self.size))

    def transitions(self) -> list[Transition]:
        return self.all().transitions()

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        a, b = self.all(), other.all()
        return (self.metadata == other.metadata and self.discrete == other.discrete
                and all(np.array_equal(x, y) for x, y in zip(a, b)))


def sample_batch(source, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform sampling with replacement."""
    if batch_size < 1:
        raise InvalidArgumentError("batch size must be >= 1")
    if len(source) == 0:
        raise EmptySourceError("cannot sample from an empty buffer")
    return source.gather(rng.integers(0, len(source), size=batch_size))


def concat_batches(a: Batch, b: Batch) -> Batch:
    return Batch(*(np.concatenate([x, y]) for x, y in zip(a, b)))


# ---------------------------------------------------------------- generation

def behavior_policy(env, tier: str, expert_policy=None):
    """Action function ``act(state, rng)`` for a dataset tier."""
    if tier not in TIERS:
        raise ConfigurationError(f"unknown tier {tier!r}; expected one of {TIERS}")
    if env.discrete:
        n_actions = env.n_actions

        def uniform(s, rng):
            return int(rng.integers(n_actions))
        if tier == "random":
            return uniform
        if expert_policy is None:
            _, _, greedy = value_iteration(env.mdp)
            expert_actions = np.argmax(greedy.probs, axis=1)
            expert_policy = lambda s, rng: int(expert_actions[s])
    else:
        def uniform(s, rng):
            return rng.uniform(-1.0, 1.0, size=env.action_dim)
        if tier == "random":
            return uniform
        if expert_policy is None:
            raise ConfigurationError(
                f"tier {tier!r} on a continuous environment needs a pre-trained policy")
    if tier == "expert":
        return expert_policy

    def medium(s, rng):
        if rng.random() < MEDIUM_EPSILON:
            return uniform(s, rng)
        return expert_policy(s, rng)
    return medium


def collect_episodes(env, act, n_transitions: int, rng: np.random.Generator):
    """Roll out ``act`` until ``n_transitions`` are gathered; returns transitions and episode returns."""
    out, returns = [], []
    while len(out) < n_transitions:
        s = env.reset(rng)
        total, disc = 0.0, 1.0
        for t in range(env.horizon):
            a = act(s, rng)
            s2, r, term = env.step(s, a, rng)
            out.append(Transition(s, a, r, s2, term, t))
            total += disc * r
            disc *= env.gamma
            s = s2
            if term or len(out) == n_transitions:
                break
        if term or t == env.horizon - 1:
            returns.append(total)
    return out, returns


def reference_returns(env, expert_policy=None, n_episodes: int = 100, seed: int = 0) -> dict:
    if env.discrete:
        return env.reference_returns()
    refs = env.reference_returns(n_episodes=n_episodes, seed=seed)
    if expert_policy is not None:
        from .envs import rollout_returns
        rng = np.random.default_rng(seed)
        refs["expert"] = float(np.mean(rollout_returns(env, expert_policy, n_episodes, rng)))
    return refs


def generate_offline_dataset(env, tier: str, n_transitions: int, rng: np.random.Generator,
                             expert_policy=None, seed: int | None = None) -> OfflineDataset:
    if n_transitions <= 0:
        raise InvalidArgumentError("n_transitions must be positive")
    act = behavior_policy(env, tier, expert_policy)
    transitions, _ = collect_episodes(env, act, n_transitions, rng)
    meta = {
        "env_id": env.name,
        "tier": tier,
        "behavior_policy_seed": -1 if seed is None else int(seed),
        "reference_returns": reference_returns(env, expert_policy),
    }
    return OfflineDataset(transitions, meta, env.discrete, env.obs_dim, env.action_dim)


# ---------------------------------------------------------------- persistence

def _fmt(x) -> str:
    return repr(float(x))


def save_dataset(ds: OfflineDataset, path) -> None:
    m = ds.metadata
    refs = m["reference_returns"]
    kind = "discrete" if ds.discrete else "continuous"
    header = (f"{HEADER_TAG} {HEADER_VERSION} env={m['env_id']} tier={m['tier']} n={ds.size} "
              f"seed={m['behavior_policy_seed']} ret_random={_fmt(refs['random'])} "
              f"ret_expert={_fmt(refs['expert'])} kind={kind} "
              f"state_dim={ds.state_dim} action_dim={ds.action_dim}")
    lines = [header]
    for i in range(ds.size):
        if ds.discrete:
            fields = [str(int(ds.states[i])), str(int(ds.actions[i])), _fmt(ds.rewards[i]),
                      str(int(ds.next_states[i]))]
        else:
            fields = ([_fmt(v) for v in ds.states[i]] + [_fmt(v) for v in ds.actions[i]]
                      + [_fmt(ds.rewards[i])] + [_fmt(v) for v in ds.next_states[i]])
        fields += [str(int(ds.dones[i])), str(int(ds.t[i]))]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line: str) -> dict:
    parts = line.split()
    if len(parts) < 2 or parts[0] != HEADER_TAG or parts[1] != HEADER_VERSION:
        raise FormatError(f"line 1: not a {HEADER_TAG} {HEADER_VERSION} header")
    fields = {}
    for tok in parts[2:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise FormatError(f"line 1: malformed header field {tok!r}")
        fields[key] = val
    required = ("env", "tier", "n", "seed", "ret_random", "ret_expert", "kind", "state_dim", "action_dim")
    missing = [k for k in required if k not in fields]
    if missing:
        raise FormatError(f"line 1: header missing fields {missing}")
    try:
        return {
            "env": fields["env"], "tier": fields["tier"], "n": int(fields["n"]),
            "seed": int(fields["seed"]), "ret_random": float(fields["ret_random"]),
            "ret_expert": float(fields["ret_expert"]), "discrete": fields["kind"] == "discrete",
            "state_dim": int(fields["state_dim"]), "action_dim": int(fields["action_dim"]),
        }
    except ValueError as exc:
        raise FormatError(f"line 1: bad header value ({exc})") from exc


def load_dataset(path) -> OfflineDataset:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError("line 1: empty dataset file")
    h = _parse_header(lines[0])
    records = lines[1:]
    if len(records) != h["n"]:
        raise FormatError(f"header declares n={h['n']} records but file has {len(records)} "
                          f"(record {min(len(records), h['n'])} missing or extra)")
    k, m = h["state_dim"], h["action_dim"]
    width = 6 if h["discrete"] else 2 * k + m + 3
    transitions = []
    for i, line in enumerate(records):
        parts = line.split()
        if len(parts) != width:
            raise FormatError(f"line {i + 2} (record {i}): expected {width} fields, got {len(parts)}")
        try:
            if h["discrete"]:
                tr = Transition(int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3]),
                                bool(int(parts[4])), int(parts[5]))
            else:
                vals = [float(p) for p in parts[:-2]]
                tr = Transition(np.array(vals[:k]), np.array(vals[k:k + m]), vals[k + m],
                                np.array(vals[k + m + 1:]), bool(int(parts[-2])), int(parts[-1]))
        except ValueError as exc:
            raise FormatError(f"line {i + 2} (record {i}): {exc}") from exc
        transitions.append(tr)
    meta = {"env_id": h["env"], "tier": h["tier"], "behavior_policy_seed": h["seed"],
            "reference_returns": {"random": h["ret_random"], "expert": h["ret_expert"]}}
    return OfflineDataset(transitions, meta, h["discrete"], k, m)
