"""MOORL training: buffer selection, K-step inner adaptation, Reptile meta-updates.

Also hosts the two SAC baselines (online-only and 50/50 mixed batches), policy
evaluation, the inner-step ablation and checkpoint persistence.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import OfflineDataset, ReplayBuffer, Transition, concat_batches, sample_batch
from .errors import (ConfigurationError, DegenerateReferenceError, EmptySourceError,
                     FormatError, InvalidArgumentError)
from .nn import AdamState
from .sac import (AgentParams, AgentSpec, Optimizers, SacConfig, actor_sample, apply_step,
                  critic_loss_and_grad, init_agent, mean_q, sac_update, soft_update)

log = logging.getLogger(__name__)

OFFLINE, ONLINE = "offline", "online"

# stream ids for the per-component random generators
_STREAM_INIT, _STREAM_ENV, _STREAM_SELECT, _STREAM_UPDATE, _STREAM_EVAL, _STREAM_DATA = range(6)


def component_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key...) via SeedSequence spawn keys."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def dataset_rng(seed: int) -> np.random.Generator:
    """Generator used for offline-dataset collection under a run seed."""
    return component_rng(seed, _STREAM_DATA)


def eval_rng(seed: int, t: int) -> np.random.Generator:
    """Evaluation stream at step t; shared by all trainers so scores use common random numbers."""
    return component_rng(seed, _STREAM_EVAL, t)


@dataclass
class MoorlConfig:
    total_steps: int = 20000
    inner_steps: int = 4
    inner_lr: float = 3e-4
    meta_lr: float = 1e-3
    offline_prob: float = 0.5
    batch_size: int = 256
    sac: SacConfig = field(default_factory=SacConfig)
    warmup_steps: int = 1000
    eval_every: int = 500
    eval_episodes: int = 10
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256)
    env_steps_per_epoch: int = 1
    buffer_capacity: int = 1_000_000

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.inner_steps < 1:
            raise InvalidArgumentError("inner_steps (K) must be >= 1")
        if self.total_steps < 1:
            raise InvalidArgumentError("total_steps (N) must be >= 1")
        if not 0.0 <= self.offline_prob <= 1.0:
            raise InvalidArgumentError("offline_prob must lie in [0, 1]")
        if self.batch_size < 1 or self.eval_every < 1 or self.eval_episodes < 1:
            raise InvalidArgumentError("batch_size, eval_every and eval_episodes must be positive")
        if self.env_steps_per_epoch < 1:
            raise InvalidArgumentError("env_steps_per_epoch must be >= 1")


@dataclass
class MetricRecord:
    t: int
    eval_return: float
    normalized_score: float
    mean_q: float
    alpha: float
    buffer_online_size: int
    chosen_buffer: str


METRIC_COLUMNS = tuple(f.name for f in fields(MetricRecord))


@dataclass
class TrainResult:
    params: AgentParams
    log: list[MetricRecord]
    spec: AgentSpec
    optimizers: dict
    steps: int

    @property
    def final_score(self) -> float:
        return self.log[-1].normalized_score


# ---------------------------------------------------------------- building blocks

def select_buffer(rng: np.random.Generator, p_offline: float) -> str:
    if not 0.0 <= p_offline <= 1.0:
        raise InvalidArgumentError("p_offline must lie in [0, 1]")
    return OFFLINE if rng.random() < p_offline else ONLINE


def meta_lr_scale(t: int, n: int) -> float:
    """Linearly decaying meta step-size multiplier, 1 at t=0 and 0 at t=n."""
    if n < 1 or not 0 <= t <= n:
        raise InvalidArgumentError(f"need 0 <= t <= N with N >= 1, got t={t}, N={n}")
    return 1.0 - t / n


def inner_adapt(spec: AgentSpec, meta: AgentParams, source, k: int, lr: float, cfg: SacConfig,
                batch_size: int, rng: np.random.Generator, optimizer: str = "adam"):
    """K SAC updates on copies of the meta weights, each on a fresh mini-batch from ``source``.

    ``optimizer="adam"`` starts a zeroed Adam state; ``"sgd"`` takes plain gradient steps.
    """
    if k < 1:
        raise InvalidArgumentError("K must be >= 1")
    if source is None or len(source) == 0:
        raise EmptySourceError("inner adaptation needs a non-empty source buffer")
    if optimizer == "adam":
        opt = Optimizers.adam(spec, lr)
    elif optimizer == "sgd":
        opt = Optimizers.sgd()
    else:
        raise InvalidArgumentError(f"unknown inner optimizer {optimizer!r}")
    params = meta.copy()
    losses = []
    for _ in range(k):
        batch = sample_batch(source, batch_size, rng)
        params, opt, stats = sac_update(spec, params, opt, batch, cfg, rng, lr)
        losses.append(stats["critic_loss"])
    return params, {"critic_loss": losses}


@dataclass
class MetaOptimizer:
    """Persistent outer optimizer fed with the (meta - adapted) pseudo-gradient."""
    opt: Optimizers
    base_lr: float
    ema_rho: float = 0.005

    @classmethod
    def adam(cls, spec: AgentSpec, base_lr: float, ema_rho: float = 0.005) -> "MetaOptimizer":
        return cls(Optimizers.adam(spec, base_lr), base_lr, ema_rho)

    @classmethod
    def sgd(cls, step: float, ema_rho: float = 0.005) -> "MetaOptimizer":
        return cls(Optimizers.sgd(), step, ema_rho)

    def copy(self) -> "MetaOptimizer":
        return MetaOptimizer(self.opt.copy(), self.base_lr, self.ema_rho)


def _outer_step(state, meta_x: np.ndarray, adapted_x: np.ndarray, lr: float):
    if state is None:
        # plain SGD on g = meta - adapted, written as an interpolation so lr=1 lands on adapted exactly
        return (1.0 - lr) * meta_x + lr * adapted_x, None
    return apply_step(state, meta_x, meta_x - adapted_x, lr)


def meta_update(meta: AgentParams, adapted: AgentParams, meta_opt: MetaOptimizer,
                lr_scale: float = 1.0):
    """Reptile step on actor, both critics and log-alpha; meta targets then track the critics."""
    if meta.actor.shape != adapted.actor.shape or meta.critics.shape != adapted.critics.shape:
        raise InvalidArgumentError("meta and adapted parameters differ in shape")
    lr = meta_opt.base_lr * lr_scale
    o = meta_opt.opt
    actor, sa = _outer_step(o.actor, meta.actor, adapted.actor, lr)
    critics, sc = _outer_step(o.critics, meta.critics, adapted.critics, lr)
    la, sl = _outer_step(o.log_alpha, np.array([meta.log_alpha]), np.array([adapted.log_alpha]), lr)
    targets = soft_update(meta.targets, critics, meta_opt.ema_rho)
    new = AgentParams(actor, critics=critics, targets=targets, log_alpha=float(la[0]))
    return new, MetaOptimizer(Optimizers(sa, sc, sl), meta_opt.base_lr, meta_opt.ema_rho)


# ---------------------------------------------------------------- evaluation

def normalize_score(ret: float, refs: dict) -> float:
    lo, hi = refs["random"], refs["expert"]
    if hi == lo:
        raise DegenerateReferenceError("expert and random reference returns are equal")
    return max(0.0, (ret - lo) / (hi - lo))


def evaluate_actions(env, act, n_episodes: int, rng: np.random.Generator) -> float:
    returns = []
    for _ in range(n_episodes):
        s = env.reset(rng)
        total, disc = 0.0, 1.0
        for _ in range(env.horizon):
            s, r, term = env.step(s, act(s), rng)
            total += disc * r
            disc *= env.gamma
            if term:
                break
        returns.append(total)
    return float(np.mean(returns))


def greedy_actor(spec: AgentSpec, params: AgentParams):
    """Deterministic action function of the actor network."""
    if spec.discrete:
        table = actor_sample(spec, params.actor, np.arange(spec.obs_dim), None, deterministic=True)[0]
        return lambda s: int(table[s])
    return lambda s: actor_sample(spec, params.actor, s, None, deterministic=True)[0]


def evaluate_policy(env, spec: AgentSpec, params: AgentParams, n_episodes: int,
                    rng: np.random.Generator, refs: dict):
    """Mean discounted return of the deterministic policy and its normalized score."""
    if n_episodes < 1:
        raise InvalidArgumentError("n_episodes must be >= 1")
    if refs["expert"] == refs["random"]:
        raise DegenerateReferenceError("expert and random reference returns are equal")
    ret = evaluate_actions(env, greedy_actor(spec, params), n_episodes, rng)
    return ret, normalize_score(ret, refs)


# ---------------------------------------------------------------- training loops

class _Collector:
    """Steps the environment with the stochastic current policy, one transition at a time."""

    def __init__(self, env, spec: AgentSpec, rng: np.random.Generator):
        self.env, self.spec, self.rng = env, spec, rng
        self.state = env.reset(rng)
        self.t = 0

    def step(self, actor: np.ndarray) -> Transition:
        a, _ = actor_sample(self.spec, actor, self.state, self.rng)
        nxt, r, term = self.env.step(self.state, a, self.rng)
        tr = Transition(self.state, a, r, nxt, term, self.t)
        self.t += 1
        if term or self.t >= self.env.horizon:
            self.state = self.env.reset(self.rng)
            self.t = 0
        else:
            self.state = nxt
        return tr


def _check_dataset(env, ds: OfflineDataset | None, required: bool):
    if ds is None:
        if required:
            raise ConfigurationError("an offline dataset is required")
        return
    if ds.size == 0:
        raise ConfigurationError("offline dataset is empty")
    if ds.discrete != env.discrete or ds.state_dim != env.obs_dim or ds.action_dim != env.action_dim:
        raise ConfigurationError(f"dataset for {ds.env_id!r} does not match environment {env.name!r}")
    if ds.env_id and ds.env_id != env.name:
        raise ConfigurationError(f"dataset was generated on {ds.env_id!r}, not {env.name!r}")


def _refs(env, ds: OfflineDataset | None) -> dict:
    if ds is not None and ds.metadata.get("reference_returns"):
        return ds.metadata["reference_returns"]
    return env.reference_returns()


def _record(env, spec, params, cfg: MoorlConfig, refs, t, probe_source, online_size, chosen):
    rng = eval_rng(cfg.seed, t)
    ret, score = evaluate_policy(env, spec, params, cfg.eval_episodes, rng, refs)
    mq = mean_q(spec, sample_batch(probe_source, cfg.batch_size, rng), params) \
        if len(probe_source) else 0.0
    return MetricRecord(t, ret, score, mq, params.alpha, online_size, chosen)


def _setup(env, cfg: MoorlConfig):
    spec = AgentSpec.for_env(env, cfg.hidden)
    params = init_agent(spec, component_rng(cfg.seed, _STREAM_INIT), cfg.sac.init_alpha)
    online = ReplayBuffer.for_env(env, cfg.buffer_capacity)
    collector = _Collector(env, spec, component_rng(cfg.seed, _STREAM_ENV))
    return spec, params, online, collector


def train_moorl(env, offline_ds: OfflineDataset, cfg: MoorlConfig, *, inner_optimizer: str = "adam",
                meta_optimizer: MetaOptimizer | None = None, callback=None):
    """Full meta offline-online loop."""
    _check_dataset(env, offline_ds, required=True)
    spec, meta, online, collector = _setup(env, cfg)
    refs = _refs(env, offline_ds)
    meta_opt = meta_optimizer or MetaOptimizer.adam(spec, cfg.meta_lr, cfg.sac.ema_rho)
    select_rng = component_rng(cfg.seed, _STREAM_SELECT)
    update_rng = component_rng(cfg.seed, _STREAM_UPDATE)
    records: list[MetricRecord] = []
    n_total = cfg.total_steps
    for n in range(1, n_total + 1):
        choice = select_buffer(select_rng, cfg.offline_prob)
        for _ in range(cfg.env_steps_per_epoch):
            online.push(collector.step(meta.actor))
        if choice == ONLINE and online.size < cfg.warmup_steps:
            choice = OFFLINE
        source = offline_ds if choice == OFFLINE else online
        adapted, _ = inner_adapt(spec, meta, source, cfg.inner_steps, cfg.inner_lr, cfg.sac,
                                 cfg.batch_size, update_rng, inner_optimizer)
        meta, meta_opt = meta_update(meta, adapted, meta_opt, meta_lr_scale(n, n_total))
        if n % cfg.eval_every == 0 or n == n_total:
            rec = _record(env, spec, meta, cfg, refs, n, offline_ds, online.size, choice)
            records.append(rec)
            log.debug("moorl t=%d score=%.3f mean_q=%.3f alpha=%.4f", n, rec.normalized_score,
                      rec.mean_q, rec.alpha)
            if callback is not None:
                callback(rec)
    return TrainResult(meta, records, spec, {"meta": meta_opt.opt}, n_total)


def _train_sac(env, offline_ds, cfg: MoorlConfig, mixed: bool, callback=None):
    _check_dataset(env, offline_ds, required=mixed)
    spec, params, online, collector = _setup(env, cfg)
    refs = _refs(env, offline_ds)
    opt = Optimizers.adam(spec, cfg.sac.lr)
    update_rng = component_rng(cfg.seed, _STREAM_UPDATE)
    half = max(1, cfg.batch_size // 2)
    probe = offline_ds if mixed else online
    records: list[MetricRecord] = []
    chosen = ONLINE
    for n in range(1, cfg.total_steps + 1):
        for _ in range(cfg.env_steps_per_epoch):
            online.push(collector.step(params.actor))
        batch = None
        if mixed:
            if online.size >= cfg.warmup_steps:
                batch = concat_batches(sample_batch(offline_ds, half, update_rng),
                                       sample_batch(online, cfg.batch_size - half, update_rng))
                chosen = "mixed"
            else:
                batch = sample_batch(offline_ds, cfg.batch_size, update_rng)
                chosen = OFFLINE
        elif online.size >= cfg.warmup_steps:
            batch = sample_batch(online, cfg.batch_size, update_rng)
        if batch is not None:
            params, opt, _ = sac_update(spec, params, opt, batch, cfg.sac, update_rng)
        if n % cfg.eval_every == 0 or n == cfg.total_steps:
            rec = _record(env, spec, params, cfg, refs, n, probe, online.size, chosen)
            records.append(rec)
            if callback is not None:
                callback(rec)
    return TrainResult(params, records, spec, {"sac": opt}, cfg.total_steps)


def train_sac_online(env, cfg: MoorlConfig, callback=None):
    """Plain SAC from an empty buffer, one update per environment step after warm-up."""
    return _train_sac(env, None, cfg, mixed=False, callback=callback)


def train_sac_mixed(env, offline_ds: OfflineDataset, cfg: MoorlConfig, callback=None):
    """SAC whose every batch is half offline, half online (all offline during warm-up)."""
    return _train_sac(env, offline_ds, cfg, mixed=True, callback=callback)


TRAINERS = {
    "moorl": lambda env, ds, cfg, cb=None: train_moorl(env, ds, cfg, callback=cb),
    "sac": lambda env, ds, cfg, cb=None: train_sac_online(env, cfg, callback=cb),
    "mixed": lambda env, ds, cfg, cb=None: train_sac_mixed(env, ds, cfg, callback=cb),
}


def ablate_k(env, offline_ds: OfflineDataset, cfg: MoorlConfig, k_values, seeds, runner=map):
    """Final normalized score per K, aggregated over seeds: rows of (K, mean, std, scores).

    ``runner`` is a map-like callable so cells can be farmed out to a process pool.
    """
    cells = [(int(k), int(s)) for k in k_values for s in seeds]
    for k, _ in cells:
        if k < 1:
            raise InvalidArgumentError("every K must be >= 1")
    jobs = [(env, offline_ds, replace(cfg, inner_steps=k, seed=s)) for k, s in cells]
    finals = list(runner(_ablation_cell, jobs))
    rows = []
    for k in dict.fromkeys(int(k) for k in k_values):
        scores = [f for (kk, _), f in zip(cells, finals) if kk == k]
        rows.append((k, float(np.mean(scores)), float(np.std(scores)), scores))
    return rows


def _ablation_cell(job):
    env, ds, cfg = job
    return train_moorl(env, ds, cfg).final_score


# ---------------------------------------------------------------- checkpoints

CKPT_TAG = "moorl-checkpoint v1"


def save_checkpoint(path, spec: AgentSpec, params: AgentParams, step: int, env_id: str = "",
                    optimizers: dict | None = None) -> None:
    """Text checkpoint: a header line, then one ``name shape v1 ... vn`` line per array."""
    kind = "discrete" if spec.discrete else "continuous"
    hidden = ",".join(str(h) for h in spec.hidden)
    header = (f"{CKPT_TAG} env={env_id or '-'} kind={kind} obs_dim={spec.obs_dim} "
              f"n_actions={spec.n_actions} action_dim={spec.action_dim} hidden={hidden} step={int(step)}")
    lines = [header]

    def put(name, arr):
        arr = np.atleast_1d(np.asarray(arr, dtype=np.float64))
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(" ".join([name, shape] + [repr(float(x)) for x in arr.ravel()]))

    put("actor", params.actor)
    put("critics", params.critics)
    put("targets", params.targets)
    put("log_alpha", params.log_alpha)
    for group, opt in (optimizers or {}).items():
        for part in Optimizers.GROUPS:
            st = getattr(opt, part)
            if st is None:
                continue
            put(f"{group}.{part}.m", st.m)
            put(f"{group}.{part}.v", st.v)
            put(f"{group}.{part}.hyper", [st.step_count, st.lr, st.beta1, st.beta2, st.eps])
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Returns (spec, params, step, env_id, optimizers) exactly as saved."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(CKPT_TAG):
        raise FormatError("line 1: not a moorl checkpoint")
    try:
        head = dict(tok.split("=", 1) for tok in lines[0][len(CKPT_TAG):].split())
        hidden = tuple(int(h) for h in head["hidden"].split(",") if h)
        spec = AgentSpec(int(head["obs_dim"]), head["kind"] == "discrete", int(head["n_actions"]),
                         int(head["action_dim"]), hidden)
        step = int(head["step"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"line 1: bad checkpoint header ({exc})") from exc
    arrays = {}
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        try:
            name = parts[0]
            shape = tuple(int(d) for d in parts[1].split("x"))
            vals = np.array([float(x) for x in parts[2:]])
        except (IndexError, ValueError) as exc:
            raise FormatError(f"line {i}: {exc}") from exc
        if vals.size != int(np.prod(shape)):
            raise FormatError(f"line {i}: {name} declares shape {shape}, found {vals.size} values")
        arrays[name] = vals.reshape(shape)
    try:
        params = AgentParams(arrays["actor"], critics=arrays["critics"], targets=arrays["targets"],
                             log_alpha=float(arrays["log_alpha"][0]))
    except KeyError as exc:
        raise FormatError(f"checkpoint missing array {exc}") from exc
    if params.actor.size != spec.actor.n_params or params.critics.shape[1] != spec.critic.n_params:
        raise FormatError("checkpoint arrays do not match the declared architecture")
    groups: dict = {}
    for name, hyper in arrays.items():
        if name.endswith(".hyper"):
            group, part, _ = name.split(".")
            st = AdamState(arrays[f"{group}.{part}.m"], arrays[f"{group}.{part}.v"], int(hyper[0]),
                           float(hyper[1]), float(hyper[2]), float(hyper[3]), float(hyper[4]))
            groups.setdefault(group, {})[part] = st
    optimizers = {g: Optimizers(**{p: parts.get(p) for p in Optimizers.GROUPS})
                  for g, parts in groups.items()}
    env_id = head.get("env", "-")
    return spec, params, step, ("" if env_id == "-" else env_id), optimizers
