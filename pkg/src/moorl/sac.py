"""Soft actor-critic pieces shared by the meta trainer and the baselines.

Everything is a function of explicit parameter vectors.  Discrete agents use a
categorical actor over logits and critics that output one value per action;
continuous agents use a tanh-squashed Gaussian actor and critics on (s, a).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import InvalidArgumentError, NumericalError
from .nn import AdamState, MlpSpec, adam_step, backward_cached, forward_cached, init_params

LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0
TANH_EPS = 1e-6
ACTION_LIMIT = 1.0 - 1e-12
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class AgentSpec:
    obs_dim: int
    discrete: bool
    n_actions: int = 0  # discrete
    action_dim: int = 1  # continuous
    hidden: tuple[int, ...] = (256, 256)

    @classmethod
    def for_env(cls, env, hidden=(256, 256)) -> "AgentSpec":
        if env.discrete:
            return cls(env.obs_dim, True, n_actions=env.n_actions, hidden=tuple(hidden))
        return cls(env.obs_dim, False, action_dim=env.action_dim, hidden=tuple(hidden))

    @cached_property
    def actor(self) -> MlpSpec:
        out = self.n_actions if self.discrete else 2 * self.action_dim
        return MlpSpec((self.obs_dim, *self.hidden, out), "relu")

    @cached_property
    def critic(self) -> MlpSpec:
        if self.discrete:
            return MlpSpec((self.obs_dim, *self.hidden, self.n_actions), "relu")
        return MlpSpec((self.obs_dim + self.action_dim, *self.hidden, 1), "relu")

    @cached_property
    def _eye(self) -> np.ndarray:
        return np.eye(self.obs_dim)

    def encode(self, states) -> np.ndarray:
        if self.discrete:
            return self._eye[np.asarray(states, dtype=int)]
        return np.asarray(states, dtype=np.float64)


class AgentParams:
    """Actor, twin critics, their EMA targets and log-temperature.

    The twin critics (and targets) are stored stacked as ``(2, n)`` arrays so both
    evaluate in one batched pass; ``critic1``/``critic2`` are row views.
    """

    FIELDS = ("actor", "critic1", "critic2", "target1", "target2")

    def __init__(self, actor, critic1=None, critic2=None, target1=None, target2=None,
                 log_alpha: float = 0.0, *, critics=None, targets=None):
        self.actor = np.asarray(actor, dtype=np.float64)
        if critics is None:
            critics = np.stack([critic1, critic2]).astype(np.float64)
        if targets is None:
            targets = np.stack([target1, target2]).astype(np.float64)
        if critics.shape != targets.shape or critics.ndim != 2 or critics.shape[0] != 2:
            raise InvalidArgumentError("critic and target shapes must match (2 x n)")
        self.critics = critics
        self.targets = targets
        self.log_alpha = float(log_alpha)

    critic1 = property(lambda self: self.critics[0], lambda self, v: self.critics.__setitem__(0, v))
    critic2 = property(lambda self: self.critics[1], lambda self, v: self.critics.__setitem__(1, v))
    target1 = property(lambda self: self.targets[0], lambda self, v: self.targets.__setitem__(0, v))
    target2 = property(lambda self: self.targets[1], lambda self, v: self.targets.__setitem__(1, v))

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    def copy(self) -> "AgentParams":
        return AgentParams(self.actor.copy(), critics=self.critics.copy(),
                           targets=self.targets.copy(), log_alpha=self.log_alpha)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for arr in (self.actor, self.critics, self.targets):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.float64(self.log_alpha).tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, AgentParams):
            return NotImplemented
        return (np.array_equal(self.actor, other.actor) and np.array_equal(self.critics, other.critics)
                and np.array_equal(self.targets, other.targets) and self.log_alpha == other.log_alpha)


@dataclass
class SacConfig:
    gamma: float = 0.99
    ema_rho: float = 0.005
    lr: float = 3e-4
    target_entropy: float | None = None  # None -> default for the action space
    use_cdq: bool = True
    use_entropy_backup: bool = True
    init_alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise InvalidArgumentError("gamma must lie in (0, 1)")
        if not 0.0 < self.ema_rho <= 1.0:
            raise InvalidArgumentError("ema_rho must lie in (0, 1]")
        if self.init_alpha <= 0:
            raise InvalidArgumentError("init_alpha must be positive")

    def entropy_target(self, spec: AgentSpec) -> float:
        if self.target_entropy is not None:
            return float(self.target_entropy)
        if spec.discrete:
            return DISCRETE_ENTROPY_FRACTION * float(np.log(spec.n_actions))
        return -spec.action_dim / 2.0


# target entropy for categorical actors, as a fraction of the uniform-policy entropy
DISCRETE_ENTROPY_FRACTION = 0.5


def init_agent(spec: AgentSpec, rng: np.random.Generator, init_alpha: float = 1.0) -> AgentParams:
    actor = init_params(spec.actor, rng)
    critics = np.stack([init_params(spec.critic, rng), init_params(spec.critic, rng)])
    return AgentParams(actor, critics=critics, targets=critics.copy(), log_alpha=float(np.log(init_alpha)))


def _require_batch(batch) -> None:
    if batch is None or len(batch.rewards) == 0:
        raise InvalidArgumentError("batch must be non-empty")


# ---------------------------------------------------------------- actor

def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_finite(out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericalError("actor network produced non-finite output")


def _gaussian_heads(spec: AgentSpec, out: np.ndarray):
    d = spec.action_dim
    mean = out[:, :d]
    raw = out[:, d:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
    return mean, log_std, inside


def squashed_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """log density of tanh(u) where u ~ N(mean, exp(log_std)^2), summed over action dims."""
    eps = (u - mean) / np.exp(log_std)
    a = np.tanh(u)
    gauss = -0.5 * eps * eps - log_std - HALF_LOG_2PI
    return np.sum(gauss - np.log(1.0 - a * a + TANH_EPS), axis=-1)


def actor_sample(spec: AgentSpec, actor: np.ndarray, state, rng: np.random.Generator | None,
                 deterministic: bool = False):
    """Action and its log-probability for one state or a batch of states."""
    single = np.ndim(state) == (0 if spec.discrete else 1)
    feats = spec.encode(np.atleast_1d(state) if spec.discrete else np.atleast_2d(state))
    out, _ = forward_cached(spec.actor, actor, feats)
    _check_finite(out)
    if spec.discrete:
        logp = _log_softmax(out)
        if deterministic:
            a = np.argmax(out, axis=1)
        else:
            probs = np.exp(logp)
            cum = np.cumsum(probs, axis=1)
            draws = rng.random(len(cum))[:, None] * cum[:, -1:]
            a = np.minimum((cum <= draws).sum(axis=1), spec.n_actions - 1)
        lp = logp[np.arange(len(a)), a]
        return (int(a[0]), float(lp[0])) if single else (a, lp)
    mean, log_std, _ = _gaussian_heads(spec, out)
    u = mean if deterministic else mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    # tanh rounds to +-1 in float64 once |u| > ~19; keep actions strictly inside the box
    a = np.clip(np.tanh(u), -ACTION_LIMIT, ACTION_LIMIT)
    lp = squashed_log_prob(u, mean, log_std)
    return (a[0], float(lp[0])) if single else (a, lp)


def _sample_with_noise(spec: AgentSpec, actor, feats, rng):
    """Reparameterized sample keeping what the actor gradient needs."""
    out, cache = forward_cached(spec.actor, actor, feats)
    _check_finite(out)
    mean, log_std, inside = _gaussian_heads(spec, out)
    std = np.exp(log_std)
    eps = rng.standard_normal(mean.shape)
    u = mean + std * eps
    a = np.tanh(u)
    lp = np.sum(-0.5 * eps * eps - log_std - HALF_LOG_2PI - np.log(1.0 - a * a + TANH_EPS), axis=1)
    return a, lp, (cache, u, a, eps, std, inside)


# ---------------------------------------------------------------- critic

def _critic_forward(spec: AgentSpec, critics, feats, actions):
    """Q(s, a) per row for stacked critics, shape (2, B), plus the backprop cache."""
    n = len(feats)
    if spec.discrete:
        out, cache = forward_cached(spec.critic, critics, feats)
        return out[:, np.arange(n), actions], cache, out
    x = np.concatenate([feats, np.asarray(actions, dtype=np.float64).reshape(n, -1)], axis=1)
    out, cache = forward_cached(spec.critic, critics, x)
    return out[..., 0], cache, out


def q_values(spec: AgentSpec, critic, states, actions) -> np.ndarray:
    """Q(s, a) of a single critic parameter vector."""
    q = _critic_forward(spec, np.atleast_2d(critic), spec.encode(states), actions)[0]
    return q[0]


def _pessimistic(q: np.ndarray, use_cdq: bool) -> np.ndarray:
    return np.minimum(q[0], q[1]) if use_cdq else q[0]


def backup_values(spec: AgentSpec, params: AgentParams, cfg: SacConfig, next_states,
                  rng: np.random.Generator | None) -> np.ndarray:
    """Soft state value of s' under the target critics and current actor."""
    feats = spec.encode(next_states)
    alpha = params.alpha
    if spec.discrete:
        logits, _ = forward_cached(spec.actor, params.actor, feats)
        logp = _log_softmax(logits)
        probs = np.exp(logp)
        q, _ = forward_cached(spec.critic, params.targets, feats)
        v = np.sum(probs * _pessimistic(q, cfg.use_cdq), axis=1)
        if cfg.use_entropy_backup:
            v = v - alpha * np.sum(probs * logp, axis=1)
        return v
    a, lp = actor_sample(spec, params.actor, next_states, rng)
    q = _pessimistic(_critic_forward(spec, params.targets, feats, a)[0], cfg.use_cdq)
    if cfg.use_entropy_backup:
        q = q - alpha * lp
    return q


def critic_loss_and_grad(spec: AgentSpec, batch, params: AgentParams, cfg: SacConfig,
                         rng: np.random.Generator | None = None):
    """Summed squared Bellman error of both critics against a fixed soft target.

    Returns (loss, grad_critic1, grad_critic2); the two gradients are rows of one array.
    """
    _require_batch(batch)
    n = len(batch.rewards)
    y = batch.rewards + cfg.gamma * (1.0 - batch.dones) * backup_values(
        spec, params, cfg, batch.next_states, rng)
    q, cache, out = _critic_forward(spec, params.critics, spec.encode(batch.states), batch.actions)
    err = q - y
    loss = float(np.sum(err * err) / n)
    upstream = np.zeros_like(out)
    if spec.discrete:
        upstream[:, np.arange(n), batch.actions] = 2.0 * err / n
    else:
        upstream[..., 0] = 2.0 * err / n
    grad = backward_cached(spec.critic, params.critics, cache, upstream, input_grad=False)[0]
    return loss, grad[0], grad[1]


def mean_q(spec: AgentSpec, batch, params: AgentParams) -> float:
    if len(batch.rewards) == 0:
        return 0.0
    q = _critic_forward(spec, params.critics, spec.encode(batch.states), batch.actions)[0]
    return float(np.mean(np.minimum(q[0], q[1])))


# ---------------------------------------------------------------- actor loss

def actor_loss_and_grad(spec: AgentSpec, batch, params: AgentParams, cfg: SacConfig,
                        rng: np.random.Generator | None = None):
    """mean[alpha * log pi(a|s) - Q(s, a)] with critics held fixed."""
    loss, grad, _ = _actor_loss(spec, batch, params, cfg, rng)
    return loss, grad


def _actor_loss(spec, batch, params, cfg, rng):
    """Actor loss, gradient, and the per-state log-prob term reused by the temperature step."""
    _require_batch(batch)
    feats = spec.encode(batch.states)
    n = len(feats)
    alpha = params.alpha
    if spec.discrete:
        logits, cache = forward_cached(spec.actor, params.actor, feats)
        logp = _log_softmax(logits)
        probs = np.exp(logp)
        q = _pessimistic(forward_cached(spec.critic, params.critics, feats)[0], cfg.use_cdq)
        f = alpha * logp - q
        per_state = np.sum(probs * f, axis=1)
        # d/dz sum_a pi_a f_a = pi * (f - E_pi f); the d log pi term integrates to zero
        upstream = probs * (f - per_state[:, None]) / n
        grad = backward_cached(spec.actor, params.actor, cache, upstream, input_grad=False)[0]
        return float(np.mean(per_state)), grad, np.sum(probs * logp, axis=1)

    a, lp, (cache, u, _, eps, std, inside) = _sample_with_noise(spec, params.actor, feats, rng)
    d = spec.action_dim
    x = np.concatenate([feats, a], axis=1)
    if cfg.use_cdq:
        qs, cache_q = forward_cached(spec.critic, params.critics, x)
        dq = backward_cached(spec.critic, params.critics, cache_q, np.ones_like(qs))[1][..., -d:]
        use2 = qs[1, :, 0] < qs[0, :, 0]
        dq_da = np.where(use2[:, None], dq[1], dq[0])
        q = np.minimum(qs[0, :, 0], qs[1, :, 0])
    else:
        q1, cache_q = forward_cached(spec.critic, params.critic1, x)
        dq_da = backward_cached(spec.critic, params.critic1, cache_q, np.ones((n, 1)))[1][:, -d:]
        q = q1[:, 0]
    loss = float(np.mean(alpha * lp - q))
    one_minus = 1.0 - a * a
    # d(log pi)/du through the tanh correction, and dQ/du through a = tanh(u)
    dcorr_du = 2.0 * a * one_minus / (one_minus + TANH_EPS)
    dl_du = (alpha * dcorr_du - dq_da * one_minus) / n
    g_mean = dl_du
    g_log_std = (dl_du * std * eps - alpha / n) * inside
    grad = backward_cached(spec.actor, params.actor, cache, np.concatenate([g_mean, g_log_std], axis=1),
                           input_grad=False)[0]
    return loss, grad, lp


# ---------------------------------------------------------------- temperature

def policy_log_prob_term(spec: AgentSpec, batch, params: AgentParams,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-state E[log pi(a|s)] (exact for discrete, one sample for continuous)."""
    feats = spec.encode(batch.states)
    if spec.discrete:
        logits, _ = forward_cached(spec.actor, params.actor, feats)
        logp = _log_softmax(logits)
        return np.sum(np.exp(logp) * logp, axis=1)
    return _sample_with_noise(spec, params.actor, feats, rng)[1]


def temperature_loss_and_grad(spec: AgentSpec, batch, params: AgentParams, cfg: SacConfig,
                              rng: np.random.Generator | None = None, log_probs=None):
    """L(alpha) = mean[-alpha (log pi + target_entropy)]; returns (loss, dL/dlog_alpha).

    A negative gradient means the temperature should rise.
    """
    if log_probs is None:
        _require_batch(batch)
        log_probs = policy_log_prob_term(spec, batch, params, rng)
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.size == 0:
        raise InvalidArgumentError("batch must be non-empty")
    loss = float(np.mean(-params.alpha * (log_probs + cfg.entropy_target(spec))))
    return loss, loss


# ---------------------------------------------------------------- updates

def soft_update(target: np.ndarray, online: np.ndarray, rho: float) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    online = np.asarray(online, dtype=np.float64)
    if target.shape != online.shape:
        raise InvalidArgumentError("soft_update: length mismatch")
    if not 0.0 <= rho <= 1.0:
        raise InvalidArgumentError("rho must lie in [0, 1]")
    if rho == 1.0:
        return online.copy()
    # increment form leaves target untouched when it already equals online
    return target + rho * (online - target)


@dataclass
class Optimizers:
    """Per-parameter-group optimizer state; ``None`` entries mean plain gradient descent."""
    actor: AdamState | None
    critics: AdamState | None
    log_alpha: AdamState | None

    GROUPS = ("actor", "critics", "log_alpha")

    @classmethod
    def adam(cls, spec: AgentSpec, lr: float) -> "Optimizers":
        n = spec.critic.n_params
        return cls(AdamState.zeros(spec.actor.n_params, lr),
                   AdamState(np.zeros((2, n)), np.zeros((2, n)), 0, lr), AdamState.zeros(1, lr))

    @classmethod
    def sgd(cls) -> "Optimizers":
        return cls(None, None, None)

    def copy(self) -> "Optimizers":
        return Optimizers(*(None if s is None else s.copy()
                            for s in (self.actor, self.critics, self.log_alpha)))


def apply_step(state: AdamState | None, params: np.ndarray, grad: np.ndarray, lr: float):
    if state is None:
        return params - lr * grad, None
    return adam_step(state, params, grad, lr)


def sac_update(spec: AgentSpec, params: AgentParams, opt: Optimizers, batch, cfg: SacConfig,
               rng: np.random.Generator, lr: float | None = None):
    """One critic step, target EMA, one actor step, one temperature step.

    All three gradients are taken at the incoming parameters, so one call is a single
    gradient step on the joint objective.  The temperature step reuses the
    log-probabilities drawn for the actor loss.
    Returns new (params, optimizers, stats); the inputs are not modified.
    """
    lr = cfg.lr if lr is None else lr
    c_loss, g1, g2 = critic_loss_and_grad(spec, batch, params, cfg, rng)
    a_loss, ga, log_probs = _actor_loss(spec, batch, params, cfg, rng)
    t_loss, gt = temperature_loss_and_grad(spec, batch, params, cfg, log_probs=log_probs)
    critics, sc = apply_step(opt.critics, params.critics, np.stack([g1, g2]), lr)
    targets = soft_update(params.targets, critics, cfg.ema_rho)
    actor, sa = apply_step(opt.actor, params.actor, ga, lr)
    la, sl = apply_step(opt.log_alpha, np.array([params.log_alpha]), np.array([gt]), lr)
    new = AgentParams(actor, critics=critics, targets=targets, log_alpha=float(la[0]))
    stats = {"critic_loss": c_loss, "actor_loss": a_loss, "temperature_loss": t_loss}
    return new, Optimizers(sa, sc, sl), stats
