"""Exact mixed-distribution reward analysis on tabular MDPs.

Given an offline behaviour policy mu and an online policy pi, the data mixture
``d_D = lam * d_mu + (1 - lam) * d_pi`` changes the expected reward by

    dR = lam / (1 - gamma) * sum (d_mu - d_pi) * R(s, a)

which is bounded by ``2 lam TV(d_pi, d_mu) R_max / (1 - gamma)`` and, through
Pinsker's inequality, by ``sqrt(2 KL(d_pi || d_mu)) lam R_max / (1 - gamma)``.
Everything here is computed exactly from the MDP tensors.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .envs import TabularMdp, TabularPolicy, VisitDist, exact_visitation
from .errors import InvalidArgumentError

SLACK = 1e-9


@dataclass
class BoundReport:
    lam: float
    delta_r: float
    tv: float
    kl: float
    tv_bound: float
    pinsker_bound: float
    r_max: float
    gamma: float
    holds_tv: bool
    holds_pinsker: bool

    def to_json(self) -> str:
        # non-finite KL/Pinsker values are written as Infinity (Python's json extension)
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return json.dumps(d, sort_keys=True)


def _arr(d) -> np.ndarray:
    return d.d if isinstance(d, VisitDist) else np.asarray(d, dtype=np.float64)


def _same_shape(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise InvalidArgumentError(f"distribution shapes differ: {p.shape} vs {q.shape}")


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise InvalidArgumentError(f"lambda must lie in [0, 1], got {lam}")


def mix_distributions(d_mu, d_pi, lam: float) -> VisitDist:
    _check_lambda(lam)
    mu, pi = _arr(d_mu), _arr(d_pi)
    _same_shape(mu, pi)
    if lam == 0.0:
        return VisitDist(pi.copy())
    if lam == 1.0:
        return VisitDist(mu.copy())
    return VisitDist(lam * mu + (1.0 - lam) * pi)


def expected_reward(d, mdp: TabularMdp) -> float:
    """(1 / (1 - gamma)) * sum_{s,a} d(s, a) R(s, a)."""
    d = _arr(d)
    r = mdp.expected_reward()
    _same_shape(d, r)
    return float(np.sum(d * r) / (1.0 - mdp.gamma))


def performance_gain(mdp: TabularMdp, d_mu, d_pi, lam: float) -> float:
    _check_lambda(lam)
    mu, pi = _arr(d_mu), _arr(d_pi)
    _same_shape(mu, pi)
    return float(lam / (1.0 - mdp.gamma) * np.sum((mu - pi) * mdp.expected_reward()))


def tv_distance(p, q) -> float:
    p, q = _arr(p), _arr(q)
    _same_shape(p, q)
    return float(min(1.0, 0.5 * np.sum(np.abs(p - q))))


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; +inf when p puts mass where q has none."""
    p, q = _arr(p), _arr(q)
    _same_shape(p, q)
    support = p > 0
    if np.any(q[support] <= 0):
        return math.inf
    ps, qs = p[support], q[support]
    return float(max(0.0, np.sum(ps * np.log(ps / qs))))


def _check_common(lam, r_max, gamma):
    _check_lambda(lam)
    if r_max < 0:
        raise InvalidArgumentError("r_max must be non-negative")
    if not 0.0 < gamma < 1.0:
        raise InvalidArgumentError("gamma must lie in (0, 1)")


def tv_bound(lam: float, tv: float, r_max: float, gamma: float) -> float:
    _check_common(lam, r_max, gamma)
    if not 0.0 <= tv <= 1.0:
        raise InvalidArgumentError("tv must lie in [0, 1]")
    return tv * 2.0 * lam * r_max / (1.0 - gamma)


def pinsker_bound(lam: float, kl: float, r_max: float, gamma: float) -> float:
    _check_common(lam, r_max, gamma)
    if kl < 0:
        raise InvalidArgumentError("kl must be non-negative")
    if math.isinf(kl):
        return math.inf if lam * r_max > 0 else 0.0
    return math.sqrt(2.0 * kl) * lam * r_max / (1.0 - gamma)


def reward_bound(mdp: TabularMdp) -> float:
    """max |R(s, a)| over expected per-pair rewards."""
    return float(np.max(np.abs(mdp.expected_reward())))


def verify_bounds(mdp: TabularMdp, policy_mu: TabularPolicy, policy_pi: TabularPolicy,
                  lam: float) -> BoundReport:
    d_mu = exact_visitation(mdp, policy_mu)
    d_pi = exact_visitation(mdp, policy_pi)
    delta = performance_gain(mdp, d_mu, d_pi, lam)
    tv = tv_distance(d_pi, d_mu)
    kl = kl_divergence(d_pi, d_mu)
    r_max = reward_bound(mdp)
    tvb = tv_bound(lam, tv, r_max, mdp.gamma)
    pb = pinsker_bound(lam, kl, r_max, mdp.gamma)
    return BoundReport(lam, delta, tv, kl, tvb, pb, r_max, mdp.gamma,
                       abs(delta) <= tvb + SLACK, abs(delta) <= pb + SLACK)


def empirical_visitation(transitions, gamma: float, n_states: int, n_actions: int,
                         weights=None) -> VisitDist:
    """Discount-weighted visit histogram: each (s, a) at episode time t adds (1 - gamma) gamma^t.

    ``transitions`` may be Transition objects or a Batch; ``weights`` scales each item.
    """
    if hasattr(transitions, "t") and hasattr(transitions, "states") and not isinstance(transitions, list):
        s, a, t = (np.asarray(x) for x in (transitions.states, transitions.actions, transitions.t))
    else:
        items = list(transitions)
        if any(getattr(tr, "t", None) is None for tr in items):
            raise InvalidArgumentError("every transition needs a within-episode time index t")
        s = np.array([tr.state for tr in items], dtype=int)
        a = np.array([tr.action for tr in items], dtype=int)
        t = np.array([tr.t for tr in items])
    if s.size == 0:
        raise InvalidArgumentError("no transitions given")
    if t.dtype.kind not in "iu" or np.any(t < 0):
        raise InvalidArgumentError("time tags must be non-negative integers")
    w = (1.0 - gamma) * gamma ** t.astype(np.float64)
    if weights is not None:
        w = w * np.asarray(weights, dtype=np.float64)
    d = np.zeros((n_states, n_actions))
    np.add.at(d, (s.astype(int), a.astype(int)), w)
    return VisitDist(d / d.sum())
