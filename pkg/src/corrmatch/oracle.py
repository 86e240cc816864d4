"""Brute-force computations on tiny instances.

Everything here enumerates outcomes exhaustively and shares no code path
with the samplers, so tests can use it as an independent reference.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceeded, DomainError
from .mechanisms import PairChannel

ENUMERATION_BUDGET = 10**7


@dataclass(frozen=True, eq=False)
class TinyInstance:
    """Binary users, i.i.d. over time, under uniform random anonymization.

    ``joint`` has shape ``(2,) * n``: the single-time law of all users.
    ``levels`` optionally fixes each user's flip probability (a degenerate
    noise prior, so the noise needs no integration).  ``channel`` replaces
    that with an arbitrary per-time report law ``channel[x, z] = P(Z = z |
    X = x)`` over user codes (bit v of a code is user v's symbol); this is
    how jointly obfuscating users are modelled.
    """

    joint: np.ndarray
    m: int = 1
    levels: tuple[float, ...] | None = None
    channel: np.ndarray | None = None

    def __post_init__(self):
        J = np.asarray(self.joint, dtype=float)
        if J.shape != (2,) * J.ndim or J.ndim < 1:
            raise DomainError(f"joint must have shape (2,)*n, got {J.shape}")
        if J.min() < -1e-15 or abs(J.sum() - 1.0) > 1e-12:
            raise DomainError("joint is not a probability distribution")
        object.__setattr__(self, "joint", J)
        if self.levels is not None and len(self.levels) != J.ndim:
            raise DomainError("need one noise level per user")
        if self.m < 1:
            raise DomainError("m must be >= 1")
        if self.channel is not None:
            C = np.asarray(self.channel, dtype=float)
            size = 2**J.ndim
            if C.shape != (size, size) or C.min() < 0 or np.max(np.abs(C.sum(axis=1) - 1)) > 1e-12:
                raise DomainError("channel must be a row-stochastic 2^n x 2^n matrix")
            if self.levels is not None:
                raise DomainError("give either levels or channel, not both")
            object.__setattr__(self, "channel", C)

    @property
    def n(self) -> int:
        return self.joint.ndim

    @property
    def size(self) -> int:
        return 2 ** (self.n * self.m) * math.factorial(self.n)

    @classmethod
    def independent(cls, ps, m: int = 1, levels=None) -> "TinyInstance":
        J = np.ones(())
        for p in ps:
            J = np.multiply.outer(J, np.array([1.0 - p, p]))
        return cls(J, m, None if levels is None else tuple(levels))


def _code_joint(inst: TinyInstance) -> np.ndarray:
    """P(X = x, Z = z) over user codes, bit v of a code = symbol of user v."""
    n = inst.n
    size = 2**n
    bits = (np.arange(size)[:, None] >> np.arange(n)[None, :]) & 1
    # joint is indexed [x_0, ..., x_{n-1}]
    px = np.array([inst.joint[tuple(b)] for b in bits])
    if inst.channel is not None:
        return px[:, None] * inst.channel
    levels = np.zeros(n) if inst.levels is None else np.asarray(inst.levels)
    flip = bits[:, None, :] != bits[None, :, :]
    chan = np.where(flip, levels[None, None, :], 1.0 - levels[None, None, :]).prod(axis=2)
    return px[:, None] * chan


def exact_mi_anonymized(inst: TinyInstance, target: int = 0, k: int = 0,
                        budget: int = ENUMERATION_BUDGET) -> float:
    """``I(X_target(k); Y)`` in bits, by summing over every observation matrix
    ``Y`` and every one of the n! equally likely permutations."""
    if inst.size > budget:
        raise BudgetExceeded(f"enumeration size {inst.size} exceeds budget {budget}")
    if not (0 <= target < inst.n and 0 <= k < inst.m):
        raise DomainError("target user or time index out of range")
    n, m = inst.n, inst.m
    size = 2**n
    pxz = _code_joint(inst)
    xbit = (np.arange(size) >> target) & 1
    t = np.stack([pxz[xbit == a].sum(axis=0) for a in (0, 1)])  # t[a, z]
    q = t.sum(axis=0)

    ycodes = np.array(list(itertools.product(range(size), repeat=m)), dtype=np.int64)  # rows = Y
    bits = (np.arange(size)[:, None] >> np.arange(n)[None, :]) & 1
    p_ay = np.zeros((2, len(ycodes)))
    for perm in itertools.permutations(range(n)):
        # Y[:, perm[v]] = Z[:, v]  =>  z_v = y_{perm[v]}
        zmap = (bits[:, list(perm)] << np.arange(n)[None, :]).sum(axis=1)
        z = zmap[ycodes]
        qz = q[z]
        rest = np.prod(np.delete(qz, k, axis=1), axis=1) if m > 1 else np.ones(len(z))
        p_ay += t[:, z[:, k]] * rest[None, :]
    p_ay /= math.factorial(n)
    p_a = p_ay.sum(axis=1, keepdims=True)
    p_y = p_ay.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_ay > 0, p_ay * np.log2(p_ay / (p_a * p_y)), 0.0)
    return max(0.0, float(terms.sum()))


def exact_pair_mi(joint) -> float:
    """Mutual information (bits) of a 2 x 2 joint distribution."""
    J = np.asarray(joint, dtype=float)
    if J.shape != (2, 2) or J.min() < -1e-15 or abs(J.sum() - 1.0) > 1e-12:
        raise DomainError(f"invalid joint {J.tolist()}")
    total = 0.0
    row, col = J.sum(axis=1), J.sum(axis=0)
    for a in (0, 1):
        for b in (0, 1):
            if J[a, b] > 0:
                total += J[a, b] * math.log2(J[a, b] / (row[a] * col[b]))
    return max(0.0, total)


@dataclass
class ChannelReport:
    joint_in: np.ndarray
    joint_out: np.ndarray
    cov_in: float
    cov_out: float
    marginals_out: tuple[float, float]
    flip_rates: tuple[float, float]  # (user i, user j)
    bound: float
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def verify_pair_channel(joint, channel: PairChannel, tol: float = 1e-12) -> ChannelReport:
    """Push the four outcomes of ``joint`` through ``channel`` one by one."""
    J = np.asarray(joint, dtype=float)
    out = np.zeros((2, 2))
    flips = [0.0, 0.0]
    for a in (0, 1):
        for b in (0, 1):
            mass = J[a, b]
            x = [a, b]
            d, v = x[channel.driver], x[channel.driven]
            prob = channel.flip_prob[d] if v == channel.flip_from[d] else 0.0
            y = list(x)
            y[channel.driven] = 1 - v
            out[a, b] += mass * (1.0 - prob)
            out[y[0], y[1]] += mass * prob
            flips[channel.driven] += mass * prob
    pi, pj = J[1].sum(), J[:, 1].sum()
    cov_in = J[1, 1] - pi * pj
    cov_out = out[1, 1] - out[1].sum() * out[:, 1].sum()
    bound = abs(cov_in) / max(pi, pj, 1 - pi, 1 - pj)
    report = ChannelReport(J, out, float(cov_in), float(cov_out),
                           (float(out[1].sum()), float(out[:, 1].sum())),
                           (float(flips[0]), float(flips[1])), float(bound))
    if abs(cov_out) >= tol:
        report.failures.append(f"|Cov_out| = {abs(cov_out):.3e} >= {tol}")
    for who, rate in zip("ij", flips):
        if rate > bound + tol:
            report.failures.append(f"user {who} flip rate {rate:.6f} exceeds bound {bound:.6f}")
    return report


def pair_channel_matrix(channel: PairChannel) -> np.ndarray:
    """4 x 4 report law ``P(z | x)`` of a pair channel over user codes
    (code = x_i + 2 x_j)."""
    C = np.zeros((4, 4))
    for code in range(4):
        x = [code & 1, code >> 1]
        d, v = x[channel.driver], x[channel.driven]
        prob = channel.flip_prob[d] if v == channel.flip_from[d] else 0.0
        y = list(x)
        y[channel.driven] = 1 - v
        C[code, code] += 1.0 - prob
        C[code, y[0] + 2 * y[1]] += prob
    return C


def decorrelated_instance(joint, channel: PairChannel, m: int = 1) -> TinyInstance:
    """Pair instance whose reports pass through ``channel`` before anonymization.

    The mutual information of this instance is about the *true* samples.
    """
    return TinyInstance(np.asarray(joint, dtype=float), m, channel=pair_channel_matrix(channel))


def replaced_instance(joint, channel: PairChannel, m: int = 1) -> TinyInstance:
    """Pair instance whose data law *is* the channel output."""
    return TinyInstance(verify_pair_channel(joint, channel).joint_out, m)


PRESETS = {
    "single-fair": lambda: TinyInstance.independent([0.5], m=1),
    "pair-mi-n2m1": lambda: TinyInstance.independent([0.5, 0.5], m=1),
    "correlated-n2m1": lambda: TinyInstance(np.array([[0.5, 0.0], [0.0, 0.5]]), m=1),
}
