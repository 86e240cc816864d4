"""Privacy-protection mechanisms: anonymization, obfuscation, decorrelation.

Permutations follow the convention ``perm[u] = pseudonym of user u``; the
anonymized matrix satisfies ``Y[:, perm[u]] == Z[:, u]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import DomainError, MechanismError, UnsupportedTopologyError
from .population import AssociationGraph
from .seeding import rng_for
from .tracegen import Stage, TraceMatrix

SCHEMES = ("none", "independent", "joint-decorrelating")
_JOINT_TOL = 1e-12


@dataclass(frozen=True)
class MechanismRecord:
    """Ground truth of one protection run; hidden from the adversary."""

    permutation: tuple[int, ...]
    noise: tuple[float, ...]
    a_n: float
    scheme: str = "independent"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise MechanismError(f"unknown scheme {self.scheme!r}")
        check_permutation(self.permutation, len(self.permutation))
        if any(not 0.0 <= x <= self.a_n for x in self.noise):
            raise MechanismError("realized noise levels must lie in [0, a_n]")

    def to_dict(self) -> dict[str, Any]:
        return {"pi": list(self.permutation), "r": list(self.noise), "a_n": self.a_n, "scheme": self.scheme}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MechanismRecord":
        return cls(tuple(int(x) for x in d["pi"]), tuple(float(x) for x in d["r"]),
                   float(d["a_n"]), d.get("scheme", "independent"))


def check_permutation(perm, n: int) -> np.ndarray:
    arr = np.asarray(perm, dtype=np.int64)
    if arr.shape != (n,) or not np.array_equal(np.sort(arr), np.arange(n)):
        raise MechanismError(f"not a bijection on {n} users: {list(arr)[:10]}")
    return arr


def random_permutation(n: int, seed: int) -> np.ndarray:
    """Uniformly random pseudonym assignment ``perm[u] = pseudonym``."""
    return rng_for(seed, "permutation").permutation(n)


def anonymize(traces: TraceMatrix, permutation) -> TraceMatrix:
    """Relabel columns: output column ``perm[u]`` is input column ``u``."""
    if traces.stage == Stage.ANONYMIZED:
        raise MechanismError("traces are already anonymized")
    perm = check_permutation(permutation, traces.n)
    out = np.empty_like(traces.data)
    out[:, perm] = traces.data
    return traces.advance(out, Stage.ANONYMIZED)


def apply_noise_levels(traces: TraceMatrix, levels, rng: np.random.Generator) -> TraceMatrix:
    """Corrupt each sample of user ``u`` with probability ``levels[u]``.

    A corrupted sample is replaced by a uniformly random *different* symbol;
    for r = 2 this is a bit flip.
    """
    levels = np.asarray(levels, dtype=float)
    if levels.shape != (traces.n,):
        raise MechanismError("need one noise level per user")
    if traces.stage != Stage.TRUE:
        raise MechanismError("obfuscation applies to TRUE traces")
    x = traces.data
    hit = rng.random(x.shape) < levels[None, :]
    if traces.r == 2:
        out = np.where(hit, 1 - x, x)
    else:
        shift = rng.integers(1, traces.r, size=x.shape)
        out = np.where(hit, (x.astype(np.int64) + shift) % traces.r, x)
    return traces.advance(out, Stage.OBFUSCATED)


def draw_noise_levels(n: int, a_n: float, seed: int) -> np.ndarray:
    if not 0.0 <= a_n <= 1.0:
        raise MechanismError(f"noise level a_n must lie in [0, 1], got {a_n}")
    return rng_for(seed, "noise-levels").uniform(0.0, a_n, size=n)


def obfuscate_independent(traces: TraceMatrix, a_n: float, seed: int) -> tuple[TraceMatrix, np.ndarray]:
    """Draw ``R_u ~ U[0, a_n]`` once per user and corrupt samples with it.

    Returns the obfuscated matrix and the realized levels ``R``.
    """
    levels = draw_noise_levels(traces.n, a_n, seed)
    return apply_noise_levels(traces, levels, rng_for(seed, "noise-flips")), levels


def obfuscated_marginal(p: float, level: float) -> float:
    """Probability of reporting 1 after flipping with probability ``level``."""
    return p + (1.0 - 2.0 * p) * level


# --------------------------------------------------------------------------- #
# decorrelating pair channel
# --------------------------------------------------------------------------- #


def check_joint(joint) -> np.ndarray:
    J = np.asarray(joint, dtype=float)
    if J.shape != (2, 2) or J.min() < -_JOINT_TOL or abs(J.sum() - 1.0) > 1e-9:
        raise DomainError(f"not a joint distribution on {{0,1}}^2: {J.tolist()}")
    return np.clip(J, 0.0, 1.0)


def joint_from_marginals(p_i: float, p_j: float, p11: float) -> np.ndarray:
    """2 x 2 joint ``J[a, b] = P(X_i = a, X_j = b)`` from ``P(X_i = X_j = 1)``."""
    lo, hi = max(0.0, p_i + p_j - 1.0), min(p_i, p_j)
    if not (0.0 <= p_i <= 1.0 and 0.0 <= p_j <= 1.0) or not lo - _JOINT_TOL <= p11 <= hi + _JOINT_TOL:
        raise DomainError(f"p11={p11} outside the Frechet range [{lo}, {hi}]")
    return np.array([[1.0 - p_i - p_j + p11, p_j - p11], [p_i - p11, p11]])


def covariance(joint) -> float:
    J = check_joint(joint)
    return float(J[1, 1] - J[1, :].sum() * J[:, 1].sum())


@dataclass(frozen=True)
class PairChannel:
    """Conditional flip rule that decorrelates a pair of binary users.

    The driver (position 0 = user i, 1 = user j) is never touched.  When the
    driver shows ``symbol``, the driven user's sample is flipped from
    ``flip_from[symbol]`` with probability ``flip_prob[symbol]``.
    """

    driver: int
    majority: int
    flip_prob: tuple[float, float]
    flip_from: tuple[int, int]
    driven_marginal: float
    flip_rate: float
    driver_flip_rate: float = 0.0

    @property
    def driven(self) -> int:
        return 1 - self.driver

    @property
    def is_identity(self) -> bool:
        return self.flip_prob == (0.0, 0.0)

    def output_joint(self, joint) -> np.ndarray:
        """Exact joint of (user i, user j) after the channel."""
        J = check_joint(joint)
        # D[d, v] = P(driver = d, driven = v)
        D = J if self.driver == 0 else J.T
        out = D.copy()
        for d in (0, 1):
            src = self.flip_from[d]
            moved = D[d, src] * self.flip_prob[d]
            out[d, src] -= moved
            out[d, 1 - src] += moved
        return out if self.driver == 0 else out.T

    def apply(self, x_i: np.ndarray, x_j: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Run the channel sample by sample on synchronized binary columns."""
        drv, dvn = (x_i, x_j) if self.driver == 0 else (x_j, x_i)
        prob = np.asarray(self.flip_prob)[drv]
        src = np.asarray(self.flip_from)[drv]
        hit = (dvn == src) & (rng.random(len(drv)) < prob)
        new = np.where(hit, 1 - dvn, dvn).astype(dvn.dtype)
        return (x_i, new) if self.driver == 0 else (new, x_j)


def build_pair_channel(p_i: float, p_j: float, joint_p11: float) -> PairChannel:
    """Minimal-flip channel giving the pair exactly zero covariance.

    The driver is the user whose majority symbol has the largest probability
    ``M = max{p_i, 1-p_i, p_j, 1-p_j}`` (ties: user i first, symbol 1 before
    0).  Whenever the driver is in its minority symbol, the driven user is
    remapped onto its conditional law given the driver's majority symbol.
    The expected flip rate of the driven user is then ``|Cov| / M``.
    """
    J = joint_from_marginals(p_i, p_j, joint_p11)
    candidates = [(p_i, 0, 1), (1 - p_i, 0, 0), (p_j, 1, 1), (1 - p_j, 1, 0)]
    big, driver, major = candidates[0]
    for cand in candidates[1:]:
        if cand[0] > big + 1e-15:
            big, driver, major = cand
    D = J if driver == 0 else J.T
    minor = 1 - major
    p_major = D[major].sum()
    p_minor = D[minor].sum()
    target = D[major, 1] / p_major
    now = D[minor, 1] / p_minor if p_minor > 0 else target
    flip_prob = [0.0, 0.0]
    flip_from = [1, 1]
    if now > target + _JOINT_TOL:
        flip_prob[minor] = (now - target) / now
        flip_from[minor] = 1
    elif now < target - _JOINT_TOL:
        flip_prob[minor] = (target - now) / (1.0 - now)
        flip_from[minor] = 0
    rate = p_minor * abs(now - target)
    return PairChannel(driver, major, (flip_prob[0], flip_prob[1]), (flip_from[0], flip_from[1]),
                       float(target), float(rate))


def decorrelation_bound(joint) -> float:
    """``|Cov| / max{p_i, p_j, 1-p_i, 1-p_j}`` for a 2 x 2 joint."""
    J = check_joint(joint)
    p_i, p_j = J[1].sum(), J[:, 1].sum()
    return abs(covariance(J)) / max(p_i, p_j, 1 - p_i, 1 - p_j)


def obfuscate_joint(traces: TraceMatrix, graph: AssociationGraph, joints: Mapping[tuple[int, int], Any],
                    a_n: float, seed: int) -> tuple[TraceMatrix, np.ndarray]:
    """Decorrelate every edge with its pair channel, then add independent noise.

    ``joints`` maps each edge ``(i, j)`` (``i < j``) to its 2 x 2 joint.
    Returns the obfuscated matrix and the realized independent levels.
    """
    if traces.stage != Stage.TRUE:
        raise MechanismError("obfuscation applies to TRUE traces")
    if traces.r != 2:
        raise MechanismError("the decorrelating channel is defined for binary data")
    if any(len(g) > 2 for g in graph.groups):
        raise UnsupportedTopologyError("joint decorrelation supports groups of size <= 2 only")
    data = traces.data.copy()
    rng = rng_for(seed, "pair-channel")
    for i, j in sorted(graph.edges):
        J = check_joint(joints[(i, j)])
        channel = build_pair_channel(J[1].sum(), J[:, 1].sum(), J[1, 1])
        if not channel.is_identity:
            data[:, i], data[:, j] = channel.apply(data[:, i], data[:, j], rng)
    stage_in = TraceMatrix(data, traces.r, Stage.TRUE)
    levels = draw_noise_levels(traces.n, a_n, seed)
    return apply_noise_levels(stage_in, levels, rng_for(seed, "noise-flips")), levels


def measure_noise(x_true: TraceMatrix, z: TraceMatrix) -> tuple[np.ndarray, float]:
    """Fraction of corrupted samples per user and pooled over all users."""
    if x_true.data.shape != z.data.shape:
        raise MechanismError(f"shape mismatch {x_true.data.shape} vs {z.data.shape}")
    if x_true.stage != Stage.TRUE or z.stage != Stage.OBFUSCATED:
        raise MechanismError("measure_noise expects TRUE and OBFUSCATED matrices")
    diff = x_true.data != z.data
    return diff.mean(axis=0), float(diff.mean())


@dataclass
class Protected:
    """Output of :func:`protect`: what the adversary sees plus the sealed truth."""

    observed: TraceMatrix
    record: MechanismRecord
    obfuscated: TraceMatrix | None = field(default=None)


def protect(traces: TraceMatrix, scheme: str, a_n: float, seed: int,
            graph: AssociationGraph | None = None, joints=None) -> Protected:
    """Obfuscate (per ``scheme``) and then anonymize ``traces``."""
    if scheme == "none":
        z, levels, a_eff = None, np.zeros(traces.n), 0.0
    elif scheme == "independent":
        z, levels = obfuscate_independent(traces, a_n, seed)
        a_eff = a_n
    elif scheme == "joint-decorrelating":
        if graph is None or joints is None:
            raise MechanismError("joint decorrelation needs the graph and the pair joints")
        z, levels = obfuscate_joint(traces, graph, joints, a_n, seed)
        a_eff = a_n
    else:
        raise MechanismError(f"unknown scheme {scheme!r}")
    perm = random_permutation(traces.n, seed)
    y = anonymize(z if z is not None else traces, perm)
    record = MechanismRecord(tuple(int(x) for x in perm), tuple(float(x) for x in levels), a_eff, scheme)
    return Protected(y, record, z)
