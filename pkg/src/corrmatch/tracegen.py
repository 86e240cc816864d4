"""Synthetic trace matrices with group-structured inter-user dependence.

I.i.d. models use a latent-mixture coupling: inside a group a latent symbol
``W(k)`` is drawn at every time step and user ``u`` copies it with
probability ``lam_u``, otherwise draws from a residual law chosen so that
the user's marginal is exactly its profile.

Markov users have no closed-form joint model to copy from, so groups share
randomness instead.  At each step, with probability ``mu`` every member
drives its inverse-CDF transition draw with the same uniform variate.  Each
member's own transition law is untouched, but shared variates make members
dependent.

Every group draws from its own stream ``derive_seed(seed, "group", g)``,
so the output does not depend on the order groups are generated in.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .population import Population, residual_distribution, stationary_distribution
from .seeding import rng_for

MAGIC = b"CMTR"
_HEADER = struct.Struct("<4sIIBB")


class Stage(enum.IntEnum):
    TRUE = 0
    OBFUSCATED = 1
    ANONYMIZED = 2


_ALLOWED = {
    Stage.TRUE: {Stage.OBFUSCATED, Stage.ANONYMIZED},
    Stage.OBFUSCATED: {Stage.ANONYMIZED},
    Stage.ANONYMIZED: set(),
}


@dataclass(frozen=True, eq=False)
class TraceMatrix:
    """m x n matrix of symbols in ``0..r-1`` tagged with its pipeline stage."""

    data: np.ndarray
    r: int
    stage: Stage = Stage.TRUE

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ConfigurationError(f"trace data must be 2-D, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() >= self.r):
            raise ConfigurationError(f"trace symbols must lie in 0..{self.r - 1}")
        data = data.astype(np.uint8, copy=False)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stage", Stage(self.stage))

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    def advance(self, data: np.ndarray, stage: Stage) -> "TraceMatrix":
        """New matrix at a later stage; enforces TRUE -> OBFUSCATED -> ANONYMIZED."""
        if Stage(stage) not in _ALLOWED[self.stage]:
            raise ConfigurationError(f"illegal stage transition {self.stage.name} -> {Stage(stage).name}")
        return TraceMatrix(data, self.r, stage)

    def __eq__(self, other):
        if not isinstance(other, TraceMatrix):
            return NotImplemented
        return self.r == other.r and self.stage == other.stage and np.array_equal(self.data, other.data)

    __hash__ = None

    # -- serialization -------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("k," + ",".join(f"u{u}" for u in range(self.n)) + "\n")
        k = np.arange(self.m)[:, None]
        np.savetxt(buf, np.hstack([k, self.data.astype(np.int64)]), fmt="%d", delimiter=",")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, r: int | None = None, stage: Stage = Stage.TRUE) -> "TraceMatrix":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("k"):
            raise ConfigurationError("trace CSV must start with a 'k,u0,...' header")
        header = lines[0].split(",")
        n = len(header) - 1
        if len(lines) == 1:
            data = np.zeros((0, n), dtype=np.uint8)
        else:
            rows = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", dtype=np.int64, ndmin=2)
            data = rows[:, 1:]
        if r is None:
            r = max(2, int(data.max()) + 1) if data.size else 2
        return cls(data, r, stage)

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.m, self.n, self.r, int(self.stage)) + np.ascontiguousarray(self.data).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TraceMatrix":
        if len(blob) < _HEADER.size:
            raise ConfigurationError("truncated CMTR header")
        magic, m, n, r, stage = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ConfigurationError(f"bad magic {magic!r}")
        body = blob[_HEADER.size:]
        if len(body) != m * n:
            raise ConfigurationError(f"CMTR body has {len(body)} bytes, expected {m * n}")
        return cls(np.frombuffer(body, dtype=np.uint8).reshape(m, n).copy(), r, Stage(stage))


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cdf[..., -1] is forced to 1 so u in [0, 1) never overflows the alphabet
    return (cdf <= u[..., None]).sum(axis=-1)


def _cdf(dist: np.ndarray) -> np.ndarray:
    c = np.cumsum(dist, axis=-1)
    c[..., -1] = 1.0
    return c


def generate_iid_traces(pop: Population, m: int, seed: int) -> TraceMatrix:
    """Draw ``m`` i.i.d. time steps for every user (two-state or r-state)."""
    if pop.model == "markov":
        raise ConfigurationError("use generate_markov_traces for the markov model")
    if m < 0:
        raise ConfigurationError("m must be >= 0")
    pop.check_coupling()
    data = np.empty((m, pop.n), dtype=np.uint8)
    marg = pop.marginals()
    for gi, group in enumerate(pop.graph.groups):
        rng = rng_for(seed, "group", gi)
        coupled = len(group) > 1 and any(pop.lam(u) > 0 for u in group)
        if coupled:
            w = pop.latent(gi)
            w_dist = np.array([1 - w, w]) if pop.model == "two-state" else np.asarray(w)
            latent = _inverse_cdf(_cdf(w_dist), rng.random(m))
        for u in group:
            lam = pop.lam(u) if coupled else 0.0
            if lam > 0:
                q = residual_distribution(marg[u], w_dist, lam, u)
                copy = rng.random(m) < lam
                own = _inverse_cdf(_cdf(q), rng.random(m))
                data[:, u] = np.where(copy, latent, own)
            else:
                data[:, u] = _inverse_cdf(_cdf(marg[u]), rng.random(m))
    return TraceMatrix(data, pop.r, Stage.TRUE)


def generate_markov_traces(pop: Population, m: int, burn_in: int = 0, seed: int = 0) -> TraceMatrix:
    """Run every user's chain for ``m`` steps.

    With ``burn_in == 0`` chains start from their stationary law; otherwise
    from a uniformly random state, discarding the first ``burn_in`` steps.
    """
    if pop.model != "markov":
        raise ConfigurationError("generate_markov_traces needs the markov model")
    if m < 0 or burn_in < 0:
        raise ConfigurationError("m and burn_in must be >= 0")
    n, r, mu = pop.n, pop.r, pop.coupling.mu
    total = m + burn_in
    cdfs = np.array([_cdf(np.array(p.matrix)) for p in pop.profiles])  # n x r x r
    # column 0 of u drives the start draw, column k the step k-1 -> k
    u_all = np.empty((max(total, 1), n))
    for gi, group in enumerate(pop.graph.groups):
        rng = rng_for(seed, "group", gi)
        idx = list(group)
        shared = rng.random(total) < mu
        common = rng.random(total)
        private = rng.random((total, len(idx)))
        u_all[:total, idx] = np.where(shared[:, None], common[:, None], private)
    data = np.empty((m, n), dtype=np.uint8)
    if total == 0:
        return TraceMatrix(data, r, Stage.TRUE)
    if burn_in == 0:
        start_cdf = np.array([_cdf(stationary_distribution(np.array(p.matrix))) for p in pop.profiles])
        state = _inverse_cdf(start_cdf, u_all[0])
    else:
        state = np.minimum((u_all[0] * r).astype(np.int64), r - 1)
    users = np.arange(n)
    if burn_in == 0:
        data[0] = state
    for t in range(1, total):
        state = _inverse_cdf(cdfs[users, state], u_all[t])
        if t >= burn_in:
            data[t - burn_in] = state
    return TraceMatrix(data, r, Stage.TRUE)


def generate_traces(pop: Population, m: int, seed: int, burn_in: int = 0) -> TraceMatrix:
    if pop.model == "markov":
        return generate_markov_traces(pop, m, burn_in, seed)
    return generate_iid_traces(pop, m, seed)
