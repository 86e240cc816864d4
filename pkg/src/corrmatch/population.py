"""User profiles, association graphs and the hidden coupling parameters.

A :class:`Population` bundles everything the trace generator needs: one
statistical profile per user, the group-structured association graph and
the coupling that makes users inside a group dependent.  Only the profiles
and the graph are later handed to the adversary.

Profiles are drawn uniformly on an epsilon-truncated support:

* two-state: ``p_u ~ U(eps, 1 - eps)``;
* r-state: ``(p_u(0), ..., p_u(r-1)) = eps + (1 - r*eps) * Dirichlet(1, ..., 1)``,
  stored as the free vector ``(p_u(1), ..., p_u(r-1))``;
* markov: every row of the transition matrix is drawn the same way over the
  out-edges of that state in the transition structure ``F``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, CouplingInfeasibleError
from .seeding import rng_for

MODELS = ("two-state", "r-state", "markov")
TOPOLOGIES = ("chain", "complete")
DEFAULT_EPSILON = 0.05
# per-group bound on rejection resampling when a minimum edge covariance is requested
MAX_GROUP_RESAMPLES = 16
SCHEMA_VERSION = 1


# --------------------------------------------------------------------------- #
# density / structure
# --------------------------------------------------------------------------- #


def _bool_matpow(a: np.ndarray, k: int) -> np.ndarray:
    out = np.eye(a.shape[0], dtype=np.int64)
    base = a.astype(np.int64)
    while k:
        if k & 1:
            out = np.minimum(out @ base, 1)
        base = np.minimum(base @ base, 1)
        k >>= 1
    return out


def check_chain_structure(r: int, edges: Iterable[tuple[int, int]]) -> None:
    """Raise ConfigurationError unless ``edges`` is irreducible and aperiodic."""
    adj = np.zeros((r, r), dtype=np.int64)
    for i, j in edges:
        if not (0 <= i < r and 0 <= j < r):
            raise ConfigurationError(f"transition edge {(i, j)} outside {r} states")
        adj[i, j] = 1
    missing = [i for i in range(r) if not adj[i].any()]
    if missing:
        raise ConfigurationError(f"states without outgoing edge: {missing}")
    reach = _bool_matpow(adj + np.eye(r, dtype=np.int64), r - 1)
    if not reach.all():
        raise ConfigurationError("transition structure is reducible")
    # Wielandt: an irreducible pattern is primitive iff A^((r-1)^2+1) > 0
    if not _bool_matpow(adj, (r - 1) ** 2 + 1).all():
        raise ConfigurationError("transition structure is periodic")


@dataclass(frozen=True)
class DensitySpec:
    """Profile density: uniform on the epsilon-truncated support of ``kind``.

    ``structure`` is the transition edge set F (markov only); it is stored
    sorted so that the free-parameter ordering is canonical.
    """

    kind: str = "two-state"
    r: int = 2
    epsilon: float = DEFAULT_EPSILON
    structure: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.kind not in MODELS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if int(self.r) != self.r or self.r < 2:
            raise ConfigurationError(f"r must be an integer >= 2, got {self.r}")
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigurationError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        if self.kind == "two-state" and self.r != 2:
            raise ConfigurationError("two-state model requires r = 2")
        if self.kind == "r-state" and self.r * self.epsilon >= 1.0:
            raise ConfigurationError("r * epsilon must be < 1")
        if self.kind == "markov":
            if self.structure is None:
                edges = tuple((i, j) for i in range(self.r) for j in range(self.r))
            else:
                edges = tuple(sorted({(int(i), int(j)) for i, j in self.structure}))
            object.__setattr__(self, "structure", edges)
            check_chain_structure(self.r, edges)
            for i in range(self.r):
                if len(self.out_edges(i)) * self.epsilon >= 1.0:
                    raise ConfigurationError(f"state {i}: out-degree * epsilon must be < 1")
        elif self.structure is not None:
            raise ConfigurationError("structure is only meaningful for the markov model")

    def out_edges(self, state: int) -> list[int]:
        assert self.structure is not None
        return [j for i, j in self.structure if i == state]

    @property
    def dim(self) -> int:
        """Length of the free-parameter (fingerprint) vector."""
        if self.kind == "markov":
            return len(self.structure) - self.r
        return self.r - 1

    def free_index(self) -> list[tuple[int, int]]:
        """Transition (i, j) behind each free coordinate, row-major over F
        with the last out-edge of every state dropped."""
        idx = []
        for i in range(self.r):
            idx.extend((i, j) for j in self.out_edges(i)[:-1])
        return idx

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "r": self.r, "epsilon": self.epsilon}
        if self.structure is not None:
            d["structure"] = [list(e) for e in self.structure]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DensitySpec":
        structure = d.get("structure")
        return cls(
            kind=d.get("kind", "two-state"),
            r=int(d.get("r", 2)),
            epsilon=float(d.get("epsilon", DEFAULT_EPSILON)),
            structure=None if structure is None else tuple(tuple(e) for e in structure),
        )


# --------------------------------------------------------------------------- #
# profiles
# --------------------------------------------------------------------------- #


def stationary_distribution(matrix: np.ndarray, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary law of an irreducible chain by lazy power iteration.

    Iterates ``pi <- (pi + pi P) / 2``; the lazy chain is aperiodic, so this
    converges even for periodic ``P``.
    """
    P = np.asarray(matrix, dtype=float)
    pi = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iter):
        nxt = 0.5 * (pi + pi @ P)
        if np.max(np.abs(nxt - pi)) < tol * 1e-2:
            pi = nxt
            break
        pi = nxt
    return pi / pi.sum()


@dataclass(frozen=True)
class UserProfile:
    """Statistical profile of one user.

    ``params`` is the free-parameter vector the adversary matches against:
    ``(p_u,)`` for two-state, ``(p_u(1), ..., p_u(r-1))`` for r-state, and
    the d = |F| - r free transition probabilities for markov, in which case
    ``matrix`` holds the full row-stochastic transition matrix.
    """

    user_id: int
    params: tuple[float, ...]
    matrix: tuple[tuple[float, ...], ...] | None = None

    @property
    def p(self) -> float:
        return self.params[0]

    def distribution(self) -> np.ndarray:
        """Single-time symbol distribution (stationary law for markov)."""
        if self.matrix is not None:
            return stationary_distribution(np.array(self.matrix))
        rest = np.array(self.params)
        return np.concatenate([[1.0 - rest.sum()], rest])


def free_params(matrix: np.ndarray, density: DensitySpec) -> tuple[float, ...]:
    """Free-parameter vector of a transition matrix (inverse of the row fill)."""
    return tuple(float(matrix[i, j]) for i, j in density.free_index())


def _truncated_simplex(rng: np.random.Generator, k: int, eps: float, size: int) -> np.ndarray:
    return eps + (1.0 - k * eps) * rng.dirichlet(np.ones(k), size=size)


def _draw_profiles(density: DensitySpec, ids: Sequence[int], rng: np.random.Generator) -> list[UserProfile]:
    eps = density.epsilon
    k = len(ids)
    if density.kind == "two-state":
        ps = rng.uniform(eps, 1.0 - eps, size=k)
        return [UserProfile(u, (float(p),)) for u, p in zip(ids, ps)]
    if density.kind == "r-state":
        dist = _truncated_simplex(rng, density.r, eps, k)
        return [UserProfile(u, tuple(float(x) for x in row[1:])) for u, row in zip(ids, dist)]
    r = density.r
    mats = np.zeros((k, r, r))
    for i in range(r):
        outs = density.out_edges(i)
        if len(outs) == 1:
            mats[:, i, outs[0]] = 1.0
        else:
            mats[:, i, outs] = _truncated_simplex(rng, len(outs), eps, k)
    return [
        UserProfile(u, free_params(P, density), tuple(tuple(float(x) for x in row) for row in P))
        for u, P in zip(ids, mats)
    ]


def sample_profiles(n: int, density: DensitySpec, seed: int) -> list[UserProfile]:
    """Draw ``n`` i.i.d. profiles uniformly on the truncated support."""
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    return _draw_profiles(density, range(n), rng_for(seed, "profiles"))


# --------------------------------------------------------------------------- #
# association graph
# --------------------------------------------------------------------------- #


def _components(n: int, edges: Iterable[tuple[int, int]]) -> list[tuple[int, ...]]:
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    e = np.array(list(edges), dtype=np.int64).reshape(-1, 2)
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    comps: dict[int, list[int]] = {}
    for u, lab in enumerate(labels):
        comps.setdefault(int(lab), []).append(u)
    return sorted(tuple(c) for c in comps.values())


def connected_components(n: int, edges: Iterable[tuple[int, int]]) -> list[tuple[int, ...]]:
    """Connected components of an undirected graph on ``0..n-1``, each sorted,
    listed in order of their smallest vertex."""
    return _components(n, edges)


@dataclass(frozen=True)
class AssociationGraph:
    """Undirected graph made of disjoint connected groups."""

    n: int
    edges: frozenset[tuple[int, int]]
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen = sorted(u for g in self.groups for u in g)
        if seen != list(range(self.n)):
            raise ConfigurationError("groups must partition 0..n-1")
        owner = self.group_index
        for i, j in self.edges:
            if not i < j:
                raise ConfigurationError(f"edge {(i, j)} must be ordered i < j")
            if owner[i] != owner[j]:
                raise ConfigurationError(f"edge {(i, j)} crosses groups")
        comps = set(_components(self.n, self.edges))
        for g in self.groups:
            if tuple(sorted(g)) not in comps:
                raise ConfigurationError(f"group {g} is not connected")

    @property
    def group_index(self) -> dict[int, int]:
        return {u: gi for gi, g in enumerate(self.groups) for u in g}

    def group_of(self, user: int) -> tuple[int, ...]:
        return self.groups[self.group_index[user]]

    @property
    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]


def build_group_graph(group_sizes: Sequence[int], topology: str = "chain", seed: int = 0) -> AssociationGraph:
    """Wire consecutive blocks of users into connected groups, then relabel
    users with a seeded shuffle."""
    if not group_sizes:
        raise ConfigurationError("group size list is empty")
    if any(s < 1 for s in group_sizes):
        raise ConfigurationError(f"group sizes must be >= 1: {list(group_sizes)}")
    if topology not in TOPOLOGIES:
        raise ConfigurationError(f"unknown topology {topology!r}")
    n = int(sum(group_sizes))
    label = rng_for(seed, "graph").permutation(n)
    groups, edges = [], set()
    start = 0
    for s in group_sizes:
        block = list(range(start, start + s))
        start += s
        if topology == "chain":
            pairs = zip(block, block[1:])
        else:
            pairs = itertools.combinations(block, 2)
        for a, b in pairs:
            i, j = int(label[a]), int(label[b])
            edges.add((min(i, j), max(i, j)))
        groups.append(tuple(sorted(int(label[u]) for u in block)))
    return AssociationGraph(n, frozenset(edges), tuple(groups))


# --------------------------------------------------------------------------- #
# coupling
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class CouplingSpec:
    """Hidden dependence parameters, never shown to the adversary.

    ``w[g]`` is the latent law of group ``g``: a success probability for
    two-state, a length-r distribution for r-state (unused for markov).
    ``lam[u]`` is the probability that user ``u`` copies the latent symbol,
    ``mu`` the probability that a markov group shares one uniform variate.
    """

    w: tuple
    lam: tuple[float, ...]
    mu: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mu < 1.0 + 1e-15:
            raise ConfigurationError(f"mu must lie in [0, 1], got {self.mu}")
        if any(not 0.0 <= x <= 1.0 for x in self.lam):
            raise ConfigurationError("lambda values must lie in [0, 1]")


def max_mixing(p: np.ndarray, w: np.ndarray) -> float:
    """Largest lambda with a valid residual: min over symbols of p(x)/w(x)."""
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore"):
        ratio = np.where(w > 0, p / np.where(w > 0, w, 1.0), np.inf)
    return float(min(1.0, ratio.min()))


def residual_distribution(p: np.ndarray, w: np.ndarray, lam: float, user: int = -1) -> np.ndarray:
    """Distribution ``q`` with ``lam * w + (1 - lam) * q == p``."""
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    if lam >= 1.0:
        if np.max(np.abs(p - w)) > 1e-12:
            raise CouplingInfeasibleError(user, "lambda = 1 requires the marginal to equal the latent law")
        return p.copy()
    q = (p - lam * w) / (1.0 - lam)
    if q.min() < -1e-12 or q.max() > 1.0 + 1e-12:
        raise CouplingInfeasibleError(user, f"residual {np.round(q, 6).tolist()} leaves [0, 1]")
    q = np.clip(q, 0.0, 1.0)
    return q / q.sum()


def _two_state_group(ps: Sequence[float], strength: float) -> tuple[float, list[float]]:
    w = float(np.mean(ps))
    lams = [strength * max_mixing([1 - p, p], [1 - w, w]) for p in ps]
    return w, lams


def pair_covariance(lam_i: float, lam_j: float, w: float) -> float:
    """Single-time covariance of two users sharing a Bernoulli(w) latent bit."""
    return lam_i * lam_j * w * (1.0 - w)


def make_coupling(profiles: Sequence[UserProfile], graph: AssociationGraph, density: DensitySpec,
                  strength: float = 0.0, mu: float = 0.0) -> CouplingSpec:
    """Coupling at ``strength`` times the largest feasible mixing.

    Two-state groups use the latent weight ``w = mean(p)``; with it every
    member's maximal lambda is at most 1 and, for a pair, ``strength = 1``
    reaches the Frechet upper covariance ``min(p)(1 - max(p))``.  R-state
    groups use the first member's marginal as latent law.
    """
    if not 0.0 <= strength <= 1.0:
        raise ConfigurationError(f"coupling strength must lie in [0, 1], got {strength}")
    lam = [0.0] * len(profiles)
    ws: list = []
    for g in graph.groups:
        if density.kind == "markov":
            ws.append(None)
            continue
        if density.kind == "two-state":
            w, lams = _two_state_group([profiles[u].p for u in g], strength)
            ws.append(w)
        else:
            w_dist = profiles[g[0]].distribution()
            ws.append(tuple(float(x) for x in w_dist))
            lams = [strength * max_mixing(profiles[u].distribution(), w_dist) for u in g]
        if len(g) > 1:
            for u, lu in zip(g, lams):
                lam[u] = float(lu)
    return CouplingSpec(tuple(ws), tuple(lam), float(mu))


# --------------------------------------------------------------------------- #
# population
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Population:
    density: DensitySpec
    profiles: tuple[UserProfile, ...]
    graph: AssociationGraph
    coupling: CouplingSpec = field(default_factory=lambda: CouplingSpec((), ()))

    def __post_init__(self):
        if len(self.profiles) != self.graph.n:
            raise ConfigurationError("profile count does not match the graph")
        if self.coupling.lam and len(self.coupling.lam) != self.graph.n:
            raise ConfigurationError("lambda vector does not match the graph")

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def model(self) -> str:
        return self.density.kind

    @property
    def r(self) -> int:
        return self.density.r

    def lam(self, u: int) -> float:
        return self.coupling.lam[u] if self.coupling.lam else 0.0

    def latent(self, group: int):
        return self.coupling.w[group] if self.coupling.w else None

    def param_matrix(self) -> np.ndarray:
        """n x d array of free parameters (the adversary's known profiles)."""
        return np.array([p.params for p in self.profiles], dtype=float).reshape(self.n, self.density.dim)

    def marginals(self) -> np.ndarray:
        """n x r single-time symbol distributions."""
        return np.array([p.distribution() for p in self.profiles])

    def edge_covariance(self, i: int, j: int) -> float:
        """Exact single-time covariance of two two-state users."""
        if self.model != "two-state":
            raise ConfigurationError("edge covariance is defined for the two-state model")
        gi = self.graph.group_index
        if gi[i] != gi[j]:
            return 0.0
        return pair_covariance(self.lam(i), self.lam(j), self.latent(gi[i]))

    def pair_joint(self, i: int, j: int) -> np.ndarray:
        """2 x 2 joint ``J[a, b] = P(X_i = a, X_j = b)`` (two-state)."""
        pi, pj = self.profiles[i].p, self.profiles[j].p
        p11 = pi * pj + self.edge_covariance(i, j)
        return np.array([[1 - pi - pj + p11, pj - p11], [pi - p11, p11]])

    def check_coupling(self) -> None:
        """Raise CouplingInfeasibleError naming the first infeasible user."""
        if self.model == "markov" or not self.coupling.lam:
            return
        for gi, g in enumerate(self.graph.groups):
            if all(self.lam(u) == 0 for u in g):
                continue
            w = self.latent(gi)
            w_dist = np.array([1 - w, w]) if self.model == "two-state" else np.array(w)
            for u in g:
                lam = self.lam(u)
                if lam > 0:
                    residual_distribution(self.profiles[u].distribution(), w_dist, lam, u)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        if self.model == "two-state":
            profiles: list = [p.p for p in self.profiles]
        elif self.model == "r-state":
            profiles = [list(p.params) for p in self.profiles]
        else:
            profiles = [[list(row) for row in p.matrix] for p in self.profiles]
        d = {
            "schema_version": SCHEMA_VERSION,
            "n": self.n,
            "model": self.model,
            "r": self.r,
            "epsilon": self.density.epsilon,
            "profiles": profiles,
            "groups": [list(g) for g in self.graph.groups],
            "edges": [list(e) for e in sorted(self.graph.edges)],
            "coupling": {
                "w": [list(w) if isinstance(w, tuple) else w for w in self.coupling.w],
                "lambda": list(self.coupling.lam),
                "mu": self.coupling.mu,
            },
        }
        if self.density.structure is not None:
            d["structure"] = [list(e) for e in self.density.structure]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Population":
        try:
            density = DensitySpec.from_dict({
                "kind": d["model"], "r": d.get("r", 2),
                "epsilon": d.get("epsilon", DEFAULT_EPSILON), "structure": d.get("structure"),
            })
            n = int(d["n"])
            raw = d["profiles"]
            if density.kind == "two-state":
                profiles = [UserProfile(u, (float(p),)) for u, p in enumerate(raw)]
            elif density.kind == "r-state":
                profiles = [UserProfile(u, tuple(map(float, p))) for u, p in enumerate(raw)]
            else:
                profiles = []
                for u, mat in enumerate(raw):
                    P = np.array(mat, dtype=float)
                    if np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
                        raise ConfigurationError(f"user {u}: transition rows must sum to 1")
                    profiles.append(UserProfile(u, free_params(P, density), tuple(map(tuple, P.tolist()))))
            graph = AssociationGraph(
                n,
                frozenset((min(i, j), max(i, j)) for i, j in d.get("edges", [])),
                tuple(tuple(sorted(g)) for g in d["groups"]),
            )
            c = d.get("coupling", {})
            w = tuple(tuple(x) if isinstance(x, list) else x for x in c.get("w", []))
            lam = tuple(float(x) for x in c.get("lambda", [0.0] * n))
            coupling = CouplingSpec(w, lam, float(c.get("mu", 0.0)))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed population document: {exc!r}") from exc
        return cls(density, tuple(profiles), graph, coupling)

    @classmethod
    def from_json(cls, text: str) -> "Population":
        return cls.from_dict(json.loads(text))


def make_population(
    n: int | None = None,
    density: DensitySpec | None = None,
    group_sizes: Sequence[int] | None = None,
    topology: str = "chain",
    strength: float = 0.0,
    mu: float = 0.0,
    min_edge_cov: float = 0.0,
    seed: int = 0,
) -> Population:
    """Sample profiles, the group graph and the coupling in one go.

    With ``min_edge_cov > 0`` (two-state only) every group whose edges do not
    all reach that covariance has its members' profiles redrawn, at most
    ``MAX_GROUP_RESAMPLES`` times, before CouplingInfeasibleError is raised.
    """
    density = density or DensitySpec()
    if group_sizes is None:
        if n is None:
            raise ConfigurationError("either n or group_sizes is required")
        group_sizes = [1] * n
    if n is not None and sum(group_sizes) != n:
        raise ConfigurationError(f"group sizes sum to {sum(group_sizes)}, expected n = {n}")
    graph = build_group_graph(group_sizes, topology, seed)
    profiles = sample_profiles(graph.n, density, seed)
    if min_edge_cov > 0:
        if density.kind != "two-state":
            raise ConfigurationError("min_edge_cov is supported for the two-state model only")
        profiles = list(profiles)
        for gi, g in enumerate(graph.groups):
            if len(g) < 2:
                continue
            edges = [e for e in graph.edges if e[0] in g]
            for attempt in range(MAX_GROUP_RESAMPLES + 1):
                ps = {u: profiles[u].p for u in g}
                w, lams = _two_state_group([ps[u] for u in g], strength)
                lam_of = dict(zip(g, lams))
                worst = min(pair_covariance(lam_of[i], lam_of[j], w) for i, j in edges)
                if worst >= min_edge_cov:
                    break
                if attempt == MAX_GROUP_RESAMPLES:
                    raise CouplingInfeasibleError(
                        g[0], f"group {gi} never reached edge covariance {min_edge_cov}"
                    )
                fresh = _draw_profiles(density, g, rng_for(seed, "resample", gi, attempt))
                for prof in fresh:
                    profiles[prof.user_id] = prof
    coupling = make_coupling(profiles, graph, density, strength, mu)
    pop = Population(density, tuple(profiles), graph, coupling)
    pop.check_coupling()
    return pop


def noise_level(n: int, s: int, c: float = 1.0, beta: float = 0.1, dof: int = 1) -> float:
    """``a_n = c * n^-(1/(s*dof) + beta)``; ``dof`` is r-1 or |F|-r."""
    return c * n ** -(1.0 / (s * dof) + beta)


def observation_count(n: int, s: int, c: float = 1.0, alpha: float = 0.1, dof: int = 1) -> int:
    """``m = c * n^(2/(s*dof) + alpha)`` rounded up."""
    return int(math.ceil(c * n ** (2.0 / (s * dof) + alpha)))
