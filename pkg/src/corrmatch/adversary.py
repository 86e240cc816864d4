"""Statistical-matching adversary.

The attack on a target user runs in three stages over the anonymized
matrix ``Y``:

1. rebuild the association graph between pseudonyms from pairwise
   dependence (|covariance| for binary data, plug-in mutual information
   otherwise) and split it into connected components;
2. find the component that carries the target's group by comparing sorted
   fingerprints with the known sorted profiles of the group;
3. assign the group's members to the component's pseudonyms with an exact
   minimum-cost matching, then read the target's samples off its pseudonym.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import AttackFailed, ConfigurationError
from .population import AssociationGraph, DensitySpec, Population, connected_components
from .tracegen import Stage, TraceMatrix

GROUP_RULES = ("assignment", "nearest")
ENUMERATION_LIMIT = 8
_TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class AdversaryKnowledge:
    """Everything the adversary is allowed to know.

    Profiles and the association graph, plus the mechanism descriptors.  No
    permutation, no realized noise levels, no coupling parameters.
    """

    density: DensitySpec
    profiles: np.ndarray  # n x d free parameters
    graph: AssociationGraph
    a_n: float = 0.0
    scheme: str = "none"

    @property
    def n(self) -> int:
        return self.graph.n

    @classmethod
    def from_population(cls, pop: Population, a_n: float = 0.0, scheme: str = "none") -> "AdversaryKnowledge":
        return cls(pop.density, pop.param_matrix(), pop.graph, a_n, scheme)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": 1,
            "density": self.density.to_dict(),
            "profiles": self.profiles.tolist(),
            "groups": [list(g) for g in self.graph.groups],
            "edges": [list(e) for e in sorted(self.graph.edges)],
            "a_n": self.a_n,
            "scheme": self.scheme,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AdversaryKnowledge":
        try:
            density = DensitySpec.from_dict(d["density"])
            profiles = np.array(d["profiles"], dtype=float).reshape(len(d["profiles"]), density.dim)
            graph = AssociationGraph(
                len(profiles),
                frozenset((min(i, j), max(i, j)) for i, j in d.get("edges", [])),
                tuple(tuple(sorted(g)) for g in d["groups"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed knowledge document: {exc!r}") from exc
        return cls(density, profiles, graph, float(d.get("a_n", 0.0)), d.get("scheme", "none"))


# --------------------------------------------------------------------------- #
# fingerprints
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class Fingerprints:
    """Per-pseudonym empirical statistics, row ``v`` for pseudonym ``v``.

    ``complete[v]`` is False when some markov coordinate is undefined (its
    source state was never left); those coordinates are NaN.
    """

    vectors: np.ndarray
    complete: np.ndarray


def transition_counts(data: np.ndarray, r: int) -> np.ndarray:
    """n x r x r counts of observed transitions ``i -> j`` per column."""
    m, n = data.shape
    if m < 2:
        return np.zeros((n, r, r), dtype=np.int64)
    a = data[:-1].astype(np.int64)
    b = data[1:].astype(np.int64)
    code = (np.arange(n)[None, :] * r + a) * r + b
    return np.bincount(code.ravel(), minlength=n * r * r).reshape(n, r, r)


def fingerprint(y: TraceMatrix, density: DensitySpec) -> Fingerprints:
    """Empirical frequencies (i.i.d.) or free transition frequencies (markov)."""
    if y.m == 0:
        raise ConfigurationError("cannot fingerprint an empty trace (m = 0)")
    data = y.data
    if density.kind != "markov":
        vec = np.stack([(data == s).mean(axis=0) for s in range(1, density.r)], axis=1)
        return Fingerprints(vec, np.ones(y.n, dtype=bool))
    counts = transition_counts(data, density.r)
    # denominator is the number of visits to i, final sample included
    visits = np.stack([(data == i).sum(axis=0) for i in range(density.r)], axis=1)
    idx = density.free_index()
    vec = np.full((y.n, len(idx)), np.nan)
    for c, (i, j) in enumerate(idx):
        ok = visits[:, i] > 0
        vec[ok, c] = counts[ok, i, j] / visits[ok, i]
    return Fingerprints(vec, ~np.isnan(vec).any(axis=1))


# --------------------------------------------------------------------------- #
# association graph
# --------------------------------------------------------------------------- #


def default_tau(m: int) -> float:
    return float(m) ** (-1.0 / 3.0)


def pairwise_covariance(data: np.ndarray) -> np.ndarray:
    x = data.astype(float)
    x -= x.mean(axis=0)
    return (x.T @ x) / x.shape[0]


def pairwise_mutual_information(data: np.ndarray, r: int) -> np.ndarray:
    """n x n plug-in mutual information (bits) of synchronized samples."""
    m, n = data.shape
    onehot = np.zeros((m, n * r))
    onehot[np.arange(m)[:, None], np.arange(n)[None, :] * r + data.astype(np.int64)] = 1.0
    joint = (onehot.T @ onehot / m).reshape(n, r, n, r).transpose(0, 2, 1, 3)  # [i, j, a, b]
    marg = onehot.mean(axis=0).reshape(n, r)
    prod = marg[:, None, :, None] * marg[None, :, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(joint > 0, joint * np.log2(joint / prod), 0.0)
    return terms.sum(axis=(2, 3))


def reconstruct_graph(y: TraceMatrix, tau: float | None = None, kind: str = "two-state") -> frozenset[tuple[int, int]]:
    """Edges ``(v, w)``, ``v < w``, between pseudonyms with dependence above ``tau``.

    Binary data uses |empirical covariance|; r-state and markov data use the
    plug-in mutual information.  ``tau`` defaults to ``m ** (-1/3)``.
    """
    if y.m < 2:
        raise ConfigurationError("graph reconstruction needs m >= 2")
    tau = default_tau(y.m) if tau is None else tau
    if kind == "two-state":
        stat = np.abs(pairwise_covariance(y.data))
    else:
        stat = pairwise_mutual_information(y.data, y.r)
    iu, ju = np.nonzero(np.triu(stat > tau, k=1))
    return frozenset(zip(iu.tolist(), ju.tolist()))


# --------------------------------------------------------------------------- #
# matching
# --------------------------------------------------------------------------- #


def sorted_stack(vectors: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically, then flattened (NaN sorts last)."""
    v = np.asarray(vectors, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    keys = np.where(np.isnan(v), np.inf, v)
    order = np.lexsort(keys.T[::-1])
    return v[order].ravel()


def _sq_dist(a: np.ndarray, b: np.ndarray) -> float:
    d = (a - b) ** 2
    return float(np.nansum(d))


def match_group(target_profiles: np.ndarray, components: Sequence[Sequence[int]], fps: np.ndarray) -> tuple[int, ...]:
    """Nearest size-s component to the target group's sorted profile.

    Raises AttackFailed if no component has the target group's size.
    """
    target = np.asarray(target_profiles, dtype=float)
    s = target.shape[0]
    sig = sorted_stack(target)
    best, best_d = None, np.inf
    for comp in components:
        if len(comp) != s:
            continue
        d = _sq_dist(sorted_stack(fps[list(comp)]), sig)
        if d < best_d:
            best, best_d = tuple(comp), d
    if best is None:
        raise AttackFailed(f"no reconstructed component of size {s}")
    return best


def assign_groups(group_profiles: Sequence[np.ndarray], components: Sequence[Sequence[int]],
                  fps: np.ndarray) -> dict[int, tuple[int, ...]]:
    """Jointly match known groups to same-size components.

    Minimizes the total squared Euclidean distance between sorted profile
    and sorted fingerprint signatures over all groups at once (groups and
    components must share one size).  Returns ``{group index: component}``
    for every group that received a component.
    """
    if not group_profiles or not components:
        return {}
    G = np.array([sorted_stack(p) for p in group_profiles])
    C = np.array([sorted_stack(fps[list(c)]) for c in components])
    diff = G[:, None, :] - C[None, :, :]
    cost = np.nansum(diff * diff, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return {int(r_): tuple(components[c_]) for r_, c_ in zip(rows, cols)}


def _pair_distances(profiles: np.ndarray, fps: np.ndarray) -> np.ndarray:
    p = np.asarray(profiles, dtype=float).reshape(len(profiles), -1)
    f = np.asarray(fps, dtype=float).reshape(len(fps), -1)
    diff = p[:, None, :] - f[None, :, :]
    return np.sqrt(np.nansum(diff * diff, axis=2))


def match_members(group_profiles: np.ndarray, fps: np.ndarray) -> tuple[tuple[int, ...], bool]:
    """Minimum total-distance bijection between users and pseudonyms.

    Returns ``(assign, ambiguous)`` where user ``a`` of the group receives
    fingerprint row ``assign[a]``.  Exhaustive for s <= 8 (first optimal
    permutation in lexicographic order wins ties), Hungarian above that.
    """
    cost = _pair_distances(group_profiles, fps)
    s = cost.shape[0]
    if cost.shape != (s, s):
        raise ConfigurationError(f"size mismatch: {cost.shape[0]} users vs {cost.shape[1]} pseudonyms")
    if s <= ENUMERATION_LIMIT:
        perms = np.array(list(itertools.permutations(range(s))), dtype=np.int64).reshape(-1, s)
        totals = cost[np.arange(s)[None, :], perms].sum(axis=1)
        k = int(np.argmin(totals))
        ambiguous = int(np.sum(totals <= totals[k] + _TIE_TOL)) > 1
        return tuple(int(x) for x in perms[k]), ambiguous
    rows, cols = linear_sum_assignment(cost)
    return tuple(int(c) for c in cols[np.argsort(rows)]), False


# --------------------------------------------------------------------------- #
# full attack
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class AttackConfig:
    """``tau=None`` means ``m ** (-1/3)``; ``group_rule`` picks step 2."""

    tau: float | None = None
    group_rule: str = "assignment"

    def __post_init__(self):
        if self.group_rule not in GROUP_RULES:
            raise ConfigurationError(f"unknown group rule {self.group_rule!r}")


@dataclass
class AttackOutcome:
    target_user: int
    m: int
    edges: frozenset[tuple[int, int]]
    group: tuple[int, ...] = ()
    ident: dict[int, int] = field(default_factory=dict)
    estimate: np.ndarray | None = None
    ambiguous: bool = False
    failed: bool = False
    reason: str = ""
    success: bool | None = None
    sample_errors: int | None = None

    def pseudonym_of(self, user: int) -> int | None:
        for pseud, u in self.ident.items():
            if u == user:
                return pseud
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "edges": [list(e) for e in sorted(self.edges)],
            "group": list(self.group),
            "ident": {str(k): v for k, v in sorted(self.ident.items())},
            "success": self.success,
            "sample_errors": self.sample_errors,
            "m": self.m,
            "target_user": self.target_user,
            "failed": self.failed,
            "ambiguous": self.ambiguous,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def run_attack(y: TraceMatrix, knowledge: AdversaryKnowledge, target_user: int = 0,
               config: AttackConfig | None = None) -> AttackOutcome:
    """Identify the target's group and members, then estimate its samples.

    Never raises on bad data: failures come back as ``failed=True``.
    """
    config = config or AttackConfig()
    if y.stage != Stage.ANONYMIZED:
        raise ConfigurationError("the adversary only sees ANONYMIZED traces")
    if y.n != knowledge.n:
        raise ConfigurationError(f"knowledge covers {knowledge.n} users, traces have {y.n}")
    density = knowledge.density
    fps = fingerprint(y, density).vectors
    edges = reconstruct_graph(y, config.tau, density.kind)
    outcome = AttackOutcome(target_user, y.m, edges)
    components = connected_components(y.n, edges)
    members = knowledge.graph.group_of(target_user)
    s = len(members)
    try:
        if config.group_rule == "nearest":
            comp = match_group(knowledge.profiles[list(members)], components, fps)
        else:
            groups = [g for g in knowledge.graph.groups if len(g) == s]
            comps = [c for c in components if len(c) == s]
            if not comps:
                raise AttackFailed(f"no reconstructed component of size {s}")
            chosen = assign_groups([knowledge.profiles[list(g)] for g in groups], comps, fps)
            gi = groups.index(members)
            if gi not in chosen:
                raise AttackFailed("target group left unassigned")
            comp = chosen[gi]
    except AttackFailed as exc:
        outcome.failed, outcome.reason = True, str(exc)
        return outcome
    assign, ambiguous = match_members(knowledge.profiles[list(members)], fps[list(comp)])
    outcome.group = comp
    outcome.ident = {comp[assign[a]]: u for a, u in enumerate(members)}
    outcome.ambiguous = ambiguous
    outcome.estimate = y.data[:, outcome.pseudonym_of(target_user)].copy()
    return outcome


def score_attack(outcome: AttackOutcome, permutation, x_true: TraceMatrix) -> AttackOutcome:
    """Fill ``success`` and ``sample_errors`` from the sealed ground truth.

    A failed attack counts every sample of the target as an error.
    """
    perm = np.asarray(permutation)
    if outcome.failed or outcome.estimate is None:
        outcome.success = False
        outcome.sample_errors = int(x_true.m)
        return outcome
    outcome.success = all(perm[u] == p for p, u in outcome.ident.items())
    outcome.sample_errors = int(np.sum(outcome.estimate != x_true.data[:, outcome.target_user]))
    return outcome


def edge_scores(found: frozenset[tuple[int, int]], true_edges, permutation) -> tuple[float, float]:
    """Precision and recall of reconstructed pseudonym edges (1.0 when vacuous)."""
    perm = np.asarray(permutation)
    truth = {(min(perm[i], perm[j]), max(perm[i], perm[j])) for i, j in true_edges}
    truth = {(int(a), int(b)) for a, b in truth}
    hit = len(truth & set(found))
    precision = hit / len(found) if found else 1.0
    recall = hit / len(truth) if truth else 1.0
    return precision, recall
