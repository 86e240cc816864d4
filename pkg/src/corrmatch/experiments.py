"""Monte Carlo harness: grid sweeps over m (and optionally a_n and n).

Every random draw in a trial comes from
``derive_seed(master, point, trial, attempt, stage)`` so trials can run in
any order, on any number of workers, and still give identical results.
Aggregates are built from integer counts plus per-trial floats summed in
trial order.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Sequence

import numpy as np


from .adversary import GROUP_RULES, AdversaryKnowledge, AttackConfig, edge_scores, run_attack, score_attack
from .errors import ConfigurationError, CouplingInfeasibleError, NoThreshold
from .mechanisms import SCHEMES, measure_noise, protect
from .population import (
    MODELS,
    TOPOLOGIES,
    DensitySpec,
    Population,
    UserProfile,
    build_group_graph,
    make_coupling,
    make_population,
)
from .seeding import derive_seed
from .tracegen import generate_traces

SCHEMA_VERSION = 1
MAX_RETRIES = 16
CSV_FIELDS = (
    "model", "n", "m", "s", "r", "a_n", "coupling", "trials", "success_rate",
    "pe_mean", "pe_lo", "pe_hi", "edge_precision", "edge_recall", "mean_noise", "seconds",
)


@dataclass(frozen=True)
class ExperimentSpec:
    model: str = "two-state"
    n: int = 200
    s: int = 2
    r: int = 2
    epsilon: float = 0.05
    strength: float = 1.0
    min_edge_cov: float = 0.0
    mu: float = 0.0
    structure: tuple[tuple[int, int], ...] | None = None
    mechanism: str = "none"
    a_n: float = 0.0
    m_grid: tuple[int, ...] = (1000,)
    a_n_grid: tuple[float, ...] | None = None
    n_grid: tuple[int, ...] | None = None
    trials: int = 10
    seed: int = 0
    tau: float | None = None
    group_rule: str = "assignment"
    topology: str = "chain"
    target_user: int = 0
    burn_in: int = 0
    fixed_params: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        for name in ("m_grid", "a_n_grid", "n_grid", "structure", "fixed_params"):
            val = getattr(self, name)
            if val is None:
                continue
            if name == "structure":
                val = tuple(tuple(int(x) for x in e) for e in val)
            elif name == "fixed_params":
                val = tuple(tuple(float(x) for x in np.atleast_1d(e)) for e in val)
            object.__setattr__(self, name, tuple(val))
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown model {self.model!r}")
        if self.mechanism not in SCHEMES:
            raise ConfigurationError(f"unknown mechanism {self.mechanism!r}")
        if self.topology not in TOPOLOGIES:
            raise ConfigurationError(f"unknown topology {self.topology!r}")
        if self.group_rule not in GROUP_RULES:
            raise ConfigurationError(f"unknown group rule {self.group_rule!r}")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if not self.m_grid or any(m < 2 for m in self.m_grid):
            raise ConfigurationError("m_grid must be nonempty with every m >= 2")
        if self.s < 1:
            raise ConfigurationError("s must be >= 1")
        for n in self.ns:
            if n % self.s:
                raise ConfigurationError(f"s = {self.s} does not divide n = {n}")
            if not 0 <= self.target_user < n:
                raise ConfigurationError(f"target_user {self.target_user} out of range for n = {n}")
        for a in self.a_ns:
            if not 0.0 <= a <= 1.0:
                raise ConfigurationError(f"a_n must lie in [0, 1], got {a}")
        if self.a_n_grid is not None and not self.a_n_grid:
            raise ConfigurationError("a_n_grid must be nonempty when given")
        if self.n_grid is not None and not self.n_grid:
            raise ConfigurationError("n_grid must be nonempty when given")
        self.density()  # validates model/r/epsilon/structure
        if self.fixed_params is not None:
            if self.model == "markov":
                raise ConfigurationError("fixed_params supports the i.i.d. models only")
            if any(len(self.fixed_params) != n for n in self.ns):
                raise ConfigurationError("fixed_params needs one parameter vector per user")

    @property
    def ns(self) -> tuple[int, ...]:
        return self.n_grid or (self.n,)

    @property
    def a_ns(self) -> tuple[float, ...]:
        return self.a_n_grid or (self.a_n,)

    @property
    def coupling(self) -> float:
        """Effective coupling: isolated users (s = 1) have none."""
        if self.s == 1:
            return 0.0
        return self.mu if self.model == "markov" else self.strength

    def density(self) -> DensitySpec:
        return DensitySpec(self.model, self.r, self.epsilon, self.structure)

    def points(self) -> list[tuple[int, float, int]]:
        """Grid points ``(n, a_n, m)``; m varies fastest."""
        return list(itertools.product(self.ns, self.a_ns, self.m_grid))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(e) if isinstance(e, tuple) else e for e in v]
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentSpec":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


@dataclass
class TrialResult:
    success: bool
    sample_errors: int
    precision: float
    recall: float
    noise: float


@dataclass
class PointResult:
    model: str
    n: int
    m: int
    s: int
    r: int
    a_n: float
    coupling: float
    trials: int
    success_rate: float
    pe_mean: float
    pe_lo: float
    pe_hi: float
    edge_precision: float
    edge_recall: float
    mean_noise: float
    seconds: float
    status: str = "ok"
    detail: str = ""

    @property
    def degenerate(self) -> bool:
        return self.status != "ok"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class SweepResult:
    spec: ExperimentSpec
    rows: list[PointResult] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return any(r.degenerate for r in self.rows)

    def to_csv(self, seconds: bool = True) -> str:
        buf = io.StringIO()
        cols = CSV_FIELDS if seconds else CSV_FIELDS[:-1]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.rows:
            d = row.to_dict()
            w.writerow([_fmt(d[c]) for c in cols])
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {"schema_version": SCHEMA_VERSION, "spec": self.spec.to_dict(),
                "rows": [{k: _json_value(v) for k, v in r.to_dict().items()} for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _json_value(v):
    # degenerate rows carry NaN statistics; JSON has no NaN
    return None if isinstance(v, float) and math.isnan(v) else v


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def wilson_interval(successes: int, total: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if total <= 0:
        raise ConfigurationError("Wilson interval needs total >= 1")
    if not 0 <= successes <= total:
        raise ConfigurationError("successes must lie in [0, total]")
    p = successes / total
    z2 = z * z
    denom = 1.0 + z2 / total
    centre = (p + z2 / (2 * total)) / denom
    half = z * math.sqrt(p * (1 - p) / total + z2 / (4 * total * total)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == total else min(1.0, centre + half)
    return lo, hi


def thread_count(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("CORRMATCH_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError as exc:
                raise ConfigurationError(f"CORRMATCH_THREADS must be an integer, got {env!r}") from exc
        else:
            threads = os.cpu_count() or 1
    return max(1, int(threads))


def _sample_population(spec: ExperimentSpec, density: DensitySpec, n: int, sizes: list[int],
                       point: int, trial: int) -> Population:
    coupled = spec.s > 1
    last: CouplingInfeasibleError | None = None
    for attempt in range(MAX_RETRIES):
        try:
            return make_population(n, density, sizes, spec.topology,
                                   spec.strength if coupled else 0.0, spec.mu if coupled else 0.0,
                                   spec.min_edge_cov if coupled else 0.0,
                                   derive_seed(spec.seed, point, trial, attempt, "population"))
        except CouplingInfeasibleError as exc:
            last = exc
    raise CouplingInfeasibleError(last.user if last else -1, f"{MAX_RETRIES} populations infeasible")


def _fixed_population(spec: ExperimentSpec, density: DensitySpec, sizes: list[int], seed: int) -> Population:
    graph = build_group_graph(sizes, spec.topology, seed)
    profiles = [UserProfile(u, p) for u, p in enumerate(spec.fixed_params)]
    strength = spec.strength if spec.s > 1 else 0.0
    pop = Population(density, tuple(profiles), graph, make_coupling(profiles, graph, density, strength, spec.mu))
    pop.check_coupling()
    return pop


def run_trial(spec: ExperimentSpec, point: int, trial: int, n: int, a_n: float, m: int) -> TrialResult:
    """One population, one trace matrix, one mechanism draw and one attack.

    Raises CouplingInfeasibleError once MAX_RETRIES fresh populations have
    all been infeasible.
    """
    density = spec.density()
    sizes = [spec.s] * (n // spec.s)
    if spec.fixed_params is not None:
        pop = _fixed_population(spec, density, sizes, derive_seed(spec.seed, point, trial, 0, "population"))
    else:
        pop = _sample_population(spec, density, n, sizes, point, trial)
    x = generate_traces(pop, m, derive_seed(spec.seed, point, trial, "traces"), spec.burn_in)
    joints = None
    if spec.mechanism == "joint-decorrelating":
        joints = {e: pop.pair_joint(*e) for e in pop.graph.edges}
    prot = protect(x, spec.mechanism, a_n, derive_seed(spec.seed, point, trial, "mechanism"), pop.graph, joints)
    knowledge = AdversaryKnowledge.from_population(pop, a_n if spec.mechanism != "none" else 0.0, spec.mechanism)
    outcome = run_attack(prot.observed, knowledge, spec.target_user, AttackConfig(spec.tau, spec.group_rule))
    score_attack(outcome, prot.record.permutation, x)
    precision, recall = edge_scores(outcome.edges, pop.graph.edges, prot.record.permutation)
    noise = measure_noise(x, prot.obfuscated)[1] if prot.obfuscated is not None else 0.0
    return TrialResult(bool(outcome.success), int(outcome.sample_errors), precision, recall, noise)


def run_point(spec: ExperimentSpec, point: int = 0, grid_point: tuple[int, float, int] | None = None,
              threads: int | None = None) -> PointResult:
    """Run ``spec.trials`` independent trials at one grid point."""
    if grid_point is None:
        grid_point = spec.points()[point]
    n, a_n, m = grid_point
    started = time.perf_counter()
    workers = min(thread_count(threads), spec.trials)
    trial_ids = range(spec.trials)

    def one(t):
        return run_trial(spec, point, t, n, a_n, m)

    base = dict(model=spec.model, n=n, m=m, s=spec.s, r=spec.r, a_n=float(a_n),
                coupling=float(spec.coupling), trials=spec.trials)
    try:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(one, trial_ids))
        else:
            results = [one(t) for t in trial_ids]
    except CouplingInfeasibleError as exc:
        nan = float("nan")
        return PointResult(**base, success_rate=nan, pe_mean=nan, pe_lo=nan, pe_hi=nan,
                           edge_precision=nan, edge_recall=nan, mean_noise=nan,
                           seconds=time.perf_counter() - started, status="degenerate", detail=str(exc))
    successes = sum(r.success for r in results)
    errors = sum(r.sample_errors for r in results)
    total = spec.trials * m
    lo, hi = wilson_interval(errors, total)
    return PointResult(
        **base,
        success_rate=successes / spec.trials,
        pe_mean=errors / total,
        pe_lo=lo,
        pe_hi=hi,
        edge_precision=math.fsum(r.precision for r in results) / spec.trials,
        edge_recall=math.fsum(r.recall for r in results) / spec.trials,
        mean_noise=math.fsum(r.noise for r in results) / spec.trials,
        seconds=time.perf_counter() - started,
    )


def sweep(spec: ExperimentSpec, threads: int | None = None) -> SweepResult:
    """Evaluate every grid point in grid order."""
    result = SweepResult(spec)
    for i, gp in enumerate(spec.points()):
        result.rows.append(run_point(spec, i, gp, threads))
    return result


def detect_threshold(rows: Sequence[Any], level: float = 0.5) -> float:
    """Observation count where success first crosses ``level``.

    Linear interpolation in log m between the bracketing rows.  ``rows`` are
    PointResults or mappings with ``m`` and ``success_rate``.
    """
    pts = [(_get(r, "m"), _get(r, "success_rate")) for r in rows]
    if len(pts) < 2:
        raise ConfigurationError("detect_threshold needs at least two rows")
    ms = [m for m, _ in pts]
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigurationError("rows must be sorted by strictly increasing m")
    if pts[0][1] >= level:
        raise NoThreshold(f"success already >= {level} at the smallest m")
    for (m0, s0), (m1, s1) in zip(pts, pts[1:]):
        if s0 < level <= s1:
            frac = (level - s0) / (s1 - s0)
            return float(math.exp(math.log(m0) + frac * (math.log(m1) - math.log(m0))))
    raise NoThreshold(f"success never reaches {level}")


def _get(row, key):
    return row[key] if isinstance(row, dict) else getattr(row, key)
