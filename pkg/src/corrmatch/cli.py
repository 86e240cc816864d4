"""Command-line front end.

File layout keeps what the adversary may read apart from ground truth:

    gen     -> population.json (truth), traces.csv (truth), knowledge.json
    mech    -> observed.csv, knowledge.json | truth.json, truth_traces.csv
    attack  -> reads observed.csv + knowledge.json; truth only via --truth

Exit codes: 0 ok, 1 internal error, 2 configuration error, 3 degenerate or
failed experiment.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import oracle
from .adversary import AdversaryKnowledge, AttackConfig, edge_scores, run_attack, score_attack
from .errors import AttackFailed, CorrmatchError, CouplingInfeasibleError
from .experiments import ExperimentSpec, sweep
from .mechanisms import MechanismRecord, measure_noise, obfuscate_independent, protect
from .population import SCHEMA_VERSION, DensitySpec, Population, make_population
from .tracegen import Stage, TraceMatrix, generate_traces

log = logging.getLogger("corrmatch")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DEGENERATE = 0, 1, 2, 3


class ConfigError(Exception):
    """Bad user input; maps to exit code 2."""


class Degenerate(Exception):
    """The run completed but produced no usable result; exit code 3."""


# --------------------------------------------------------------------------- #
# file helpers
# --------------------------------------------------------------------------- #


def load_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    version = doc.get("schema_version", 1)
    if version != 1:
        raise ConfigError(f"{path}: unsupported schema_version {version}")
    return doc


class Writer:
    """Collects output files and writes them at the end, all or nothing."""

    def __init__(self, out: str | None, force: bool):
        self.out = Path(out) if out else None
        self.force = force
        self.files: dict[str, str | bytes] = {}

    def add(self, name: str, content: str | bytes) -> None:
        self.files[name] = content

    def commit(self) -> list[Path]:
        if self.out is None:
            return []
        targets = [self.out / name for name in self.files]
        clash = [str(p) for p in targets if p.exists()]
        if clash and not self.force:
            raise ConfigError(f"refusing to overwrite {', '.join(clash)} (use --force)")
        self.out.mkdir(parents=True, exist_ok=True)
        for (name, content), path in zip(self.files.items(), targets):
            if isinstance(content, bytes):
                path.write_bytes(content)
            else:
                path.write_text(content)
            log.info("wrote %s", path)
        return targets


def read_traces(path: Path, stage: Stage, r: int | None = None) -> TraceMatrix:
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    return TraceMatrix.from_csv(text, r, stage)


def _require_dir(args) -> Path:
    if not args.input:
        raise ConfigError("--input is required")
    d = Path(args.input)
    if not d.is_dir():
        raise ConfigError(f"{d}: not a directory")
    return d


def _seed(args, cfg: dict[str, Any], default: int = 0) -> int:
    return int(args.seed) if args.seed is not None else int(cfg.get("seed", default))


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #

_POP_KEYS = {"schema_version", "model", "n", "r", "epsilon", "structure", "s", "group_sizes", "topology",
             "strength", "mu", "min_edge_cov", "m", "burn_in", "seed"}


def population_from_config(cfg: dict[str, Any], seed: int) -> Population:
    if "profiles" in cfg:
        return Population.from_dict(cfg)
    unknown = set(cfg) - _POP_KEYS
    if unknown:
        raise ConfigError(f"unknown population fields: {sorted(unknown)}")
    density = DensitySpec(cfg.get("model", "two-state"), cfg.get("r", 2), cfg.get("epsilon", 0.05),
                          cfg.get("structure"))
    sizes = cfg.get("group_sizes")
    n = cfg.get("n")
    if sizes is None:
        if n is None:
            raise ConfigError("population config needs n or group_sizes")
        s = int(cfg.get("s", 1))
        if s < 1 or n % s:
            raise ConfigError(f"s = {s} must divide n = {n}")
        sizes = [s] * (n // s)
    return make_population(n, density, sizes, cfg.get("topology", "chain"), cfg.get("strength", 0.0),
                           cfg.get("mu", 0.0), cfg.get("min_edge_cov", 0.0), seed)


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    pop = population_from_config(cfg, seed)
    m = int(args.m if args.m is not None else cfg.get("m", 1000))
    x = generate_traces(pop, m, seed, int(cfg.get("burn_in", 0)))
    out = Writer(args.out, args.force)
    out.add("population.json", pop.to_json() + "\n")
    out.add("traces.csv", x.to_csv())
    out.add("knowledge.json", AdversaryKnowledge.from_population(pop).to_json() + "\n")
    out.commit()
    print(f"population n={pop.n} model={pop.model} groups={len(pop.graph.groups)}; traces m={m}")
    return EXIT_OK


def cmd_mech(args) -> int:
    cfg = load_config(args.config)
    src = _require_dir(args)
    seed = _seed(args, cfg)
    scheme = cfg.get("scheme", "independent")
    a_n = float(cfg.get("a_n", 0.0))
    pop = Population.from_json((src / "population.json").read_text()) if (src / "population.json").exists() else None
    knowledge = AdversaryKnowledge.from_dict(load_json(src / "knowledge.json"))
    x = read_traces(src / "traces.csv", Stage.TRUE, knowledge.density.r)
    joints = None
    if scheme == "joint-decorrelating":
        if pop is None:
            raise ConfigError("joint decorrelation needs population.json in the input directory")
        joints = {e: pop.pair_joint(*e) for e in pop.graph.edges}
    prot = protect(x, scheme, a_n, seed, knowledge.graph, joints)
    adv = AdversaryKnowledge(knowledge.density, knowledge.profiles, knowledge.graph, a_n, scheme)
    out = Writer(args.out, args.force)
    out.add("observed.csv", prot.observed.to_csv())
    out.add("knowledge.json", adv.to_json() + "\n")
    out.add("truth.json", json.dumps({"schema_version": SCHEMA_VERSION, **prot.record.to_dict(),
                                      "traces": "truth_traces.csv"}) + "\n")
    out.add("truth_traces.csv", x.to_csv())
    out.commit()
    if prot.obfuscated is not None:
        _, pooled = measure_noise(x, prot.obfuscated)
        print(f"scheme={scheme} a_n={a_n:g} measured A_m={pooled:.6f}")
    else:
        print(f"scheme={scheme} (anonymization only)")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    src = _require_dir(args)
    knowledge = AdversaryKnowledge.from_dict(load_json(src / "knowledge.json"))
    y = read_traces(src / "observed.csv", Stage.ANONYMIZED, knowledge.density.r)
    target = int(args.target if args.target is not None else cfg.get("target_user", 0))
    if not 0 <= target < knowledge.n:
        raise ConfigError(f"target user {target} out of range")
    config = AttackConfig(cfg.get("tau"), cfg.get("group_rule", "assignment"))
    outcome = run_attack(y, knowledge, target, config)
    doc = outcome.to_dict()
    if args.truth:
        truth_path = Path(args.truth)
        truth = load_json(truth_path)
        record = MechanismRecord.from_dict(truth)
        x = read_traces(truth_path.parent / truth.get("traces", "truth_traces.csv"), Stage.TRUE,
                        knowledge.density.r)
        score_attack(outcome, record.permutation, x)
        precision, recall = edge_scores(outcome.edges, knowledge.graph.edges, record.permutation)
        doc = outcome.to_dict()
        doc.update(edge_precision=precision, edge_recall=recall, pe=outcome.sample_errors / max(1, x.m))
    out = Writer(args.out, args.force)
    out.add("outcome.json", json.dumps(doc, indent=1) + "\n")
    out.commit()
    if outcome.failed:
        raise Degenerate(f"attack failed: {outcome.reason}")
    line = f"target {target} -> pseudonym {outcome.pseudonym_of(target)}; group {list(outcome.group)}"
    if outcome.success is not None:
        line += f"; success={outcome.success} sample_errors={outcome.sample_errors}"
    print(line)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    spec = ExperimentSpec.from_dict(cfg)
    result = sweep(spec, args.threads)
    out = Writer(args.out, args.force)
    out.add("sweep.csv", result.to_csv())
    out.add("sweep.json", result.to_json() + "\n")
    out.commit()
    for row in result.rows:
        print(f"n={row.n} a_n={row.a_n:g} m={row.m}: success={row.success_rate:.3f} "
              f"pe={row.pe_mean:.4f} [{row.pe_lo:.4f}, {row.pe_hi:.4f}] status={row.status}")
    if result.degenerate:
        raise Degenerate("one or more grid points are degenerate")
    return EXIT_OK


def _tiny_from_config(cfg: dict[str, Any]) -> oracle.TinyInstance:
    try:
        if "joint" in cfg:
            return oracle.TinyInstance(np.array(cfg["joint"], dtype=float), int(cfg.get("m", 1)),
                                       None if cfg.get("levels") is None else tuple(cfg["levels"]))
        return oracle.TinyInstance.independent(cfg["p"], int(cfg.get("m", 1)), cfg.get("levels"))
    except KeyError as exc:
        raise ConfigError(f"oracle config needs 'joint' or 'p' ({exc})") from None


def cmd_oracle(args) -> int:
    if args.preset:
        if args.preset not in oracle.PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(oracle.PRESETS)}")
        inst = oracle.PRESETS[args.preset]()
        name = args.preset
    else:
        if not args.config:
            raise ConfigError("oracle needs --preset or --config")
        inst = _tiny_from_config(load_config(args.config))
        name = Path(args.config).stem
    rows = []
    for u in range(inst.n):
        rows.append({"user": u, "k": args.k, "mi_bits": oracle.exact_mi_anonymized(inst, u, args.k)})
    print(f"{'instance':<20} {'n':>2} {'m':>2} {'user':>4} {'I (bits)':>12}")
    for row in rows:
        print(f"{name:<20} {inst.n:>2} {inst.m:>2} {row['user']:>4} {row['mi_bits']:>12.9f}")
    out = Writer(args.out, args.force)
    out.add("oracle.json", json.dumps({"schema_version": 1, "instance": name, "n": inst.n, "m": inst.m,
                                       "results": rows}, indent=1) + "\n")
    out.commit()
    return EXIT_OK


def cmd_noise_audit(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    n = int(cfg.get("n", 100))
    m = int(cfg.get("m", 10_000))
    a_n = float(cfg.get("a_n", 0.1))
    density = DensitySpec("two-state", 2, cfg.get("epsilon", 0.05))
    pop = make_population(n, density, [1] * n, seed=seed)
    x = generate_traces(pop, m, seed)
    z, levels = obfuscate_independent(x, a_n, seed)
    per_user, pooled = measure_noise(x, z)
    # A_m pools n*m Bernoulli(R_u) flips with R_u ~ U[0, a_n]
    se = float(np.sqrt((a_n / 2 - a_n**2 / 3) / (n * m) + (a_n**2 / 12) / n)) if a_n > 0 else 0.0
    print(f"n={n} m={m} a_n={a_n:g}: A_m={pooled:.6f} expected a_n/2={a_n / 2:.6f} se={se:.6f}")
    doc = {"schema_version": 1, "n": n, "m": m, "a_n": a_n, "seed": seed, "A_m": pooled,
           "expected": a_n / 2, "standard_error": se, "A_m_user": per_user.tolist(), "R": levels.tolist()}
    out = Writer(args.out, args.force)
    out.add("noise.json", json.dumps(doc, indent=1) + "\n")
    out.commit()
    return EXIT_OK


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrmatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output directory (created if absent)")
        p.add_argument("--seed", type=int, help="override the configured master seed")
        p.add_argument("--force", action="store_true", help="overwrite existing output files")
        return p

    p = common(sub.add_parser("gen", help="sample a population and its true traces"))
    p.add_argument("--m", type=int, help="samples per user")
    p.set_defaults(func=cmd_gen)

    p = common(sub.add_parser("mech", help="obfuscate and anonymize gen output"))
    p.add_argument("--input", help="directory written by gen")
    p.set_defaults(func=cmd_mech)

    p = common(sub.add_parser("attack", help="run the adversary on mech output"))
    p.add_argument("--input", help="directory written by mech")
    p.add_argument("--target", type=int, help="target user (default 0)")
    p.add_argument("--truth", help="sealed truth.json, used only for scoring")
    p.set_defaults(func=cmd_attack)

    p = common(sub.add_parser("sweep", help="run a Monte Carlo sweep"))
    p.add_argument("--threads", type=int, help="worker threads (default CORRMATCH_THREADS or all cores)")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("oracle", help="exact mutual information on a tiny instance"))
    p.add_argument("--preset", help=f"one of {', '.join(sorted(oracle.PRESETS))}")
    p.add_argument("--k", type=int, default=0, help="time index")
    p.set_defaults(func=cmd_oracle)

    p = common(sub.add_parser("noise-audit", help="measure the realized noise level A_m"))
    p.set_defaults(func=cmd_noise_audit)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CorrmatchError, ValueError) as exc:
        if isinstance(exc, CouplingInfeasibleError):
            print(f"degenerate: {exc}", file=sys.stderr)
            return EXIT_DEGENERATE
        if isinstance(exc, AttackFailed):
            print(f"attack failed: {exc}", file=sys.stderr)
            return EXIT_DEGENERATE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Degenerate as exc:
        print(f"degenerate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
