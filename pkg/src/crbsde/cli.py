"""Command-line front end: JSON scenario in, JSON report and CSV tables out."""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import analysis, dynkin, skorokhod, solver, switching
from .errors import ConfigError, CRBSDEError, ExpressionError
from .expr import Expression
from .finprob import ScenarioTree, SubFiltration, cond_expect_G, count_stopping_times

FORMAT_VERSION = "1"
SMALL_INSTANCE_CAP = 100_000
log = logging.getLogger("crbsde")

_EXPR = {"type": ["string", "number"]}
_NUM_OR_LIST = {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}}]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["tree"],
    "properties": {
        "format_version": {"type": "string"},
        "tree": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 1},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "branching": {"type": "integer", "minimum": 1},
                "random": {"type": "boolean"},
                "seed": {"type": "integer"},
                "levels": {"type": "array"},
            },
            "oneOf": [{"required": ["steps"]}, {"required": ["levels"]}],
        },
        "subfiltration": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mode"],
            "properties": {
                "mode": {"enum": ["full", "trivial", "delayed", "custom"]},
                "delay": {"type": "integer", "minimum": 0},
                "atoms": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
            },
        },
        "problem": {"$ref": "#/definitions/problem"},
        "problem2": {"$ref": "#/definitions/problem"},
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["backward", "constant", "picard", "penalty"]},
                "penalty": {"type": "number", "exclusiveMinimum": 0},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "penalty_grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "exponents": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "values": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
            },
        },
        "dynkin": {
            "type": "object",
            "additionalProperties": False,
            "required": ["lower", "upper"],
            "properties": {"lower": _EXPR, "upper": _EXPR, "ties": {"enum": ["lower", "upper"]}},
        },
        "switching": {
            "type": "object",
            "additionalProperties": False,
            "required": ["psi1", "psi2", "stop_cost", "start_cost"],
            "properties": {"psi1": _EXPR, "psi2": _EXPR, "stop_cost": _EXPR, "start_cost": _EXPR},
        },
        "skorokhod": {
            "type": "object",
            "additionalProperties": False,
            "required": ["x", "lower", "upper"],
            "properties": {
                "x": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "lower": _NUM_OR_LIST,
                "upper": _NUM_OR_LIST,
            },
        },
        "saddle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"level": {"type": "integer", "minimum": 0}},
        },
    },
    "definitions": {
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "required": ["xi", "L", "U"],
            "properties": {
                "xi": _EXPR,
                "f": _EXPR,
                "L": _EXPR,
                "U": _EXPR,
                "lipschitz": {"type": "number", "minimum": 0},
                "linear_driver": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"a": _EXPR, "b": _EXPR, "c": _EXPR},
                },
            },
        }
    },
}


def _node_fn(text, name):
    """Callable ``fn(t, w)`` from an expression that must not involve ``y`` or ``z``."""
    expr = Expression(text)
    if expr.state_dependent:
        raise ConfigError(f"{name}: expression {expr.text!r} may only use t and w")
    return lambda t, w: expr(t=t, w=w)


@dataclass
class ScenarioConfig:
    """Validated configuration; ``data`` is the JSON object."""

    data: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data):
        validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
        errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            path = "".join(f"[{p!r}]" if isinstance(p, str) else f"[{p}]" for p in err.absolute_path)
            raise ConfigError(f"config{path}: {err.message}")
        cfg = cls(copy.deepcopy(data))
        cfg._check_expressions()
        return cfg

    def _check_expressions(self):
        for section in ("problem", "problem2", "switching", "dynkin"):
            for key, value in self.data.get(section, {}).items():
                if key in ("lipschitz", "ties"):
                    continue
                items = value.items() if isinstance(value, dict) else [(None, value)]
                for sub, text in items:
                    where = f"{section}.{key}" + (f".{sub}" if sub else "")
                    try:
                        Expression(text)
                    except ExpressionError as exc:
                        err = ExpressionError(f"{where}: {exc}")
                        err.position = exc.position
                        raise err from None

    def emit(self):
        return json.dumps(self.data, indent=2, sort_keys=True)

    def section(self, name):
        if name not in self.data:
            raise ConfigError(f"config is missing the {name!r} section")
        return self.data[name]

    # builders ----------------------------------------------------------------

    def build_tree(self, seed=None):
        spec = self.data["tree"]
        horizon = spec.get("horizon", 1.0)
        if "levels" in spec:
            return ScenarioTree.from_dict({"levels": spec["levels"], "horizon": horizon})
        steps = spec["steps"]
        branching = spec.get("branching", 2)
        if spec.get("random"):
            if branching != 2:
                raise ConfigError("random trees must be binary")
            return ScenarioTree.random_binary(steps, horizon, rng=spec.get("seed", 0) if seed is None else seed)
        if branching == 2:
            return ScenarioTree.binary(steps, horizon)
        return ScenarioTree.multinomial(steps, branching, horizon)

    def build_filtration(self, tree):
        spec = self.data.get("subfiltration", {"mode": "full"})
        mode = spec["mode"]
        if mode == "full":
            return SubFiltration.full(tree)
        if mode == "trivial":
            return SubFiltration.trivial(tree)
        if mode == "delayed":
            return SubFiltration.delayed(tree, spec.get("delay", 1))
        if "atoms" not in spec:
            raise ConfigError("config['subfiltration']: custom mode needs 'atoms'")
        return SubFiltration(tree, spec["atoms"])

    def build_problem(self, tree, filtration, key="problem"):
        spec = self.section(key)
        xi = Expression(spec["xi"])
        if xi.state_dependent:
            raise ConfigError(f"{key}.xi may only use t and w")
        terminal = lambda T, w: xi(t=T, w=w)  # noqa: E731
        if "linear_driver" in spec:
            if "f" in spec:
                raise ConfigError(f"{key}: give either 'f' or 'linear_driver', not both")
            lin = spec["linear_driver"]
            driver = analysis.LinearDriver(
                tree,
                *(_node_fn(lin.get(c, 0), f"{key}.linear_driver.{c}") for c in ("a", "b", "c")),
            )
            lipschitz = spec.get("lipschitz")
        else:
            f = Expression(spec.get("f", 0))
            if f.state_dependent:
                driver = solver.FunctionDriver(lambda t, w, y, z: f(t=t, w=w, y=y, z=z))
                if "lipschitz" not in spec:
                    raise ConfigError(f"{key}: state-dependent driver needs 'lipschitz'")
            else:
                driver = solver.ConstantDriver(lambda t, w: f(t=t, w=w))
            lipschitz = spec.get("lipschitz")
        return solver.DCRBSDEProblem(
            tree,
            filtration,
            terminal,
            driver,
            _node_fn(spec["L"], f"{key}.L"),
            _node_fn(spec["U"], f"{key}.U"),
            lipschitz=lipschitz,
        )

    def build_switching(self, tree, filtration):
        spec = self.section("switching")
        fns = {k: _node_fn(spec[k], f"switching.{k}") for k in ("psi1", "psi2", "stop_cost", "start_cost")}
        return switching.SwitchingProblem(tree, filtration, fns["psi1"], fns["psi2"], fns["stop_cost"], fns["start_cost"])

    def penalties(self, tree):
        spec = self.data.get("penalty_grid", {})
        if "values" in spec:
            return [float(v) for v in spec["values"]]
        return solver.default_penalty_grid(tree, spec.get("exponents", range(4, 13)))


# output helpers ---------------------------------------------------------------


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def process_rows(process):
    return [(k, i, float(v)) for k, arr in enumerate(process) for i, v in enumerate(np.asarray(arr))]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


@dataclass
class RunReport:
    command: str
    config: dict
    seed: int | None
    results: dict
    tables: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_json(self):
        payload = {
            "format_version": FORMAT_VERSION,
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "results": _jsonable(self.results),
            "tables": sorted(self.tables),
            "wall_clock_seconds": self.wall_clock,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir):
        for name, text in self.tables.items():
            _atomic_write(os.path.join(out_dir, name), text)
        _atomic_write(os.path.join(out_dir, "report.json"), self.to_json())


# commands ---------------------------------------------------------------------


def _solve(problem, cfg):
    spec = cfg.data.get("solver", {})
    method = spec.get("method", "backward")
    if method == "picard":
        return solver.solve_picard(problem, tol=spec.get("tol", solver.PICARD_TOL), max_iter=spec.get("max_iter", solver.PICARD_MAX_ITER))
    if method == "penalty":
        return solver.solve_penalized(problem, spec.get("penalty", 1e4 / problem.tree.dt))
    return solver.solve(problem, method)


def cmd_solve(cfg, args):
    tree = cfg.build_tree(args.seed)
    G = cfg.build_filtration(tree)
    problem = cfg.build_problem(tree, G)
    sol = _solve(problem, cfg)
    diag = sol.diagnostics if sol.diagnostics is not None else solver.verify_solution(problem, sol)
    ybar = sol.conditional_value(G)
    results = {
        "method": sol.method,
        "iterations": sol.iterations,
        "Y0": float(sol.Y[0][0]),
        "diagnostics": diag.to_dict(),
        "picard_history": sol.history,
    }
    if args.check and tree.num_steps <= 3 and count_stopping_times(G) <= SMALL_INSTANCE_CAP:
        results["game_check_gap"] = _game_gap(problem, sol)
    tables = {
        "Y.csv": _csv(["level", "node", "value"], process_rows(sol.Y)),
        "Z.csv": _csv(["level", "node", "value"], process_rows(sol.Z)),
        "EY_G.csv": _csv(["level", "atom", "value"], process_rows(ybar)),
        "K_plus.csv": _csv(["level", "atom", "value"], process_rows(sol.k_atoms(G, "plus"))),
        "K_minus.csv": _csv(["level", "atom", "value"], process_rows(sol.k_atoms(G, "minus"))),
    }
    return results, tables


def transformed_rewards(problem):
    """Rewards of the game whose value is ``E[Y|G]`` plus the accumulated driver mean."""
    tree, G = problem.tree, problem.filtration
    n = tree.num_steps
    fvals = problem.driver_values(tree.constant(0.0), tree.constant(0.0)[:-1])
    acc = [np.zeros(1)]
    for k in range(n):
        acc.append((acc[k] + fvals[k] * tree.dt)[tree.parent[k + 1]])
    low = [cond_expect_G(G, acc[k] + (problem.lower[k] if k < n else problem.terminal), k) for k in range(n + 1)]
    up = [cond_expect_G(G, acc[k] + (problem.upper[k] if k < n else problem.terminal), k) for k in range(n + 1)]
    drift = [cond_expect_G(G, acc[k], k) for k in range(n + 1)]
    return low, up, drift


def _game_gap(problem, sol):
    if problem.driver.state_dependent:
        return None
    low, up, drift = transformed_rewards(problem)
    lower, upper = dynkin.game_value_bruteforce(problem.filtration, low, up)
    ybar = sol.conditional_value(problem.filtration)
    return max(
        max(float(np.max(np.abs(l - d - y))), float(np.max(np.abs(u - d - y))))
        for l, u, d, y in zip(lower, upper, drift, ybar)
    )


def cmd_dynkin(cfg, args):
    tree = cfg.build_tree(args.seed)
    G = cfg.build_filtration(tree)
    spec = cfg.section("dynkin")
    ties = spec.get("ties", "lower")
    lo_nodes = tree.evaluate(_node_fn(spec["lower"], "dynkin.lower"))
    up_nodes = tree.evaluate(_node_fn(spec["upper"], "dynkin.upper"))
    xi = [cond_expect_G(G, v, k) for k, v in enumerate(lo_nodes)]
    zeta = [cond_expect_G(G, v, k) for k, v in enumerate(up_nodes)]
    xi_s, zeta_s, shift = dynkin.reward_shift(G, xi, zeta)
    prof = dynkin.game_value_recursive(G, xi_s, zeta_s, ties=ties)
    value = [v + s for v, s in zip(prof.value, shift)]
    results = {"value0": float(value[0][0]), "crossed": prof.difference is None, "ties": ties}
    if args.check:
        if count_stopping_times(G) > SMALL_INSTANCE_CAP:
            results["bruteforce"] = "skipped: instance too large"
        else:
            lower, upper = dynkin.game_value_bruteforce(G, xi, zeta, ties=ties)
            results["bruteforce_gap"] = max(
                max(float(np.max(np.abs(l - v))), float(np.max(np.abs(u - v)))) for l, u, v in zip(lower, upper, value)
            )
    rows = [(k, g, float(v)) for k, arr in enumerate(value) for g, v in enumerate(arr)]
    return results, {"value.csv": _csv(["level", "atom", "value"], rows)}


def cmd_skorokhod(cfg, args):
    spec = cfg.section("skorokhod")
    x = np.asarray(spec["x"], dtype=float)
    out = skorokhod.two_sided_map(x, spec["lower"], spec["upper"])
    res = out.residuals(x, spec["lower"], spec["upper"])
    results = {"residuals": res, "k_plus_total": float(out.k_plus[-1]), "k_minus_total": float(out.k_minus[-1])}
    if args.check:
        oracle = skorokhod.iterative_oracle(x, spec["lower"], spec["upper"])
        results["oracle_gap"] = float(np.max(np.abs(oracle.k - out.k)))
    rows = zip(range(x.size), x, out.y, out.k, out.k_plus, out.k_minus)
    return results, {"reflected.csv": _csv(["index", "x", "y", "k", "k_plus", "k_minus"], rows)}


def cmd_switch(cfg, args):
    tree = cfg.build_tree(args.seed)
    G = cfg.build_filtration(tree)
    sp = cfg.build_switching(tree, G)
    dec = switching.decompose(sp)
    strategy = switching.optimal_strategy(sp, dec)
    value = switching.profit(sp, strategy)
    results = {
        "Y1_0": float(dec.Y1[0][0]),
        "Y2_0": float(dec.Y2[0][0]),
        "strategy_value": value,
        "decomposition": switching.verify_decomposition(sp, dec),
    }
    if args.check:
        if tree.num_steps > 3 or switching.count_strategies(G, tree.num_steps) > SMALL_INSTANCE_CAP:
            results["oracle"] = "skipped: instance too large"
        else:
            best, _ = switching.brute_force_value(sp)
            results["oracle_gap"] = abs(best - float(dec.Y1[0][0]))
    rows = [(i + 1, leaf, int(v)) for i, row in enumerate(strategy) for leaf, v in enumerate(row)]
    return results, {"strategy.csv": _csv(["switch", "leaf", "level"], rows)}


def cmd_compare(cfg, args):
    tree = cfg.build_tree(args.seed)
    G = cfg.build_filtration(tree)
    p1 = cfg.build_problem(tree, G, "problem")
    p2 = cfg.build_problem(tree, G, "problem2")
    rep = analysis.compare(p1, p2)
    return {"margin": rep.margin, "level_margins": rep.level_margins, "holds": rep.holds}, {}


def cmd_saddle(cfg, args):
    tree = cfg.build_tree(args.seed)
    G = cfg.build_filtration(tree)
    problem = cfg.build_problem(tree, G)
    level = cfg.data.get("saddle", {}).get("level", 0)
    if not isinstance(problem.driver, analysis.LinearDriver):
        raise ConfigError("saddle needs problem.linear_driver")
    gamma = analysis.gamma_process(problem.driver, tree, G, scheme="implicit")
    sol = solver.solve_backward(problem)
    tau, sigma = analysis.saddle_point(problem, sol, level)
    results = {"gamma_g_adapted": gamma.g_adapted, "level": level}
    if args.check:
        if count_stopping_times(G, level) > 2_000:
            results["audit"] = "skipped: instance too large"
        else:
            audit = analysis.saddle_audit(problem, sol, level)
            results["audit"] = {"lower_violation": audit.lower_violation, "upper_violation": audit.upper_violation, "passed": audit.passed}
    rows = [(leaf, int(a), int(b)) for leaf, (a, b) in enumerate(zip(tau, sigma))]
    return results, {"saddle.csv": _csv(["leaf", "tau", "sigma"], rows)}


def cmd_penalize(cfg, args):
    tree = cfg.build_tree(args.seed)
    G = cfg.build_filtration(tree)
    problem = cfg.build_problem(tree, G)
    rep = solver.penalization_sweep(problem, cfg.penalties(tree), threads=args.threads)
    results = {"slope": rep.slope, "scale": rep.scale, "n": rep.penalties, "v": rep.violation, "d": rep.distance}
    return results, {"sweep.csv": _csv(["n", "v", "d"], rep.rows())}


def cmd_gen(cfg, args):
    tree = cfg.build_tree(args.seed)
    G = cfg.build_filtration(tree)
    data = copy.deepcopy(cfg.data)
    data["format_version"] = FORMAT_VERSION
    data["tree"] = {"levels": tree.to_dict()["levels"], "horizon": tree.horizon}
    data["subfiltration"] = {"mode": "custom", **G.to_dict()}
    scenario = json.dumps(data, indent=2, sort_keys=True) + "\n"
    return {"leaves": tree.n_leaves, "atoms": G.n_atoms}, {"scenario.json": scenario}


COMMANDS = {
    "solve": cmd_solve,
    "dynkin": cmd_dynkin,
    "skorokhod": cmd_skorokhod,
    "switch": cmd_switch,
    "compare": cmd_compare,
    "saddle": cmd_saddle,
    "penalize-sweep": cmd_penalize,
    "gen": cmd_gen,
}


def run(command, cfg, args):
    """Execute one subcommand and return its :class:`RunReport`."""
    start = time.perf_counter()
    results, tables = COMMANDS[command](cfg, args)
    return RunReport(command, cfg.data, args.seed, results, tables, time.perf_counter() - start)


def build_parser():
    parser = argparse.ArgumentParser(prog="crbsde", description="Conditionally reflected BSDEs on scenario trees")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario JSON file")
        p.add_argument("--seed", type=int, default=None, help="override the tree seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--check", action="store_true", help="run brute-force oracles on small instances")
    return parser


def _setup_logging():
    level = os.environ.get("CRBSDE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = ScenarioConfig.parse(text)
        report = run(args.command, cfg, args)
        report.write(args.out)
    except CRBSDEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(_jsonable(report.results), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
