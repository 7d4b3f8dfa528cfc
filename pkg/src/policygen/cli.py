"""Command-line entry point: ``policygen {train,eval,oracle,sweep}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure (non-finite loss, I/O,
incompatible checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import BUILD_ID
from .evalmetrics import confusion, evaluate, reward_histogram
from .nncore import make_rng
from .policy import CheckpointError, checkpoint_load, problem_from_dict, problem_to_dict
from .problem import (
    ENUMERATION_BUDGET,
    BudgetExceeded,
    ConditionSet,
    SyntProblem,
    enumerate_solutions,
    octant_regions,
)
from .training import (
    TRAJECTORY_COLUMNS,
    TrainConfig,
    TrainingAborted,
    convergence_iteration,
    train,
)

log = logging.getLogger("policygen")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONVERGENCE_REWARD = -0.05
CONVERGENCE_WINDOW = 1000
# Synt-3D defaults: published size of each solution cloud
PUBLISHED_PER_OCTANT = 248

PROBLEM_DEFAULTS = {"dim": 3, "cardinality": 100, "threshold": 1.2, "lower": -5.0, "upper": 5.0}
TRAIN_DEFAULTS = {
    **PROBLEM_DEFAULTS,
    "conditional": False,
    "iterations": 30_000,
    "batch": 32,
    "alpha": TrainConfig.alpha,
    "beta_max": 1.0,
    "beta_ramp": 5_000,
    "nll_form": "log-mass",
    "lr": 1e-3,
    "noise_dim": 64,
    "emb_dim": 8,
    "hidden": [128, 128],
    "seed": 0,
    "checkpoint_every": 0,
}
DEFAULTS = {
    "train": TRAIN_DEFAULTS,
    "sweep": {**TRAIN_DEFAULTS, "dims": [2, 5, 10]},
    "eval": {"checkpoint": None, "samples": 5000, "class_label": None, "seed": 0,
             "confusion": False, "per_class": 1000, "bins": 20, "coverage_threshold": 0.02,
             "dim": None, "cardinality": None, "threshold": None},
    "oracle": {**PROBLEM_DEFAULTS, "budget": ENUMERATION_BUDGET},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_problem_flags(p, *, required_like=False):
    p.add_argument("--dim", type=int, help="number of variables T (default 3)")
    p.add_argument("--cardinality", type=int, help="values per domain (default 100)")
    p.add_argument("--threshold", type=float, help="static constraint f_test < threshold (default 1.2)")
    if not required_like:
        p.add_argument("--lower", type=float, help="domain lower bound (default -5)")
        p.add_argument("--upper", type=float, help="domain upper bound (default 5)")


def _add_train_flags(p):
    _add_problem_flags(p)
    p.add_argument("--conditional", action="store_true", default=argparse.SUPPRESS,
                   help="condition on octant class labels")
    p.add_argument("--unconditional", dest="conditional", action="store_false",
                   default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    p.add_argument("--iterations", type=int, help="training iterations (default 30000)")
    p.add_argument("--batch", type=int, help="minibatch size N (default 32)")
    p.add_argument("--alpha", type=float, help=f"entropy weight (default {TrainConfig.alpha})")
    p.add_argument("--beta-max", type=float, help="final NLL weight (default 1.0)")
    p.add_argument("--beta-ramp", type=int, help="iterations of the linear beta ramp (default 5000)")
    p.add_argument("--nll-form", choices=["log-mass", "sum-log"], help="region likelihood term")
    p.add_argument("--lr", type=float, help="Adam step size (default 1e-3)")
    p.add_argument("--noise-dim", type=int, help="noise width per cell (default 64)")
    p.add_argument("--emb-dim", type=int, help="class embedding width (default 8)")
    p.add_argument("--hidden", type=_int_list, help="hidden widths, e.g. 128,128")
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.add_argument("--checkpoint-every", type=int, help="write checkpoints/ every K iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="policygen",
        description="Train and evaluate conditional policy generators on Synt-ND.",
        epilog="exit codes: 0 success, 1 usage error, 2 runtime failure",
        argument_default=argparse.SUPPRESS,
    )
    parser.add_argument("--version", action="version", version=BUILD_ID)
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    common = dict(argument_default=argparse.SUPPRESS,
                  epilog="exit codes: 0 success, 1 usage error, 2 runtime failure")

    p = sub.add_parser("train", help="train a generator", **common)
    _add_train_flags(p)
    p.add_argument("--config", help="JSON config; explicit flags override it")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint", **common)
    p.add_argument("--checkpoint", help="checkpoint.json to evaluate")
    p.add_argument("--samples", type=int, help="number of samples (default 5000)")
    p.add_argument("--class", dest="class_label", type=int, help="condition on this class")
    p.add_argument("--seed", type=int, help="RNG seed (default 0)")
    p.add_argument("--confusion", action="store_true", help="also write confusion.json")
    p.add_argument("--per-class", type=int, help="samples per class for --confusion (default 1000)")
    p.add_argument("--bins", type=int, help="reward histogram bins (default 20)")
    p.add_argument("--coverage-threshold", type=float,
                   help="fraction of satisfying samples for an octant to count as covered")
    _add_problem_flags(p, required_like=True)
    p.add_argument("--config", help="JSON config; explicit flags override it")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("oracle", help="enumerate all solutions exhaustively", **common)
    _add_problem_flags(p)
    p.add_argument("--budget", type=int, help=f"max grid points (default {ENUMERATION_BUDGET})")
    p.add_argument("--config", help="JSON config; explicit flags override it")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("sweep", help="unconditional runs over several dimensions", **common)
    p.add_argument("--dims", type=_int_list, help="comma-separated dimensions (default 2,5,10)")
    _add_train_flags(p)
    p.add_argument("--config", help="JSON config; explicit flags override it")
    p.add_argument("--out", help="output directory")
    return parser


# ---------------------------------------------------------------------------
# config resolution and output helpers
# ---------------------------------------------------------------------------


def resolve(command: str, given: dict) -> dict:
    params = dict(DEFAULTS[command])
    cfg_path = given.pop("config", None)
    out = given.pop("out", None)
    if cfg_path is not None:
        try:
            doc = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from None
        if doc.get("command") != command:
            raise UsageError(f"config is for command {doc.get('command')!r}, not {command!r}")
        unknown = set(doc.get("params", {})) - set(params)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        params.update(doc["params"])
        out = out if out is not None else doc.get("out")
    params.update({k: v for k, v in given.items() if k in params})
    if out is None:
        raise UsageError("--out is required")
    return {"command": command, "build": BUILD_ID, "out": str(out), "params": params}


def _check_positive(params: dict, *names):
    for name in names:
        v = params.get(name)
        if v is not None and v < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be a positive integer, got {v}")


def _problem(params: dict) -> SyntProblem:
    _check_positive(params, "dim", "cardinality")
    try:
        return SyntProblem.synt(params["dim"], params["cardinality"], params["threshold"],
                                params["lower"], params["upper"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(params: dict, seed=None) -> TrainConfig:
    _check_positive(params, "batch", "beta_ramp", "noise_dim", "emb_dim")
    if params["iterations"] < 0:
        raise UsageError("--iterations must be >= 0")
    if not params["hidden"] or min(params["hidden"]) < 1:
        raise UsageError("--hidden needs positive widths")
    try:
        return TrainConfig(
            iterations=params["iterations"], batch_size=params["batch"], alpha=params["alpha"],
            beta_max=params["beta_max"], beta_ramp=params["beta_ramp"],
            nll_form=params["nll_form"], lr=params["lr"], noise_dim=params["noise_dim"],
            emb_dim=params["emb_dim"], hidden=tuple(params["hidden"]),
            seed=params["seed"] if seed is None else seed,
            checkpoint_every=params["checkpoint_every"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _prepare_out(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def trajectory_csv(trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for r in trajectory:
        w.writerow([r.iteration, r.samples_cum] + [
            repr(float(getattr(r, c))) for c in TRAJECTORY_COLUMNS[2:]
        ])
    return buf.getvalue()


def _run_training(problem, conditional: bool, config: TrainConfig, out: Path):
    if conditional:
        try:
            conditions = octant_regions(problem)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        conditions = ConditionSet.trivial(problem)

    def save(iteration, gen, opt):
        ckdir = out / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        _write(ckdir / f"checkpoint_{iteration:07d}.json",
               dump_json(gen.to_document(problem, opt)))

    try:
        gen, trajectory, opt = train(problem, conditions, config, on_checkpoint=save,
                                     progress_every=1000)
    except TrainingAborted as exc:
        _write(out / "trajectory.csv", trajectory_csv(exc.trajectory))
        raise
    _write(out / "trajectory.csv", trajectory_csv(trajectory))
    _write(out / "checkpoint.json", dump_json(gen.to_document(problem, opt)))
    return gen, trajectory


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(resolved: dict) -> int:
    params = resolved["params"]
    problem = _problem(params)
    config = _train_config(params)
    out = _prepare_out(resolved["out"])
    _write(out / "config.json", dump_json(resolved))
    _run_training(problem, bool(params["conditional"]), config, out)
    return EXIT_OK


def cmd_sweep(resolved: dict) -> int:
    params = resolved["params"]
    dims = params["dims"]
    if not dims or min(dims) < 1:
        raise UsageError("--dims needs positive dimensions")
    if params["conditional"]:
        raise UsageError("sweep runs are unconditional")
    config = _train_config(params)
    problems = {d: _problem({**params, "dim": d}) for d in dims}
    out = _prepare_out(resolved["out"])
    _write(out / "config.json", dump_json(resolved))
    summary = {"build": BUILD_ID, "convergence_reward": CONVERGENCE_REWARD,
               "convergence_window": CONVERGENCE_WINDOW, "runs": []}
    rewards = {}
    for d in dims:
        sub = out / f"dim_{d}"
        sub.mkdir(exist_ok=True)
        run_cfg = {"command": "train", "build": BUILD_ID, "out": str(sub),
                   "params": {**{k: v for k, v in params.items() if k != "dims"}, "dim": d}}
        _write(sub / "config.json", dump_json(run_cfg))
        log.info("sweep: training dim %d", d)
        _, trajectory = _run_training(problems[d], False, config, sub)
        rewards[d] = [r.mean_reward for r in trajectory]
        conv = convergence_iteration(trajectory, CONVERGENCE_REWARD, CONVERGENCE_WINDOW)
        tail = float(np.mean(rewards[d][-CONVERGENCE_WINDOW:])) if rewards[d] else None
        summary["runs"].append({
            "dim": d, "grid_size": str(problems[d].grid_size()),
            "iterations": len(trajectory), "converged": conv is not None,
            "convergence_iteration": conv,
            "convergence_samples": None if conv is None else (conv + 1) * config.batch_size,
            "final_trailing_mean_reward": tail,
        })
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "samples_cum"] + [f"mean_reward_dim{d}" for d in dims])
    for i in range(config.iterations):
        w.writerow([i, (i + 1) * config.batch_size] + [repr(float(rewards[d][i])) for d in dims])
    _write(out / "rewards.csv", buf.getvalue())
    _write(out / "summary.json", dump_json(summary))
    return EXIT_OK


def cmd_eval(resolved: dict) -> int:
    params = resolved["params"]
    if params["checkpoint"] is None:
        raise UsageError("--checkpoint is required")
    _check_positive(params, "samples", "per_class", "bins")
    try:
        doc = json.loads(Path(params["checkpoint"]).read_text())
    except OSError as exc:
        raise RuntimeError(f"cannot read checkpoint: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if "problem" not in doc:
        raise CheckpointError("checkpoint carries no problem description")
    base = problem_to_dict(problem_from_dict(doc["problem"]))
    if params["dim"] is not None and params["dim"] != base["dim"]:
        raise CheckpointError(f"checkpoint is for dim {base['dim']}, not {params['dim']}")
    if params["cardinality"] is not None and any(c != params["cardinality"] for c in base["cardinality"]):
        raise CheckpointError(f"checkpoint cardinality {base['cardinality']} != {params['cardinality']}")
    if params["threshold"] is not None:
        base["threshold"] = params["threshold"]
    problem = problem_from_dict(base)
    gen = checkpoint_load(doc, problem)
    label = params["class_label"]
    if label is not None and not gen.conditional:
        raise UsageError("--class given for an unconditional checkpoint")
    if label is not None and not 0 <= label < gen.n_classes:
        raise UsageError(f"--class must be in [0, {gen.n_classes})")
    oracle = None
    if problem.grid_size() <= ENUMERATION_BUDGET:
        oracle = enumerate_solutions(problem)
    out = _prepare_out(resolved["out"])
    _write(out / "config.json", dump_json(resolved))
    rng = make_rng(params["seed"])
    report, table = evaluate(gen, problem, params["samples"], label, rng, oracle,
                             params["coverage_threshold"])
    rep = {"build": BUILD_ID, "checkpoint": str(params["checkpoint"]), "seed": params["seed"],
           **report.to_dict(), "reward_histogram": reward_histogram(table, params["bins"])}
    _write(out / "report.json", dump_json(rep))
    _write(out / "samples.csv", table.to_csv())
    if params["confusion"]:
        if not gen.conditional:
            raise UsageError("--confusion needs a conditional checkpoint")
        cm, _ = confusion(gen, problem, octant_regions(problem), params["per_class"], rng)
        _write(out / "confusion.json", dump_json({"build": BUILD_ID, **cm.to_dict()}))
    return EXIT_OK


def cmd_oracle(resolved: dict) -> int:
    params = resolved["params"]
    problem = _problem(params)
    out = Path(resolved["out"])
    result = enumerate_solutions(problem, params["budget"])  # may raise BudgetExceeded
    out = _prepare_out(resolved["out"])
    _write(out / "config.json", dump_json(resolved))
    summary = {"build": BUILD_ID, **result.summary()}
    counts = result.per_octant_counts
    summary["equal_per_octant"] = len(set(counts)) == 1
    default = SyntProblem.synt()
    if problem == default:
        summary["published_per_octant"] = PUBLISHED_PER_OCTANT
        summary["matches_published"] = all(c == PUBLISHED_PER_OCTANT for c in counts)
    _write(out / "summary.json", dump_json(summary))
    _write(out / "solutions.csv", result.to_csv())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "oracle": cmd_oracle, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    logging.basicConfig(level=logging.INFO if args.pop("verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.pop("command", None)
    if command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        resolved = resolve(command, args)
        return COMMANDS[command](resolved)
    except UsageError as exc:
        print(f"policygen {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BudgetExceeded as exc:
        print(f"policygen {command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TrainingAborted, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"policygen {command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
