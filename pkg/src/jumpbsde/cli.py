"""Command-line experiment runner.

Each command writes into ``<output>/<command>/`` and stamps the directory
with the config hash and seed.  Re-running a command on a stamped directory
with the same config does nothing unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import certify, model, nets, reference, solver, tape
from . import rng as rngs
from .config import load_config
from .errors import ConfigError, Infeasible, JumpBsdeError, NumericalError

log = logging.getLogger("jumpbsde")

CSV_HELP = """\
output files (CSV files start with a '# config_hash=..., seed=...' line):
  train/loss.csv              iter,loss
  train/metrics.json          final_loss, eval_loss, y0, Y0_exact, y0_error, parameter counts
  convergence/convergence.csv method,M,dt,errX,errY,errZ,errPsi,total,Y0_error
                              (rows 'oracle-slope' and 'deep-slope' hold log-log slopes vs dt)
  convergence/coefficients_M<M>.csv  n,target,term,coefficient
  certify/certificate.json    certified bound, constants, loss CI, inputs, formulas
  certify/apriori.json        a priori bound terms (manufactured problems)
  epsilon-study/epsilon.csv   epsilon,K_nu_eps,sigma_eps_trace,y0,loss,C_eps,remainder
  validate/validate.json      sampled checks of the declared constants
exit codes: 0 success, 2 configuration error, 3 numerical failure
"""


# ---------------------------------------------------------------------------
# output helpers


class RunDir:
    def __init__(self, cfg, command, force):
        self.cfg = cfg
        self.hash = cfg.digest()
        self.path = Path(cfg.output) / command
        self.force = force

    def is_current(self):
        """True when the directory already holds a finished run of this config."""
        stamp = self.path / "stamp.json"
        if not stamp.exists():
            return False
        recorded = json.loads(stamp.read_text())
        if recorded.get("config_hash") == self.hash and not self.force:
            return True
        if not self.force:
            raise ConfigError(f"{self.path} holds a run of a different config; pass --force to overwrite")
        return False

    def prepare(self):
        if self.path.exists():
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True)
        (self.path / "config.yaml").write_text(self.cfg.to_yaml())
        handler = logging.FileHandler(self.path / "run.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        return handler

    def header(self):
        return f"# config_hash={self.hash}, seed={self.cfg.seed}\n"

    def write_csv(self, name, columns, rows):
        buf = io.StringIO()
        buf.write(self.header())
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        (self.path / name).write_text(buf.getvalue())

    def write_json(self, name, data):
        payload = {"config_hash": self.hash, "seed": self.cfg.seed, **data}
        (self.path / name).write_text(json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n")

    def finish(self, handler):
        self.write_json("stamp.json", {})
        log.removeHandler(handler)
        handler.close()


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else repr(v)
    if isinstance(value, np.integer):
        return int(value)
    return value


# ---------------------------------------------------------------------------
# shared setup


def setup_problem(cfg, epsilon=None):
    """(problem ready for simulation, manufactured solution or None, pipeline or None)."""
    problem, ms = model.build_catalog(cfg.problem.name, cfg.problem.params)
    pipeline = None
    if not problem.measure.finite_activity:
        if epsilon is None:
            raise ConfigError("problem has an infinite-activity measure: set 'epsilon' to truncate its small jumps")
        pipeline = solver.build_epsilon_pipeline(problem, epsilon)
        problem = pipeline.problem
        if ms is not None:
            ms = replace(ms, problem=problem)
    return problem, ms, pipeline


def train_config(cfg, threads):
    t = cfg.train
    return solver.TrainConfig(
        iterations=t.iterations, batch_size=t.batch_size, optimizer=t.optimizer,
        learning_rates=tuple(t.learning_rates), boundaries=tuple(t.boundaries), beta1=t.beta1,
        beta2=t.beta2, eps_adam=t.eps_adam, clip_norm=t.clip_norm, seed=cfg.seed, threads=threads)


def train_family(cfg, problem, grid, threads):
    net = cfg.train.network
    family = solver.init_family(problem, grid, cfg.seed, net.hidden, net.width, net.y0_init, net.activation)
    return solver.train(problem, grid, train_config(cfg, threads), family,
                        checkpoint_every=cfg.train.checkpoint_every)


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, run, threads):
    problem, ms, _ = setup_problem(cfg, cfg.epsilon)
    grid = solver.TimeGrid(cfg.grid.M, problem.T)
    trained = train_family(cfg, problem, grid, threads)
    log.info("training wall time %.2f s", trained.wall_time)
    run.write_csv("loss.csv", ["iter", "loss"], [(k, loss) for k, loss in enumerate(trained.losses)])
    meta = {"config_hash": run.hash, "training_hash": cfg.training_digest(), "seed": cfg.seed,
            "iterations": cfg.train.iterations}
    nets.save_checkpoint(run.path / "checkpoint.bin", trained.family, meta)
    for k, flat in trained.checkpoints.items():
        fam = trained.family.copy()
        fam.load_flat(flat)
        nets.save_checkpoint(run.path / f"checkpoint_{k:06d}.bin", fam, {**meta, "iteration": k})
    eval_loss, _ = certify.terminal_loss(trained.family, problem, grid, cfg.eval_batch, cfg.seed, threads)
    dims = trained.family.dims
    metrics = {
        "final_loss": float(trained.losses[-1]) if len(trained.losses) else None,
        "eval_loss": eval_loss,
        "y0": float(trained.family.y0),
        "parameters_standard": nets.standard_parameter_count(dims) * grid.M + 1,
        "parameters_regrouped": nets.regrouped_parameter_count(dims) * grid.M + 1,
        "dims": list(dims),
        "M": grid.M,
    }
    if ms is not None:
        metrics["Y0_exact"] = ms.Y0
        metrics["y0_error"] = abs(metrics["y0"] - ms.Y0)
    run.write_json("metrics.json", metrics)
    print(f"train: y0={metrics['y0']:.6f} eval_loss={eval_loss:.3e} -> {run.path}")


def cmd_convergence(cfg, run, threads):
    problem, ms, _ = setup_problem(cfg, cfg.epsilon)
    if ms is None:
        raise ConfigError(f"problem {cfg.problem.name!r} has no closed-form solution, so there is no exact "
                          f"reference to measure errors against; use one of {', '.join(model.MANUFACTURED)}")
    M_list = cfg.grid.M_list or [cfg.grid.M]
    s = cfg.reference.substeps
    rows = []
    exact = reference.ExactSolution(ms)
    for M in M_list:
        grid = solver.TimeGrid(M, problem.T)
        batch = solver.simulate_forward(problem, grid, cfg.reference.batch, cfg.seed, rngs.REFERENCE, 0,
                                        substeps=s, threads=threads)
        sol = reference.solve_backward(problem, grid, batch, reference.RegressionBasis(cfg.reference.degree))
        errs = reference.error_functional(sol.discrete(), exact, batch, s)
        rows.append(("oracle", M, grid.dt, *errs, sum(errs), abs(sol.Y0 - ms.Y0)))
        run.write_csv(f"coefficients_M{M}.csv", ["n", "target", "term", "coefficient"], sol.coefficient_table())
        trained = train_family(cfg, problem, grid, threads)
        eval_batch = solver.simulate_forward(problem, grid, cfg.eval_batch, cfg.seed, rngs.EVAL, 0,
                                             substeps=s, threads=threads)
        with tape.no_grad():
            result = solver.rollout(trained.family, problem, eval_batch, keep=True)
        errs = reference.error_functional(reference.from_rollout(eval_batch, result), exact, eval_batch, s)
        rows.append(("deep", M, grid.dt, *errs, sum(errs), abs(trained.family.y0 - ms.Y0)))
        log.info("M=%d done (training %.1f s)", M, trained.wall_time)
    if len(M_list) > 1:
        for method in ("oracle", "deep"):
            sub = [r for r in rows if r[0] == method]
            dts = [r[2] for r in sub]
            slopes = [_slope(dts, [r[k] for r in sub]) for k in range(3, 9)]
            rows.append((f"{method}-slope", "", "", *slopes))
    columns = ["method", "M", "dt", "errX", "errY", "errZ", "errPsi", "total", "Y0_error"]
    run.write_csv("convergence.csv", columns, rows)
    for r in rows:
        print(",".join(str(_cell(v)) for v in r))


def _slope(dts, values):
    if min(values) <= 0:
        return float("nan")
    return solver.loglog_slope(dts, values)


def _load_trained(cfg, problem, grid):
    path = Path(cfg.output) / "train" / "checkpoint.bin"
    if not path.exists():
        raise ConfigError(f"no checkpoint at {path}; run 'jumpbsde train' with this config first")
    family, meta = nets.load_checkpoint(path)
    if meta.get("training_hash") != cfg.training_digest():
        raise ConfigError(f"checkpoint {path} was trained with a different config; rerun train")
    if family.M != grid.M:
        raise ConfigError(f"checkpoint has {family.M} networks but the grid has M={grid.M}")
    return family


def cmd_certify(cfg, run, threads):
    problem, ms, pipeline = setup_problem(cfg, cfg.epsilon)
    grid = solver.TimeGrid(cfg.grid.M, problem.T)
    family = _load_trained(cfg, problem, grid)
    c = cfg.certificate
    if (c.lambda_sq is None) != (c.lambdabar is None):
        raise ConfigError("certificate.lambda_sq and certificate.lambdabar must be given together")
    override = None if c.lambda_sq is None else (c.lambda_sq, c.lambdabar)
    try:
        cert = certify.posteriori_certificate(family, problem, grid, cfg.eval_batch, cfg.seed, c.f1_coefficient,
                                              override, threads)
    except Infeasible as exc:
        if override is None:
            raise
        raise ConfigError(str(exc)) from None
    cert.config_hash, cert.seed = run.hash, cfg.seed
    run.write_json("certificate.json", cert.as_dict())
    if ms is not None:
        batch = solver.simulate_forward(problem, grid, cfg.eval_batch, cfg.seed, rngs.EVAL, 1,
                                        substeps=cfg.reference.substeps, threads=threads)
        report = certify.apriori_report(family, ms, grid, batch, c.lambda3, c.lambda4, c.C_path, c.C_lambda3,
                                        c.malliavin)
        run.write_json("apriori.json", report.as_dict())
    print(f"certify: bound={cert.bound_value:.6g} (C={cert.constant:.6g}, loss={cert.loss:.3e} "
          f"+/- {cert.ci:.2e}) -> {run.path}")


def cmd_epsilon_study(cfg, run, threads):
    if not cfg.epsilon_list:
        raise ConfigError("epsilon_list is empty: give at least one truncation level in (0, 1]")
    base, ms = model.build_catalog(cfg.problem.name, cfg.problem.params)
    if base.measure.finite_activity:
        raise ConfigError("epsilon-study needs an infinite-activity measure (e.g. family: power)")
    rows = []
    for eps in cfg.epsilon_list:
        problem, _, pipeline = setup_problem(cfg, eps)
        grid = solver.TimeGrid(cfg.grid.M, problem.T)
        trained = train_family(cfg, problem, grid, threads)
        loss, _ = certify.terminal_loss(trained.family, problem, grid, cfg.eval_batch, cfg.seed, threads)
        K_eps = problem.measure.total_mass()
        opt = certify.minimize_posteriori(problem.constants.K_f, K_eps, problem.T, grid.dt,
                                          cfg.certificate.f1_coefficient)
        stats = pipeline.stats
        rows.append((eps, K_eps, stats.sigma_eps_trace, float(trained.family.y0), loss, opt.C,
                     stats.small_second_moment))
        log.info("epsilon=%g done (training %.1f s)", eps, trained.wall_time)
    run.write_csv("epsilon.csv", ["epsilon", "K_nu_eps", "sigma_eps_trace", "y0", "loss", "C_eps", "remainder"],
                  rows)
    if ms is not None:
        run.write_json("summary.json", {"Y0_exact": ms.Y0})
    for r in rows:
        print(",".join(str(_cell(v)) for v in r))


def cmd_validate(cfg, run, threads):
    problem, ms = model.build_catalog(cfg.problem.name, cfg.problem.params)
    if not problem.measure.finite_activity:
        problem, ms, _ = setup_problem(cfg, cfg.epsilon)
    report = model.validate(problem, rng=rngs.generator(cfg.seed, rngs.STUDY), ms=ms)
    run.write_json("validate.json", {"passed": report.passed, "checks": report.as_dict()})
    for c in report.checks:
        print(f"{c.name:24s} constant={c.constant:<12.6g} worst_ratio={c.worst_ratio:<12.6g} "
              f"{'ok' if c.passed else 'VIOLATED'}")
    if not report.passed:
        raise NumericalError("declared constants are violated on the sampled box")


COMMANDS = {
    "train": (cmd_train, "train the deep solver; writes loss.csv, checkpoints and metrics.json"),
    "convergence": (cmd_convergence, "backward oracle and deep solver errors over grid.M_list"),
    "certify": (cmd_certify, "a posteriori certificate (and a priori report) for a trained run"),
    "epsilon-study": (cmd_epsilon_study, "train on each truncation level in epsilon_list"),
    "validate": (cmd_validate, "sample the declared Lipschitz constants and the PIDE residual"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="jumpbsde", description="Deep BSDE solver for FBSDEs with jumps.",
                                     epilog=CSV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=CSV_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads for path simulation")
        p.add_argument("--f1-coefficient", type=int, choices=(3, 4), default=None,
                       help="coefficient of lambda^2 in F1 and the certificate constant (default 3)")
        p.add_argument("--output", default=None, help="override the output directory of the config")
    return parser


def run_command(argv=None):
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    updates = {}
    if args.output is not None:
        updates["output"] = args.output
    if args.f1_coefficient is not None:
        updates["certificate"] = cfg.certificate.model_copy(update={"f1_coefficient": args.f1_coefficient})
    if updates:
        cfg = cfg.model_copy(update=updates)
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    func, _ = COMMANDS[args.command]
    run = RunDir(cfg, args.command, args.force)
    if run.is_current():
        print(f"{run.path} is up to date (use --force to recompute)")
        return 0
    handler = run.prepare()
    start = time.perf_counter()
    try:
        func(cfg, run, args.threads)
    except BaseException:
        log.removeHandler(handler)
        handler.close()
        raise
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - start)
    run.finish(handler)
    return 0


def main(argv=None):
    try:
        return run_command(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, JumpBsdeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
