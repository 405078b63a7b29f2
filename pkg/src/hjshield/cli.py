"""``hjshield`` command line: solve-brs, run, train, ablate, plot.

Configuration comes from an optional YAML file (``--config``), then
``--set section.key=value`` overrides, then the dedicated flags; later
layers win. Every command writes its resolved configuration next to its
outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .config import SMOKE_PROFILE, ConfigError, RunConfig, load_config, parse_override
from .env import COLLISION, FROZEN, SUCCESS, TIMEOUT, EpisodeTrace, TraceFormatError, success_rate
from .learner import PPOConfig, TrainConfig, Trainer, TrainingDivergence, VAEConfig, episode_seed, load_model
from .plotting import plot_trace_file
from .reachability import FormatError, load_value_function, params_hash, read_header, save_value_function, solve_brs
from .supervisor import make_supervisors, run_episode

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNCONVERGED = 3
EXIT_DIVERGED = 4
EXIT_IO = 5

log = logging.getLogger("hjshield")


class CommandError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- value-function cache -------------------------------------------------------

def vf_hash(cfg: RunConfig) -> str:
    s = cfg.solver
    return params_hash(cfg.grid, cfg.game, s.tol, s.max_iters, s.cfl)


def vf_cache_path(cfg: RunConfig) -> Path:
    return cfg.output_root() / "value_functions" / f"{vf_hash(cfg)[:16]}.hjvf"


def resolve_value_function(cfg: RunConfig):
    path = Path(cfg.value_function) if cfg.value_function else vf_cache_path(cfg)
    if not path.exists():
        raise CommandError(
            f"no value function at {path}; run `hjshield solve-brs` with the same grid/game/solver "
            f"settings first (or pass --value-function)", EXIT_IO)
    try:
        vf = load_value_function(path)
    except (OSError, FormatError) as exc:
        raise CommandError(f"cannot load value function {path}: {exc}", EXIT_IO) from exc
    if abs(vf.params.d - cfg.game.d) > 1e-12 or abs(vf.params.v - cfg.game.v) > 1e-12 \
            or abs(vf.params.omega_max - cfg.game.omega_max) > 1e-12:
        raise CommandError(f"{path} was solved for different game parameters", EXIT_CONFIG)
    return vf, path


def write_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(cfg.dump())


def cmd_solve_brs(cfg: RunConfig, force: bool = False, allow_unconverged: bool = False) -> Path:
    path = Path(cfg.out_dir) / f"{vf_hash(cfg)[:16]}.hjvf" if cfg.out_dir else vf_cache_path(cfg)
    if path.exists() and not force:
        try:
            head = read_header(path)
        except (OSError, FormatError):
            head = None
        if head is not None and head.get("params_hash") == vf_hash(cfg):
            if not head.get("converged") and not allow_unconverged:
                raise CommandError(f"cached {path} is not converged (residual {head.get('residual'):.3g})",
                                   EXIT_UNCONVERGED)
            print(f"cache hit: {path} ({head.get('iterations')} sweeps, residual {head.get('residual'):.3g})")
            return path
    t0 = time.perf_counter()
    s = cfg.solver
    vf = solve_brs(cfg.grid, cfg.game, tol=s.tol, max_iters=s.max_iters, cfl=s.cfl)
    wall = time.perf_counter() - t0
    print(f"sweeps {vf.iterations}  residual {vf.residual:.3g}  wall {wall:.1f}s  "
          f"converged {vf.converged}")
    if not vf.converged and not allow_unconverged:
        raise CommandError(f"solver did not converge within {s.max_iters} sweeps "
                           f"(residual {vf.residual:.3g} > tol {s.tol:g}); "
                           f"raise solver.max_iters or pass --allow-unconverged", EXIT_UNCONVERGED)
    if not vf.converged:
        print(f"warning: writing unconverged value function (residual {vf.residual:.3g})")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_value_function(vf, path)
    write_config(cfg, path.parent)
    print(f"wrote {path}")
    return path


# -- evaluation campaigns -----------------------------------------------------

_WORKER: dict = {}


def _init_worker(vf_path: str, checkpoint: str | None):
    _WORKER["vf"] = load_value_function(vf_path)
    _WORKER["model"] = load_model(checkpoint) if checkpoint else None


def _run_trial(job):
    cfg, spec, n_adopters = job
    sups = make_supervisors(spec.n_agents, cfg.supervisor.kind, _WORKER["vf"], adopters=n_adopters,
                            model=_WORKER["model"], threshold=cfg.supervisor.threshold,
                            hysteresis=cfg.supervisor.hysteresis)
    return run_episode(spec, cfg.env_config(), _WORKER["vf"], sups)


def run_trials(cfg: RunConfig, vf_path: Path, jobs: list) -> list[EpisodeTrace]:
    ckpt = cfg.supervisor.checkpoint if cfg.supervisor.kind == "learned" else None
    if cfg.run.workers <= 1:
        _init_worker(str(vf_path), ckpt)
        return [_run_trial(j) for j in jobs]
    with ProcessPoolExecutor(cfg.run.workers, initializer=_init_worker,
                             initargs=(str(vf_path), ckpt)) as pool:
        # map preserves submission order, so merging is by trial index
        return list(pool.map(_run_trial, jobs, chunksize=max(1, len(jobs) // (4 * cfg.run.workers))))


def trace_metrics(traces: list[EpisodeTrace], adopters: list[int]) -> dict:
    n = traces[0].n_agents
    counts = {SUCCESS: 0, COLLISION: 0, TIMEOUT: 0}
    agent_succ = np.zeros(n)
    agent_total = np.zeros(n)
    interrupts = decisions = 0
    for tr in traces:
        for i, s in enumerate(tr.final_status()):
            if s == FROZEN:
                continue
            agent_total[i] += 1
            agent_succ[i] += s == SUCCESS
            if s in counts:
                counts[s] += 1
        for step in tr.steps:
            for i in adopters:
                a = step["agents"][i]["action"]
                if a is not None:
                    decisions += 1
                    interrupts += a != 0
    adopt_total = agent_total[adopters].sum()
    row = {
        "success_rate": float(agent_succ.sum() / max(agent_total.sum(), 1)),
        "adopter_success_rate": float(agent_succ[adopters].sum() / adopt_total) if adopt_total else float("nan"),
        "restrictiveness": float(interrupts / decisions) if decisions else 0.0,
        "collisions": counts[COLLISION],
        "timeouts": counts[TIMEOUT],
        "successes": counts[SUCCESS],
    }
    for i in range(n):
        row[f"agent{i}_success"] = float(agent_succ[i] / agent_total[i]) if agent_total[i] else float("nan")
    return row


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    path.write_text(buf.getvalue())


def default_run_dir(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) if cfg.out_dir else cfg.output_root() / name


def cmd_run(cfg: RunConfig) -> dict:
    vf, vf_path = resolve_value_function(cfg)
    spec0 = cfg.task
    n = spec0.n_agents
    k = n if cfg.supervisor.adopters is None else cfg.supervisor.adopters
    out = default_run_dir(cfg, f"run-{spec0.label()}-{cfg.supervisor.kind}-k{k}-s{cfg.seed}")
    write_config(cfg, out)
    jobs, keys = [], []
    for rep in range(cfg.run.repetitions):
        for trial in range(cfg.run.trials):
            jobs.append((cfg, spec0.with_seed(episode_seed(cfg.seed, rep, trial)), k))
            keys.append((rep, trial))
    traces = run_trials(cfg, vf_path, jobs)
    if cfg.run.write_traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for (rep, trial), tr in zip(keys, traces):
            tr.write(tdir / f"rep{rep}_trial{trial:04d}.jsonl")
    adopters = list(range(k))
    rows = []
    for rep in range(cfg.run.repetitions):
        sel = [tr for (r, _), tr in zip(keys, traces) if r == rep]
        rows.append({"repetition": rep, "trials": len(sel), **trace_metrics(sel, adopters)})
    write_csv(out / "metrics.csv", rows)
    summary = []
    for key in rows[0]:
        if key in ("repetition", "trials"):
            continue
        vals = np.array([r[key] for r in rows], dtype=float)
        summary.append({"metric": key, "mean": float(np.mean(vals)), "std": float(np.std(vals)),
                        "min": float(np.min(vals)), "max": float(np.max(vals))})
    write_csv(out / "summary.csv", summary)
    result = {s["metric"]: s["mean"] for s in summary}
    result["out_dir"] = str(out)
    print(f"{spec0.label()} supervisor={cfg.supervisor.kind} adopters={k}: "
          f"success {result['success_rate']:.3f}  adopter success {result['adopter_success_rate']:.3f}  "
          f"collisions/rep {result['collisions']:.1f}  restrictiveness {result['restrictiveness']:.3f}")
    return result


# -- training -----------------------------------------------------------------

def make_trainer(cfg: RunConfig, vf, out: Path | None, eval_tasks=None) -> Trainer:
    tc = dataclasses.replace(cfg.train, seed=cfg.seed)
    return Trainer([cfg.task], cfg.env_config(), vf, cfg.vae, cfg.ppo, tc, out_dir=out,
                   eval_tasks=eval_tasks)


def cmd_train(cfg: RunConfig, resume: bool = False, on_round=None) -> Trainer:
    vf, _ = resolve_value_function(cfg)
    out = default_run_dir(cfg, f"train-{cfg.task.label()}-{cfg.reward.kind}-h{cfg.vae.history}-s{cfg.seed}")
    write_config(cfg, out)
    tr = make_trainer(cfg, vf, out)
    if resume and tr.checkpoint_path.exists():
        try:
            tr.load()
        except ValueError as exc:
            raise CommandError(str(exc), EXIT_CONFIG) from exc
        print(f"resumed from {tr.checkpoint_path} at round {tr.state.round}")

    def show(row):
        print(f"round {row['round']}: elbo {row['elbo']:.4g}  critic {row['critic_loss']:.4g}  "
              f"train success {row['train_success']:.3f}  eval success {row['eval_success']:.3f}  "
              f"restrictiveness {row['eval_restrictiveness']:.3f}", flush=True)
        if on_round is not None:
            on_round(row)

    if not tr.checkpoint_path.exists():
        tr.save()  # initial parameters, so divergence in round 0 still leaves a checkpoint
    try:
        tr.train(on_round=show)
    except TrainingDivergence as exc:
        raise CommandError(f"{exc}; last good checkpoint: {tr.checkpoint_path}", EXIT_DIVERGED) from exc
    tr.write_log()
    return tr


# -- ablations ----------------------------------------------------------------

ABLATION_VARIANTS = {
    "hj_history4": {},
    "distance_history4": {"reward": {"kind": "distance"}},
    "hj_single_step": {"vae": {"history": 1}},
}


def ablation_suite(cfg: RunConfig) -> list:
    extra = [dataclasses.replace(cfg.task, n_agents=int(n), scenario=cfg.ablate.scenario)
             for n in cfg.ablate.agents]
    return [cfg.task] + [t for t in extra if t != cfg.task]


def _variant_cfg(cfg: RunConfig, changes: dict) -> RunConfig:
    kw = {}
    for sec, vals in changes.items():
        kw[sec] = dataclasses.replace(getattr(cfg, sec), **vals)
    return dataclasses.replace(cfg, **kw)


def evaluate_default(cfg: RunConfig, vf, suite, n_episodes: int) -> list[float]:
    """Always-default success on the same evaluation seeds the trainer uses."""
    rates = []
    for ti, task in enumerate(suite):
        traces = [run_episode(task.with_seed(episode_seed(cfg.seed, 10**6, ti, e)), cfg.env_config(), vf,
                              make_supervisors(task.n_agents, "none", vf))
                  for e in range(n_episodes)]
        rates.append(success_rate(traces))
    return rates


def cmd_ablate(cfg: RunConfig, variants=None) -> dict:
    vf, _ = resolve_value_function(cfg)
    out = default_run_dir(cfg, f"ablate-{cfg.task.label()}-s{cfg.seed}")
    write_config(cfg, out)
    suite = ablation_suite(cfg)
    cols = [t.label() for t in suite]
    n_eval = cfg.ablate.eval_episodes
    results = {"none": evaluate_default(cfg, vf, suite, n_eval)}
    logs = {}
    for name in (variants or ABLATION_VARIANTS):
        vcfg = _variant_cfg(cfg, ABLATION_VARIANTS[name])
        vdir = out / name
        write_config(vcfg, vdir)
        tr = make_trainer(vcfg, vf, vdir, eval_tasks=suite[:1])
        print(f"training variant {name}", flush=True)
        try:
            tr.train()
        except TrainingDivergence as exc:
            raise CommandError(f"variant {name}: {exc}", EXIT_DIVERGED) from exc
        results[name] = [success_rate(t) for t in tr.eval_traces(n_eval, suite)]
        logs[name] = tr.log_rows

    def table(names):
        return [{"algorithm": nm, **{c: results[nm][j] for j, c in enumerate(cols)}}
                for nm in names if nm in results]
    write_csv(out / "reward_ablation.csv", table(["hj_history4", "distance_history4", "none"]))
    write_csv(out / "observation_ablation.csv", table(["hj_history4", "hj_single_step", "none"]))
    for nm, rates in results.items():
        print(f"{nm:18s} " + "  ".join(f"{c}={r:.3f}" for c, r in zip(cols, rates)))
    return {"columns": cols, "results": results, "logs": logs, "out_dir": str(out)}


# -- plotting -----------------------------------------------------------------

def cmd_plot(paths, out_dir=None) -> list[Path]:
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.rglob("*.jsonl")) if p.is_dir() else [p])
    if not files:
        raise CommandError("no trace files found", EXIT_IO)
    written = []
    for f in files:
        target = Path(out_dir) / f.with_suffix(".svg").name if out_dir else None
        if target is not None:
            target.parent.mkdir(parents=True, exist_ok=True)
        written.append(plot_trace_file(f, target))
    print(f"wrote {len(written)} SVG file(s)")
    return written


# -- argument parsing ---------------------------------------------------------

def _yaml_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key, e.g. --set ppo.gamma=0.95")
    p.add_argument("--seed", type=int, dest="cfg.seed")
    p.add_argument("--out", dest="cfg.out_dir", help="output directory (default: $HJSHIELD_OUT/<name>)")
    p.add_argument("--value-function", dest="cfg.value_function", help="explicit HJVF1 file")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_task(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-agents", type=int, dest="cfg.task.n_agents")
    p.add_argument("--scenario", choices=["moderate", "difficult"], dest="cfg.task.scenario")
    p.add_argument("--radius", type=float, dest="cfg.task.r", help="difficult-scenario circle radius")
    p.add_argument("--reward", choices=["hj", "distance"], dest="cfg.reward.kind")


def _add_dataclass_flags(p: argparse.ArgumentParser, section: str, cls) -> None:
    g = p.add_argument_group(f"{section} fields")
    for f in dataclasses.fields(cls):
        g.add_argument(f"--{section}-{f.name.replace('_', '-')}", type=_yaml_value,
                       dest=f"cfg.{section}.{f.name}", metavar="V")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hjshield", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-brs", help="solve and cache the pairwise value function")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="recompute even on a cache hit")
    p.add_argument("--allow-unconverged", action="store_true")
    p.add_argument("--max-iters", type=int, dest="cfg.solver.max_iters")
    p.add_argument("--tol", type=float, dest="cfg.solver.tol")

    p = sub.add_parser("run", help="evaluate a supervisor over seeded trials")
    _add_common(p)
    _add_task(p)
    p.add_argument("--supervisor", choices=["none", "classical", "learned", "always_interrupt"],
                   dest="cfg.supervisor.kind")
    p.add_argument("--adopters", type=int, dest="cfg.supervisor.adopters")
    p.add_argument("--threshold", type=float, dest="cfg.supervisor.threshold")
    p.add_argument("--checkpoint", dest="cfg.supervisor.checkpoint")
    p.add_argument("--trials", type=int, dest="cfg.run.trials")
    p.add_argument("--repetitions", type=int, dest="cfg.run.repetitions")
    p.add_argument("--workers", type=int, dest="cfg.run.workers")
    p.add_argument("--no-traces", action="store_false", dest="cfg.run.write_traces", default=None)

    for name, help_ in (("train", "train the learned supervisor"),
                        ("ablate", "train paired reward / observation variants")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        _add_task(p)
        p.add_argument("--smoke", action="store_true", help="small networks, 10 rounds")
        _add_dataclass_flags(p, "vae", VAEConfig)
        _add_dataclass_flags(p, "ppo", PPOConfig)
        _add_dataclass_flags(p, "train", TrainConfig)
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from checkpoint.bin")
        else:
            p.add_argument("--eval-episodes", type=int, dest="cfg.ablate.eval_episodes")
            p.add_argument("--agents", type=int, nargs="+", dest="cfg.ablate.agents")

    p = sub.add_parser("plot", help="render JSON-lines traces as SVG")
    p.add_argument("traces", nargs="+", help="trace files or directories")
    p.add_argument("--out", dest="plot_out")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = [parse_override(s) for s in args.set]
    for dest, value in sorted(vars(args).items()):
        if dest.startswith("cfg.") and value is not None:
            path = dest[4:].split(".")
            if path == ["train", "seed"]:
                path = ["seed"]
            overrides.append((path, list(value) if isinstance(value, tuple) else value))
    profile = SMOKE_PROFILE if getattr(args, "smoke", False) else None
    return load_config(args.config, overrides, profile=profile)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            cmd_plot(args.traces, args.plot_out)
            return EXIT_OK
        cfg = config_from_args(args)
        if args.command == "solve-brs":
            cmd_solve_brs(cfg, force=args.force, allow_unconverged=args.allow_unconverged)
        elif args.command == "run":
            cmd_run(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "ablate":
            cmd_ablate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TraceFormatError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
