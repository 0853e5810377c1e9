"""``logan-lab`` command line: train, eval, sweep, check, game.

Exit codes: 0 success, 1 a check or sweep cell failed, 2 invalid config
or arguments, 3 training aborted on a non-finite value, 4 unreadable
checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import games, plotting, storage
from .checks import run_checks
from .config import ConfigError, RunConfig, dump_config, load_config, load_mapping, parse_sweep
from .latent import PROFILES
from .metrics import EvalSettings, eval_latent_steps_sweep, generate_samples, truncation_sweep
from .trainer import TrainingAborted, eval_metrics, load_checkpoint, train

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ABORT, EXIT_CHECKPOINT = 0, 1, 2, 3, 4

log = logging.getLogger("logan_lab")


def _threads(n: int):
    if n < 1:
        raise ConfigError("--threads", "must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _out_dir(arg: str | None, cfg: RunConfig | None, default_name: str) -> Path:
    if arg:
        return Path(arg)
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    root = Path(os.environ.get("LOGAN_LAB_OUT", "runs"))
    return root / (cfg.run_id if cfg is not None else default_name)


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# -- train --------------------------------------------------------------------------

def run_training(cfg: RunConfig, out: Path, resume: str | None = None) -> dict:
    """Train one configuration into ``out``; returns the summary dict."""
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    tc = cfg.train_config()
    result = train(tc, out, resume_from=resume)
    model = result.state.model
    final = result.final_eval or eval_metrics(model, tc)
    z = np.random.default_rng([tc.seed, 2]).uniform(-1, 1, size=(tc.eval_samples, tc.latent_dim))
    plotting.scatter_svg(out / "samples.svg", generate_samples(model, z), tc.data.center_array,
                         title=f"{cfg.run_id} step {result.state.step}")
    summary = {"run_id": cfg.run_id, "seed": tc.seed, "steps": result.state.step,
               "proxy_fid": final[0], "mode_coverage": final[1], "hq_fraction": final[2]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = _out_dir(args.out, cfg, "run")
    try:
        summary = run_training(cfg, out, args.resume)
    except TrainingAborted as exc:
        print(f"error: {exc}" + (f" (dump: {exc.dump})" if exc.dump else ""), file=sys.stderr)
        return EXIT_ABORT
    print(json.dumps(summary))
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise storage.CheckpointError(f"{args.checkpoint}: no such checkpoint")
    state, tc = load_checkpoint(args.checkpoint)
    model = state.model
    rng = np.random.default_rng([tc.seed, 3])
    n = args.samples or tc.eval_samples
    settings = EvalSettings(tc.data.center_array, tc.data.sample(rng, n), tc.coverage_radius, n, args.eval_seed)
    out = _out_dir(args.out, None, "eval")
    out.mkdir(parents=True, exist_ok=True)
    latent = tc.latent or PROFILES["small"]
    if args.truncation:
        pts = truncation_sweep(model, _floats(args.truncation), settings)
        with storage.CsvLog(out / "truncation.csv", ("s", "proxy_fid", "mode_coverage", "hq_fraction")) as f:
            for p in pts:
                f.write(p)
        plotting.curve_svg(out / "truncation.svg", [p.s for p in pts],
                           {"proxy-FID": [p.proxy_fid for p in pts]}, "truncation s", "proxy-FID")
    if args.steps:
        pts = eval_latent_steps_sweep(model, _ints(args.steps), settings, latent)
        cols = ("steps", "proxy_fid", "mode_coverage", "hq_fraction", "mean_critic_gain", "ascent_violations")
        with storage.CsvLog(out / "eval_steps.csv", cols) as f:
            for p in pts:
                f.write(p)
        plotting.curve_svg(out / "eval_steps.svg", [p.steps for p in pts],
                           {"proxy-FID": [p.proxy_fid for p in pts]}, "latent steps", "proxy-FID")
    print(f"wrote {out}")
    return EXIT_OK


# -- sweep --------------------------------------------------------------------------

def cell_seed(master: int, index: int) -> int:
    """Cell i trains with seed master + i, so a one-point grid equals ``train``."""
    return (int(master) + int(index)) % 2**63


def _run_cell(job) -> dict:
    index, point, cfg, out = job
    row = {"cell": index, **point, "seed": cfg.seed}
    try:
        summary = run_training(cfg, Path(out))
        row.update(status="ok", proxy_fid=summary["proxy_fid"], mode_coverage=summary["mode_coverage"],
                   hq_fraction=summary["hq_fraction"])
    except Exception as exc:  # recorded per cell, the sweep carries on
        row.update(status=f"failed: {type(exc).__name__}: {exc}", proxy_fid=None, mode_coverage=None,
                   hq_fraction=None)
    return row


def cmd_sweep(args) -> int:
    sweep = parse_sweep(load_mapping(args.config))
    base_seed = args.seed if args.seed is not None else sweep.base.seed
    out = _out_dir(args.out, sweep.base, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for index, point, cfg in sweep.cells():
        if "seed" not in point:
            cfg = cfg.with_seed(cell_seed(base_seed, index))
        jobs.append((index, point, cfg, str(out / f"cell{index:03d}")))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    rows.sort(key=lambda r: (r["proxy_fid"] is None, r["proxy_fid"] if r["proxy_fid"] is not None else 0.0, r["cell"]))
    keys = [k for k in ("alpha", "beta", "w_r", "c") if k in sweep.grid]
    cols = ["cell", *keys, "seed", "proxy_fid", "mode_coverage", "hq_fraction", "status"]
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} cells, {len(failed)} failed; results in {out / 'results.csv'}")
    return EXIT_FAILED if failed else EXIT_OK


# -- check --------------------------------------------------------------------------

def cmd_check(args) -> int:
    results = run_checks(args.seed if args.seed is not None else 0)
    for r in results:
        print(r.line())
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return EXIT_FAILED if n_fail else EXIT_OK


# -- game ---------------------------------------------------------------------------

def _make_game(args) -> games.Game:
    x, y = args.start
    if args.game == "quadratic":
        q1 = np.array(_floats(args.q1)).reshape(2, 2)
        q2 = np.array(_floats(args.q2)).reshape(2, 2)
        return games.quadratic_game(q1, q2, _floats(args.b1), _floats(args.b2), x, y)
    return games.NAMED_GAMES[args.game](x, y)


def cmd_game(args) -> int:
    game = _make_game(args)
    traj = games.simulate_dynamics(game, args.method, args.lr, args.steps, lam=args.lam)
    out = _out_dir(args.out, None, f"game-{args.game}-{args.method}")
    out.mkdir(parents=True, exist_ok=True)
    names = game.param_names
    with storage.CsvLog(out / "trajectory.csv", ("step", *names, "param_norm", "grad_norm")) as f:
        for i, (p, norm) in enumerate(zip(traj.params, traj.param_norms)):
            grad = traj.grad_norms[i] if i < len(traj.grad_norms) else None
            f.write({"step": i, **dict(zip(names, p)), "param_norm": norm, "grad_norm": grad})
    plotting.phase_portrait_svg(out / "phase.svg", traj.params, title=f"{args.game} / {args.method}")
    print(f"{args.game} {args.method}: {len(traj.params) - 1} steps, "
          f"norm {traj.param_norms[0]:.4g} -> {traj.param_norms[-1]:.4g}" + ("  DIVERGED" if traj.diverged else ""))
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logan-lab", description="Latent-optimised GAN laboratory")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--out", default=None, help="output directory (default $LOGAN_LAB_OUT/<run id>)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 for reproducibility)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="truncation and latent-step sweeps on a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--truncation", default="1.0", help="comma-separated s values")
    e.add_argument("--steps", default="0", help="comma-separated latent step counts")
    e.add_argument("--samples", type=int, default=0)
    e.add_argument("--eval-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="grid over alpha, beta, w_r, c (and seeds)")
    s.add_argument("--config", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("check", parents=[common], help="run the oracle suite")
    c.set_defaults(func=cmd_check)

    g = sub.add_parser("game", parents=[common], help="simulate gradient dynamics on a small game")
    g.add_argument("--game", choices=[*sorted(games.NAMED_GAMES), "quadratic"], default="bilinear")
    g.add_argument("--method", choices=("simgrad", "sga", "unrolled", "logan"), default="simgrad")
    g.add_argument("--steps", type=int, default=100)
    g.add_argument("--lr", type=float, default=0.1)
    g.add_argument("--lam", type=float, default=1.0)
    g.add_argument("--start", type=float, nargs=2, default=(1.0, 1.0), metavar=("X", "Y"))
    g.add_argument("--q1", default="1,0,0,1", help="player 1 quadratic, row-major 2x2")
    g.add_argument("--q2", default="1,0,0,1")
    g.add_argument("--b1", default="0,0", help="player 1 linear term")
    g.add_argument("--b2", default="0,0")
    g.set_defaults(func=cmd_game)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except storage.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
