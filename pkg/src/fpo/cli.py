"""``fpo`` command line: train, eval, probe, sweep, print-config."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import RunConfig, load_config, to_toml, with_overrides
from .envs import make_env
from .flow import SAMPLERS, SamplerCfg


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["run.seed"] = args.seed
    for item in getattr(args, "set", None) or []:
        key, _, val = item.partition("=")
        over[key] = harness._parse_scalar(val)
    return with_overrides(cfg, over) if over else cfg.validate()


def _emit(obj) -> None:
    print(json.dumps(obj))


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out or f"runs/{cfg.run.env}-{cfg.run.algo}-s{cfg.run.seed}")

    def progress(rec):
        if not args.quiet and "eval_success" in rec:
            print(f"batch {rec['batch']:4d} steps {rec['env_steps']:8d} "
                  f"return {rec['eval_return']:.3f} success {rec['eval_success']:.2f}",
                  file=sys.stderr)

    res = harness.train(cfg, out, progress=progress)
    _emit({"status": "aborted" if res.aborted else "ok", "out_dir": str(out),
           "batches": res.batches, "env_steps": res.env_steps,
           "final_eval": res.final_eval.as_dict() if res.final_eval else None,
           "error": res.aborted})
    return 2 if res.aborted else 0


def cmd_eval(args) -> int:
    ck = harness.load_checkpoint(args.ckpt)
    env_name = args.env or ck.header["env"]
    env = make_env(env_name)
    if (env.spec.obs_dim, env.spec.act_dim) != (ck.policy.obs_dim, ck.policy.act_dim):
        raise ValueError(f"checkpoint ({ck.header['env']}) does not fit env {env_name}")
    sampler = None
    if args.sampler or args.steps:
        if ck.policy.kind != "flow":
            raise ValueError("--sampler/--steps apply to flow checkpoints only")
        base = harness.eval_sampler(ck.policy)
        sampler = SamplerCfg(args.sampler or base.method, args.steps or base.n_steps, 0.0)
    summary = harness.evaluate(ck.policy, ck.params, ck.norm, env, args.episodes, args.seed,
                               sampler=sampler, record=bool(args.trajectories))
    csv_path = Path(args.csv or Path(args.ckpt).with_name("eval_episodes.csv"))
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w") as fh:
        fh.write("episode,return,success,mode,length\n")
        for i in range(summary.n):
            fh.write(f"{i},{summary.returns[i]!r},{int(summary.successes[i])},"
                     f"{summary.modes[i]},{summary.lengths[i]}\n")
    if args.trajectories:
        harness.write_trajectories(summary, args.trajectories)
    _emit({"status": "ok", **summary.as_dict(), "csv": str(csv_path)})
    return 0


def cmd_probe(args) -> int:
    ck = harness.load_checkpoint(args.ckpt)
    env = make_env(ck.header["env"])
    state = [float(v) for v in args.state.split(",")]
    report, dump = harness.probe_multimodality(ck.policy, ck.params, ck.norm, env,
                                               np.array(state), args.samples, args.seed)
    if args.dump:
        np.savez(args.dump, **dump)
        report["dump"] = args.dump
    _emit({"status": "ok", **report})
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    grid = harness.parse_grid(args.grid)
    out = Path(args.out or "runs/sweep")
    rows = harness.sweep(cfg, grid, args.seeds, out,
                         progress=None if args.quiet else
                         lambda r: print(json.dumps(r), file=sys.stderr))
    _emit({"status": "ok", "cells": len(rows), "csv": str(out / "sweep.csv")})
    return 0


def cmd_print_config(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    sys.stdout.write(to_toml(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpo", description="Flow policy optimization at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--set", action="append", metavar="SEC.KEY=VAL")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env")
    e.add_argument("--episodes", type=int, default=64)
    e.add_argument("--sampler", choices=[s for s in SAMPLERS if s != "stochastic_euler"])
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--csv")
    e.add_argument("--trajectories", help="write per-step CSV here")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="sample many actions at one state and cluster them")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--state", required=True, help="comma separated, e.g. 12.5,12.5")
    pr.add_argument("--samples", type=int, default=256)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--dump", help=".npz path for samples and denoising snapshots")
    pr.set_defaults(func=cmd_probe)

    s = sub.add_parser("sweep", help="grid over whitelisted keys")
    s.add_argument("--config")
    s.add_argument("--grid", required=True, help='e.g. "fpo.clip_eps=0.05,0.1;flow.n_mc=1,8"')
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--set", action="append", metavar="SEC.KEY=VAL")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("print-config", help="print the (default) config as TOML")
    c.add_argument("--config")
    c.set_defaults(func=cmd_print_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as one machine-readable line
        print(json.dumps({"status": "error", "error": type(exc).__name__, "message": str(exc)}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
