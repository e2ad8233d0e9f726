"""Command-line entry point: ``ttavid adapt|infer|dist|ablate|simgen``.

Exit codes: 0 success, 2 configuration error, 3 backend error, 4 data-format error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import distribution as dist_ops
from . import experiments as X
from . import grpo, sim
from .config import ConfigError, RunConfig, load_config, render_config
from .distribution import BlendSpec, DistFormatError, GlobalPrior
from .orchestrator import accuracy, initial_distribution
from .remote import BackendError, ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("ttavid")


class DataError(ValueError):
    pass


def _apply_globals(cfg: RunConfig, args) -> RunConfig:
    run = cfg.run
    if getattr(args, "seed", None) is not None:
        run = replace(run, seed=args.seed)
    if getattr(args, "out", None):
        run = replace(run, out=args.out)
    if getattr(args, "backend", None):
        run = replace(run, backend=args.backend)
    return replace(cfg, run=run)


def _table(rows: list[dict], file=None) -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)
    cells = [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    text = "\n".join(lines)
    print(text, file=file or sys.stdout)
    return text


def _write_csv(path: Path, rows: list[dict]):
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in r.items()})


def _load(args) -> RunConfig:
    return _apply_globals(load_config(args.config), args)


def _samples(cfg: RunConfig, which: str = "train"):
    if cfg.run.backend == "sim":
        world = X.build_sim_world(cfg)
        return world.train if which == "train" else world.eval
    path = cfg.run.samples if which == "train" else (cfg.run.eval_samples or cfg.run.samples)
    if not path:
        raise ConfigError(f"run.{'samples' if which == 'train' else 'eval_samples'} is required "
                          "in remote mode")
    try:
        samples = X.load_samples(path, cfg.run.labels or None)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed samples file ({exc!r})") from None
    return samples[: cfg.adapt.batch_size] if which == "train" else samples


def cmd_adapt(args) -> int:
    cfg = _load(args)
    backend = X.make_backend(cfg)  # fails fast on missing endpoint settings
    samples = _samples(cfg, "train")
    policy = X.make_policy(cfg)
    out = Path(cfg.run.out)
    (out / "dist").mkdir(parents=True, exist_ok=True)
    (out / "effective_config.ini").write_text(render_config(cfg), encoding="utf-8")
    if cfg.run.backend == "sim":
        sim.dump_envs([s.env for s in samples], out / "sim_envs.json",
                      meta={"seed": cfg.run.seed, "split": "train"})

    result = X.run_adapt(cfg, samples, backend, policy, log_path=out / "rollouts.jsonl")

    stamp = X.created_unix(cfg)
    for s, d in zip(samples, result.distributions):
        dist_ops.write_fdist(out / "dist" / f"{s.video_id}.fdist.json", d,
                             video_id=s.video_id, question_id=s.question_id, created_unix=stamp)
    prior = X.global_prior(result)
    dist_ops.write_fdist(out / "global_prior.fdist.json", prior, created_unix=stamp)
    if result.policy is not None:
        (out / "policy.json").write_text(json.dumps(result.policy.to_dict()) + "\n", encoding="utf-8")

    rows = [s.as_row() for s in result.stats]
    _write_csv(out / "summary.csv", rows)
    _table(rows)
    print(f"{len(result.records)} rollouts, {result.bandit_updates} bandit updates, "
          f"{result.policy_steps} policy steps -> {out}")
    return EXIT_OK


def _load_policy(cfg: RunConfig, path: str | None):
    if path:
        return grpo.ToyPolicy.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    return X.make_policy(cfg)


def cmd_infer(args) -> int:
    cfg = _load(args)
    infer = cfg.infer
    if args.baseline:
        infer = replace(infer, baseline=args.baseline)
    if args.votes:
        infer = replace(infer, votes=args.votes)
    if args.frames:
        infer = replace(infer, frames=args.frames)
    cfg = replace(cfg, infer=infer)
    backend = X.make_backend(cfg)
    samples = _samples(cfg, "eval")

    prior = None
    if args.prior:
        prior = dist_ops.load_prior(args.prior)
        T = samples[0].T
        if prior.T != T:
            if not args.interpolate:
                raise DataError(f"prior grid has {prior.T} frames but samples have {T}; "
                                "pass --interpolate to regrid")
            prior = GlobalPrior(dist_ops.interpolate(prior.probs, T), prior.source_count)
    elif cfg.infer.baseline in ("learned", "blend"):
        raise ConfigError(f"baseline {cfg.infer.baseline!r} needs --prior")

    policy = _load_policy(cfg, args.policy)
    preds = X.evaluate(cfg, samples, prior, backend, policy)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps({"question_id": p.question_id, "answer": p.answer,
                                 "frames": list(p.frames), "correct": p.correct}) + "\n")
    absent = sum(p.answer is None for p in preds)
    acc = accuracy(preds)
    msg = f"{len(preds)} predictions ({absent} absent), baseline={cfg.infer.baseline}"
    if not np.isnan(acc):
        msg += f", accuracy={acc:.4f}"
    print(msg)
    return EXIT_OK


def cmd_dist(args) -> int:
    if args.action == "merge":
        dists = [dist_ops.load_distribution(p) for p in args.inputs]
        prior = dist_ops.average_distributions(dists)
        dist_ops.write_fdist(args.output, prior)
        print(f"merged {prior.source_count} distributions over {prior.T} frames -> {args.output}")
    elif args.action == "interpolate":
        doc = dist_ops.read_fdist(args.input)
        probs = dist_ops.interpolate(np.asarray(doc["probs"], dtype=float), args.frames)
        new = dict(doc, num_frames=len(probs), weights=[float(x) for x in probs],
                   probs=[float(x) for x in probs])
        dist_ops.write_fdist(args.output, new)
        print(f"interpolated {doc['num_frames']} -> {len(probs)} frames -> {args.output}")
    elif args.action == "blend":
        clip = dist_ops.read_fdist(args.clip)
        learned = dist_ops.read_fdist(args.learned)
        w_dist = 1.0 - args.w_clip if args.w_dist is None else args.w_dist
        probs = dist_ops.blend(np.asarray(clip["probs"], dtype=float),
                               np.asarray(learned["probs"], dtype=float),
                               BlendSpec(args.w_clip, w_dist))
        new = dict(learned, weights=[float(x) for x in probs], probs=[float(x) for x in probs])
        dist_ops.write_fdist(args.output, new)
        print(f"blended w_clip={args.w_clip} w_dist={w_dist} -> {args.output}")
    elif args.action == "show":
        doc = dist_ops.read_fdist(args.input)
        buf = io.StringIO()
        buf.write("frame_index,prob\n")
        for i, p in enumerate(doc["probs"]):
            buf.write(f"{i},{dist_ops._fmt_float(p)}\n")
        if args.output:
            Path(args.output).write_text(buf.getvalue(), encoding="utf-8")
        else:
            sys.stdout.write(buf.getvalue())
    return EXIT_OK


# -- ablations --------------------------------------------------------------------

def _informative_mass(samples, result) -> float | None:
    masses = [d.mass(s.env.informative) for s, d in zip(samples, result.distributions)
              if s.env is not None]
    return float(np.mean(masses)) if masses else None


def _ablation_rows(cfg: RunConfig, kind: str) -> list[dict]:
    world = X.build_sim_world(cfg)
    backend = X.make_backend(cfg)
    rows = []

    def run(c: RunConfig, label: dict, on_epoch=None):
        policy = X.make_policy(c)
        res = X.run_adapt(c, world.train, backend, policy, on_epoch=on_epoch)
        row = dict(label)
        row["informative_mass"] = _informative_mass(world.train, res)
        row["mean_reward"] = res.stats[-1].mean_reward
        row["majority_accuracy"] = res.stats[-1].majority_accuracy
        row["heldout_accuracy"] = X.heldout_accuracy(c, world, X.global_prior(res), res.policy,
                                                     baseline=_eval_baseline(c))
        return row

    if kind == "gt-reward":
        for mode in ("frequency", "gt"):
            c = replace(cfg, adapt=replace(cfg.adapt, reward_mode=mode))
            rows.append(run(c, {"reward": "majority" if mode == "frequency" else "ground-truth"}))
    elif kind == "uniform-init":
        for use_clip in (True, False):
            c = replace(cfg, adapt=replace(cfg.adapt, use_clip_init=use_clip),
                        sim=replace(cfg.sim, clip_scores=True))
            w = X.build_sim_world(c)
            res = X.run_adapt(c, w.train, backend, X.make_policy(c))
            rows.append({"init": "clip" if use_clip else "uniform",
                         "informative_mass": _informative_mass(w.train, res),
                         "mean_reward": res.stats[-1].mean_reward,
                         "majority_accuracy": res.stats[-1].majority_accuracy})
    elif kind == "vary-KN":
        for K in (4, 8):
            for N in (8, 16, 32):
                c = replace(cfg, adapt=replace(cfg.adapt, K=K, N=N))
                rows.append(run(c, {"K": K, "N": N}))
    elif kind == "epochs":
        def checkpoint(epoch, res):
            prior = X.global_prior(res)
            rows.append({"epoch": epoch + 1,
                         "informative_mass": _informative_mass(world.train, res),
                         "mean_reward": res.stats[-1].mean_reward,
                         "heldout_accuracy": X.heldout_accuracy(cfg, world, prior, res.policy,
                                                                baseline=_eval_baseline(cfg))})
        pol = X.make_policy(cfg)
        start = [initial_distribution(s, cfg.adaptation()).mass(s.env.informative)
                 for s in world.train]
        rows.append({"epoch": 0, "informative_mass": float(np.mean(start)), "mean_reward": None,
            "heldout_accuracy": X.heldout_accuracy(cfg, world, None, pol, baseline="random")})
        X.run_adapt(cfg, world.train, backend, pol, on_epoch=checkpoint)
    else:
        raise ConfigError(f"unknown ablation {kind!r}")
    return rows


def _eval_baseline(cfg: RunConfig) -> str:
    return cfg.infer.baseline if cfg.infer.baseline in ("random", "learned") else "learned"


def cmd_ablate(args) -> int:
    cfg = _load(args)
    if cfg.run.backend != "sim":
        if args.ablation == "gt-reward" and not cfg.run.labels:
            raise ConfigError("gt-reward ablation in remote mode needs run.labels")
        raise ConfigError("ablation sweeps run against the sim backend only")
    rows = _ablation_rows(cfg, args.ablation)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / f"ablation_{args.ablation}.csv", rows)
    _table(rows)
    return EXIT_OK


def cmd_simgen(args) -> int:
    cfg = _load(args)
    world = X.build_sim_world(cfg)
    path = Path(args.output or Path(cfg.run.out) / "simenv.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    sim.dump_envs([s.env for s in world.train + world.eval], path,
                  meta={"seed": cfg.run.seed, "train": len(world.train), "eval": len(world.eval)})
    print(f"wrote {len(world.train)} train + {len(world.eval)} eval environments -> {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("--backend", choices=["sim", "remote"], default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ttavid", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("adapt", parents=[common], help="run test-time adaptation")
    a.add_argument("config", help="config file or preset name")
    a.set_defaults(func=cmd_adapt)

    i = sub.add_parser("infer", parents=[common], help="adapted inference on the eval set")
    i.add_argument("config")
    i.add_argument("--prior", default=None, help="global prior (fdist-v1)")
    i.add_argument("--policy", default=None, help="toy-policy checkpoint (policy.json)")
    i.add_argument("--baseline", choices=["learned", "random", "clip", "blend", "self-consistency"])
    i.add_argument("--votes", type=int, default=None)
    i.add_argument("--frames", type=int, default=None)
    i.add_argument("--interpolate", action="store_true")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("dist", parents=[common], help="distribution file utilities")
    dsub = d.add_subparsers(dest="action", required=True)
    m = dsub.add_parser("merge")
    m.add_argument("output")
    m.add_argument("inputs", nargs="+")
    ip = dsub.add_parser("interpolate")
    ip.add_argument("input")
    ip.add_argument("output")
    ip.add_argument("--frames", type=int, required=True)
    b = dsub.add_parser("blend")
    b.add_argument("clip")
    b.add_argument("learned")
    b.add_argument("output")
    b.add_argument("--w-clip", type=float, default=0.0)
    b.add_argument("--w-dist", type=float, default=None)
    s = dsub.add_parser("show")
    s.add_argument("input")
    s.add_argument("--output", default=None)
    d.set_defaults(func=cmd_dist)

    ab = sub.add_parser("ablate", parents=[common], help="sim-mode ablation sweeps")
    ab.add_argument("config")
    ab.add_argument("--ablation", required=True,
                    choices=["gt-reward", "uniform-init", "vary-KN", "epochs"])
    ab.set_defaults(func=cmd_ablate)

    g = sub.add_parser("simgen", parents=[common], help="write a simenv-v1 batch")
    g.add_argument("config")
    g.add_argument("--output", default=None)
    g.set_defaults(func=cmd_simgen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DistFormatError, DataError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # bad argument values (blend weights, frame counts) are usage errors
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
