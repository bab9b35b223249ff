"""Command-line front end: ``flywheel-rl <subcommand> [options]``.

Every subcommand resolves an :class:`ExperimentConfig`, writes its outputs
into ``<out_dir>/<run_name>/`` together with ``config.yaml`` and
``manifest.json``, and exits 0.  Failures print one JSON line
``{"error": ..., "message": ..., "key": ...}`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __name__ as _pkg
from .config import ExperimentConfig, dump_config, parse_config, parse_overrides
from .distill import (
    SCHEMA_VERSION as DATASET_SCHEMA,
    DistillConfig,
    TrajectoryDataset,
    finetune_fewshot,
    generate_distill_dataset,
    train_generalist,
)
from .envworld import generate_env_family, load_specs, save_specs, trivial_spec
from .errors import ConfigError, FlywheelError
from .evalharness import (
    REPORT_COLUMNS,
    evaluate_disturbance,
    evaluate_multi_object,
    evaluate_success_rate,
    scaling_report,
)
from .expert import collect_demonstrations
from .flywheel import (
    LEDGER_SCHEMA_VERSION,
    env_ledger_csv,
    ledger_csv,
    run_flywheel,
    scanned_finetune,
)
from .nnet import GeneralistPolicy, load_policy, save_policy
from .ppo_bc import train_state_policy

log = logging.getLogger(_pkg)

EXIT_CONFIG = 2
EXIT_STAGE = 1

SCHEMAS = {
    "specs": "envspec-jsonl v1",
    "dataset": f"trajectory-dataset v{DATASET_SCHEMA}",
    "ledger": f"flywheel-ledger v{LEDGER_SCHEMA_VERSION}",
    "eval": "eval-report v1",
    "scaling": "scaling-report v1",
    "checkpoint": "flywheel-params v1",
}


class Run:
    """Run directory bookkeeping: resolved config plus a manifest of produced files."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = cfg.run_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}
        dump_config(cfg, self.dir / "config.yaml")

    def path(self, name: str) -> Path:
        return self.dir / name

    def produced(self, name: str, kind: str) -> Path:
        self.files[name] = kind
        return self.dir / name

    def finish(self) -> None:
        entries = []
        for name, kind in sorted(self.files.items()):
            p = self.dir / name
            digest = _digest(p)
            entries.append({"path": name, "kind": kind, "schema": SCHEMAS.get(kind), "sha256": digest})
        manifest = {"command": self.command, "seed": self.cfg.seed, "files": entries}
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _digest(p: Path) -> str:
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(x for x in p.rglob("*") if x.is_file()):
            h.update(str(f.relative_to(p)).encode())
            h.update(f.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def _specs(path: str | None, cfg: ExperimentConfig):
    if path:
        return load_specs(path)
    return generate_env_family(cfg.env.count, cfg.env.family_seed)


def _pick(specs, env_id: str | None):
    if env_id is None:
        if len(specs) != 1:
            raise ConfigError("several specs given; choose one with --env-id", "env_id")
        return specs[0]
    for s in specs:
        if s.env_id == env_id:
            return s
    raise ConfigError(f"no spec with id {env_id}", "env_id")


# --------------------------------------------------------------------------- subcommands


def cmd_gen_envs(args, cfg: ExperimentConfig, run: Run) -> None:
    if args.trivial:
        specs = [trivial_spec()]
    else:
        count = cfg.env.count if args.count is None else args.count
        specs = generate_env_family(count, cfg.env.family_seed if args.family_seed is None else args.family_seed,
                                    start=args.start)
    save_specs(specs, run.produced(args.name, "specs"))


def cmd_collect_demos(args, cfg: ExperimentConfig, run: Run) -> None:
    specs = _specs(args.envs, cfg)
    ds = TrajectoryDataset(run.produced(args.name, "dataset"))
    for i, s in enumerate(specs):
        ds.add_spec(s)
        ds.add(collect_demonstrations(s, args.n, seed=cfg.seed + i, cfg=cfg.expert))
    ds.write_manifest()


def cmd_train_rl(args, cfg: ExperimentConfig, run: Run) -> None:
    specs = _specs(args.envs, cfg)
    demos = []
    if args.demos:
        ds = TrajectoryDataset.open(args.demos)
        ids = {s.env_id for s in specs}
        demos = [t for e in ds.env_ids if e in ids for t in ds.trajs[e]]
    budget = cfg.flywheel.rl_budget if args.budget is None else args.budget
    res = train_state_policy(specs, demos, cfg.ppo, budget=budget, seed=cfg.seed,
                             metrics_path=run.produced("metrics.csv", "metrics"))
    save_policy(res.policy, run.produced(args.name, "checkpoint"))
    print(json.dumps({"best_success": res.best_success, "env_steps": res.env_steps}))


def cmd_distill(args, cfg: ExperimentConfig, run: Run) -> None:
    specs = _specs(args.envs, cfg)
    if args.dataset:
        ds = TrajectoryDataset.open(args.dataset)
    else:
        if not args.teacher:
            raise ConfigError("distill needs --teacher or --dataset", "teacher")
        ds = TrajectoryDataset(run.produced("dataset", "dataset"))
        generate_distill_dataset(load_policy(args.teacher), specs, cfg.distill.per_env, seed=cfg.seed, dataset=ds)
        ds.write_manifest()
    dc: DistillConfig = cfg.distill
    init = GeneralistPolicy.create(dc.embed_dim, dc.encoder_hidden, dc.head_hidden, seed=cfg.seed)
    res = train_generalist(init, ds, dc, seed=cfg.seed)
    save_policy(res.policy, run.produced(args.name, "checkpoint"))
    print(json.dumps({"epochs": res.epochs, "best_val_ll": res.best_val_ll}))


def cmd_flywheel(args, cfg: ExperimentConfig, run: Run) -> None:
    family = _specs(args.envs, cfg)
    heldout = load_specs(args.heldout) if args.heldout else None
    ds = TrajectoryDataset(run.produced("dataset", "dataset"))
    rows = []

    def checkpoint(pi, row):
        rows.append(row)
        save_policy(pi, run.produced(f"generalist_b{row.batch}.bin", "checkpoint"))
        run.produced("ledger.csv", "ledger").write_text(ledger_csv(rows))
        run.produced("ledger_envs.csv", "ledger").write_text(env_ledger_csv(rows))

    pi, _ = run_flywheel(family, cfg.flywheel_config(), seed=cfg.seed, heldout=heldout, dataset=ds,
                         on_batch=checkpoint)
    save_policy(pi, run.produced(args.name, "checkpoint"))
    sys.stdout.write(ledger_csv(rows))


def cmd_finetune_scan(args, cfg: ExperimentConfig, run: Run) -> None:
    spec = _pick(load_specs(args.envs), args.env_id)
    training = [s.env_id for s in load_specs(args.training)] if args.training else []
    res = scanned_finetune(load_policy(args.policy), spec, cfg.flywheel_config(), seed=cfg.seed,
                           training_ids=training)
    save_policy(res.policy, run.produced(args.name, "checkpoint"))
    print(json.dumps({"collected": res.collected, "rounds": res.rounds, "attempts": res.attempts}))


def cmd_finetune_fewshot(args, cfg: ExperimentConfig, run: Run) -> None:
    spec = _pick(load_specs(args.envs), args.env_id)
    demos = collect_demonstrations(spec, args.n, seed=cfg.seed, cfg=cfg.expert)
    tuned = finetune_fewshot(load_policy(args.policy), demos, spec, cfg.distill, seed=cfg.seed)
    save_policy(tuned, run.produced(args.name, "checkpoint"))


def cmd_eval(args, cfg: ExperimentConfig, run: Run) -> None:
    policy = load_policy(args.policy)
    specs = load_specs(args.envs)
    ev = cfg.eval
    n = ev.rollouts_per_env if args.rollouts is None else args.rollouts
    if args.mode == "standard":
        rep = evaluate_success_rate(policy, specs, n, seed=cfg.seed, deterministic_actions=ev.deterministic)
        text = rep.to_csv()
    elif args.mode == "disturbance":
        rep = evaluate_disturbance(policy, specs[0], n, ev.disturbance_step, seed=cfg.seed,
                                   deterministic_actions=ev.deterministic, specs=specs)
        text = rep.to_csv()
    else:
        lines = ["env_id,k,placed,episodes_used,episode_budget"]
        for s in specs:
            res = evaluate_multi_object(policy, s, ev.multi_objects, ev.multi_episodes, seed=cfg.seed,
                                        deterministic_actions=ev.deterministic)
            for k, (ok, used) in enumerate(zip(res.placed, res.episodes_used), start=1):
                lines.append(f"{s.env_id},{k},{int(ok)},{'' if used is None else used},{res.episodes_budget}")
        text = "\n".join(lines) + "\n"
    run.produced(args.name, "eval").write_text(text)
    sys.stdout.write(text)


def cmd_report(args, cfg: ExperimentConfig, run: Run) -> None:
    if args.checkpoints:
        heldout = load_specs(args.heldout)
        cps = []
        for item in args.checkpoints:
            count, path = item.split("=", 1)
            cps.append((int(count), load_policy(path)))
        text = scaling_report(cps, heldout, cfg.eval.rollouts_per_env, seed=cfg.seed,
                              deterministic_actions=cfg.eval.deterministic)
        run.produced("scaling.csv", "scaling").write_text(text)
        run.produced("scaling.svg", "plot").write_text(_svg_plot(text, "env_count", "mean_success"))
        sys.stdout.write(text)
    if args.ledger:
        text = Path(args.ledger).read_text()
        run.produced("human_demos.svg", "plot").write_text(_svg_plot(text, "batch", "human_demo_count"))
        run.produced("attempts.svg", "plot").write_text(_svg_plot(text, "batch", "model_demo_attempts"))


def _svg_plot(csv_text: str, xcol: str, ycol: str, w: int = 360, h: int = 240) -> str:
    """Minimal line plot of two CSV columns as standalone SVG."""
    import csv
    import io

    rows = [r for r in csv.DictReader(io.StringIO(csv_text)) if r.get(xcol, "").lstrip("-").replace(".", "").isdigit()]
    xs = [float(r[xcol]) for r in rows]
    ys = [float(r[ycol]) for r in rows]
    pad = 30
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(0.0, *ys), max(ys)) if ys else (0.0, 1.0)
    sx = lambda x: pad + (w - 2 * pad) * ((x - x0) / (x1 - x0) if x1 > x0 else 0.5)
    sy = lambda y: h - pad - (h - 2 * pad) * ((y - y0) / (y1 - y0) if y1 > y0 else 0.5)
    pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
    dots = "".join(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3"/>' for x, y in zip(xs, ys))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">'
        f'<text x="{w // 2}" y="16" text-anchor="middle" font-size="12">{ycol} vs {xcol}</text>'
        f'<polyline fill="none" stroke="black" points="{pts}"/>{dots}'
        f'<text x="{pad}" y="{h - 8}" font-size="10">{x0:g}</text>'
        f'<text x="{w - pad}" y="{h - 8}" font-size="10" text-anchor="end">{x1:g}</text>'
        f'<text x="4" y="{h - pad}" font-size="10">{y0:g}</text>'
        f'<text x="4" y="{pad}" font-size="10">{y1:g}</text></svg>\n'
    )


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flywheel-rl", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. ppo.learning_rate=1e-4 (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides config and FLYWHEEL_SEED)")
    common.add_argument("--out-dir", help="parent directory of run directories")
    common.add_argument("--run-name", help="run directory name")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, out, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("--name", default=out, help=f"output file name inside the run dir (default {out})")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-envs", cmd_gen_envs, "envs.jsonl", "write a seeded family of EnvSpecs")
    sp.add_argument("--count", type=int)
    sp.add_argument("--family-seed", type=int)
    sp.add_argument("--start", type=int, default=0)
    sp.add_argument("--trivial", action="store_true", help="write the single obstacle-free spec")

    sp = add("collect-demos", cmd_collect_demos, "demos", "expert demonstrations into a dataset directory")
    sp.add_argument("--envs")
    sp.add_argument("--n", type=int, default=10)

    sp = add("train-rl", cmd_train_rl, "policy.bin", "demo-bootstrapped PPO on state features")
    sp.add_argument("--envs")
    sp.add_argument("--demos", help="dataset directory with demonstrations")
    sp.add_argument("--budget", type=int, help="environment steps (default flywheel.rl_budget)")

    sp = add("distill", cmd_distill, "generalist.bin", "teacher rollouts -> observation policy")
    sp.add_argument("--envs")
    sp.add_argument("--teacher", help="state-policy checkpoint used to generate data")
    sp.add_argument("--dataset", help="existing dataset directory (skips generation)")

    sp = add("flywheel", cmd_flywheel, "generalist.bin", "amortized collection over batches of K envs")
    sp.add_argument("--envs")
    sp.add_argument("--heldout", help="specs evaluated after each batch")

    for name, fn, help_ in (("finetune-scan", cmd_finetune_scan, "adapt to one env from the policy's own successes"),
                            ("finetune-fewshot", cmd_finetune_fewshot, "head-only tuning on expert demos")):
        sp = add(name, fn, "finetuned.bin", help_)
        sp.add_argument("--policy", required=True)
        sp.add_argument("--envs", required=True)
        sp.add_argument("--env-id")
        if name == "finetune-scan":
            sp.add_argument("--training", help="training-family specs (target must not be among them)")
        else:
            sp.add_argument("--n", type=int, default=10)

    sp = add("eval", cmd_eval, "eval.csv", "success rates (standard, disturbance, multi_object)")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--envs", required=True)
    sp.add_argument("--mode", choices=["standard", "disturbance", "multi_object"], default="standard")
    sp.add_argument("--rollouts", type=int)

    sp = add("report", cmd_report, "report", "scaling CSV and ledger plots")
    sp.add_argument("--checkpoints", nargs="*", metavar="COUNT=PATH")
    sp.add_argument("--heldout")
    sp.add_argument("--ledger", help="ledger.csv from a flywheel run")
    return p


def _error_line(exc: BaseException, key: str | None = None) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "key": key})


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.set)
        for flag, key in (("seed", "seed"), ("out_dir", "out_dir"), ("run_name", "run_name")):
            if getattr(args, flag) is not None:
                overrides[key] = getattr(args, flag)
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(_error_line(exc, exc.key), file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = Run(cfg, args.command)
        args.fn(args, cfg, run)
        run.finish()
    except ConfigError as exc:
        print(_error_line(exc, exc.key), file=sys.stderr)
        return EXIT_CONFIG
    except (FlywheelError, OSError, ValueError, KeyError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
