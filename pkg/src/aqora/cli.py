"""Command-line entry point.

Every command reads one YAML config and works inside a run directory
(``--out``): ``data/`` holds the dataset, ``workload/`` the queries,
``checkpoint.bin`` and ``train_log.jsonl`` the training state, and
``eval/`` the CSV results.

Exit codes: 0 success, 1 unexpected error, 2 configuration error,
3 data error (missing or corrupt files), 4 training error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from aqora import config as cfgmod
from aqora.env import bind_queries
from aqora.errors import AqoraError, ConfigError, DataError
from aqora.evaluate import evaluate, summarize, write_csvs
from aqora.planir import plan_text
from aqora.ppo import EpisodeConfig, run_episode
from aqora.relstore import as_mapping, generate_dataset, load_dataset, save_dataset
from aqora.training import ModelSpec, Trainer, model_from_checkpoint
from aqora.workload import generate_workload, read_workload, write_workload

log = logging.getLogger("aqora")


def _load_config(args) -> cfgmod.RunConfig:
    overrides = {"max_steps": args.max_steps,
                 "curriculum": None if args.curriculum is None else args.curriculum == "on",
                 "methods": args.method}
    return cfgmod.load(args.config, seed=args.seed, overrides=overrides)


def _run_dir(args) -> Path:
    return Path(args.out)


def _dataset(args, cfg):
    data_dir = _run_dir(args) / "data"
    if not (data_dir / "manifest.json").exists():
        raise DataError(f"no dataset in {data_dir} (run gen-data first)")
    return as_mapping(load_dataset(data_dir))


def _checkpoint(args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else _run_dir(args) / "checkpoint.bin"


def cmd_gen_data(args, cfg):
    if cfg.schema is None:
        raise ConfigError("config has no schema section")
    path = save_dataset(generate_dataset(cfg.schema, cfg.seed), _run_dir(args) / "data")
    print(f"dataset written to {path.parent}")


def cmd_gen_workload(args, cfg):
    if cfg.schema is None:
        raise ConfigError("config has no schema section")
    wl = generate_workload(cfg.workload, cfg.schema)
    path = write_workload(wl, _run_dir(args) / "workload")
    print(f"{len(wl.train)} train / {len(wl.test)} test queries written to {path.parent}")


def _model_spec(wl, cfg) -> ModelSpec:
    return ModelSpec(wl.n_max, wl.vocab, cfg.train.conv, cfg.train.head_hidden, cfg.seed)


def cmd_train(args, cfg):
    wl = read_workload(_run_dir(args) / "workload")
    rels = _dataset(args, cfg)
    queries = bind_queries(wl.train, rels, cfg.sim, cfg.cbo, cfg.seed)
    trainer = Trainer(queries, _model_spec(wl, cfg), cfg.train, cfg.seed, cfg.sim.max_steps)
    ckpt = _checkpoint(args)
    _, result = trainer.run(ckpt, _run_dir(args) / "train_log.jsonl", resume=not args.fresh)
    print(f"trained {result.episodes} episodes ({result.updates} updates this run); checkpoint {ckpt}")


def _episode_config(spec: ModelSpec, cfg) -> EpisodeConfig:
    return EpisodeConfig(spec.n_max, spec.vocab, 3, frozenset(cfg.train.kinds), cfg.sim.max_steps)


def _maybe_model(args, wl, cfg):
    ckpt = _checkpoint(args)
    if "aqora" not in cfg.eval.methods:
        return None, None
    if not ckpt.exists():
        log.warning("checkpoint %s not found; skipping method aqora", ckpt)
        return None, None
    net, spec, _ = model_from_checkpoint(ckpt, wl.vocab)
    return net, _episode_config(spec, cfg)


def cmd_eval(args, cfg):
    wl = read_workload(_run_dir(args) / "workload")
    if not wl.test:
        raise ConfigError("workload has no test queries; regenerate it with n_test > 0")
    rels = _dataset(args, cfg)
    net, episode = _maybe_model(args, wl, cfg)
    queries = bind_queries(wl.test, rels, cfg.sim, cfg.cbo, cfg.seed)
    records = evaluate(queries, cfg.eval.methods, net, episode, cfg.eval.decision_charge, cfg.eval.reference)
    rec_path, sum_path = write_csvs(records, _run_dir(args) / "eval")
    for row in summarize(records):
        print(f"{row['method']:<24} total={row['total']:.3f} failures={row['failures']} "
              f"p90={row['p90']:.3f} bushy={row['bushy_fraction']:.2f}")
    print(f"records: {rec_path}\nsummary: {sum_path}")


def cmd_inspect_plan(args, cfg):
    wl = read_workload(_run_dir(args) / "workload")
    matches = [q for q in wl.queries if q.query_id == args.query] if args.query else wl.queries[:1]
    if not matches:
        raise DataError(f"query {args.query} not in workload")
    spec = matches[0]
    rels = _dataset(args, cfg)
    (query,) = bind_queries([spec], rels, cfg.sim, cfg.cbo, cfg.seed)
    lines = [f"query {spec.query_id} (template {spec.template}, {spec.split})",
             "predicates: " + ", ".join(str(p) for p in spec.predicates)]
    for label, use_cbo in (("syntactic", False), ("cbo", True)):
        plan, charge = query.plan(use_cbo)
        outcome, _ = query.execute(plan)
        lines.append(f"\n== {label} plan (planning {charge:.4f}s) -> {outcome.status}, "
                     f"execute {outcome.total_cost:.4f}s, {outcome.total_shuffles} shuffles")
        lines.append(plan_text(plan, exchanges=True).rstrip())
    net, episode = _maybe_model(args, wl, dataclasses.replace(cfg, eval=cfgmod.EvalConfig(methods=("aqora",))))
    if net is not None:
        _, outcome, steps = run_episode(query, net, episode, "greedy")
        lines.append(f"\n== aqora executed plan -> {outcome.status}, execute {outcome.total_cost:.4f}s, "
                     f"{outcome.total_shuffles} shuffles")
        for s in steps:
            lines.append(f"  step {s.step} [{s.phase}, {s.stages_done} stages done] {s.action}"
                         f"{'' if s.applied else ' (not applied)'} shuffles {s.shuffles_before}->{s.shuffles_after}")
        lines.append(plan_text(outcome.final_plan, exchanges=True).rstrip())
    text = "\n".join(lines) + "\n"
    if args.save:
        Path(args.save).write_text(text)
    sys.stdout.write(text)


COMMANDS = {"gen-data": cmd_gen_data, "gen-workload": cmd_gen_workload, "train": cmd_train,
            "eval": cmd_eval, "inspect-plan": cmd_inspect_plan}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (YAML)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.bin)")
    common.add_argument("--method", action="append", choices=cfgmod.METHODS,
                        help="evaluation method; repeat for several (default: all)")
    common.add_argument("--max-steps", type=int, help="agent decisions per query")
    common.add_argument("--curriculum", choices=("on", "off"), help="staged action unmasking during training")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="aqora", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "train":
            sp.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
        if name == "inspect-plan":
            sp.add_argument("--query", help="query id (default: first query)")
            sp.add_argument("--save", help="also write the report to this file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except AqoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps(diag, default=str, sort_keys=True)[:4000], file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
