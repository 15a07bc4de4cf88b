"""Command-line entry point: dtmapf <subcommand> [options].

Every subcommand writes a ``*.manifest.json`` next to its output holding
the full configuration and sha256 hashes of its inputs and outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

log = logging.getLogger("dtmapf")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out, command: str, config: dict, inputs=(), outputs=()) -> Path:
    out = Path(out)
    path = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    data = {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=str))
    return path


def _config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


class CLIError(Exception):
    pass


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{what} not found: {p}")
    return p


def _load_json(path, what: str) -> dict:
    try:
        return json.loads(_need(path, what).read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"{what} {path} is not valid JSON: {exc}") from exc


# --- subcommands -------------------------------------------------------------

def cmd_gen(args) -> None:
    from .env import generate_map, sample_instance, save_instance

    grid = generate_map(args.size, args.size, args.density, args.seed)
    inst = sample_instance(grid, args.agents, args.seed + 1)
    save_instance(args.out, grid, inst, args.seed)
    write_manifest(args.out, "gen", _config(args), outputs=[args.out])


def cmd_plan(args) -> None:
    from .env import load_instance
    from .planner import plan_with_fallback

    grid, inst, _ = load_instance(_need(args.map, "instance file"))
    plan, planner = plan_with_fallback(grid, inst, args.horizon, args.budget, seed=args.seed)
    data = plan.to_json() | {"planner": planner}
    Path(args.out).write_text(json.dumps(data))
    log.info("%s plan: soc %d makespan %d", planner, plan.soc, plan.makespan)
    write_manifest(args.out, "plan", _config(args), inputs=[args.map], outputs=[args.out])


def cmd_dataset(args) -> None:
    from .dataset import CorpusSpec, build_corpus

    spec_data = _load_json(args.spec, "corpus spec") if args.spec else {}
    if args.seed is not None:
        spec_data["seed"] = args.seed
    if args.envs_per_combo is not None:
        spec_data["envs_per_combo"] = args.envs_per_combo
    try:
        spec = CorpusSpec.from_json(spec_data)
    except TypeError as exc:
        raise CLIError(f"bad corpus spec: {exc}") from exc
    meta = build_corpus(spec, args.out, progress=True)
    log.info("%d episodes, %d chunks, %d skipped", meta.episodes, meta.chunks, len(meta.skipped))
    write_manifest(args.out, "dataset", asdict(spec), inputs=[args.spec] if args.spec else [], outputs=[args.out])


def cmd_train(args) -> None:
    from .dataset import read_dataset
    from .model import DTConfig
    from .training import TrainConfig, load_checkpoint, train

    cfg = _load_json(args.config, "training config") if args.config else {}
    dt_cfg = DTConfig.from_json(cfg.get("model", {}))
    tr = cfg.get("train", {})
    if args.steps is not None:
        tr["steps"] = args.steps
    if args.deterministic is not None:
        tr["deterministic"] = args.deterministic
    tr_cfg = TrainConfig.from_json(tr)
    _, chunks = read_dataset(_need(args.data, "dataset"))
    state = load_checkpoint(args.resume, dt_cfg) if args.resume else None
    state = train(chunks, dt_cfg, tr_cfg, args.out, state, args.stop_at_accuracy)
    out = Path(args.out)
    write_manifest(
        out,
        "train",
        {"model": dt_cfg.to_json(), "train": asdict(tr_cfg), "stop_at_accuracy": args.stop_at_accuracy},
        inputs=[args.data] + ([args.config] if args.config else []),
        outputs=[out / "model.ckpt", out / "train_log.csv"],
    )


def _make_advisor_factory(args, out_path: Path):
    from .advisor import AdvisorPolicy, LLMAdvisor, LLMClient, LLMClientConfig, oracle_advise

    if args.advisor == "oracle":
        return lambda k: AdvisorPolicy(oracle_advise, name="oracle")
    if args.advisor == "llm":
        client = LLMClient(
            LLMClientConfig(model=args.llm_model, log_path=str(out_path.with_suffix(".llm.jsonl")), timeout=args.llm_timeout)
        )
        return lambda k: AdvisorPolicy(LLMAdvisor(client), name="llm")
    return lambda k: None


def _evaluate(args, scenario) -> None:
    from .metrics import aggregate, table2_rows, write_csv, write_json
    from .policy import DTPolicy
    from .scenario import SweepSpec, run_sweep
    from .training import load_model

    model, tcfg = load_model(_need(args.model, "model checkpoint"))
    out = Path(args.out)
    spec = SweepSpec(args.size, args.agents, args.density, scenario, args.episodes, args.seed)
    rows = run_sweep(
        spec,
        lambda k: DTPolicy(model, rtg_scale=tcfg.rtg_scale, sample=args.sample, seed=args.seed + k,
                           temperature=args.temperature),
        _make_advisor_factory(args, out),
    )
    table = aggregate(rows)
    write_csv(table2_rows(table), out)
    write_json(table, out.with_suffix(".json"))
    if args.records:
        with open(out.with_suffix(".records.jsonl"), "w") as f:
            for keys, rec in rows:
                f.write(json.dumps({"keys": keys, "record": rec.to_json()}) + "\n")
    for r in table2_rows(table):
        log.info("%s", r)
    write_manifest(out, args.command, _config(args) | {"scenario": scenario.to_json()}, inputs=[args.model], outputs=[out])


def cmd_eval_static(args) -> None:
    from .scenario import ScenarioConfig

    mode = "static_rescue" if args.advisor != "none" else "static"
    _evaluate(args, ScenarioConfig(mode, None, 0.25, 0, args.advisor, args.rescue_budget, False, args.horizon, args.seed))


def cmd_eval_dynamic(args) -> None:
    from .scenario import T_CHANGE, ScenarioConfig

    t_change = args.t_change if args.t_change is not None else T_CHANGE.get(args.size)
    if t_change is None:
        raise CLIError(f"no default change time for size {args.size}; pass --t-change")
    sc = ScenarioConfig(
        "dynamic", t_change, args.fraction, args.window, args.advisor, None, args.advise_all_unfinished, args.horizon, args.seed
    )
    _evaluate(args, sc)


def cmd_verify(args) -> int:
    from .verify import run_all

    checks = run_all(quick=args.quick)
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.detail}")
    return 0 if all(c.ok for c in checks) else 1


# --- parser ------------------------------------------------------------------

def _eval_args(p) -> None:
    p.add_argument("--model", required=True, help="checkpoint written by `train`")
    p.add_argument("--size", type=int, default=20)
    p.add_argument("--agents", type=int, default=8)
    p.add_argument("--density", type=float, default=0.0)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--horizon", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample", action="store_true", help="sample DT actions instead of argmax")
    p.add_argument("--temperature", type=float, default=1.0, help="softmax temperature when sampling")
    p.add_argument("--advisor", choices=["oracle", "llm", "none"], default="oracle")
    p.add_argument("--llm-model", default="gpt-4o")
    p.add_argument("--llm-timeout", type=float, default=30.0)
    p.add_argument("--records", action="store_true", help="also dump every episode record")
    p.add_argument("--out", required=True, help="CSV output path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dtmapf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a random map and instance")
    p.add_argument("--size", type=int, default=10)
    p.add_argument("--agents", type=int, default=4)
    p.add_argument("--density", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("plan", help="plan an instance with CBS (prioritized fallback)")
    p.add_argument("--map", required=True, help="instance JSON from `gen`")
    p.add_argument("--budget", type=int, default=100_000, help="CBS node budget")
    p.add_argument("--horizon", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("dataset", help="build an expert trajectory corpus")
    p.add_argument("--spec", help="corpus spec JSON (defaults to the full grid)")
    p.add_argument("--seed", type=int)
    p.add_argument("--envs-per-combo", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train a Decision Transformer")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help='JSON with optional "model" and "train" sections')
    p.add_argument("--steps", type=int)
    p.add_argument("--stop-at-accuracy", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-static", help="static evaluation, optionally with late advisor rescue")
    _eval_args(p)
    p.add_argument("--rescue-budget", type=int, help="DT-only steps before rescue (default horizon/2)")
    p.set_defaults(func=cmd_eval_static, advisor="none")

    p = sub.add_parser("eval-dynamic", help="goal-change evaluation with an advisor window")
    _eval_args(p)
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--t-change", type=int)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--advise-all-unfinished", action="store_true")
    p.set_defaults(func=cmd_eval_dynamic)

    p = sub.add_parser("verify", help="run the built-in correctness checks")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    func = args.func
    try:
        rc = func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
