"""Dynamic goal-change sweep with and without the oracle advisor.

Writes one MS/SR/CR row per (size, agents, method) as CSV and JSON.
"""
import argparse
from pathlib import Path

from dtmapf.advisor import AdvisorPolicy
from dtmapf.metrics import aggregate, table2_rows, write_csv, write_json
from dtmapf.policy import DTPolicy
from dtmapf.scenario import T_CHANGE, ScenarioConfig, SweepSpec, run_sweep
from dtmapf.training import load_model


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--model", required=True)
    p.add_argument("--sizes", type=int, nargs="+", default=[20])
    p.add_argument("--agents", type=int, nargs="+", default=[8])
    p.add_argument("--density", type=float, default=0.0)
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--horizon", type=int, default=128)
    p.add_argument("--temperature", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=6)
    p.add_argument("--out", default="runs/dynamic.csv")
    args = p.parse_args()

    model, _ = load_model(args.model)
    rows = []
    for size in args.sizes:
        for n in args.agents:
            for adv in ("none", "oracle"):
                sc = ScenarioConfig("dynamic", T_CHANGE[size], args.fraction, advisor=adv, horizon=args.horizon)
                spec = SweepSpec(size, n, args.density, sc, episodes=args.episodes, seed=args.seed)
                rows += run_sweep(
                    spec,
                    lambda k: DTPolicy(model, sample=True, seed=k, temperature=args.temperature),
                    lambda k: AdvisorPolicy(),
                )
    table = aggregate(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(table, out)
    write_json(table, out.with_suffix(".json"))
    for r in table2_rows(table):
        print(r)


if __name__ == "__main__":
    main()
