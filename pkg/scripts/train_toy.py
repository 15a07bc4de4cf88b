"""Build the toy corpus (empty 10x10 maps, 4 agents), train a Decision
Transformer on it and report training accuracy and held-out success rate."""
import argparse
import json
import logging
import time
from pathlib import Path

from dtmapf.dataset import CorpusSpec, build_corpus, read_dataset
from dtmapf.env import EpisodeConfig, generate_map, sample_instance
from dtmapf.model import DTConfig
from dtmapf.policy import DTPolicy, run_episode
from dtmapf.training import TrainConfig, evaluate_accuracy, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/toy")
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--stop-at-accuracy", type=float, default=0.99)
    p.add_argument("--eval-episodes", type=int, default=100)
    p.add_argument("--temperature", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    spec = CorpusSpec(agent_counts=(4,), grid_sizes=(10,), densities=(0.0,), envs_per_combo=args.episodes,
                      seed=args.seed, node_budget=20_000)
    build_corpus(spec, out / "toy.bin")
    _, chunks = read_dataset(out / "toy.bin")
    state = train(chunks, DTConfig(), TrainConfig(steps=args.steps, log_every=50), out_dir=out,
                  stop_at_accuracy=args.stop_at_accuracy)
    seconds = time.perf_counter() - t0
    acc = evaluate_accuracy(state.model, chunks, state.config.rtg_scale)

    state.model.eval()
    wins = 0
    for k in range(args.eval_episodes):
        grid = generate_map(10, 10, 0.0, 10_000 + k)
        inst = sample_instance(grid, 4, 20_000 + k)
        pol = DTPolicy(state.model, sample=True, seed=k, temperature=args.temperature)
        wins += run_episode(grid, inst, pol, EpisodeConfig(horizon=64)).success
    summary = {"seconds": round(seconds, 1), "steps": state.step, "train_accuracy": acc,
               "held_out_csr": wins / args.eval_episodes, "temperature": args.temperature}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
