import logging
import os
import time
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=15, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

# toy Decision Transformer shared by the learning-capacity and dynamic checks
TOY_EPISODES = 500
TOY_SEED = 1
TOY_MAX_STEPS = 1500
TOY_STOP_ACCURACY = 0.99


@pytest.fixture(scope="session")
def toy_model(tmp_path_factory):
    """Corpus of 500 expert episodes on empty 10x10 maps with 4 agents and a
    model trained on it. Set DTMAPF_TOY_DIR to reuse a previous run."""
    from dtmapf.dataset import CorpusSpec, build_corpus, read_dataset
    from dtmapf.model import DTConfig
    from dtmapf.training import TrainConfig, evaluate_accuracy, load_checkpoint, train

    cached = os.environ.get("DTMAPF_TOY_DIR")
    out = Path(cached) if cached else tmp_path_factory.mktemp("toy")
    out.mkdir(parents=True, exist_ok=True)
    data, ckpt = out / "toy.bin", out / "model.ckpt"
    t0 = time.perf_counter()
    if not data.exists():
        spec = CorpusSpec(
            agent_counts=(4,), grid_sizes=(10,), densities=(0.0,), envs_per_combo=TOY_EPISODES,
            seed=TOY_SEED, node_budget=20_000,
        )
        build_corpus(spec, data)
    t_data = time.perf_counter() - t0
    meta, chunks = read_dataset(data)
    if ckpt.exists():
        state = load_checkpoint(ckpt)
    else:
        logging.getLogger("dtmapf").setLevel(logging.INFO)
        state = train(
            chunks, DTConfig(), TrainConfig(steps=TOY_MAX_STEPS, log_every=50), out_dir=out,
            stop_at_accuracy=TOY_STOP_ACCURACY,
        )
    seconds = time.perf_counter() - t0
    acc = evaluate_accuracy(state.model, chunks, state.config.rtg_scale)
    state.model.eval()
    return {
        "model": state.model,
        "config": state.config,
        "meta": meta,
        "chunks": chunks,
        "accuracy": acc,
        "seconds": seconds,
        "data_seconds": t_data,
        "steps": state.step,
        "dir": out,
    }


@pytest.fixture(scope="session")
def expert_chunks(tmp_path_factory):
    """Chunks from 8 expert episodes on empty 10x10 maps with 4 agents."""
    from dtmapf.dataset import CorpusSpec, build_corpus, read_dataset

    path = tmp_path_factory.mktemp("expert") / "small.bin"
    build_corpus(CorpusSpec(agent_counts=(4,), grid_sizes=(10,), densities=(0.0,), envs_per_combo=8, seed=7), path)
    return read_dataset(path)[1]


class ExternalNetworkBlocked(OSError):
    pass


@pytest.fixture(scope="session", autouse=True)
def no_external_network():
    """Refuse socket connections to anything but loopback for the whole run."""
    import ipaddress
    import socket

    real = socket.socket.connect

    def guarded(self, address):
        if self.family in (socket.AF_INET, socket.AF_INET6):
            host = address[0]
            try:
                local = ipaddress.ip_address(host).is_loopback
            except ValueError:
                local = host == "localhost"
            if not local:
                raise ExternalNetworkBlocked(f"tests may not connect to {host}")
        return real(self, address)

    socket.socket.connect = guarded
    yield
    socket.socket.connect = real
