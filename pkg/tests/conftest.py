import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import pytest

from policy_smoothing import __version__
from policy_smoothing.agents import (DDPG_PROFILES, DQN_PROFILES, load_agent, save_agent, train_ddpg,
                                     train_dqn)
from policy_smoothing.env import CartPole, MountainCar


def _cached(cache_dir: Path, kind: str, sigma: float, profile: str, seed: int):
    hp = (DQN_PROFILES if kind == "dqn" else DDPG_PROFILES)[profile]
    key = json.dumps([__version__, kind, sigma, seed, asdict(hp)], sort_keys=True, default=list)
    path = cache_dir / f"{kind}_{profile}_s{sigma}_{hashlib.sha256(key.encode()).hexdigest()[:12]}.json"
    if path.exists():
        return load_agent(path)
    if kind == "dqn":
        agent, _ = train_dqn(CartPole(), sigma, hp, seed)
    else:
        agent, _ = train_ddpg(MountainCar(), sigma, hp, seed)
    save_agent(agent, path)
    return agent


@pytest.fixture(scope="session")
def agent_cache(request) -> Path:
    return Path(request.config.cache.mkdir("policy_smoothing_agents"))


@pytest.fixture(scope="session")
def undefended_dqn(agent_cache):
    """CartPole DQN trained without noise (fast profile, seed 0)."""
    return _cached(agent_cache, "dqn", 0.0, "fast", 0)


@pytest.fixture(scope="session")
def smoothed_dqn(agent_cache):
    """CartPole DQN trained and evaluated under sigma = 0.2 (fast profile, seed 0)."""
    return _cached(agent_cache, "dqn", 0.2, "fast", 0)


@pytest.fixture(scope="session")
def smoothed_ddpg(agent_cache):
    """Mountain Car DDPG under sigma = 0.2 (fast profile, seed 0)."""
    return _cached(agent_cache, "ddpg", 0.2, "fast", 0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
