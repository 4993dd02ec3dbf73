"""Command line entry point: train, rollout, certify, attack, verify.

Every command writes plot-ready CSV files whose first line is a ``#`` comment
naming the units and a hash of the generating configuration, plus a
``<name>.meta.json`` record holding the full configuration and package
version. Outputs carry no timestamps, so the same configuration and seed give
byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .agents import DDPG_PROFILES, DQN_PROFILES, load_agent, save_agent, train_ddpg, train_dqn
from .attack import LAMBDA_GRID, LAMBDA_Q_GRID, AttackConfig, robustness_curve
from .certify import BoundInputs, certify_expected_reward, default_budget_grid, default_method
from .env import make_env
from .errors import BadConfig, MissingCheckpoint
from .smoothing import SmoothingConfig, read_total_rewards, run_episodes, write_transcripts
from .verify import nonisometry_demo, soundness_search, tightness_experiment


@dataclass
class RunConfig:
    env: str = "cartpole"
    sigma: float | None = None  # None: use the checkpoint's training sigma
    frames: int | None = None
    seed: int = 0
    episodes: int | None = None
    alpha: float = 0.05
    budgets: list | None = None
    threads: int | None = None
    out: str = "out"
    checkpoint: str | None = None
    transcripts: str | None = None
    profile: str = "desk"
    restarts: int = 1
    method: str | None = None
    lambdas: list | None = None
    eta: float = 0.01
    m: int = 0
    mode: str = "tightness"
    p: list = field(default_factory=lambda: [0.7, 0.9, 0.975])
    predicates: list = field(default_factory=lambda: ["and", "or", "xor"])
    c: float = 1.0
    rule: str = "sign"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @property
    def digest(self) -> str:
        """Hash of the fields that can change results (not ``threads`` or ``out``)."""
        d = {k: v for k, v in asdict(self).items() if k not in ("threads", "out")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _strings(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def merge_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the JSON ``--config`` file, then explicit flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
        known = {f.name for f in fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise BadConfig(f"unknown config keys {sorted(unknown)}")
        cfg = replace(cfg, **data)
    flags = {k: v for k, v in vars(args).items() if k in {f.name for f in fields(RunConfig)} and v is not None}
    cfg = replace(cfg, **flags)
    if cfg.episodes is not None and cfg.episodes < 1:
        raise BadConfig("episodes must be >= 1")
    if not 0 < cfg.alpha < 1:
        raise BadConfig("alpha must be in (0, 1)")
    if cfg.sigma is not None and cfg.sigma < 0:
        raise BadConfig("sigma must be >= 0")
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path: Path, header: list[str], rows, cfg: RunConfig, units: str, command: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# units: {units}; config_hash={cfg.digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    config = {k: v for k, v in asdict(cfg).items() if k not in ("threads", "out")}
    meta = {"command": command, "version": __version__, "config_hash": cfg.digest, "config": config}
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load(cfg: RunConfig):
    if not cfg.checkpoint:
        raise BadConfig("this command needs --checkpoint")
    return load_agent(cfg.checkpoint)


def _rollouts(cfg: RunConfig, agent, n):
    env = make_env(agent.env_name)
    sigma = agent.sigma if cfg.sigma is None else cfg.sigma
    smooth = SmoothingConfig(sigma, agent.frames, cfg.seed)
    return env, sigma, run_episodes(env, agent.act, smooth, n, threads=cfg.threads)


# commands ------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> Path:
    env = make_env(cfg.env)
    sigma = 0.0 if cfg.sigma is None else cfg.sigma
    out = _out_dir(cfg)
    if env.spec.discrete:
        if cfg.profile not in DQN_PROFILES:
            raise BadConfig(f"unknown profile {cfg.profile!r}")
        hp = DQN_PROFILES[cfg.profile]
        if cfg.frames is not None:
            hp = replace(hp, frames=cfg.frames)
        agent, log = train_dqn(env, sigma, hp, cfg.seed, cfg.restarts)
    else:
        if cfg.profile not in DDPG_PROFILES:
            raise BadConfig(f"unknown profile {cfg.profile!r}")
        hp = DDPG_PROFILES[cfg.profile]
        if cfg.frames is not None:
            hp = replace(hp, frames=cfg.frames)
        agent, log = train_ddpg(env, sigma, hp, cfg.seed)
    ckpt = out / "agent.json"
    save_agent(agent, ckpt)
    write_csv(out / "train_log.csv", ["step", "validation_mean_reward"], log.rows, cfg,
              "step=environment steps, reward=mean clean-smoothed episode total", "train")
    return ckpt


def cmd_rollout(cfg: RunConfig) -> Path:
    agent = _load(cfg)
    n = cfg.episodes or 1000
    env, sigma, rolls = _rollouts(cfg, agent, n)
    out = _out_dir(cfg)
    write_transcripts(out / "transcripts.jsonl", rolls)
    write_csv(out / "rewards.csv", ["episode", "total_reward", "length"],
              [(r.episode_index, r.total_reward, r.length) for r in rolls], cfg,
              "reward=episode total, length=steps", "rollout")
    return out / "transcripts.jsonl"


def cmd_certify(cfg: RunConfig) -> Path:
    n = 10_000 if cfg.episodes is None else cfg.episodes
    if n < 1:
        raise BadConfig("certification needs at least one episode")
    if cfg.transcripts:
        path = Path(cfg.transcripts)
        if not path.exists():
            raise MissingCheckpoint(f"no transcripts at {path}")
        samples = read_total_rewards(path)
        if samples.size == 0:
            raise BadConfig("transcript file holds no episodes")
        env = make_env(cfg.env)
        sigma = cfg.sigma
        if sigma is None:
            sigma = json.loads(path.read_text().splitlines()[0])["sigma"]
    else:
        agent = _load(cfg)
        env, sigma, rolls = _rollouts(cfg, agent, n)
        samples = np.array([r.total_reward for r in rolls])
    if not sigma > 0:
        raise BadConfig("certification needs sigma > 0")
    spec = env.spec
    budgets = cfg.budgets if cfg.budgets is not None else default_budget_grid(sigma)
    method = cfg.method or default_method(spec.reward_kind, samples, spec.reward_min, spec.reward_max)
    cert = certify_expected_reward(BoundInputs(samples, cfg.alpha, sigma, budgets), method,
                                   spec.reward_min, spec.reward_max)
    out = _out_dir(cfg)
    path = out / "certificate.csv"
    rows = [(float(b), float(lb), method, cert.n, cfg.alpha, float(sigma), cert.empirical_mean)
            for b, lb in zip(cert.budgets, cert.lower_bounds)]
    write_csv(path, ["budget", "certified_lower_bound", "method", "n", "alpha", "sigma", "empirical_mean"], rows,
              cfg, "budget=l2 norm over the episode, bound=expected episode total reward", "certify")
    return path


def cmd_attack(cfg: RunConfig) -> Path:
    agent = _load(cfg)
    env = make_env(agent.env_name)
    n = cfg.episodes or 1000
    budgets = cfg.budgets if cfg.budgets is not None else [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    if cfg.lambdas is not None:
        lambdas = cfg.lambdas
    elif agent.kind == "dqn":
        if agent.frames == 1:
            lambdas = LAMBDA_Q_GRID["cartpole_single"]
        elif tuple(agent.hyperparams.hidden) == tuple(DQN_PROFILES["reference"].hidden):
            lambdas = LAMBDA_Q_GRID["cartpole"]
        else:
            lambdas = LAMBDA_Q_GRID["cartpole_desk"]
    else:
        lambdas = LAMBDA_GRID["mountaincar"]
    sigma = agent.sigma if cfg.sigma is None else cfg.sigma
    base = AttackConfig(eta=cfg.eta, m=cfg.m, sigma=sigma, seed=cfg.seed)
    rows = robustness_curve(env, agent, budgets, lambdas, n, base, cfg.seed, cfg.threads)
    path = _out_dir(cfg) / "attack.csv"
    write_csv(path, ["budget", "lambda", "mean_reward", "std_error", "n"],
              [(r.budget, "min" if r.lam is None else r.lam, r.mean_reward, r.std_error, r.n) for r in rows],
              cfg, "budget=l2 norm over the episode, reward=mean attacked episode total, lambda=min is the "
                   "pointwise minimum over lambda", "attack")
    return path


def cmd_verify(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    sigma = 0.5 if cfg.sigma is None else cfg.sigma
    ratios = cfg.budgets if cfg.budgets is not None else [0.5, 1.0, 2.0]
    if cfg.mode == "tightness":
        n = cfg.episodes or 1_000_000
        rows = []
        for p in cfg.p:
            for k in ratios:
                r = tightness_experiment(p, k * sigma, sigma, n, cfg.seed, threads=cfg.threads)
                rows.append((p, k, r.budget, sigma, n, r.rate, r.bound, r.std_error, r.z, int(r.passed)))
        header = ["p", "budget_over_sigma", "budget", "sigma", "n", "empirical_rate", "bound", "std_error", "z",
                  "passed"]
        units = "rates=probabilities, budget=l2 norm"
    elif cfg.mode == "soundness":
        n = cfg.episodes or 200_000
        rows = []
        for pred in cfg.predicates:
            for k in ratios:
                r = soundness_search(pred, k * sigma, sigma, n_episodes=n, seed=cfg.seed, threads=cfg.threads)
                rows.append((pred, k, r.budget, sigma, r.p0, r.bound, r.search_min, r.search_min_static,
                             r.min_rate, r.combined_error, int(r.passed)))
        header = ["predicate", "budget_over_sigma", "budget", "sigma", "p0", "bound", "search_min",
                  "search_min_static", "min_rate", "combined_error", "passed"]
        units = "rates=probabilities, budget=l2 norm"
    elif cfg.mode == "nonisometry":
        n = cfg.episodes or 100_000
        r = nonisometry_demo(sigma, cfg.c, cfg.rule, n, cfg.seed)
        write_csv(out / "nonisometry_samples.csv", ["obs1", "obs2"], [tuple(map(float, s)) for s in r.samples],
                  cfg, "perceived observations, clean observations are 0", "verify")
        rows = [(sigma, cfg.c, cfg.rule, n, float(r.covariance[0, 0]), r.offdiag, float(r.covariance[1, 1]),
                 r.expected_offdiag, r.offdiag_std_error, r.kurtosis_second, r.expected_kurtosis_second)]
        header = ["sigma", "c", "rule", "n", "var1", "cov12", "var2", "expected_cov12", "cov12_std_error",
                  "kurtosis2", "mixture_kurtosis2"]
        units = "observation units"
    else:
        raise BadConfig(f"unknown verify mode {cfg.mode!r}")
    path = out / f"verify_{cfg.mode}.csv"
    write_csv(path, header, rows, cfg, units, "verify")
    return path


COMMANDS = {"train": cmd_train, "rollout": cmd_rollout, "certify": cmd_certify, "attack": cmd_attack,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON file of RunConfig fields; explicit flags override it")
    shared.add_argument("--env", choices=["cartpole", "mountaincar", "worstcase", "toy2"])
    shared.add_argument("--sigma", type=float)
    shared.add_argument("--frames", type=int)
    shared.add_argument("--seed", type=int)
    shared.add_argument("--episodes", type=int)
    shared.add_argument("--alpha", type=float)
    shared.add_argument("--budgets", type=_floats, help="comma separated")
    shared.add_argument("--threads", type=int, help="worker threads (default: logical cores)")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--checkpoint")

    parser = argparse.ArgumentParser(prog="policy-smoothing", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[shared], help="train a DQN (cartpole) or DDPG (mountaincar) agent")
    p.add_argument("--profile", choices=sorted(DQN_PROFILES))
    p.add_argument("--restarts", type=int)

    sub.add_parser("rollout", parents=[shared], help="smoothed rollouts to JSON-lines transcripts")

    p = sub.add_parser("certify", parents=[shared], help="certified lower bounds on expected reward")
    p.add_argument("--transcripts", help="certify stored transcripts instead of fresh rollouts")
    p.add_argument("--method", choices=["BernoulliCP", "CdfDkw", "PerThresholdCP"])

    p = sub.add_parser("attack", parents=[shared], help="attacked-reward curve over budgets and lambdas")
    p.add_argument("--lambdas", type=_floats, help="comma separated attack thresholds")
    p.add_argument("--eta", type=float)
    p.add_argument("--m", type=int, help="noise samples for attacks on smoothed agents (0: plain attack)")

    p = sub.add_parser("verify", parents=[shared], help="Monte Carlo checks of the bound on toy games")
    p.add_argument("mode", choices=["tightness", "soundness", "nonisometry"])
    p.add_argument("--p", type=_floats, help="clean success probabilities (tightness)")
    p.add_argument("--predicates", type=_strings, help="and,or,xor (soundness)")
    p.add_argument("--c", type=float, help="second-step offset size (nonisometry)")
    p.add_argument("--rule", choices=["sign", "independent"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = merge_config(args)
        path = COMMANDS[args.command](cfg)
    except (BadConfig, MissingCheckpoint) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
