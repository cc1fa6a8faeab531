"""Experiment orchestration: configs, presets, commands, logs, and reports.

File formats, all plain text so diff-based oracles stay trivial:
  - experiment configs and run manifests: JSON (unknown keys rejected)
  - per-step metrics logs and event traces: CSV with a fixed header row
  - evaluation reports: key=value lines, one metric per line
"""

from __future__ import annotations

import csv
import json
import os
import subprocess
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .constraint import DualController
from .env import CoexEnv, EPISODE_STEPS, STEP_DURATION_US, coex_mix_preset, single_pc1_preset
from .learner import (
    EvalRollout,
    LearnerConfig,
    StepLog,
    greedy_rollout,
    load_policy,
    run_training,
    save_policy,
)
from .medium import MediumParams, TxKind


@dataclass
class DualConfig:
    lambda_max: float = 5.0
    eta_lambda: float = 0.05
    update_period: int = 5
    kappa: float = 0.5
    alpha_v: float = 0.2

    def controller(self) -> DualController:
        return DualController(
            lambda_max=self.lambda_max,
            eta_lambda=self.eta_lambda,
            update_period=self.update_period,
            kappa=self.kappa,
            alpha_v=self.alpha_v,
        )


@dataclass
class ExperimentConfig:
    """Fully validated experiment description (full-scale training values as defaults)."""

    scenario: str = "coex_mix"
    action_mode: str = "cw"
    cr_lbt: bool = False
    scaling: bool = True
    seed: int = 0
    episodes: int = 10_000
    eval_episodes: int = 50
    step_duration_us: int = STEP_DURATION_US
    episode_steps: int = EPISODE_STEPS
    d_th_us: float = 2000.0
    out_dir: str = "runs/default"
    counts: dict = field(default_factory=lambda: {"gnb_pc1": 1, "gnb_pc3": 1, "ap_pc3": 1})
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    dual: DualConfig = field(default_factory=DualConfig)
    actuate_wifi: bool = False
    cr_redraw_on_defer: bool = False
    hard_episode_resets: bool = False

    def validate(self) -> None:
        if self.scenario not in ("coex_mix", "single_pc1"):
            raise ConfigFileError(f"unknown scenario preset: {self.scenario!r}")
        if self.action_mode not in ("cw", "aifsn", "mcot"):
            raise ConfigFileError(f"action_mode must be cw/aifsn/mcot, got {self.action_mode!r}")
        if self.episodes < 1 or self.eval_episodes < 1:
            raise ConfigFileError("episodes and eval_episodes must be >= 1")
        if self.d_th_us <= 0:
            raise ConfigFileError("d_th_us must be > 0")
        if self.step_duration_us <= 0 or self.episode_steps < 1:
            raise ConfigFileError("invalid step/episode durations")
        unknown = set(self.counts) - {"gnb_pc1", "gnb_pc3", "ap_pc3"}
        if unknown:
            raise ConfigFileError(f"unknown scenario count keys: {sorted(unknown)}")
        self.learner.validate()

    def build_env(self) -> CoexEnv:
        if self.scenario == "coex_mix":
            preset = coex_mix_preset(
                gnb_pc1=self.counts.get("gnb_pc1", 1),
                gnb_pc3=self.counts.get("gnb_pc3", 1),
                ap_pc3=self.counts.get("ap_pc3", 1),
            )
        else:
            preset = single_pc1_preset()
        return CoexEnv(
            preset,
            action_mode=self.action_mode,
            cr_lbt=self.cr_lbt,
            step_duration_us=self.step_duration_us,
            episode_steps=self.episode_steps,
            d_th_us=self.d_th_us,
            actuate_wifi=self.actuate_wifi,
            cr_redraw_on_defer=self.cr_redraw_on_defer,
            lambda_max=self.dual.lambda_max,
        )


class ConfigFileError(ValueError):
    """Raised on unparseable configs, unknown keys, or invalid values."""


def _from_dict(cls, data: dict, context: str):
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - fields
    if unknown:
        raise ConfigFileError(f"unknown key {sorted(unknown)[0]!r} in {context}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    learner = data.pop("learner", {})
    dual = data.pop("dual", {})
    if isinstance(learner, dict):
        if "hidden_layers" in learner:
            learner["hidden_layers"] = tuple(learner["hidden_layers"])
        learner = _from_dict(LearnerConfig, learner, "learner")
    dual = _from_dict(DualConfig, dual, "dual") if isinstance(dual, dict) else dual
    cfg = _from_dict(ExperimentConfig, data, "experiment config")
    cfg.learner = learner
    cfg.dual = dual
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigFileError(f"config {path} must hold a JSON object")
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["learner"]["hidden_layers"] = list(d["learner"]["hidden_layers"])
    return d


# ----------------------------------------------------------------------
# log and report files

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_step_log(path: str, rows: list[StepLog]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(StepLog.FIELDS)
        for r in rows:
            w.writerow([_fmt(v) for v in r.row()])


def read_step_log(path: str) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        out = []
        for row in reader:
            parsed = {}
            for k, v in row.items():
                if k in ("episode", "step", "action"):
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v)
            out.append(parsed)
        return out


def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True, text=True, cwd=os.path.dirname(__file__), timeout=5,
        )
        if rev.returncode == 0:
            return rev.stdout.strip()
    except OSError:
        pass
    return f"coexctl-{__version__}"


def write_manifest(path: str, cfg: ExperimentConfig, extra: Optional[dict] = None) -> None:
    manifest = {
        "config": config_to_dict(cfg),
        "seed": cfg.seed,
        "code_version": code_version(),
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class EvalReport:
    """Per-node and aggregate evaluation quantities (delays in milliseconds)."""

    nodes: list
    collision_probability: dict
    airtime_efficiency: dict
    mean_pc1_delay_ms: float
    p95_pc1_delay_ms: float
    mean_jfi: float
    violation_fraction: float
    d_th_ms: float

    def to_lines(self) -> list[str]:
        lines = [f"d_th_ms={_fmt(self.d_th_ms)}"]
        lines.append(f"mean_pc1_delay_ms={_fmt(self.mean_pc1_delay_ms)}")
        lines.append(f"p95_pc1_delay_ms={_fmt(self.p95_pc1_delay_ms)}")
        lines.append(f"mean_jfi={_fmt(self.mean_jfi)}")
        lines.append(f"violation_fraction={_fmt(self.violation_fraction)}")
        for n in self.nodes:
            lines.append(f"collision_probability[{n}]={_fmt(self.collision_probability[n])}")
        for n in self.nodes:
            lines.append(f"airtime_efficiency[{n}]={_fmt(self.airtime_efficiency[n])}")
        return lines

    def write(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.to_lines()) + "\n")


def read_report(path: str) -> EvalReport:
    scalars: dict[str, float] = {}
    coll: dict[str, float] = {}
    eff: dict[str, float] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, value = line.split("=", 1)
            if key.startswith("collision_probability["):
                coll[key[len("collision_probability["):-1]] = float(value)
            elif key.startswith("airtime_efficiency["):
                eff[key[len("airtime_efficiency["):-1]] = float(value)
            else:
                scalars[key] = float(value)
    return EvalReport(
        nodes=list(coll),
        collision_probability=coll,
        airtime_efficiency=eff,
        mean_pc1_delay_ms=scalars["mean_pc1_delay_ms"],
        p95_pc1_delay_ms=scalars["p95_pc1_delay_ms"],
        mean_jfi=scalars["mean_jfi"],
        violation_fraction=scalars["violation_fraction"],
        d_th_ms=scalars["d_th_ms"],
    )


def nearest_rank_percentile(samples: list[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct*n)-th smallest sample."""
    if not samples:
        raise ValueError("no samples")
    if not 0 < pct <= 100:
        raise ValueError("pct must be in (0, 100]")
    ordered = sorted(samples)
    rank = int(np.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def node_display_label(sim_name: str, all_names: list[str]) -> str:
    """Map simulator node ids to display row labels (gNB PC1, AP PC3)."""
    tech, pclass, idx = sim_name.split("_")
    side = "gNB" if tech == "nru" else "AP"
    label = f"{side} {pclass.upper()}"
    same_class = [n for n in all_names if n.rsplit("_", 1)[0] == sim_name.rsplit("_", 1)[0]]
    if len(same_class) > 1:
        label += f" #{idx}"
    return label


def report_from_rollout(rollout: EvalRollout, d_th_us: float) -> EvalReport:
    names = list(rollout.node_names)
    labels = {n: node_display_label(n, names) for n in names}
    return EvalReport(
        nodes=[labels[n] for n in names],
        collision_probability={labels[n]: rollout.collision_probability[n] for n in names},
        airtime_efficiency={labels[n]: rollout.airtime_efficiency[n] for n in names},
        mean_pc1_delay_ms=float(np.mean(rollout.delays_smooth_us)) / 1000.0,
        p95_pc1_delay_ms=nearest_rank_percentile(rollout.delays_smooth_us, 95.0) / 1000.0,
        mean_jfi=float(np.mean(rollout.jfis)),
        violation_fraction=rollout.violation_fraction,
        d_th_ms=d_th_us / 1000.0,
    )


# ----------------------------------------------------------------------
# commands

def cmd_train(cfg: ExperimentConfig) -> tuple[str, str]:
    """Run training; write the policy artifact, step log, and manifest.

    Returns (artifact_path, log_path).
    """
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    env = cfg.build_env()
    dual = cfg.dual.controller()
    result = run_training(
        env, dual, cfg.learner, seed=cfg.seed, scaling=cfg.scaling, episodes=cfg.episodes,
        hard_episode_resets=cfg.hard_episode_resets,
    )
    artifact_path = os.path.join(cfg.out_dir, "policy.bin")
    log_path = os.path.join(cfg.out_dir, "train_log.csv")
    save_policy(
        artifact_path,
        result.learner,
        meta={
            "action_mode": cfg.action_mode,
            "scenario": cfg.scenario,
            "cr_lbt": cfg.cr_lbt,
            "scaling": cfg.scaling,
            "seed": cfg.seed,
            "episodes": cfg.episodes,
        },
    )
    write_step_log(log_path, result.log)
    write_manifest(os.path.join(cfg.out_dir, "manifest.json"), cfg)
    return artifact_path, log_path


def cmd_evaluate(
    artifact_path: str, cfg: ExperimentConfig, episodes: Optional[int] = None
) -> EvalReport:
    """Greedy rollout of a stored policy with online dual updates only."""
    cfg.validate()
    episodes = episodes if episodes is not None else cfg.eval_episodes
    artifact = load_policy(artifact_path)
    env = cfg.build_env()
    if artifact.obs_dim != env.observation_dim or artifact.n_actions != env.n_actions:
        raise ConfigFileError(
            f"artifact dimensions (obs={artifact.obs_dim}, actions={artifact.n_actions}) do not"
            f" match config (obs={env.observation_dim}, actions={env.n_actions})"
        )
    dual = cfg.dual.controller()
    rollout = greedy_rollout(
        env, artifact.network(), dual, episodes=episodes, seed=cfg.seed, scaling=cfg.scaling
    )
    os.makedirs(cfg.out_dir, exist_ok=True)
    report = report_from_rollout(rollout, cfg.d_th_us)
    report.write(os.path.join(cfg.out_dir, "eval_report.txt"))
    write_step_log(os.path.join(cfg.out_dir, "eval_log.csv"), rollout.log)
    return report


def cmd_baseline(cfg: ExperimentConfig, episodes: Optional[int] = None) -> EvalReport:
    """Static default MAC parameters, no learning, no dual updates."""
    cfg.validate()
    episodes = episodes if episodes is not None else cfg.eval_episodes
    env = cfg.build_env()
    rollout = greedy_rollout(env, None, None, episodes=episodes, seed=cfg.seed,
                             scaling=cfg.scaling)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report = report_from_rollout(rollout, cfg.d_th_us)
    report.write(os.path.join(cfg.out_dir, "baseline_report.txt"))
    write_step_log(os.path.join(cfg.out_dir, "baseline_log.csv"), rollout.log)
    return report


def cmd_compare(report_paths: list[str]) -> str:
    """Side-by-side table of >= 2 reports with signed deltas against the first."""
    if len(report_paths) < 2:
        raise ValueError("compare needs at least two reports")
    reports = [read_report(p) for p in report_paths]
    base = reports[0]
    for i, r in enumerate(reports[1:], start=1):
        if set(r.nodes) != set(base.nodes):
            raise ValueError(
                f"node sets differ between {report_paths[0]} and {report_paths[i]}"
            )
    labels = [os.path.basename(p) for p in report_paths]
    rows: list[tuple[str, list[float]]] = []
    for metric in ("mean_pc1_delay_ms", "p95_pc1_delay_ms", "mean_jfi", "violation_fraction"):
        rows.append((metric, [getattr(r, metric) for r in reports]))
    for n in base.nodes:
        rows.append((f"collision_probability[{n}]", [r.collision_probability[n] for r in reports]))
    for n in base.nodes:
        rows.append((f"airtime_efficiency[{n}]", [r.airtime_efficiency[n] for r in reports]))

    width = max(len(r[0]) for r in rows)
    header = ["metric".ljust(width)] + [f"{l:>14}" for l in labels]
    header += [f"{'d(' + l + ')':>14}" for l in labels[1:]]
    lines = ["  ".join(header)]
    for name, values in rows:
        cells = [name.ljust(width)] + [f"{v:14.6f}" for v in values]
        cells += [f"{v - values[0]:+14.6f}" for v in values[1:]]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def cmd_trace(cfg: ExperimentConfig, duration_us: int, out_path: str) -> int:
    """Export the raw event trace of a fixed-parameter run as CSV.

    Returns the number of records written.
    """
    cfg.validate()
    env = cfg.build_env()
    env.reset(seed=cfg.seed)
    env.apply_defaults()
    outcomes = env.sim.run_for(duration_us)
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_start", "t_end", "node", "tech", "class", "kind", "delay"])
        for o in outcomes:
            w.writerow([
                o.start_us, o.end_us, o.name, o.tech.value, o.pclass.value, o.kind.value,
                o.access_delay_us if o.access_delay_us is not None else "",
            ])
    return len(outcomes)
