"""Constrained-MDP wrapper around the channel simulator.

One control step applies the decoded MAC parameters, advances the medium by
2.5 ms, and returns the observation plus the objective pair
(f0, f1) = (JFI of the window, smoothed PC1 access delay). Episodes are 100
steps; by default the medium state persists across episodes to mimic a
continuing ergodic process, and a hard reset (fresh simulator) happens only
when an explicit seed is supplied.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import metrics as met
from .constraint import augment_state
from .medium import (
    ConfigError,
    ContenderConfig,
    MediumParams,
    PClass,
    Simulator,
    Tech,
    configure_network,
)

STEP_DURATION_US = 2500
EPISODE_STEPS = 100
D_TH_US = 2000.0

# CW mode: CWmax_PCi = 2^(a_i + b_i) - 1 with b_PC1 = 0, b_PC3 = 4; CWmin is
# pinned to each class's a=0 value so BEB keeps a floor.
CW_B_PC1 = 0
CW_B_PC3 = 4
CW_MIN_PC1 = 2**CW_B_PC1 - 1
CW_MIN_PC3 = 2**CW_B_PC3 - 1

AIFSN_PC1_OPTIONS = (1, 2, 3)
AIFSN_PC3_OPTIONS = (1, 2, 3, 4, 5, 6, 7)
MCOT_OPTIONS_US = tuple(range(1000, 4001, 500))


@dataclass(frozen=True)
class ActionSpace:
    """Discrete per-class option grid; index is row-major with PC1 slowest."""

    mode: str
    pc1_options: tuple
    pc3_options: tuple

    @classmethod
    def for_mode(cls, mode: str) -> "ActionSpace":
        mode = mode.lower()
        if mode == "cw":
            return cls("cw", tuple(range(7)), tuple(range(7)))
        if mode == "aifsn":
            return cls("aifsn", AIFSN_PC1_OPTIONS, AIFSN_PC3_OPTIONS)
        if mode == "mcot":
            return cls("mcot", MCOT_OPTIONS_US, MCOT_OPTIONS_US)
        raise ValueError(f"unknown action mode: {mode!r}")

    @property
    def cardinality(self) -> int:
        return len(self.pc1_options) * len(self.pc3_options)

    def encode(self, i1: int, i3: int) -> int:
        return i1 * len(self.pc3_options) + i3

    def split(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.cardinality:
            raise ValueError(f"action index {index} out of range [0, {self.cardinality})")
        return divmod(index, len(self.pc3_options))


def decode_action(index: int, space: ActionSpace) -> dict[PClass, dict]:
    """Map a flat action index to per-class MAC parameter updates."""
    i1, i3 = space.split(index)
    v1, v3 = space.pc1_options[i1], space.pc3_options[i3]
    if space.mode == "cw":
        return {
            PClass.PC1: {"cw_min": CW_MIN_PC1, "cw_max": 2 ** (v1 + CW_B_PC1) - 1},
            PClass.PC3: {"cw_min": CW_MIN_PC3, "cw_max": 2 ** (v3 + CW_B_PC3) - 1},
        }
    if space.mode == "aifsn":
        return {PClass.PC1: {"aifsn": v1}, PClass.PC3: {"aifsn": v3}}
    return {PClass.PC1: {"mcot_us": v1}, PClass.PC3: {"mcot_us": v3}}


@dataclass
class StepResult:
    observation: np.ndarray
    f0: float
    f1: float
    done: bool
    info: met.StepMetrics


@dataclass
class ScenarioPreset:
    """Contender mix plus medium timing for one experiment scenario."""

    name: str
    contenders: list[ContenderConfig]
    medium: MediumParams = field(default_factory=MediumParams)


def coex_mix_preset(
    gnb_pc1: int = 1, gnb_pc3: int = 1, ap_pc3: int = 1, medium: Optional[MediumParams] = None
) -> ScenarioPreset:
    """Saturated gNB PC1 / gNB PC3 / AP PC3 mix with default MAC parameters."""
    contenders = []
    if gnb_pc1:
        contenders.append(
            ContenderConfig(Tech.NRU, PClass.PC1, aifsn=2, cw_min=7, cw_max=15,
                            mcot_us=2000, count=gnb_pc1)
        )
    if gnb_pc3:
        contenders.append(
            ContenderConfig(Tech.NRU, PClass.PC3, aifsn=3, cw_min=127, cw_max=255,
                            mcot_us=4000, count=gnb_pc3)
        )
    if ap_pc3:
        contenders.append(
            ContenderConfig(Tech.WIFI, PClass.PC3, aifsn=3, cw_min=127, cw_max=255,
                            mcot_us=4000, count=ap_pc3)
        )
    if not contenders:
        raise ConfigError("scenario needs at least one contender")
    return ScenarioPreset("coex_mix", contenders, medium or MediumParams())


def single_pc1_preset(medium: Optional[MediumParams] = None) -> ScenarioPreset:
    """Lone gNB PC1 with a deterministic zero-width backoff window."""
    return ScenarioPreset(
        "single_pc1",
        [ContenderConfig(Tech.NRU, PClass.PC1, aifsn=2, cw_min=0, cw_max=0, mcot_us=2000)],
        medium or MediumParams(),
    )


PRESETS = {
    "coex_mix": coex_mix_preset,
    "single_pc1": lambda **kw: single_pc1_preset(**kw),
}


class CoexEnv:
    """reset/step environment over one simulator instance."""

    def __init__(
        self,
        preset: ScenarioPreset,
        action_mode: str = "cw",
        cr_lbt: bool = False,
        step_duration_us: int = STEP_DURATION_US,
        episode_steps: int = EPISODE_STEPS,
        d_th_us: float = D_TH_US,
        actuate_wifi: bool = False,
        cr_redraw_on_defer: bool = False,
        lambda_max: float = 5.0,
    ):
        self.preset = preset
        self.space = ActionSpace.for_mode(action_mode)
        self.cr_lbt = cr_lbt
        self.step_duration_us = step_duration_us
        self.episode_steps = episode_steps
        self.d_th_us = d_th_us
        self.actuate_wifi = actuate_wifi
        self.cr_redraw_on_defer = cr_redraw_on_defer
        self.sim: Optional[Simulator] = None
        self.lam = 0.0
        self.lambda_max = lambda_max
        self._step_count = 0
        self._metrics: Optional[met.StepMetrics] = None
        self._prev_stats = None
        self._prev_occupied = 0
        self._defaults = {
            (c.tech, c.pclass): {
                "aifsn": c.aifsn, "cw_min": c.cw_min, "cw_max": c.cw_max, "mcot_us": c.mcot_us,
            }
            for c in preset.contenders
        }

    # ------------------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return sum(c.count for c in self.preset.contenders)

    @property
    def observation_dim(self) -> int:
        # +1 for the appended dual-variable feature
        return met.observation_dim(self.n_nodes) + 1

    @property
    def n_actions(self) -> int:
        return self.space.cardinality

    @property
    def step_count(self) -> int:
        return self._step_count

    def current_metrics(self) -> met.StepMetrics:
        return self._metrics

    def reset(self, seed: Optional[int] = None, lambda0: float = 0.0) -> np.ndarray:
        """Start an episode; a seed forces a fresh simulator, otherwise the
        medium persists and only metrics and the step counter restart."""
        if seed is not None or self.sim is None:
            if seed is None:
                raise ValueError("first reset requires a seed")
            self.sim = configure_network(
                self.preset.medium,
                [replace(c) for c in self.preset.contenders],
                cr_lbt_enabled=self.cr_lbt,
                seed=seed,
                cr_redraw_on_defer=self.cr_redraw_on_defer,
            )
        self._step_count = 0
        self._metrics = met.StepMetrics.initial(range(len(self.sim.nodes)))
        self._prev_occupied = self.sim.occupied_us_at()
        self.lam = lambda0
        return self._observe()

    def apply_defaults(self) -> None:
        self.sim.apply_mac_params({k: dict(v) for k, v in self._defaults.items()})

    def _observe(self) -> np.ndarray:
        base = met.build_observation(self._metrics, self.d_th_us)
        return augment_state(base, self.lam, self.lambda_max)

    def _apply_action(self, index: int) -> None:
        per_class = decode_action(index, self.space)
        assignment = {}
        for pclass, params in per_class.items():
            assignment[(Tech.NRU, pclass)] = params
            if self.actuate_wifi:
                assignment[(Tech.WIFI, pclass)] = params
        self.sim.apply_mac_params(assignment)

    def step(self, action: int) -> StepResult:
        if self.sim is None or self._metrics is None:
            raise RuntimeError("reset() must be called before step()")
        if self._step_count >= self.episode_steps:
            raise RuntimeError("episode is done; call reset()")
        self._apply_action(action)
        return self._advance()

    def step_passive(self) -> StepResult:
        """One control step that leaves the current MAC parameters untouched
        (the fixed-parameter baseline)."""
        if self.sim is None or self._metrics is None:
            raise RuntimeError("reset() must be called before step_passive()")
        if self._step_count >= self.episode_steps:
            raise RuntimeError("episode is done; call reset()")
        return self._advance()

    def _advance(self) -> StepResult:
        outcomes = self.sim.run_for(self.step_duration_us)
        occupied = self.sim.occupied_us_at()
        busy = occupied - self._prev_occupied
        self._prev_occupied = occupied
        # Routine in-flight waits stay invisible; only starvation-scale ages
        # (a head-of-line frame older than 4x the threshold) feed the delay
        # signal, so a collapsed channel cannot read as zero delay.
        pending_age = max(
            (self.sim.clock - n.hol_since_us for n in self.sim.nodes if n.cfg.pclass == PClass.PC1),
            default=0,
        )
        if pending_age <= 4 * self.d_th_us:
            pending_age = 0
        self._metrics = met.step_metrics(
            outcomes,
            self._metrics,
            self.step_duration_us,
            d_th_us=self.d_th_us,
            busy_us=busy,
            pc1_pending_age_us=pending_age,
        )
        self._step_count += 1
        done = self._step_count >= self.episode_steps
        return StepResult(
            observation=self._observe(),
            f0=self._metrics.jfi,
            f1=self._metrics.pc1_delay_smooth_us,
            done=done,
            info=self._metrics,
        )
