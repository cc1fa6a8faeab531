"""Event-driven simulator of a single unlicensed channel shared by NR-U and Wi-Fi.

All times are integer microseconds. Wi-Fi contenders run EDCA-style deferment
(AIFS = SIFS + aifsn * slot) followed by a slotted backoff countdown and
transmit the instant their counter reaches zero. NR-U contenders run the same
deferment/countdown but may only start data at multiples of the frame-slot
period: a node whose countdown ends mid-gap commits to the next boundary and
either holds a reservation (plain LBT) or runs pulse-and-listen
collision-resolution micro-slots (CR-LBT) until the boundary.

The reservation hold is a commitment, not a carrier: other contenders keep
counting down during it, so two NR-U nodes can commit to the same boundary and
a Wi-Fi node can start mid-gap and get stepped on at the boundary. This is what
makes simultaneous-start collisions the dominant failure mode of plain LBT
under saturation. CR pulses, by contrast, are real energy: they freeze other
countdowns, and a committed node that hears energy during one of its listen
intervals aborts the attempt and re-defers without advancing its backoff stage.

Any temporal overlap between data transmissions is a collision for every
participant. Reservation holds and CR pulses never corrupt data.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

import numpy as np

OBS_SLOT_US = 9
SIFS_US = 16
NRU_SLOT_BOUNDARY_US = 500
CR_SLOT_US = 18


class Tech(str, Enum):
    NRU = "NRU"
    WIFI = "WIFI"


class PClass(str, Enum):
    PC1 = "PC1"
    PC3 = "PC3"


class TxKind(str, Enum):
    SUCCESS = "SUCCESS"
    COLLISION = "COLLISION"
    RS = "RS"
    CR_PULSE = "CR_PULSE"


class ConfigError(ValueError):
    """Raised when a medium or contender configuration violates an invariant."""


@dataclass
class MediumParams:
    """Shared channel timing constants.

    frame_tx_us=None means saturated nodes fill their MCOT grant; when set it
    caps every data frame and must not exceed the smallest configured MCOT.
    """

    obs_slot_us: int = OBS_SLOT_US
    sifs_us: int = SIFS_US
    nru_slot_boundary_us: int = NRU_SLOT_BOUNDARY_US
    frame_tx_us: Optional[int] = None
    rs_allowed: bool = True
    cr_slot_us: int = CR_SLOT_US
    cr_slot_count: int = 27
    # When True the reservation hold blocks other contenders' countdowns
    # (exploration switch; the default non-blocking hold is what reproduces
    # boundary-synchronised collisions under saturation).
    rs_blocks_medium: bool = False

    def validate(self) -> None:
        for name in ("obs_slot_us", "sifs_us", "nru_slot_boundary_us", "cr_slot_us"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"MediumParams.{name} must be > 0")
        if self.frame_tx_us is not None and self.frame_tx_us <= 0:
            raise ConfigError("MediumParams.frame_tx_us must be > 0 when set")
        if self.cr_slot_count < 1:
            raise ConfigError("MediumParams.cr_slot_count must be >= 1")
        if self.cr_slot_count * self.cr_slot_us > self.nru_slot_boundary_us:
            raise ConfigError(
                "MediumParams.cr_slot_count * cr_slot_us must fit in nru_slot_boundary_us"
            )
        if self.cr_slot_us % 2 != 0:
            raise ConfigError("MediumParams.cr_slot_us must be even (pulse/listen halves)")


def _is_pow2m1(v: int) -> bool:
    return v >= 0 and ((v + 1) & v) == 0


@dataclass
class ContenderConfig:
    """Static MAC parameters of one contender class instance."""

    tech: Tech
    pclass: PClass
    aifsn: int
    cw_min: int
    cw_max: int
    mcot_us: int
    count: int = 1

    def validate(self, medium: Optional[MediumParams] = None) -> None:
        if self.aifsn < 1:
            raise ConfigError(f"{self.label()}: aifsn must be >= 1, got {self.aifsn}")
        if self.cw_min < 0:
            raise ConfigError(f"{self.label()}: cw_min must be >= 0, got {self.cw_min}")
        if self.cw_max < self.cw_min:
            raise ConfigError(
                f"{self.label()}: cw_max ({self.cw_max}) must be >= cw_min ({self.cw_min})"
            )
        if not _is_pow2m1(self.cw_max):
            raise ConfigError(f"{self.label()}: cw_max must be 2^k - 1, got {self.cw_max}")
        if not _is_pow2m1(self.cw_min):
            raise ConfigError(f"{self.label()}: cw_min must be 2^j - 1, got {self.cw_min}")
        if self.mcot_us <= 0:
            raise ConfigError(f"{self.label()}: mcot_us must be > 0, got {self.mcot_us}")
        if self.count < 1:
            raise ConfigError(f"{self.label()}: count must be >= 1, got {self.count}")
        if medium is not None and medium.frame_tx_us is not None:
            if medium.frame_tx_us > self.mcot_us:
                raise ConfigError(
                    f"{self.label()}: frame_tx_us ({medium.frame_tx_us}) exceeds mcot_us"
                    f" ({self.mcot_us})"
                )

    def label(self) -> str:
        return f"{self.tech.value}/{self.pclass.value}"


@dataclass
class TxOutcome:
    """One completed channel event (data frame, reservation hold, or CR pulse)."""

    node: int
    name: str
    tech: Tech
    pclass: PClass
    kind: TxKind
    start_us: int
    end_us: int
    access_delay_us: Optional[int] = None

    @property
    def duration_us(self) -> int:
        return self.end_us - self.start_us


@dataclass
class NodeStats:
    """Cumulative per-node counters (monotone; callers diff for windows)."""

    successes: int = 0
    collisions: int = 0
    success_air_us: int = 0
    collision_air_us: int = 0
    reserve_us: int = 0
    pulse_us: int = 0
    delay_sum_us: int = 0

    def copy(self) -> "NodeStats":
        return replace(self)

    @property
    def attempts(self) -> int:
        return self.successes + self.collisions

    def collision_probability(self) -> float:
        return self.collisions / self.attempts if self.attempts else 0.0

    def airtime_efficiency(self) -> float:
        occupied = self.success_air_us + self.collision_air_us + self.reserve_us + self.pulse_us
        return self.success_air_us / occupied if occupied else 0.0


# Node life cycle states.
_DEFER = 0     # waiting for the channel to go idle
_PENDING = 1   # access event scheduled (AIFS + countdown in progress)
_COMMITTED = 2 # NR-U gap hold / CR phase, fire at boundary
_TX = 3        # data frame in flight


@dataclass
class _Commit:
    t0: int
    boundary: int
    cr: bool
    cid: int = 0
    n_pulses: int = 0
    aborted: bool = False


@dataclass
class NodeState:
    """Dynamic MAC state of one contender."""

    idx: int
    name: str
    cfg: ContenderConfig
    cw_current: int = 0
    backoff: int = 0
    hol_since_us: int = 0
    state: int = _DEFER
    version: int = 0
    anchor: int = 0
    pending_at: int = 0
    commit: Optional[_Commit] = None
    stats: NodeStats = field(default_factory=NodeStats)

    def aifs_us(self, medium: MediumParams) -> int:
        return medium.sifs_us + self.cfg.aifsn * medium.obs_slot_us


@dataclass
class _ActiveTx:
    node: NodeState
    start: int
    end: int
    collided: bool


def draw_backoff(rng: np.random.Generator, cw_current: int) -> int:
    """Uniform integer in [0, cw_current], inclusive."""
    if cw_current < 0:
        raise ValueError("cw_current must be >= 0")
    return int(rng.integers(0, cw_current + 1))


def on_collision(node: NodeState, rng: np.random.Generator) -> NodeState:
    """Binary exponential backoff: double the window (capped) and redraw.

    The frame is retained; under saturation there is no retry limit.
    """
    node.cw_current = min(2 * (node.cw_current + 1) - 1, node.cfg.cw_max)
    node.backoff = draw_backoff(rng, node.cw_current)
    return node


def on_success(node: NodeState, end_us: int, rng: np.random.Generator) -> NodeState:
    """Reset the window, queue the next frame immediately (saturation)."""
    node.cw_current = node.cfg.cw_min
    node.backoff = draw_backoff(rng, node.cw_current)
    node.hol_since_us = end_us
    return node


# Event ordering at equal timestamps: frees before fires before accesses before
# pulse starts, so a frame ending exactly at a boundary does not collide with
# the transmission starting there. Listen checks run after all simultaneous
# pulse ends so that in-phase pulses (whose intervals no longer overlap any
# listen) do not abort each other.
_EV_TX_END = 0
_EV_PULSE_END = 1
_EV_LISTEN_CHECK = 2
_EV_FIRE = 3
_EV_ACCESS = 4
_EV_PULSE_START = 5


class Simulator:
    """Deterministic microsecond-resolution event loop for one shared channel."""

    def __init__(
        self,
        medium: MediumParams,
        contenders: Iterable[ContenderConfig],
        cr_lbt_enabled: bool = False,
        seed: int = 0,
        cr_redraw_on_defer: bool = False,
    ):
        contenders = list(contenders)
        if not contenders:
            raise ConfigError("contender list must be non-empty")
        medium.validate()
        for cfg in contenders:
            cfg.validate(medium)

        self.medium = medium
        self.cr_lbt_enabled = cr_lbt_enabled
        self.cr_redraw_on_defer = cr_redraw_on_defer
        self.rng = np.random.default_rng(seed)
        self.clock = 0

        self.nodes: list[NodeState] = []
        for cfg in contenders:
            for i in range(cfg.count):
                idx = len(self.nodes)
                name = f"{cfg.tech.value.lower()}_{cfg.pclass.value.lower()}_{i}"
                node = NodeState(idx=idx, name=name, cfg=replace(cfg, count=1))
                node.cw_current = node.cfg.cw_min
                node.backoff = draw_backoff(self.rng, node.cw_current)
                self.nodes.append(node)

        self._heap: list[tuple[int, int, int, int, tuple]] = []
        self._seq = 0
        self._blocking = 0
        self._busy_since = 0
        self._occ_count = 0
        self._occ_since = 0
        self._occupied_us = 0
        self._active_tx: list[_ActiveTx] = []
        self._fires: dict[int, list[NodeState]] = {}
        self._outcomes: list[TxOutcome] = []
        self._harvested = 0
        self._commit_counter = 0

        # Channel idle at t=0: anchor everyone.
        self._on_idle(0)

    # ------------------------------------------------------------------
    # public API

    def run_for(self, duration_us: int) -> list[TxOutcome]:
        """Advance the event loop exactly duration_us; return outcomes ending in the window."""
        if duration_us <= 0:
            raise ValueError("duration_us must be > 0")
        target = self.clock + duration_us
        while self._heap and self._heap[0][0] <= target:
            t, _, _, kind, payload = heapq.heappop(self._heap)
            self.clock = t
            self._dispatch(t, kind, payload)
        self.clock = target
        out = self._outcomes[self._harvested:]
        self._harvested = len(self._outcomes)
        if self._harvested > 100_000:
            del self._outcomes[: self._harvested]
            self._harvested = 0
        return out

    def apply_mac_params(self, assignment: dict[tuple[Tech, PClass], dict]) -> None:
        """Update MAC parameters per (tech, pclass); takes effect at next draws.

        The whole assignment is validated against the target configs first; on
        any violation nothing is changed.
        """
        staged: list[tuple[NodeState, ContenderConfig]] = []
        for node in self.nodes:
            key = (node.cfg.tech, node.cfg.pclass)
            if key not in assignment:
                continue
            new_cfg = replace(node.cfg, **assignment[key])
            new_cfg.validate(self.medium)
            staged.append((node, new_cfg))
        for node, new_cfg in staged:
            node.cfg = new_cfg

    def occupied_us_at(self, t: Optional[int] = None) -> int:
        """Cumulative channel occupancy (data + holds + pulses) up to time t."""
        t = self.clock if t is None else t
        total = self._occupied_us
        if self._occ_count > 0 and t > self._occ_since:
            total += t - self._occ_since
        return total

    def stats_snapshot(self) -> list[NodeStats]:
        return [n.stats.copy() for n in self.nodes]

    def node_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    # ------------------------------------------------------------------
    # event machinery

    def _push(self, t: int, order: int, kind: int, payload: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, order, self._seq, kind, payload))

    def _dispatch(self, t: int, kind: int, payload: tuple) -> None:
        if kind == _EV_ACCESS:
            self._ev_access(t, *payload)
        elif kind == _EV_TX_END:
            self._ev_tx_end(t, *payload)
        elif kind == _EV_FIRE:
            self._ev_fire(t, *payload)
        elif kind == _EV_PULSE_START:
            self._ev_pulse_start(t, *payload)
        elif kind == _EV_PULSE_END:
            self._ev_pulse_end(t, *payload)
        elif kind == _EV_LISTEN_CHECK:
            self._ev_listen_check(t, *payload)

    # -- occupancy / blocking bookkeeping

    def _occ_start(self, t: int) -> None:
        if self._occ_count == 0:
            self._occ_since = t
        self._occ_count += 1

    def _occ_end(self, t: int) -> None:
        self._occ_count -= 1
        if self._occ_count == 0:
            self._occupied_us += t - self._occ_since

    def _blocking_start(self, t: int, src: Optional[NodeState]) -> None:
        if self._blocking == 0:
            self._busy_since = t
            self._freeze_pending(t)
        self._blocking += 1
        self._occ_start(t)
        # Energy appearing inside a committed CR node's listen interval aborts it.
        for node in self.nodes:
            if node is src or node.state != _COMMITTED:
                continue
            c = node.commit
            if c is not None and c.cr and not c.aborted and self._in_listen(c, t):
                self._abort_commit(node, t)

    def _blocking_end(self, t: int) -> None:
        self._blocking -= 1
        self._occ_end(t)
        if self._blocking == 0:
            self._on_idle(t)

    def _freeze_pending(self, t: int) -> None:
        for node in self.nodes:
            if node.state != _PENDING or node.pending_at <= t:
                # an access at exactly t completed its last slot; let it fire
                continue
            aifs = node.aifs_us(self.medium)
            elapsed = t - node.anchor - aifs
            consumed = 0
            if elapsed > 0:
                consumed = min(elapsed // self.medium.obs_slot_us, node.backoff)
            node.backoff -= consumed
            node.version += 1
            node.state = _DEFER

    def _on_idle(self, t: int) -> None:
        for node in self.nodes:
            if node.state != _DEFER:
                continue
            node.anchor = t
            node.version += 1
            node.state = _PENDING
            node.pending_at = (
                t + node.aifs_us(self.medium) + self.medium.obs_slot_us * node.backoff
            )
            self._push(node.pending_at, _EV_ACCESS, _EV_ACCESS, (node.idx, node.version))

    # -- node events

    def _ev_access(self, t: int, idx: int, version: int) -> None:
        node = self.nodes[idx]
        if node.state != _PENDING or node.version != version:
            return
        if self._blocking > 0 and self._busy_since < t:
            # defensive: countdown should have been frozen already
            node.state = _DEFER
            return
        node.state = _DEFER  # transient; set below
        if node.cfg.tech == Tech.WIFI:
            self._start_tx(node, t)
            return
        period = self.medium.nru_slot_boundary_us
        boundary = ((t + period - 1) // period) * period
        if boundary == t:
            self._start_tx(node, t)
        else:
            self._commit(node, t, boundary)

    def _commit(self, node: NodeState, t: int, boundary: int) -> None:
        cr = self.cr_lbt_enabled
        self._commit_counter += 1
        commit = _Commit(t0=t, boundary=boundary, cr=cr, cid=self._commit_counter)
        node.commit = commit
        node.state = _COMMITTED
        if boundary not in self._fires:
            self._fires[boundary] = []
            self._push(boundary, _EV_FIRE, _EV_FIRE, (boundary,))
        self._fires[boundary].append(node)
        if cr:
            gap = boundary - t
            commit.n_pulses = min(gap // self.medium.cr_slot_us, self.medium.cr_slot_count)
            half = self.medium.cr_slot_us // 2
            for m in range(commit.n_pulses):
                s = t + m * self.medium.cr_slot_us
                self._push(s, _EV_PULSE_START, _EV_PULSE_START, (node.idx, commit.cid))
                self._push(s + half, _EV_PULSE_END, _EV_PULSE_END, (node.idx, commit.cid))
        elif self.medium.rs_allowed:
            # reservation hold: occupies (accounting); blocks sensing only in
            # the rs_blocks_medium variant. rs_allowed=False is a pure silent
            # gap with no reservation accounting at all.
            if self.medium.rs_blocks_medium:
                self._blocking_start(t, node)
            else:
                self._occ_start(t)

    def _ev_pulse_start(self, t: int, idx: int, cid: int) -> None:
        node = self.nodes[idx]
        c = node.commit
        if c is None or c.cid != cid or c.aborted or node.state != _COMMITTED:
            return
        self._blocking_start(t, node)

    def _ev_pulse_end(self, t: int, idx: int, cid: int) -> None:
        node = self.nodes[idx]
        c = node.commit
        if c is None or c.cid != cid or node.state != _COMMITTED:
            return
        half = self.medium.cr_slot_us // 2
        self._blocking_end(t)
        self._outcomes.append(
            TxOutcome(
                node=node.idx,
                name=node.name,
                tech=node.cfg.tech,
                pclass=node.cfg.pclass,
                kind=TxKind.CR_PULSE,
                start_us=t - half,
                end_us=t,
            )
        )
        node.stats.pulse_us += half
        # own listen interval starts now; the persisting-energy check runs
        # after every simultaneous pulse end has been processed
        self._push(t, _EV_LISTEN_CHECK, _EV_LISTEN_CHECK, (node.idx, cid))

    def _ev_listen_check(self, t: int, idx: int, cid: int) -> None:
        node = self.nodes[idx]
        c = node.commit
        if c is None or c.cid != cid or c.aborted or node.state != _COMMITTED:
            return
        if self._blocking > 0:
            self._abort_commit(node, t)

    def _in_listen(self, c: _Commit, t: int) -> bool:
        if t < c.t0 or t >= c.boundary:
            return False
        d = t - c.t0
        slot = self.medium.cr_slot_us
        half = slot // 2
        if d < c.n_pulses * slot:
            return (d % slot) >= half
        return True  # remainder of the gap is pure listening

    def _abort_commit(self, node: NodeState, t: int) -> None:
        c = node.commit
        c.aborted = True
        if node in self._fires.get(c.boundary, ()):
            self._fires[c.boundary].remove(node)
        node.commit = None
        node.state = _DEFER
        if self.cr_redraw_on_defer:
            node.backoff = draw_backoff(self.rng, node.cw_current)
        # no BEB advance either way; re-anchors at the next idle transition

    def _ev_fire(self, t: int, boundary: int) -> None:
        nodes = self._fires.pop(boundary, [])
        for node in nodes:
            c = node.commit
            if c is None or c.aborted:
                continue
            if not c.cr and self.medium.rs_allowed:
                if self.medium.rs_blocks_medium:
                    self._blocking_end(t)
                else:
                    self._occ_end(t)
                if t > c.t0:
                    self._outcomes.append(
                        TxOutcome(
                            node=node.idx,
                            name=node.name,
                            tech=node.cfg.tech,
                            pclass=node.cfg.pclass,
                            kind=TxKind.RS,
                            start_us=c.t0,
                            end_us=t,
                        )
                    )
                node.stats.reserve_us += t - c.t0
            node.commit = None
            self._start_tx(node, t)

    def _frame_us(self, node: NodeState) -> int:
        if self.medium.frame_tx_us is not None:
            return min(self.medium.frame_tx_us, node.cfg.mcot_us)
        return node.cfg.mcot_us

    def _start_tx(self, node: NodeState, t: int) -> None:
        dur = self._frame_us(node)
        collided = len(self._active_tx) > 0
        for other in self._active_tx:
            other.collided = True
        tx = _ActiveTx(node=node, start=t, end=t + dur, collided=collided)
        self._active_tx.append(tx)
        node.state = _TX
        self._blocking_start(t, node)
        self._push(t + dur, _EV_TX_END, _EV_TX_END, (node.idx, t))

    def _ev_tx_end(self, t: int, idx: int, start: int) -> None:
        node = self.nodes[idx]
        tx = next(a for a in self._active_tx if a.node is node and a.start == start)
        self._active_tx.remove(tx)
        dur = tx.end - tx.start
        if tx.collided:
            node.stats.collisions += 1
            node.stats.collision_air_us += dur
            self._outcomes.append(
                TxOutcome(
                    node=node.idx,
                    name=node.name,
                    tech=node.cfg.tech,
                    pclass=node.cfg.pclass,
                    kind=TxKind.COLLISION,
                    start_us=tx.start,
                    end_us=t,
                )
            )
            on_collision(node, self.rng)
        else:
            delay = tx.start - node.hol_since_us
            node.stats.successes += 1
            node.stats.success_air_us += dur
            node.stats.delay_sum_us += delay
            self._outcomes.append(
                TxOutcome(
                    node=node.idx,
                    name=node.name,
                    tech=node.cfg.tech,
                    pclass=node.cfg.pclass,
                    kind=TxKind.SUCCESS,
                    start_us=tx.start,
                    end_us=t,
                    access_delay_us=delay,
                )
            )
            on_success(node, t, self.rng)
        node.state = _DEFER
        self._blocking_end(t)


def configure_network(
    medium: MediumParams,
    contenders: Iterable[ContenderConfig],
    cr_lbt_enabled: bool = False,
    seed: int = 0,
    cr_redraw_on_defer: bool = False,
) -> Simulator:
    """Validate configs and build a deterministic simulator."""
    return Simulator(
        medium,
        contenders,
        cr_lbt_enabled=cr_lbt_enabled,
        seed=seed,
        cr_redraw_on_defer=cr_redraw_on_defer,
    )
