"""Deep Q-learning over the dual-augmented state.

The value network is a plain ReLU MLP with hand-written backprop (numpy only)
so the loss gradient can be checked against central finite differences. The
reward realizes the augmented Lagrangian with the negative-only scaled
violation: r = f0 + lambda * v_neg. Training samples lambda uniformly at each
episode start and keeps running the dual update every T0 steps so the lambda
trajectories seen in training match execution dynamics.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .constraint import DualController, augment_state, constraint_signals, sample_lambda
from .env import CoexEnv


def assemble_reward(f0: float, lam: float, v_neg: float) -> float:
    """Augmented-Lagrangian step reward: primary objective plus dual-weighted cost."""
    return f0 + lam * v_neg


def select_action(qvalues: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy with lowest-index argmax tie-break."""
    if len(qvalues) == 0:
        raise ValueError("qvalues must be non-empty")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(0, len(qvalues)))
    return int(np.argmax(qvalues))


def epsilon_at(step: int, total_steps: int, start: float = 1.0, end: float = 0.01,
               anneal_fraction: float = 0.5) -> float:
    """Linear anneal from start to end over the first anneal_fraction of steps."""
    horizon = max(1, int(total_steps * anneal_fraction))
    frac = min(step / horizon, 1.0)
    return start + (end - start) * frac


class MLP:
    """Fully connected ReLU network with identity output and manual backprop."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.dims = list(dims)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            x = np.maximum(x @ w + b, 0.0)
        return x @ self.weights[-1] + self.biases[-1]

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        acts = [x]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            x = np.maximum(x @ w + b, 0.0)
            acts.append(x)
        out = x @ self.weights[-1] + self.biases[-1]
        return out, acts

    def backward(
        self, acts: list[np.ndarray], dout: np.ndarray
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Gradients of a scalar loss given d(loss)/d(output)."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = dout
        for layer in range(len(self.weights) - 1, -1, -1):
            grads_w[layer] = acts[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (acts[layer] > 0.0)
        return grads_w, grads_b

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy_from(self, other: "MLP") -> None:
        self.weights = [w.copy() for w in other.weights]
        self.biases = [b.copy() for b in other.biases]


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Bounded FIFO ring of transitions; oldest evicted at capacity."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminals = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, tr: Transition) -> None:
        i = self._next
        self.obs[i] = tr.obs
        self.next_obs[i] = tr.next_obs
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.terminals[i] = tr.terminal
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self._size, size=batch_size)
        return (
            self.obs[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_obs[idx],
            self.terminals[idx],
        )


def td_targets(
    rewards: np.ndarray,
    next_obs: np.ndarray,
    terminals: np.ndarray,
    target_q: Callable[[np.ndarray], np.ndarray],
    gamma: float,
) -> np.ndarray:
    """y = r + gamma * max_a Q_target(s', a) for non-terminal, y = r otherwise."""
    q_next = np.asarray(target_q(next_obs))
    best = q_next.max(axis=1)
    return rewards + gamma * best * (~np.asarray(terminals, dtype=bool))


@dataclass
class LearnerConfig:
    gamma: float = 0.99
    buffer_capacity: int = 100_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_anneal_fraction: float = 0.5
    learning_rate: float = 1e-5
    batch_size: int = 256
    hidden_layers: tuple = (1024, 1024, 1024)
    target_sync_interval: int = 1000
    total_episodes: int = 10_000

    def validate(self) -> None:
        if not (0 < self.gamma <= 1 and self.buffer_capacity > 0 and self.batch_size > 0):
            raise ValueError("invalid learner config")
        if not (0 <= self.epsilon_end <= self.epsilon_start <= 1):
            raise ValueError("epsilon range must satisfy end <= start within [0, 1]")
        if self.learning_rate <= 0 or self.target_sync_interval < 1 or self.total_episodes < 1:
            raise ValueError("invalid learner config")


class QLearner:
    """Online network, target network, buffer, and one-step-per-env-step training."""

    def __init__(self, obs_dim: int, n_actions: int, config: LearnerConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.rng = np.random.default_rng(seed)
        dims = [obs_dim, *config.hidden_layers, n_actions]
        self.online = MLP(dims, self.rng)
        self.target = MLP(dims, self.rng)
        self.sync_target()
        self.optimizer = Adam(self.online.parameters(), lr=config.learning_rate)
        self.buffer = ReplayBuffer(config.buffer_capacity, obs_dim)
        self.train_steps = 0

    def sync_target(self) -> None:
        self.target.copy_from(self.online)

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        return self.online.forward(obs)[0]

    def act(self, obs: np.ndarray, epsilon: float) -> int:
        return select_action(self.q_values(obs), epsilon, self.rng)

    def train_step(self) -> Optional[float]:
        """One SGD step of squared TD error; None while the buffer is short."""
        if len(self.buffer) < self.config.batch_size:
            return None
        obs, actions, rewards, next_obs, terminals = self.buffer.sample(
            self.config.batch_size, self.rng
        )
        targets = td_targets(rewards, next_obs, terminals, self.target.forward, self.config.gamma)
        q_all, acts = self.online.forward_cached(obs)
        n = len(actions)
        q_taken = q_all[np.arange(n), actions]
        err = q_taken - targets
        loss = float(np.mean(err**2))
        dout = np.zeros_like(q_all)
        dout[np.arange(n), actions] = 2.0 * err / n
        grads_w, grads_b = self.online.backward(acts, dout)
        self.optimizer.step(self.online.weights + self.online.biases, grads_w + grads_b)
        self.train_steps += 1
        if self.train_steps % self.config.target_sync_interval == 0:
            self.sync_target()
        return loss


# ----------------------------------------------------------------------
# policy artifact: versioned binary with JSON header and sha256 payload checksum

_ARTIFACT_MAGIC = b"CXQP"
_ARTIFACT_VERSION = 1


def save_policy(path: str, learner: QLearner, meta: dict) -> None:
    arrays = learner.online.weights + learner.online.biases
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = {
        "version": _ARTIFACT_VERSION,
        "obs_dim": learner.obs_dim,
        "n_actions": learner.n_actions,
        "hidden_layers": list(learner.config.hidden_layers),
        "shapes": [list(a.shape) for a in arrays],
        "checksum": hashlib.sha256(payload).hexdigest(),
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_ARTIFACT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)


@dataclass
class PolicyArtifact:
    obs_dim: int
    n_actions: int
    hidden_layers: tuple
    arrays: list
    meta: dict

    def network(self) -> MLP:
        dims = [self.obs_dim, *self.hidden_layers, self.n_actions]
        net = MLP(dims, np.random.default_rng(0))
        k = len(net.weights)
        net.weights = [a.copy() for a in self.arrays[:k]]
        net.biases = [a.copy() for a in self.arrays[k:]]
        return net


def load_policy(path: str) -> PolicyArtifact:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _ARTIFACT_MAGIC:
            raise ValueError(f"not a policy artifact: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    if header["version"] != _ARTIFACT_VERSION:
        raise ValueError(f"unsupported artifact version {header['version']}")
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise ValueError("artifact payload checksum mismatch")
    arrays = []
    off = 0
    for shape in header["shapes"]:
        size = int(np.prod(shape)) * 8
        arrays.append(np.frombuffer(payload[off:off + size], dtype="<f8").reshape(shape).copy())
        off += size
    return PolicyArtifact(
        obs_dim=header["obs_dim"],
        n_actions=header["n_actions"],
        hidden_layers=tuple(header["hidden_layers"]),
        arrays=arrays,
        meta=header.get("meta", {}),
    )


# ----------------------------------------------------------------------
# training and evaluation loops

@dataclass
class StepLog:
    """One per-step training/evaluation log row."""

    episode: int
    step: int
    lam: float
    v: float
    v_scaled: float
    v_ema: float
    cost: float
    jfi: float
    delay_inst_us: float
    delay_smooth_us: float
    collision_rate: float
    airtime_util: float
    violation_rate: float
    reward: float
    epsilon: float
    action: int
    loss: float

    FIELDS = (
        "episode", "step", "lam", "v", "v_scaled", "v_ema", "cost", "jfi",
        "delay_inst_us", "delay_smooth_us", "collision_rate", "airtime_util",
        "violation_rate", "reward", "epsilon", "action", "loss",
    )

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class TrainResult:
    learner: QLearner
    log: list = field(default_factory=list)


def run_training(
    env: CoexEnv,
    dual: DualController,
    config: LearnerConfig,
    seed: int,
    scaling: bool = True,
    episodes: Optional[int] = None,
    log_hook: Optional[Callable[[StepLog], None]] = None,
    hard_episode_resets: bool = False,
) -> TrainResult:
    """Full training loop over the constrained environment.

    Per episode: sample lambda0, reset the env (medium persists after the
    first hard reset); per step: act epsilon-greedily on the augmented state,
    advance the env, run the constraint pipeline, assemble the reward, store
    the transition, and take one gradient step. The dual variable updates
    every dual.update_period steps so training matches execution dynamics.
    """
    episodes = episodes if episodes is not None else config.total_episodes
    learner = QLearner(env.observation_dim, env.n_actions, config, seed=seed)
    if env.observation_dim != learner.obs_dim:
        raise ValueError("environment/learner dimension mismatch")
    env.lambda_max = dual.lambda_max
    total_steps = episodes * env.episode_steps
    log: list[StepLog] = []
    global_step = 0
    for episode in range(episodes):
        lam0 = sample_lambda(learner.rng, dual.lambda_max)
        dual.reset(lam0)
        if episode == 0:
            reset_seed = seed
        elif hard_episode_resets:
            reset_seed = seed + episode
        else:
            reset_seed = None  # medium persists: continuing ergodic process
        obs = env.reset(seed=reset_seed, lambda0=lam0)
        for step in range(env.episode_steps):
            eps = epsilon_at(
                global_step, total_steps, config.epsilon_start, config.epsilon_end,
                config.epsilon_anneal_fraction,
            )
            action = learner.act(obs, eps)
            res = env.step(action)
            # scaled arm: smoothed delay; raw arm: the unsmoothed instantaneous
            # delay, unbounded in both directions
            delay_signal = res.f1 if scaling else res.info.pc1_delay_inst_us
            v, v_dual, cost = constraint_signals(delay_signal, env.d_th_us, dual.kappa, scaling)
            reward = assemble_reward(res.f0, dual.lam, cost)
            lam_logged = dual.lam
            if scaling:
                dual.observe(v_dual)
            else:
                dual.v_ema = v_dual  # raw arm: unsmoothed signal drives the dual
            if (step + 1) % dual.update_period == 0:
                dual.dual_update()
            env.lam = dual.lam
            next_obs = (
                res.observation
                if res.done
                else augment_state(res.observation[:-1], dual.lam, dual.lambda_max)
            )
            learner.buffer.push(Transition(obs, action, reward, next_obs, res.done))
            loss = learner.train_step()
            entry = StepLog(
                episode=episode, step=step, lam=lam_logged, v=v, v_scaled=v_dual,
                v_ema=dual.v_ema, cost=cost, jfi=res.f0,
                delay_inst_us=res.info.pc1_delay_inst_us,
                delay_smooth_us=res.f1,
                collision_rate=res.info.coll_rate_agg,
                airtime_util=res.info.airtime_util,
                violation_rate=res.info.violation_rate, reward=reward, epsilon=eps,
                action=action, loss=loss if loss is not None else 0.0,
            )
            log.append(entry)
            if log_hook is not None:
                log_hook(entry)
            obs = next_obs if not res.done else res.observation
            global_step += 1
    return TrainResult(learner=learner, log=log)


@dataclass
class EvalRollout:
    log: list
    node_names: list
    collision_probability: dict
    airtime_efficiency: dict
    delays_smooth_us: list
    jfis: list
    violation_fraction: float
    mean_pc1_delay_ms: float


def greedy_rollout(
    env: CoexEnv,
    q_net: Optional[MLP],
    dual: Optional[DualController],
    episodes: int,
    seed: int,
    scaling: bool = True,
    fixed_action: Optional[int] = None,
) -> EvalRollout:
    """Greedy execution (epsilon = 0) with online dual updates and no learning.

    With q_net None and fixed_action None the environment runs with its static
    default MAC parameters (the fixed-parameter baseline).
    """
    log: list[StepLog] = []
    delays, jfis = [], []
    violations = 0
    steps = 0
    start_stats = None
    obs = None
    for episode in range(episodes):
        lam0 = dual.lam if dual is not None else 0.0
        obs = env.reset(seed=seed if episode == 0 else None, lambda0=lam0)
        if episode == 0:
            if q_net is None and fixed_action is None:
                env.apply_defaults()
            start_stats = env.sim.stats_snapshot()
        for step in range(env.episode_steps):
            if fixed_action is not None:
                action = fixed_action
                res = env.step(action)
            elif q_net is not None:
                action = int(np.argmax(q_net.forward(obs)[0]))
                res = env.step(action)
            else:
                action = -1  # baseline: leave default parameters in place
                res = env.step_passive()
            lam = dual.lam if dual is not None else 0.0
            delay_signal = res.f1 if scaling else res.info.pc1_delay_inst_us
            v, v_dual, cost = constraint_signals(delay_signal, env.d_th_us,
                                                 dual.kappa if dual else 0.5, scaling)
            if dual is not None:
                if scaling:
                    dual.observe(v_dual)
                else:
                    dual.v_ema = v_dual
                if (step + 1) % dual.update_period == 0:
                    dual.dual_update()
                env.lam = dual.lam
            log.append(StepLog(
                episode=episode, step=step, lam=lam, v=v, v_scaled=v_dual,
                v_ema=dual.v_ema if dual is not None else 0.0, cost=cost,
                jfi=res.f0, delay_inst_us=res.info.pc1_delay_inst_us, delay_smooth_us=res.f1,
                collision_rate=res.info.coll_rate_agg, airtime_util=res.info.airtime_util,
                violation_rate=res.info.violation_rate,
                reward=assemble_reward(res.f0, lam, cost), epsilon=0.0,
                action=action, loss=0.0,
            ))
            delays.append(res.f1)
            jfis.append(res.f0)
            violations += res.f1 > env.d_th_us
            steps += 1
            obs = (
                augment_state(res.observation[:-1], dual.lam, dual.lambda_max)
                if dual is not None and not res.done
                else res.observation
            )
    end_stats = env.sim.stats_snapshot()
    names = env.sim.node_names()
    coll_prob, eff = {}, {}
    for name, s0, s1 in zip(names, start_stats, end_stats):
        d_succ = s1.successes - s0.successes
        d_coll = s1.collisions - s0.collisions
        attempts = d_succ + d_coll
        coll_prob[name] = d_coll / attempts if attempts else 0.0
        occupied = (
            (s1.success_air_us - s0.success_air_us)
            + (s1.collision_air_us - s0.collision_air_us)
            + (s1.reserve_us - s0.reserve_us)
            + (s1.pulse_us - s0.pulse_us)
        )
        eff[name] = (s1.success_air_us - s0.success_air_us) / occupied if occupied else 0.0
    return EvalRollout(
        log=log,
        node_names=names,
        collision_probability=coll_prob,
        airtime_efficiency=eff,
        delays_smooth_us=delays,
        jfis=jfis,
        violation_fraction=violations / steps if steps else 0.0,
        mean_pc1_delay_ms=float(np.mean(delays)) / 1000.0 if delays else 0.0,
    )
