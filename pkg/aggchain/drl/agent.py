"""
DDPG agent that picks a server's aggregation strategy.

The actor maps a 4-value state to six tanh outputs in [-1, 1], which are mapped
affinely onto the strategy bounds. The critic scores (state, normalized action)
pairs. Both learn from batches drawn from the replay buffer every agent shares.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from aggchain.aggregation import StrategyParams, action_bounds
from aggchain.drl.buffer import ACTION_DIM, STATE_DIM, Batch, SharedReplayBuffer
from aggchain.drl.nets import Adam, Array, Mlp
from aggchain.errors import AggchainError

logger = logging.getLogger(__name__)


def build_state(
    global_metric: float,
    local_metric: float,
    data_fraction: float,
    trainer_fraction: float,
) -> Array:
    state = np.array([global_metric, local_metric, data_fraction, trainer_fraction], dtype=np.float64)
    if not np.all(np.isfinite(state)) or np.any(state < 0.0) or np.any(state > 1.0):
        raise AggchainError(f"state components must lie in [0, 1], got {state.tolist()}")
    return state


def compute_reward(
    local_now: float,
    global_prev: float,
    global_now: float,
    p: float = 1.0,
    q: float = 1.0,
) -> tuple[float, float, float]:
    """Local gain times global gain, each scaled by the metric it reached."""
    r_local = p * (local_now - global_prev) * local_now
    r_global = q * (global_now - global_prev) * global_now
    return r_local, r_global, r_local * r_global


@dataclass(frozen=True)
class DdpgHyper:
    gamma: float = 0.9
    tau: float = 0.01
    batch_size: int = 32
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    hidden: int = 32
    noise: float = 0.1


@dataclass(frozen=True)
class UpdateStats:
    skipped: bool
    critic_loss: float = float("nan")
    actor_objective: float = float("nan")


class DdpgAgent:
    def __init__(
        self,
        server_id: str,
        block_interval: float,
        rng: np.random.Generator,
        hyper: DdpgHyper | None = None,
    ) -> None:
        self.server_id = server_id
        self.hyper = hyper or DdpgHyper()
        self.lo, self.hi = action_bounds(block_interval)
        h = self.hyper.hidden
        self.actor = Mlp.init((STATE_DIM, h, h, ACTION_DIM), rng, squash_output=True)
        self.critic = Mlp.init((STATE_DIM + ACTION_DIM, h, h, 1), rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.hyper.actor_lr)
        self.critic_opt = Adam(self.hyper.critic_lr)
        self.updates = 0

    # -- action mapping ----------------------------------------------------

    def to_action(self, u: Array) -> Array:
        return self.lo + (np.clip(u, -1.0, 1.0) + 1.0) * 0.5 * (self.hi - self.lo)

    def to_unit(self, action: Array) -> Array:
        return 2.0 * (action - self.lo) / (self.hi - self.lo) - 1.0

    def select_action(
        self, state: Array, exploration_scale: float, rng: np.random.Generator
    ) -> StrategyParams:
        action = self.to_action(self.actor(state[None, :])[0])
        if exploration_scale > 0.0:
            std = exploration_scale * self.hyper.noise * (self.hi - self.lo)
            action = action + rng.normal(0.0, 1.0, size=ACTION_DIM) * std
        return StrategyParams.from_vector(np.clip(action, self.lo, self.hi))

    # -- learning ----------------------------------------------------------

    def critic_targets(self, batch: Batch) -> Array:
        u_next = self.actor_target(batch.next_states)
        q_next = self.critic_target(np.hstack([batch.next_states, u_next]))[:, 0]
        return batch.rewards + self.hyper.gamma * q_next

    def critic_loss_and_grad(
        self, states: Array, units: Array, targets: Array
    ) -> tuple[float, list[Array]]:
        q, acts = self.critic.forward(np.hstack([states, units]))
        err = q[:, 0] - targets
        loss = float(np.mean(err**2))
        gw, gb, _ = self.critic.backward(acts, (2.0 * err / len(err))[:, None])
        return loss, [*gw, *gb]

    def actor_objective_and_grad(self, states: Array) -> tuple[float, list[Array]]:
        """Mean critic value of the actor's own actions and its gradient w.r.t. actor params."""
        u, actor_acts = self.actor.forward(states)
        q, critic_acts = self.critic.forward(np.hstack([states, u]))
        objective = float(np.mean(q))
        _, _, g_in = self.critic.backward(critic_acts, np.full_like(q, 1.0 / len(q)))
        gw, gb, _ = self.actor.backward(actor_acts, g_in[:, STATE_DIM:])
        return objective, [*gw, *gb]

    def update(self, buffer: SharedReplayBuffer, rng: np.random.Generator) -> UpdateStats:
        hp = self.hyper
        if len(buffer) < hp.batch_size:
            logger.debug(
                "%s: buffer holds %d < %d experiences, update skipped",
                self.server_id,
                len(buffer),
                hp.batch_size,
            )
            return UpdateStats(skipped=True)
        batch = buffer.sample(hp.batch_size, rng)
        targets = self.critic_targets(batch)

        loss, grads = self.critic_loss_and_grad(batch.states, self.to_unit(batch.actions), targets)
        self.critic_opt.step(self.critic.params(), grads)

        objective, grads = self.actor_objective_and_grad(batch.states)
        # ascend Q
        self.actor_opt.step(self.actor.params(), [-g for g in grads])

        self.actor_target.soft_update_from(self.actor, hp.tau)
        self.critic_target.soft_update_from(self.critic, hp.tau)
        self.updates += 1
        return UpdateStats(False, loss, objective)

    # -- checkpoints -------------------------------------------------------

    def _nets(self) -> tuple[Mlp, Mlp, Mlp, Mlp]:
        return self.actor, self.critic, self.actor_target, self.critic_target

    def save(self, path: Path) -> Path:
        """One flat ``.npy`` vector: update count, then actor, critic and their targets."""
        path.parent.mkdir(parents=True, exist_ok=True)
        vec = np.concatenate([np.array([float(self.updates)]), *(net.flat() for net in self._nets())])
        with path.open("wb") as fh:
            np.save(fh, vec, allow_pickle=False)
        return path

    def load(self, path: Path) -> DdpgAgent:
        vec = np.load(path, allow_pickle=False)
        sizes = [net.flat().size for net in self._nets()]
        if vec.ndim != 1 or vec.size != 1 + sum(sizes):
            raise AggchainError(f"{path}: checkpoint does not match this agent's network sizes")
        self.updates = int(vec[0])
        i = 1
        for net, n in zip(self._nets(), sizes, strict=True):
            net.load_flat(vec[i : i + n])
            i += n
        return self


def random_action(block_interval: float, rng: np.random.Generator) -> StrategyParams:
    lo, hi = action_bounds(block_interval)
    return StrategyParams.from_vector(rng.uniform(lo, hi))
