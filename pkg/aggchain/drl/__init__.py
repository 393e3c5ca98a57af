from aggchain.drl.agent import (
    DdpgAgent,
    DdpgHyper,
    UpdateStats,
    build_state,
    compute_reward,
    random_action,
)
from aggchain.drl.buffer import Experience, SharedReplayBuffer

__all__ = [
    "DdpgAgent",
    "DdpgHyper",
    "Experience",
    "SharedReplayBuffer",
    "UpdateStats",
    "build_state",
    "compute_reward",
    "random_action",
]
