from __future__ import annotations


class AggchainError(RuntimeError):
    """Base class for every error the simulator raises on purpose."""


class ConfigError(AggchainError):
    pass


class ScheduleError(AggchainError):
    """An event was scheduled in the past; always a logic bug in the caller."""


class TrainingError(AggchainError):
    pass


class AggregationError(AggchainError):
    pass


class LedgerError(AggchainError):
    pass


class ConsensusError(AggchainError):
    pass


class ReplayBufferEmpty(AggchainError):
    pass
