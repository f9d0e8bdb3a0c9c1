"""Exception types raised across the package."""


class StpSimError(Exception):
    """Base class for all errors raised by stpsim."""


class ConfigError(StpSimError, ValueError):
    pass


class UnsupportedVirtualStages(ConfigError):
    def __init__(self, v):
        super().__init__(f"only v=2 virtual stages per device are supported, got v={v}")
        self.v = v


class TooFewLayers(ConfigError):
    def __init__(self, layers, slots):
        super().__init__(f"{layers} layers cannot fill {slots} slots")
        self.layers, self.slots = layers, slots


class IndivisibleLayers(ConfigError):
    def __init__(self, layers, slots, suggestions=()):
        hint = f"; nearby valid layer counts: {list(suggestions)}" if suggestions else ""
        super().__init__(
            f"{layers} layers cannot be split over {slots} slots with the last slot two layers short{hint}"
        )
        self.layers, self.slots, self.suggestions = layers, slots, list(suggestions)


class ScheduleError(StpSimError):
    pass


class OrderViolation(ScheduleError):
    """A braid pairs a forward microbatch that is not newer than its backward one."""


class ChunkMismatch(ScheduleError):
    pass


class TooFewMicrobatches(ScheduleError):
    def __init__(self, m, min_m):
        super().__init__(f"m={m} microbatches is below the minimum of {min_m} for this schedule")
        self.m, self.min_m = m, min_m


class OffloadTooSlow(ScheduleError):
    def __init__(self, t_o, t_f):
        super().__init__(f"offload time {t_o} must be below the forward time {t_f}")
        self.t_o, self.t_f = t_o, t_f


class NotStpProgram(ScheduleError):
    pass


class SimulationError(StpSimError):
    pass


class DeadlockDetected(SimulationError):
    def __init__(self, cycle, blocked):
        desc = " -> ".join(f"dev{d}" for d in cycle) if cycle else "no cycle found"
        super().__init__(f"no action can progress ({desc}); blocked: {blocked}")
        self.cycle, self.blocked = cycle, blocked


class DimensionMismatch(StpSimError, ValueError):
    pass


class ConfigMismatch(StpSimError, ValueError):
    pass
