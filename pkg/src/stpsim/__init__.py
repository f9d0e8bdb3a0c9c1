"""Schedule simulator for hybrid tensor + pipeline parallel training.

Builds braided forward/backward execution blocks, generates 1F1B-Interleaved,
ZB-V and synergistic pipeline schedules, simulates them on per-device
streams with exact rational time, and checks the results against closed-form
bubble and memory expressions.
"""
from .analysis import ClosedForm, Comparison, ToleranceSpec, closed_form, compare
from .braid import (ExecutionBlock, backward_only_block, block_span, braid_block, forward_only_block,
                    forward_weight_block, place_block)
from .errors import (ChunkMismatch, ConfigError, ConfigMismatch, DeadlockDetected, DimensionMismatch,
                     IndivisibleLayers, NotStpProgram, OffloadTooSlow, OrderViolation, ScheduleError,
                     SimulationError, StpSimError, TooFewLayers, TooFewMicrobatches, UnsupportedVirtualStages)
from .program import Action, ScheduleProgram, check_program
from .schedule import (MEMORY_EFFICIENT, THROUGHPUT, apply_offloading, schedule_1f1b_interleaved, schedule_stp,
                       schedule_zbv)
from .sim import SimResult, bubble_report, simulate, validate_dependencies
from .workload import (CostModel, ParallelConfig, StagePlan, as_time, build_llm_stage_plan, build_mllm_stage_plan,
                       build_uniform_stage_plan, chunk_costs)

__all__ = [name for name in dir() if not name.startswith("_")]
