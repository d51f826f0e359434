"""Collectives decomposed into point-to-point steps and fused with sharded compute,
run on an in-process multi-rank fabric, with layers, a cost model and a CLI."""

from .collectives import (
    Schedule,
    ScheduleKind,
    Step,
    build_schedule,
    fuse_all_gather,
    fuse_all_to_all,
    fuse_reduce_scatter,
    validate_schedule,
)
from .costmodel import CostParams, CostReport, Strategy, analytic_latency, no_tail_check, simulate_timeline
from .errors import (
    GroupError,
    GroupTimeout,
    ShapeError,
    TimelineError,
    UnsupportedConfigError,
    UsageError,
)
from .fabric import RankEndpoint, RankGroup, spawn_group

__version__ = "0.1.0"

__all__ = [
    "CostParams",
    "CostReport",
    "GroupError",
    "GroupTimeout",
    "RankEndpoint",
    "RankGroup",
    "Schedule",
    "ScheduleKind",
    "ShapeError",
    "Step",
    "Strategy",
    "TimelineError",
    "UnsupportedConfigError",
    "UsageError",
    "analytic_latency",
    "build_schedule",
    "fuse_all_gather",
    "fuse_all_to_all",
    "fuse_reduce_scatter",
    "no_tail_check",
    "simulate_timeline",
    "spawn_group",
    "validate_schedule",
]
