import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

import structlog

from dosediff.core.logging import StageTrace
from dosediff.models.domain import DoseContext, Volume3D
from dosediff.models.schemas.reports import MetricsReport

logger = structlog.get_logger(__name__)


class PipelineStage(str, Enum):
    """Pipeline Stage"""
    PRIOR = "prior"
    SAMPLE = "sample"
    EVALUATE = "evaluate"


@dataclass
class PipelineContext:
    """Pipeline Context"""
    noisy: Volume3D
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    dose: Optional[DoseContext] = None
    reference: Optional[Volume3D] = None
    prior: Optional[Volume3D] = None
    output: Optional[Volume3D] = None
    report: Optional[MetricsReport] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.dose is None:
            self.dose = self.noisy.dose()


Node = Callable[[PipelineContext], PipelineContext]


class DenoisePipeline:
    """Prior -> sample -> evaluate, each stage optional."""

    ORDER = (PipelineStage.PRIOR, PipelineStage.SAMPLE, PipelineStage.EVALUATE)

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        self.config = config or {}
        self.nodes: Dict[PipelineStage, Node] = {}
        self.middlewares: List[Any] = []

    def register_node(self, stage: PipelineStage, node: Node):
        """Register processing node"""
        self.nodes[stage] = node

    def add_middleware(self, middleware: Any):
        """Add middleware"""
        self.middlewares.append(middleware)

    def execute(self, noisy: Volume3D, **kwargs) -> PipelineContext:
        ctx = PipelineContext(noisy=noisy, **kwargs)
        for stage in self.ORDER:
            ctx = self._execute_stage(stage, ctx)
        return ctx

    def _execute_stage(self, stage: PipelineStage, ctx: PipelineContext) -> PipelineContext:
        if stage not in self.nodes:
            return ctx

        for middleware in self.middlewares:
            if hasattr(middleware, "before_stage"):
                ctx = middleware.before_stage(stage, ctx)

        ctx = self.nodes[stage](ctx)

        for middleware in self.middlewares:
            if hasattr(middleware, "after_stage"):
                ctx = middleware.after_stage(stage, ctx)
        return ctx


class StageTimingMiddleware:
    """Records wall time per stage into ctx.metadata and, with `trace`, the stage trace."""

    def __init__(self, trace: bool = True):
        self.trace = StageTrace() if trace else None
        self._started: Dict[str, float] = {}

    def before_stage(self, stage: PipelineStage, ctx: PipelineContext) -> PipelineContext:
        self._started[f"{ctx.run_id}:{stage.value}"] = time.perf_counter()
        return ctx

    def after_stage(self, stage: PipelineStage, ctx: PipelineContext) -> PipelineContext:
        started = self._started.pop(f"{ctx.run_id}:{stage.value}", time.perf_counter())
        elapsed_ms = round((time.perf_counter() - started) * 1000.0, 3)
        ctx.metadata.setdefault("stage_ms", {})[stage.value] = elapsed_ms
        logger.info("stage_complete", run_id=ctx.run_id, stage=stage.value, elapsed_ms=elapsed_ms)
        if self.trace is None:
            return ctx
        fields: Dict[str, Any] = {"shape": list(ctx.noisy.shape), "count_fraction": ctx.dose.count_fraction}
        if stage is PipelineStage.SAMPLE:
            fields["evaluations_per_slice"] = ctx.metadata.get("evaluations_per_slice")
            fields["sqrt_clamps"] = ctx.metadata.get("sqrt_clamps")
        if stage is PipelineStage.EVALUATE and ctx.report is not None:
            fields["report"] = ctx.report.model_dump(exclude={"conventions"})
        self.trace.record(ctx.run_id, stage.value, elapsed_ms, **fields)
        return ctx
