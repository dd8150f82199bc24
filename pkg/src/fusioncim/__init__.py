"""Cycle-approximate model of a hybrid compute-in-memory attention accelerator."""

from .attention import (
    ExpUnit,
    OnlineSoftmaxState,
    PsumQuantizer,
    RescaleStats,
    ScoreGen,
    count_rescales,
    exact_attention,
    generate_scores,
    online_step,
    quantize_psum,
    read_trace,
    streamed_attention,
    streamed_attention_qkv,
    taylor_exp,
    write_trace,
)
from .config import (
    ArchConfig,
    EnergyTable,
    ModelConfig,
    ValidationReport,
    default_config,
    derive_energy_table,
    load_config,
    validate_config,
)
from .costs import (
    BaselineSpec,
    energy_from_counters,
    model_baseline1,
    model_baseline2,
    model_fusioncim_access,
    peak_efficiency,
)
from .pipeline import (
    EventCounters,
    PipelineParams,
    QTileJob,
    SimResult,
    TileJob,
    closed_form_cycles,
    closed_form_engine_cycles,
    simulate_engine,
    simulate_system,
)
from .report import ExperimentPlan, ReportRow, emit_report, read_report, run_experiment
from .scheduler import (
    BroadcastSchedule,
    TraversalOrder,
    build_inter_tile_schedule,
    build_system_schedule,
    intra_tile_order,
    schedule_to_traversal,
)
from .workload import WorkloadSpec, derive_workload

__version__ = "0.1.0"
