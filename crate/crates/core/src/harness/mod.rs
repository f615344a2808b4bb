//! Workload files, run configuration, synthetic generation, simulation and
//! reporting.

mod config;
mod generate;
mod report;
mod simulate;
mod workload;

pub use config::{
    load_config, parse_config, ConfigFileError, CostConfig, ParentModeName, RelevanceConfig, RunConfig,
    SchedulerConfig, SkillsConfig, SpawnWeights,
};
pub use generate::{generate_synthetic, load_params, parse_params, GenerateError, GeneratorParams};
pub use report::{emit_report, MachineReport, ReportFormat, ReportParseError, REPORT_FORMAT};
pub use simulate::{run_simulation, simulate_conflicts, ConflictBatch, RunReport, SimulationError, SpawnLine};
pub use workload::{
    load_workload, parse_workload, save_workload, ConflictSpec, MemoryFixture, TaskFixture, WorkloadError,
    WorkloadSpec, WORKLOAD_SCHEMA, WORKLOAD_VERSION,
};
