//! Sweep orchestration, run records, aggregation and report emission.

mod aggregate;
mod record;
mod report;
mod sweep;

pub use aggregate::{best_mean_per_batch, best_per_batch};
pub use record::{
    completed_ids, from_json_line, read_jsonl, read_records_csv, spec_hash, to_json_line,
    write_jsonl, write_records_csv, Outcome, RunModule, RunRecord,
};
pub use report::{emit_report, log_space, loglog_svg, summary, CriticalRow, ReportInput, Series};
pub use sweep::{
    run_sweep, trainer_record, GridAxes, Job, PlannedRun, SweepBase, SweepFailure, SweepOptions,
    SweepOutcome, SweepSpec, AXIS_NAMES,
};
