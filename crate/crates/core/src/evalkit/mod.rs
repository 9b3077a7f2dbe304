//! Answer and retrieval metrics plus the benchmark and sweep drivers.

mod bench;
mod metrics;
mod plot;

pub use bench::{
    load_dataset, parse_dataset, read_sweep_csv, run_benchmark, run_sweep, score_rollout, trace_file_name,
    write_report_csv, write_sweep_csv, Aggregates, BenchOptions, ConfigEcho, DatasetExample, EvalError,
    ExampleRow, MetricReport, SweepRow,
};
pub use metrics::{
    accuracy, exact_match, jac_avg, jaccard, normalize_answer, paragraph_recall, token_f1, TooFewSets,
};
pub use plot::render_f1_tokens_svg;
