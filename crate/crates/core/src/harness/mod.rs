//! Configuration, training driver, grids and sweeps.

mod config;
mod grid;
mod run;

pub use config::{
    BalancingConfig, DataConfig, DataSource, GridConfig, RunConfig, SplitConfig, SplitMode, SweepConfig, TrainConfig,
};
pub use grid::{
    analyze_tradeoff, cell_config, grid_cells, read_summary, run_grid, run_reference_sweep, GridCell, SweepRow,
    TradeoffReport, SWEEP_HEADER,
};
pub use run::{
    generate_data, prepare, prepare_corpus, read_record, run_experiment, run_prepared, Prepared, RunRecord, RunStatus,
    RunSummary, STEP_HEADER, SUMMARY_HEADER,
};
