//! Experiment harness for `polaron-core`: configuration, presets, crystal cache,
//! property suites, records and plot scripts.

pub mod cache;
pub mod config;
pub mod experiments;
pub mod oracle;
pub mod plots;
pub mod presets;
pub mod record;
pub mod suites;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{Experiment, ExperimentConfig};
pub use record::{ExperimentRecord, Status};

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] polaron_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 4,
            Self::Core(polaron_core::Error::Diverged { .. }) => 3,
            Self::Core(polaron_core::Error::InvalidSpec(_) | polaron_core::Error::Invalid(_)) => 4,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub no_cache: bool,
    pub cache_root: Option<PathBuf>,
}

/// Runs one experiment and writes its record. Module errors are captured in the record;
/// only configuration and output errors are returned.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentRecord, LabError> {
    cfg.validate()?;
    let start = Instant::now();
    let cache_root = opts.cache_root.clone().unwrap_or_else(cache::root);
    let outcome = experiments::execute(cfg, &cache_root, opts.no_cache);
    let mut record = ExperimentRecord {
        format_version: record::FORMAT_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        experiment: cfg.experiment.name().to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        status: Status::Pass,
        error: None,
        wall_time_s: 0.0,
        crystal_cache_hit: false,
        metrics: Default::default(),
        assertions: Vec::new(),
        tables: Vec::new(),
        table_data: Vec::new(),
    };
    match outcome {
        Ok(o) => {
            record.crystal_cache_hit = o.cache_hit;
            record.metrics = o.metrics;
            record.status = if o.assertions.iter().all(|a| a.passed) { Status::Pass } else { Status::Fail };
            record.assertions = o.assertions;
            record.table_data = o.tables;
        }
        Err(e) => {
            record.status = match &e {
                LabError::Core(polaron_core::Error::Diverged { .. }) => Status::Diverged,
                LabError::Config(_) => return Err(e),
                _ => Status::Error,
            };
            record.error = Some(e.to_string());
        }
    }
    record.wall_time_s = start.elapsed().as_secs_f64();
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| Path::new("results").join(format!("{}-{}", record.experiment, &record.config_hash[..12])));
    record.write(&out)?;
    plots::emit_plots(&record, &out)?;
    Ok(record)
}
