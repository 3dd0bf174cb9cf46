use std::io::Write;

use rayon::prelude::*;

use super::{train_data, TrainConfig, TrainData, TrainError, TrainLog};
use crate::models::{Checkpoint, ModelConfig, Network};
use crate::preprocess::PipelineConfig;

/// Outcome of one grid point. Failures are kept per run.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub index: usize,
    /// The grid config with its derived seed filled in.
    pub config: TrainConfig,
    pub result: Result<(TrainLog, Checkpoint), String>,
}

impl SweepRun {
    pub fn log(&self) -> Option<&TrainLog> {
        self.result.as_ref().ok().map(|(l, _)| l)
    }
}

/// Train one model per grid entry. Run `i` uses seed `grid[i].seed ^ i` for
/// both initialization and shuffling. Runs execute in parallel and share
/// nothing mutable.
pub fn sweep(
    model_cfg: &ModelConfig,
    grid: &[TrainConfig],
    train: &TrainData,
    val: &TrainData,
    pipeline: &PipelineConfig,
) -> Result<Vec<SweepRun>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Config("empty sweep grid".into()));
    }
    model_cfg
        .validate()
        .map_err(TrainError::Model)?;
    Ok(grid
        .par_iter()
        .enumerate()
        .map(|(index, cfg)| {
            let mut config = cfg.clone();
            config.seed = cfg.seed ^ index as u64;
            let result = Network::build(model_cfg, config.seed)
                .map_err(TrainError::from)
                .and_then(|net| train_data(net, train, val, pipeline, &config))
                .map(|o| (o.log, o.checkpoint))
                .map_err(|e| e.to_string());
            if let Err(e) = &result {
                log::warn!("sweep run {index} failed: {e}");
            }
            SweepRun {
                index,
                config,
                result,
            }
        })
        .collect())
}

/// Combined validation curves, one row per evaluation:
/// `run,eta,gamma,batch_size,step,epoch,val_mse,val_spearman`.
pub fn write_curves_csv<W: Write>(out: W, runs: &[SweepRun]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "run",
        "eta",
        "gamma",
        "batch_size",
        "step",
        "epoch",
        "val_mse",
        "val_spearman",
    ])?;
    for run in runs {
        let Some(log) = run.log() else { continue };
        for e in &log.evals {
            w.write_record([
                run.index.to_string(),
                run.config.eta.to_string(),
                run.config.gamma.to_string(),
                run.config.batch_size.to_string(),
                e.step.to_string(),
                e.epoch.to_string(),
                e.val_mse.to_string(),
                e.val_spearman.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
