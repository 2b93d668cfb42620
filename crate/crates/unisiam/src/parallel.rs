//! Rayon fan-out for episode evaluation and MI sweeps. Results are merged in
//! index order, so outputs do not depend on the worker count.

use rayon::prelude::*;

use unisiam_core::data::EpisodePool;
use unisiam_core::fewshot::{encode_pool, episode_accuracy, EpisodeSpec, ProbeConfig};
use unisiam_core::mi::{self, MIBenchResult, MiConfig};
use unisiam_core::models::EncoderStack;

use crate::error::{CliError, Result};

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} workers: {}", workers, e)))
}

/// Per-episode accuracies of `encoder` (raw features when `None`).
pub fn episodes(
    encoder: Option<&EncoderStack>,
    raw: &EpisodePool,
    spec: &EpisodeSpec,
    shuffled: bool,
    probe: &ProbeConfig,
    workers: usize,
) -> Result<Vec<f64>> {
    spec.validate()?;
    probe.validate()?;
    let encoded = match encoder {
        Some(e) => encode_pool(e, raw)?,
        None => raw.clone(),
    };
    let out: unisiam_core::Result<Vec<f64>> = pool(workers)?.install(|| {
        (0..spec.episodes).into_par_iter().map(|i| episode_accuracy(raw, &encoded, spec, i, shuffled, probe)).collect()
    });
    Ok(out?)
}

/// Sweep cells ordered by `rho`, then seed.
pub fn mi_sweep(grid: &[f64], seeds: &[u64], cfg: &MiConfig, workers: usize) -> Result<Vec<MIBenchResult>> {
    cfg.validate()?;
    if let Some(bad) = grid.iter().find(|r| r.is_nan() || r.abs() >= 1.0) {
        return Err(CliError::Config(format!("rho grid value {} outside (-1, 1)", bad)));
    }
    let cells: Vec<(f64, u64)> = grid.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    let out: unisiam_core::Result<Vec<MIBenchResult>> =
        pool(workers)?.install(|| cells.par_iter().map(|&(rho, seed)| mi::run_cell(rho, seed, cfg)).collect());
    Ok(out?)
}
