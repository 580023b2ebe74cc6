//! Repeated train/evaluate runs over feature kinds and calibration depths.
//!
//! Packets are pushed through the stateless part of the chain once; each
//! (kind, gamma) pair only reruns the calibrator, and each run only
//! reinitializes the network weights.

use serde::{Deserialize, Serialize};

use crate::classifier::{split_validation, train, TrainConfig};
use crate::error::{Error, Result};
use crate::evs::{finish_stream, stream_stage, FeatureKind, FeatureVector, StreamStage};
use crate::io::ResultRow;
use crate::ofdm::{ModOrder, OfdmConfig, Packet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub val_frac: f64,
    pub runs: usize,
    /// Run `r` trains with seed `seed + r`.
    pub seed: u64,
    pub window: usize,
    pub order_hint: Option<ModOrder>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            val_frac: 0.1,
            runs: 5,
            seed: 1,
            window: 50,
            order_hint: None,
        }
    }
}

/// Accuracy of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub kind: FeatureKind,
    pub gamma: u32,
    pub run: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunRecord>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Stateless stages for one packet stream, computed lazily per branch.
struct Staged<'a> {
    packets: &'a [Packet],
    labels: Vec<u16>,
    csi: Option<Vec<StreamStage>>,
    evs: Option<Vec<StreamStage>>,
}

impl<'a> Staged<'a> {
    fn new(packets: &'a [Packet]) -> Self {
        Staged { packets, labels: packets.iter().map(|p| p.label).collect(), csi: None, evs: None }
    }

    fn features(&mut self, cfg: &OfdmConfig, kind: FeatureKind, gamma: u32, exp: &ExperimentConfig) -> Result<Vec<FeatureVector>> {
        let slot = if kind.is_evs() { &mut self.evs } else { &mut self.csi };
        if slot.is_none() {
            *slot = Some(stream_stage(self.packets, cfg, kind.is_evs(), exp.order_hint)?);
        }
        finish_stream(slot.as_ref().expect("filled"), &self.labels, kind, gamma, exp.window)
    }
}

/// Train and test every `(kind, gamma)` pair `exp.runs` times.
pub fn run_grid(
    experiment: &str,
    train_packets: &[Packet],
    test_packets: &[Packet],
    cfg: &OfdmConfig,
    grid: &[(FeatureKind, u32)],
    exp: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    if exp.runs == 0 {
        return Err(Error::InvalidConfig("at least one run is required".into()));
    }
    if test_packets.is_empty() {
        return Err(Error::EmptyDataset("test packets"));
    }
    let mut train_stage = Staged::new(train_packets);
    let mut test_stage = Staged::new(test_packets);
    let mut out = ExperimentOutput { rows: Vec::new(), runs: Vec::new() };
    for &(kind, gamma) in grid {
        let train_features = train_stage.features(cfg, kind, gamma, exp)?;
        let test_features = test_stage.features(cfg, kind, gamma, exp)?;
        let mut accs = Vec::with_capacity(exp.runs);
        for run in 0..exp.runs {
            let seed = exp.seed.wrapping_add(run as u64);
            let (tr, val) = split_validation(&train_features, exp.val_frac, seed);
            let cfg = TrainConfig { seed, ..exp.train.clone() };
            let (model, _) = train(&tr, &val, &cfg)?;
            let accuracy = model.predict(&test_features)?.accuracy;
            accs.push(accuracy);
            out.runs.push(RunRecord { experiment: experiment.into(), kind, gamma, run, seed, accuracy });
        }
        let (accuracy, std) = mean_std(&accs);
        out.rows.push(ResultRow { experiment: experiment.into(), kind, gamma, seed: exp.seed, accuracy, std });
    }
    Ok(out)
}

/// Every kind against every gamma.
pub fn sweep_gamma(
    train_packets: &[Packet],
    test_packets: &[Packet],
    cfg: &OfdmConfig,
    kinds: &[FeatureKind],
    gammas: &[u32],
    exp: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    let grid: Vec<_> = kinds.iter().flat_map(|&k| gammas.iter().map(move |&g| (k, g))).collect();
    run_grid("sweep-gamma", train_packets, test_packets, cfg, &grid, exp)
}

/// Calibration depth used for each kind in the four-way comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompareGammas {
    pub evs_amp: u32,
    pub evs_phase: u32,
}

impl Default for CompareGammas {
    fn default() -> Self {
        CompareGammas { evs_amp: 4, evs_phase: 6 }
    }
}

/// All four feature kinds through the same network configuration.
pub fn compare(
    train_packets: &[Packet],
    test_packets: &[Packet],
    cfg: &OfdmConfig,
    gammas: CompareGammas,
    exp: &ExperimentConfig,
) -> Result<ExperimentOutput> {
    let grid = [
        (FeatureKind::CsiAmp, 0),
        (FeatureKind::CsiPhase, 0),
        (FeatureKind::EvsAmp, gammas.evs_amp),
        (FeatureKind::EvsPhase, gammas.evs_phase),
    ];
    run_grid("compare", train_packets, test_packets, cfg, &grid, exp)
}
