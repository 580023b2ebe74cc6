//! Error vector spectrum: modulation classification, hard decisions, the
//! raw per-symbol error matrix, its per-subcarrier mean and the streaming
//! calibration that blends each packet with its recent history.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseband::{equalize, estimate_csi, estimate_rfo_or_hold, CsiVector, EqualizedSymbols};
use crate::error::{dim_mismatch, Error, Result};
use crate::ofdm::{phase, CMatrix, Constellation, ModOrder, OfdmConfig, Packet};

pub const KMEANS_MAX_ITER: usize = 50;
pub const KMEANS_TOL: f64 = 1e-6;
/// Minimum number of data symbols for modulation classification.
pub const MIN_CLASSIFY_SYMBOLS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct RawEvsMatrix {
    pub e_r: CMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawEvsVector {
    pub eps_bar: Vec<Complex64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvsVector {
    pub eps: Vec<Complex64>,
}

impl EvsVector {
    pub fn amplitude(&self) -> Vec<f64> {
        self.eps.iter().map(|e| e.norm()).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.eps.iter().copied().map(phase).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum FeatureKind {
    CsiAmp,
    CsiPhase,
    EvsAmp,
    EvsPhase,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [
        FeatureKind::CsiAmp,
        FeatureKind::CsiPhase,
        FeatureKind::EvsAmp,
        FeatureKind::EvsPhase,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::CsiAmp => "csi-amp",
            FeatureKind::CsiPhase => "csi-phase",
            FeatureKind::EvsAmp => "evs-amp",
            FeatureKind::EvsPhase => "evs-phase",
        }
    }

    pub fn is_evs(self) -> bool {
        matches!(self, FeatureKind::EvsAmp | FeatureKind::EvsPhase)
    }

    pub fn is_phase(self) -> bool {
        matches!(self, FeatureKind::CsiPhase | FeatureKind::EvsPhase)
    }

    fn view(self, v: &[Complex64]) -> Vec<f64> {
        if self.is_phase() {
            v.iter().copied().map(phase).collect()
        } else {
            v.iter().map(|z| z.norm()).collect()
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown feature kind {s:?}")))
    }
}

impl From<FeatureKind> for String {
    fn from(k: FeatureKind) -> String {
        k.as_str().to_string()
    }
}

impl TryFrom<String> for FeatureKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub label: u16,
    pub values: Vec<f64>,
}

/// Result of fitting one candidate constellation.
#[derive(Clone, Debug)]
pub struct ClusterFit {
    pub order: ModOrder,
    pub centroids: Vec<Complex64>,
    pub iterations: usize,
    pub score: f64,
}

fn nearest(points: &[Complex64], z: Complex64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (z - p).norm_sqr();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Nearest and second-nearest squared distances, scanning outward from the
/// query along centroids sorted by real part. Ties keep the smaller index.
fn two_nearest(centroids: &[Complex64], by_re: &[usize], z: Complex64) -> (usize, f64, f64) {
    let (mut best, mut d1, mut d2) = (usize::MAX, f64::INFINITY, f64::INFINITY);
    let start = by_re.partition_point(|&j| centroids[j].re < z.re);
    let (mut lo, mut hi) = (start, start);
    let gap = |j: usize| (centroids[j].re - z.re).powi(2);
    loop {
        let right = (hi < by_re.len()).then(|| gap(by_re[hi]));
        let left = (lo > 0).then(|| gap(by_re[lo - 1]));
        let j = match (left, right) {
            (Some(l), Some(r)) if r <= l && r <= d2 => {
                hi += 1;
                by_re[hi - 1]
            }
            (Some(l), _) if l <= d2 && right.is_none_or(|r| l < r) => {
                lo -= 1;
                by_re[lo]
            }
            (None, Some(r)) if r <= d2 => {
                hi += 1;
                by_re[hi - 1]
            }
            _ => break,
        };
        let d = (z - centroids[j]).norm_sqr();
        if d < d1 || (d == d1 && j < best) {
            (best, d2, d1) = (j, d1, d);
        } else if d < d2 {
            d2 = d;
        }
    }
    (best, d1, d2)
}

/// Lloyd iterations started from the canonical points of `order`, scored by
/// how far the fitted centroids moved off the canonical grid plus the
/// within-cluster distortion. Both terms are averaged over symbols, so a
/// centroid counts in proportion to how many symbols it holds.
pub fn fit_constellation(symbols: &[Complex64], order: ModOrder) -> ClusterFit {
    let canon = Constellation::new(order);
    let mut centroids = canon.points().to_vec();
    let m = centroids.len();
    // Hamerly bounds: `upper` on the distance to the assigned centroid,
    // `lower` on the distance to every other one. A point is rescanned only
    // when the bounds cannot prove its assignment, so the iterates match
    // plain Lloyd exactly.
    let mut assign = vec![0usize; symbols.len()];
    let mut upper = vec![f64::INFINITY; symbols.len()];
    let mut lower = vec![0.0; symbols.len()];
    let mut half_gap = vec![0.0; m];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        for (j, h) in half_gap.iter_mut().enumerate() {
            *h = centroids
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(_, c)| (c - centroids[j]).norm_sqr().sqrt())
                .fold(f64::INFINITY, f64::min)
                / 2.0;
        }
        let mut by_re: Vec<usize> = (0..m).collect();
        by_re.sort_by(|&a, &b| centroids[a].re.total_cmp(&centroids[b].re).then(a.cmp(&b)));
        let mut sums = vec![Complex64::new(0.0, 0.0); m];
        let mut counts = vec![0usize; m];
        for (i, &z) in symbols.iter().enumerate() {
            let bound = half_gap[assign[i]].max(lower[i]);
            if upper[i] * (1.0 + 1e-9) >= bound {
                upper[i] = (z - centroids[assign[i]]).norm_sqr().sqrt();
                if upper[i] * (1.0 + 1e-9) >= bound {
                    let (best, d1, d2) = two_nearest(&centroids, &by_re, z);
                    assign[i] = best;
                    upper[i] = d1.sqrt();
                    lower[i] = d2.sqrt();
                }
            }
            sums[assign[i]] += z;
            counts[assign[i]] += 1;
        }
        let mut moved = vec![0.0; m];
        for j in 0..m {
            if counts[j] > 0 {
                let c = sums[j] / counts[j] as f64;
                moved[j] = (c - centroids[j]).norm_sqr().sqrt();
                centroids[j] = c;
            }
        }
        let shift = moved.iter().copied().fold(0.0, f64::max);
        if shift < KMEANS_TOL {
            break;
        }
        for i in 0..symbols.len() {
            upper[i] += moved[assign[i]];
            lower[i] -= shift;
        }
    }
    for (a, &z) in assign.iter_mut().zip(symbols) {
        *a = nearest(&centroids, z).0;
    }
    let n = symbols.len() as f64;
    let misfit: f64 = assign
        .iter()
        .map(|&a| nearest(canon.points(), centroids[a]).1)
        .sum::<f64>()
        / n;
    let distortion: f64 = assign
        .iter()
        .zip(symbols)
        .map(|(&a, z)| (z - centroids[a]).norm_sqr())
        .sum::<f64>()
        / n;
    ClusterFit {
        order,
        centroids,
        iterations,
        score: misfit + distortion,
    }
}

/// Data-subcarrier symbols of an equalized block, pilots excluded.
pub fn data_symbols(x_bar: &EqualizedSymbols, cfg: &OfdmConfig) -> Vec<Complex64> {
    cfg.grid
        .data_rows()
        .into_iter()
        .flat_map(|r| x_bar.x_bar.row(r).to_vec())
        .collect()
}

/// Pick the modulation order whose clustering fits best; ties go to the
/// smaller order.
pub fn classify_modulation(x_bar: &EqualizedSymbols, cfg: &OfdmConfig) -> Result<ModOrder> {
    classify_symbols(&data_symbols(x_bar, cfg))
}

pub fn classify_symbols(symbols: &[Complex64]) -> Result<ModOrder> {
    if symbols.len() < MIN_CLASSIFY_SYMBOLS {
        return Err(Error::InsufficientData {
            needed: MIN_CLASSIFY_SYMBOLS,
            got: symbols.len(),
        });
    }
    if symbols.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("equalized symbols"));
    }
    let mut best: Option<ClusterFit> = None;
    for order in ModOrder::ALL {
        let fit = fit_constellation(symbols, order);
        if best.as_ref().is_none_or(|b| fit.score < b.score) {
            best = Some(fit);
        }
    }
    Ok(best.expect("four candidates").order)
}

/// Nearest-point decisions on data cells; pilot cells take the known pilot value.
pub fn hard_decide(x_bar: &EqualizedSymbols, order: ModOrder, cfg: &OfdmConfig) -> Result<CMatrix> {
    if x_bar.x_bar.nrows() != cfg.k() {
        return Err(dim_mismatch("equalized rows", cfg.k(), x_bar.x_bar.nrows()));
    }
    let points = Constellation::new(order);
    let pilot_value: Vec<Option<f64>> = cfg
        .grid
        .occupied
        .iter()
        .map(|i| cfg.grid.pilots.iter().position(|p| p == i).map(|j| cfg.layout.pilot_ref[j]))
        .collect();
    let mut out = x_bar.x_bar.clone();
    for ((r, _), v) in out.indexed_iter_mut() {
        *v = match pilot_value[r] {
            Some(p) => Complex64::new(p, 0.0),
            None => points.points()[points.nearest(*v)],
        };
    }
    Ok(out)
}

/// Per-cell error between equalized symbols and their decisions.
///
/// Both operands live in the pilot-derotated frame produced by
/// [`equalize`], so the common phase applied there is already shared by
/// the decisions and cancels: correct decisions leave only the
/// channel-scaled residual.
pub fn raw_evs(x_bar: &EqualizedSymbols, x_hat: &CMatrix) -> Result<RawEvsMatrix> {
    if x_bar.x_bar.dim() != x_hat.dim() {
        return Err(dim_mismatch(
            "decided symbols",
            format!("{:?}", x_bar.x_bar.dim()),
            format!("{:?}", x_hat.dim()),
        ));
    }
    Ok(RawEvsMatrix { e_r: &x_bar.x_bar - x_hat })
}

/// Complex mean over DF symbols.
pub fn average_evs(e_r: &RawEvsMatrix) -> Result<RawEvsVector> {
    let n = e_r.e_r.ncols();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    Ok(RawEvsVector {
        eps_bar: e_r
            .e_r
            .rows()
            .into_iter()
            .map(|row| row.sum() / n as f64)
            .collect(),
    })
}

/// `eps = current / 2^g + (2^g - 1) / 2^g * mean(history)`.
///
/// `history` holds the last T raw vectors with `current` as its newest entry.
pub fn calibrate(current: &RawEvsVector, history: &[&RawEvsVector], gamma: u32) -> Result<EvsVector> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let k = current.eps_bar.len();
    if let Some(h) = history.iter().find(|h| h.eps_bar.len() != k) {
        return Err(dim_mismatch("calibration history", k, h.eps_bar.len()));
    }
    let scale = 2f64.powi(gamma as i32);
    let keep = 1.0 / scale;
    let blend = (scale - 1.0) / scale;
    let t = history.len() as f64;
    let eps = (0..k)
        .map(|i| {
            let mean = history.iter().map(|h| h.eps_bar[i]).sum::<Complex64>() / t;
            current.eps_bar[i] * keep + mean * blend
        })
        .collect();
    Ok(EvsVector { eps })
}

/// Sliding calibration windows, one per label.
#[derive(Clone, Debug)]
pub struct Calibrator {
    gamma: u32,
    window: usize,
    history: HashMap<u16, VecDeque<RawEvsVector>>,
}

impl Calibrator {
    pub fn new(gamma: u32, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidConfig("calibration window must be at least 1".into()));
        }
        Ok(Calibrator {
            gamma,
            window,
            history: HashMap::new(),
        })
    }

    pub fn push(&mut self, label: u16, raw: RawEvsVector) -> Result<EvsVector> {
        let window = self.history.entry(label).or_default();
        if window.len() == self.window {
            window.pop_front();
        }
        window.push_back(raw);
        let hist: Vec<&RawEvsVector> = window.iter().collect();
        calibrate(hist[hist.len() - 1], &hist, self.gamma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kind: FeatureKind,
    pub gamma: u32,
    /// Calibration window T in packets.
    pub window: usize,
    /// Skip modulation classification and decide against this order.
    pub order_hint: Option<ModOrder>,
}

impl PipelineConfig {
    pub fn new(kind: FeatureKind) -> Self {
        PipelineConfig {
            kind,
            gamma: 0,
            window: 50,
            order_hint: None,
        }
    }
}

pub fn packet_csi(packet: &Packet, cfg: &OfdmConfig) -> Result<CsiVector> {
    packet.check(cfg)?;
    estimate_csi(&packet.ltf_rx, &cfg.layout.ltf_matrix())
}

/// Classify every packet and return the majority order; ties go to the
/// smaller order.
pub fn session_order(packets: &[Packet], cfg: &OfdmConfig) -> Result<ModOrder> {
    if packets.is_empty() {
        return Err(Error::EmptyDataset("packet stream"));
    }
    let orders: Vec<ModOrder> = packets
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            tag(i, (|| {
                let csi = packet_csi(p, cfg)?;
                let rfo = estimate_rfo_or_hold(&p.df_rx, &csi, cfg)?;
                classify_modulation(&equalize(&p.df_rx, &csi, &rfo, cfg)?, cfg)
            })())
        })
        .collect::<Result<_>>()?;
    let votes = |o: ModOrder| orders.iter().filter(|&&x| x == o).count();
    Ok(ModOrder::ALL
        .into_iter()
        .rev()
        .max_by_key(|&o| votes(o))
        .expect("four orders"))
}

/// Everything up to the per-packet raw EVS vector.
#[derive(Clone, Debug)]
pub struct PacketEvs {
    pub csi: CsiVector,
    pub order: ModOrder,
    pub raw: RawEvsVector,
}

pub fn packet_raw_evs(packet: &Packet, cfg: &OfdmConfig, order_hint: Option<ModOrder>) -> Result<PacketEvs> {
    let csi = packet_csi(packet, cfg)?;
    let rfo = estimate_rfo_or_hold(&packet.df_rx, &csi, cfg)?;
    let x_bar = equalize(&packet.df_rx, &csi, &rfo, cfg)?;
    let order = match order_hint {
        Some(o) => o,
        None => classify_modulation(&x_bar, cfg)?,
    };
    let x_hat = hard_decide(&x_bar, order, cfg)?;
    let raw = average_evs(&raw_evs(&x_bar, &x_hat)?)?;
    Ok(PacketEvs { csi, order, raw })
}

/// Full chain for one packet. CSI kinds stop after channel estimation;
/// EVS kinds feed the calibrator, which keeps per-label state.
pub fn extract_features(
    packet: &Packet,
    cfg: &OfdmConfig,
    pipeline: &PipelineConfig,
    calibrator: &mut Calibrator,
) -> Result<FeatureVector> {
    let values = if pipeline.kind.is_evs() {
        let evs = packet_raw_evs(packet, cfg, pipeline.order_hint)?;
        pipeline.kind.view(&calibrator.push(packet.label, evs.raw)?.eps)
    } else {
        pipeline.kind.view(&packet_csi(packet, cfg)?.h_hat)
    };
    Ok(FeatureVector {
        kind: pipeline.kind,
        label: packet.label,
        values,
    })
}

fn tag<T>(index: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Packet {
        index,
        source: Box::new(e),
    })
}

/// Per-packet output of the stateless part of the chain, in stream order.
#[derive(Clone, Debug)]
pub enum StreamStage {
    Csi(Vec<Complex64>),
    Evs(RawEvsVector),
}

/// Run the stateless part of the chain over a packet stream in parallel.
pub fn stream_stage(
    packets: &[Packet],
    cfg: &OfdmConfig,
    evs: bool,
    order_hint: Option<ModOrder>,
) -> Result<Vec<StreamStage>> {
    packets
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            tag(
                i,
                if evs {
                    packet_raw_evs(p, cfg, order_hint).map(|e| StreamStage::Evs(e.raw))
                } else {
                    packet_csi(p, cfg).map(|c| StreamStage::Csi(c.h_hat))
                },
            )
        })
        .collect()
}

/// Turn staged packets into features; calibration runs sequentially in
/// stream order.
pub fn finish_stream(
    stages: &[StreamStage],
    labels: &[u16],
    kind: FeatureKind,
    gamma: u32,
    window: usize,
) -> Result<Vec<FeatureVector>> {
    let mut cal = Calibrator::new(gamma, window)?;
    stages
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (stage, &label))| {
            let values = match (stage, kind.is_evs()) {
                (StreamStage::Evs(raw), true) => kind.view(&tag(i, cal.push(label, raw.clone()))?.eps),
                (StreamStage::Csi(h), false) => kind.view(h),
                _ => return Err(Error::InvalidConfig(format!("stage does not match kind {kind}"))),
            };
            Ok(FeatureVector { kind, label, values })
        })
        .collect()
}

/// Extract features for a whole packet stream; errors carry the packet index.
pub fn extract_stream(packets: &[Packet], cfg: &OfdmConfig, pipeline: &PipelineConfig) -> Result<Vec<FeatureVector>> {
    let stages = stream_stage(packets, cfg, pipeline.kind.is_evs(), pipeline.order_hint)?;
    let labels: Vec<u16> = packets.iter().map(|p| p.label).collect();
    finish_stream(&stages, &labels, pipeline.kind, pipeline.gamma, pipeline.window)
}
