//! Receiver chain: CSI from the LTF, common phase from the pilots, and
//! zero-forcing equalization of the data field.

use num_complex::Complex64;

use crate::error::{dim_mismatch, Error, Result};
use crate::ofdm::{phase, CMatrix, OfdmConfig};

/// Per-subcarrier channel estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiVector {
    pub h_hat: Vec<Complex64>,
}

impl CsiVector {
    pub fn amplitude(&self) -> Vec<f64> {
        self.h_hat.iter().map(|h| h.norm()).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.h_hat.iter().copied().map(phase).collect()
    }
}

/// One common phase estimate per DF symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct RfoEstimate {
    pub phi_hat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EqualizedSymbols {
    pub x_bar: CMatrix,
}

/// How the pilot accumulator is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PilotRule {
    /// `angle(sum y * conj(h) * p)`: phase of the DF pilots relative to
    /// the channel estimate, polarity removed.
    #[default]
    Conjugate,
    /// `angle(sum y * h)` as sometimes written in the literature. Doubles
    /// the channel phase and ignores pilot polarity; kept for comparison.
    Literal,
}

/// Sample-average channel estimate over the LTF symbols.
pub fn estimate_csi(ltf_rx: &CMatrix, ltf_ref: &CMatrix) -> Result<CsiVector> {
    if ltf_rx.dim() != ltf_ref.dim() {
        return Err(dim_mismatch("LTF reference", format!("{:?}", ltf_rx.dim()), format!("{:?}", ltf_ref.dim())));
    }
    let n_l = ltf_rx.ncols();
    if n_l == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let h_hat = ltf_rx
        .rows()
        .into_iter()
        .zip(ltf_ref.rows())
        .map(|(y, x)| y.iter().zip(x).map(|(y, x)| y * x).sum::<Complex64>() / n_l as f64)
        .collect();
    Ok(CsiVector { h_hat })
}

fn pilot_sum(
    df_rx: &CMatrix,
    csi: &CsiVector,
    pilot_rows: &[usize],
    pilot_ref: &[f64],
    n: usize,
    rule: PilotRule,
) -> Complex64 {
    pilot_rows
        .iter()
        .zip(pilot_ref)
        .map(|(&r, &p)| match rule {
            PilotRule::Conjugate => df_rx[[r, n]] * csi.h_hat[r].conj() * p,
            PilotRule::Literal => df_rx[[r, n]] * csi.h_hat[r],
        })
        .sum()
}

/// Per-symbol common phase from the pilot subcarriers.
///
/// The sign is chosen so that multiplying the ZF output by `exp(-j phi_hat)`
/// removes the phase the DF symbol picked up relative to the LTF.
pub fn estimate_rfo(df_rx: &CMatrix, csi: &CsiVector, cfg: &OfdmConfig) -> Result<RfoEstimate> {
    estimate_rfo_with(df_rx, csi, cfg, PilotRule::Conjugate)
}

pub fn estimate_rfo_with(
    df_rx: &CMatrix,
    csi: &CsiVector,
    cfg: &OfdmConfig,
    rule: PilotRule,
) -> Result<RfoEstimate> {
    let rows = check_df(df_rx, csi, cfg)?;
    (0..df_rx.ncols())
        .map(|n| {
            let acc = pilot_sum(df_rx, csi, &rows, &cfg.layout.pilot_ref, n, rule);
            if acc.norm() == 0.0 {
                Err(Error::DegeneratePilots { symbol: n })
            } else {
                // The pilots rotate by exp(-j delta), so this is -delta.
                Ok(phase(acc))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(|phi_hat| RfoEstimate { phi_hat })
}

/// Like [`estimate_rfo`] but a symbol with a zero pilot accumulator reuses
/// the previous symbol's estimate (zero for the first symbol).
pub fn estimate_rfo_or_hold(df_rx: &CMatrix, csi: &CsiVector, cfg: &OfdmConfig) -> Result<RfoEstimate> {
    let rows = check_df(df_rx, csi, cfg)?;
    let mut last = 0.0;
    let phi_hat = (0..df_rx.ncols())
        .map(|n| {
            let acc = pilot_sum(df_rx, csi, &rows, &cfg.layout.pilot_ref, n, PilotRule::Conjugate);
            if acc.norm() > 0.0 {
                last = phase(acc);
            }
            last
        })
        .collect();
    Ok(RfoEstimate { phi_hat })
}

fn check_df(df_rx: &CMatrix, csi: &CsiVector, cfg: &OfdmConfig) -> Result<Vec<usize>> {
    if df_rx.nrows() != csi.h_hat.len() || df_rx.nrows() != cfg.k() {
        return Err(dim_mismatch("DF rows", cfg.k(), df_rx.nrows()));
    }
    let rows = cfg.grid.pilot_rows();
    if rows.is_empty() {
        return Err(Error::InvalidConfig("no pilot subcarriers".into()));
    }
    Ok(rows)
}

/// Zero-forcing equalizer with per-symbol phase correction:
/// `x_bar[k, n] = exp(-j phi_hat[n]) * y[k, n] / h_hat[k]`.
pub fn equalize(df_rx: &CMatrix, csi: &CsiVector, rfo: &RfoEstimate, cfg: &OfdmConfig) -> Result<EqualizedSymbols> {
    if df_rx.nrows() != csi.h_hat.len() {
        return Err(dim_mismatch("CSI length", df_rx.nrows(), csi.h_hat.len()));
    }
    if df_rx.ncols() != rfo.phi_hat.len() {
        return Err(dim_mismatch("RFO length", df_rx.ncols(), rfo.phi_hat.len()));
    }
    let q = csi
        .h_hat
        .iter()
        .enumerate()
        .map(|(r, h)| {
            if h.norm() < 1e-12 {
                Err(Error::SingularEqualizer {
                    subcarrier: cfg.grid.occupied.get(r).copied().unwrap_or(r as i32),
                    magnitude: h.norm(),
                })
            } else {
                Ok(h.inv())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let derotate: Vec<Complex64> = rfo.phi_hat.iter().map(|&p| Complex64::from_polar(1.0, -p)).collect();
    let mut x_bar = df_rx.clone();
    for ((r, n), v) in x_bar.indexed_iter_mut() {
        *v *= q[r] * derotate[n];
    }
    Ok(EqualizedSymbols { x_bar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{apply_channel, build_profile, Channel, RfoModel, Scene};
    use crate::ofdm::{random_df_payload, ModOrder};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn cfg() -> OfdmConfig {
        OfdmConfig::default()
    }

    fn clean_scene() -> Scene {
        Scene {
            static_error_db: None,
            ..Scene::default()
        }
    }

    #[test]
    fn identity_channel_gives_unit_csi() {
        let cfg = cfg();
        let x = cfg.layout.ltf_matrix();
        let csi = estimate_csi(&x, &x).unwrap();
        assert!(csi.h_hat.iter().all(|h| *h == c(1.0, 0.0)));
    }

    #[test]
    fn constant_rfo_rotates_csi() {
        let cfg = cfg();
        let h = Complex64::from_polar(0.5, PI / 4.0);
        let x = random_df_payload(&cfg, ModOrder::Qpsk, 0);
        let p = apply_channel(&cfg, &Channel::flat(cfg.k(), h), &RfoModel::new(0.0, 0.1), &x, f64::INFINITY, 0, 0)
            .unwrap();
        let csi = estimate_csi(&p.ltf_rx, &cfg.layout.ltf_matrix()).unwrap();
        let want = Complex64::from_polar(0.5, PI / 4.0 - 0.1);
        assert!(csi.h_hat.iter().all(|h| (h - want).norm() < 1e-15));
    }

    #[test]
    fn csi_error_variance_scales_with_ltf_count() {
        // Monte-Carlo oracle: var(h_hat - h) = sigma^2 / N_L.
        let cfg = cfg();
        let ch = Channel::flat(cfg.k(), c(1.0, 0.0));
        let x = random_df_payload(&cfg, ModOrder::Bpsk, 0);
        let snr_db = 10.0;
        let sigma2 = 10f64.powf(-snr_db / 10.0);
        let (mut acc, mut count) = (0.0, 0usize);
        for seed in 0..250u64 {
            let p = apply_channel(&cfg, &ch, &RfoModel::new(0.0, 0.0), &x, snr_db, 0, seed).unwrap();
            let csi = estimate_csi(&p.ltf_rx, &cfg.layout.ltf_matrix()).unwrap();
            for h in &csi.h_hat {
                acc += (h - c(1.0, 0.0)).norm_sqr();
                count += 1;
            }
        }
        let var = acc / count as f64;
        let want = sigma2 / cfg.layout.n_ltf as f64;
        assert!((var / want - 1.0).abs() < 0.05, "var {var} vs {want}");
    }

    #[test]
    fn zero_rfo_gives_zero_phase() {
        let cfg = cfg();
        let s = clean_scene();
        let ch = Channel::from_profile(&build_profile(&s, &cfg, 4).unwrap(), &s, &cfg);
        let x = random_df_payload(&cfg, ModOrder::Qpsk, 1);
        let p = apply_channel(&cfg, &ch, &RfoModel::new(0.0, 0.0), &x, f64::INFINITY, 4, 0).unwrap();
        let csi = estimate_csi(&p.ltf_rx, &cfg.layout.ltf_matrix()).unwrap();
        let rfo = estimate_rfo(&p.df_rx, &csi, &cfg).unwrap();
        assert!(rfo.phi_hat.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_offset_is_reported_with_opposite_sign() {
        // DF symbols carry an extra common phase delta over the LTF: the
        // equalized pilots land back on pilot_ref only if phi_hat = -delta.
        let cfg = cfg();
        let s = clean_scene();
        let ch = Channel::from_profile(&build_profile(&s, &cfg, 9).unwrap(), &s, &cfg);
        let x = random_df_payload(&cfg, ModOrder::Qpsk, 1);
        let mut p = apply_channel(&cfg, &ch, &RfoModel::new(0.0, 0.3), &x, f64::INFINITY, 9, 0).unwrap();
        let delta = 0.7;
        p.df_rx.mapv_inplace(|v| v * Complex64::from_polar(1.0, -delta));
        let csi = estimate_csi(&p.ltf_rx, &cfg.layout.ltf_matrix()).unwrap();
        let rfo = estimate_rfo(&p.df_rx, &csi, &cfg).unwrap();
        assert!(rfo.phi_hat.iter().all(|v| (v + delta).abs() < 1e-12));
        let eq = equalize(&p.df_rx, &csi, &rfo, &cfg).unwrap();
        for (j, &r) in cfg.grid.pilot_rows().iter().enumerate() {
            for v in eq.x_bar.row(r) {
                assert!((v - cfg.layout.pilot_ref[j]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_cfo_gives_constant_phase_increments() {
        let cfg = cfg();
        let s = clean_scene();
        let ch = Channel::from_profile(&build_profile(&s, &cfg, 12).unwrap(), &s, &cfg);
        let x = random_df_payload(&cfg, ModOrder::Qam16, 1);
        let rfo_model = RfoModel::new(1_500.0, 2.0);
        let p = apply_channel(&cfg, &ch, &rfo_model, &x, f64::INFINITY, 12, 0).unwrap();
        let csi = estimate_csi(&p.ltf_rx, &cfg.layout.ltf_matrix()).unwrap();
        let rfo = estimate_rfo(&p.df_rx, &csi, &cfg).unwrap();
        let step = -2.0 * PI * 1_500.0 * 4e-6;
        for w in rfo.phi_hat.windows(2) {
            let d = (w[1] - w[0] - step).rem_euclid(2.0 * PI);
            assert!(d.min(2.0 * PI - d) < 1e-9);
        }
    }

    #[test]
    fn literal_rule_is_biased_by_channel_phase() {
        let cfg = cfg();
        let h = Complex64::from_polar(1.0, 0.4);
        let x = random_df_payload(&cfg, ModOrder::Qpsk, 0);
        let p = apply_channel(&cfg, &Channel::flat(cfg.k(), h), &RfoModel::new(0.0, 0.0), &x, f64::INFINITY, 0, 0)
            .unwrap();
        let csi = estimate_csi(&p.ltf_rx, &cfg.layout.ltf_matrix()).unwrap();
        let lit = estimate_rfo_with(&p.df_rx, &csi, &cfg, PilotRule::Literal).unwrap();
        // Pilot polarity {+1,+1,+1,-1} sums to 2 with the literal rule.
        assert!(lit.phi_hat.iter().all(|v| (v - 0.8).abs() < 1e-12));
    }

    #[test]
    fn zero_pilots_are_degenerate() {
        let cfg = cfg();
        let df = CMatrix::zeros((cfg.k(), cfg.layout.n_df));
        let csi = CsiVector { h_hat: vec![c(1.0, 0.0); cfg.k()] };
        assert!(matches!(estimate_rfo(&df, &csi, &cfg), Err(Error::DegeneratePilots { symbol: 0 })));
        let held = estimate_rfo_or_hold(&df, &csi, &cfg).unwrap();
        assert!(held.phi_hat.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_inverse() {
        let cfg = OfdmConfig::with_counts(1, 3);
        let x = random_df_payload(&cfg, ModOrder::Qpsk, 5);
        let y = x.mapv(|v| v * 2.0);
        let csi = CsiVector { h_hat: vec![c(2.0, 0.0); cfg.k()] };
        let rfo = RfoEstimate { phi_hat: vec![0.0; 3] };
        let eq = equalize(&y, &csi, &rfo, &cfg).unwrap();
        assert!(eq.x_bar.iter().zip(x.iter()).all(|(a, b)| (a - b).norm() < 1e-15));
    }

    #[test]
    fn zero_csi_entry_is_singular() {
        let cfg = cfg();
        let y = CMatrix::zeros((cfg.k(), 2));
        let mut h = vec![c(1.0, 0.0); cfg.k()];
        h[3] = c(0.0, 0.0);
        let rfo = RfoEstimate { phi_hat: vec![0.0; 2] };
        let err = equalize(&y, &CsiVector { h_hat: h }, &rfo, &cfg).unwrap_err();
        assert!(matches!(err, Error::SingularEqualizer { subcarrier: -23, .. }));
    }

    #[test]
    fn noise_free_round_trip_for_any_rfo() {
        let cfg = cfg();
        let s = clean_scene();
        for label in [0u16, 5, 13, 25] {
            let ch = Channel::from_profile(&build_profile(&s, &cfg, label).unwrap(), &s, &cfg);
            for (i, (cfo, phi0)) in [(0.0, 0.0), (2_500.0, 3.0), (-8_000.0, 6.2)].into_iter().enumerate() {
                let x = random_df_payload(&cfg, ModOrder::Qam64, i as u64);
                let p = apply_channel(&cfg, &ch, &RfoModel::new(cfo, phi0), &x, f64::INFINITY, label, 0).unwrap();
                let csi = estimate_csi(&p.ltf_rx, &cfg.layout.ltf_matrix()).unwrap();
                let rfo = estimate_rfo(&p.df_rx, &csi, &cfg).unwrap();
                let eq = equalize(&p.df_rx, &csi, &rfo, &cfg).unwrap();
                let err = eq.x_bar.iter().zip(x.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                assert!(err < 1e-9, "label {label}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn csi_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, s1 in 0u64..100, s2 in 0u64..100) {
            let cfg = cfg();
            let reference = cfg.layout.ltf_matrix();
            let ch = Channel::flat(cfg.k(), c(0.3, -0.2));
            let x = random_df_payload(&cfg, ModOrder::Bpsk, 0);
            let y1 = apply_channel(&cfg, &ch, &RfoModel::new(0.0, 0.4), &x, 5.0, 0, s1).unwrap().ltf_rx;
            let y2 = apply_channel(&cfg, &ch, &RfoModel::new(0.0, 1.4), &x, 5.0, 0, s2).unwrap().ltf_rx;
            let mix = &y1.mapv(|v| v * a) + &y2.mapv(|v| v * b);
            let lhs = estimate_csi(&mix, &reference).unwrap();
            let e1 = estimate_csi(&y1, &reference).unwrap();
            let e2 = estimate_csi(&y2, &reference).unwrap();
            for k in 0..cfg.k() {
                prop_assert!((lhs.h_hat[k] - (e1.h_hat[k] * a + e2.h_hat[k] * b)).norm() < 1e-12);
            }
        }

        #[test]
        fn positive_scaling_keeps_phase(scale in 0.01f64..100.0, seed in 0u64..50) {
            let cfg = cfg();
            let s = clean_scene();
            let ch = Channel::from_profile(&build_profile(&s, &cfg, 2).unwrap(), &s, &cfg);
            let x = random_df_payload(&cfg, ModOrder::Qpsk, seed);
            let p = apply_channel(&cfg, &ch, &RfoModel::new(900.0, 1.0), &x, 15.0, 2, seed).unwrap();
            let csi = estimate_csi(&p.ltf_rx, &cfg.layout.ltf_matrix()).unwrap();
            let a = estimate_rfo(&p.df_rx, &csi, &cfg).unwrap();
            let b = estimate_rfo(&p.df_rx.mapv(|v| v * scale), &csi, &cfg).unwrap();
            for (u, v) in a.phi_hat.iter().zip(&b.phi_hat) {
                let d = (u - v).rem_euclid(2.0 * PI);
                prop_assert!(d.min(2.0 * PI - d) < 1e-12);
            }
        }
    }
}
