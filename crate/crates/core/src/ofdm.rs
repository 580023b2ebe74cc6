//! Subcarrier grid, constellations, frame layout and the frequency-domain
//! packet representation shared by the simulator and the receiver chain.
//!
//! Everything here lives after the FFT: a packet is a `K x N` grid of
//! complex symbols, one row per occupied subcarrier. Null and DC bins are
//! never materialized.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};

/// Complex matrix with one row per occupied subcarrier and one column per
/// OFDM symbol.
pub type CMatrix = Array2<Complex64>;

/// 802.11a long training sequence on logical subcarriers -26..=26, DC included.
const LTF_80211A: [i8; 53] = [
    1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 0, 1, -1,
    -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1, 1, 1, 1,
];

/// Logical layout of the used subcarriers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubcarrierGrid {
    pub total_bins: usize,
    /// Logical indices of the K used subcarriers, strictly increasing, no DC.
    pub occupied: Vec<i32>,
    pub pilots: Vec<i32>,
    pub center_freq_hz: f64,
    pub subcarrier_spacing_hz: f64,
}

impl Default for SubcarrierGrid {
    fn default() -> Self {
        SubcarrierGrid {
            total_bins: 64,
            occupied: (-26..=26).filter(|&i| i != 0).collect(),
            pilots: vec![-21, -7, 7, 21],
            center_freq_hz: 5.22e9,
            subcarrier_spacing_hz: 312_500.0,
        }
    }
}

impl SubcarrierGrid {
    pub fn validate(&self) -> Result<()> {
        if self.occupied.is_empty() {
            return Err(Error::InvalidConfig("no occupied subcarriers".into()));
        }
        if self.occupied.contains(&0) {
            return Err(Error::InvalidConfig("DC subcarrier 0 cannot be occupied".into()));
        }
        if self.occupied.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "occupied subcarriers must be strictly increasing".into(),
            ));
        }
        let half = (self.total_bins / 2) as i32;
        if self.occupied.iter().any(|&i| i < -half || i >= half) {
            return Err(Error::InvalidConfig(format!(
                "occupied subcarriers must lie in [-{half}, {half})"
            )));
        }
        if let Some(p) = self.pilots.iter().find(|p| !self.occupied.contains(p)) {
            return Err(Error::InvalidConfig(format!(
                "pilot {p} is not an occupied subcarrier"
            )));
        }
        if self.pilots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("pilots must be strictly increasing".into()));
        }
        if !(self.center_freq_hz > 0.0 && self.subcarrier_spacing_hz > 0.0) {
            return Err(Error::InvalidConfig(
                "carrier and subcarrier spacing must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of used subcarriers K.
    pub fn k(&self) -> usize {
        self.occupied.len()
    }

    /// Row positions (0-based into `occupied`) of the pilot subcarriers.
    pub fn pilot_rows(&self) -> Vec<usize> {
        self.occupied
            .iter()
            .enumerate()
            .filter(|(_, i)| self.pilots.contains(i))
            .map(|(r, _)| r)
            .collect()
    }

    /// Row positions of the data subcarriers.
    pub fn data_rows(&self) -> Vec<usize> {
        self.occupied
            .iter()
            .enumerate()
            .filter(|(_, i)| !self.pilots.contains(i))
            .map(|(r, _)| r)
            .collect()
    }

    pub fn data_indices(&self) -> Vec<i32> {
        self.occupied
            .iter()
            .copied()
            .filter(|i| !self.pilots.contains(i))
            .collect()
    }

    pub fn is_pilot_row(&self, row: usize) -> bool {
        self.pilots.contains(&self.occupied[row])
    }

    /// RF frequency of each occupied subcarrier.
    pub fn frequencies(&self) -> Vec<f64> {
        self.occupied
            .iter()
            .map(|&i| self.center_freq_hz + f64::from(i) * self.subcarrier_spacing_hz)
            .collect()
    }
}

/// Supported modulation orders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum ModOrder {
    Bpsk,
    Qpsk,
    Qam16,
    Qam64,
}

impl ModOrder {
    pub const ALL: [ModOrder; 4] = [ModOrder::Bpsk, ModOrder::Qpsk, ModOrder::Qam16, ModOrder::Qam64];

    pub fn size(self) -> usize {
        match self {
            ModOrder::Bpsk => 2,
            ModOrder::Qpsk => 4,
            ModOrder::Qam16 => 16,
            ModOrder::Qam64 => 64,
        }
    }
}

impl TryFrom<u32> for ModOrder {
    type Error = Error;

    fn try_from(m: u32) -> Result<Self> {
        match m {
            2 => Ok(ModOrder::Bpsk),
            4 => Ok(ModOrder::Qpsk),
            16 => Ok(ModOrder::Qam16),
            64 => Ok(ModOrder::Qam64),
            other => Err(Error::UnsupportedOrder(other)),
        }
    }
}

impl From<ModOrder> for u32 {
    fn from(m: ModOrder) -> u32 {
        m.size() as u32
    }
}

impl std::fmt::Display for ModOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.size())
    }
}

impl std::str::FromStr for ModOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m: u32 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("not a modulation order: {s:?}")))?;
        ModOrder::try_from(m)
    }
}

/// Unit-average-energy, Gray-mapped point set.
///
/// Point `i` of a square QAM splits its index into in-phase bits (high
/// half) and quadrature bits (low half); each half is a Gray code of the
/// level position along that axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    order: ModOrder,
    points: Vec<Complex64>,
}

fn gray_to_binary(mut g: usize) -> usize {
    let mut b = 0;
    while g != 0 {
        b ^= g;
        g >>= 1;
    }
    b
}

impl Constellation {
    pub fn new(order: ModOrder) -> Self {
        let points = match order {
            ModOrder::Bpsk => vec![Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)],
            _ => {
                let m = order.size();
                let levels = (m as f64).sqrt().round() as usize;
                let bits = levels.trailing_zeros();
                let scale = (3.0 / (2.0 * (m as f64 - 1.0))).sqrt();
                let amp = |g: usize| (2.0 * gray_to_binary(g) as f64 - (levels as f64 - 1.0)) * scale;
                (0..m)
                    .map(|i| Complex64::new(amp(i >> bits), amp(i & (levels - 1))))
                    .collect()
            }
        };
        Constellation { order, points }
    }

    pub fn order(&self) -> ModOrder {
        self.order
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    /// Index of the nearest point; ties go to the smaller index.
    pub fn nearest(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }
}

/// Canonical constellation for a raw modulation order.
pub fn constellation(order: u32) -> Result<Constellation> {
    Ok(Constellation::new(ModOrder::try_from(order)?))
}

/// Preamble/payload symbol counts and the known training values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub n_ltf: usize,
    pub n_df: usize,
    /// Known LTF value per occupied subcarrier, identical in every LTF symbol.
    pub ltf_ref: Vec<f64>,
    /// Known pilot value per pilot subcarrier, identical in every DF symbol.
    pub pilot_ref: Vec<f64>,
}

impl FrameLayout {
    /// 802.11a-style layout for `grid`: LTF values from the legacy long
    /// training sequence, pilot polarity {+1, +1, +1, -1}.
    pub fn for_grid(grid: &SubcarrierGrid) -> Self {
        let ltf_ref = grid
            .occupied
            .iter()
            .map(|&i| {
                let pos = i + 26;
                if (0..53).contains(&pos) && LTF_80211A[pos as usize] != 0 {
                    f64::from(LTF_80211A[pos as usize])
                } else {
                    1.0
                }
            })
            .collect();
        let n = grid.pilots.len();
        let pilot_ref = (0..n)
            .map(|i| if n == 4 && i == 3 { -1.0 } else { 1.0 })
            .collect();
        FrameLayout {
            n_ltf: 2,
            n_df: 50,
            ltf_ref,
            pilot_ref,
        }
    }

    pub fn validate(&self, grid: &SubcarrierGrid) -> Result<()> {
        if self.n_ltf == 0 || self.n_df == 0 {
            return Err(Error::InvalidConfig("n_ltf and n_df must be at least 1".into()));
        }
        if self.ltf_ref.len() != grid.k() {
            return Err(dim_mismatch("ltf_ref", grid.k(), self.ltf_ref.len()));
        }
        if self.pilot_ref.len() != grid.pilots.len() {
            return Err(dim_mismatch("pilot_ref", grid.pilots.len(), self.pilot_ref.len()));
        }
        if self
            .ltf_ref
            .iter()
            .chain(&self.pilot_ref)
            .any(|&v| v != 1.0 && v != -1.0)
        {
            return Err(Error::InvalidConfig("training values must be +1 or -1".into()));
        }
        Ok(())
    }

    /// The transmitted LTF block as a `K x N_L` matrix.
    pub fn ltf_matrix(&self) -> CMatrix {
        Array2::from_shape_fn((self.ltf_ref.len(), self.n_ltf), |(k, _)| {
            Complex64::new(self.ltf_ref[k], 0.0)
        })
    }
}

/// Grid plus layout; the static description every packet is interpreted against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfdmConfig {
    pub grid: SubcarrierGrid,
    pub layout: FrameLayout,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        let grid = SubcarrierGrid::default();
        let layout = FrameLayout::for_grid(&grid);
        OfdmConfig { grid, layout }
    }
}

impl OfdmConfig {
    pub fn with_counts(n_ltf: usize, n_df: usize) -> Self {
        let mut cfg = OfdmConfig::default();
        cfg.layout.n_ltf = n_ltf;
        cfg.layout.n_df = n_df;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.layout.validate(&self.grid)
    }

    pub fn k(&self) -> usize {
        self.grid.k()
    }
}

/// Simulator ground truth attached to generated packets.
#[derive(Clone, Debug, PartialEq)]
pub struct PacketMeta {
    pub true_csi: Vec<Complex64>,
    /// Common phase of every symbol, LTF symbols first.
    pub rfo_trajectory: Vec<f64>,
    /// Transmitted DF block; not stored in capture files.
    pub tx_df: Option<CMatrix>,
    /// `f64::INFINITY` for noise-free packets.
    pub snr_db: f64,
}

/// One received frame after symbol detection.
#[derive(Clone, Debug, PartialEq)]
pub struct Packet {
    pub label: u16,
    pub ltf_rx: CMatrix,
    pub df_rx: CMatrix,
    pub meta: Option<PacketMeta>,
}

impl Packet {
    pub fn check(&self, cfg: &OfdmConfig) -> Result<()> {
        let k = cfg.k();
        let want_l = (k, cfg.layout.n_ltf);
        let want_d = (k, cfg.layout.n_df);
        if self.ltf_rx.dim() != want_l {
            return Err(dim_mismatch("LTF block", format!("{want_l:?}"), format!("{:?}", self.ltf_rx.dim())));
        }
        if self.df_rx.dim() != want_d {
            return Err(dim_mismatch("DF block", format!("{want_d:?}"), format!("{:?}", self.df_rx.dim())));
        }
        if let Some(meta) = &self.meta {
            if meta.true_csi.len() != k {
                return Err(dim_mismatch("true CSI", k, meta.true_csi.len()));
            }
            let n = cfg.layout.n_ltf + cfg.layout.n_df;
            if meta.rfo_trajectory.len() != n {
                return Err(dim_mismatch("RFO trajectory", n, meta.rfo_trajectory.len()));
            }
        }
        Ok(())
    }
}

/// Transmit DF block: pilots carry `pilot_ref`, data cells are uniform
/// draws from the constellation.
pub fn random_df_payload(cfg: &OfdmConfig, order: ModOrder, seed: u64) -> CMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_df_payload_with(cfg, order, &mut rng)
}

pub fn random_df_payload_with<R: Rng>(cfg: &OfdmConfig, order: ModOrder, rng: &mut R) -> CMatrix {
    let points = Constellation::new(order);
    let pts = points.points();
    let pilot_value: Vec<Option<f64>> = cfg
        .grid
        .occupied
        .iter()
        .map(|i| {
            cfg.grid
                .pilots
                .iter()
                .position(|p| p == i)
                .map(|j| cfg.layout.pilot_ref[j])
        })
        .collect();
    let mut out = CMatrix::zeros((cfg.k(), cfg.layout.n_df));
    // Column-major draw order so a payload is a sequence of whole symbols.
    for n in 0..cfg.layout.n_df {
        for (k, pv) in pilot_value.iter().enumerate() {
            out[[k, n]] = match pv {
                Some(v) => Complex64::new(*v, 0.0),
                None => pts[rng.random_range(0..pts.len())],
            };
        }
    }
    out
}

/// Angle of `z` in (-pi, pi].
pub fn phase(z: Complex64) -> f64 {
    let a = z.arg();
    if a <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_grid_matches_legacy_layout() {
        let g = SubcarrierGrid::default();
        g.validate().unwrap();
        assert_eq!(g.k(), 52);
        assert_eq!(g.data_rows().len(), 48);
        assert_eq!(g.pilot_rows(), vec![5, 19, 32, 46]);
        let f = g.frequencies();
        assert!(f.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(f[0], 5.22e9 - 26.0 * 312_500.0);
    }

    #[test]
    fn pilot_and_data_partition_occupied() {
        let g = SubcarrierGrid::default();
        let mut all: Vec<i32> = g.pilots.iter().copied().chain(g.data_indices()).collect();
        all.sort();
        assert_eq!(all, g.occupied);
        assert!(g.pilots.iter().all(|p| !g.data_indices().contains(p)));
    }

    #[test]
    fn grid_rejects_dc_and_unsorted() {
        let mut g = SubcarrierGrid::default();
        g.occupied.push(0);
        assert!(g.validate().is_err());
        let mut g = SubcarrierGrid::default();
        g.occupied.swap(0, 1);
        assert!(g.validate().is_err());
        let mut g = SubcarrierGrid::default();
        g.pilots = vec![0];
        assert!(g.validate().is_err());
    }

    #[test]
    fn bpsk_and_qpsk_points() {
        let b = constellation(2).unwrap();
        assert_eq!(b.points(), &[Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)]);
        let q = constellation(4).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for p in q.points() {
            assert!((p.re.abs() - s).abs() < 1e-15 && (p.im.abs() - s).abs() < 1e-15);
        }
    }

    #[test]
    fn qam16_energy_by_enumeration() {
        // (1/16) * sum over {+-1, +-3}^2 of |p|^2 = 10, scaled by 1/10.
        let grid: f64 = [-3.0f64, -1.0, 1.0, 3.0]
            .iter()
            .flat_map(|a| [-3.0f64, -1.0, 1.0, 3.0].map(|b| a * a + b * b))
            .sum::<f64>()
            / 16.0;
        assert_eq!(grid, 10.0);
        let c = constellation(16).unwrap();
        assert!((c.mean_energy() - 1.0).abs() < 1e-12);
        let s = 10f64.sqrt();
        for p in c.points() {
            let (i, q) = (p.re * s, p.im * s);
            assert!([-3.0, -1.0, 1.0, 3.0].iter().any(|v| (v - i).abs() < 1e-12));
            assert!([-3.0, -1.0, 1.0, 3.0].iter().any(|v| (v - q).abs() < 1e-12));
        }
    }

    #[test]
    fn unsupported_order_is_rejected() {
        assert!(matches!(constellation(8), Err(Error::UnsupportedOrder(8))));
        assert!("3".parse::<ModOrder>().is_err());
    }

    #[test]
    fn gray_neighbours_differ_in_one_bit() {
        for order in [ModOrder::Qam16, ModOrder::Qam64] {
            let c = Constellation::new(order);
            let step = 2.0 * (3.0 / (2.0 * (order.size() as f64 - 1.0))).sqrt();
            for (i, a) in c.points().iter().enumerate() {
                for (j, b) in c.points().iter().enumerate() {
                    if ((a - b).norm() - step).abs() < 1e-9 {
                        assert_eq!((i ^ j).count_ones(), 1, "{order}: {i} vs {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn payload_contract() {
        let cfg = OfdmConfig::default();
        let x = random_df_payload(&cfg, ModOrder::Bpsk, 7);
        assert!(x.iter().all(|z| z.im == 0.0 && z.re.abs() == 1.0));
        for (j, &r) in cfg.grid.pilot_rows().iter().enumerate() {
            assert!(x.row(r).iter().all(|z| *z == Complex64::new(cfg.layout.pilot_ref[j], 0.0)));
        }
        assert_eq!(x, random_df_payload(&cfg, ModOrder::Bpsk, 7));
        assert_ne!(x, random_df_payload(&cfg, ModOrder::Bpsk, 8));

        let c = Constellation::new(ModOrder::Qam64);
        let x = random_df_payload(&cfg, ModOrder::Qam64, 3);
        for r in cfg.grid.data_rows() {
            assert!(x.row(r).iter().all(|z| c.points().contains(z)));
        }
    }

    #[test]
    fn layout_serialization_round_trip() {
        let cfg = OfdmConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: OfdmConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn phase_range_excludes_minus_pi() {
        assert_eq!(phase(Complex64::new(-1.0, -0.0)), std::f64::consts::PI);
        assert_eq!(phase(Complex64::new(-1.0, 0.0)), std::f64::consts::PI);
    }

    proptest! {
        #[test]
        fn constellations_are_normalized_and_distinct(idx in 0usize..4) {
            let c = Constellation::new(ModOrder::ALL[idx]);
            prop_assert!((c.mean_energy() - 1.0).abs() < 1e-12);
            let pts = c.points();
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    prop_assert!((pts[i] - pts[j]).norm() > 0.0);
                }
            }
        }

        #[test]
        fn nearest_is_exhaustive_minimum(re in -2.0f64..2.0, im in -2.0f64..2.0, idx in 0usize..4) {
            let c = Constellation::new(ModOrder::ALL[idx]);
            let z = Complex64::new(re, im);
            let i = c.nearest(z);
            let d = (z - c.points()[i]).norm_sqr();
            prop_assert!(c.points().iter().all(|p| (z - p).norm_sqr() >= d));
        }
    }
}
