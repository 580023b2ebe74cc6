//! Indoor multipath channel simulator.
//!
//! A [`Scene`] is a rectangular room with a transmitter, a receiver, a 5x5
//! grid of person spots and a set of mirror walls. For every location label
//! the simulator builds a geometric multipath profile (line of sight, one
//! first-order reflection per wall and, when somebody is in the room, one
//! scatter path off the person), turns it into a per-subcarrier response
//!
//! ```text
//! h_k = sum_m alpha_m * exp(-j 2 pi d_m / lambda_k)
//! ```
//!
//! and pushes transmit frames through it together with a per-symbol common
//! phase rotation and additive noise.

use std::f64::consts::PI;
use std::path::Path as FsPath;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::ofdm::{random_df_payload_with, CMatrix, ModOrder, OfdmConfig, Packet, PacketMeta};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Label of the empty room; labels 1..=25 are the person spots.
pub const EMPTY_ROOM: u16 = 0;
pub const SPOTS_PER_SIDE: usize = 5;
pub const NUM_LABELS: usize = SPOTS_PER_SIDE * SPOTS_PER_SIDE + 1;

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: Point,
    pub b: Point,
    /// Amplitude factor applied on reflection.
    pub reflection_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    /// Width (x) and depth (y) in meters.
    pub room: [f64; 2],
    pub tx_pos: Point,
    pub rx_pos: Point,
    /// Position of spot 1; spots run row-major along +x then +y.
    pub spot_origin: Point,
    pub spot_spacing_m: f64,
    pub wall_reflectors: Vec<Wall>,
    pub person_scatter_loss: f64,
    pub blocking_radius_m: f64,
    pub blocking_extra_loss_db: f64,
    /// Level of the static additive error term relative to the line-of-sight
    /// amplitude; `None` disables it.
    #[serde(default)]
    pub static_error_db: Option<f64>,
    #[serde(default)]
    pub static_error_seed: u64,
    #[serde(default = "default_max_paths")]
    pub max_paths: usize,
}

fn default_max_paths() -> usize {
    6
}

impl Default for Scene {
    fn default() -> Self {
        let (w, d) = (6.0, 5.0);
        Scene {
            room: [w, d],
            tx_pos: [0.4, 0.7],
            rx_pos: [5.5, 4.3],
            spot_origin: [1.5, 1.0],
            spot_spacing_m: 0.75,
            wall_reflectors: rectangle_walls(w, d, 0.5),
            person_scatter_loss: 0.6,
            blocking_radius_m: 0.25,
            blocking_extra_loss_db: 6.0,
            static_error_db: Some(-14.0),
            static_error_seed: 0x5eed,
            max_paths: default_max_paths(),
        }
    }
}

/// The four walls of a `width x depth` room with its corner at the origin.
pub fn rectangle_walls(width: f64, depth: f64, reflection_loss: f64) -> Vec<Wall> {
    let c = [[0.0, 0.0], [width, 0.0], [width, depth], [0.0, depth]];
    (0..4)
        .map(|i| Wall {
            a: c[i],
            b: c[(i + 1) % 4],
            reflection_loss,
        })
        .collect()
}

impl Scene {
    pub fn from_toml(text: &str) -> Result<Self> {
        let scene: Scene =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("scene: {e}")))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        Scene::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn spots(&self) -> Vec<Point> {
        (0..SPOTS_PER_SIDE * SPOTS_PER_SIDE)
            .map(|i| {
                let (row, col) = (i / SPOTS_PER_SIDE, i % SPOTS_PER_SIDE);
                [
                    self.spot_origin[0] + col as f64 * self.spot_spacing_m,
                    self.spot_origin[1] + row as f64 * self.spot_spacing_m,
                ]
            })
            .collect()
    }

    /// Person position for `label`, `None` for the empty room.
    pub fn person_at(&self, label: u16) -> Result<Option<Point>> {
        match label {
            EMPTY_ROOM => Ok(None),
            l if (l as usize) < NUM_LABELS => Ok(Some(self.spots()[l as usize - 1])),
            l => Err(Error::LocationOutOfRange(l)),
        }
    }

    fn inside(&self, p: Point) -> bool {
        (0.0..=self.room[0]).contains(&p[0]) && (0.0..=self.room[1]).contains(&p[1])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.room[0] > 0.0 && self.room[1] > 0.0) {
            return Err(Error::InvalidConfig("room dimensions must be positive".into()));
        }
        if !self.inside(self.tx_pos) || !self.inside(self.rx_pos) {
            return Err(Error::InvalidConfig("transmitter and receiver must be inside the room".into()));
        }
        if self.spots().iter().any(|&s| !self.inside(s)) {
            return Err(Error::InvalidConfig("spot grid leaves the room".into()));
        }
        if self.spot_spacing_m <= 0.0 || self.blocking_radius_m < 0.0 {
            return Err(Error::InvalidConfig("spacing and blocking radius must be non-negative".into()));
        }
        if self.max_paths < 1 || self.max_paths < 1 + self.wall_reflectors.len() + 1 {
            return Err(Error::InvalidConfig(format!(
                "max_paths {} cannot hold line of sight, {} reflections and the person",
                self.max_paths,
                self.wall_reflectors.len()
            )));
        }
        Ok(())
    }

    /// Static per-subcarrier error term, identical for every location.
    pub fn static_error(&self, cfg: &OfdmConfig) -> Vec<Complex64> {
        let k = cfg.k();
        match self.static_error_db {
            None => vec![Complex64::new(0.0, 0.0); k],
            Some(db) => {
                let los = dist(self.tx_pos, self.rx_pos);
                let amp = 10f64.powf(db / 20.0) / los;
                let mut rng = ChaCha8Rng::seed_from_u64(self.static_error_seed);
                (0..k)
                    .map(|_| Complex64::from_polar(amp, rng.random_range(-PI..PI)))
                    .collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    LineOfSight,
    Reflection,
    Scatter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationPath {
    pub kind: PathKind,
    pub length_m: f64,
    pub gain: Complex64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultipathProfile {
    pub paths: Vec<PropagationPath>,
}

impl MultipathProfile {
    /// Per-subcarrier frequency response.
    pub fn response(&self, cfg: &OfdmConfig) -> Vec<Complex64> {
        cfg.grid
            .frequencies()
            .iter()
            .map(|&f| {
                let lambda = SPEED_OF_LIGHT / f;
                self.paths
                    .iter()
                    .map(|p| p.gain * Complex64::from_polar(1.0, -2.0 * PI * p.length_m / lambda))
                    .sum()
            })
            .collect()
    }

    pub fn scatter_length(&self) -> Option<f64> {
        self.paths
            .iter()
            .find(|p| p.kind == PathKind::Scatter)
            .map(|p| p.length_m)
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Mirror image of `p` across the infinite line through the wall.
fn mirror(p: Point, w: &Wall) -> Point {
    let (dx, dy) = (w.b[0] - w.a[0], w.b[1] - w.a[1]);
    let len2 = dx * dx + dy * dy;
    let t = ((p[0] - w.a[0]) * dx + (p[1] - w.a[1]) * dy) / len2;
    let foot = [w.a[0] + t * dx, w.a[1] + t * dy];
    [2.0 * foot[0] - p[0], 2.0 * foot[1] - p[1]]
}

/// Intersection of segment `p -> q` with the wall segment, if any.
fn hit_wall(p: Point, q: Point, w: &Wall) -> Option<Point> {
    let r = [q[0] - p[0], q[1] - p[1]];
    let s = [w.b[0] - w.a[0], w.b[1] - w.a[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() < 1e-15 {
        return None;
    }
    let ap = [w.a[0] - p[0], w.a[1] - p[1]];
    let t = (ap[0] * s[1] - ap[1] * s[0]) / denom;
    let u = (ap[0] * r[1] - ap[1] * r[0]) / denom;
    ((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)).then(|| [p[0] + t * r[0], p[1] + t * r[1]])
}

fn geometric_profile(scene: &Scene, tx: Point, person: Option<Point>) -> MultipathProfile {
    let rx = scene.rx_pos;
    let block = 10f64.powf(-scene.blocking_extra_loss_db / 20.0);
    let blocked = |legs: &[(Point, Point)]| match person {
        Some(p) => legs
            .iter()
            .any(|&(a, b)| point_segment_distance(p, a, b) < scene.blocking_radius_m),
        None => false,
    };
    let mut paths = Vec::with_capacity(scene.max_paths);
    let mut push = |kind, length: f64, loss: f64, legs: &[(Point, Point)]| {
        let loss = if blocked(legs) { loss * block } else { loss };
        paths.push(PropagationPath {
            kind,
            length_m: length,
            gain: Complex64::new(loss / length, 0.0),
        });
    };

    push(PathKind::LineOfSight, dist(tx, rx), 1.0, &[(tx, rx)]);
    for wall in &scene.wall_reflectors {
        let image = mirror(tx, wall);
        if let Some(hit) = hit_wall(image, rx, wall) {
            push(
                PathKind::Reflection,
                dist(image, rx),
                wall.reflection_loss,
                &[(tx, hit), (hit, rx)],
            );
        }
    }
    if let Some(p) = person {
        let length = dist(tx, p) + dist(p, rx);
        paths.push(PropagationPath {
            kind: PathKind::Scatter,
            length_m: length,
            gain: Complex64::new(scene.person_scatter_loss / length, 0.0),
        });
    }
    MultipathProfile { paths }
}

fn is_degenerate(h: &[Complex64]) -> bool {
    let max = h.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let min = h.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    !(min >= 1e-6 * max) || max == 0.0
}

/// Multipath profile with a person standing at an arbitrary point.
///
/// Profiles whose response nearly cancels on some subcarrier are rebuilt
/// with the person (or, in an empty room, the transmitter) nudged by 1 cm.
pub fn build_profile_at(scene: &Scene, cfg: &OfdmConfig, person: Option<Point>) -> Result<MultipathProfile> {
    const NUDGES: [Point; 9] = [
        [0.0, 0.0],
        [0.01, 0.0],
        [0.0, 0.01],
        [-0.01, 0.0],
        [0.0, -0.01],
        [0.01, 0.01],
        [-0.01, 0.01],
        [0.01, -0.01],
        [-0.01, -0.01],
    ];
    for n in NUDGES {
        let shift = |p: Point| [p[0] + n[0], p[1] + n[1]];
        let (tx, person) = match person {
            Some(p) => (scene.tx_pos, Some(shift(p))),
            None => (shift(scene.tx_pos), None),
        };
        let profile = geometric_profile(scene, tx, person);
        if !is_degenerate(&profile.response(cfg)) {
            return Ok(profile);
        }
    }
    Err(Error::InvalidConfig(
        "multipath profile cancels on a subcarrier even after perturbation".into(),
    ))
}

pub fn build_profile(scene: &Scene, cfg: &OfdmConfig, label: u16) -> Result<MultipathProfile> {
    build_profile_at(scene, cfg, scene.person_at(label)?)
}

/// Constant carrier offset seen as a per-symbol common phase ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfoModel {
    pub cfo_hz: f64,
    pub symbol_duration_s: f64,
    pub initial_phase: f64,
}

impl RfoModel {
    pub fn new(cfo_hz: f64, initial_phase: f64) -> Self {
        RfoModel {
            cfo_hz,
            symbol_duration_s: 4e-6,
            initial_phase,
        }
    }

    /// Common phase of every symbol, LTF first.
    ///
    /// The LTF symbols are treated as a single training interval at the
    /// packet phase; DF symbol `n` (1-based) sits `n` symbol periods later.
    pub fn trajectory(&self, n_ltf: usize, n_df: usize) -> Vec<f64> {
        let step = 2.0 * PI * self.cfo_hz * self.symbol_duration_s;
        std::iter::repeat_n(self.initial_phase, n_ltf)
            .chain((1..=n_df).map(|n| self.initial_phase + step * n as f64))
            .collect()
    }
}

/// Realized per-location channel: frequency response plus the static
/// additive error term.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub response: Vec<Complex64>,
    pub static_error: Vec<Complex64>,
}

impl Channel {
    pub fn flat(k: usize, h: Complex64) -> Self {
        Channel {
            response: vec![h; k],
            static_error: vec![Complex64::new(0.0, 0.0); k],
        }
    }

    pub fn from_profile(profile: &MultipathProfile, scene: &Scene, cfg: &OfdmConfig) -> Self {
        Channel {
            response: profile.response(cfg),
            static_error: scene.static_error(cfg),
        }
    }
}

/// Pass a transmit frame through the channel.
///
/// `y = exp(-j phi_n) * (h_k x + b_k + w)` where `b_k` is the static error
/// term and `w` is circular Gaussian noise scaled so that the mean received
/// signal power over the frame is `snr_db` above the noise power.
/// `snr_db = +inf` disables `w`.
pub fn apply_channel(
    cfg: &OfdmConfig,
    channel: &Channel,
    rfo: &RfoModel,
    tx_df: &CMatrix,
    snr_db: f64,
    label: u16,
    seed: u64,
) -> Result<Packet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_channel_with(cfg, channel, rfo, tx_df, snr_db, label, &mut rng)
}

pub fn apply_channel_with<R: Rng>(
    cfg: &OfdmConfig,
    channel: &Channel,
    rfo: &RfoModel,
    tx_df: &CMatrix,
    snr_db: f64,
    label: u16,
    rng: &mut R,
) -> Result<Packet> {
    let k = cfg.k();
    let (n_l, n_d) = (cfg.layout.n_ltf, cfg.layout.n_df);
    if tx_df.dim() != (k, n_d) {
        return Err(dim_mismatch("transmit DF", format!("{:?}", (k, n_d)), format!("{:?}", tx_df.dim())));
    }
    if channel.response.len() != k || channel.static_error.len() != k {
        return Err(dim_mismatch("channel", k, channel.response.len()));
    }
    let h = &channel.response;
    let tx_ltf = cfg.layout.ltf_matrix();
    let trajectory = rfo.trajectory(n_l, n_d);

    let signal_power = (tx_ltf.indexed_iter().map(|((r, _), x)| (h[r] * x).norm_sqr()).sum::<f64>()
        + tx_df.indexed_iter().map(|((r, _), x)| (h[r] * x).norm_sqr()).sum::<f64>())
        / (k * (n_l + n_d)) as f64;
    let noise_std = if snr_db.is_infinite() && snr_db > 0.0 {
        0.0
    } else {
        (signal_power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt()
    };

    let mut receive = |x: &CMatrix, phases: &[f64]| {
        let mut y = CMatrix::zeros(x.dim());
        for (n, &phi) in phases.iter().enumerate() {
            let rot = Complex64::from_polar(1.0, -phi);
            for r in 0..k {
                let w = if noise_std > 0.0 {
                    let re: f64 = StandardNormal.sample(rng);
                    let im: f64 = StandardNormal.sample(rng);
                    Complex64::new(re, im) * noise_std
                } else {
                    Complex64::new(0.0, 0.0)
                };
                y[[r, n]] = rot * (h[r] * x[[r, n]] + channel.static_error[r] + w);
            }
        }
        y
    };
    let ltf_rx = receive(&tx_ltf, &trajectory[..n_l]);
    let df_rx = receive(tx_df, &trajectory[n_l..]);

    Ok(Packet {
        label,
        ltf_rx,
        df_rx,
        meta: Some(PacketMeta {
            true_csi: h.clone(),
            rfo_trajectory: trajectory,
            tx_df: Some(tx_df.clone()),
            snr_db,
        }),
    })
}

/// Which half of a dataset a packet stream belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub train_per_label: usize,
    pub test_per_label: usize,
    pub snr_db: f64,
    pub cfo_hz: f64,
    pub order: ModOrder,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train_per_label: 400,
            test_per_label: 100,
            snr_db: 20.0,
            cfo_hz: 2_000.0,
            order: ModOrder::Qpsk,
            seed: 1,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-packet RNG seed derived from (seed, split, label, index).
pub fn packet_seed(seed: u64, split: Split, label: u16, index: usize) -> u64 {
    let s = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    [s, u64::from(label), index as u64]
        .iter()
        .fold(splitmix(seed), |acc, &v| splitmix(acc ^ splitmix(v)))
}

/// Generate one split of a labelled dataset, label-major.
///
/// Each packet draws its own payload, initial phase and noise from an RNG
/// keyed on (seed, split, label, index), so the result does not depend on
/// how the work is scheduled.
pub fn generate_split(scene: &Scene, cfg: &OfdmConfig, spec: &DatasetSpec, split: Split) -> Result<Vec<Packet>> {
    scene.validate()?;
    cfg.validate()?;
    let per_label = match split {
        Split::Train => spec.train_per_label,
        Split::Test => spec.test_per_label,
    };
    if per_label == 0 {
        return Err(Error::InvalidConfig("packet count per label must be at least 1".into()));
    }
    let channels = (0..NUM_LABELS as u16)
        .map(|l| build_profile(scene, cfg, l).map(|p| Channel::from_profile(&p, scene, cfg)))
        .collect::<Result<Vec<_>>>()?;

    (0..NUM_LABELS * per_label)
        .into_par_iter()
        .map(|i| {
            let label = (i / per_label) as u16;
            let mut rng = ChaCha8Rng::seed_from_u64(packet_seed(spec.seed, split, label, i % per_label));
            let tx = random_df_payload_with(cfg, spec.order, &mut rng);
            let rfo = RfoModel::new(spec.cfo_hz, rng.random_range(0.0..2.0 * PI));
            apply_channel_with(cfg, &channels[label as usize], &rfo, &tx, spec.snr_db, label, &mut rng)
        })
        .collect()
}
