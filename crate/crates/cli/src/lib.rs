//! Command implementations for the `evloc` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use evloc::channel::{generate_split, DatasetSpec, Scene, Split, NUM_LABELS};
use evloc::classifier::{knn_predict, split_validation, train, TrainConfig, TrainedModel};
use evloc::evs::{extract_stream, session_order, FeatureKind, FeatureVector, PipelineConfig};
use evloc::experiment::{compare, sweep_gamma, CompareGammas, ExperimentConfig, ExperimentOutput};
use evloc::io::{self, ResultRow};
use evloc::ofdm::{ModOrder, OfdmConfig, Packet};

pub const TRAIN_FILE: &str = "train.evsc";
pub const TEST_FILE: &str = "test.evsc";

#[derive(Debug, Parser)]
#[command(name = "evloc", version, about = "Device-free localization from OFDM error vector spectra")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate train and test captures for every location label.
    Gen(GenArgs),
    /// Turn a capture into a feature table.
    Extract(ExtractArgs),
    /// Train the network on a feature table.
    Train(TrainArgs),
    /// Evaluate a trained model on a feature table.
    Eval(EvalArgs),
    /// K-nearest-neighbour baseline on two feature tables.
    Knn(KnnArgs),
    /// Accuracy against the calibration depth gamma.
    SweepGamma(SweepArgs),
    /// All four feature kinds through the same network.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Scene description (TOML); the built-in room when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Output directory for train.evsc and test.evsc.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub train_per_label: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_label: usize,
    /// Use `inf` for noise-free packets.
    #[arg(long, default_value_t = 20.0)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 2000.0)]
    pub cfo_hz: f64,
    /// Constellation size: 2, 4, 16 or 64.
    #[arg(long, default_value = "4")]
    pub order: ModOrder,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub kind: FeatureKind,
    #[arg(long, default_value_t = 0)]
    pub gamma: u32,
    /// Calibration window in packets.
    #[arg(long, default_value_t = 50)]
    pub window: usize,
    #[arg(long, default_value = "packet", help = ORDER_HELP)]
    pub order: OrderArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct NetArgs {
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "128,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

impl NetArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden.clone(),
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            classes: Some(NUM_LABELS),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Epoch history CSV; defaults to the model path with `.history.csv` appended.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Append the accuracy to this results table.
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    pub experiment: String,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long, default_value = "knn")]
    pub experiment: String,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Directory holding train.evsc and test.evsc.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub window: usize,
    #[arg(long, default_value = "packet", help = ORDER_HELP)]
    pub order: OrderArg,
    #[command(flatten)]
    pub net: NetArgs,
}

impl ExperimentArgs {
    fn config(&self, order_hint: Option<ModOrder>) -> ExperimentConfig {
        ExperimentConfig {
            train: self.net.train_config(),
            val_frac: self.net.val_frac,
            runs: self.runs,
            seed: self.net.seed,
            window: self.window,
            order_hint,
        }
    }
}

const ORDER_HELP: &str =
    "Constellation used for hard decisions: `packet` classifies each packet, `session` takes the majority over the stream, 2/4/16/64 fixes it";

/// How the hard-decision constellation is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderArg {
    Packet,
    Session,
    Fixed(ModOrder),
}

impl std::str::FromStr for OrderArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "packet" => Ok(OrderArg::Packet),
            "session" => Ok(OrderArg::Session),
            n => n.parse().map(OrderArg::Fixed).map_err(|e: evloc::Error| e.to_string()),
        }
    }
}

impl OrderArg {
    /// Order hint for the pipeline; `None` means classify per packet.
    pub fn resolve(self, packets: &[Packet], cfg: &OfdmConfig) -> Result<Option<ModOrder>> {
        Ok(match self {
            OrderArg::Packet => None,
            OrderArg::Session => Some(session_order(packets, cfg)?),
            OrderArg::Fixed(o) => Some(o),
        })
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "evs-amp,evs-phase")]
    pub kinds: Vec<FeatureKind>,
    #[arg(long, value_delimiter = ',', default_value = "0,2,4,6,8")]
    pub gammas: Vec<u32>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long, default_value_t = 4)]
    pub gamma_amp: u32,
    #[arg(long, default_value_t = 6)]
    pub gamma_phase: u32,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Extract(a) => cmd_extract(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Knn(a) => cmd_knn(&a, out),
        Command::SweepGamma(a) => cmd_sweep_gamma(&a, out),
        Command::Compare(a) => cmd_compare(&a, out),
    }
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let scene = match &a.scene {
        Some(p) => Scene::load(p).with_context(|| format!("loading scene {}", p.display()))?,
        None => Scene::default(),
    };
    let cfg = OfdmConfig::default();
    let spec = DatasetSpec {
        train_per_label: a.train_per_label,
        test_per_label: a.test_per_label,
        snr_db: a.snr_db,
        cfo_hz: a.cfo_hz,
        order: a.order,
        seed: a.seed,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (split, name) in [(Split::Train, TRAIN_FILE), (Split::Test, TEST_FILE)] {
        let packets = generate_split(&scene, &cfg, &spec, split)?;
        let path = a.out.join(name);
        io::write_capture(&path, &cfg, &packets).with_context(|| format!("writing {}", path.display()))?;
        let mut counts = vec![0usize; NUM_LABELS];
        for p in &packets {
            counts[p.label as usize] += 1;
        }
        writeln!(out, "{}: {} packets", path.display(), packets.len())?;
        let per_label: Vec<String> = counts.iter().enumerate().map(|(l, c)| format!("{l}:{c}")).collect();
        writeln!(out, "  per label {}", per_label.join(" "))?;
    }
    Ok(())
}

pub fn cmd_extract(a: &ExtractArgs, out: &mut dyn Write) -> Result<()> {
    let cap = io::read_capture(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let order_hint = if a.kind.is_evs() { a.order.resolve(&cap.packets, &cap.cfg)? } else { None };
    let pipeline = PipelineConfig { kind: a.kind, gamma: a.gamma, window: a.window, order_hint };
    let features = extract_stream(&cap.packets, &cap.cfg, &pipeline)
        .with_context(|| format!("extracting {} from {}", a.kind, a.input.display()))?;
    io::write_features(&a.out, &features).with_context(|| format!("writing {}", a.out.display()))?;
    writeln!(out, "{}: {} {} feature vectors", a.out.display(), features.len(), a.kind)?;
    Ok(())
}

fn read_features(path: &Path) -> Result<Vec<FeatureVector>> {
    io::read_features(path).with_context(|| format!("reading {}", path.display()))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let features = read_features(&a.features)?;
    let (tr, val) = split_validation(&features, a.net.val_frac, a.net.seed);
    let (model, history) = train(&tr, &val, &a.net.train_config())?;
    model.save(&a.model_out).with_context(|| format!("writing {}", a.model_out.display()))?;
    let hist_path = a.history.clone().unwrap_or_else(|| {
        let mut p = a.model_out.clone().into_os_string();
        p.push(".history.csv");
        p.into()
    });
    let mut text = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for e in &history {
        text.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            opt(e.val_loss),
            opt(e.val_accuracy)
        ));
    }
    io::write_atomic(&hist_path, text.as_bytes())?;
    let last = history.last().expect("at least one epoch");
    writeln!(
        out,
        "trained {} epochs on {} samples ({} validation); final train accuracy {:.4}{}",
        history.len(),
        tr.len(),
        val.len(),
        last.train_accuracy,
        last.val_accuracy.map_or(String::new(), |v| format!(", validation accuracy {v:.4}"))
    )?;
    writeln!(out, "model: {}\nhistory: {}", a.model_out.display(), hist_path.display())?;
    Ok(())
}

/// `counts[true][predicted]`.
pub fn confusion(predicted: &[u16], truth: &[FeatureVector], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (p, t) in predicted.iter().zip(truth) {
        if (t.label as usize) < classes && (*p as usize) < classes {
            m[t.label as usize][*p as usize] += 1;
        }
    }
    m
}

fn report(out: &mut dyn Write, predicted: &[u16], truth: &[FeatureVector]) -> Result<f64> {
    let classes = predicted
        .iter()
        .copied()
        .chain(truth.iter().map(|t| t.label))
        .max()
        .map_or(0, |m| m as usize + 1);
    let acc = evloc::classifier::accuracy(predicted, truth);
    writeln!(out, "accuracy {acc:.6} ({} samples)", truth.len())?;
    writeln!(out, "confusion (row = true label, columns = predicted label 0..{})", classes.saturating_sub(1))?;
    for (l, row) in confusion(predicted, truth, classes).iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:3}")).collect();
        writeln!(out, "{l:3} |{}", cells.join(""))?;
    }
    Ok(acc)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = TrainedModel::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let features = read_features(&a.features)?;
    if features.is_empty() {
        bail!("{} holds no feature vectors", a.features.display());
    }
    let pred = model.predict(&features)?;
    let acc = report(out, &pred.labels, &features)?;
    if let Some(path) = &a.results {
        let row = ResultRow { experiment: a.experiment.clone(), kind: model.kind, gamma: 0, seed: 0, accuracy: acc, std: 0.0 };
        io::append_results(path, &[row])?;
    }
    Ok(())
}

pub fn cmd_knn(a: &KnnArgs, out: &mut dyn Write) -> Result<()> {
    let train_set = read_features(&a.train)?;
    let test_set = read_features(&a.test)?;
    if let (Some(tr), Some(te)) = (train_set.first(), test_set.first()) {
        if tr.kind != te.kind {
            bail!("train features are {} but test features are {}", tr.kind, te.kind);
        }
    }
    let pred = knn_predict(&train_set, &test_set, a.k)?;
    let acc = report(out, &pred, &test_set)?;
    if let Some(path) = &a.results {
        let kind = test_set.first().map_or(FeatureKind::CsiAmp, |f| f.kind);
        let row = ResultRow { experiment: a.experiment.clone(), kind, gamma: 0, seed: 0, accuracy: acc, std: 0.0 };
        io::append_results(path, &[row])?;
    }
    Ok(())
}

fn load_pair(dir: &Path) -> Result<(OfdmConfig, Vec<Packet>, Vec<Packet>)> {
    let train_path = dir.join(TRAIN_FILE);
    let test_path = dir.join(TEST_FILE);
    let train_cap = io::read_capture(&train_path).with_context(|| format!("reading {}", train_path.display()))?;
    let test_cap = io::read_capture(&test_path).with_context(|| format!("reading {}", test_path.display()))?;
    if train_cap.cfg != test_cap.cfg {
        bail!("train and test captures use different frame layouts");
    }
    Ok((train_cap.cfg, train_cap.packets, test_cap.packets))
}

/// Sidecar with one accuracy per run next to a results table.
pub fn runs_path(results: &Path) -> PathBuf {
    let mut p = results.as_os_str().to_owned();
    p.push(".runs.csv");
    p.into()
}

fn write_experiment(results: &Path, output: &ExperimentOutput, out: &mut dyn Write) -> Result<()> {
    io::write_results(results, &output.rows).with_context(|| format!("writing {}", results.display()))?;
    let mut text = String::from("experiment,kind,gamma,run,seed,accuracy\n");
    for r in &output.runs {
        text.push_str(&format!("{},{},{},{},{},{:.6}\n", r.experiment, r.kind, r.gamma, r.run, r.seed, r.accuracy));
    }
    io::write_atomic(&runs_path(results), text.as_bytes())?;
    writeln!(out, "{:<10} {:>5} {:>9} {:>9}", "kind", "gamma", "accuracy", "std")?;
    for r in &output.rows {
        writeln!(out, "{:<10} {:>5} {:>9.4} {:>9.4}", r.kind.as_str(), r.gamma, r.accuracy, r.std)?;
    }
    writeln!(out, "results: {}", results.display())?;
    Ok(())
}

pub fn cmd_sweep_gamma(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, tr, te) = load_pair(&a.common.input)?;
    let hint = a.common.order.resolve(&tr, &cfg)?;
    let output = sweep_gamma(&tr, &te, &cfg, &a.kinds, &a.gammas, &a.common.config(hint))?;
    write_experiment(&a.common.results, &output, out)
}

pub fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, tr, te) = load_pair(&a.common.input)?;
    let gammas = CompareGammas { evs_amp: a.gamma_amp, evs_phase: a.gamma_phase };
    let hint = a.common.order.resolve(&tr, &cfg)?;
    let output = compare(&tr, &te, &cfg, gammas, &a.common.config(hint))?;
    write_experiment(&a.common.results, &output, out)
}
