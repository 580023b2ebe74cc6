//! On-disk formats: binary packet captures, CSV feature tables and CSV
//! result tables. Every writer replaces its target atomically.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::evs::{FeatureKind, FeatureVector};
use crate::ofdm::{CMatrix, OfdmConfig, Packet, PacketMeta};

pub const CAPTURE_MAGIC: [u8; 4] = *b"EVSC";
pub const CAPTURE_VERSION: u16 = 1;
const FLAG_METADATA: u16 = 1;
const HEADER_LEN: usize = 18;

/// Write `bytes` to a temporary file next to `path`, then rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    builder.permissions(std::os::unix::fs::PermissionsExt::from_mode(0o644));
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptureHeader {
    pub version: u16,
    pub k: u16,
    pub n_ltf: u16,
    pub n_df: u16,
    pub count: u32,
    pub has_meta: bool,
}

impl CaptureHeader {
    fn packet_len(&self) -> usize {
        let (k, l, d) = (self.k as usize, self.n_ltf as usize, self.n_df as usize);
        let meta = if self.has_meta { 8 * k + 4 * (l + d) + 4 } else { 0 };
        2 + meta + 8 * k * (l + d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub cfg: OfdmConfig,
    pub packets: Vec<Packet>,
}

fn put_c(out: &mut Vec<u8>, z: Complex64) {
    out.extend_from_slice(&(z.re as f32).to_le_bytes());
    out.extend_from_slice(&(z.im as f32).to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, m: &CMatrix) {
    // Row-major: subcarrier outer, symbol inner.
    for r in m.rows() {
        for &z in r {
            put_c(out, z);
        }
    }
}

/// Serialize packets. Samples are stored as 32-bit floats. Metadata is
/// written only when every packet carries it.
pub fn encode_capture(cfg: &OfdmConfig, packets: &[Packet]) -> Result<Vec<u8>> {
    let narrow = |what: &'static str, v: usize| u16::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} {v} does not fit in 16 bits")));
    let header = CaptureHeader {
        version: CAPTURE_VERSION,
        k: narrow("subcarrier count", cfg.k())?,
        n_ltf: narrow("LTF count", cfg.layout.n_ltf)?,
        n_df: narrow("DF count", cfg.layout.n_df)?,
        count: u32::try_from(packets.len()).map_err(|_| Error::InvalidConfig("too many packets".into()))?,
        has_meta: !packets.is_empty() && packets.iter().all(|p| p.meta.is_some()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + packets.len() * header.packet_len());
    out.extend_from_slice(&CAPTURE_MAGIC);
    for v in [header.version, header.k, header.n_ltf, header.n_df] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&header.count.to_le_bytes());
    let flags = if header.has_meta { FLAG_METADATA } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for (i, p) in packets.iter().enumerate() {
        p.check(cfg).map_err(|e| Error::Packet { index: i, source: Box::new(e) })?;
        out.extend_from_slice(&p.label.to_le_bytes());
        if header.has_meta {
            let meta = p.meta.as_ref().expect("checked above");
            for &z in &meta.true_csi {
                put_c(&mut out, z);
            }
            for &phi in &meta.rfo_trajectory {
                out.extend_from_slice(&(phi as f32).to_le_bytes());
            }
            out.extend_from_slice(&(meta.snr_db as f32).to_le_bytes());
        }
        put_block(&mut out, &p.ltf_rx);
        put_block(&mut out, &p.df_rx);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format { what: "capture file", offset: self.pos as u64, msg: msg.into() }
    }

    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let Some(chunk) = self.bytes.get(self.pos..self.pos + N) else {
            return Err(self.fail(format!("truncated while reading {what}")));
        };
        self.pos += N;
        Ok(chunk.try_into().expect("length checked"))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(what)?) as f64)
    }

    fn c(&mut self, what: &str) -> Result<Complex64> {
        Ok(Complex64::new(self.f32(what)?, self.f32(what)?))
    }

    fn block(&mut self, rows: usize, cols: usize, what: &str) -> Result<CMatrix> {
        let mut v = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            v.push(self.c(what)?);
        }
        Ok(Array2::from_shape_vec((rows, cols), v).expect("sized"))
    }
}

pub fn decode_capture_header(bytes: &[u8]) -> Result<CaptureHeader> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take("magic")?;
    if magic != CAPTURE_MAGIC {
        c.pos = 0;
        return Err(c.fail(format!("bad magic {magic:?}, expected \"EVSC\"")));
    }
    let version = c.u16("format version")?;
    if version != CAPTURE_VERSION {
        c.pos -= 2;
        return Err(c.fail(format!("unsupported format version {version}")));
    }
    let k = c.u16("subcarrier count")?;
    let n_ltf = c.u16("LTF count")?;
    let n_df = c.u16("DF count")?;
    let count = u32::from_le_bytes(c.take("packet count")?);
    let flags = c.u16("flags")?;
    if flags & !FLAG_METADATA != 0 {
        c.pos -= 2;
        return Err(c.fail(format!("unknown flag bits {flags:#06x}")));
    }
    Ok(CaptureHeader { version, k, n_ltf, n_df, count, has_meta: flags & FLAG_METADATA != 0 })
}

pub fn decode_capture(bytes: &[u8]) -> Result<Capture> {
    let header = decode_capture_header(bytes)?;
    let cfg = OfdmConfig::with_counts(header.n_ltf as usize, header.n_df as usize);
    let k = cfg.k();
    if header.k as usize != k {
        return Err(Error::Format {
            what: "capture file",
            offset: 6,
            msg: format!("{} subcarriers declared, this grid has {k}", header.k),
        });
    }
    let expected = HEADER_LEN as u64 + header.count as u64 * header.packet_len() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Format {
            what: "capture file",
            offset: bytes.len().min(expected as usize) as u64,
            msg: format!("header declares {} packets ({expected} bytes), file has {} bytes", header.count, bytes.len()),
        });
    }
    let (n_l, n_d) = (cfg.layout.n_ltf, cfg.layout.n_df);
    let mut c = Cursor { bytes, pos: HEADER_LEN };
    let mut packets = Vec::with_capacity(header.count as usize);
    for _ in 0..header.count {
        let label = c.u16("label")?;
        let meta = if header.has_meta {
            let true_csi = (0..k).map(|_| c.c("true CSI")).collect::<Result<Vec<_>>>()?;
            let rfo_trajectory = (0..n_l + n_d).map(|_| c.f32("RFO trajectory")).collect::<Result<Vec<_>>>()?;
            let snr_db = c.f32("SNR")?;
            Some(PacketMeta { true_csi, rfo_trajectory, tx_df: None, snr_db })
        } else {
            None
        };
        let ltf_rx = c.block(k, n_l, "LTF block")?;
        let df_rx = c.block(k, n_d, "DF block")?;
        packets.push(Packet { label, ltf_rx, df_rx, meta });
    }
    Ok(Capture { cfg, packets })
}

pub fn write_capture(path: impl AsRef<Path>, cfg: &OfdmConfig, packets: &[Packet]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_capture(cfg, packets)?)
}

pub fn read_capture(path: impl AsRef<Path>) -> Result<Capture> {
    decode_capture(&std::fs::read(path)?)
}

fn csv_error(what: &'static str, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Format { what, offset, msg: format!("{kind:?}") },
    }
}

/// CSV with header `label,kind,f1..fK`, one row per packet.
pub fn encode_features(features: &[FeatureVector]) -> Result<Vec<u8>> {
    let dim = features.first().map_or(0, |f| f.values.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string(), "kind".to_string()];
    header.extend((1..=dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_error("feature file", e))?;
    for f in features {
        if f.values.len() != dim {
            return Err(dim_mismatch("feature length", dim, f.values.len()));
        }
        if f.kind != features[0].kind {
            return Err(Error::KindMismatch { expected: features[0].kind.to_string(), got: f.kind.to_string() });
        }
        let mut row = vec![f.label.to_string(), f.kind.to_string()];
        row.extend(f.values.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row).map_err(|e| csv_error("feature file", e))?;
    }
    Ok(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureVector>> {
    const WHAT: &str = "feature file";
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| csv_error(WHAT, e))?.clone();
    let bad = |offset: u64, msg: String| Error::Format { what: WHAT, offset, msg };
    if header.len() < 2 || &header[0] != "label" || &header[1] != "kind" {
        return Err(bad(0, "header must start with \"label,kind\"".into()));
    }
    let dim = header.len() - 2;
    let mut out: Vec<FeatureVector> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(WHAT, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let label = rec[0].parse::<u16>().map_err(|e| bad(offset, format!("label {:?}: {e}", &rec[0])))?;
        let kind: FeatureKind = rec[1].parse().map_err(|e: Error| bad(offset, e.to_string()))?;
        if let Some(first) = out.first() {
            if first.kind != kind {
                return Err(bad(offset, format!("kind {kind} differs from {} in earlier rows", first.kind)));
            }
        }
        let values = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|e| bad(offset, format!("value {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(bad(offset, format!("{} values, header declares {dim}", values.len())));
        }
        out.push(FeatureVector { kind, label, values });
    }
    Ok(out)
}

pub fn write_features(path: impl AsRef<Path>, features: &[FeatureVector]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_features(features)?)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureVector>> {
    decode_features(&std::fs::read(path)?)
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub kind: FeatureKind,
    pub gamma: u32,
    pub seed: u64,
    /// Mean accuracy over the runs, as a fraction.
    pub accuracy: f64,
    /// Sample standard deviation over the runs; zero for a single run.
    pub std: f64,
}

const RESULTS_HEADER: [&str; 6] = ["experiment", "kind", "gamma", "seed", "accuracy", "std"];

fn result_record(r: &ResultRow) -> [String; 6] {
    [
        r.experiment.clone(),
        r.kind.to_string(),
        r.gamma.to_string(),
        r.seed.to_string(),
        format!("{:.6}", r.accuracy),
        format!("{:.6}", r.std),
    ]
}

pub fn encode_results(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER).map_err(|e| csv_error("results file", e))?;
    for r in rows {
        w.write_record(result_record(r)).map_err(|e| csv_error("results file", e))?;
    }
    Ok(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
}

pub fn decode_results(bytes: &[u8]) -> Result<Vec<ResultRow>> {
    const WHAT: &str = "results file";
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| csv_error(WHAT, e))?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::Format { what: WHAT, offset: 0, msg: format!("unexpected header {header:?}") });
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(WHAT, e)))
        .collect()
}

/// Replace the results file with `rows`.
pub fn write_results(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_results(rows)?)
}

/// Append rows, creating the file with a header if needed.
pub fn append_results(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let path = path.as_ref();
    let mut all = if path.exists() { read_results(path)? } else { Vec::new() };
    all.extend_from_slice(rows);
    write_results(path, &all)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    decode_results(&std::fs::read(path)?)
}
