//! File formats.
//!
//! Every CSV starts with one `# key=value ...` line carrying at least the seed
//! and config hash, followed by a column header row:
//!
//! | file        | columns |
//! |-------------|---------|
//! | spectrum    | `frequency_hz,psd_sn` |
//! | time series | `time_s,value_re,value_im` |
//! | points      | `gamma_opt_hz,n_bar,sigma_n,flags` |
//! | fits        | `gamma_opt_hz,n_avg,omega_m_hz,gamma_eff_hz,amp_stokes,amp_antistokes,floor,ratio,sigma_ratio,residual_norm,status` |
//! | sweep       | `detuning_hz,n_ba_fit,sigma_n_ba,min_n_bar,sigma_min_n_bar,n_ba_predicted,flags` |
//!
//! Spectrum metadata keys: `gamma_opt_hz` and `n_avg` are required;
//! `resolution_hz`, `detuning_hz`, `index`, `seed` and `config_hash` are
//! optional. Floats are written in shortest round-trip form, so reading a file
//! back reproduces the written values exactly. Flags are `;`-separated.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::analysis::{Flag, OccupationPoint, SidebandFit, SweepSummary};
use crate::error::{Error, Result};
use crate::physics::{angular_to_hz, hz_to_angular};
use crate::spectra::HeterodyneSpectrum;
use crate::synth::TimeSeries;

pub const SPECTRUM_COLUMNS: [&str; 2] = ["frequency_hz", "psd_sn"];
pub const TIME_SERIES_COLUMNS: [&str; 3] = ["time_s", "value_re", "value_im"];
pub const POINTS_COLUMNS: [&str; 4] = ["gamma_opt_hz", "n_bar", "sigma_n", "flags"];
pub const FITS_COLUMNS: [&str; 11] = [
    "gamma_opt_hz",
    "n_avg",
    "omega_m_hz",
    "gamma_eff_hz",
    "amp_stokes",
    "amp_antistokes",
    "floor",
    "ratio",
    "sigma_ratio",
    "residual_norm",
    "status",
];
pub const SWEEP_COLUMNS: [&str; 7] = [
    "detuning_hz",
    "n_ba_fit",
    "sigma_n_ba",
    "min_n_bar",
    "sigma_min_n_bar",
    "n_ba_predicted",
    "flags",
];

/// Seed and config hash stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    fn pairs(&self) -> Vec<(String, String)> {
        vec![
            ("seed".into(), self.seed.to_string()),
            ("config_hash".into(), self.config_hash.clone()),
        ]
    }
}

/// A spectrum as stored on disk: grid in Hz plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumRecord {
    pub gamma_opt_hz: f64,
    pub n_avg: f64,
    pub resolution_hz: f64,
    pub detuning_hz: Option<f64>,
    pub index: Option<usize>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub frequencies_hz: Vec<f64>,
    pub psd: Vec<f64>,
}

impl SpectrumRecord {
    pub fn to_spectrum(&self) -> Result<HeterodyneSpectrum> {
        HeterodyneSpectrum::new(
            self.frequencies_hz.iter().map(|&f| hz_to_angular(f)).collect(),
            self.psd.clone(),
            self.n_avg,
            hz_to_angular(self.resolution_hz),
        )
    }

    pub fn gamma_opt(&self) -> f64 {
        hz_to_angular(self.gamma_opt_hz)
    }
}

fn header_line(pairs: &[(String, String)]) -> String {
    let body: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n", body.join(" "))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_table<I>(path: &Path, meta: &[(String, String)], columns: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut out = create(path)?;
    out.write_all(header_line(meta).as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn num(v: f64) -> String {
    v.to_string()
}

pub fn write_spectrum(path: &Path, record: &SpectrumRecord) -> Result<()> {
    let mut meta = Vec::new();
    if let Some(seed) = record.seed {
        meta.push(("seed".into(), seed.to_string()));
    }
    if let Some(h) = &record.config_hash {
        meta.push(("config_hash".into(), h.clone()));
    }
    if let Some(d) = record.detuning_hz {
        meta.push(("detuning_hz".into(), num(d)));
    }
    meta.push(("gamma_opt_hz".into(), num(record.gamma_opt_hz)));
    meta.push(("n_avg".into(), num(record.n_avg)));
    meta.push(("resolution_hz".into(), num(record.resolution_hz)));
    if let Some(i) = record.index {
        meta.push(("index".into(), i.to_string()));
    }
    let rows = record
        .frequencies_hz
        .iter()
        .zip(&record.psd)
        .map(|(f, p)| vec![num(*f), num(*p)]);
    write_table(path, &meta, &SPECTRUM_COLUMNS, rows)
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Parse the leading `# key=value ...` line.
fn parse_header(path: &Path, line: &str) -> Result<BTreeMap<String, String>> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| schema(path, 1, "expected a `# key=value` metadata line"))?;
    let mut map = BTreeMap::new();
    for token in body.split_whitespace() {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| schema(path, 1, format!("metadata token `{token}` is not key=value")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn meta_value<T: std::str::FromStr>(path: &Path, meta: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match meta.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| schema(path, 1, format!("metadata `{key}` has unparseable value `{v}`"))),
    }
}

fn required<T: std::str::FromStr>(path: &Path, meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta_value(path, meta, key)?.ok_or_else(|| Error::MissingMetadata {
        key: key.to_string(),
        path: path.display().to_string(),
    })
}

/// Read a table written by this module: metadata plus rows of the given
/// columns, with each row's 1-based line number.
type Table = (BTreeMap<String, String>, Vec<(usize, csv::StringRecord)>);

fn read_table(path: &Path, columns: &[&str]) -> Result<Table> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.is_empty() {
        return Err(schema(path, 1, "empty file"));
    }
    let meta = parse_header(path, first.trim_end())?;
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| schema(path, 2, format!("unreadable column header: {e}")))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != columns {
        return Err(schema(
            path,
            2,
            format!(
                "expected columns `{}`, found `{}`",
                columns.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut rows = Vec::new();
    for rec in csv.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize + 1);
            schema(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize + 1);
        rows.push((line, rec));
    }
    Ok((meta, rows))
}

fn field_f64(path: &Path, line: usize, rec: &csv::StringRecord, i: usize, name: &str) -> Result<f64> {
    let raw = rec
        .get(i)
        .ok_or_else(|| schema(path, line, format!("missing `{name}`")))?;
    raw.trim()
        .parse()
        .map_err(|_| schema(path, line, format!("`{name}` is not a number: `{raw}`")))
}

pub fn read_spectrum(path: &Path) -> Result<SpectrumRecord> {
    let (meta, rows) = read_table(path, &SPECTRUM_COLUMNS)?;
    let gamma_opt_hz = required(path, &meta, "gamma_opt_hz")?;
    let n_avg = required(path, &meta, "n_avg")?;
    let mut frequencies_hz = Vec::with_capacity(rows.len());
    let mut psd = Vec::with_capacity(rows.len());
    for (line, rec) in &rows {
        if rec.len() != 2 {
            return Err(schema(path, *line, format!("expected 2 fields, found {}", rec.len())));
        }
        let f = field_f64(path, *line, rec, 0, "frequency_hz")?;
        let p = field_f64(path, *line, rec, 1, "psd_sn")?;
        if let Some(&last) = frequencies_hz.last() {
            if !(f > last) {
                return Err(schema(path, *line, "frequencies must be strictly increasing"));
            }
        }
        if !(p >= 0.0) || !p.is_finite() {
            return Err(schema(path, *line, format!("psd must be finite and >= 0, got {p}")));
        }
        frequencies_hz.push(f);
        psd.push(p);
    }
    if frequencies_hz.len() < 2 {
        return Err(schema(
            path,
            rows.last().map_or(2, |r| r.0),
            "a spectrum needs at least two bins",
        ));
    }
    let resolution_hz = match meta_value(path, &meta, "resolution_hz")? {
        Some(r) => r,
        None => frequencies_hz
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min),
    };
    Ok(SpectrumRecord {
        gamma_opt_hz,
        n_avg,
        resolution_hz,
        detuning_hz: meta_value(path, &meta, "detuning_hz")?,
        index: meta_value(path, &meta, "index")?,
        seed: meta_value(path, &meta, "seed")?,
        config_hash: meta.get("config_hash").cloned(),
        frequencies_hz,
        psd,
    })
}

pub fn write_time_series(path: &Path, series: &TimeSeries, provenance: &Provenance) -> Result<()> {
    let mut meta = provenance.pairs();
    meta.push(("sample_rate".into(), num(series.sample_rate)));
    let dt = series.dt();
    let rows = series
        .samples
        .iter()
        .enumerate()
        .map(|(i, z)| vec![num(i as f64 * dt), num(z.re), num(z.im)]);
    write_table(path, &meta, &TIME_SERIES_COLUMNS, rows)
}

pub fn write_points(path: &Path, points: &[OccupationPoint], provenance: &Provenance) -> Result<()> {
    let rows = points.iter().map(|p| {
        vec![
            num(angular_to_hz(p.gamma_opt)),
            num(p.n_bar),
            num(p.sigma_n),
            Flag::join(&p.flags),
        ]
    });
    write_table(path, &provenance.pairs(), &POINTS_COLUMNS, rows)
}

/// One row of the per-spectrum fit table; `fit` is `Err(message)` on failure.
pub struct FitRow<'a> {
    pub gamma_opt: f64,
    pub n_avg: f64,
    pub fit: std::result::Result<&'a SidebandFit, &'a str>,
}

pub fn write_fits(path: &Path, rows: &[FitRow<'_>], provenance: &Provenance) -> Result<()> {
    let nan = num(f64::NAN);
    let body = rows.iter().map(|r| {
        let mut row = vec![num(angular_to_hz(r.gamma_opt)), num(r.n_avg)];
        match r.fit {
            Ok(f) => {
                row.extend([
                    num(angular_to_hz(f.omega_m_fit)),
                    num(angular_to_hz(f.gamma_eff_fit)),
                    num(f.amp_stokes),
                    num(f.amp_antistokes),
                    num(f.floor_fit),
                    num(f.ratio()),
                    num(f.ratio_variance().sqrt()),
                    num(f.residual_norm),
                    "ok".into(),
                ]);
            }
            Err(msg) => {
                row.extend(std::iter::repeat_n(nan.clone(), 8));
                row.push(format!("failed: {msg}"));
            }
        }
        row
    });
    write_table(path, &provenance.pairs(), &FITS_COLUMNS, body)
}

/// `detunings_hz` labels the rows; it should be the list the sweep was
/// configured with so that the written values match the config exactly.
pub fn write_sweep(path: &Path, summary: &SweepSummary, detunings_hz: &[f64], provenance: &Provenance) -> Result<()> {
    let rows = summary.rows.iter().zip(detunings_hz).map(|(r, &d)| {
        vec![
            num(d),
            num(r.n_ba_fit),
            num(r.sigma_n_ba),
            num(r.min_n_bar),
            num(r.sigma_min_n_bar),
            num(r.n_ba_predicted),
            Flag::join(&r.flags),
        ]
    });
    write_table(path, &provenance.pairs(), &SWEEP_COLUMNS, rows)
}

/// Read the points table back; used by tests and downstream tooling.
pub fn read_points(path: &Path) -> Result<Vec<(f64, f64, f64, String)>> {
    let (_, rows) = read_table(path, &POINTS_COLUMNS)?;
    rows.iter()
        .map(|(line, rec)| {
            Ok((
                field_f64(path, *line, rec, 0, "gamma_opt_hz")?,
                field_f64(path, *line, rec, 1, "n_bar")?,
                field_f64(path, *line, rec, 2, "sigma_n")?,
                rec.get(3).unwrap_or("").to_string(),
            ))
        })
        .collect()
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
