//! Sweep harness: accuracy-versus-load grids, threshold extraction,
//! finite-size fits, score histograms and the on-disk CSV/JSON formats.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hebbian::hebbian_weights;
use crate::model::{hidden_width, WeightModel};
use crate::objective::{Workspace, DEFAULT_CACHE_BYTES};
use crate::problem::{p_from_alpha, sample_instance, Mode, ProblemInstance};
use crate::rng;
use crate::spectral::{DensityCurve, Spectrum};
use crate::train::{train_fresh, TrainConfig};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const JOURNAL_CSV: &str = "journal.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Stop reason recorded for cells that raised an error.
pub const FAILED: &str = "failed";
/// Stop reason recorded for closed-form (untrained) cells.
pub const CLOSED_FORM: &str = "closed_form";

/// Fixed-width float formatting: 17 significant digits, round-trips exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Trained,
    Hebbian,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Trained => "trained",
            Method::Hebbian => "hebbian",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trained" => Ok(Method::Trained),
            "hebbian" => Ok(Method::Hebbian),
            other => Err(format!("unknown method '{other}' (expected trained or hebbian)")),
        }
    }
}

/// One (mode, method, d, kappa, alpha, seed) cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub mode: Mode,
    pub method: Method,
    pub d: usize,
    pub m: usize,
    pub kappa: f64,
    pub alpha: f64,
    pub p: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub final_loss: f64,
    pub steps_used: usize,
    pub stop_reason: String,
}

pub const SWEEP_HEADER: [&str; 12] = [
    "mode",
    "method",
    "d",
    "m",
    "kappa",
    "alpha",
    "p",
    "seed",
    "accuracy",
    "final_loss",
    "steps_used",
    "stop_reason",
];

impl SweepRecord {
    pub fn to_row(&self) -> Vec<String> {
        vec![
            self.mode.to_string(),
            self.method.to_string(),
            self.d.to_string(),
            self.m.to_string(),
            fmt_f64(self.kappa),
            fmt_f64(self.alpha),
            self.p.to_string(),
            self.seed.to_string(),
            fmt_f64(self.accuracy),
            fmt_f64(self.final_loss),
            self.steps_used.to_string(),
            self.stop_reason.clone(),
        ]
    }

    pub fn from_row(row: &csv::StringRecord) -> Result<Self> {
        if row.len() != SWEEP_HEADER.len() {
            return Err(Error::invalid(format!("expected 12 columns, got {}", row.len())));
        }
        fn field<T: std::str::FromStr>(row: &csv::StringRecord, i: usize) -> Result<T> {
            row[i]
                .parse()
                .map_err(|_| Error::invalid(format!("bad value '{}' in column {}", &row[i], SWEEP_HEADER[i])))
        }
        Ok(SweepRecord {
            mode: row[0].parse().map_err(Error::InvalidArgument)?,
            method: row[1].parse().map_err(Error::InvalidArgument)?,
            d: field(row, 2)?,
            m: field(row, 3)?,
            kappa: field(row, 4)?,
            alpha: field(row, 5)?,
            p: field(row, 6)?,
            seed: field(row, 7)?,
            accuracy: field(row, 8)?,
            final_loss: field(row, 9)?,
            steps_used: field(row, 10)?,
            stop_reason: row[11].to_string(),
        })
    }

    pub fn cell(&self) -> Cell {
        Cell {
            mode: self.mode,
            method: self.method,
            d: self.d,
            kappa: self.kappa,
            alpha: self.alpha,
            seed: self.seed,
        }
    }

    pub fn failed(&self) -> bool {
        self.stop_reason == FAILED
    }

    /// Every association stored.
    pub fn satisfied(&self) -> bool {
        self.accuracy >= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub mode: Mode,
    pub method: Method,
    pub d: usize,
    pub kappa: f64,
    pub alpha: f64,
    pub seed: u64,
}

type CellKey = (Mode, Method, usize, u64, u64, u64);

impl Cell {
    fn key(&self) -> CellKey {
        (self.mode, self.method, self.d, self.kappa.to_bits(), self.alpha.to_bits(), self.seed)
    }

    /// Seed of the problem instance (and of the initialization derived from it).
    pub fn instance_seed(&self, master_seed: u64) -> u64 {
        let p = p_from_alpha(self.alpha, self.d) as u64;
        rng::mix(rng::mix(rng::mix(master_seed, self.d as u64), p), self.seed)
    }
}

/// Grid and protocol of a sweep; everything needed to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub alphas: Vec<f64>,
    pub dims: Vec<usize>,
    pub kappas: Vec<f64>,
    pub modes: Vec<Mode>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub train: TrainConfig,
    /// Train the factored model even at kappa = 1.
    pub factored_at_full_rank: bool,
    /// Skip larger loads of a (mode, method, d, kappa) line once a violation is seen.
    pub stop_after_violation: bool,
    /// Largest d accepted for decoupled sweeps.
    pub dp_max_d: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            alphas: (0..25).map(|i| 0.4 + 0.025 * i as f64).collect(),
            dims: vec![50],
            kappas: vec![1.0],
            modes: vec![Mode::Op],
            methods: vec![Method::Trained],
            seeds: (0..5).collect(),
            master_seed: 0,
            train: TrainConfig {
                stop_accuracy: 1.0,
                ..TrainConfig::default()
            },
            factored_at_full_rank: false,
            stop_after_violation: false,
            dp_max_d: 150,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("alphas", self.alphas.is_empty()),
            ("dims", self.dims.is_empty()),
            ("kappas", self.kappas.is_empty()),
            ("modes", self.modes.is_empty()),
            ("methods", self.methods.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::invalid(format!("sweep grid '{name}' is empty")));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::invalid("alphas must be positive and finite"));
        }
        if self.alphas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("alphas must be strictly increasing"));
        }
        if self.kappas.iter().any(|k| !(*k > 0.0 && *k <= 1.0)) {
            return Err(Error::invalid("kappas must lie in (0, 1]"));
        }
        if self.dims.contains(&0) {
            return Err(Error::invalid("dims must be positive"));
        }
        if self.modes.contains(&Mode::Dp) {
            if let Some(d) = self.dims.iter().find(|&&d| d > self.dp_max_d) {
                return Err(Error::invalid(format!(
                    "decoupled sweep at d = {d} exceeds dp_max_d = {}",
                    self.dp_max_d
                )));
            }
        }
        self.train.validate()
    }

    /// Lines of the sweep in canonical order: (mode, method, d, kappa).
    fn lines(&self) -> Vec<(Mode, Method, usize, f64)> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &method in &self.methods {
                for &d in &self.dims {
                    for &kappa in &self.kappas {
                        out.push((mode, method, d, kappa));
                    }
                }
            }
        }
        out
    }

    /// All cells in canonical order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for (mode, method, d, kappa) in self.lines() {
            for &alpha in &self.alphas {
                for &seed in &self.seeds {
                    out.push(Cell { mode, method, d, kappa, alpha, seed });
                }
            }
        }
        out
    }
}

/// Evaluate one cell; errors are reported in the record, not propagated.
pub fn run_cell(cell: &Cell, spec: &SweepSpec) -> SweepRecord {
    let p = p_from_alpha(cell.alpha, cell.d);
    let m = hidden_width(cell.kappa, cell.d);
    let mut rec = SweepRecord {
        mode: cell.mode,
        method: cell.method,
        d: cell.d,
        m,
        kappa: cell.kappa,
        alpha: cell.alpha,
        p,
        seed: cell.seed,
        accuracy: f64::NAN,
        final_loss: f64::NAN,
        steps_used: 0,
        stop_reason: FAILED.to_string(),
    };
    match evaluate_cell(cell, spec, p) {
        Ok((acc, loss, steps, reason)) => {
            rec.accuracy = acc;
            rec.final_loss = loss;
            rec.steps_used = steps;
            rec.stop_reason = reason;
        }
        Err(e) => log::warn!("cell {cell:?} failed: {e}"),
    }
    rec
}

fn evaluate_cell(cell: &Cell, spec: &SweepSpec, p: usize) -> Result<(f64, f64, usize, String)> {
    let inst = sample_instance(cell.d, p, cell.mode, cell.instance_seed(spec.master_seed))?;
    match cell.method {
        Method::Trained => {
            let factored = cell.kappa < 1.0 || spec.factored_at_full_rank;
            let (report, _) = train_fresh(&inst, cell.kappa, factored, inst.master_seed, &spec.train)?;
            Ok((
                report.final_accuracy(),
                report.final_loss(),
                report.steps_used,
                report.stop_reason.as_str().to_string(),
            ))
        }
        Method::Hebbian => {
            if cell.kappa != 1.0 {
                return Err(Error::invalid("the Hebbian map is full rank; use kappa = 1"));
            }
            let w = hebbian_weights(&inst)?;
            let ev = Workspace::new(&inst, spec.train.cache_bytes)?.evaluate(&w, false)?;
            Ok((ev.accuracy, ev.loss, 0, CLOSED_FORM.to_string()))
        }
    }
}

/// Append-only run log. Only complete lines are trusted on resume.
struct Journal {
    file: Mutex<File>,
}

impl Journal {
    fn open(path: &Path) -> Result<(Self, HashMap<CellKey, SweepRecord>)> {
        let done = read_journal(path)?;
        // Drop a trailing partial line left by an interrupted writer.
        if path.exists() {
            let text = fs::read(path)?;
            let keep = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if keep < text.len() {
                OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Journal { file: Mutex::new(file) }, done))
    }

    fn append(&self, rec: &SweepRecord) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(rec.to_row())?;
        let line = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let mut f = self.file.lock().expect("journal lock");
        f.write_all(&line)?;
        f.flush()?;
        Ok(())
    }
}

fn read_journal(path: &Path) -> Result<HashMap<CellKey, SweepRecord>> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let text = fs::read(path)?;
    let complete = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(&text[..complete]);
    for row in reader.records() {
        match row.map_err(Error::from).and_then(|r| SweepRecord::from_row(&r)) {
            Ok(rec) => {
                done.insert(rec.cell().key(), rec);
            }
            Err(e) => log::warn!("skipping unreadable journal line: {e}"),
        }
    }
    Ok(done)
}

/// Everything needed to regenerate the CSVs of a sweep directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub code_version: String,
    pub spec: SweepSpec,
    pub csv: String,
    pub journal: String,
    pub n_records: usize,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Run a sweep. With an output directory, completed cells are journaled as
/// they finish, previously journaled cells are reused, and the canonical CSV
/// plus manifest are written at the end.
pub fn run_sweep(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<Vec<SweepRecord>> {
    spec.validate()?;
    let (journal, done) = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let (j, done) = Journal::open(&dir.join(JOURNAL_CSV))?;
            (Some(j), done)
        }
        None => (None, HashMap::new()),
    };

    let lines = spec.lines();
    let per_line: Vec<Result<Vec<SweepRecord>>> = lines
        .par_iter()
        .map(|&(mode, method, d, kappa)| {
            let mut out = Vec::new();
            for &alpha in &spec.alphas {
                let recs: Vec<Result<SweepRecord>> = spec
                    .seeds
                    .par_iter()
                    .map(|&seed| {
                        let cell = Cell { mode, method, d, kappa, alpha, seed };
                        if let Some(rec) = done.get(&cell.key()) {
                            return Ok(rec.clone());
                        }
                        let rec = run_cell(&cell, spec);
                        if let Some(j) = &journal {
                            j.append(&rec)?;
                        }
                        Ok(rec)
                    })
                    .collect();
                let recs = recs.into_iter().collect::<Result<Vec<_>>>()?;
                let violated = recs.iter().any(|r| !r.satisfied());
                out.extend(recs);
                if spec.stop_after_violation && violated {
                    break;
                }
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_line {
        records.extend(r?);
    }

    if let Some(dir) = out_dir {
        write_records_csv(&dir.join(SWEEP_CSV), &records)?;
        let manifest = Manifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            spec: spec.clone(),
            csv: SWEEP_CSV.to_string(),
            journal: JOURNAL_CSV.to_string(),
            n_records: records.len(),
        };
        write_json(&dir.join(MANIFEST_JSON), &manifest)?;
    }
    Ok(records)
}

/// Re-run the sweep described by a manifest into `out_dir`.
pub fn rerun_from_manifest(manifest: &Path, out_dir: &Path) -> Result<Vec<SweepRecord>> {
    run_sweep(&Manifest::load(manifest)?.spec, Some(out_dir))
}

/// Write `path` via a temporary sibling and rename, so readers never see a
/// half-written file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Write a CSV with a header row; all fields are pre-formatted strings.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn write_records_csv(path: &Path, records: &[SweepRecord]) -> Result<()> {
    write_csv(path, &SWEEP_HEADER, records.iter().map(SweepRecord::to_row))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(SWEEP_HEADER.iter().copied()) {
        let missing: Vec<&str> = SWEEP_HEADER
            .iter()
            .copied()
            .filter(|c| !header.iter().any(|h| h == *c))
            .collect();
        return Err(Error::invalid(format!(
            "sweep CSV header mismatch (missing: {})",
            missing.join(", ")
        )));
    }
    reader
        .records()
        .map(|r| SweepRecord::from_row(&r?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub mode: Mode,
    pub method: Method,
    pub d: usize,
    pub kappa: f64,
    /// Largest swept load before the first violation (last fully satisfied).
    pub alpha_c_hat: f64,
    pub p_at_threshold: usize,
    /// Smallest swept load where some seed fails to store every association.
    pub alpha_first_violation: f64,
    pub p_at_first_violation: usize,
    pub rule: String,
}

/// First-violation threshold of one (mode, method, d, kappa) line. Any seed's
/// failure (including an errored cell) counts as a violation.
pub fn empirical_threshold(records: &[SweepRecord]) -> Result<ThresholdEstimate> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("no records for threshold"))?;
    if records.iter().any(|r| {
        r.mode != first.mode || r.method != first.method || r.d != first.d || r.kappa != first.kappa
    }) {
        return Err(Error::invalid("threshold records must share mode, method, d and kappa"));
    }
    let mut alphas: Vec<f64> = records.iter().map(|r| r.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let violated = |a: f64| records.iter().any(|r| r.alpha == a && !r.satisfied());
    let i = alphas.iter().position(|&a| violated(a)).ok_or_else(|| {
        Error::ThresholdOutOfRange(format!(
            "all loads up to alpha = {} satisfied at d = {}",
            alphas[alphas.len() - 1],
            first.d
        ))
    })?;
    if i == 0 {
        return Err(Error::ThresholdOutOfRange(format!(
            "smallest load alpha = {} already violated at d = {}",
            alphas[0], first.d
        )));
    }
    let p_of = |a: f64| records.iter().find(|r| r.alpha == a).map(|r| r.p).expect("present");
    Ok(ThresholdEstimate {
        mode: first.mode,
        method: first.method,
        d: first.d,
        kappa: first.kappa,
        alpha_c_hat: alphas[i - 1],
        p_at_threshold: p_of(alphas[i - 1]),
        alpha_first_violation: alphas[i],
        p_at_first_violation: p_of(alphas[i]),
        rule: "first_violation".to_string(),
    })
}

/// Thresholds of every line present in `records`, in first-appearance order.
pub fn thresholds(records: &[SweepRecord]) -> Vec<Result<ThresholdEstimate>> {
    let mut keys: Vec<(Mode, Method, usize, u64)> = Vec::new();
    for r in records {
        let k = (r.mode, r.method, r.d, r.kappa.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.iter()
        .map(|k| {
            let line: Vec<SweepRecord> = records
                .iter()
                .filter(|r| (r.mode, r.method, r.d, r.kappa.to_bits()) == *k)
                .cloned()
                .collect();
            empirical_threshold(&line)
        })
        .collect()
}

pub const THRESHOLD_HEADER: [&str; 9] = [
    "mode",
    "method",
    "d",
    "kappa",
    "alpha_c_hat",
    "p_at_threshold",
    "alpha_first_violation",
    "p_at_first_violation",
    "rule",
];

pub fn write_thresholds_csv(path: &Path, est: &[ThresholdEstimate]) -> Result<()> {
    write_csv(
        path,
        &THRESHOLD_HEADER,
        est.iter().map(|t| {
            vec![
                t.mode.to_string(),
                t.method.to_string(),
                t.d.to_string(),
                fmt_f64(t.kappa),
                fmt_f64(t.alpha_c_hat),
                t.p_at_threshold.to_string(),
                fmt_f64(t.alpha_first_violation),
                t.p_at_first_violation.to_string(),
                t.rule.clone(),
            ]
        }),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub d: usize,
    pub p: usize,
    pub alpha_c_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FssFit {
    pub slope: f64,
    pub intercept: f64,
    pub used: Vec<ThresholdPoint>,
    pub excluded: Vec<ThresholdPoint>,
}

/// Least-squares fit of `ln(alpha_c_hat - 1/2)` against `ln ln p`.
pub fn finite_size_fit(points: &[ThresholdPoint]) -> Result<FssFit> {
    let (used, excluded): (Vec<ThresholdPoint>, Vec<ThresholdPoint>) = points
        .iter()
        .partition(|t| t.alpha_c_hat > 0.5 && t.p > 2);
    for t in &excluded {
        log::warn!("excluding threshold {t:?} from the finite-size fit (alpha_c_hat <= 1/2)");
    }
    if used.len() < 3 {
        return Err(Error::invalid(format!(
            "finite-size fit needs at least 3 thresholds above 1/2, got {}",
            used.len()
        )));
    }
    let xs: Vec<f64> = used.iter().map(|t| (t.p as f64).ln().ln()).collect();
    let ys: Vec<f64> = used.iter().map(|t| (t.alpha_c_hat - 0.5).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::invalid("finite-size fit needs at least two distinct p"));
    }
    let slope = sxy / sxx;
    Ok(FssFit {
        slope,
        intercept: my - slope * mx,
        used,
        excluded,
    })
}

/// Read `(d, p, alpha_c_hat)` from any CSV carrying those named columns
/// (a thresholds table or a previous finite-size output).
pub fn read_threshold_points(path: &Path) -> Result<Vec<ThresholdPoint>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("{}: missing column '{name}'", path.display())))
    };
    let (cd, cp, ca) = (col("d")?, col("p")?, col("alpha_c_hat")?);
    let bad = |v: &str| Error::invalid(format!("{}: bad value '{v}'", path.display()));
    reader
        .records()
        .map(|r| {
            let r = r?;
            Ok(ThresholdPoint {
                d: r[cd].parse().map_err(|_| bad(&r[cd]))?,
                p: r[cp].parse().map_err(|_| bad(&r[cp]))?,
                alpha_c_hat: r[ca].parse().map_err(|_| bad(&r[ca]))?,
            })
        })
        .collect()
}

pub const FSS_HEADER: [&str; 6] = ["d", "p", "alpha_c_hat", "ln_ln_p", "ln_excess", "used"];

pub fn write_fss_csv(path: &Path, fit: &FssFit) -> Result<()> {
    let row = |t: &ThresholdPoint, used: bool| {
        vec![
            t.d.to_string(),
            t.p.to_string(),
            fmt_f64(t.alpha_c_hat),
            fmt_f64((t.p as f64).ln().ln()),
            if t.alpha_c_hat > 0.5 { fmt_f64((t.alpha_c_hat - 0.5).ln()) } else { String::new() },
            used.to_string(),
        ]
    };
    let rows = fit
        .used
        .iter()
        .map(|t| row(t, true))
        .chain(fit.excluded.iter().map(|t| row(t, false)));
    write_csv(path, &FSS_HEADER, rows)
}

/// Scores split into the target pool `s_{mu mu}` and the non-target pool,
/// globally rescaled so the non-target pool has unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
    /// Per input, the largest rescaled non-target score.
    pub max_nontarget: Vec<f64>,
    /// Factor applied to every score (`1 / std(nontarget)` before rescaling).
    pub scale: f64,
}

pub fn score_histograms<T: crate::real::Real>(
    model: &WeightModel<T>,
    inst: &ProblemInstance,
) -> Result<ScoreHistograms> {
    let s = Workspace::new(inst, DEFAULT_CACHE_BYTES)?.score_matrix(model)?;
    split_scores(&s)
}

/// Split a `p x p` score matrix (row `mu`, column `rho`) into the two pools.
pub fn split_scores(s: &Array2<f64>) -> Result<ScoreHistograms> {
    let p = s.nrows();
    let mut target = Vec::with_capacity(p);
    let mut nontarget = Vec::with_capacity(p * p.saturating_sub(1));
    for (mu, row) in s.rows().into_iter().enumerate() {
        for (rho, &v) in row.iter().enumerate() {
            if rho == mu {
                target.push(v);
            } else {
                nontarget.push(v);
            }
        }
    }
    let n = nontarget.len() as f64;
    let mean = nontarget.iter().sum::<f64>() / n;
    let var = nontarget.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::numeric(0, "non-target scores have zero or undefined variance"));
    }
    let scale = 1.0 / var.sqrt();
    target.iter_mut().for_each(|v| *v *= scale);
    nontarget.iter_mut().for_each(|v| *v *= scale);
    let max_nontarget = crate::objective::max_nontarget(s).iter().map(|v| v * scale).collect();
    Ok(ScoreHistograms {
        target,
        nontarget,
        max_nontarget,
        scale,
    })
}

pub fn write_scores_csv(path: &Path, h: &ScoreHistograms) -> Result<()> {
    let pool = |name: &'static str, v: &[f64]| {
        v.iter()
            .map(move |&x| vec![name.to_string(), fmt_f64(x)])
            .collect::<Vec<_>>()
    };
    let mut rows = pool("target", &h.target);
    rows.extend(pool("nontarget", &h.nontarget));
    rows.extend(pool("max_nontarget", &h.max_nontarget));
    write_csv(path, &["pool", "score"], rows)
}

/// Row of the theory CSV; absent quantities are written as empty fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub alpha: f64,
    pub kappa: f64,
    pub p_surrogate: Option<usize>,
    pub q_star: Option<f64>,
    pub phi: Option<f64>,
    pub stderr: Option<f64>,
    /// `;`-separated tags: the row kind plus warnings such as `boundary`.
    pub flags: String,
}

pub const THEORY_HEADER: [&str; 7] = ["alpha", "kappa", "p_surrogate", "q_star", "phi", "stderr", "flags"];

pub fn write_theory_csv(path: &Path, rows: &[TheoryRow]) -> Result<()> {
    write_csv(
        path,
        &THEORY_HEADER,
        rows.iter().map(|r| {
            vec![
                fmt_f64(r.alpha),
                fmt_f64(r.kappa),
                r.p_surrogate.map(|p| p.to_string()).unwrap_or_default(),
                fmt_opt(r.q_star),
                fmt_opt(r.phi),
                fmt_opt(r.stderr),
                r.flags.clone(),
            ]
        }),
    )
}

/// Singular values, one per row.
pub fn write_spectrum_csv(path: &Path, spec: &Spectrum) -> Result<()> {
    write_csv(
        path,
        &["index", "sigma"],
        spec.values
            .iter()
            .enumerate()
            .map(|(i, &v)| vec![i.to_string(), fmt_f64(v)]),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSidecar {
    pub kind: String,
    pub kappa: f64,
    pub point_mass_at_zero: f64,
    pub continuous_mass: f64,
    pub scale: f64,
}

/// Density curve as `sigma,density` plus a JSON sidecar (`<path>.json`)
/// holding the point mass at zero.
pub fn write_curve_csv(path: &Path, curve: &DensityCurve, kind: &str, kappa: f64, scale: f64) -> Result<()> {
    write_csv(
        path,
        &["sigma", "density"],
        curve
            .grid
            .iter()
            .zip(&curve.density)
            .map(|(&s, &f)| vec![fmt_f64(s), fmt_f64(f)]),
    )?;
    let sidecar = CurveSidecar {
        kind: kind.to_string(),
        kappa,
        point_mass_at_zero: curve.point_mass_at_zero,
        continuous_mass: curve.continuous_mass(),
        scale,
    };
    write_json(&path.with_extension("json"), &sidecar)
}
