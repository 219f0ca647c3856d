//! Subcommand implementations. Each writes its CSVs plus `config.toml` (the
//! effective configuration) and a manifest into the output directory.

use std::fs;
use std::path::Path;

use serde::Serialize;

use assocmem::experiments::{
    self, fmt_f64, read_records_csv, read_threshold_points, run_sweep, write_csv, write_json, Cell, Method,
    SweepRecord, ThresholdPoint, TheoryRow,
};
use assocmem::hebbian::{hebb_row_failure, hebbian_score_stats, hebbian_weights, rate_infimum};
use assocmem::model::WeightModel;
use assocmem::problem::{p_from_alpha, sample_instance};
use assocmem::spectral::{
    fd_histogram, init_density, init_grid, ks_distance, rho_c_curve, rho_c_grid, svd_spectrum, Normalization,
};
use assocmem::theory::{alpha_c, capacity_extrapolation, g_bounds, minimize_q_with, EtaSamples};
use assocmem::train::train_fresh;
use assocmem::{Error, Result};

use crate::config::{RunConfig, SpectrumSource};

#[derive(Serialize)]
struct CommandManifest<'a, S: Serialize> {
    command: &'a str,
    code_version: &'a str,
    config: &'a S,
    outputs: Vec<&'a str>,
}

fn finish<S: Serialize>(out: &Path, command: &str, cfg: &RunConfig, section: &S, outputs: Vec<&str>) -> Result<()> {
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    write_json(
        &out.join(format!("{command}_manifest.json")),
        &CommandManifest {
            command,
            code_version: env!("CARGO_PKG_VERSION"),
            config: section,
            outputs,
        },
    )?;
    log::info!("wrote {}", out.display());
    Ok(())
}

pub fn sweep(cfg: &RunConfig, out: &Path, manifest: Option<&Path>) -> Result<()> {
    let spec = match manifest {
        Some(path) => experiments::Manifest::load(path)?.spec,
        None => cfg.sweep.clone(),
    };
    fs::create_dir_all(out)?;
    let records = run_sweep(&spec, Some(out))?;
    let mut est = Vec::new();
    for t in experiments::thresholds(&records) {
        match t {
            Ok(t) => est.push(t),
            Err(e) => log::warn!("{e}"),
        }
    }
    experiments::write_thresholds_csv(&out.join("thresholds.csv"), &est)?;
    let failed = records.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed", records.len());
    }
    let effective = RunConfig { sweep: spec, ..cfg.clone() };
    fs::write(out.join("config.toml"), effective.to_toml())?;
    log::info!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

pub fn theory(cfg: &RunConfig, out: &Path) -> Result<()> {
    let t = &cfg.theory;
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &kappa in &t.kappas {
        rows.push(TheoryRow {
            alpha: alpha_c(kappa)?,
            kappa,
            flags: "alpha_c".into(),
            ..TheoryRow::default()
        });
    }
    if !t.alphas.is_empty() {
        let samples = EtaSamples::new(t.p, t.n_mc, t.seed)?;
        for &alpha in &t.alphas {
            let e = minimize_q_with(alpha, &samples)?;
            log::info!("alpha = {alpha}: q* = {:.6}", e.q_star);
            rows.push(TheoryRow {
                alpha,
                kappa: 1.0,
                p_surrogate: Some(e.p_surrogate),
                q_star: Some(e.q_star),
                phi: Some(e.phi_value),
                stderr: Some(e.mc_stderr),
                flags: if e.at_boundary { "q_star;boundary".into() } else { "q_star".into() },
            });
        }
    }
    if t.extrapolation {
        let c = capacity_extrapolation(t.p, t.extrapolation_n_mc, t.seed)?;
        rows.push(TheoryRow {
            alpha: c.alpha_c_hat,
            kappa: 1.0,
            p_surrogate: Some(t.p),
            stderr: Some(c.stderr),
            flags: if c.monotone {
                "capacity_extrapolation".into()
            } else {
                "capacity_extrapolation;nonmonotone".into()
            },
            ..TheoryRow::default()
        });
        write_csv(
            &out.join("extrapolation.csv"),
            &["q", "minus_two_one_minus_q_g"],
            c.qs.iter().zip(&c.values).map(|(&q, &y)| vec![fmt_f64(q), fmt_f64(y)]),
        )?;
    }
    experiments::write_theory_csv(&out.join("theory.csv"), &rows)?;

    let samples = if t.bounds_estimate {
        Some(EtaSamples::new(t.p, t.n_mc, t.seed)?)
    } else {
        None
    };
    let mut bounds = Vec::new();
    for &tt in &t.bounds_ts {
        let est = match &samples {
            Some(s) => Some(s.energetic(tt)?),
            None => None,
        };
        for &k in &t.bounds_k {
            let (lo, up) = g_bounds(tt, k)?;
            bounds.push(vec![
                fmt_f64(tt),
                fmt_f64(k),
                fmt_f64(lo),
                fmt_f64(up),
                est.map(|e| fmt_f64(e.0)).unwrap_or_default(),
                est.map(|e| fmt_f64(e.1)).unwrap_or_default(),
            ]);
        }
    }
    write_csv(&out.join("g_bounds.csv"), &["t", "k", "lower", "upper", "g_hat", "stderr"], bounds)?;
    finish(out, "theory", cfg, t, vec!["theory.csv", "g_bounds.csv", "extrapolation.csv"])
}

/// Train on increasing loads and keep the last model that stores everything.
fn model_at_threshold(cfg: &RunConfig) -> Result<(f64, WeightModel<f64>)> {
    let s = &cfg.spectrum;
    let factored = s.kappa < 1.0;
    let alphas: Vec<f64> = match s.alpha {
        Some(a) => vec![a],
        None => s.alphas.clone(),
    };
    let mut best = None;
    for alpha in alphas {
        let cell = Cell { mode: s.mode, method: Method::Trained, d: s.d, kappa: s.kappa, alpha, seed: 0 };
        let inst = sample_instance(s.d, p_from_alpha(alpha, s.d), s.mode, cell.instance_seed(s.seed))?;
        let (report, model) = train_fresh(&inst, s.kappa, factored, inst.master_seed, &s.train)?;
        log::info!("alpha = {alpha}: accuracy {}", report.final_accuracy());
        if s.alpha.is_some() {
            return Ok((alpha, model));
        }
        if report.final_accuracy() < 1.0 {
            break;
        }
        best = Some((alpha, model));
    }
    best.ok_or_else(|| Error::ThresholdOutOfRange("no load in the scan was fully satisfied".into()))
}

#[derive(Serialize)]
struct SpectrumSummary {
    alpha: Option<f64>,
    d: usize,
    kappa: f64,
    normalization: Normalization,
    zero_fraction: f64,
    ks_capacity: Option<f64>,
}

pub fn spectrum(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = &cfg.spectrum;
    fs::create_dir_all(out)?;
    let (alpha, model) = match s.source {
        SpectrumSource::Identity => {
            let mut w = WeightModel::<f64>::zeros_full(s.d);
            if let WeightModel::FullRank { w } = &mut w {
                w.diag_mut().fill(1.0);
            }
            (None, w)
        }
        SpectrumSource::ModelFile => {
            let path = s
                .model_path
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("spectrum.model_path is required for source = model_file".into()))?;
            let model = WeightModel::<f64>::read_binary(std::io::BufReader::new(fs::File::open(path)?))?;
            (None, model)
        }
        SpectrumSource::Train => {
            let (a, m) = model_at_threshold(cfg)?;
            (Some(a), m)
        }
    };
    let spec = svd_spectrum(&model, s.normalization)?;
    experiments::write_spectrum_csv(&out.join("spectrum.csv"), &spec)?;
    let (edges, counts) = fd_histogram(&spec.nonzero());
    write_csv(
        &out.join("spectrum_hist.csv"),
        &["lo", "hi", "count"],
        counts
            .iter()
            .enumerate()
            .map(|(i, c)| vec![fmt_f64(edges[i]), fmt_f64(edges[i + 1]), c.to_string()]),
    )?;
    let rho = rho_c_curve(s.kappa, &rho_c_grid(s.kappa, s.curve_points)?)?;
    experiments::write_curve_csv(&out.join("rho_c.csv"), &rho, "capacity", s.kappa, 1.0)?;
    let init = init_density(s.kappa, &init_grid(s.kappa, s.curve_points)?)?;
    experiments::write_curve_csv(&out.join("init.csv"), &init, "initialization", s.kappa, 1.0)?;
    let ks_capacity = match s.normalization {
        Normalization::TopEqualsTwo => Some(ks_distance(&spec, &rho)?),
        _ => None,
    };
    write_json(
        &out.join("spectrum.json"),
        &SpectrumSummary {
            alpha,
            d: model.d(),
            kappa: s.kappa,
            normalization: s.normalization,
            zero_fraction: spec.zero_fraction,
            ks_capacity,
        },
    )?;
    finish(out, "spectrum", cfg, s, vec!["spectrum.csv", "spectrum_hist.csv", "rho_c.csv", "init.csv", "spectrum.json"])
}

pub fn hebbian(cfg: &RunConfig, out: &Path) -> Result<()> {
    let h = &cfg.hebbian;
    fs::create_dir_all(out)?;
    let inst = sample_instance(h.d, h.p, assocmem::Mode::Op, h.seed)?;
    let st = hebbian_score_stats(&inst)?;
    let d2 = (h.d * h.d) as f64;
    write_csv(
        &out.join("hebbian_stats.csv"),
        &["d", "p", "diag_mean", "diag_var", "offdiag_mean", "offdiag_var", "offdiag_var_p_over_d2"],
        [vec![
            st.d.to_string(),
            st.p.to_string(),
            fmt_f64(st.diag_mean),
            fmt_f64(st.diag_var),
            st.offdiag_mean.map(fmt_f64).unwrap_or_default(),
            st.offdiag_var.map(fmt_f64).unwrap_or_default(),
            fmt_f64(h.p as f64 / d2),
        ]],
    )?;
    let mut rows = Vec::new();
    for &alpha in &h.alphas {
        let (fail, se) = hebb_row_failure(alpha, h.heuristic_p, h.n_mc, h.seed)?;
        let success = (h.heuristic_p as f64 * (-fail).ln_1p()).exp();
        let (x, j) = rate_infimum(alpha);
        rows.push(vec![
            fmt_f64(alpha),
            h.heuristic_p.to_string(),
            fmt_f64(fail),
            fmt_f64(se),
            fmt_f64(success),
            fmt_f64(x),
            fmt_f64(j),
        ]);
    }
    write_csv(
        &out.join("hebbian_heuristic.csv"),
        &["alpha", "p", "row_failure", "stderr", "success", "rate_argmin", "rate_inf"],
        rows,
    )?;
    finish(out, "hebbian", cfg, h, vec!["hebbian_stats.csv", "hebbian_heuristic.csv"])
}

#[derive(Serialize)]
struct HistSummary {
    alpha: f64,
    p: usize,
    accuracy: f64,
    scale: f64,
    target_mean: f64,
    target_std: f64,
    nontarget_mean: f64,
    nontarget_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

pub fn hist(cfg: &RunConfig, out: &Path) -> Result<()> {
    let h = &cfg.hist;
    fs::create_dir_all(out)?;
    let p = p_from_alpha(h.alpha, h.d);
    let cell = Cell { mode: h.mode, method: h.method, d: h.d, kappa: h.kappa, alpha: h.alpha, seed: 0 };
    let inst = sample_instance(h.d, p, h.mode, cell.instance_seed(h.seed))?;
    let model = match h.method {
        Method::Trained => train_fresh(&inst, h.kappa, h.kappa < 1.0, inst.master_seed, &h.train)?.1,
        Method::Hebbian => hebbian_weights(&inst)?,
    };
    let accuracy = assocmem::objective::accuracy(&model, &inst)?;
    let pools = experiments::score_histograms(&model, &inst)?;
    experiments::write_scores_csv(&out.join("scores.csv"), &pools)?;
    let (tm, ts) = mean_std(&pools.target);
    let (nm, ns) = mean_std(&pools.nontarget);
    write_json(
        &out.join("hist.json"),
        &HistSummary {
            alpha: h.alpha,
            p,
            accuracy,
            scale: pools.scale,
            target_mean: tm,
            target_std: ts,
            nontarget_mean: nm,
            nontarget_std: ns,
        },
    )?;
    finish(out, "hist", cfg, h, vec!["scores.csv", "hist.json"])
}

pub fn fss(cfg: &RunConfig, out: &Path) -> Result<()> {
    let f = &cfg.fss;
    fs::create_dir_all(out)?;
    let mut points: Vec<ThresholdPoint> = Vec::new();
    if let Some(path) = &f.thresholds_csv {
        points.extend(read_threshold_points(path)?);
    }
    if let Some(path) = &f.sweep_csv {
        let records: Vec<SweepRecord> = read_records_csv(path)?;
        for t in experiments::thresholds(&records) {
            match t {
                Ok(t) => points.push(ThresholdPoint { d: t.d, p: t.p_at_threshold, alpha_c_hat: t.alpha_c_hat }),
                Err(e) => log::warn!("{e}"),
            }
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("fss needs fss.sweep_csv or fss.thresholds_csv".into()));
    }
    let fit = experiments::finite_size_fit(&points)?;
    experiments::write_fss_csv(&out.join("fss.csv"), &fit)?;
    write_json(&out.join("fss.json"), &fit)?;
    log::info!("slope {:.6}, intercept {:.6}", fit.slope, fit.intercept);
    finish(out, "fss", cfg, f, vec!["fss.csv", "fss.json"])
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    d: usize,
    p: usize,
    alpha: f64,
    kappa: f64,
    report: &'a assocmem::TrainReport,
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let t = &cfg.train;
    fs::create_dir_all(out)?;
    let p = p_from_alpha(t.alpha, t.d);
    let inst = sample_instance(t.d, p, t.mode, t.seed)?;
    let factored = t.factored || t.kappa < 1.0;
    let (report, model) = train_fresh(&inst, t.kappa, factored, t.seed, &t.train)?;
    write_csv(
        &out.join("trajectory.csv"),
        &["step", "loss", "accuracy"],
        report
            .loss
            .iter()
            .zip(&report.accuracy)
            .enumerate()
            .map(|(k, (&l, &a))| vec![k.to_string(), fmt_f64(l), fmt_f64(a)]),
    )?;
    write_json(&out.join("report.json"), &TrainSummary { d: t.d, p, alpha: t.alpha, kappa: t.kappa, report: &report })?;
    model.write_binary(std::io::BufWriter::new(fs::File::create(out.join("model.bin"))?))?;
    log::info!(
        "p = {p}: accuracy {} after {} steps ({})",
        report.final_accuracy(),
        report.steps_used,
        report.stop_reason.as_str()
    );
    finish(out, "train", cfg, t, vec!["trajectory.csv", "report.json", "model.bin"])
}
