//! End-to-end runs: synthesis of a cooling curve, its analysis, sweeps over
//! detuning, and the files they produce.

use std::path::Path;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::analysis::{
    detuning_sweep_summary, estimate_s, fit_cooling_curve, fit_sidebands, occupation_series, CoolingCurveResult,
    CurveOptions, Flag, OccupationPoint, SEstimate, SidebandFit, SweepSummary,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{self, FitRow, Provenance, SpectrumRecord};
use crate::physics::{
    angular_to_hz, backaction_limit, hz_to_angular, optimal_detuning, regime_boundaries, sideband_ratio,
    steady_state_occupation, thermal_occupation, CoolingPoint, SystemParams,
};
use crate::spectra::{required_averages, LaserNoiseModel, SpectrumModel, LASER_NOISE_SCALE, PEAK_CONVENTION};
use crate::synth::{noiseless_spectrum, stream_id, synthesize_spectrum, SynthConfig};

/// Derived quantities for every configured detuning.
pub fn model_report(config: &ExperimentConfig) -> Result<Value> {
    config.validate()?;
    let params = config.system_params()?;
    let n0 = thermal_occupation(config.bath_temperature_k, params.omega_m)?;
    let (delta_opt, n_ba_min) = optimal_detuning(&params);
    let mut rows = Vec::new();
    for (&d_hz, d) in config.detunings_hz.iter().zip(config.detunings()) {
        let s = sideband_ratio(d, &params)?;
        let n_ba = backaction_limit(d, &params)?;
        let b = regime_boundaries(n0, n_ba, params.gamma_0)?;
        rows.push(json!({
            "detuning_hz": d_hz,
            "s": s,
            "n_ba": n_ba,
            "regime_boundaries_hz": {
                "onset": angular_to_hz(b.onset),
                "ground_state": angular_to_hz(b.ground_state),
                "backaction": angular_to_hz(b.backaction),
                "degenerate": b.degenerate,
            },
        }));
    }
    Ok(json!({
        "parameters": serde_json::to_value(config)?,
        "n0": n0,
        "bath_temperature_k": config.bath_temperature_k,
        "optimal_detuning_hz": angular_to_hz(delta_opt),
        "n_ba_min": n_ba_min,
        "detunings": rows,
        "seed": config.seed,
        "config_hash": config.hash(),
    }))
}

/// Spectrum model at one drive point, with the configured systematics.
pub fn point_model(
    config: &ExperimentConfig,
    params: &SystemParams,
    point: &CoolingPoint,
    n_bar: f64,
) -> Result<SpectrumModel> {
    let sys = &config.systematics;
    let mut model = SpectrumModel::from_physics(params, point, n_bar, sys.background_fraction)?;
    if sys.amp_noise > 0.0 || sys.phase_noise > 0.0 {
        let laser = LaserNoiseModel {
            scale: sys.laser_noise_scale.unwrap_or(LASER_NOISE_SCALE),
        };
        let (qs, qa) = laser.contaminated_quanta(sys.amp_noise, sys.phase_noise, n_bar);
        let scale = PEAK_CONVENTION * params.efficiency / model.gamma_eff;
        model.peak_stokes = scale * point.rate_stokes_per_quantum * qs;
        model.peak_antistokes = scale * point.rate_antistokes_per_quantum * qa;
    }
    Ok(model)
}

/// Averaging count for one detuning: the configured value, or the count that
/// reaches `target_sigma_n` at the strongest drive on the clean model.
pub fn averaging_for(config: &ExperimentConfig, detuning: f64) -> Result<f64> {
    if let Some(n) = config.synthesis.n_avg {
        return Ok(n);
    }
    let params = config.system_params()?;
    let n0 = thermal_occupation(config.bath_temperature_k, params.omega_m)?;
    let g_max = config.gamma_opt_grid().into_iter().fold(0.0, f64::max);
    let point = CoolingPoint::new(&params, detuning, g_max)?;
    let n_bar = steady_state_occupation(n0, params.gamma_0, point.n_ba, g_max);
    let clean = SpectrumModel::from_physics(&params, &point, n_bar, 0.0)?;
    let (grid, _) = config.synthesis.grid.build(clean.omega_m, clean.gamma_eff)?;
    Ok(required_averages(&clean, &grid, point.s_ratio, config.synthesis.target_sigma_n)? as f64)
}

/// Synthetic spectra for one detuning of the config.
///
/// Each spectrum draws from its own RNG stream keyed by (detuning index,
/// point index), so the result does not depend on scheduling.
pub fn synthesize_curve(config: &ExperimentConfig, detuning_index: usize, noise: bool) -> Result<Vec<SpectrumRecord>> {
    config.validate()?;
    let params = config.system_params()?;
    let d_hz = *config
        .detunings_hz
        .get(detuning_index)
        .ok_or_else(|| Error::Config(format!("detuning index {detuning_index} out of range")))?;
    let detuning = hz_to_angular(d_hz);
    let n0 = thermal_occupation(config.bath_temperature_k, params.omega_m)?;
    let n_avg = averaging_for(config, detuning)?;
    let hash = config.hash();
    config
        .gamma_opt_grid_hz
        .par_iter()
        .enumerate()
        .map(|(i, &g_hz)| {
            let point = CoolingPoint::new(&params, detuning, hz_to_angular(g_hz))?;
            let n_bar = steady_state_occupation(n0, params.gamma_0, point.n_ba, point.gamma_opt);
            let model = point_model(config, &params, &point, n_bar)?;
            let synth = SynthConfig {
                n_avg,
                seed: config.seed,
                grid: config.synthesis.grid,
                oracle_duration: config.synthesis.oracle_duration_s,
                oracle_rate: config.synthesis.oracle_rate_hz,
            };
            let spectrum = if noise {
                synthesize_spectrum(&model, &synth, stream_id(detuning_index, i))?
            } else {
                noiseless_spectrum(&model, &synth)?
            };
            let (frequencies_hz, resolution_hz) = synth.grid.build_hz(model.omega_m, model.gamma_eff)?;
            Ok(SpectrumRecord {
                gamma_opt_hz: g_hz,
                n_avg,
                resolution_hz,
                detuning_hz: Some(d_hz),
                index: Some(i),
                seed: Some(config.seed),
                config_hash: Some(hash.clone()),
                frequencies_hz,
                psd: spectrum.psd,
            })
        })
        .collect()
}

/// Everything learned from one cooling curve, including partial failures.
#[derive(Debug, Clone)]
pub struct CurveAnalysis {
    pub detuning: f64,
    pub detuning_hz: f64,
    pub n_ba_predicted: f64,
    /// `(Γ_opt, n_avg, fit or error message)` per spectrum, in input order.
    pub fits: Vec<(f64, f64, std::result::Result<SidebandFit, String>)>,
    pub s_estimate: Option<SEstimate>,
    pub points: Vec<OccupationPoint>,
    pub curve: Option<CoolingCurveResult>,
    /// Stage failures with context; empty when every stage succeeded.
    pub errors: Vec<String>,
}

impl CurveAnalysis {
    pub fn failed(&self) -> bool {
        !self.errors.is_empty()
    }

    /// Thermometry result at the strongest drive.
    pub fn final_point(&self) -> Option<&OccupationPoint> {
        self.points.iter().max_by(|a, b| a.gamma_opt.total_cmp(&b.gamma_opt))
    }

    pub fn flags(&self) -> Vec<Flag> {
        let mut flags = match (&self.curve, &self.s_estimate) {
            (Some(c), _) => c.flags.clone(),
            (None, Some(s)) => s.flags.clone(),
            (None, None) => Vec::new(),
        };
        if self.failed() {
            flags.push(Flag::Failed);
        }
        flags
    }
}

/// Run the thermometry pipeline on a set of spectra taken at one detuning.
pub fn analyze_curve(config: &ExperimentConfig, detuning_hz: f64, records: &[SpectrumRecord]) -> Result<CurveAnalysis> {
    config.validate()?;
    let params = config.system_params()?;
    let detuning = hz_to_angular(detuning_hz);
    let n_ba_predicted = backaction_limit(detuning, &params)?;
    let mut errors = Vec::new();

    let fits: Vec<_> = records
        .par_iter()
        .map(|r| {
            let fit = r
                .to_spectrum()
                .and_then(|s| fit_sidebands(&s, None))
                .map_err(|e| e.to_string());
            (r.gamma_opt(), r.n_avg, fit)
        })
        .collect();
    for (i, (g, _, f)) in fits.iter().enumerate() {
        if let Err(e) = f {
            errors.push(format!("spectrum {i} (gamma_opt_hz={}): {e}", angular_to_hz(*g)));
        }
    }
    let series: Vec<(f64, SidebandFit)> = fits
        .iter()
        .filter_map(|(g, _, f)| f.as_ref().ok().map(|f| (*g, f.clone())))
        .collect();

    let mut analysis = CurveAnalysis {
        detuning,
        detuning_hz,
        n_ba_predicted,
        fits,
        s_estimate: None,
        points: Vec::new(),
        curve: None,
        errors,
    };
    let s_est = match estimate_s(&series, params.gamma_0) {
        Ok(s) => s,
        Err(e) => {
            analysis.errors.push(format!("s estimation: {e}"));
            return Ok(analysis);
        }
    };
    let measured = occupation_series(&series, &s_est);
    let mut measured = measured.into_iter();
    analysis.points = analysis
        .fits
        .iter()
        .map(|(g, _, f)| match f {
            Ok(_) => measured.next().expect("one point per successful fit"),
            Err(_) => OccupationPoint {
                gamma_opt: *g,
                ratio: f64::NAN,
                sigma_ratio: f64::NAN,
                n_bar: f64::NAN,
                sigma_n: f64::NAN,
                sigma_n_stat: f64::NAN,
                flags: vec![Flag::Failed],
            },
        })
        .collect();
    analysis.s_estimate = Some(s_est.clone());
    let options = CurveOptions {
        fit_gamma_0: config.analysis.fit_gamma_0,
    };
    match fit_cooling_curve(&analysis.points, &s_est, params.gamma_0, params.omega_m, &options) {
        Ok(c) => analysis.curve = Some(c.with_prediction(n_ba_predicted)),
        Err(e) => analysis.errors.push(format!("cooling-curve fit: {e}")),
    }
    Ok(analysis)
}

/// Synthesis followed by analysis for one detuning.
pub fn run_curve(
    config: &ExperimentConfig,
    detuning_index: usize,
    noise: bool,
) -> Result<(Vec<SpectrumRecord>, CurveAnalysis)> {
    let records = synthesize_curve(config, detuning_index, noise)?;
    let analysis = analyze_curve(config, config.detunings_hz[detuning_index], &records)?;
    Ok((records, analysis))
}

fn opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

/// The JSON report for one cooling curve.
pub fn curve_report(config: &ExperimentConfig, analysis: &CurveAnalysis) -> Result<Value> {
    let s = analysis.s_estimate.as_ref();
    let c = analysis.curve.as_ref();
    let fin = analysis.final_point();
    let classical = s.and_then(|s| s.classical.as_ref());
    let ratio_fit = s.and_then(|s| s.curve.as_ref());
    Ok(json!({
        "parameters": serde_json::to_value(config)?,
        "detuning_hz": analysis.detuning_hz,
        "estimates": {
            "s_hat": opt(s.map(|s| s.s_hat)),
            "s_classical_mean": opt(classical.map(|a| a.s)),
            "s_classical_points": classical.map(|a| a.points),
            "ratio_curve_n0": opt(ratio_fit.map(|r| r.n0)),
            "ratio_curve_n_ba": opt(ratio_fit.map(|r| r.n_ba)),
            "n0": opt(c.map(|c| c.n0_fit)),
            "n_ba": opt(c.map(|c| c.n_ba_fit)),
            "t0_k": opt(c.map(|c| c.t0_fit)),
            "gamma_0_hz": opt(c.map(|c| angular_to_hz(c.gamma_0))),
            "n_ba_predicted": analysis.n_ba_predicted,
            "final_gamma_opt_hz": opt(fin.map(|p| angular_to_hz(p.gamma_opt))),
            "final_n_bar": opt(fin.map(|p| p.n_bar)),
            "chi2": opt(c.map(|c| c.chi2)),
            "dof": c.map(|c| c.dof),
        },
        "uncertainties": {
            "s_hat": opt(s.map(|s| s.sigma_s)),
            "s_classical_mean": opt(classical.map(|a| a.sigma)),
            "n0": opt(c.map(|c| c.sigma_n0)),
            "n_ba": opt(c.map(|c| c.sigma_n_ba)),
            "n0_n_ba_correlation": opt(c.map(|c| c.correlation)),
            "t0_k": opt(c.map(|c| c.sigma_t0)),
            "gamma_0_hz": opt(c.and_then(|c| c.sigma_gamma_0).map(angular_to_hz)),
            "final_n_bar": opt(fin.map(|p| p.sigma_n)),
        },
        "flags": analysis.flags().iter().map(Flag::as_str).collect::<Vec<_>>(),
        "errors": analysis.errors,
        "power_w": config.gamma_opt_per_watt_hz.map(|k| {
            analysis.fits.iter().map(|(g, _, _)| angular_to_hz(*g) / k).collect::<Vec<_>>()
        }),
        "seed": config.seed,
        "config_hash": config.hash(),
    }))
}

pub fn provenance(config: &ExperimentConfig) -> Provenance {
    Provenance {
        seed: config.seed,
        config_hash: config.hash(),
    }
}

/// Spectra go to `dir/spectra/spectrum_NNN.csv`.
pub fn write_spectra(dir: &Path, records: &[SpectrumRecord]) -> Result<Vec<std::path::PathBuf>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let path = dir
                .join("spectra")
                .join(format!("spectrum_{:03}.csv", r.index.unwrap_or(i)));
            io::write_spectrum(&path, r)?;
            Ok(path)
        })
        .collect()
}

/// `points.csv`, `fits.csv` and `report.json` for one curve.
pub fn write_curve_outputs(dir: &Path, config: &ExperimentConfig, analysis: &CurveAnalysis) -> Result<()> {
    let prov = provenance(config);
    io::write_points(&dir.join("points.csv"), &analysis.points, &prov)?;
    let rows: Vec<FitRow<'_>> = analysis
        .fits
        .iter()
        .map(|(g, n, f)| FitRow {
            gamma_opt: *g,
            n_avg: *n,
            fit: f.as_ref().map_err(String::as_str),
        })
        .collect();
    io::write_fits(&dir.join("fits.csv"), &rows, &prov)?;
    io::write_json(&dir.join("report.json"), &curve_report(config, analysis)?)
}

/// One detuning of a sweep: its analysis, or the error that stopped it.
pub type SweepEntry = std::result::Result<(Vec<SpectrumRecord>, CurveAnalysis), String>;

#[derive(Debug)]
pub struct SweepRun {
    pub entries: Vec<SweepEntry>,
    pub summary: SweepSummary,
}

impl SweepRun {
    pub fn any_failed(&self) -> bool {
        self.entries
            .iter()
            .any(|e| e.as_ref().map_or(true, |(_, a)| a.failed()))
    }
}

/// Every configured detuning, run in parallel on `jobs` threads (all cores
/// when `None`). Output order and content do not depend on `jobs`.
pub fn run_sweep(config: &ExperimentConfig, noise: bool, jobs: Option<usize>) -> Result<SweepRun> {
    config.validate()?;
    let params = config.system_params()?;
    let work = || -> Vec<SweepEntry> {
        (0..config.detunings_hz.len())
            .into_par_iter()
            .map(|k| run_curve(config, k, noise).map_err(|e| e.to_string()))
            .collect()
    };
    let entries = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("jobs: {e}")))?
            .install(work),
        None => work(),
    };
    let keyed: Vec<(f64, Option<CoolingCurveResult>)> = config
        .detunings()
        .into_iter()
        .zip(&entries)
        .map(|(d, e)| (d, e.as_ref().ok().and_then(|(_, a)| a.curve.clone())))
        .collect();
    let summary = detuning_sweep_summary(&keyed, &params)?;
    Ok(SweepRun { entries, summary })
}

pub fn sweep_report(config: &ExperimentConfig, run: &SweepRun) -> Result<Value> {
    let (delta_opt, n_ba_min) = optimal_detuning(&config.system_params()?);
    let rows: Vec<Value> = run
        .summary
        .rows
        .iter()
        .zip(&run.entries)
        .zip(&config.detunings_hz)
        .map(|((r, e), &d_hz)| {
            json!({
                "detuning_hz": d_hz,
                "n_ba_fit": r.n_ba_fit,
                "sigma_n_ba": r.sigma_n_ba,
                "min_n_bar": r.min_n_bar,
                "sigma_min_n_bar": r.sigma_min_n_bar,
                "n_ba_predicted": r.n_ba_predicted,
                "flags": r.flags.iter().map(Flag::as_str).collect::<Vec<_>>(),
                "errors": match e {
                    Ok((_, a)) => a.errors.clone(),
                    Err(msg) => vec![msg.clone()],
                },
            })
        })
        .collect();
    Ok(json!({
        "parameters": serde_json::to_value(config)?,
        "estimates": {
            "rows": rows,
            "fitted_minimum_detuning_hz": opt(run.summary.fitted_minimum.map(|i| config.detunings_hz[i])),
            "predicted_minimum_detuning_hz": opt(run.summary.predicted_minimum.map(|i| config.detunings_hz[i])),
            "optimal_detuning_hz": angular_to_hz(delta_opt),
            "n_ba_min": n_ba_min,
        },
        "uncertainties": {
            "rows": run.summary.rows.iter().map(|r| json!({"n_ba_fit": r.sigma_n_ba, "min_n_bar": r.sigma_min_n_bar})).collect::<Vec<_>>(),
        },
        "flags": run.summary.flags.iter().map(Flag::as_str).collect::<Vec<_>>(),
        "seed": config.seed,
        "config_hash": config.hash(),
    }))
}

/// Per-detuning directories `detuning_KK/` plus `sweep.csv` and `sweep.json`.
pub fn write_sweep_outputs(dir: &Path, config: &ExperimentConfig, run: &SweepRun) -> Result<()> {
    for (k, entry) in run.entries.iter().enumerate() {
        if let Ok((records, analysis)) = entry {
            let sub = dir.join(format!("detuning_{k:02}"));
            write_spectra(&sub, records)?;
            write_curve_outputs(&sub, config, analysis)?;
        }
    }
    io::write_sweep(
        &dir.join("sweep.csv"),
        &run.summary,
        &config.detunings_hz,
        &provenance(config),
    )?;
    io::write_json(&dir.join("sweep.json"), &sweep_report(config, run)?)
}

/// Read spectra written by [`write_spectra`] (or by hand) for analysis.
///
/// The detuning comes from the files when they carry one; otherwise
/// `fallback_detuning_hz` is used. All files must agree.
pub fn load_records(paths: &[std::path::PathBuf], fallback_detuning_hz: f64) -> Result<(f64, Vec<SpectrumRecord>)> {
    let records = paths.iter().map(|p| io::read_spectrum(p)).collect::<Result<Vec<_>>>()?;
    let mut detuning = None;
    for (r, p) in records.iter().zip(paths) {
        if let Some(d) = r.detuning_hz {
            match detuning {
                None => detuning = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Config(format!(
                        "{}: detuning_hz={d} disagrees with {prev} from earlier files",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
    }
    Ok((detuning.unwrap_or(fallback_detuning_hz), records))
}
