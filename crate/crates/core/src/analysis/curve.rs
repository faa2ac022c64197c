use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::{Flag, OccupationPoint, SEstimate};
use crate::error::{Error, Result};
use crate::lm::{minimize, LmOptions};
use crate::physics::{backaction_limit, steady_state_occupation, temperature_from_occupation, SystemParams};

/// |Δ| below this fraction of ω_m is reported as near the n_ba divergence.
pub const NEAR_DIVERGENCE_FRACTION: f64 = 0.1;

/// Relative uncertainty above which a curve parameter is reported unresolved.
const IDENTIFIABLE_REL_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveOptions {
    /// Fit Γ₀ jointly instead of holding it at the supplied value.
    pub fit_gamma_0: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoolingCurveResult {
    pub points: Vec<OccupationPoint>,
    pub s_hat: f64,
    pub sigma_s: f64,
    pub n0_fit: f64,
    pub sigma_n0: f64,
    pub n_ba_fit: f64,
    pub sigma_n_ba: f64,
    pub correlation: f64,
    pub gamma_0: f64,
    /// Present when Γ₀ was fitted.
    pub sigma_gamma_0: Option<f64>,
    pub t0_fit: f64,
    pub sigma_t0: f64,
    /// Backaction limit from the detuning, when known.
    pub n_ba_predicted: Option<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub flags: Vec<Flag>,
}

impl CoolingCurveResult {
    /// Fitted occupation at drive strength `gamma_opt`.
    pub fn predict(&self, gamma_opt: f64) -> f64 {
        steady_state_occupation(self.n0_fit, self.gamma_0, self.n_ba_fit, gamma_opt)
    }

    pub fn with_prediction(mut self, n_ba_predicted: f64) -> Self {
        self.n_ba_predicted = Some(n_ba_predicted);
        self
    }

    /// Lowest measured physical occupation and its uncertainty.
    pub fn min_measured(&self) -> Option<(f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.is_physical())
            .map(|p| (p.n_bar, p.sigma_n))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

struct Linear {
    n0: f64,
    nb: f64,
    cov: Matrix2<f64>,
    chi2: f64,
}

/// Weighted linear least squares of n̄ = n₀·u + n_ba·v with u = Γ₀/(Γ₀+Γ),
/// v = Γ/(Γ₀+Γ).
fn solve_linear(g: &[f64], n: &[f64], sigma: &[f64], gamma_0: f64) -> Option<Linear> {
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for i in 0..g.len() {
        let u = gamma_0 / (gamma_0 + g[i]);
        let v = g[i] / (gamma_0 + g[i]);
        let w = 1.0 / (sigma[i] * sigma[i]);
        let a = Vector2::new(u, v);
        ata += w * a * a.transpose();
        atb += w * n[i] * a;
    }
    let cov = ata.try_inverse()?;
    let x = cov * atb;
    let chi2 = (0..g.len())
        .map(|i| {
            let m = steady_state_occupation(x[0], gamma_0, x[1], g[i]);
            ((n[i] - m) / sigma[i]).powi(2)
        })
        .sum();
    Some(Linear {
        n0: x[0],
        nb: x[1],
        cov,
        chi2,
    })
}

/// Weighted fit of the rate equation to thermometry points.
///
/// Only physical points with a finite uncertainty enter. Weights use the
/// statistical part of σ_n, rescaled to the fitted curve on each pass
/// (σ_n grows roughly as n̄² at fixed ratio precision) so that a point
/// which fluctuated low does not also gain weight.
pub fn fit_cooling_curve(
    points: &[OccupationPoint],
    s: &SEstimate,
    gamma_0: f64,
    omega_m: f64,
    options: &CurveOptions,
) -> Result<CoolingCurveResult> {
    let valid: Vec<&OccupationPoint> = points
        .iter()
        .filter(|p| p.is_physical() && p.n_bar.is_finite() && p.sigma_n_stat.is_finite() && p.sigma_n_stat > 0.0)
        .collect();
    if valid.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "cooling-curve fit needs at least 4 valid points, got {}",
            valid.len()
        )));
    }
    let g: Vec<f64> = valid.iter().map(|p| p.gamma_opt).collect();
    let n: Vec<f64> = valid.iter().map(|p| p.n_bar).collect();
    let base: Vec<f64> = valid.iter().map(|p| p.sigma_n_stat).collect();

    let mut sigma = base.clone();
    let mut lin = solve_linear(&g, &n, &sigma, gamma_0).ok_or_else(|| Error::Fit("singular design".into()))?;
    for _ in 0..20 {
        for i in 0..g.len() {
            let m = steady_state_occupation(lin.n0, gamma_0, lin.nb, g[i]);
            let k = (m / n[i]).clamp(0.5, 2.0);
            sigma[i] = base[i] * k * k;
        }
        let next = solve_linear(&g, &n, &sigma, gamma_0).ok_or_else(|| Error::Fit("singular design".into()))?;
        let settled =
            (next.n0 - lin.n0).abs() <= 1e-12 * lin.n0.abs() && (next.nb - lin.nb).abs() <= 1e-12 * lin.nb.abs();
        lin = next;
        if settled {
            break;
        }
    }

    let (mut n0, mut nb) = (lin.n0, lin.nb);
    let (mut var_n0, mut var_nb, mut cov_01) = (lin.cov[(0, 0)], lin.cov[(1, 1)], lin.cov[(0, 1)]);
    let mut chi2 = lin.chi2;
    let mut g0 = gamma_0;
    let mut sigma_gamma_0 = None;
    let mut dof = g.len() - 2;

    if options.fit_gamma_0 {
        let m = g.len();
        let eval = |p: &DVector<f64>| -> Option<(DVector<f64>, DMatrix<f64>)> {
            let (a, b, gz) = (p[0], p[1], p[2].exp());
            let mut r = DVector::zeros(m);
            let mut j = DMatrix::zeros(m, 3);
            for i in 0..m {
                let d = gz + g[i];
                let f = (a * gz + b * g[i]) / d;
                let w = 1.0 / sigma[i];
                r[i] = w * (n[i] - f);
                j[(i, 0)] = w * gz / d;
                j[(i, 1)] = w * g[i] / d;
                j[(i, 2)] = w * gz * (a - f) / d;
            }
            Some((r, j))
        };
        let start = DVector::from_vec(vec![n0, nb, gamma_0.ln()]);
        let out = minimize(eval, start, &LmOptions::default()).ok_or_else(|| Error::Fit("Γ₀ fit failed".into()))?;
        if !out.converged {
            return Err(Error::Fit("joint Γ₀ fit did not converge".into()));
        }
        let c = out.covariance().ok_or_else(|| Error::Fit("singular Γ₀ fit".into()))?;
        n0 = out.params[0];
        nb = out.params[1];
        g0 = out.params[2].exp();
        var_n0 = c[(0, 0)];
        var_nb = c[(1, 1)];
        cov_01 = c[(0, 1)];
        sigma_gamma_0 = Some(g0 * c[(2, 2)].sqrt());
        chi2 = out.chi2;
        dof = g.len().saturating_sub(3);
    }

    let sigma_n0 = var_n0.sqrt();
    let sigma_n_ba = var_nb.sqrt();
    let t0_fit = if n0 > 0.0 {
        temperature_from_occupation(n0, omega_m)?
    } else {
        f64::NAN
    };

    let mut flags = s.flags.clone();
    let (g_min, g_max) = g
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if g_max < 10.0 * g_min {
        flags.push(Flag::DegenerateSpan);
    }
    let classical_only = n0 > 0.0 && g_max < n0 * g0;
    if classical_only {
        flags.push(Flag::ClassicalRegimeOnly);
    }
    if classical_only || !(sigma_n_ba < IDENTIFIABLE_REL_SIGMA * nb.abs()) {
        flags.push(Flag::NbaUnidentifiable);
    }
    if !(sigma_n0 < IDENTIFIABLE_REL_SIGMA * n0.abs()) {
        flags.push(Flag::N0Unidentifiable);
    }
    if nb > 0.0 && n0 > 0.0 && g_max >= n0 / nb * g0 {
        flags.push(Flag::BackactionLimited);
    }

    Ok(CoolingCurveResult {
        points: points.to_vec(),
        s_hat: s.s_hat,
        sigma_s: s.sigma_s,
        n0_fit: n0,
        sigma_n0,
        n_ba_fit: nb,
        sigma_n_ba,
        correlation: cov_01 / (sigma_n0 * sigma_n_ba),
        gamma_0: g0,
        sigma_gamma_0,
        t0_fit,
        sigma_t0: t0_fit * sigma_n0 / n0,
        n_ba_predicted: None,
        chi2,
        dof,
        flags,
    })
}

/// One detuning of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub detuning: f64,
    pub n_ba_fit: f64,
    pub sigma_n_ba: f64,
    pub min_n_bar: f64,
    pub sigma_min_n_bar: f64,
    pub n_ba_predicted: f64,
    pub flags: Vec<Flag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Row with the lowest fitted backaction limit.
    pub fitted_minimum: Option<usize>,
    /// Row with the lowest predicted backaction limit.
    pub predicted_minimum: Option<usize>,
    pub flags: Vec<Flag>,
}

/// Fitted saturation level against the predicted backaction limit per detuning.
///
/// Failed detunings keep their row, with NaN estimates and a `failed` flag.
pub fn detuning_sweep_summary(
    results: &[(f64, Option<CoolingCurveResult>)],
    params: &SystemParams,
) -> Result<SweepSummary> {
    let mut rows = Vec::with_capacity(results.len());
    for (detuning, result) in results {
        let predicted = backaction_limit(*detuning, params)?;
        let mut flags = Vec::new();
        if detuning.abs() < NEAR_DIVERGENCE_FRACTION * params.omega_m {
            flags.push(Flag::NearDivergence);
        }
        let row = match result {
            Some(r) => {
                let (min_n_bar, sigma_min_n_bar) = r.min_measured().unwrap_or((f64::NAN, f64::NAN));
                flags.extend(r.flags.iter().copied());
                SweepRow {
                    detuning: *detuning,
                    n_ba_fit: r.n_ba_fit,
                    sigma_n_ba: r.sigma_n_ba,
                    min_n_bar,
                    sigma_min_n_bar,
                    n_ba_predicted: predicted,
                    flags,
                }
            }
            None => {
                flags.push(Flag::Failed);
                SweepRow {
                    detuning: *detuning,
                    n_ba_fit: f64::NAN,
                    sigma_n_ba: f64::NAN,
                    min_n_bar: f64::NAN,
                    sigma_min_n_bar: f64::NAN,
                    n_ba_predicted: predicted,
                    flags,
                }
            }
        };
        rows.push(row);
    }
    let argmin = |key: fn(&SweepRow) -> f64| {
        (0..rows.len())
            .filter(|&i| key(&rows[i]).is_finite())
            .min_by(|&a, &b| key(&rows[a]).total_cmp(&key(&rows[b])))
    };
    let fitted_minimum = argmin(|r| r.n_ba_fit);
    let predicted_minimum = argmin(|r| r.n_ba_predicted);
    let mut flags = Vec::new();
    if rows.len() < 3 {
        flags.push(Flag::DegenerateSweep);
    }
    Ok(SweepSummary {
        rows,
        fitted_minimum,
        predicted_minimum,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{hz_to_angular, thermal_occupation};

    fn s_estimate() -> SEstimate {
        SEstimate {
            s_hat: 0.1513,
            sigma_s: 0.0,
            curve: None,
            classical: None,
            flags: vec![],
        }
    }

    fn synthetic_points(n0: f64, nb: f64, g0: f64, grid: &[f64]) -> Vec<OccupationPoint> {
        grid.iter()
            .map(|&g| {
                let n = steady_state_occupation(n0, g0, nb, g);
                OccupationPoint {
                    gamma_opt: g,
                    ratio: 0.1513 * (1.0 + 1.0 / n),
                    sigma_ratio: 1e-3,
                    n_bar: n,
                    sigma_n: 0.05 * n,
                    sigma_n_stat: 0.05 * n,
                    flags: vec![],
                }
            })
            .collect()
    }

    fn log_grid(lo_hz: f64, hi_hz: f64, count: usize) -> Vec<f64> {
        (0..count)
            .map(|i| hz_to_angular(lo_hz * (hi_hz / lo_hz).powf(i as f64 / (count - 1) as f64)))
            .collect()
    }

    #[test]
    fn noiseless_curve_round_trip() {
        let p = SystemParams::membrane_device();
        let n0 = thermal_occupation(0.36, p.omega_m).unwrap();
        let pts = synthetic_points(n0, 0.178, p.gamma_0, &log_grid(1.0, 3e4, 20));
        let r = fit_cooling_curve(&pts, &s_estimate(), p.gamma_0, p.omega_m, &CurveOptions::default()).unwrap();
        assert!((r.n0_fit / n0 - 1.0).abs() < 1e-9);
        assert!((r.n_ba_fit / 0.178 - 1.0).abs() < 1e-9);
        assert!((r.t0_fit - 0.36).abs() < 1e-9);
        assert!(r.flags.contains(&Flag::BackactionLimited));
        assert!(!r.flags.contains(&Flag::NbaUnidentifiable));
        // Monotone decreasing and saturating at the fitted floor.
        let grid = log_grid(1.0, 1e9, 50);
        for w in grid.windows(2) {
            assert!(r.predict(w[1]) < r.predict(w[0]));
        }
        assert!((r.predict(hz_to_angular(1e12)) / r.n_ba_fit - 1.0).abs() < 1e-6);
    }

    #[test]
    fn joint_gamma_0_fit() {
        let p = SystemParams::membrane_device();
        let n0 = thermal_occupation(0.36, p.omega_m).unwrap();
        let pts = synthetic_points(n0, 0.178, p.gamma_0, &log_grid(0.05, 3e4, 20));
        let r = fit_cooling_curve(
            &pts,
            &s_estimate(),
            1.5 * p.gamma_0,
            p.omega_m,
            &CurveOptions { fit_gamma_0: true },
        )
        .unwrap();
        assert!((r.gamma_0 / p.gamma_0 - 1.0).abs() < 1e-6);
        assert!(r.sigma_gamma_0.is_some());
    }

    #[test]
    fn classical_only_grid_is_flagged() {
        let p = SystemParams::membrane_device();
        let n0 = thermal_occupation(0.36, p.omega_m).unwrap();
        let pts = synthetic_points(n0, 0.178, p.gamma_0, &log_grid(1.0, 900.0, 10));
        let r = fit_cooling_curve(&pts, &s_estimate(), p.gamma_0, p.omega_m, &CurveOptions::default()).unwrap();
        assert!(r.flags.contains(&Flag::ClassicalRegimeOnly));
        assert!(r.flags.contains(&Flag::NbaUnidentifiable));
    }

    #[test]
    fn narrow_span_is_flagged() {
        let p = SystemParams::membrane_device();
        let pts = synthetic_points(5000.0, 0.178, p.gamma_0, &log_grid(1e3, 5e3, 6));
        let r = fit_cooling_curve(&pts, &s_estimate(), p.gamma_0, p.omega_m, &CurveOptions::default()).unwrap();
        assert!(r.flags.contains(&Flag::DegenerateSpan));
    }

    #[test]
    fn unphysical_points_excluded() {
        let p = SystemParams::membrane_device();
        let mut pts = synthetic_points(5000.0, 0.178, p.gamma_0, &log_grid(1.0, 3e4, 6));
        pts[5].flags.push(Flag::Unphysical);
        pts[5].n_bar = -3.0;
        let r = fit_cooling_curve(&pts, &s_estimate(), p.gamma_0, p.omega_m, &CurveOptions::default()).unwrap();
        assert_eq!(r.points.len(), 6);
        assert_eq!(r.dof, 3);
        assert!((r.n_ba_fit / 0.178 - 1.0).abs() < 1e-6);
        pts[4].flags.push(Flag::Unphysical);
        pts[3].flags.push(Flag::Unphysical);
        assert!(matches!(
            fit_cooling_curve(&pts, &s_estimate(), p.gamma_0, p.omega_m, &CurveOptions::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn sweep_summary_rows() {
        let p = SystemParams::membrane_device();
        let dets: Vec<f64> = [-0.5e6, -1.0e6, -1.62e6, -1.97e6, -2.5e6, -0.05e6]
            .iter()
            .map(|&d| hz_to_angular(d))
            .collect();
        let results: Vec<_> = dets.iter().map(|&d| (d, None)).collect();
        let summary = detuning_sweep_summary(&results, &p).unwrap();
        assert_eq!(summary.rows.len(), 6);
        assert_eq!(summary.predicted_minimum, Some(3));
        assert_eq!(summary.fitted_minimum, None);
        assert!(summary.rows.iter().all(|r| r.flags.contains(&Flag::Failed)));
        assert!(summary.rows[5].flags.contains(&Flag::NearDivergence));
        assert!(!summary.rows[0].flags.contains(&Flag::NearDivergence));
        let expected = [0.895, 0.3244, 0.178, 0.1655, 0.184, 12.62];
        for (row, e) in summary.rows.iter().zip(expected) {
            assert!(
                (row.n_ba_predicted - e).abs() < 5e-3 * e,
                "{} vs {e}",
                row.n_ba_predicted
            );
        }
        let single = detuning_sweep_summary(&results[..1], &p).unwrap();
        assert!(single.flags.contains(&Flag::DegenerateSweep));
    }
}
