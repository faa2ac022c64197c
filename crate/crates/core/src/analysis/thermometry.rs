use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Flag, SidebandFit};
use crate::error::{Error, Result};
use crate::lm::{minimize, LmOptions};

/// Provisional occupation above which `(n̄+1)/n̄` is within 2% of one.
pub const CLASSICAL_THRESHOLD: f64 = 50.0;

/// Global fit of `R(Γ_opt) = s·(1 + 1/n̄(Γ_opt))` with the rate equation
/// substituted for n̄. Covariance order: s, n₀, n_ba.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioCurveFit {
    pub s: f64,
    pub n0: f64,
    pub n_ba: f64,
    pub covariance: [[f64; 3]; 3],
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalMean {
    pub s: f64,
    pub sigma: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SEstimate {
    pub s_hat: f64,
    pub sigma_s: f64,
    pub curve: Option<RatioCurveFit>,
    pub classical: Option<ClassicalMean>,
    pub flags: Vec<Flag>,
}

fn occupation(n0: f64, n_ba: f64, gamma_0: f64, gamma_opt: f64) -> f64 {
    (n0 * gamma_0 + n_ba * gamma_opt) / (gamma_0 + gamma_opt)
}

fn fit_ratio_curve(g: &[f64], r: &[f64], sigma: &[f64], gamma_0: f64, s_start: f64) -> Option<RatioCurveFit> {
    let n = g.len();
    let eval = |p: &DVector<f64>| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let (s, n0, nb) = (p[0], p[1].exp(), p[2].exp());
        let mut res = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, 3);
        for i in 0..n {
            let nbar = occupation(n0, nb, gamma_0, g[i]);
            if !(nbar > 0.0) || !nbar.is_finite() {
                return None;
            }
            let f = s * (1.0 + 1.0 / nbar);
            let dn = -s / (nbar * nbar);
            let w = 1.0 / sigma[i];
            res[i] = w * (r[i] - f);
            jac[(i, 0)] = w * (1.0 + 1.0 / nbar);
            jac[(i, 1)] = w * dn * n0 * gamma_0 / (gamma_0 + g[i]);
            jac[(i, 2)] = w * dn * nb * g[i] / (gamma_0 + g[i]);
        }
        Some((res, jac))
    };
    let options = LmOptions {
        max_iterations: 500,
        gradient_tolerance: 1e-8,
        lower_bounds: Some(vec![1e-12, -50.0, -50.0]),
    };
    let mut best: Option<crate::lm::LmOutcome> = None;
    for ln0 in [1e1f64, 1e2, 1e3, 1e4, 1e5] {
        for lnb in [1e-2f64, 0.1, 1.0, 10.0] {
            let start = DVector::from_vec(vec![s_start, ln0.ln(), lnb.ln()]);
            if let Some(out) = minimize(&eval, start, &options) {
                let better = match &best {
                    None => true,
                    Some(b) => out.chi2 < b.chi2 - 1e-12 * b.chi2.abs(),
                };
                if better {
                    best = Some(out);
                }
            }
        }
    }
    let out = best?;
    let p = &out.params;
    let scale = [1.0, p[1].exp(), p[2].exp()];
    let mut covariance = [[f64::NAN; 3]; 3];
    if let Some(c) = out.covariance() {
        for (i, row) in covariance.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = scale[i] * scale[j] * c[(i, j)];
            }
        }
    }
    Some(RatioCurveFit {
        s: p[0],
        n0: scale[1],
        n_ba: scale[2],
        covariance,
        chi2: out.chi2,
        dof: n.saturating_sub(3),
        converged: out.converged,
    })
}

/// Susceptibility ratio from a cooling series of `(Γ_opt, fit)` pairs.
///
/// The primary value is the global ratio-curve fit, which extrapolates the
/// data to Γ_opt = 0. The mean of R over points with provisional n̄ above
/// [`CLASSICAL_THRESHOLD`] is reported alongside; it carries a positive bias
/// of up to 2% of s by construction.
pub fn estimate_s(series: &[(f64, SidebandFit)], gamma_0: f64) -> Result<SEstimate> {
    if series.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "s extrapolation needs at least 3 points, got {}",
            series.len()
        )));
    }
    let mut g = Vec::new();
    let mut r = Vec::new();
    let mut sig = Vec::new();
    for (gamma_opt, fit) in series {
        let ratio = fit.ratio();
        let sr = fit.ratio_variance().sqrt();
        if ratio.is_finite() && sr.is_finite() && sr > 0.0 {
            g.push(*gamma_opt);
            r.push(ratio);
            sig.push(sr);
        }
    }
    if g.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "only {} points have a finite ratio uncertainty",
            g.len()
        )));
    }
    let mut flags = Vec::new();

    let lowest = (0..g.len()).min_by(|&a, &b| g[a].total_cmp(&g[b])).unwrap();
    let curve = fit_ratio_curve(&g, &r, &sig, gamma_0, r[lowest]);
    // A flat series pins s·(1 + 1/n₀) but not s and n₀ separately.
    let resolved = curve.as_ref().filter(|c| {
        c.converged && c.s < 1.0 && c.covariance[0][0].is_finite() && c.covariance[1][1].sqrt() < 0.5 * c.n0
    });

    let s_ref = resolved.map_or_else(|| r.iter().copied().fold(f64::INFINITY, f64::min), |c| c.s);
    let (mut sw, mut swr, mut count) = (0.0, 0.0, 0);
    for i in 0..g.len() {
        let provisional = s_ref / (r[i] - s_ref);
        if r[i] >= s_ref && provisional > CLASSICAL_THRESHOLD {
            let w = 1.0 / (sig[i] * sig[i]);
            sw += w;
            swr += w * r[i];
            count += 1;
        }
    }
    let classical = (count > 0).then(|| ClassicalMean {
        s: swr / sw,
        sigma: sw.sqrt().recip(),
        points: count,
    });
    if classical.is_none() {
        flags.push(Flag::ClassicalEstimatorUnavailable);
    }

    let (s_hat, sigma_s) = match (resolved, &classical) {
        (Some(c), _) => (c.s, c.covariance[0][0].sqrt()),
        (None, Some(a)) => (a.s, a.sigma),
        (None, None) => return Err(Error::Fit("neither s estimator is available".into())),
    };
    if resolved.is_none() {
        flags.push(Flag::N0Unidentifiable);
    }
    if let (Some(c), Some(a)) = (resolved, &classical) {
        let combined = (c.covariance[0][0] + a.sigma * a.sigma).sqrt();
        if (c.s - a.s).abs() > 3.0 * combined {
            flags.push(Flag::EstimatorDisagreement);
        }
    }
    Ok(SEstimate {
        s_hat,
        sigma_s,
        curve,
        classical,
        flags,
    })
}

/// One thermometry result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationPoint {
    pub gamma_opt: f64,
    pub ratio: f64,
    pub sigma_ratio: f64,
    /// `s/(R − s)`; not a physical occupation when flagged unphysical.
    pub n_bar: f64,
    /// Propagated from both R and ŝ.
    pub sigma_n: f64,
    /// Propagated from R alone; ŝ shifts every point together.
    pub sigma_n_stat: f64,
    pub flags: Vec<Flag>,
}

impl OccupationPoint {
    pub fn is_physical(&self) -> bool {
        !self.flags.contains(&Flag::Unphysical)
    }
}

/// Per-point occupation from the measured ratio and ŝ.
pub fn occupation_series(series: &[(f64, SidebandFit)], s: &SEstimate) -> Vec<OccupationPoint> {
    let sh = s.s_hat;
    series
        .iter()
        .map(|(gamma_opt, fit)| {
            let ratio = fit.ratio();
            let sigma_ratio = fit.ratio_variance().sqrt();
            let d = ratio - sh;
            let n_bar = sh / d;
            let d4 = d.powi(4);
            let stat = sh * sh * sigma_ratio * sigma_ratio / d4;
            let total = stat + ratio * ratio * s.sigma_s * s.sigma_s / d4;
            let mut flags = Vec::new();
            if !(ratio > sh) {
                flags.push(Flag::Unphysical);
            }
            OccupationPoint {
                gamma_opt: *gamma_opt,
                ratio,
                sigma_ratio,
                n_bar,
                sigma_n: total.sqrt(),
                sigma_n_stat: stat.sqrt(),
                flags,
            }
        })
        .collect()
}
