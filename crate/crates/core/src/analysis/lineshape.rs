use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{fit_reweighted, LmOptions};
use crate::spectra::HeterodyneSpectrum;

/// Single Lorentzian over a flat floor. Parameter order: centre, Γ, peak, floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    pub center: f64,
    pub gamma: f64,
    pub peak: f64,
    pub floor: f64,
    pub covariance: [[f64; 4]; 4],
    pub converged: bool,
}

impl LorentzianFit {
    /// ∫ (psd − floor) dω.
    pub fn area(&self) -> f64 {
        std::f64::consts::FRAC_PI_2 * self.gamma * self.peak
    }
}

/// Fit one Lorentzian line, used to check the time-domain oracle.
///
/// Bins are weighted by the periodogram variance `m²/n_avg` as in
/// [`super::fit_sidebands`]. The floor is bounded at zero.
pub fn fit_lorentzian(spectrum: &HeterodyneSpectrum) -> Result<LorentzianFit> {
    spectrum.validate()?;
    let f = &spectrum.frequencies;
    let y = &spectrum.psd;
    if y.len() <= 4 {
        return Err(Error::Coverage(format!("{} bins cannot constrain a line", y.len())));
    }
    let peak_at = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
    let mut sorted = y.clone();
    sorted.sort_by(f64::total_cmp);
    let floor0 = sorted[sorted.len() / 10];
    let amp0 = y[peak_at] - floor0;
    if !(amp0 > 0.0) {
        return Err(Error::InsufficientVisibility { snr: 0.0 });
    }
    let half = floor0 + 0.5 * amp0;
    let lo = (0..peak_at).rev().find(|&i| y[i] < half).unwrap_or(0);
    let hi = (peak_at..y.len()).find(|&i| y[i] < half).unwrap_or(y.len() - 1);
    let c0 = f[peak_at];
    let g0 = (f[hi] - f[lo]).max(spectrum.resolution);

    let d: Vec<f64> = f.iter().map(|w| (w - c0) / g0).collect();
    let model = |p: &DVector<f64>, k: usize, grad: &mut [f64]| -> f64 {
        let h = 0.5 * p[1];
        let h2 = h * h;
        let x = d[k] - p[0];
        let q = x * x + h2;
        let l = h2 / q;
        grad[0] = p[2] * 2.0 * x * h2 / (q * q);
        grad[1] = p[2] * h / q * (1.0 - l);
        grad[2] = l;
        grad[3] = 1.0;
        p[3] + p[2] * l
    };
    let floor_min = 1e-9 * amp0;
    let options = LmOptions {
        lower_bounds: Some(vec![f64::NEG_INFINITY, 1e-6, 0.0, floor_min]),
        ..LmOptions::default()
    };
    let start = DVector::from_vec(vec![0.0, 1.0, amp0, floor0.max(floor_min)]);
    let out = fit_reweighted(model, y, spectrum.n_avg, start, &options, 50)
        .ok_or_else(|| Error::Fit("starting point outside the model domain".into()))?;
    let p = &out.lm.params;
    let scale = [g0, g0, 1.0, 1.0];
    let mut covariance = [[f64::NAN; 4]; 4];
    if let Some(c) = out.lm.covariance() {
        for (i, row) in covariance.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = scale[i] * scale[j] * c[(i, j)];
            }
        }
    }
    Ok(LorentzianFit {
        center: c0 + p[0] * g0,
        gamma: p[1] * g0,
        peak: p[2],
        floor: p[3],
        covariance,
        converged: out.converged,
    })
}
