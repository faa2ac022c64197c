use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{fit_reweighted, LmOptions};
use crate::spectra::{lorentzian, HeterodyneSpectrum, SpectrumModel, N_PARAMS};

const SMOOTHING_BINS: usize = 7;
const MAX_REWEIGHTS: usize = 50;

/// Result of the simultaneous fit to both sidebands.
///
/// Parameter order in `covariance`: ω_m, Γ_eff, A_S, A_aS, floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidebandFit {
    pub omega_m_fit: f64,
    pub gamma_eff_fit: f64,
    pub amp_stokes: f64,
    pub amp_antistokes: f64,
    pub floor_fit: f64,
    pub covariance: [[f64; N_PARAMS]; N_PARAMS],
    /// χ² per degree of freedom against the averaged-periodogram variance.
    pub residual_norm: f64,
    pub iterations: usize,
}

impl SidebandFit {
    pub fn model(&self) -> SpectrumModel {
        SpectrumModel {
            center_offset: 0.0,
            omega_m: self.omega_m_fit,
            gamma_eff: self.gamma_eff_fit,
            peak_stokes: self.amp_stokes,
            peak_antistokes: self.amp_antistokes,
            floor: self.floor_fit,
            background_fraction: (self.floor_fit - 1.0).max(0.0),
        }
    }

    /// Stokes over anti-Stokes amplitude, R.
    pub fn ratio(&self) -> f64 {
        self.amp_stokes / self.amp_antistokes
    }

    /// First-order variance of R from the amplitude covariance.
    pub fn ratio_variance(&self) -> f64 {
        let c = &self.covariance;
        let (s, a) = (self.amp_stokes, self.amp_antistokes);
        let r = s / a;
        r * r * (c[2][2] / (s * s) + c[3][3] / (a * a) - 2.0 * c[2][3] / (s * a))
    }

    pub fn sigma(&self, index: usize) -> f64 {
        self.covariance[index][index].sqrt()
    }

    /// Amplitudes relative to the fitted off-resonant level.
    pub fn normalized_amplitudes(&self) -> (f64, f64) {
        (self.amp_stokes / self.floor_fit, self.amp_antistokes / self.floor_fit)
    }

    fn from_model(m: &SpectrumModel) -> Self {
        Self {
            omega_m_fit: m.omega_m,
            gamma_eff_fit: m.gamma_eff,
            amp_stokes: m.peak_stokes,
            amp_antistokes: m.peak_antistokes,
            floor_fit: m.floor,
            covariance: [[0.0; N_PARAMS]; N_PARAMS],
            residual_norm: f64::NAN,
            iterations: 0,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Running mean over `SMOOTHING_BINS`, never crossing a window gap.
fn smooth(spectrum: &HeterodyneSpectrum) -> Vec<f64> {
    let mut out = vec![0.0; spectrum.len()];
    let half = SMOOTHING_BINS / 2;
    for seg in spectrum.segments() {
        for i in seg.clone() {
            let lo = i.saturating_sub(half).max(seg.start);
            let hi = (i + half + 1).min(seg.end);
            out[i] = spectrum.psd[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
    }
    out
}

/// Deterministic starting point: the strongest (smoothed) maximum of the
/// sideband pair, the half-maximum width of the larger one, and the median
/// of the outer quarters of each acquisition window as the floor.
pub fn initial_guess(spectrum: &HeterodyneSpectrum) -> Result<SidebandFit> {
    spectrum.validate()?;
    let f = &spectrum.frequencies;
    if !f.iter().any(|&w| w < 0.0) || !f.iter().any(|&w| w > 0.0) {
        return Err(Error::Coverage("need bins on both sides of the beat note".into()));
    }
    let smoothed = smooth(spectrum);

    let mut outer = Vec::new();
    for seg in spectrum.segments() {
        let q = (seg.len() / 4).max(1);
        outer.extend_from_slice(&spectrum.psd[seg.start..seg.start + q]);
        outer.extend_from_slice(&spectrum.psd[seg.end - q..seg.end]);
    }
    let floor = median(&mut outer);

    let argmax = |neg: bool| -> usize {
        (0..f.len())
            .filter(|&i| if neg { f[i] < 0.0 } else { f[i] > 0.0 })
            .max_by(|&a, &b| smoothed[a].total_cmp(&smoothed[b]))
            .expect("both sides populated")
    };
    // The sidebands sit symmetrically about the beat note, so locate them
    // together on the mirror-summed spectrum where the grid allows it. A lone
    // noise spike on the weaker side then cannot pull the centre away.
    let mirror = |i: usize| -> Option<usize> {
        let target = -f[i];
        let j = f.partition_point(|&w| w < target);
        [j.checked_sub(1), Some(j)]
            .into_iter()
            .flatten()
            .filter(|&k| k < f.len())
            .find(|&k| (f[k] - target).abs() <= 0.5 * spectrum.resolution)
    };
    let paired = (0..f.len())
        .filter(|&i| f[i] > 0.0)
        .filter_map(|i| mirror(i).map(|j| (i, j)))
        .max_by(|a, b| (smoothed[a.0] + smoothed[a.1]).total_cmp(&(smoothed[b.0] + smoothed[b.1])));
    let (i_s, i_a) = match paired {
        Some((i, j)) => (j, i),
        None => (argmax(true), argmax(false)),
    };
    let amp_s = (smoothed[i_s] - floor).max(0.0);
    let amp_a = (smoothed[i_a] - floor).max(0.0);
    let omega_m = 0.5 * (f[i_a] - f[i_s]);

    let (peak, amp) = if amp_s >= amp_a { (i_s, amp_s) } else { (i_a, amp_a) };
    let seg = spectrum
        .segments()
        .into_iter()
        .find(|s| s.contains(&peak))
        .expect("peak lies in a segment");
    let half = floor + 0.5 * amp;
    let mut lo = peak;
    while lo > seg.start && smoothed[lo] > half {
        lo -= 1;
    }
    let mut hi = peak;
    while hi + 1 < seg.end && smoothed[hi] > half {
        hi += 1;
    }
    let gamma = (f[hi] - f[lo]).max(2.0 * spectrum.resolution);

    for center in [-omega_m, omega_m] {
        let near = f.iter().filter(|&&w| (w - center).abs() <= gamma).count();
        if near < 3 {
            return Err(Error::Coverage(format!(
                "only {near} bins within one linewidth of the sideband at {center:.6e} rad/s"
            )));
        }
    }

    Ok(SidebandFit::from_model(&SpectrumModel {
        center_offset: 0.0,
        omega_m,
        gamma_eff: gamma,
        peak_stokes: amp_s,
        peak_antistokes: amp_a,
        floor,
        background_fraction: 0.0,
    }))
}

/// Matched-filter SNR of each sideband over the whole record.
fn visibility(spectrum: &HeterodyneSpectrum, start: &SpectrumModel) -> (f64, f64) {
    let (mut ss, mut sa) = (0.0, 0.0);
    for &w in &spectrum.frequencies {
        ss += lorentzian(w, -start.omega_m, start.gamma_eff).powi(2);
        sa += lorentzian(w, start.omega_m, start.gamma_eff).powi(2);
    }
    let k = spectrum.n_avg.sqrt() / start.floor;
    (start.peak_stokes * k * ss.sqrt(), start.peak_antistokes * k * sa.sqrt())
}

/// Fit both sidebands with a shared centre offset and linewidth.
///
/// Weighted least squares against the averaged-periodogram variance
/// `model²/n_avg`, iteratively reweighted from the current model; at the fixed
/// point this is the maximum-likelihood estimate for Gamma-distributed bins.
///
/// Visibility is checked twice, on the starting guess and on the result: if
/// neither sideband amplitude exceeds its standard error the fit is rejected.
pub fn fit_sidebands(spectrum: &HeterodyneSpectrum, init: Option<&SidebandFit>) -> Result<SidebandFit> {
    let start = match init {
        Some(f) => {
            spectrum.validate()?;
            f.clone()
        }
        None => initial_guess(spectrum)?,
    };
    let start_model = start.model();
    let (snr_s, snr_a) = visibility(spectrum, &start_model);
    let best_snr = snr_s.max(snr_a);
    if !(best_snr >= 1.0) {
        return Err(Error::InsufficientVisibility { snr: best_snr });
    }

    // Work in units of the starting linewidth about the starting centres.
    let w_ref = start_model.omega_m;
    let g_ref = start_model.gamma_eff;
    let ds: Vec<f64> = spectrum.frequencies.iter().map(|w| (w + w_ref) / g_ref).collect();
    let da: Vec<f64> = spectrum.frequencies.iter().map(|w| (w - w_ref) / g_ref).collect();
    let y = &spectrum.psd;
    let n = y.len();
    if n <= N_PARAMS {
        return Err(Error::Coverage(format!(
            "{n} bins cannot constrain {N_PARAMS} parameters"
        )));
    }

    let model = |p: &DVector<f64>, k: usize, grad: &mut [f64]| -> f64 {
        let h = 0.5 * p[1];
        let h2 = h * h;
        let xs = ds[k] + p[0];
        let xa = da[k] - p[0];
        let qs = xs * xs + h2;
        let qa = xa * xa + h2;
        let ls = h2 / qs;
        let la = h2 / qa;
        grad[0] = p[2] * (-2.0 * xs * h2 / (qs * qs)) + p[3] * (2.0 * xa * h2 / (qa * qa));
        grad[1] = p[2] * h / qs * (1.0 - ls) + p[3] * h / qa * (1.0 - la);
        grad[2] = ls;
        grad[3] = la;
        grad[4] = 1.0;
        p[4] + p[2] * ls + p[3] * la
    };

    let start_params = DVector::from_vec(vec![
        0.0,
        1.0,
        start_model.peak_stokes,
        start_model.peak_antistokes,
        start_model.floor,
    ]);
    let options = LmOptions {
        max_iterations: 200,
        gradient_tolerance: 1e-8,
        lower_bounds: Some(vec![
            f64::NEG_INFINITY,
            1e-6,
            0.0,
            0.0,
            1e-12 * start_model.floor.abs().max(f64::MIN_POSITIVE),
        ]),
    };
    let outcome = fit_reweighted(model, y, spectrum.n_avg, start_params, &options, MAX_REWEIGHTS)
        .ok_or_else(|| Error::Fit("starting point outside the model domain".into()))?;
    let converged = outcome.converged;
    let total_iterations = outcome.iterations;
    let result = outcome.lm;
    let p = &result.params;

    let scale = [g_ref, g_ref, 1.0, 1.0, 1.0];
    let mut covariance = [[f64::NAN; N_PARAMS]; N_PARAMS];
    if let Some(c) = result.covariance() {
        for (i, row) in covariance.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = scale[i] * scale[j] * c[(i, j)];
            }
        }
    }
    let fit = SidebandFit {
        omega_m_fit: w_ref + p[0] * g_ref,
        gamma_eff_fit: p[1] * g_ref,
        amp_stokes: p[2],
        amp_antistokes: p[3],
        floor_fit: p[4],
        covariance,
        residual_norm: result.chi2 / (n - N_PARAMS) as f64,
        iterations: total_iterations,
    };
    let snr = [2, 3]
        .map(|i| fit.covariance[i][i].sqrt())
        .iter()
        .zip([fit.amp_stokes, fit.amp_antistokes])
        .map(|(s, a)| a / s)
        .fold(0.0, f64::max);
    if snr < 1.0 {
        return Err(Error::InsufficientVisibility { snr });
    }
    if !converged || fit.covariance[0][0].is_nan() {
        return Err(Error::NotConverged {
            iterations: total_iterations,
            best: Box::new(fit),
        });
    }
    Ok(fit)
}
