//! Analytic heterodyne spectrum: two Lorentzian sidebands on a shot-noise floor.
//!
//! Frequencies are angular offsets from the heterodyne beat note. The Stokes
//! sideband sits at `−ω_m`, the anti-Stokes sideband at `+ω_m`. PSD values are
//! in shot-noise units.
//!
//! Peak heights use `peak = C·ε·rate/Γ_eff` with `C = 4`. Only the ratio of the
//! two heights carries physics; `C` fixes the absolute visibility.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::physics::{occupation_from_ratio, CoolingPoint, SystemParams};

/// Line-centre transduction constant from scattered flux to PSD height.
pub const PEAK_CONVENTION: f64 = 4.0;

/// Number of free parameters in the dual-sideband lineshape.
pub const N_PARAMS: usize = 5;

pub type ParamVector = SVector<f64, N_PARAMS>;
pub type ParamMatrix = SMatrix<f64, N_PARAMS, N_PARAMS>;

/// Unit-peak Lorentzian with full width `gamma`.
#[inline]
pub fn lorentzian(omega: f64, center: f64, gamma: f64) -> f64 {
    let h = 0.5 * gamma;
    let d = omega - center;
    h * h / (d * d + h * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub center_offset: f64,
    pub omega_m: f64,
    pub gamma_eff: f64,
    pub peak_stokes: f64,
    pub peak_antistokes: f64,
    pub floor: f64,
    pub background_fraction: f64,
}

impl SpectrumModel {
    /// Spectrum of a mode at occupation `n_bar` driven at `point`.
    ///
    /// `background_fraction` raises the off-resonant floor above shot noise
    /// without touching the sidebands.
    pub fn from_physics(
        params: &SystemParams,
        point: &CoolingPoint,
        n_bar: f64,
        background_fraction: f64,
    ) -> Result<Self> {
        params.validate()?;
        if !(n_bar >= 0.0) || !n_bar.is_finite() {
            return Err(invalid("n_bar", format!("must be finite and >= 0, got {n_bar}")));
        }
        if !(background_fraction >= 0.0) {
            return Err(invalid(
                "background_fraction",
                format!("must be >= 0, got {background_fraction}"),
            ));
        }
        let gamma_eff = params.gamma_0 + point.gamma_opt;
        let scale = PEAK_CONVENTION * params.efficiency / gamma_eff;
        Ok(Self {
            center_offset: 0.0,
            omega_m: params.omega_m,
            gamma_eff,
            peak_stokes: scale * point.rate_stokes_per_quantum * (n_bar + 1.0),
            peak_antistokes: scale * point.rate_antistokes_per_quantum * n_bar,
            floor: 1.0 + background_fraction,
            background_fraction,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.peak_stokes / self.peak_antistokes
    }

    pub fn evaluate(&self, omega: f64) -> f64 {
        let x = omega - self.center_offset;
        self.floor
            + self.peak_stokes * lorentzian(x, -self.omega_m, self.gamma_eff)
            + self.peak_antistokes * lorentzian(x, self.omega_m, self.gamma_eff)
    }

    /// Partial derivatives with respect to
    /// `(omega_m, gamma_eff, peak_stokes, peak_antistokes, floor)`.
    pub fn gradient(&self, omega: f64) -> ParamVector {
        let x = omega - self.center_offset;
        let h = 0.5 * self.gamma_eff;
        let h2 = h * h;
        let ds = x + self.omega_m;
        let da = x - self.omega_m;
        let qs = ds * ds + h2;
        let qa = da * da + h2;
        let ls = h2 / qs;
        let la = h2 / qa;
        // dL/dcenter = 2 d h² / q²; Stokes centre is −ω_m.
        let d_omega =
            self.peak_stokes * (-2.0 * ds * h2 / (qs * qs)) + self.peak_antistokes * (2.0 * da * h2 / (qa * qa));
        // dL/dΓ = (h / q)(1 − L)
        let d_gamma = self.peak_stokes * h / qs * (1.0 - ls) + self.peak_antistokes * h / qa * (1.0 - la);
        ParamVector::new(d_omega, d_gamma, ls, la, 1.0)
    }

    /// Multiply the whole spectrum, floor included, by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            peak_stokes: self.peak_stokes * k,
            peak_antistokes: self.peak_antistokes * k,
            floor: self.floor * k,
            ..*self
        }
    }

    /// Divide through by the off-resonant level, as when normalising to the
    /// measured background and calling it shot noise.
    pub fn normalized_to_floor(&self) -> Self {
        let mut m = self.scaled(1.0 / self.floor);
        m.floor = 1.0;
        m
    }

    pub fn params(&self) -> ParamVector {
        ParamVector::new(
            self.omega_m,
            self.gamma_eff,
            self.peak_stokes,
            self.peak_antistokes,
            self.floor,
        )
    }

    pub fn with_params(&self, p: &ParamVector) -> Self {
        Self {
            omega_m: p[0],
            gamma_eff: p[1],
            peak_stokes: p[2],
            peak_antistokes: p[3],
            floor: p[4],
            ..*self
        }
    }
}

pub fn evaluate_psd(model: &SpectrumModel, frequencies: &[f64]) -> Vec<f64> {
    frequencies.iter().map(|&w| model.evaluate(w)).collect()
}

/// A measured or synthesized spectrum.
///
/// The grid is piecewise uniform: consecutive bins are spaced by `resolution`,
/// except for gaps between separate acquisition windows, which must be wider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterodyneSpectrum {
    pub frequencies: Vec<f64>,
    pub psd: Vec<f64>,
    pub n_avg: f64,
    pub resolution: f64,
}

impl HeterodyneSpectrum {
    pub fn new(frequencies: Vec<f64>, psd: Vec<f64>, n_avg: f64, resolution: f64) -> Result<Self> {
        let s = Self {
            frequencies,
            psd,
            n_avg,
            resolution,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frequencies.is_empty() {
            return Err(invalid("frequencies", "empty grid"));
        }
        if self.frequencies.len() != self.psd.len() {
            return Err(invalid(
                "psd",
                format!("{} values for {} bins", self.psd.len(), self.frequencies.len()),
            ));
        }
        if !(self.n_avg >= 1.0) {
            return Err(invalid("n_avg", format!("must be >= 1, got {}", self.n_avg)));
        }
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(invalid("resolution", format!("must be > 0, got {}", self.resolution)));
        }
        let tol = 1e-6 * self.resolution;
        for (i, w) in self.frequencies.windows(2).enumerate() {
            let d = w[1] - w[0];
            let uniform = (d - self.resolution).abs() <= tol;
            if !uniform && d <= self.resolution {
                return Err(invalid(
                    "frequencies",
                    format!(
                        "bin {} spacing {d} inconsistent with resolution {}",
                        i + 1,
                        self.resolution
                    ),
                ));
            }
        }
        if let Some(i) = self.psd.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("psd", format!("bin {i} is {}", self.psd[i])));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            psd: self.psd.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }

    /// Index ranges of the contiguous acquisition windows.
    pub fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let tol = 1e-6 * self.resolution;
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..self.frequencies.len() {
            if (self.frequencies[i] - self.frequencies[i - 1] - self.resolution).abs() > tol {
                out.push(start..i);
                start = i;
            }
        }
        out.push(start..self.frequencies.len());
        out
    }
}

/// Fisher information of the five lineshape parameters for bins whose noise
/// follows an `n_avg`-fold averaged exponential law (variance = model²/n_avg).
pub fn fisher_information(model: &SpectrumModel, frequencies: &[f64], n_avg: f64) -> ParamMatrix {
    let mut f = ParamMatrix::zeros();
    for &w in frequencies {
        let m = model.evaluate(w);
        let g = model.gradient(w);
        f += g * g.transpose() * (n_avg / (m * m));
    }
    f
}

/// First- and second-order statistics of n̄ inferred from fitted amplitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupationMoments {
    pub n_bar: f64,
    pub variance: f64,
    /// Leading curvature bias E[n̂] − n̄ from the amplitude covariance.
    pub curvature_bias: f64,
}

/// Propagate the amplitude covariance of a dual-sideband fit through
/// `n̄ = s·A_aS / (A_S − s·A_aS)`.
pub fn occupation_moments(model: &SpectrumModel, frequencies: &[f64], n_avg: f64, s: f64) -> Result<OccupationMoments> {
    let cov = fisher_information(model, frequencies, n_avg)
        .try_inverse()
        .ok_or_else(|| invalid("frequencies", "grid does not constrain the lineshape"))?;
    let (a_s, a_as) = (model.peak_stokes, model.peak_antistokes);
    let d = a_s - s * a_as;
    if !(d > 0.0) {
        return Err(invalid("model", "ratio at or below the susceptibility floor"));
    }
    let n_bar = s * a_as / d;
    let g_s = -s * a_as / (d * d);
    let g_as = s * a_s / (d * d);
    let d3 = d * d * d;
    let h_ss = 2.0 * s * a_as / d3;
    let h_aa = 2.0 * s * s * a_s / d3;
    let h_sa = -s * (a_s + s * a_as) / d3;
    let (c_ss, c_aa, c_sa) = (cov[(2, 2)], cov[(3, 3)], cov[(2, 3)]);
    Ok(OccupationMoments {
        n_bar,
        variance: g_s * g_s * c_ss + g_as * g_as * c_aa + 2.0 * g_s * g_as * c_sa,
        curvature_bias: 0.5 * (h_ss * c_ss + h_aa * c_aa + 2.0 * h_sa * c_sa),
    })
}

/// Smallest averaging count giving σ(n̂) ≤ `target_sigma` on this grid.
pub fn required_averages(model: &SpectrumModel, frequencies: &[f64], s: f64, target_sigma: f64) -> Result<u64> {
    if !(target_sigma > 0.0) {
        return Err(invalid("target_sigma", format!("must be > 0, got {target_sigma}")));
    }
    let unit = occupation_moments(model, frequencies, 1.0, s)?;
    Ok((unit.variance / (target_sigma * target_sigma)).ceil().max(1.0) as u64)
}

/// Shift in inferred n̄ caused by a flat substrate background.
///
/// The spectrum is normalised to the elevated off-resonant level `1 + b` and
/// read as shot-noise units. Both amplitudes shrink by `1/(1 + b)`, so the
/// ratio is untouched; what changes is the visibility, and with it the
/// curvature bias of the ratio inversion. The return value is that change.
pub fn apparent_sideband_bias(
    model: &SpectrumModel,
    background_fraction: f64,
    frequencies: &[f64],
    n_avg: f64,
    s: f64,
) -> Result<f64> {
    if !(background_fraction >= 0.0) {
        return Err(invalid(
            "background_fraction",
            format!("must be >= 0, got {background_fraction}"),
        ));
    }
    if background_fraction == 0.0 {
        return Ok(0.0);
    }
    let clean = model.normalized_to_floor();
    let mut raised = clean;
    raised.floor = 1.0 + background_fraction;
    raised.background_fraction = background_fraction;
    let biased = raised.normalized_to_floor();
    let before = occupation_moments(&clean, frequencies, n_avg, s)?;
    let after = occupation_moments(&biased, frequencies, n_avg, s)?;
    Ok(after.curvature_bias - before.curvature_bias)
}

/// Background fraction whose substrate bias equals `target` (bisection).
pub fn calibrate_background_fraction(
    model: &SpectrumModel,
    target: f64,
    frequencies: &[f64],
    n_avg: f64,
    s: f64,
) -> Result<f64> {
    if !(target > 0.0) {
        return Err(invalid("target", format!("must be > 0, got {target}")));
    }
    let f = |b: f64| apparent_sideband_bias(model, b, frequencies, n_avg, s);
    let mut hi = 1.0;
    while f(hi)? < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(invalid("target", "substrate bias cannot reach the target"));
        }
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Calibrated scale of the laser-noise contamination model.
///
/// Fixed so that 0.2 % amplitude and 2 % phase noise at the deepest point of
/// the reference cooling curve (Δ = −2π×1.62 MHz, Γ_opt = 2π×30 kHz) shift the
/// inferred occupation by 0.006 phonons. See [`LaserNoiseModel::calibrate`].
pub const LASER_NOISE_SCALE: f64 = 0.229_824_988_155_911_3;

/// Perturbative model of classical laser noise on the sidebands.
///
/// Noise expressed as a fraction of shot noise enters each sideband as excess
/// quanta weighted by the same per-quantum scattering rate as the signal.
/// Amplitude noise adds to both sidebands; phase noise interferes with the
/// motional sidebands, adding to Stokes and removing from anti-Stokes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserNoiseModel {
    pub scale: f64,
}

impl Default for LaserNoiseModel {
    fn default() -> Self {
        Self {
            scale: LASER_NOISE_SCALE,
        }
    }
}

impl LaserNoiseModel {
    /// Effective (Stokes, anti-Stokes) quanta including contamination.
    pub fn contaminated_quanta(&self, amp_noise: f64, phase_noise: f64, n_bar: f64) -> (f64, f64) {
        let sym = self.scale * amp_noise;
        let anti = self.scale * phase_noise;
        (n_bar + 1.0 + sym + anti, n_bar + sym - anti)
    }

    /// Sideband model with classical contamination applied.
    pub fn contaminate(
        &self,
        params: &SystemParams,
        point: &CoolingPoint,
        n_bar: f64,
        amp_noise: f64,
        phase_noise: f64,
    ) -> Result<SpectrumModel> {
        check_noise(amp_noise, phase_noise)?;
        let mut model = SpectrumModel::from_physics(params, point, n_bar, 0.0)?;
        let (qs, qa) = self.contaminated_quanta(amp_noise, phase_noise, n_bar);
        let scale = PEAK_CONVENTION * params.efficiency / model.gamma_eff;
        model.peak_stokes = scale * point.rate_stokes_per_quantum * qs;
        model.peak_antistokes = scale * point.rate_antistokes_per_quantum * qa;
        Ok(model)
    }

    /// Shift in inferred n̄ produced by the contamination.
    pub fn bias(&self, amp_noise: f64, phase_noise: f64, point: &CoolingPoint, n_bar: f64) -> Result<f64> {
        check_noise(amp_noise, phase_noise)?;
        let (qs, qa) = self.contaminated_quanta(amp_noise, phase_noise, n_bar);
        let ratio = point.rate_stokes_per_quantum * qs / (point.rate_antistokes_per_quantum * qa);
        let inferred = occupation_from_ratio(ratio, point.s_ratio)?
            .value()
            .ok_or_else(|| invalid("phase_noise", "contamination drives the ratio below s"))?;
        Ok(inferred - n_bar)
    }

    /// Choose the scale so that `|bias| = target` at the given operating point.
    pub fn calibrate(target: f64, amp_noise: f64, phase_noise: f64, point: &CoolingPoint, n_bar: f64) -> Result<Self> {
        if !(target > 0.0) {
            return Err(invalid("target", format!("must be > 0, got {target}")));
        }
        let f = |scale: f64| Self { scale }.bias(amp_noise, phase_noise, point, n_bar).map(f64::abs);
        let mut hi = 1e-3;
        while f(hi)? < target {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(invalid("target", "laser noise bias cannot reach the target"));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Self { scale: 0.5 * (lo + hi) })
    }
}

fn check_noise(amp_noise: f64, phase_noise: f64) -> Result<()> {
    if !(amp_noise >= 0.0) {
        return Err(invalid("amp_noise", format!("must be >= 0, got {amp_noise}")));
    }
    if !(phase_noise >= 0.0) {
        return Err(invalid("phase_noise", format!("must be >= 0, got {phase_noise}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::physics::{hz_to_angular, occupation_from_ratio, steady_state_occupation, thermal_occupation};

    fn operating_point(n_bar: Option<f64>) -> (SystemParams, CoolingPoint, f64) {
        let p = SystemParams::membrane_device();
        let point = CoolingPoint::new(&p, hz_to_angular(-1.62e6), hz_to_angular(30e3)).unwrap();
        let n0 = thermal_occupation(0.360, p.omega_m).unwrap();
        let n = n_bar.unwrap_or_else(|| steady_state_occupation(n0, p.gamma_0, point.n_ba, point.gamma_opt));
        (p, point, n)
    }

    fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        let step = (hi - lo) / (n - 1) as f64;
        (0..n).map(|i| lo + step * i as f64).collect()
    }

    #[test]
    fn equal_sidebands_at_backaction_limit() {
        let (p, point, _) = operating_point(None);
        let m = SpectrumModel::from_physics(&p, &point, point.n_ba, 0.0).unwrap();
        assert!((m.peak_stokes / m.peak_antistokes - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classical_ratio_tends_to_s() {
        let (p, point, _) = operating_point(None);
        let m = SpectrumModel::from_physics(&p, &point, 1e9, 0.0).unwrap();
        assert!((m.ratio() / point.s_ratio - 1.0).abs() < 1e-8);
    }

    #[test]
    fn antistokes_peak_height() {
        let (p, point, _) = operating_point(None);
        let m = SpectrumModel::from_physics(&p, &point, 0.21, 0.0).unwrap();
        // 4 · 0.04 · (35.35 kHz / 30 kHz) · 0.21
        assert!((m.peak_antistokes - 0.0396).abs() < 1e-4, "{}", m.peak_antistokes);
    }

    #[test]
    fn peak_evaluation() {
        let (p, point, n) = operating_point(None);
        let m = SpectrumModel::from_physics(&p, &point, n, 0.0).unwrap();
        let cross = m.peak_stokes * lorentzian(m.omega_m, -m.omega_m, m.gamma_eff);
        assert!((m.evaluate(m.omega_m) - (m.floor + m.peak_antistokes + cross)).abs() < 1e-15);
        assert!(cross < 1e-4 * m.peak_antistokes);
        let far = m.omega_m + 1e3 * m.gamma_eff;
        assert!((m.evaluate(far) - m.floor).abs() < 1e-4);
        assert!((m.evaluate(-far) - m.floor).abs() < 1e-4);
    }

    #[test]
    fn lorentzian_area_by_quadrature() {
        let (p, point, n) = operating_point(None);
        let m = SpectrumModel::from_physics(&p, &point, n, 0.0).unwrap();
        // Composite Simpson over each line with a tail correction beyond ±W.
        let g = m.gamma_eff;
        let half = 2000.0 * g;
        let bins = 400_000;
        let mut area = 0.0;
        for (c, peak) in [(-m.omega_m, m.peak_stokes), (m.omega_m, m.peak_antistokes)] {
            let xs = uniform_grid(c - half, c + half, bins + 1);
            let h = xs[1] - xs[0];
            let mut acc = 0.0;
            for (i, &x) in xs.iter().enumerate() {
                let w = if i == 0 || i == bins {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * peak * lorentzian(x, c, g);
            }
            area += acc * h / 3.0;
        }
        // Each Lorentzian tail beyond ±W carries (Γ/2)²·2/W ≈ Γ²/(2W) per unit peak.
        let tails = (m.peak_stokes + m.peak_antistokes) * g * g / (2.0 * half);
        let exact = PI * g / 2.0 * (m.peak_stokes + m.peak_antistokes);
        assert!(
            ((area + tails) / exact - 1.0).abs() < 1e-5,
            "{} vs {}",
            area + tails,
            exact
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, point, n) = operating_point(None);
        let m = SpectrumModel::from_physics(&p, &point, n, 0.02).unwrap();
        let base = m.params();
        for &w in &[-m.omega_m - 0.7 * m.gamma_eff, m.omega_m + 0.3 * m.gamma_eff, 0.0] {
            let g = m.gradient(w);
            for j in 0..N_PARAMS {
                let h = 1e-6 * base[j].abs().max(1e-3);
                let mut up = base;
                up[j] += h;
                let mut dn = base;
                dn[j] -= h;
                let fd = (m.with_params(&up).evaluate(w) - m.with_params(&dn).evaluate(w)) / (2.0 * h);
                // Central differences lose ~1e-9 absolute to cancellation against the floor.
                assert!(
                    (g[j] - fd).abs() < 1e-5 * fd.abs() + 1e-8,
                    "param {j}: {} vs {}",
                    g[j],
                    fd
                );
            }
        }
    }

    #[test]
    fn ratio_law_inverts() {
        let (p, point, _) = operating_point(None);
        for n in [1e-3, 0.2, 3.0, 1e3, 1e5] {
            let m = SpectrumModel::from_physics(&p, &point, n, 0.0).unwrap();
            let back = occupation_from_ratio(m.ratio(), point.s_ratio)
                .unwrap()
                .value()
                .unwrap();
            assert!((back / n - 1.0).abs() < 1e-10, "{n} -> {back}");
        }
    }

    #[test]
    fn floor_median_off_resonance() {
        let (p, strong, _) = operating_point(None);
        let point = strong.with_gamma_opt(hz_to_angular(1e3)).unwrap();
        let m = SpectrumModel::from_physics(&p, &point, 2.0, 0.03).unwrap();
        let span = 4.0 * m.omega_m;
        let grid = uniform_grid(-span, span, 20_001);
        let off: Vec<f64> = grid
            .iter()
            .filter(|&&w| (w.abs() - m.omega_m).abs() > 1e3 * m.gamma_eff)
            .map(|&w| m.evaluate(w))
            .collect();
        let mut sorted = off.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        assert!((median - m.floor).abs() < 1e-6);
    }

    #[test]
    fn mirror_symmetry_when_peaks_equal() {
        let m = SpectrumModel {
            center_offset: 0.0,
            omega_m: 10.0,
            gamma_eff: 0.5,
            peak_stokes: 3.0,
            peak_antistokes: 3.0,
            floor: 1.0,
            background_fraction: 0.0,
        };
        for w in uniform_grid(0.0, 30.0, 301) {
            assert!((m.evaluate(w) - m.evaluate(-w)).abs() <= 1e-15 * m.evaluate(w));
        }
    }

    #[test]
    fn per_line_area_on_resolved_grid() {
        let (p, point, n) = operating_point(None);
        let m = SpectrumModel::from_physics(&p, &point, n, 0.0).unwrap();
        let g = m.gamma_eff;
        let res = g / 50.0;
        let half = 1000.0 * g;
        let bins = (2.0 * half / res) as usize + 1;
        let grid = uniform_grid(m.omega_m - half, m.omega_m + half, bins);
        let sum: f64 = grid
            .iter()
            .map(|&w| m.peak_antistokes * lorentzian(w, m.omega_m, g))
            .sum::<f64>()
            * res;
        let exact = PI * g / 2.0 * m.peak_antistokes;
        assert!((sum / exact - 1.0).abs() < 1e-3);
    }

    #[test]
    fn spectrum_validation() {
        assert!(HeterodyneSpectrum::new(vec![0.0, 1.0, 2.0], vec![1.0; 3], 1.0, 1.0).is_ok());
        assert!(HeterodyneSpectrum::new(vec![0.0, 1.0, 5.0, 6.0], vec![1.0; 4], 1.0, 1.0).is_ok());
        assert!(HeterodyneSpectrum::new(vec![0.0, 0.5, 1.0], vec![1.0; 3], 1.0, 1.0).is_err());
        assert!(HeterodyneSpectrum::new(vec![0.0, 1.0], vec![1.0; 3], 1.0, 1.0).is_err());
        assert!(HeterodyneSpectrum::new(vec![0.0, 1.0], vec![1.0, -1.0], 1.0, 1.0).is_err());
        assert!(HeterodyneSpectrum::new(vec![0.0, 1.0], vec![1.0; 2], 0.5, 1.0).is_err());
        let s = HeterodyneSpectrum::new(vec![0.0, 1.0, 5.0, 6.0, 7.0], vec![1.0; 5], 1.0, 1.0).unwrap();
        assert_eq!(s.segments(), vec![0..2, 2..5]);
    }

    fn windows(m: &SpectrumModel) -> Vec<f64> {
        let res = m.gamma_eff / 20.0;
        let half = 25.0 * m.gamma_eff;
        let n = (2.0 * half / res).round() as usize + 1;
        let mut g = uniform_grid(-m.omega_m - half, -m.omega_m + half, n);
        g.extend(uniform_grid(m.omega_m - half, m.omega_m + half, n));
        g
    }

    #[test]
    fn substrate_bias_vanishes_without_background() {
        let (p, point, n) = operating_point(None);
        let m = SpectrumModel::from_physics(&p, &point, n, 0.0).unwrap();
        let grid = windows(&m);
        assert_eq!(
            apparent_sideband_bias(&m, 0.0, &grid, 1000.0, point.s_ratio).unwrap(),
            0.0
        );
        let biased = apparent_sideband_bias(&m, 0.5, &grid, 1000.0, point.s_ratio).unwrap();
        assert!(biased > 0.0);
    }

    #[test]
    fn substrate_normalisation_preserves_ratio() {
        let (p, point, n) = operating_point(None);
        let m = SpectrumModel::from_physics(&p, &point, n, 0.2).unwrap();
        let norm = m.normalized_to_floor();
        assert!(norm.peak_stokes < m.peak_stokes);
        assert!((norm.ratio() - m.ratio()).abs() <= 1e-15 * m.ratio());
    }

    #[test]
    fn required_averages_scales_inverse_square() {
        let (p, point, n) = operating_point(None);
        let m = SpectrumModel::from_physics(&p, &point, n, 0.0).unwrap();
        let grid = windows(&m);
        let a = required_averages(&m, &grid, point.s_ratio, 0.02).unwrap();
        let b = required_averages(&m, &grid, point.s_ratio, 0.01).unwrap();
        assert!(((b as f64) / (a as f64) - 4.0).abs() < 1e-3);
        let mom = occupation_moments(&m, &grid, a as f64, point.s_ratio).unwrap();
        assert!(mom.variance.sqrt() <= 0.02);
    }

    #[test]
    fn laser_noise_bias_zero_and_linear() {
        let (_, point, n) = operating_point(None);
        let model = LaserNoiseModel::default();
        assert!(model.bias(0.0, 0.0, &point, n).unwrap().abs() < 1e-15);
        let at = |a: f64, ph: f64| model.bias(a, ph, &point, n).unwrap();
        for x in [0.005, 0.02, 0.045] {
            let h = 1e-3;
            let slope_amp = (at(x + h, 0.0) - at(x - h, 0.0)) / (2.0 * h);
            let slope0 = (at(h, 0.0) - at(0.0, 0.0)) / h;
            assert!((slope_amp / slope0 - 1.0).abs() < 1e-9);
            let slope_ph = (at(0.0, x + h) - at(0.0, x - h)) / (2.0 * h);
            let slope_ph0 = (at(0.0, h) - at(0.0, 0.0)) / h;
            assert!((slope_ph / slope_ph0 - 1.0).abs() < 0.05, "{slope_ph} vs {slope_ph0}");
        }
        assert!(model.bias(-0.1, 0.0, &point, n).is_err());
    }

    #[test]
    fn laser_noise_scale_reproduces_target() {
        let (_, point, n) = operating_point(None);
        let cal = LaserNoiseModel::calibrate(0.006, 0.002, 0.02, &point, n).unwrap();
        assert!(
            (cal.scale / LASER_NOISE_SCALE - 1.0).abs() < 1e-9,
            "scale = {:.17}",
            cal.scale
        );
        let b = LaserNoiseModel::default().bias(0.002, 0.02, &point, n).unwrap();
        assert!((b.abs() - 0.006).abs() < 1e-9);
    }
}
