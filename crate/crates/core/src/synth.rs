//! Synthetic measurement data.
//!
//! Two independent generators live here. [`synthesize_spectrum`] draws noisy
//! averaged spectra around an analytic [`SpectrumModel`]. [`simulate_oscillator`]
//! integrates a damped, thermally driven mode in the time domain; paired with
//! [`estimate_psd`] it checks the lineshape, width and area machinery without
//! reference to the analytic model. It does not produce sideband asymmetry,
//! which is a quantum effect injected only at the model level.
//!
//! Every generator takes a `stream` index. The RNG for a given `(seed, stream)`
//! is fixed, so sweeps are reproducible no matter how work is scheduled.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::physics::{angular_to_hz, hz_to_angular};
use crate::spectra::{HeterodyneSpectrum, SpectrumModel};

/// RNG for one independent task derived from the master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream index for point `point` of detuning `detuning`.
pub fn stream_id(detuning: usize, point: usize) -> u64 {
    ((detuning as u64) << 32) | point as u64
}

/// Frequency grid for synthesized spectra.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    /// One window around each sideband, sized in units of the linewidth.
    Windows {
        half_width_linewidths: f64,
        bins_per_linewidth: f64,
    },
    /// A single uniform grid `[-half_span, half_span]`, in Hz.
    Uniform { half_span_hz: f64, resolution_hz: f64 },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Windows {
            half_width_linewidths: 25.0,
            bins_per_linewidth: 20.0,
        }
    }
}

impl GridSpec {
    /// Grid in Hz and its bin width in Hz.
    ///
    /// Grids are built in ordinary frequency so that a spectrum written to disk
    /// and read back maps to bit-identical angular frequencies.
    pub fn build_hz(&self, omega_m: f64, gamma_eff: f64) -> Result<(Vec<f64>, f64)> {
        let center = angular_to_hz(omega_m);
        match *self {
            GridSpec::Windows {
                half_width_linewidths,
                bins_per_linewidth,
            } => {
                if !(half_width_linewidths > 0.0 && bins_per_linewidth > 0.0) {
                    return Err(invalid("grid", "window size and bin density must be > 0"));
                }
                let width = angular_to_hz(gamma_eff);
                let res = width / bins_per_linewidth;
                let half_bins = (half_width_linewidths * bins_per_linewidth).ceil() as i64;
                let half = half_bins as f64 * res;
                if half >= center {
                    let n = ((center + half) / res).ceil() as i64;
                    return Ok(((-n..=n).map(|k| k as f64 * res).collect(), res));
                }
                let mut grid = Vec::with_capacity(2 * (2 * half_bins as usize + 1));
                for c in [-center, center] {
                    grid.extend((-half_bins..=half_bins).map(|k| c + k as f64 * res));
                }
                Ok((grid, res))
            }
            GridSpec::Uniform {
                half_span_hz,
                resolution_hz,
            } => {
                if !(resolution_hz > 0.0) {
                    return Err(invalid("grid", "resolution must be > 0"));
                }
                if !(half_span_hz > center + angular_to_hz(gamma_eff)) {
                    return Err(invalid("grid", "uniform span must cover both sidebands"));
                }
                let n = (half_span_hz / resolution_hz).ceil() as i64;
                Ok(((-n..=n).map(|k| k as f64 * resolution_hz).collect(), resolution_hz))
            }
        }
    }

    /// Angular grid and bin width.
    pub fn build(&self, omega_m: f64, gamma_eff: f64) -> Result<(Vec<f64>, f64)> {
        let (hz, res) = self.build_hz(omega_m, gamma_eff)?;
        Ok((hz.into_iter().map(hz_to_angular).collect(), hz_to_angular(res)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_avg: f64,
    pub seed: u64,
    pub grid: GridSpec,
    /// Time-domain record length, s.
    pub oracle_duration: f64,
    /// Time-domain sample rate, samples/s.
    pub oracle_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_avg: 1000.0,
            seed: 1,
            grid: GridSpec::default(),
            oracle_duration: 1.0,
            oracle_rate: 1e3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_avg >= 1.0) || !self.n_avg.is_finite() {
            return Err(invalid("n_avg", format!("must be finite and >= 1, got {}", self.n_avg)));
        }
        if !(self.oracle_duration > 0.0) {
            return Err(invalid("oracle_duration", "must be > 0"));
        }
        if !(self.oracle_rate > 0.0) {
            return Err(invalid("oracle_rate", "must be > 0"));
        }
        Ok(())
    }
}

/// Draw an `n_avg`-averaged spectrum around `model`.
///
/// Each bin is Gamma distributed with shape `n_avg` and mean equal to the
/// model, which is the exact law of an average of `n_avg` exponential
/// periodogram bins.
pub fn synthesize_spectrum(model: &SpectrumModel, config: &SynthConfig, stream: u64) -> Result<HeterodyneSpectrum> {
    config.validate()?;
    let (frequencies, resolution) = config.grid.build(model.omega_m, model.gamma_eff)?;
    let mut rng = stream_rng(config.seed, stream);
    let shape = config.n_avg;
    let psd = frequencies
        .iter()
        .map(|&w| {
            let mean = model.evaluate(w);
            let g = Gamma::new(shape, mean / shape).map_err(|e| invalid("model", e.to_string()))?;
            Ok(g.sample(&mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    HeterodyneSpectrum::new(frequencies, psd, config.n_avg, resolution)
}

/// The model itself on the configured grid, tagged with the configured averaging.
pub fn noiseless_spectrum(model: &SpectrumModel, config: &SynthConfig) -> Result<HeterodyneSpectrum> {
    config.validate()?;
    let (frequencies, resolution) = config.grid.build(model.omega_m, model.gamma_eff)?;
    let psd = frequencies.iter().map(|&w| model.evaluate(w)).collect();
    HeterodyneSpectrum::new(frequencies, psd, config.n_avg, resolution)
}

/// Uniformly sampled complex record.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
}

impl TimeSeries {
    pub fn from_real(values: &[f64], sample_rate: f64) -> Self {
        Self {
            samples: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    /// Mean of |z|².
    pub fn mean_power(&self) -> f64 {
        self.samples.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }
}

/// Complex Ornstein–Uhlenbeck amplitude with decay Γ_eff/2 and rotation ω_m.
///
/// Uses the exact one-step propagator, started from the stationary law, so
/// `E|z|² = n_target` at every sample and the field correlation decays as
/// `exp(−Γ_eff τ / 2)`. The record is the demodulated complex quadrature pair;
/// its spectrum is a single Lorentzian of full width Γ_eff at `+ω_m`.
pub fn simulate_oscillator(
    gamma_eff: f64,
    omega_m: f64,
    n_target: f64,
    config: &SynthConfig,
    stream: u64,
) -> Result<TimeSeries> {
    config.validate()?;
    if !(gamma_eff > 0.0) || !(omega_m > 0.0) {
        return Err(invalid("gamma_eff", "rates must be > 0"));
    }
    if gamma_eff >= omega_m {
        return Err(invalid("gamma_eff", "must be much smaller than omega_m"));
    }
    if !(n_target >= 0.0) {
        return Err(invalid("n_target", format!("must be >= 0, got {n_target}")));
    }
    let dt = 1.0 / config.oracle_rate;
    let limit = 0.1 / omega_m;
    if dt > limit {
        return Err(Error::StepTooCoarse { step: dt, limit });
    }
    let n = (config.oracle_duration * config.oracle_rate).round() as usize;
    if n < 2 {
        return Err(invalid("oracle_duration", "record shorter than two samples"));
    }
    if n_target == 0.0 {
        return Ok(TimeSeries {
            samples: vec![Complex64::new(0.0, 0.0); n],
            sample_rate: config.oracle_rate,
        });
    }

    let propagator = Complex64::new(-0.5 * gamma_eff * dt, omega_m * dt).exp();
    let kick = (n_target * (1.0 - (-gamma_eff * dt).exp())).sqrt();
    let mut rng = stream_rng(config.seed, stream);
    let normal = |rng: &mut ChaCha12Rng| -> Complex64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    };

    let mut samples = Vec::with_capacity(n);
    let mut z = normal(&mut rng) * n_target.sqrt();
    samples.push(z);
    for _ in 1..n {
        z = z * propagator + normal(&mut rng) * kick;
        samples.push(z);
    }
    Ok(TimeSeries {
        samples,
        sample_rate: config.oracle_rate,
    })
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect()
}

/// Welch estimate: Hann-windowed, overlapping segments, averaged.
///
/// The result is a two-sided density per Hz on an angular frequency grid
/// running from −fs/2 to fs/2, so `Σ psd · resolution / 2π` is the record's
/// mean power. `n_avg` is the equivalent number of independent averages
/// after accounting for segment overlap.
pub fn estimate_psd(series: &TimeSeries, segment_length: usize, overlap: f64) -> Result<HeterodyneSpectrum> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Segmentation(format!("overlap {overlap} outside [0, 1)")));
    }
    if segment_length < 2 {
        return Err(Error::Segmentation(format!("segment length {segment_length} < 2")));
    }
    if segment_length > series.len() {
        return Err(Error::Segmentation(format!(
            "segment length {segment_length} exceeds record length {}",
            series.len()
        )));
    }
    let step = ((segment_length as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let segments = (series.len() - segment_length) / step + 1;
    let window = hann(segment_length);
    let power: f64 = window.iter().map(|w| w * w).sum();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(segment_length);
    let mut acc = vec![0.0; segment_length];
    let mut buf = vec![Complex64::new(0.0, 0.0); segment_length];
    for seg in 0..segments {
        let start = seg * step;
        for (b, (x, w)) in buf
            .iter_mut()
            .zip(series.samples[start..start + segment_length].iter().zip(&window))
        {
            *b = x * w;
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
    }
    let norm = 1.0 / (segments as f64 * series.sample_rate * power);

    // Reorder so frequencies increase from −fs/2.
    let n = segment_length;
    let bin_hz = series.sample_rate / n as f64;
    let first_negative = n.div_ceil(2);
    let order = (first_negative..n).chain(0..first_negative);
    let mut frequencies = Vec::with_capacity(n);
    let mut psd = Vec::with_capacity(n);
    for k in order {
        let signed = if k >= first_negative {
            k as f64 - n as f64
        } else {
            k as f64
        };
        frequencies.push(hz_to_angular(signed * bin_hz));
        psd.push(acc[k] * norm);
    }

    let n_eff = equivalent_averages(&window, step, segments);
    HeterodyneSpectrum::new(frequencies, psd, n_eff, hz_to_angular(bin_hz))
}

/// Equivalent independent averages for overlapping windowed segments.
fn equivalent_averages(window: &[f64], step: usize, segments: usize) -> f64 {
    let power: f64 = window.iter().map(|w| w * w).sum();
    let k = segments as f64;
    let mut sum = 0.0;
    for j in 1..segments {
        let lag = j * step;
        if lag >= window.len() {
            break;
        }
        let c: f64 = window[..window.len() - lag]
            .iter()
            .zip(&window[lag..])
            .map(|(a, b)| a * b)
            .sum();
        let rho = (c / power).powi(2);
        sum += (1.0 - j as f64 / k) * rho;
    }
    (k / (1.0 + 2.0 * sum)).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{CoolingPoint, SystemParams};

    fn model() -> SpectrumModel {
        let p = SystemParams::membrane_device();
        let point = CoolingPoint::new(&p, hz_to_angular(-1.62e6), hz_to_angular(3e3)).unwrap();
        SpectrumModel::from_physics(&p, &point, 0.5, 0.0).unwrap()
    }

    #[test]
    fn windows_cover_both_sidebands() {
        let m = model();
        let (grid, res) = GridSpec::default().build(m.omega_m, m.gamma_eff).unwrap();
        assert_eq!(grid.len(), 2 * 1001);
        assert!(grid[0] < -m.omega_m && grid[1000] > -m.omega_m);
        assert!(grid[1001] < m.omega_m && grid[2001] > m.omega_m);
        assert!((res / (m.gamma_eff / 20.0) - 1.0).abs() < 1e-12);
        let spec = noiseless_spectrum(&m, &SynthConfig::default()).unwrap();
        assert_eq!(spec.segments().len(), 2);
    }

    #[test]
    fn overlapping_windows_merge() {
        let g = GridSpec::Windows {
            half_width_linewidths: 20.0,
            bins_per_linewidth: 10.0,
        };
        let (grid, res) = g.build(10.0, 1.0).unwrap();
        let spec = HeterodyneSpectrum::new(grid.clone(), vec![1.0; grid.len()], 1.0, res).unwrap();
        assert_eq!(spec.segments().len(), 1);
    }

    #[test]
    fn uniform_grid_must_span_sidebands() {
        let m = model();
        let narrow = GridSpec::Uniform {
            half_span_hz: 1e5,
            resolution_hz: 10.0,
        };
        assert!(narrow.build(m.omega_m, m.gamma_eff).is_err());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let m = model();
        let cfg = SynthConfig {
            seed: 42,
            ..SynthConfig::default()
        };
        let a = synthesize_spectrum(&m, &cfg, 3).unwrap();
        let b = synthesize_spectrum(&m, &cfg, 3).unwrap();
        assert_eq!(a, b);
        let threaded: Vec<_> = std::thread::scope(|s| {
            (0..4)
                .map(|_| s.spawn(|| synthesize_spectrum(&m, &cfg, 3).unwrap()))
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().unwrap())
                .collect()
        });
        assert!(threaded.iter().all(|t| *t == a));
        let other = synthesize_spectrum(&m, &cfg, 4).unwrap();
        assert_ne!(a.psd, other.psd);
    }

    #[test]
    fn heavy_averaging_converges_to_model() {
        let m = model();
        let cfg = SynthConfig {
            n_avg: 1e6,
            ..SynthConfig::default()
        };
        let spec = synthesize_spectrum(&m, &cfg, 0).unwrap();
        for (w, v) in spec.frequencies.iter().zip(&spec.psd) {
            let mean = m.evaluate(*w);
            let sigma = mean / cfg.n_avg.sqrt();
            assert!((v - mean).abs() < 5.0 * sigma);
        }
    }

    #[test]
    fn off_resonant_bin_variance() {
        let m = SpectrumModel {
            peak_stokes: 0.0,
            peak_antistokes: 0.0,
            ..model()
        };
        let cfg = SynthConfig {
            n_avg: 100.0,
            grid: GridSpec::Windows {
                half_width_linewidths: 250.0,
                bins_per_linewidth: 10.0,
            },
            ..SynthConfig::default()
        };
        let spec = synthesize_spectrum(&m, &cfg, 7).unwrap();
        assert!(spec.len() >= 10_000);
        let n = spec.len() as f64;
        let mean = spec.psd.iter().sum::<f64>() / n;
        let var = spec.psd.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect = m.floor * m.floor / cfg.n_avg;
        assert!((var / expect - 1.0).abs() < 0.1, "var ratio {}", var / expect);
    }

    #[test]
    fn zero_occupation_gives_zero_record() {
        let cfg = SynthConfig {
            oracle_duration: 1.0,
            oracle_rate: 1000.0,
            ..SynthConfig::default()
        };
        let ts = simulate_oscillator(1.0, 10.0, 0.0, &cfg, 0).unwrap();
        assert_eq!(ts.len(), 1000);
        assert!(ts.samples.iter().all(|z| z.norm_sqr() == 0.0));
    }

    #[test]
    fn coarse_step_rejected() {
        let cfg = SynthConfig {
            oracle_duration: 1.0,
            oracle_rate: 50.0,
            ..SynthConfig::default()
        };
        assert!(matches!(
            simulate_oscillator(1.0, 10.0, 1.0, &cfg, 0),
            Err(Error::StepTooCoarse { .. })
        ));
    }

    #[test]
    fn oscillator_stationary_statistics() {
        let (gamma, omega) = (2.0 * PI * 10.0, 2.0 * PI * 100.0);
        let tau = 2.0 / gamma;
        let cfg = SynthConfig {
            oracle_duration: 2e4 * tau,
            oracle_rate: 10.0 * omega,
            seed: 11,
            ..SynthConfig::default()
        };
        let ts = simulate_oscillator(gamma, omega, 3.0, &cfg, 0).unwrap();
        let mean = ts.mean_power();
        assert!((mean / 3.0 - 1.0).abs() < 0.03, "mean |z|^2 = {mean}");

        // |⟨z*(t) z(t+τ)⟩| should fall as exp(−τ/τ_c) with τ_c = 2/Γ.
        let lags: Vec<usize> = (1..=20)
            .map(|k| (k as f64 * 0.1 * tau * cfg.oracle_rate) as usize)
            .collect();
        let n = ts.len();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &lag in &lags {
            let c: Complex64 = (0..n - lag)
                .map(|i| ts.samples[i].conj() * ts.samples[i + lag])
                .sum::<Complex64>()
                / (n - lag) as f64;
            xs.push(lag as f64 / cfg.oracle_rate);
            ys.push((c.norm() / mean).ln());
        }
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        let fitted = -1.0 / slope;
        assert!((fitted / tau - 1.0).abs() < 0.05, "tau {fitted} vs {tau}");
    }

    #[test]
    fn sinusoid_power() {
        let fs = 1024.0;
        let n = 1 << 16;
        let f0 = 64.0;
        let amp = 1.7;
        let x: Vec<f64> = (0..n).map(|i| amp * (2.0 * PI * f0 * i as f64 / fs).cos()).collect();
        let spec = estimate_psd(&TimeSeries::from_real(&x, fs), 1024, 0.5).unwrap();
        let bin = spec.resolution / (2.0 * PI);
        let peak = spec
            .psd
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        assert!(((spec.frequencies[peak].abs() / (2.0 * PI)) - f0).abs() < 1e-9);
        // Hann main lobe spans ±1 bin; sum both signed peaks.
        let total: f64 = spec
            .frequencies
            .iter()
            .zip(&spec.psd)
            .filter(|(w, _)| ((w.abs() / (2.0 * PI)) - f0).abs() <= 1.5 * bin)
            .map(|(_, p)| p * bin)
            .sum();
        assert!((total / (amp * amp / 2.0) - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn white_noise_is_flat_and_parseval_holds() {
        let fs = 500.0;
        let n = 1 << 18;
        let mut rng = stream_rng(5, 0);
        let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ts = TimeSeries::from_real(&x, fs);
        let spec = estimate_psd(&ts, 512, 0.5).unwrap();
        let mean = spec.psd.iter().sum::<f64>() / spec.len() as f64;
        assert!((mean * fs - 1.0).abs() < 0.01, "density {}", mean * fs);
        let integral: f64 = spec.psd.iter().sum::<f64>() * spec.resolution / (2.0 * PI);
        assert!((integral / ts.mean_power() - 1.0).abs() < 0.005);
        // 50 % overlapped Hann segments are nearly, but not fully, independent.
        let segs = ((n - 512) / 256 + 1) as f64;
        assert!(spec.n_avg < segs && spec.n_avg > 0.9 * segs);
    }

    #[test]
    fn segmentation_errors() {
        let ts = TimeSeries::from_real(&[0.0; 100], 10.0);
        assert!(matches!(estimate_psd(&ts, 200, 0.0), Err(Error::Segmentation(_))));
        assert!(matches!(estimate_psd(&ts, 10, 1.0), Err(Error::Segmentation(_))));
        assert!(matches!(estimate_psd(&ts, 1, 0.0), Err(Error::Segmentation(_))));
    }
}
