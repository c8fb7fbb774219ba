//! Computed order tracking: quadratic shaft-angle fits over tachometer
//! pulses, equal-angle resample-time inversion, angle-domain interpolation,
//! FFT order spectra, and ratio-based fault flagging against a healthy
//! baseline.
//!
//! The shaft angle over one 3-pulse window is modeled as
//! θ(t) = b0 + b1·t + b2·t², pinned by θ(t1) = 0, θ(t2) = Δθ, θ(t3) = 2Δθ.
//! Equal-angle resample times come from inverting that quadratic on its
//! increasing branch; the signal is linearly interpolated at those times
//! and transformed to a single-sided amplitude spectrum over the order axis.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::signal::TachPulseTrain;

/// Curvature threshold below which the angle fit is treated as linear
/// (exactly constant speed makes b2 = 0 and the quadratic inversion 0/0).
pub const B2_EPSILON: f64 = 1e-9;

/// Default angle increment: 64 samples per revolution resolves orders up
/// to 32, twice the highest order the diagnosis watches.
pub const DEFAULT_THETA_STEP: f64 = 2.0 * PI / 64.0;

/// Coefficients of the quadratic angle model for one 3-pulse window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseFitCoeffs {
    pub b0: f64,
    /// rad/s
    pub b1: f64,
    /// rad/s²
    pub b2: f64,
    /// (t_start, t_end) of the 3-pulse window, seconds.
    pub window: (f64, f64),
}

impl PhaseFitCoeffs {
    /// θ(t) for this window's model.
    pub fn angle_at(&self, t: f64) -> f64 {
        self.b0 + self.b1 * t + self.b2 * t * t
    }
}

/// Fit θ(t) = b0 + b1·t + b2·t² through three consecutive pulses, with
/// window-relative angles θ(t1) = 0, θ(t2) = Δθ, θ(t3) = 2Δθ.
///
/// Uses Newton divided differences, which solve the 3×3 system exactly for
/// any spacing; quadratic interpolation through exact samples is exact.
pub fn fit_phase(pulses: [f64; 3], delta_theta: f64) -> Result<PhaseFitCoeffs> {
    let [t1, t2, t3] = pulses;
    if delta_theta <= 0.0 {
        return Err(Error::Analysis(format!(
            "fit_phase: delta_theta must be > 0, got {delta_theta}"
        )));
    }
    if t2 - t1 < 1e-9 || t3 - t2 < 1e-9 {
        return Err(Error::Analysis(format!(
            "fit_phase: singular window, pulse spacing below 1e-9 s ({t1}, {t2}, {t3})"
        )));
    }
    // Newton form through (t1, 0), (t2, Δθ), (t3, 2Δθ).
    let d01 = delta_theta / (t2 - t1);
    let d12 = delta_theta / (t3 - t2);
    let c2 = (d12 - d01) / (t3 - t1);
    let b2 = c2;
    let b1 = d01 - c2 * (t1 + t2);
    let b0 = -d01 * t1 + c2 * t1 * t2;
    // The fitted shaft must be turning forward over the whole window;
    // θ'(t) = b1 + 2·b2·t is linear, so endpoint checks suffice.
    if b1 + 2.0 * b2 * t1 <= 0.0 || b1 + 2.0 * b2 * t3 <= 0.0 {
        return Err(Error::Analysis(format!(
            "fit_phase: non-monotone fit (shaft reversal implied) over [{t1}, {t3}]"
        )));
    }
    Ok(PhaseFitCoeffs {
        b0,
        b1,
        b2,
        window: (t1, t3),
    })
}

/// Invert the window's angle model: the time at which θ(t) = `theta`,
/// taken on the increasing branch.
///
/// For |b2| ≥ [`B2_EPSILON`]: t = (√(4·b2·(θ − b0) + b1²) − b1)/(2·b2),
/// evaluated in the cancellation-free form 2·(θ − b0)/(b1 + √disc) (the
/// same root algebraically). Below the threshold the linear fallback
/// t = (θ − b0)/b1 applies.
pub fn invert_phase(coeffs: &PhaseFitCoeffs, theta: f64) -> Result<f64> {
    let delta = theta - coeffs.b0;
    if coeffs.b2.abs() < B2_EPSILON {
        if coeffs.b1.abs() < 1e-12 {
            return Err(Error::Analysis(
                "invert_phase: stalled shaft (b1 ≈ 0 and b2 ≈ 0)".into(),
            ));
        }
        return Ok(delta / coeffs.b1);
    }
    let disc = coeffs.b1 * coeffs.b1 + 4.0 * coeffs.b2 * delta;
    if disc < 0.0 {
        return Err(Error::Analysis(format!(
            "invert_phase: angle {theta} out of range for this window (negative discriminant)"
        )));
    }
    let denom = coeffs.b1 + disc.sqrt();
    if denom.abs() < 1e-300 {
        return Err(Error::Analysis(
            "invert_phase: stalled shaft (vanishing denominator)".into(),
        ));
    }
    // Equivalent to (√disc − b1)/(2·b2): the "+√" root, which is the one
    // with θ'(t) = +√disc ≥ 0, i.e. the physically increasing branch.
    Ok(2.0 * delta / denom)
}

/// Equal-angle resample times: one time per constant angle increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleGrid {
    /// Constant angle increment, radians.
    pub theta_step: f64,
    /// Starting angle, radians (0 at the first pulse).
    pub theta0: f64,
    /// Strictly increasing time per grid angle.
    pub times: Vec<f64>,
}

impl ResampleGrid {
    /// Angle of grid point `i`.
    pub fn angle_at(&self, i: usize) -> f64 {
        self.theta0 + i as f64 * self.theta_step
    }
}

/// Build the equal-angle grid over a pulse train using sliding 3-pulse
/// windows (advancing one pulse at a time).
///
/// Window i serves grid angles in [i·Δθ, (i+1)·Δθ); the final window also
/// covers through its third pulse. Total grid points =
/// floor(total_angle/theta_step) + 1.
pub fn resample_grid(pulses: &TachPulseTrain, theta_step: f64) -> Result<ResampleGrid> {
    let n = pulses.times.len();
    if n < 3 {
        return Err(Error::Analysis(format!(
            "resample_grid: need at least 3 tach pulses, got {n}"
        )));
    }
    if !(theta_step > 0.0 && theta_step <= pulses.delta_theta) {
        return Err(Error::Analysis(format!(
            "resample_grid: theta_step {} outside (0, Δθ = {}]",
            theta_step, pulses.delta_theta
        )));
    }
    let dt = pulses.delta_theta;
    let total_angle = (n - 1) as f64 * dt;
    let points = (total_angle / theta_step).floor() as usize + 1;
    let mut times = Vec::with_capacity(points);

    let mut window_idx = usize::MAX; // force initial fit
    let mut coeffs = PhaseFitCoeffs {
        b0: 0.0,
        b1: 1.0,
        b2: 0.0,
        window: (0.0, 0.0),
    };
    let mut window_t1 = 0.0;
    for k in 0..points {
        let theta_total = k as f64 * theta_step;
        // Window serving this angle; clamp so the tail reuses the last one.
        let w = ((theta_total / dt).floor() as usize).min(n - 3);
        if w != window_idx {
            // Shift window times to a local origin: keeps the quadratic
            // well-conditioned however long the run is.
            let t1 = pulses.times[w];
            let local = [0.0, pulses.times[w + 1] - t1, pulses.times[w + 2] - t1];
            coeffs = fit_phase(local, dt)?;
            window_idx = w;
            window_t1 = t1;
        }
        let theta_local = theta_total - window_idx as f64 * dt;
        let t = window_t1 + invert_phase(&coeffs, theta_local)?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::Analysis(format!(
                    "resample_grid: non-increasing grid time at point {k} ({t} after {prev})"
                )));
            }
        }
        times.push(t);
    }
    Ok(ResampleGrid {
        theta_step,
        theta0: 0.0,
        times,
    })
}

/// Linearly interpolate uniformly sampled values at the grid times.
///
/// `t0`/`rate` describe the signal's sample instants; every grid time must
/// lie within the sampled span.
pub fn resample_signal(values: &[f64], t0: f64, rate: f64, grid: &ResampleGrid) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Analysis(
            "resample_signal: need at least 2 samples".into(),
        ));
    }
    let t_last = t0 + (values.len() - 1) as f64 / rate;
    let mut out = Vec::with_capacity(grid.times.len());
    for (i, &t) in grid.times.iter().enumerate() {
        if t < t0 - 1e-12 || t > t_last + 1e-12 {
            return Err(Error::Analysis(format!(
                "resample_signal: grid time {t} (index {i}) outside signal span [{t0}, {t_last}]"
            )));
        }
        let pos = ((t - t0) * rate).clamp(0.0, (values.len() - 1) as f64);
        let idx = (pos.floor() as usize).min(values.len() - 2);
        let frac = pos - idx as f64;
        out.push(values[idx] * (1.0 - frac) + values[idx + 1] * frac);
    }
    Ok(out)
}

/// Single-sided amplitude spectrum over the order axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSpectrum {
    /// Orders per bin = 1/revolutions.
    pub order_resolution: f64,
    /// Non-negative amplitudes, length N/2 + 1, same units as the input.
    pub amplitudes: Vec<f64>,
    /// Revolutions spanned by the analyzed block.
    pub revolutions: f64,
}

impl OrderSpectrum {
    /// Order of bin `i`.
    pub fn order_at(&self, i: usize) -> f64 {
        i as f64 * self.order_resolution
    }

    /// Maximum amplitude within ±`half_width` orders of `center`.
    pub fn band_max(&self, center: f64, half_width: f64) -> f64 {
        let lo = ((center - half_width) / self.order_resolution).ceil().max(0.0) as usize;
        let hi = ((center + half_width) / self.order_resolution).floor() as usize;
        self.amplitudes
            .get(lo..=hi.min(self.amplitudes.len().saturating_sub(1)))
            .map(|s| s.iter().cloned().fold(0.0, f64::max))
            .unwrap_or(0.0)
    }

    /// Highest resolvable order (Nyquist of the angle sampling).
    pub fn max_order(&self) -> f64 {
        (self.amplitudes.len() - 1) as f64 * self.order_resolution
    }
}

/// Hann-windowed FFT of equal-angle samples into a single-sided amplitude
/// spectrum over orders.
///
/// Normalization divides by N times the window's coherent gain (0.5 for the
/// periodic Hann), doubled for the interior bins, so a unit-amplitude
/// order-k sinusoid spanning whole revolutions reads 1.0 at order k.
pub fn order_spectrum(angle_samples: &[f64], theta_step: f64) -> Result<OrderSpectrum> {
    let n = angle_samples.len();
    if n < 8 {
        return Err(Error::Analysis(format!(
            "order_spectrum: need at least 8 samples, got {n}"
        )));
    }
    if !(theta_step > 0.0) {
        return Err(Error::Analysis(format!(
            "order_spectrum: theta_step must be > 0, got {theta_step}"
        )));
    }
    let revolutions = n as f64 * theta_step / (2.0 * PI);

    // Periodic Hann: coherent gain exactly 0.5.
    let mut buf: Vec<Complex<f64>> = angle_samples
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos());
            Complex::new(v * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let coherent_gain = 0.5;
    let half = n / 2;
    let mut amplitudes = Vec::with_capacity(half + 1);
    for (k, c) in buf.iter().take(half + 1).enumerate() {
        let scale = if k == 0 || (n % 2 == 0 && k == half) {
            1.0
        } else {
            2.0
        };
        amplitudes.push(scale * c.norm() / (n as f64 * coherent_gain));
    }
    Ok(OrderSpectrum {
        order_resolution: 1.0 / revolutions,
        amplitudes,
        revolutions,
    })
}

/// Largest FFT block length that spans whole revolutions, preferring
/// power-of-two sample counts.
///
/// With the default 64 samples/rev any power-of-two revolution count gives
/// a power-of-two block; if theta_step doesn't divide a revolution into a
/// power-of-two count, whole revolutions win (leakage dominates) and the
/// largest whole-revolution multiple is returned.
pub fn whole_rev_block_len(available: usize, theta_step: f64) -> Option<usize> {
    let per_rev = (2.0 * PI / theta_step).round();
    if !(per_rev >= 1.0) || ((2.0 * PI / theta_step) - per_rev).abs() > 1e-6 {
        // theta_step not a whole-rev divisor: fall back to power of two.
        if available < 8 {
            return None;
        }
        return Some(1usize << (usize::BITS - 1 - available.leading_zeros()));
    }
    let per_rev = per_rev as usize;
    let revs = available / per_rev;
    if revs == 0 {
        return None;
    }
    if per_rev.is_power_of_two() {
        let revs_pow2 = 1usize << (usize::BITS - 1 - (revs as u32).leading_zeros() as u32);
        Some(revs_pow2 as usize * per_rev)
    } else {
        Some(revs * per_rev)
    }
}

/// One watched order compared against the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderFinding {
    pub order: f64,
    pub healthy_amplitude: f64,
    pub measured_amplitude: f64,
    pub ratio: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Healthy,
    Faulty,
}

/// Outcome of comparing a measured order spectrum against a healthy
/// baseline at the watched orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub findings: Vec<OrderFinding>,
    pub verdict: Verdict,
    pub flagged_orders: Vec<f64>,
}

/// Flag watched orders whose measured band amplitude exceeds both the
/// ratio threshold times the baseline and the absolute floor.
///
/// Band amplitudes are the max within ±0.5 order of each watched order.
pub fn diagnose(
    measured: &OrderSpectrum,
    baseline: &OrderSpectrum,
    watch_orders: &[f64],
    ratio_threshold: f64,
    floor: f64,
) -> Result<DiagnosisReport> {
    let rel = (measured.order_resolution - baseline.order_resolution).abs()
        / baseline.order_resolution;
    if rel > 0.01 {
        return Err(Error::Analysis(format!(
            "diagnose: incompatible spectra, order resolutions {} vs {} differ by {:.1}%",
            measured.order_resolution,
            baseline.order_resolution,
            rel * 100.0
        )));
    }
    for &w in watch_orders {
        if w > measured.max_order() || w > baseline.max_order() {
            return Err(Error::Analysis(format!(
                "diagnose: watched order {w} beyond spectral range {:.1}",
                measured.max_order().min(baseline.max_order())
            )));
        }
    }
    let mut findings = Vec::with_capacity(watch_orders.len());
    let mut flagged_orders = Vec::new();
    for &order in watch_orders {
        let measured_amplitude = measured.band_max(order, 0.5);
        let healthy_amplitude = baseline.band_max(order, 0.5);
        let limit = (ratio_threshold * healthy_amplitude).max(floor);
        let flagged = measured_amplitude > limit;
        let ratio = if healthy_amplitude > 0.0 {
            measured_amplitude / healthy_amplitude
        } else {
            f64::INFINITY
        };
        if flagged {
            flagged_orders.push(order);
        }
        findings.push(OrderFinding {
            order,
            healthy_amplitude,
            measured_amplitude,
            ratio,
            flagged,
        });
    }
    let verdict = if flagged_orders.is_empty() {
        Verdict::Healthy
    } else {
        Verdict::Faulty
    };
    Ok(DiagnosisReport {
        findings,
        verdict,
        flagged_orders,
    })
}
