//! Raw-to-physical conversion: per-channel scalar Kalman filtering followed
//! by affine scaling (gain, offset).
//!
//! The filter is a scalar random-walk model — predict x⁻ = x̂, p⁻ = p + q;
//! gain K = p⁻/(p⁻ + r); update x̂' = x⁻ + K(z − x⁻), p' = (1 − K)p⁻.
//! Slow channels (temperature, current, voltage) default to filtering on;
//! vibration channels default to bypass, since low-passing them would
//! destroy the order components the diagnosis needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{ChannelSpec, SampleFrame};

/// Scalar random-walk Kalman state for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    /// Current estimate, raw units.
    pub x_hat: f64,
    /// Estimate variance.
    pub p: f64,
    /// Process-noise variance.
    pub q: f64,
    /// Measurement-noise variance.
    pub r: f64,
    primed: bool,
}

impl KalmanState {
    /// Primes from the first measurement: x̂₀ = z₀, p₀ = r (removes the
    /// startup transient).
    pub fn new(q: f64, r: f64) -> Self {
        debug_assert!(q >= 0.0 && r > 0.0);
        KalmanState {
            x_hat: 0.0,
            p: r,
            q,
            r,
            primed: false,
        }
    }

    /// Explicit initial estimate and variance.
    pub fn with_initial(x0: f64, p0: f64, q: f64, r: f64) -> Self {
        debug_assert!(p0 > 0.0 && q >= 0.0 && r > 0.0);
        KalmanState {
            x_hat: x0,
            p: p0,
            q,
            r,
            primed: true,
        }
    }

    /// One predict/update step; returns the filtered value.
    pub fn step(&mut self, z: f64) -> f64 {
        if !self.primed {
            self.x_hat = z;
            self.p = self.r;
            self.primed = true;
            return z;
        }
        let p_pred = self.p + self.q;
        let k = p_pred / (p_pred + self.r);
        debug_assert!(k > 0.0 && k < 1.0);
        self.x_hat += k * (z - self.x_hat);
        self.p = (1.0 - k) * p_pred;
        self.x_hat
    }
}

/// Free-function form of one filter step (state in, state out).
pub fn kalman_step(mut state: KalmanState, z: f64) -> (KalmanState, f64) {
    let filtered = state.step(z);
    (state, filtered)
}

/// Per-channel preprocessing settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSettings {
    pub filter_enabled: bool,
    pub q: f64,
    pub r: f64,
}

impl PreprocessSettings {
    /// Spec defaults: filter on with q = 1e-4·r for slow channels,
    /// bypass for vibration and tach.
    pub fn default_for(spec: &ChannelSpec) -> Self {
        let slow = !spec.kind.is_vibration()
            && spec.kind != crate::signal::ChannelKind::Tachometer;
        PreprocessSettings {
            filter_enabled: slow,
            q: 1e-4,
            r: 1.0,
        }
    }

    pub fn validate(&self, channel_id: u16) -> Result<()> {
        if !(self.q >= 0.0) {
            return Err(Error::Config(format!(
                "channel {channel_id}: kalman q must be >= 0, got {}",
                self.q
            )));
        }
        if !(self.r > 0.0) {
            return Err(Error::Config(format!(
                "channel {channel_id}: kalman r must be > 0, got {}",
                self.r
            )));
        }
        Ok(())
    }
}

/// Owns the Kalman state for one channel and applies the raw→physical map.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    spec: ChannelSpec,
    kalman: Option<KalmanState>,
}

impl Preprocessor {
    pub fn new(spec: ChannelSpec, settings: PreprocessSettings) -> Self {
        let kalman = settings
            .filter_enabled
            .then(|| KalmanState::new(settings.q, settings.r));
        Preprocessor { spec, kalman }
    }

    /// Convert a raw frame to physical units: v → gain·kalman(v) + offset,
    /// preserving timestamps and sequence; Kalman state carries across
    /// frames of the same channel.
    ///
    /// A non-finite sample rejects the whole frame and leaves the filter
    /// state untouched.
    pub fn to_physical(&mut self, frame: &SampleFrame) -> Result<SampleFrame> {
        if frame.channel_id != self.spec.id {
            return Err(Error::Data(format!(
                "routing: frame for channel {} handed to preprocessor for channel {}",
                frame.channel_id, self.spec.id
            )));
        }
        if let Some(bad) = frame.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "channel {} frame {}: non-finite sample at index {bad}",
                frame.channel_id, frame.sequence
            )));
        }
        let gain = self.spec.gain;
        let offset = self.spec.offset;
        let values = match self.kalman.as_mut() {
            Some(state) => frame
                .values
                .iter()
                .map(|&z| gain * state.step(z) + offset)
                .collect(),
            None => frame.values.iter().map(|&z| gain * z + offset).collect(),
        };
        Ok(SampleFrame {
            channel_id: frame.channel_id,
            t0: frame.t0,
            sample_rate: frame.sample_rate,
            values,
            sequence: frame.sequence,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::ChannelKind;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn vib_spec(gain: f64, offset: f64) -> ChannelSpec {
        ChannelSpec {
            id: 2,
            kind: ChannelKind::VibrationX,
            sample_rate: 1000.0,
            gain,
            offset,
        }
    }

    #[test]
    fn constant_input_converges() {
        // Independent oracle: with q = 0 information is additive, so
        // 1/p_n = 1/p0 + n/r and x_n = (x0/p0 + n·z/r)/(1/p0 + n/r).
        let mut state = KalmanState::with_initial(0.0, 100.0, 0.0, 1.0);
        let z = 3.0;
        let mut prev_err = (state.x_hat - z).abs();
        let mut last = 0.0;
        for _ in 0..50 {
            last = state.step(z);
            let err = (last - z).abs();
            assert!(err <= prev_err + 1e-15, "approach must be monotone");
            prev_err = err;
        }
        assert!((last - 3.0).abs() < 1e-3, "x_50 = {last}");
        let oracle = (0.0 / 100.0 + 50.0 * z / 1.0) / (1.0 / 100.0 + 50.0 / 1.0);
        assert!((last - oracle).abs() < 1e-12, "{last} vs oracle {oracle}");
    }

    #[test]
    fn tiny_r_tracks_measurement() {
        let mut state = KalmanState::with_initial(0.0, 1.0, 0.0, 1e-12);
        let filtered = state.step(7.5);
        assert!((filtered - 7.5).abs() < 1e-9);
    }

    #[test]
    fn huge_q_tracks_measurement_after_one_step() {
        let mut state = KalmanState::with_initial(0.0, 1.0, 1e12, 1.0);
        state.step(-4.0);
        let filtered = state.step(5.0);
        assert!((filtered - 5.0).abs() < 1e-9);
    }

    #[test]
    fn identity_configuration_passes_through() {
        // gain=1, offset=0, q huge → output equals input.
        let spec = vib_spec(1.0, 0.0);
        let mut pre = Preprocessor::new(
            spec,
            PreprocessSettings {
                filter_enabled: true,
                q: 1e12,
                r: 1.0,
            },
        );
        let frame = SampleFrame {
            channel_id: 2,
            t0: 0.0,
            sample_rate: 1000.0,
            values: vec![1.0, -2.0, 3.5, 0.25],
            sequence: 0,
        };
        let out = pre.to_physical(&frame).unwrap();
        for (got, want) in out.values.iter().zip(&frame.values) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn affine_map_applies() {
        let spec = vib_spec(2.0, 1.0);
        let mut pre = Preprocessor::new(
            spec,
            PreprocessSettings {
                filter_enabled: false,
                q: 0.0,
                r: 1.0,
            },
        );
        let frame = SampleFrame {
            channel_id: 2,
            t0: 0.0,
            sample_rate: 1000.0,
            values: vec![3.0],
            sequence: 0,
        };
        let out = pre.to_physical(&frame).unwrap();
        assert_eq!(out.values, vec![7.0]);
    }

    #[test]
    fn channel_mismatch_is_routing_error() {
        let spec = vib_spec(1.0, 0.0);
        let mut pre = Preprocessor::new(spec, PreprocessSettings::default_for(&vib_spec(1.0, 0.0)));
        let frame = SampleFrame {
            channel_id: 99,
            t0: 0.0,
            sample_rate: 1000.0,
            values: vec![1.0],
            sequence: 0,
        };
        assert!(matches!(pre.to_physical(&frame), Err(Error::Data(_))));
    }

    #[test]
    fn non_finite_sample_rejects_frame_and_preserves_state() {
        let spec = vib_spec(1.0, 0.0);
        let mut pre = Preprocessor::new(
            spec,
            PreprocessSettings {
                filter_enabled: true,
                q: 1e-4,
                r: 1.0,
            },
        );
        let good = SampleFrame {
            channel_id: 2,
            t0: 0.0,
            sample_rate: 1000.0,
            values: vec![1.0, 1.0],
            sequence: 0,
        };
        pre.to_physical(&good).unwrap();
        let state_before = pre.kalman;
        let bad = SampleFrame {
            channel_id: 2,
            t0: 0.002,
            sample_rate: 1000.0,
            values: vec![1.0, f64::NAN],
            sequence: 1,
        };
        assert!(matches!(pre.to_physical(&bad), Err(Error::Data(_))));
        assert_eq!(pre.kalman, state_before);
    }

    #[test]
    fn variance_reduction_on_noisy_constant() {
        // White noise σ=1 around mean 5, q=1e-6, r=1: output variance must
        // drop well below input variance over 10,000 samples.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let input: Vec<f64> = (0..10_000).map(|_| 5.0 + normal.sample(&mut rng)).collect();
        let mut state = KalmanState::new(1e-6, 1.0);
        let output: Vec<f64> = input.iter().map(|&z| state.step(z)).collect();
        let var = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
        };
        let (vi, vo) = (var(&input), var(&output));
        assert!(
            vo < 0.8 * vi,
            "output variance {vo} not ≥20% below input variance {vi}"
        );
    }

    #[test]
    fn replay_reproduces_identical_output() {
        let spec = vib_spec(1.5, -0.5);
        let settings = PreprocessSettings {
            filter_enabled: true,
            q: 1e-3,
            r: 0.5,
        };
        let frame = SampleFrame {
            channel_id: 2,
            t0: 0.0,
            sample_rate: 1000.0,
            values: (0..100).map(|i| (i as f64 * 0.37).sin()).collect(),
            sequence: 0,
        };
        let mut a = Preprocessor::new(spec.clone(), settings);
        let mut b = Preprocessor::new(spec, settings);
        assert_eq!(
            a.to_physical(&frame).unwrap(),
            b.to_physical(&frame).unwrap()
        );
    }
}
