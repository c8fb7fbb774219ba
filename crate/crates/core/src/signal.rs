//! Deterministic motor simulator: synthetic vibration, tachometer and
//! auxiliary channels standing in for the hardware acquisition layer.
//!
//! The shaft angle for piecewise-linear-RPM profiles is computed in closed
//! form (quadratic per segment), so tachometer pulse times and order-locked
//! vibration components are exact and testable against hand-derived values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Sensor channel classes modeled by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    VibrationX,
    VibrationY,
    VibrationZ,
    Tachometer,
    Temperature,
    Current,
    Voltage,
}

impl ChannelKind {
    pub fn is_vibration(self) -> bool {
        matches!(
            self,
            ChannelKind::VibrationX | ChannelKind::VibrationY | ChannelKind::VibrationZ
        )
    }

    /// Wire/recording code for this kind.
    pub fn code(self) -> u8 {
        match self {
            ChannelKind::VibrationX => 0,
            ChannelKind::VibrationY => 1,
            ChannelKind::VibrationZ => 2,
            ChannelKind::Tachometer => 3,
            ChannelKind::Temperature => 4,
            ChannelKind::Current => 5,
            ChannelKind::Voltage => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ChannelKind::VibrationX,
            1 => ChannelKind::VibrationY,
            2 => ChannelKind::VibrationZ,
            3 => ChannelKind::Tachometer,
            4 => ChannelKind::Temperature,
            5 => ChannelKind::Current,
            6 => ChannelKind::Voltage,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::VibrationX => "vibration_x",
            ChannelKind::VibrationY => "vibration_y",
            ChannelKind::VibrationZ => "vibration_z",
            ChannelKind::Tachometer => "tachometer",
            ChannelKind::Temperature => "temperature",
            ChannelKind::Current => "current",
            ChannelKind::Voltage => "voltage",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "vibration_x" | "x" => ChannelKind::VibrationX,
            "vibration_y" | "y" => ChannelKind::VibrationY,
            "vibration_z" | "z" => ChannelKind::VibrationZ,
            "tachometer" | "tach" => ChannelKind::Tachometer,
            "temperature" | "temp" => ChannelKind::Temperature,
            "current" => ChannelKind::Current,
            "voltage" => ChannelKind::Voltage,
            _ => return None,
        })
    }
}

/// Sampling-rate limits per channel class.
pub const VIBRATION_RATE_MIN: f64 = 1_000.0;
pub const VIBRATION_RATE_MAX: f64 = 25_000.0;
pub const AUX_RATE_MIN: f64 = 1.0;
pub const AUX_RATE_MAX: f64 = 10_000.0;

/// One acquisition channel: identity, class, rate and the affine map from
/// raw readings to physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub id: u16,
    pub kind: ChannelKind,
    pub sample_rate: f64,
    pub gain: f64,
    pub offset: f64,
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = if self.kind.is_vibration() {
            (VIBRATION_RATE_MIN, VIBRATION_RATE_MAX)
        } else {
            (AUX_RATE_MIN, AUX_RATE_MAX)
        };
        if !(self.sample_rate >= lo && self.sample_rate <= hi) {
            return Err(Error::Config(format!(
                "channel {}: sample_rate {} outside [{}, {}] for kind {}",
                self.id,
                self.sample_rate,
                lo,
                hi,
                self.kind.name()
            )));
        }
        if !self.gain.is_finite() || self.gain == 0.0 {
            return Err(Error::Config(format!(
                "channel {}: gain must be finite and nonzero, got {}",
                self.id, self.gain
            )));
        }
        if !self.offset.is_finite() {
            return Err(Error::Config(format!(
                "channel {}: offset must be finite",
                self.id
            )));
        }
        Ok(())
    }
}

/// A timestamped block of raw samples for one channel; the pipeline's unit
/// of flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFrame {
    pub channel_id: u16,
    /// Seconds since run start, time of the first sample.
    pub t0: f64,
    pub sample_rate: f64,
    pub values: Vec<f64>,
    /// Monotone frame counter per channel, no gaps at the source.
    pub sequence: u64,
}

impl SampleFrame {
    /// Time of sample `i`.
    pub fn sample_time(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.sample_rate
    }

    /// Time just past the last sample (t0 of the next contiguous frame).
    pub fn end_time(&self) -> f64 {
        self.t0 + self.values.len() as f64 / self.sample_rate
    }

    pub fn rms(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64).sqrt()
    }
}

/// Ordered tachometer pulse timestamps with the per-pulse angle increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TachPulseTrain {
    /// Strictly increasing pulse times, seconds.
    pub times: Vec<f64>,
    /// Shaft angle advanced between consecutive pulses, radians.
    pub delta_theta: f64,
}

impl TachPulseTrain {
    pub fn new(times: Vec<f64>, delta_theta: f64) -> Self {
        debug_assert!(delta_theta > 0.0);
        debug_assert!(times.windows(2).all(|w| w[1] > w[0]));
        TachPulseTrain { times, delta_theta }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// One leg of the speed profile: RPM ramps linearly from `rpm_start` to
/// `rpm_end` over `duration` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedSegment {
    pub duration: f64,
    pub rpm_start: f64,
    pub rpm_end: f64,
}

/// A rotation-locked vibration component: `amplitude · sin(order·θ + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderComponent {
    pub order: f64,
    pub amplitude: f64,
    pub phase: f64,
}

/// Order components per vibration axis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisComponents {
    pub x: Vec<OrderComponent>,
    pub y: Vec<OrderComponent>,
    pub z: Vec<OrderComponent>,
}

impl AxisComponents {
    /// Same component set on all three axes.
    pub fn all_axes(components: Vec<OrderComponent>) -> Self {
        AxisComponents {
            x: components.clone(),
            y: components.clone(),
            z: components,
        }
    }

    pub fn for_axis(&self, kind: ChannelKind) -> &[OrderComponent] {
        match kind {
            ChannelKind::VibrationX => &self.x,
            ChannelKind::VibrationY => &self.y,
            ChannelKind::VibrationZ => &self.z,
            _ => &[],
        }
    }
}

/// A step change injected on an auxiliary channel at time `t` (for
/// threshold tests).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxStep {
    pub kind: ChannelKind,
    pub t: f64,
    pub delta: f64,
}

/// Deterministic synthetic motor: speed profile, rotation-locked vibration
/// components, noise level and auxiliary channel baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotorProfile {
    pub speed_segments: Vec<SpeedSegment>,
    pub components: AxisComponents,
    /// Gaussian noise on vibration channels, m/s².
    pub noise_sigma: f64,
    /// Gaussian noise on auxiliary channels, physical units.
    pub aux_noise_sigma: f64,
    pub temperature_base: f64,
    pub current_base: f64,
    pub voltage_base: f64,
    pub pulses_per_rev: u32,
    pub aux_steps: Vec<AuxStep>,
}

impl Default for MotorProfile {
    fn default() -> Self {
        MotorProfile {
            speed_segments: vec![SpeedSegment {
                duration: 60.0,
                rpm_start: 600.0,
                rpm_end: 600.0,
            }],
            components: AxisComponents::default(),
            noise_sigma: 0.0,
            aux_noise_sigma: 0.0,
            temperature_base: 25.0,
            current_base: 10.0,
            voltage_base: 380.0,
            pulses_per_rev: 1,
            aux_steps: Vec::new(),
        }
    }
}

impl MotorProfile {
    pub fn validate(&self) -> Result<()> {
        if self.speed_segments.is_empty() {
            return Err(Error::Config("profile: at least one speed segment required".into()));
        }
        for (i, seg) in self.speed_segments.iter().enumerate() {
            if !(seg.duration > 0.0) {
                return Err(Error::Config(format!(
                    "profile.speed[{i}]: duration must be > 0, got {}",
                    seg.duration
                )));
            }
            if !(seg.rpm_start > 0.0 && seg.rpm_end > 0.0) {
                return Err(Error::Config(format!(
                    "profile.speed[{i}]: rpm values must be > 0"
                )));
            }
        }
        for (axis, comps) in [("x", &self.components.x), ("y", &self.components.y), ("z", &self.components.z)] {
            for c in comps.iter() {
                if !(c.order > 0.0) {
                    return Err(Error::Config(format!(
                        "profile.order ({axis}): order must be > 0, got {}",
                        c.order
                    )));
                }
                if !(c.amplitude >= 0.0) {
                    return Err(Error::Config(format!(
                        "profile.order ({axis}): amplitude must be >= 0, got {}",
                        c.amplitude
                    )));
                }
            }
        }
        if self.pulses_per_rev < 1 {
            return Err(Error::Config("profile: pulses_per_rev must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.aux_noise_sigma >= 0.0) {
            return Err(Error::Config("profile: noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Cumulative shaft angle θ(t) in radians, θ(0) = 0.
    ///
    /// Each segment contributes a closed-form quadratic; past the last
    /// segment the shaft holds the final RPM.
    pub fn shaft_angle(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        let mut theta = 0.0;
        let mut t_seg = 0.0;
        for seg in &self.speed_segments {
            let w0 = seg.rpm_start * RPM_TO_RAD;
            let w1 = seg.rpm_end * RPM_TO_RAD;
            if t < t_seg + seg.duration {
                let tau = t - t_seg;
                return theta + w0 * tau + (w1 - w0) * tau * tau / (2.0 * seg.duration);
            }
            theta += (w0 + w1) * seg.duration / 2.0;
            t_seg += seg.duration;
        }
        // Hold the final speed.
        let w_end = self.speed_segments.last().unwrap().rpm_end * RPM_TO_RAD;
        theta + w_end * (t - t_seg)
    }

    /// Instantaneous shaft speed dθ/dt in rad/s.
    pub fn shaft_speed(&self, t: f64) -> f64 {
        let mut t_seg = 0.0;
        for seg in &self.speed_segments {
            if t < t_seg + seg.duration {
                let frac = (t - t_seg) / seg.duration;
                return (seg.rpm_start + (seg.rpm_end - seg.rpm_start) * frac) * RPM_TO_RAD;
            }
            t_seg += seg.duration;
        }
        self.speed_segments.last().unwrap().rpm_end * RPM_TO_RAD
    }

    /// Instantaneous speed in RPM.
    pub fn rpm_at(&self, t: f64) -> f64 {
        self.shaft_speed(t) / RPM_TO_RAD
    }

    /// Auxiliary channel base value plus any steps active at `t` (noise-free).
    pub fn aux_value(&self, kind: ChannelKind, t: f64) -> f64 {
        let base = match kind {
            ChannelKind::Temperature => self.temperature_base,
            ChannelKind::Current => self.current_base,
            ChannelKind::Voltage => self.voltage_base,
            _ => 0.0,
        };
        base + self
            .aux_steps
            .iter()
            .filter(|s| s.kind == kind && t >= s.t)
            .map(|s| s.delta)
            .sum::<f64>()
    }
}

const RPM_TO_RAD: f64 = 2.0 * PI / 60.0;

/// Deterministic per-frame RNG stream: frames depend only on
/// (seed, channel, sequence), never on generation order.
fn frame_rng(seed: u64, channel_id: u16, sequence: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(
        splitmix(seed ^ 0x6d6f_7472_6d6f_6e00) ^ (u64::from(channel_id) << 32) ^ sequence,
    ))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Synthesize one vibration frame: the sum of rotation-locked order
/// components for the channel's axis plus seeded Gaussian noise.
pub fn synth_vibration(
    profile: &MotorProfile,
    spec: &ChannelSpec,
    t0: f64,
    n: usize,
    sequence: u64,
    seed: u64,
) -> Result<SampleFrame> {
    if n == 0 {
        return Err(Error::Config("synth_vibration: n must be > 0".into()));
    }
    if !spec.kind.is_vibration() {
        return Err(Error::Config(format!(
            "synth_vibration: channel {} is {}, not a vibration axis",
            spec.id,
            spec.kind.name()
        )));
    }
    spec.validate()?;
    let comps = profile.components.for_axis(spec.kind);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let t = t0 + i as f64 / spec.sample_rate;
        let theta = profile.shaft_angle(t);
        let v: f64 = comps
            .iter()
            .map(|c| c.amplitude * (c.order * theta + c.phase).sin())
            .sum();
        values.push(v);
    }
    if profile.noise_sigma > 0.0 {
        let mut rng = frame_rng(seed, spec.id, sequence);
        let normal = Normal::new(0.0, profile.noise_sigma).expect("sigma validated");
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(SampleFrame {
        channel_id: spec.id,
        t0,
        sample_rate: spec.sample_rate,
        values,
        sequence,
    })
}

/// Synthesize one auxiliary frame (temperature / current / voltage):
/// base value plus step injections plus optional seeded noise.
pub fn synth_aux(
    profile: &MotorProfile,
    spec: &ChannelSpec,
    t0: f64,
    n: usize,
    sequence: u64,
    seed: u64,
) -> Result<SampleFrame> {
    if n == 0 {
        return Err(Error::Config("synth_aux: n must be > 0".into()));
    }
    spec.validate()?;
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let t = t0 + i as f64 / spec.sample_rate;
        values.push(profile.aux_value(spec.kind, t));
    }
    if profile.aux_noise_sigma > 0.0 {
        let mut rng = frame_rng(seed, spec.id, sequence);
        let normal = Normal::new(0.0, profile.aux_noise_sigma).expect("sigma validated");
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(SampleFrame {
        channel_id: spec.id,
        t0,
        sample_rate: spec.sample_rate,
        values,
        sequence,
    })
}

/// Tachometer pulse times over [0, t_end]: the exact solutions of
/// θ(t) = m·(2π/pulses_per_rev), m = 0, 1, 2, …
///
/// Each segment's angle is quadratic in local time, so every crossing is a
/// closed-form quadratic root; no numerical integration.
pub fn synth_tach(profile: &MotorProfile, t_end: f64) -> Result<TachPulseTrain> {
    if !(t_end > 0.0) {
        return Err(Error::Config(format!("synth_tach: t_end must be > 0, got {t_end}")));
    }
    profile.validate()?;
    let delta_theta = 2.0 * PI / f64::from(profile.pulses_per_rev);
    let theta_end = profile.shaft_angle(t_end);
    let n_pulses = (theta_end / delta_theta).floor() as u64 + 1;
    let mut times = Vec::with_capacity(n_pulses as usize);

    // Walk segments, solving lin·τ + quad·τ² = target within each.
    let mut seg_t0 = 0.0;
    let mut seg_theta0 = 0.0;
    let mut m: u64 = 0;
    'segments: for (idx, seg) in profile.speed_segments.iter().enumerate() {
        let w0 = seg.rpm_start * RPM_TO_RAD;
        let w1 = seg.rpm_end * RPM_TO_RAD;
        let lin = w0;
        let quad = (w1 - w0) / (2.0 * seg.duration);
        let seg_angle = lin * seg.duration + quad * seg.duration * seg.duration;
        let is_last = idx == profile.speed_segments.len() - 1;
        loop {
            let target = m as f64 * delta_theta - seg_theta0;
            let t = if target <= seg_angle {
                seg_t0 + solve_angle(lin, quad, target)
            } else if is_last {
                // Past the profile: constant rpm_end extension.
                seg_t0 + seg.duration + (target - seg_angle) / (seg.rpm_end * RPM_TO_RAD)
            } else {
                // Crossing belongs to a later segment.
                seg_theta0 += seg_angle;
                seg_t0 += seg.duration;
                continue 'segments;
            };
            if t > t_end + 1e-12 {
                break 'segments;
            }
            times.push(t);
            m += 1;
        }
    }
    Ok(TachPulseTrain::new(times, delta_theta))
}

/// Positive root of `lin·τ + quad·τ² = target` (target ≥ 0, lin > 0),
/// in a cancellation-free form.
fn solve_angle(lin: f64, quad: f64, target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    if quad.abs() < 1e-300 {
        return target / lin;
    }
    let disc = lin * lin + 4.0 * quad * target;
    debug_assert!(disc >= 0.0, "monotone profile guarantees solvability");
    2.0 * target / (lin + disc.sqrt())
}
