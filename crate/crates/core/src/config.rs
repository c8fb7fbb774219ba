//! Run configuration: a sectioned TOML file covering channels, the motor
//! profile (or a replay source), thresholds, analysis and archive settings.
//! Everything is validated up front with field-precise messages so a bad
//! config never reaches the pipeline.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use crate::archive::{RunId, DEFAULT_ARCHIVE_PERIOD};
use crate::error::{Error, Result};
use crate::order::DEFAULT_THETA_STEP;
use crate::preprocess::PreprocessSettings;
use crate::signal::{
    AuxStep, AxisComponents, ChannelKind, ChannelSpec, MotorProfile, OrderComponent, SpeedSegment,
};
use crate::threshold::{ThresholdMode, ThresholdSpec};

/// One configured channel: acquisition spec plus preprocessing settings.
#[derive(Debug, Clone)]
pub struct ChannelConfig {
    pub spec: ChannelSpec,
    pub preprocess: PreprocessSettings,
}

#[derive(Debug, Clone)]
pub struct AnalysisSettings {
    pub enabled: bool,
    pub theta_step: f64,
    /// Revolutions per analysis block (power of two keeps FFT blocks
    /// power-of-two at the default 64 samples/rev).
    pub block_revolutions: u32,
    pub watch_orders: Vec<f64>,
    pub ratio_threshold: f64,
    pub floor: f64,
    /// Healthy run whose stored spectra serve as the baseline.
    pub baseline_id: Option<RunId>,
    /// Store this run's spectra flagged as baseline.
    pub record_baseline: bool,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            enabled: true,
            theta_step: DEFAULT_THETA_STEP,
            block_revolutions: 8,
            watch_orders: vec![10.0, 14.0],
            ratio_threshold: 5.0,
            floor: 0.05,
            baseline_id: None,
            record_baseline: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArchiveSettings {
    pub period: f64,
    pub store: PathBuf,
    pub remote: Option<String>,
    /// Optional raw recording retained alongside the relational store.
    pub recording: Option<PathBuf>,
}

/// Fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub duration: f64,
    pub seed: u64,
    /// Pace producers against the wall clock (live operation) instead of
    /// free-running (batch/benchmark).
    pub realtime: bool,
    pub channels: Vec<ChannelConfig>,
    pub profile: MotorProfile,
    /// Replay this recording instead of synthesizing from the profile.
    pub replay_path: Option<PathBuf>,
    pub thresholds: Vec<ThresholdSpec>,
    pub analysis: AnalysisSettings,
    pub archive: ArchiveSettings,
    /// Original config text, archived with the run.
    pub raw_text: String,
}

impl RunConfig {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        raw.into_config(text)
    }

    pub fn run_id(&self) -> RunId {
        RunId::from_seed(self.seed)
    }

    pub fn channel(&self, id: u16) -> Option<&ChannelConfig> {
        self.channels.iter().find(|c| c.spec.id == id)
    }

    pub fn vibration_channels(&self) -> impl Iterator<Item = &ChannelConfig> {
        self.channels.iter().filter(|c| c.spec.kind.is_vibration())
    }

    pub fn tach_channel(&self) -> Option<&ChannelConfig> {
        self.channels
            .iter()
            .find(|c| c.spec.kind == ChannelKind::Tachometer)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration >= 0.0) {
            return Err(Error::Config(format!(
                "run.duration must be >= 0, got {}",
                self.duration
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("at least one channel is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, ch) in self.channels.iter().enumerate() {
            if !seen.insert(ch.spec.id) {
                return Err(Error::Config(format!(
                    "channel[{i}]: duplicate channel id {}",
                    ch.spec.id
                )));
            }
            if ch.spec.kind != ChannelKind::Tachometer {
                ch.spec.validate()?;
            }
            ch.preprocess.validate(ch.spec.id)?;
        }
        if self.replay_path.is_none() {
            self.profile.validate()?;
        }
        for (i, th) in self.thresholds.iter().enumerate() {
            th.validate()
                .map_err(|e| Error::Config(format!("threshold[{i}]: {e}")))?;
            if !seen.contains(&th.channel_id) {
                return Err(Error::Config(format!(
                    "threshold[{i}]: references unknown channel {}",
                    th.channel_id
                )));
            }
        }
        let a = &self.analysis;
        if a.enabled {
            let delta_theta =
                2.0 * std::f64::consts::PI / f64::from(self.profile.pulses_per_rev.max(1));
            if !(a.theta_step > 0.0 && a.theta_step <= delta_theta) {
                return Err(Error::Config(format!(
                    "analysis.theta_step {} outside (0, Δθ = {delta_theta}]",
                    a.theta_step
                )));
            }
            if a.block_revolutions < 1 {
                return Err(Error::Config(
                    "analysis.block_revolutions must be >= 1".into(),
                ));
            }
            if !(a.ratio_threshold > 0.0) {
                return Err(Error::Config(
                    "analysis.ratio_threshold must be > 0".into(),
                ));
            }
            if !(a.floor >= 0.0) {
                return Err(Error::Config("analysis.floor must be >= 0".into()));
            }
            let max_order = std::f64::consts::PI / a.theta_step;
            for &w in &a.watch_orders {
                if !(w > 0.0 && w <= max_order) {
                    return Err(Error::Config(format!(
                        "analysis.watch_orders: order {w} outside (0, {max_order:.1}] \
                         resolvable at this theta_step"
                    )));
                }
            }
        }
        if !(self.archive.period > 0.0) {
            return Err(Error::Config(format!(
                "archive.period must be > 0, got {}",
                self.archive.period
            )));
        }
        Ok(())
    }
}

// --- raw TOML shape ---------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    run: RawRun,
    #[serde(default, rename = "channel")]
    channels: Vec<RawChannel>,
    #[serde(default)]
    profile: RawProfile,
    #[serde(default)]
    source: RawSource,
    #[serde(default, rename = "threshold")]
    thresholds: Vec<RawThreshold>,
    #[serde(default)]
    analysis: RawAnalysis,
    archive: RawArchive,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    duration: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    realtime: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    id: u16,
    kind: String,
    #[serde(default)]
    sample_rate: Option<f64>,
    #[serde(default = "one")]
    gain: f64,
    #[serde(default)]
    offset: f64,
    #[serde(default)]
    filter_enabled: Option<bool>,
    #[serde(default)]
    q: Option<f64>,
    #[serde(default)]
    r: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    #[serde(default, rename = "speed")]
    speed_segments: Vec<RawSpeed>,
    #[serde(default, rename = "order")]
    orders: Vec<RawOrder>,
    #[serde(default, rename = "step")]
    steps: Vec<RawStep>,
    #[serde(default)]
    noise_sigma: f64,
    #[serde(default)]
    aux_noise_sigma: f64,
    #[serde(default)]
    temperature_base: Option<f64>,
    #[serde(default)]
    current_base: Option<f64>,
    #[serde(default)]
    voltage_base: Option<f64>,
    #[serde(default)]
    pulses_per_rev: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpeed {
    duration: f64,
    rpm_start: f64,
    rpm_end: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOrder {
    /// "x" | "y" | "z" | "all"
    #[serde(default = "all_axes")]
    axis: String,
    order: f64,
    amplitude: f64,
    #[serde(default)]
    phase: f64,
}

fn all_axes() -> String {
    "all".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    kind: String,
    t: f64,
    delta: f64,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSource {
    #[serde(default)]
    replay: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawThreshold {
    channel: u16,
    lower: f64,
    upper: f64,
    #[serde(default)]
    hysteresis: f64,
    #[serde(default = "one_u32")]
    min_violations: u32,
    #[serde(default)]
    mode: Option<String>,
}

fn one_u32() -> u32 {
    1
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    #[serde(default)]
    enabled: Option<bool>,
    #[serde(default)]
    theta_step: Option<f64>,
    #[serde(default)]
    block_revolutions: Option<u32>,
    #[serde(default)]
    watch_orders: Option<Vec<f64>>,
    #[serde(default)]
    ratio_threshold: Option<f64>,
    #[serde(default)]
    floor: Option<f64>,
    #[serde(default)]
    baseline_id: Option<String>,
    #[serde(default)]
    record_baseline: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArchive {
    #[serde(default)]
    period: Option<f64>,
    store: PathBuf,
    #[serde(default)]
    remote: Option<String>,
    #[serde(default)]
    recording: Option<PathBuf>,
}

impl RawConfig {
    fn into_config(self, text: &str) -> Result<RunConfig> {
        let mut channels = Vec::with_capacity(self.channels.len());
        for (i, raw) in self.channels.iter().enumerate() {
            let kind = ChannelKind::parse(&raw.kind).ok_or_else(|| {
                Error::Config(format!("channel[{i}]: unknown kind \"{}\"", raw.kind))
            })?;
            let sample_rate = match (raw.sample_rate, kind) {
                (Some(r), _) => r,
                (None, ChannelKind::Tachometer) => 1.0,
                (None, _) => {
                    return Err(Error::Config(format!(
                        "channel[{i}] (id {}): sample_rate is required",
                        raw.id
                    )))
                }
            };
            let spec = ChannelSpec {
                id: raw.id,
                kind,
                sample_rate,
                gain: raw.gain,
                offset: raw.offset,
            };
            let mut preprocess = PreprocessSettings::default_for(&spec);
            if let Some(enabled) = raw.filter_enabled {
                preprocess.filter_enabled = enabled;
            }
            if let Some(q) = raw.q {
                preprocess.q = q;
            }
            if let Some(r) = raw.r {
                preprocess.r = r;
            }
            channels.push(ChannelConfig { spec, preprocess });
        }

        let mut components = AxisComponents::default();
        for (i, raw) in self.profile.orders.iter().enumerate() {
            let comp = OrderComponent {
                order: raw.order,
                amplitude: raw.amplitude,
                phase: raw.phase,
            };
            match raw.axis.as_str() {
                "x" => components.x.push(comp),
                "y" => components.y.push(comp),
                "z" => components.z.push(comp),
                "all" => {
                    components.x.push(comp);
                    components.y.push(comp);
                    components.z.push(comp);
                }
                other => {
                    return Err(Error::Config(format!(
                        "profile.order[{i}]: axis must be x, y, z or all, got \"{other}\""
                    )))
                }
            }
        }
        let mut aux_steps = Vec::with_capacity(self.profile.steps.len());
        for (i, raw) in self.profile.steps.iter().enumerate() {
            let kind = ChannelKind::parse(&raw.kind).ok_or_else(|| {
                Error::Config(format!("profile.step[{i}]: unknown kind \"{}\"", raw.kind))
            })?;
            aux_steps.push(AuxStep {
                kind,
                t: raw.t,
                delta: raw.delta,
            });
        }
        let defaults = MotorProfile::default();
        let profile = MotorProfile {
            speed_segments: if self.profile.speed_segments.is_empty() {
                defaults.speed_segments.clone()
            } else {
                self.profile
                    .speed_segments
                    .iter()
                    .map(|s| SpeedSegment {
                        duration: s.duration,
                        rpm_start: s.rpm_start,
                        rpm_end: s.rpm_end,
                    })
                    .collect()
            },
            components,
            noise_sigma: self.profile.noise_sigma,
            aux_noise_sigma: self.profile.aux_noise_sigma,
            temperature_base: self.profile.temperature_base.unwrap_or(defaults.temperature_base),
            current_base: self.profile.current_base.unwrap_or(defaults.current_base),
            voltage_base: self.profile.voltage_base.unwrap_or(defaults.voltage_base),
            pulses_per_rev: self.profile.pulses_per_rev.unwrap_or(1),
            aux_steps,
        };

        let mut thresholds = Vec::with_capacity(self.thresholds.len());
        for (i, raw) in self.thresholds.iter().enumerate() {
            let channel_kind = channels
                .iter()
                .find(|c| c.spec.id == raw.channel)
                .map(|c| c.spec.kind);
            let mode = match raw.mode.as_deref() {
                Some("samples") => ThresholdMode::Samples,
                Some("frame_rms") => ThresholdMode::FrameRms,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "threshold[{i}]: mode must be \"samples\" or \"frame_rms\", got \"{other}\""
                    )))
                }
                None => match channel_kind {
                    Some(k) if k.is_vibration() => ThresholdMode::FrameRms,
                    _ => ThresholdMode::Samples,
                },
            };
            thresholds.push(ThresholdSpec {
                channel_id: raw.channel,
                lower: raw.lower,
                upper: raw.upper,
                hysteresis: raw.hysteresis,
                min_violations: raw.min_violations,
                mode,
            });
        }

        let ad = AnalysisSettings::default();
        let baseline_id = match &self.analysis.baseline_id {
            Some(s) => Some(RunId::parse_hex(s).ok_or_else(|| {
                Error::Config(format!(
                    "analysis.baseline_id: \"{s}\" is not a 32-hex-digit run id"
                ))
            })?),
            None => None,
        };
        let analysis = AnalysisSettings {
            enabled: self.analysis.enabled.unwrap_or(ad.enabled),
            theta_step: self.analysis.theta_step.unwrap_or(ad.theta_step),
            block_revolutions: self.analysis.block_revolutions.unwrap_or(ad.block_revolutions),
            watch_orders: self.analysis.watch_orders.unwrap_or(ad.watch_orders),
            ratio_threshold: self.analysis.ratio_threshold.unwrap_or(ad.ratio_threshold),
            floor: self.analysis.floor.unwrap_or(ad.floor),
            baseline_id,
            record_baseline: self.analysis.record_baseline,
        };

        let config = RunConfig {
            duration: self.run.duration,
            seed: self.run.seed,
            realtime: self.run.realtime,
            channels,
            profile,
            replay_path: self.source.replay,
            thresholds,
            analysis,
            archive: ArchiveSettings {
                period: self.archive.period.unwrap_or(DEFAULT_ARCHIVE_PERIOD),
                store: self.archive.store,
                remote: self.archive.remote,
                recording: self.archive.recording,
            },
            raw_text: text.to_string(),
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[run]
duration = 2.0
seed = 42

[[channel]]
id = 1
kind = "vibration_x"
sample_rate = 5000.0

[[channel]]
id = 9
kind = "tachometer"

[[channel]]
id = 3
kind = "temperature"
sample_rate = 100.0

[profile]
noise_sigma = 0.0

[[profile.speed]]
duration = 2.0
rpm_start = 600.0
rpm_end = 600.0

[[profile.order]]
axis = "all"
order = 5.0
amplitude = 1.0

[[threshold]]
channel = 3
lower = 0.0
upper = 80.0
min_violations = 3

[analysis]
watch_orders = [5.0, 10.0]

[archive]
store = "run.db"
"#;

    #[test]
    fn parses_and_validates_good_config() {
        let cfg = RunConfig::from_toml_str(GOOD).unwrap();
        assert_eq!(cfg.duration, 2.0);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.channels.len(), 3);
        assert_eq!(cfg.profile.components.x.len(), 1);
        assert_eq!(cfg.thresholds.len(), 1);
        assert_eq!(cfg.thresholds[0].mode, ThresholdMode::Samples);
        assert!((cfg.analysis.theta_step - DEFAULT_THETA_STEP).abs() < 1e-15);
        assert!((cfg.archive.period - 0.01).abs() < 1e-15);
        // Slow channel defaults to filtering on; vibration defaults off.
        assert!(cfg.channel(3).unwrap().preprocess.filter_enabled);
        assert!(!cfg.channel(1).unwrap().preprocess.filter_enabled);
    }

    #[test]
    fn inverted_threshold_names_the_threshold() {
        let bad = GOOD.replace("upper = 80.0", "upper = -10.0");
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("threshold[0]"), "{msg}");
        assert!(msg.contains("lower"), "{msg}");
    }

    #[test]
    fn duplicate_channel_id_rejected() {
        let bad = GOOD.replace("id = 3", "id = 1");
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("duplicate channel id"), "{err}");
    }

    #[test]
    fn unknown_kind_rejected() {
        let bad = GOOD.replace("\"temperature\"", "\"thermals\"");
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("unknown kind"), "{err}");
    }

    #[test]
    fn threshold_unknown_channel_rejected() {
        let bad = GOOD.replace("channel = 3", "channel = 77");
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("unknown channel 77"), "{err}");
    }

    #[test]
    fn watch_order_beyond_nyquist_rejected() {
        let bad = GOOD.replace("watch_orders = [5.0, 10.0]", "watch_orders = [40.0]");
        let err = RunConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("resolvable"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let bad = format!("{GOOD}\n[extra]\nfoo = 1\n");
        assert!(RunConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn run_id_is_seed_deterministic() {
        let a = RunConfig::from_toml_str(GOOD).unwrap();
        let b = RunConfig::from_toml_str(GOOD).unwrap();
        assert_eq!(a.run_id(), b.run_id());
    }
}
