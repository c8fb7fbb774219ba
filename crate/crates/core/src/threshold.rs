//! Primary analysis: per-channel upper/lower limit checks with hysteresis
//! and consecutive-violation filtering, plus the comprehensive combination
//! of limit alarms and order-fault diagnosis into a motor state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order::DiagnosisReport;
use crate::signal::SampleFrame;

/// How a channel's samples are evaluated against limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Every sample individually.
    Samples,
    /// One RMS value per frame (default for vibration: instantaneous
    /// samples of a healthy sinusoid routinely exceed naive limits).
    FrameRms,
}

/// Limit specification for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub channel_id: u16,
    pub lower: f64,
    pub upper: f64,
    /// Re-entry margin: an alarm clears only once the value is back inside
    /// [lower + hysteresis, upper − hysteresis].
    pub hysteresis: f64,
    /// Consecutive out-of-range samples required to raise.
    pub min_violations: u32,
    pub mode: ThresholdMode,
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) {
            return Err(Error::Config(format!(
                "threshold for channel {}: lower ({}) must be < upper ({})",
                self.channel_id, self.lower, self.upper
            )));
        }
        if !(self.hysteresis >= 0.0) {
            return Err(Error::Config(format!(
                "threshold for channel {}: hysteresis must be >= 0",
                self.channel_id
            )));
        }
        if self.min_violations < 1 {
            return Err(Error::Config(format!(
                "threshold for channel {}: min_violations must be >= 1",
                self.channel_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmKind {
    HighLimit,
    LowLimit,
    OrderFault,
}

impl AlarmKind {
    pub fn code(self) -> u8 {
        match self {
            AlarmKind::HighLimit => 0,
            AlarmKind::LowLimit => 1,
            AlarmKind::OrderFault => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => AlarmKind::HighLimit,
            1 => AlarmKind::LowLimit,
            2 => AlarmKind::OrderFault,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AlarmKind::HighLimit => "high_limit",
            AlarmKind::LowLimit => "low_limit",
            AlarmKind::OrderFault => "order_fault",
        }
    }
}

/// A threshold or diagnosis violation. A raise carries `cleared_t: None`;
/// the matching clear re-emits the event with `cleared_t` filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub channel_id: u16,
    pub kind: AlarmKind,
    /// First violating value (or the order amplitude ratio for OrderFault).
    pub value: f64,
    /// The violated bound (or the ratio threshold for OrderFault).
    pub limit: f64,
    /// Time of the first violating sample.
    pub t: f64,
    pub cleared_t: Option<f64>,
}

/// One direction's violation tracking.
#[derive(Debug, Clone, Copy, Default)]
struct LimitTracker {
    run_len: u32,
    run_start_t: f64,
    run_start_value: f64,
    active: bool,
    active_t: f64,
    active_value: f64,
}

/// Per-channel check state carried across frames.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckState {
    high: LimitTracker,
    low: LimitTracker,
}

impl CheckState {
    pub fn any_active(&self) -> bool {
        self.high.active || self.low.active
    }
}

/// Evaluate one frame against its channel's limits; raise and clear events
/// come back in sample order.
pub fn check_frame(
    frame: &SampleFrame,
    spec: &ThresholdSpec,
    state: &mut CheckState,
) -> Vec<AlarmEvent> {
    debug_assert_eq!(frame.channel_id, spec.channel_id);
    match spec.mode {
        ThresholdMode::Samples => {
            let rate = frame.sample_rate;
            let t0 = frame.t0;
            check_values(
                frame
                    .values
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (t0 + i as f64 / rate, v)),
                spec,
                state,
            )
        }
        ThresholdMode::FrameRms => {
            check_values(std::iter::once((frame.t0, frame.rms())), spec, state)
        }
    }
}

/// Core limit rule over an explicit (time, value) stream; used directly
/// for irregular series such as per-pulse RPM estimates.
pub fn check_values(
    samples: impl Iterator<Item = (f64, f64)>,
    spec: &ThresholdSpec,
    state: &mut CheckState,
) -> Vec<AlarmEvent> {
    let mut events = Vec::new();
    for (t, v) in samples {
        step_limit(
            &mut state.high,
            v > spec.upper,
            v <= spec.upper - spec.hysteresis,
            t,
            v,
            spec.upper,
            spec.channel_id,
            AlarmKind::HighLimit,
            spec.min_violations,
            &mut events,
        );
        step_limit(
            &mut state.low,
            v < spec.lower,
            v >= spec.lower + spec.hysteresis,
            t,
            v,
            spec.lower,
            spec.channel_id,
            AlarmKind::LowLimit,
            spec.min_violations,
            &mut events,
        );
    }
    events
}

#[allow(clippy::too_many_arguments)]
fn step_limit(
    tracker: &mut LimitTracker,
    violating: bool,
    re_entered: bool,
    t: f64,
    v: f64,
    limit: f64,
    channel_id: u16,
    kind: AlarmKind,
    min_violations: u32,
    events: &mut Vec<AlarmEvent>,
) {
    if tracker.active {
        if re_entered {
            events.push(AlarmEvent {
                channel_id,
                kind,
                value: tracker.active_value,
                limit,
                t: tracker.active_t,
                cleared_t: Some(t),
            });
            tracker.active = false;
            tracker.run_len = 0;
        }
        return;
    }
    if violating {
        if tracker.run_len == 0 {
            tracker.run_start_t = t;
            tracker.run_start_value = v;
        }
        tracker.run_len += 1;
        if tracker.run_len >= min_violations {
            tracker.active = true;
            tracker.active_t = tracker.run_start_t;
            tracker.active_value = tracker.run_start_value;
            events.push(AlarmEvent {
                channel_id,
                kind,
                value: tracker.run_start_value,
                limit,
                t: tracker.run_start_t,
                cleared_t: None,
            });
        }
    } else {
        tracker.run_len = 0;
    }
}

/// Overall motor condition, most severe first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OverallState {
    #[default]
    Healthy,
    Warning,
    Faulty,
}

impl std::fmt::Display for OverallState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OverallState::Healthy => write!(f, "Healthy"),
            OverallState::Warning => write!(f, "Warning"),
            OverallState::Faulty => write!(f, "Faulty"),
        }
    }
}

/// Comprehensive analysis result: limit alarms and order diagnosis folded
/// into one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotorState {
    pub overall: OverallState,
    pub active_alarms: Vec<AlarmEvent>,
    pub last_diagnosis: Option<DiagnosisReport>,
}

/// Fold currently active alarms and the latest diagnosis into a motor
/// state: Faulty iff an OrderFault alarm is active, Warning iff only limit
/// alarms are, Healthy otherwise.
pub fn combine(active_alarms: Vec<AlarmEvent>, diagnosis: Option<DiagnosisReport>) -> MotorState {
    let any_order_fault = active_alarms
        .iter()
        .any(|a| a.kind == AlarmKind::OrderFault);
    let overall = if any_order_fault {
        OverallState::Faulty
    } else if !active_alarms.is_empty() {
        OverallState::Warning
    } else {
        OverallState::Healthy
    };
    MotorState {
        overall,
        active_alarms,
        last_diagnosis: diagnosis,
    }
}

/// Tracks which alarms are currently active across the run; turns the
/// raise/clear event stream into an active set.
#[derive(Debug, Default, Clone)]
pub struct AlarmRegistry {
    active: Vec<AlarmEvent>,
}

impl AlarmRegistry {
    pub fn apply(&mut self, event: &AlarmEvent) {
        match event.cleared_t {
            None => self.active.push(event.clone()),
            Some(_) => self
                .active
                .retain(|a| !(a.channel_id == event.channel_id && a.kind == event.kind)),
        }
    }

    pub fn active(&self) -> &[AlarmEvent] {
        &self.active
    }

    pub fn is_active(&self, channel_id: u16, kind: AlarmKind) -> bool {
        self.active
            .iter()
            .any(|a| a.channel_id == channel_id && a.kind == kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::order::{DiagnosisReport, OrderFinding, Verdict};

    fn temp_spec() -> ThresholdSpec {
        ThresholdSpec {
            channel_id: 3,
            lower: 0.0,
            upper: 80.0,
            hysteresis: 0.0,
            min_violations: 3,
            mode: ThresholdMode::Samples,
        }
    }

    fn frame(values: Vec<f64>) -> SampleFrame {
        SampleFrame {
            channel_id: 3,
            t0: 0.0,
            sample_rate: 1.0,
            values,
            sequence: 0,
        }
    }

    #[test]
    fn in_range_samples_produce_no_events() {
        let mut state = CheckState::default();
        let events = check_frame(&frame(vec![20.0, 50.0, 79.9]), &temp_spec(), &mut state);
        assert!(events.is_empty());
    }

    #[test]
    fn raise_after_min_violations_with_first_violation_time() {
        // Hand-trace: …79, 81, 82, 83… with min_violations=3 raises on the
        // third consecutive violation; the event carries the chain start
        // (81 at t=1).
        let mut state = CheckState::default();
        let events = check_frame(&frame(vec![79.0, 81.0, 82.0, 83.0]), &temp_spec(), &mut state);
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!(e.kind, AlarmKind::HighLimit);
        assert_eq!(e.t, 1.0);
        assert_eq!(e.value, 81.0);
        assert_eq!(e.limit, 80.0);
        assert_eq!(e.cleared_t, None);
    }

    #[test]
    fn interrupted_run_does_not_raise() {
        let mut state = CheckState::default();
        let events = check_frame(
            &frame(vec![81.0, 82.0, 79.0, 81.0, 82.0, 79.0]),
            &temp_spec(),
            &mut state,
        );
        assert!(events.is_empty());
    }

    #[test]
    fn violation_run_spans_frames() {
        let mut state = CheckState::default();
        let spec = temp_spec();
        let mut f1 = frame(vec![81.0, 82.0]);
        f1.t0 = 0.0;
        assert!(check_frame(&f1, &spec, &mut state).is_empty());
        let mut f2 = frame(vec![83.0]);
        f2.t0 = 2.0;
        let events = check_frame(&f2, &spec, &mut state);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].t, 0.0);
        assert_eq!(events[0].value, 81.0);
    }

    #[test]
    fn hysteresis_prevents_chattering() {
        // Oscillating ±0.1 across the upper limit with hysteresis 1.0:
        // exactly one raise, no clears.
        let spec = ThresholdSpec {
            hysteresis: 1.0,
            min_violations: 1,
            ..temp_spec()
        };
        let mut state = CheckState::default();
        let values: Vec<f64> = (0..20)
            .map(|i| if i % 2 == 0 { 80.1 } else { 79.9 })
            .collect();
        let events = check_frame(&frame(values), &spec, &mut state);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].cleared_t, None);
        assert!(state.any_active());
    }

    #[test]
    fn clear_requires_re_entry_past_hysteresis() {
        let spec = ThresholdSpec {
            hysteresis: 1.0,
            min_violations: 1,
            ..temp_spec()
        };
        let mut state = CheckState::default();
        let events = check_frame(&frame(vec![85.0, 80.5, 78.9]), &spec, &mut state);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].cleared_t, None);
        let clear = &events[1];
        assert_eq!(clear.t, 0.0);
        assert_eq!(clear.cleared_t, Some(2.0));
        assert!(clear.cleared_t.unwrap() > clear.t);
        assert!(!state.any_active());
    }

    #[test]
    fn low_limit_raises_independently() {
        let spec = ThresholdSpec {
            min_violations: 1,
            ..temp_spec()
        };
        let mut state = CheckState::default();
        let events = check_frame(&frame(vec![-5.0]), &spec, &mut state);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, AlarmKind::LowLimit);
        assert_eq!(events[0].limit, 0.0);
    }

    #[test]
    fn raise_clear_alternate_per_kind() {
        let spec = ThresholdSpec {
            min_violations: 1,
            ..temp_spec()
        };
        let mut state = CheckState::default();
        let values = vec![85.0, 85.0, 50.0, 85.0, 50.0];
        let events = check_frame(&frame(values), &spec, &mut state);
        // raise, clear, raise, clear
        assert_eq!(events.len(), 4);
        for pair in events.chunks(2) {
            assert_eq!(pair[0].cleared_t, None);
            assert!(pair[1].cleared_t.is_some());
        }
    }

    #[test]
    fn frame_rms_mode_checks_one_value() {
        let spec = ThresholdSpec {
            channel_id: 3,
            lower: -1.0,
            upper: 0.9,
            hysteresis: 0.0,
            min_violations: 1,
            mode: ThresholdMode::FrameRms,
        };
        let mut state = CheckState::default();
        // Unit sinusoid peaks exceed 0.9 but RMS ≈ 0.707 stays inside.
        let values: Vec<f64> = (0..1000)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 100.0).sin())
            .collect();
        let events = check_frame(&frame(values), &spec, &mut state);
        assert!(events.is_empty());
    }

    #[test]
    fn determinism_same_stream_same_events() {
        let spec = ThresholdSpec {
            min_violations: 2,
            ..temp_spec()
        };
        let values: Vec<f64> = (0..200).map(|i| 75.0 + ((i * 7) % 13) as f64).collect();
        let run = |values: &[f64]| {
            let mut state = CheckState::default();
            check_frame(&frame(values.to_vec()), &spec, &mut state)
        };
        assert_eq!(run(&values), run(&values));
    }

    fn healthy_report() -> DiagnosisReport {
        DiagnosisReport {
            findings: vec![],
            verdict: Verdict::Healthy,
            flagged_orders: vec![],
        }
    }

    #[test]
    fn combine_no_events_healthy() {
        let state = combine(vec![], Some(healthy_report()));
        assert_eq!(state.overall, OverallState::Healthy);
        assert!(state.active_alarms.is_empty());
    }

    #[test]
    fn combine_limit_alarm_is_warning() {
        let alarm = AlarmEvent {
            channel_id: 3,
            kind: AlarmKind::HighLimit,
            value: 90.0,
            limit: 80.0,
            t: 1.0,
            cleared_t: None,
        };
        let state = combine(vec![alarm], Some(healthy_report()));
        assert_eq!(state.overall, OverallState::Warning);
    }

    #[test]
    fn combine_order_fault_is_faulty() {
        let report = DiagnosisReport {
            findings: vec![OrderFinding {
                order: 10.0,
                healthy_amplitude: 0.01,
                measured_amplitude: 0.5,
                ratio: 50.0,
                flagged: true,
            }],
            verdict: Verdict::Faulty,
            flagged_orders: vec![10.0, 14.0],
        };
        let alarm = AlarmEvent {
            channel_id: 1,
            kind: AlarmKind::OrderFault,
            value: 50.0,
            limit: 5.0,
            t: 2.0,
            cleared_t: None,
        };
        let state = combine(vec![alarm], Some(report));
        assert_eq!(state.overall, OverallState::Faulty);
        assert_eq!(state.last_diagnosis.unwrap().flagged_orders, vec![10.0, 14.0]);
    }

    #[test]
    fn registry_tracks_raise_and_clear() {
        let mut reg = AlarmRegistry::default();
        let raise = AlarmEvent {
            channel_id: 3,
            kind: AlarmKind::HighLimit,
            value: 90.0,
            limit: 80.0,
            t: 1.0,
            cleared_t: None,
        };
        reg.apply(&raise);
        assert!(reg.is_active(3, AlarmKind::HighLimit));
        let clear = AlarmEvent {
            cleared_t: Some(2.0),
            ..raise
        };
        reg.apply(&clear);
        assert!(!reg.is_active(3, AlarmKind::HighLimit));
        assert!(reg.active().is_empty());
    }
}
