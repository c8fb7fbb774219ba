//! Condition-monitoring engine for three-phase motors at desk scale:
//! a deterministic motor simulator (or file replay) feeds a two-tier
//! producer/consumer pipeline through Kalman preprocessing, threshold
//! alarming and computed order tracking, into a batched local archive with
//! remote replication.
//!
//! Module map:
//! - [`signal`] — synthetic motor model, channels, frames, tach pulses
//! - [`recording`] — raw binary recording format and replay
//! - [`pipeline`] — the two-tier producer/consumer framework
//! - [`preprocess`] — scalar Kalman filtering and raw→physical scaling
//! - [`order`] — phase fit, equal-angle resampling, order spectra, diagnosis
//! - [`threshold`] — limit checks, alarms, comprehensive motor state
//! - [`archive`] — 10 ms batching, SQLite store, journal, outbox
//! - [`replicate`] — framed-protocol replication client and remote server
//! - [`config`] — run configuration (TOML)

pub mod archive;
pub mod config;
pub mod error;
pub mod order;
pub mod pipeline;
pub mod preprocess;
pub mod queue;
pub mod recording;
pub mod replicate;
pub mod signal;
pub mod threshold;
pub mod wire;

pub use archive::{ArchiveBatch, Batcher, QueryFilter, QueryRow, RunId, Store};
pub use config::{AnalysisSettings, ArchiveSettings, ChannelConfig, RunConfig};
pub use error::{Error, Result};
pub use order::{
    diagnose, fit_phase, invert_phase, order_spectrum, resample_grid, resample_signal,
    DiagnosisReport, OrderSpectrum, PhaseFitCoeffs, ResampleGrid, Verdict,
};
pub use pipeline::{run_pipeline, start_pipeline, MonitorUpdate, PipelineHandle, PipelineStats};
pub use preprocess::{kalman_step, KalmanState, Preprocessor};
pub use queue::{BoundedQueue, QueuePolicy};
pub use recording::{replay_open, RecordingReader, RecordingWriter, Replay};
pub use replicate::{RemoteServer, ReplicationClient};
pub use signal::{
    synth_aux, synth_tach, synth_vibration, ChannelKind, ChannelSpec, MotorProfile,
    OrderComponent, SampleFrame, SpeedSegment, TachPulseTrain,
};
pub use threshold::{
    check_frame, combine, AlarmEvent, AlarmKind, MotorState, OverallState, ThresholdSpec,
};
