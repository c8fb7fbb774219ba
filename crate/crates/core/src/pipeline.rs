//! The two-tier producer/consumer pipeline: acquisition producers feed a
//! lossless tier-1 queue into the processing activity; processed frames
//! fan out to the lossless storage activity and a latest-value monitor
//! mailbox, so live display can never stall archiving.
//!
//! Activities are plain threads; the bounded queues are the only shared
//! state. Producers stop first on shutdown, then every in-flight lossless
//! frame is processed, archived and (when configured) replicated before
//! the run reports itself drained.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::archive::{
    ArchiveBatch, Batcher, OutboxWriter, RunId, SpectrumRow, Store,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::order::{
    diagnose, order_spectrum, resample_grid, resample_signal, DiagnosisReport, OrderSpectrum,
    Verdict,
};
use crate::preprocess::Preprocessor;
use crate::queue::{BoundedQueue, QueuePolicy};
use crate::recording::{RecordingReader, RecordingWriter};
use crate::replicate::ReplicationClient;
use crate::signal::{synth_aux, synth_tach, synth_vibration, ChannelKind, SampleFrame, TachPulseTrain};
use crate::threshold::{
    check_frame, check_values, combine, AlarmEvent, AlarmKind, AlarmRegistry, CheckState,
    MotorState, OverallState,
};

/// Frames nominally carry 100 ms of samples; slower channels stretch the
/// frame so it never goes below one sample.
pub const FRAME_SECONDS: f64 = 0.1;

/// Tier-1 capacity per configured channel.
pub const TIER1_FRAMES_PER_CHANNEL: usize = 256;

/// Tier-2 storage queue capacity.
pub const TIER2_STORAGE_CAPACITY: usize = 1024;

/// Default orderly-drain budget after shutdown.
pub const DEFAULT_DRAIN_TIMEOUT: Duration = Duration::from_secs(5);

/// Counters and health figures for one pipeline run.
#[derive(Debug, Clone, Default)]
pub struct PipelineStats {
    pub frames_produced: u64,
    pub frames_processed: u64,
    pub frames_stored: u64,
    /// Frames rejected by preprocessing (non-finite samples).
    pub frames_rejected: u64,
    pub samples_produced: u64,
    /// Samples folded into committed archive windows (conservation).
    pub samples_archived: u64,
    pub batches_committed: u64,
    pub analysis_blocks: u64,
    pub alarms_raised: u64,
    pub max_depth_tier1: usize,
    pub max_depth_storage: usize,
    /// LatestValue replacements on the monitor mailbox.
    pub dropped_latest_value: u64,
    /// Producer-to-storage handoff latency, seconds.
    pub latency_max: f64,
    pub latency_mean: f64,
    /// Simulated seconds actually produced.
    pub sim_seconds: f64,
    pub wall_seconds: f64,
    /// sim_seconds / wall_seconds on an unpaced run.
    pub real_time_factor: f64,
    pub drained: bool,
    /// Frames still stranded in queues when a drain timed out.
    pub stranded_frames: u64,
    pub replication: Option<crate::replicate::ReplicationOutcome>,
    pub final_state: OverallState,
}

/// Latest-value update for live display.
#[derive(Debug, Clone)]
pub struct MonitorUpdate {
    /// Simulated time of the update.
    pub t: f64,
    /// Channel → latest physical value (frame RMS for vibration axes).
    pub latest: Vec<(u16, f64)>,
    pub rpm: Option<f64>,
    pub state: MotorState,
}

/// Fault-injection and drain knobs for tests.
#[derive(Clone, Default)]
#[doc(hidden)]
pub struct TestHooks {
    /// Sleep this long per frame in the processing activity.
    pub processing_delay: Option<Duration>,
    /// While set, the storage activity refuses to make progress.
    pub storage_wedge: Option<Arc<AtomicBool>>,
    pub drain_timeout: Option<Duration>,
    /// Fail this many store writes (exercises retry/journal spill).
    pub store_failures: u32,
}

enum Tier1Item {
    Frame {
        frame: SampleFrame,
        produced_at: Instant,
    },
    Tach {
        pulses: Vec<f64>,
        delta_theta: f64,
    },
}

enum StorageItem {
    Frame {
        physical: SampleFrame,
        raw: Option<SampleFrame>,
        produced_at: Instant,
    },
    RpmValues(Vec<(f64, f64)>),
    TachRaw {
        chunk: Vec<f64>,
        sequence: u64,
    },
    Events(Vec<AlarmEvent>),
    Spectra(Vec<SpectrumRow>),
}

/// Run the whole pipeline to completion (duration elapsed), blocking.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineStats> {
    let mut handle = start_pipeline(config.clone(), TestHooks::default())?;
    handle.join()
}

#[doc(hidden)]
pub fn run_pipeline_with(config: &RunConfig, hooks: TestHooks) -> Result<PipelineStats> {
    let mut handle = start_pipeline(config.clone(), hooks)?;
    handle.join()
}

/// Handle to a running pipeline: monitor feed plus orderly shutdown.
pub struct PipelineHandle {
    stop: Arc<AtomicBool>,
    monitor: BoundedQueue<MonitorUpdate>,
    main: Option<std::thread::JoinHandle<Result<PipelineStats>>>,
    finished: Option<std::result::Result<PipelineStats, String>>,
}

impl PipelineHandle {
    /// The latest-value mailbox for live display.
    pub fn monitor(&self) -> BoundedQueue<MonitorUpdate> {
        self.monitor.clone()
    }

    /// Request shutdown and wait for the drain; idempotent — a second call
    /// returns the first call's result.
    pub fn shutdown(&mut self) -> Result<PipelineStats> {
        self.stop.store(true, Ordering::Release);
        self.join()
    }

    /// Wait for completion (duration elapsed or prior shutdown).
    pub fn join(&mut self) -> Result<PipelineStats> {
        if let Some(prior) = &self.finished {
            return prior
                .clone()
                .map_err(|msg| Error::Runtime(format!("(previously reported) {msg}")));
        }
        let result = match self.main.take() {
            Some(h) => match h.join() {
                Ok(r) => r,
                Err(_) => Err(Error::Runtime(
                    "pipeline orchestrator panicked".into(),
                )),
            },
            None => Err(Error::Runtime("pipeline already joined".into())),
        };
        self.finished = Some(match &result {
            Ok(stats) => Ok(stats.clone()),
            Err(e) => Err(e.to_string()),
        });
        result
    }

    pub fn is_finished(&self) -> bool {
        self.main.as_ref().map_or(true, |h| h.is_finished())
    }
}

/// Start the pipeline in the background.
pub fn start_pipeline(config: RunConfig, hooks: TestHooks) -> Result<PipelineHandle> {
    config.validate()?;
    let stop = Arc::new(AtomicBool::new(false));
    let monitor = BoundedQueue::new(1, QueuePolicy::LatestValue);
    let main = {
        let stop = Arc::clone(&stop);
        let monitor = monitor.clone();
        std::thread::Builder::new()
            .name("pipeline-main".into())
            .spawn(move || pipeline_main(config, hooks, stop, monitor))
            .map_err(|e| Error::Runtime(format!("spawn pipeline: {e}")))?
    };
    Ok(PipelineHandle {
        stop,
        monitor,
        main: Some(main),
        finished: None,
    })
}

/// Closes queues when an activity exits, panicking or not, so no producer
/// stays blocked against a dead consumer.
struct CloseOnDrop<T>(BoundedQueue<T>);

impl<T> Drop for CloseOnDrop<T> {
    fn drop(&mut self) {
        self.0.close();
    }
}

struct SharedCounters {
    frames_produced: AtomicU64,
    samples_produced: AtomicU64,
    sim_time_bits: AtomicU64,
}

impl SharedCounters {
    fn bump_sim_time(&self, t: f64) {
        let mut cur = self.sim_time_bits.load(Ordering::Relaxed);
        loop {
            if f64::from_bits(cur) >= t {
                return;
            }
            match self.sim_time_bits.compare_exchange_weak(
                cur,
                t.to_bits(),
                Ordering::Relaxed,
                Ordering::Relaxed,
            ) {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }
}

fn pipeline_main(
    config: RunConfig,
    hooks: TestHooks,
    stop: Arc<AtomicBool>,
    monitor: BoundedQueue<MonitorUpdate>,
) -> Result<PipelineStats> {
    let wall_start = Instant::now();
    let run_id = config.run_id();
    let start_time = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);

    // Store unavailable at startup is a configuration error by contract.
    let mut store = Store::open(&config.archive.store)
        .map_err(|e| Error::Config(format!("store unavailable: {e}")))?;
    store.begin_run(run_id, start_time, &config.raw_text)?;
    if hooks.store_failures > 0 {
        store.inject_write_failures(hooks.store_failures);
    }

    let baseline = match (config.analysis.enabled, config.analysis.baseline_id) {
        (true, Some(baseline_id)) => {
            let map = store.load_baseline(baseline_id)?;
            if map.is_empty() {
                return Err(Error::Config(format!(
                    "analysis.baseline_id {baseline_id} has no baseline spectra in {}",
                    config.archive.store.display()
                )));
            }
            map
        }
        _ => HashMap::new(),
    };

    let recording = match &config.archive.recording {
        Some(path) => {
            let specs: Vec<_> = config.channels.iter().map(|c| c.spec.clone()).collect();
            Some(RecordingWriter::create(path, &specs)?)
        }
        None => None,
    };

    let tier1: BoundedQueue<Tier1Item> = BoundedQueue::new(
        TIER1_FRAMES_PER_CHANNEL * config.channels.len().max(1),
        QueuePolicy::Lossless,
    );
    let storage_q: BoundedQueue<StorageItem> =
        BoundedQueue::new(TIER2_STORAGE_CAPACITY, QueuePolicy::Lossless);

    let counters = Arc::new(SharedCounters {
        frames_produced: AtomicU64::new(0),
        samples_produced: AtomicU64::new(0),
        sim_time_bits: AtomicU64::new(0f64.to_bits()),
    });

    // --- producers -----------------------------------------------------
    let mut producers = Vec::new();
    if let Some(replay_path) = &config.replay_path {
        let q = tier1.clone();
        let stop = Arc::clone(&stop);
        let counters = Arc::clone(&counters);
        let path = replay_path.clone();
        let realtime = config.realtime;
        producers.push(
            std::thread::Builder::new()
                .name("producer-replay".into())
                .spawn(move || replay_producer(&path, q, stop, counters, realtime))
                .map_err(|e| Error::Runtime(e.to_string()))?,
        );
    } else {
        // One producer activity per channel group: vibration, auxiliary,
        // tachometer.
        let vib: Vec<_> = config
            .vibration_channels()
            .map(|c| c.spec.clone())
            .collect();
        let aux: Vec<_> = config
            .channels
            .iter()
            .filter(|c| !c.spec.kind.is_vibration() && c.spec.kind != ChannelKind::Tachometer)
            .map(|c| c.spec.clone())
            .collect();
        for (name, group) in [("producer-vibration", vib), ("producer-aux", aux)] {
            if group.is_empty() {
                continue;
            }
            let q = tier1.clone();
            let stop = Arc::clone(&stop);
            let counters = Arc::clone(&counters);
            let profile = config.profile.clone();
            let duration = config.duration;
            let seed = config.seed;
            let realtime = config.realtime;
            producers.push(
                std::thread::Builder::new()
                    .name(name.into())
                    .spawn(move || {
                        synth_producer(group, profile, duration, seed, realtime, q, stop, counters)
                    })
                    .map_err(|e| Error::Runtime(e.to_string()))?,
            );
        }
        if config.tach_channel().is_some() && config.duration > 0.0 {
            let q = tier1.clone();
            let stop = Arc::clone(&stop);
            let profile = config.profile.clone();
            let duration = config.duration;
            let realtime = config.realtime;
            producers.push(
                std::thread::Builder::new()
                    .name("producer-tach".into())
                    .spawn(move || tach_producer(profile, duration, realtime, q, stop))
                    .map_err(|e| Error::Runtime(e.to_string()))?,
            );
        }
    }

    // --- processing ----------------------------------------------------
    let processing = {
        let tier1 = tier1.clone();
        let storage_q = storage_q.clone();
        let monitor = monitor.clone();
        let config = config.clone();
        let hooks = hooks.clone();
        std::thread::Builder::new()
            .name("processing".into())
            .spawn(move || {
                let _guard_in = CloseOnDrop(tier1.clone());
                let _guard_out = CloseOnDrop(storage_q.clone());
                processing_loop(&config, baseline, tier1, storage_q, monitor, &hooks)
            })
            .map_err(|e| Error::Runtime(e.to_string()))?
    };

    // --- storage ---------------------------------------------------------
    let abandon = Arc::new(AtomicBool::new(false));
    let storage = {
        let storage_q = storage_q.clone();
        let config = config.clone();
        let hooks = hooks.clone();
        let abandon = Arc::clone(&abandon);
        std::thread::Builder::new()
            .name("storage".into())
            .spawn(move || {
                let _guard = CloseOnDrop(storage_q.clone());
                storage_loop(&config, run_id, store, recording, storage_q, &hooks, abandon)
            })
            .map_err(|e| Error::Runtime(e.to_string()))?
    };

    // --- replication -------------------------------------------------------
    let replication_stop = Arc::new(AtomicBool::new(false));
    let replication = config.archive.remote.as_ref().map(|endpoint| {
        let outbox_path = {
            let mut os = config.archive.store.clone().into_os_string();
            os.push(".outbox");
            std::path::PathBuf::from(os)
        };
        let client = ReplicationClient::new(
            endpoint.clone(),
            outbox_path,
            run_id,
            start_time,
            config.raw_text.clone(),
        );
        let stop = Arc::clone(&replication_stop);
        let drain = hooks.drain_timeout.unwrap_or(DEFAULT_DRAIN_TIMEOUT);
        std::thread::Builder::new()
            .name("replication".into())
            .spawn(move || client.run(&stop, drain))
            .expect("spawn replication")
    });

    // --- drain sequence ----------------------------------------------------
    let mut first_error: Option<Error> = None;
    for p in producers {
        match p.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                first_error.get_or_insert(e);
            }
            Err(_) => {
                first_error.get_or_insert(Error::Runtime("producer panicked".into()));
            }
        }
    }
    tier1.close();

    let processing_out = match processing.join() {
        Ok(Ok(out)) => Some(out),
        Ok(Err(e)) => {
            first_error.get_or_insert(e);
            None
        }
        Err(_) => {
            first_error.get_or_insert(Error::Runtime(
                "processing activity panicked; queues drained and closed".into(),
            ));
            None
        }
    };
    // Processing's guard closed the storage queue; give storage its drain
    // budget, then abandon it if wedged.
    let drain_timeout = hooks.drain_timeout.unwrap_or(DEFAULT_DRAIN_TIMEOUT);
    let drain_start = Instant::now();
    while !storage.is_finished() && drain_start.elapsed() < drain_timeout {
        std::thread::sleep(Duration::from_millis(5));
    }
    let timed_out = !storage.is_finished();
    if timed_out {
        abandon.store(true, Ordering::Release);
    }
    let storage_out = match storage.join() {
        Ok(Ok(out)) => Some(out),
        Ok(Err(e)) => {
            first_error.get_or_insert(e);
            None
        }
        Err(_) => {
            first_error.get_or_insert(Error::Runtime("storage activity panicked".into()));
            None
        }
    };

    // Outbox is final now; let replication catch up, bounded by the drain
    // budget.
    replication_stop.store(true, Ordering::Release);
    let replication_out = replication.map(|h| {
        h.join()
            .unwrap_or_else(|_| crate::replicate::ReplicationOutcome::default())
    });

    // --- stats ---------------------------------------------------------
    let wall_seconds = wall_start.elapsed().as_secs_f64();
    let sim_seconds = f64::from_bits(counters.sim_time_bits.load(Ordering::Relaxed));
    let t1_stats = tier1.stats();
    let st_stats = storage_q.stats();
    let mon_stats = monitor.stats();

    let mut stats = PipelineStats {
        frames_produced: counters.frames_produced.load(Ordering::Relaxed),
        samples_produced: counters.samples_produced.load(Ordering::Relaxed),
        max_depth_tier1: t1_stats.max_depth,
        max_depth_storage: st_stats.max_depth,
        dropped_latest_value: mon_stats.dropped,
        sim_seconds,
        wall_seconds,
        real_time_factor: if wall_seconds > 0.0 {
            sim_seconds / wall_seconds
        } else {
            0.0
        },
        drained: !timed_out,
        ..Default::default()
    };
    if let Some(p) = &processing_out {
        stats.frames_processed = p.frames_processed;
        stats.frames_rejected = p.frames_rejected;
        stats.analysis_blocks = p.analysis_blocks;
        stats.alarms_raised = p.alarms_raised;
        stats.final_state = p.final_state;
    }
    if let Some(s) = &storage_out {
        stats.frames_stored = s.frames_stored;
        stats.samples_archived = s.samples_archived;
        stats.batches_committed = s.batches_committed;
        stats.latency_max = s.latency_max;
        stats.latency_mean = s.latency_mean;
    }
    if timed_out {
        stats.stranded_frames =
            (stats.frames_processed - stats.frames_stored) + storage_q.len() as u64;
        stats.drained = false;
    }
    if let Some(r) = replication_out {
        stats.drained = stats.drained && r.drained;
        stats.replication = Some(r);
    }

    match first_error {
        Some(e) => Err(e),
        None => Ok(stats),
    }
}

// ---------------------------------------------------------------------------
// Producers
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn synth_producer(
    group: Vec<crate::signal::ChannelSpec>,
    profile: crate::signal::MotorProfile,
    duration: f64,
    seed: u64,
    realtime: bool,
    q: BoundedQueue<Tier1Item>,
    stop: Arc<AtomicBool>,
    counters: Arc<SharedCounters>,
) -> Result<()> {
    let wall_start = Instant::now();
    // Per-channel frame cadence: 100 ms, stretched so a frame never holds
    // fewer than one sample.
    let mut cursors: Vec<(usize, u64)> = group.iter().map(|_| (0usize, 0u64)).collect();
    loop {
        if stop.load(Ordering::Acquire) {
            return Ok(());
        }
        let mut produced_any = false;
        for (gi, spec) in group.iter().enumerate() {
            let frame_dt = FRAME_SECONDS.max(1.0 / spec.sample_rate);
            let frame_len = (spec.sample_rate * frame_dt).round() as usize;
            let (ref mut frame_idx, ref mut seq) = cursors[gi];
            let t0 = *frame_idx as f64 * frame_dt;
            if t0 >= duration {
                continue;
            }
            let remaining = ((duration - t0) * spec.sample_rate).round() as usize;
            let n = frame_len.min(remaining.max(0));
            if n == 0 {
                *frame_idx += 1;
                continue;
            }
            if realtime {
                pace(wall_start, t0);
                if stop.load(Ordering::Acquire) {
                    return Ok(());
                }
            }
            let frame = if spec.kind.is_vibration() {
                synth_vibration(&profile, spec, t0, n, *seq, seed)?
            } else {
                synth_aux(&profile, spec, t0, n, *seq, seed)?
            };
            let end = frame.end_time();
            counters.frames_produced.fetch_add(1, Ordering::Relaxed);
            counters
                .samples_produced
                .fetch_add(frame.values.len() as u64, Ordering::Relaxed);
            counters.bump_sim_time(end);
            if q.push(Tier1Item::Frame {
                frame,
                produced_at: Instant::now(),
            })
            .is_err()
            {
                return Ok(()); // downstream shut; orderly exit
            }
            *frame_idx += 1;
            *seq += 1;
            produced_any = true;
        }
        if !produced_any {
            return Ok(());
        }
    }
}

fn tach_producer(
    profile: crate::signal::MotorProfile,
    duration: f64,
    realtime: bool,
    q: BoundedQueue<Tier1Item>,
    stop: Arc<AtomicBool>,
) -> Result<()> {
    let wall_start = Instant::now();
    let train = synth_tach(&profile, duration)?;
    let delta_theta = train.delta_theta;
    let mut chunk_start = 0usize;
    let mut window_end = FRAME_SECONDS;
    while chunk_start < train.times.len() {
        if stop.load(Ordering::Acquire) {
            return Ok(());
        }
        let mut chunk_end = chunk_start;
        while chunk_end < train.times.len() && train.times[chunk_end] < window_end {
            chunk_end += 1;
        }
        if chunk_end > chunk_start {
            if realtime {
                pace(wall_start, window_end);
                if stop.load(Ordering::Acquire) {
                    return Ok(());
                }
            }
            let pulses = train.times[chunk_start..chunk_end].to_vec();
            if q.push(Tier1Item::Tach {
                pulses,
                delta_theta,
            })
            .is_err()
            {
                return Ok(());
            }
            chunk_start = chunk_end;
        }
        window_end += FRAME_SECONDS;
        if window_end > duration + FRAME_SECONDS {
            // Remaining pulses (boundary stragglers) go out in one chunk.
            if chunk_start < train.times.len() {
                let pulses = train.times[chunk_start..].to_vec();
                let _ = q.push(Tier1Item::Tach {
                    pulses,
                    delta_theta,
                });
            }
            return Ok(());
        }
    }
    Ok(())
}

fn replay_producer(
    path: &std::path::Path,
    q: BoundedQueue<Tier1Item>,
    stop: Arc<AtomicBool>,
    counters: Arc<SharedCounters>,
    realtime: bool,
) -> Result<()> {
    let wall_start = Instant::now();
    let mut reader = RecordingReader::open(path)?;
    let tach: HashMap<u16, f64> = reader
        .channels()
        .iter()
        .filter(|c| c.kind == ChannelKind::Tachometer)
        .map(|c| {
            let ppr = if c.sample_rate >= 1.0 { c.sample_rate } else { 1.0 };
            (c.id, 2.0 * std::f64::consts::PI / ppr)
        })
        .collect();
    while let Some(frame) = reader.next_frame()? {
        if stop.load(Ordering::Acquire) {
            return Ok(());
        }
        if realtime {
            pace(wall_start, frame.t0);
        }
        let item = match tach.get(&frame.channel_id) {
            Some(&delta_theta) => Tier1Item::Tach {
                pulses: frame.values,
                delta_theta,
            },
            None => {
                counters.frames_produced.fetch_add(1, Ordering::Relaxed);
                counters
                    .samples_produced
                    .fetch_add(frame.values.len() as u64, Ordering::Relaxed);
                counters.bump_sim_time(frame.end_time());
                Tier1Item::Frame {
                    frame,
                    produced_at: Instant::now(),
                }
            }
        };
        if q.push(item).is_err() {
            return Ok(());
        }
    }
    Ok(())
}

fn pace(wall_start: Instant, sim_t: f64) {
    let target = Duration::from_secs_f64(sim_t.max(0.0));
    let elapsed = wall_start.elapsed();
    if target > elapsed {
        std::thread::sleep(target - elapsed);
    }
}

// ---------------------------------------------------------------------------
// Processing activity
// ---------------------------------------------------------------------------

struct ProcessingOutcome {
    frames_processed: u64,
    frames_rejected: u64,
    analysis_blocks: u64,
    alarms_raised: u64,
    final_state: OverallState,
}

struct AxisBuffer {
    channel_id: u16,
    frames: VecDeque<SampleFrame>,
}

struct AnalysisEngine {
    theta_step: f64,
    block_revolutions: u32,
    watch_orders: Vec<f64>,
    ratio_threshold: f64,
    floor: f64,
    record_baseline: bool,
    baseline: HashMap<u16, OrderSpectrum>,
    delta_theta: Option<f64>,
    pulses: Vec<f64>,
    axes: Vec<AxisBuffer>,
}

struct BlockOutcome {
    t_end: f64,
    spectra: Vec<SpectrumRow>,
    diagnoses: Vec<(u16, DiagnosisReport)>,
}

impl AnalysisEngine {
    fn pulses_per_block(&self) -> Option<usize> {
        let dt = self.delta_theta?;
        let ppr = (2.0 * std::f64::consts::PI / dt).round().max(1.0) as usize;
        Some(self.block_revolutions as usize * ppr)
    }

    fn on_tach(&mut self, pulses: &[f64], delta_theta: f64) {
        if self.delta_theta.is_none() {
            self.delta_theta = Some(delta_theta);
        }
        self.pulses.extend_from_slice(pulses);
    }

    fn on_frame(&mut self, frame: &SampleFrame) {
        if let Some(buf) = self
            .axes
            .iter_mut()
            .find(|a| a.channel_id == frame.channel_id)
        {
            buf.frames.push_back(frame.clone());
        }
    }

    /// Run as many complete analysis blocks as the buffered pulses and
    /// frames allow.
    fn try_blocks(&mut self) -> Result<Vec<BlockOutcome>> {
        let mut out = Vec::new();
        loop {
            let Some(per_block) = self.pulses_per_block() else {
                return Ok(out);
            };
            if self.pulses.len() < per_block + 1 {
                return Ok(out);
            }
            let block_pulses = &self.pulses[..=per_block];
            let t_first = block_pulses[0];
            let t_last = *block_pulses.last().unwrap();
            // Every axis must have contiguous coverage of the block span.
            let covered = self.axes.iter().all(|a| {
                let front_ok = a.frames.front().is_some_and(|f| f.t0 <= t_first);
                let back_ok = a
                    .frames
                    .back()
                    .is_some_and(|f| f.end_time() >= t_last + 1.0 / f.sample_rate.max(1.0));
                front_ok && back_ok
            });
            if !covered || self.axes.is_empty() {
                return Ok(out);
            }

            let delta_theta = self.delta_theta.expect("set with pulses");
            let train = TachPulseTrain {
                times: block_pulses.to_vec(),
                delta_theta,
            };
            let grid = resample_grid(&train, self.theta_step)?;
            let spr = (2.0 * std::f64::consts::PI / self.theta_step).round() as usize;
            let n_fft = self.block_revolutions as usize * spr;

            let mut spectra_rows = Vec::new();
            let mut diagnoses = Vec::new();
            for axis in &self.axes {
                let (values, v_t0, rate) = concat_frames(&axis.frames, t_first, t_last);
                let resampled = resample_signal(&values, v_t0, rate, &grid)?;
                let block = &resampled[..n_fft.min(resampled.len())];
                let spectrum = order_spectrum(block, self.theta_step)?;
                for (k, &amp) in spectrum.amplitudes.iter().enumerate() {
                    spectra_rows.push(SpectrumRow {
                        channel_id: axis.channel_id,
                        t: t_last,
                        order: spectrum.order_at(k),
                        amplitude: amp,
                        baseline: self.record_baseline,
                    });
                }
                if !self.record_baseline {
                    if let Some(base) = self.baseline.get(&axis.channel_id) {
                        let report = diagnose(
                            &spectrum,
                            base,
                            &self.watch_orders,
                            self.ratio_threshold,
                            self.floor,
                        )?;
                        diagnoses.push((axis.channel_id, report));
                    }
                }
            }
            out.push(BlockOutcome {
                t_end: t_last,
                spectra: spectra_rows,
                diagnoses,
            });

            // Blocks tile: the last pulse of this block opens the next.
            self.pulses.drain(..per_block);
            let keep_from = self.pulses[0];
            for axis in &mut self.axes {
                while axis
                    .frames
                    .front()
                    .is_some_and(|f| f.end_time() < keep_from)
                {
                    axis.frames.pop_front();
                }
            }
        }
    }

    /// Cap buffers when no pulses arrive (stalled tach): keep 30 s.
    fn prune_stale(&mut self) {
        if self.pulses.is_empty() {
            for axis in &mut self.axes {
                let latest = axis.frames.back().map(|f| f.end_time()).unwrap_or(0.0);
                while axis
                    .frames
                    .front()
                    .is_some_and(|f| f.end_time() < latest - 30.0)
                {
                    axis.frames.pop_front();
                }
            }
        }
    }
}

/// Contiguous sample run covering [t_first, t_last] from a frame buffer.
fn concat_frames(frames: &VecDeque<SampleFrame>, t_first: f64, t_last: f64) -> (Vec<f64>, f64, f64) {
    let mut values = Vec::new();
    let mut t0 = 0.0;
    let mut rate = 1.0;
    let mut started = false;
    for f in frames {
        if f.end_time() < t_first {
            continue;
        }
        if f.t0 > t_last {
            break;
        }
        if !started {
            t0 = f.t0;
            rate = f.sample_rate;
            started = true;
        }
        values.extend_from_slice(&f.values);
    }
    (values, t0, rate)
}

fn processing_loop(
    config: &RunConfig,
    baseline: HashMap<u16, OrderSpectrum>,
    tier1: BoundedQueue<Tier1Item>,
    storage_q: BoundedQueue<StorageItem>,
    monitor: BoundedQueue<MonitorUpdate>,
    hooks: &TestHooks,
) -> Result<ProcessingOutcome> {
    let mut preprocessors: HashMap<u16, Preprocessor> = config
        .channels
        .iter()
        .map(|c| (c.spec.id, Preprocessor::new(c.spec.clone(), c.preprocess)))
        .collect();
    let mut check_states: HashMap<u16, CheckState> = HashMap::new();
    let thresholds: HashMap<u16, crate::threshold::ThresholdSpec> = config
        .thresholds
        .iter()
        .map(|t| (t.channel_id, *t))
        .collect();
    let tach_id = config.tach_channel().map(|c| c.spec.id);
    let record_raw = config.archive.recording.is_some();

    let mut engine = config.analysis.enabled.then(|| AnalysisEngine {
        theta_step: config.analysis.theta_step,
        block_revolutions: config.analysis.block_revolutions,
        watch_orders: config.analysis.watch_orders.clone(),
        ratio_threshold: config.analysis.ratio_threshold,
        floor: config.analysis.floor,
        record_baseline: config.analysis.record_baseline,
        baseline,
        delta_theta: None,
        pulses: Vec::new(),
        axes: config
            .vibration_channels()
            .map(|c| AxisBuffer {
                channel_id: c.spec.id,
                frames: VecDeque::new(),
            })
            .collect(),
    });

    let mut registry = AlarmRegistry::default();
    let mut latest: HashMap<u16, f64> = HashMap::new();
    let mut last_rpm: Option<f64> = None;
    let mut last_pulse: Option<f64> = None;
    let mut last_diagnosis: Option<DiagnosisReport> = None;
    let mut tach_seq: u64 = 0;
    let mut out = ProcessingOutcome {
        frames_processed: 0,
        frames_rejected: 0,
        analysis_blocks: 0,
        alarms_raised: 0,
        final_state: OverallState::Healthy,
    };

    while let Some(item) = tier1.pop() {
        if let Some(delay) = hooks.processing_delay {
            std::thread::sleep(delay);
        }
        let mut new_events: Vec<AlarmEvent> = Vec::new();
        let mut update_t = 0.0;
        match item {
            Tier1Item::Frame { frame, produced_at } => {
                let pre = preprocessors
                    .get_mut(&frame.channel_id)
                    .ok_or_else(|| Error::Data(format!("unknown channel {}", frame.channel_id)))?;
                let physical = match pre.to_physical(&frame) {
                    Ok(p) => p,
                    Err(Error::Data(_)) => {
                        out.frames_rejected += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                if let Some(spec) = thresholds.get(&frame.channel_id) {
                    let state = check_states.entry(frame.channel_id).or_default();
                    new_events.extend(check_frame(&physical, spec, state));
                }
                let display = if config
                    .channel(frame.channel_id)
                    .is_some_and(|c| c.spec.kind.is_vibration())
                {
                    physical.rms()
                } else {
                    *physical.values.last().unwrap_or(&0.0)
                };
                latest.insert(frame.channel_id, display);
                update_t = physical.end_time();
                if let Some(engine) = engine.as_mut() {
                    engine.on_frame(&physical);
                    engine.prune_stale();
                }
                out.frames_processed += 1;
                let raw = record_raw.then_some(frame);
                if storage_q
                    .push(StorageItem::Frame {
                        physical,
                        raw,
                        produced_at,
                    })
                    .is_err()
                {
                    return Err(Error::Queue("storage queue closed mid-run".into()));
                }
            }
            Tier1Item::Tach {
                pulses,
                delta_theta,
            } => {
                // Per-pulse-interval RPM estimates drive speed display,
                // speed thresholds and the archived speed rows.
                let mut rpm_points: Vec<(f64, f64)> = Vec::with_capacity(pulses.len());
                for &t in &pulses {
                    if let Some(prev) = last_pulse {
                        let dt = t - prev;
                        if dt > 0.0 {
                            let rpm = 60.0 * delta_theta / (2.0 * std::f64::consts::PI * dt);
                            rpm_points.push((t, rpm));
                        }
                    }
                    last_pulse = Some(t);
                }
                if let Some((t, rpm)) = rpm_points.last() {
                    last_rpm = Some(*rpm);
                    update_t = *t;
                }
                if let (Some(id), Some(spec)) = (tach_id, tach_id.and_then(|id| thresholds.get(&id))) {
                    let state = check_states.entry(id).or_default();
                    new_events.extend(check_values(rpm_points.iter().copied(), spec, state));
                }
                if let Some(engine) = engine.as_mut() {
                    engine.on_tach(&pulses, delta_theta);
                }
                if let Some(id) = tach_id {
                    if !rpm_points.is_empty()
                        && storage_q.push(StorageItem::RpmValues(rpm_points)).is_err()
                    {
                        return Err(Error::Queue("storage queue closed mid-run".into()));
                    }
                    if record_raw {
                        let _ = storage_q.push(StorageItem::TachRaw {
                            chunk: pulses,
                            sequence: tach_seq,
                        });
                        tach_seq += 1;
                    }
                    let _ = id;
                }
            }
        }

        // Order analysis: run any blocks that just became complete.
        if let Some(engine) = engine.as_mut() {
            for block in engine.try_blocks()? {
                out.analysis_blocks += 1;
                let mut worst: Option<DiagnosisReport> = None;
                for (channel_id, report) in block.diagnoses {
                    let active = registry.is_active(channel_id, AlarmKind::OrderFault);
                    match (report.verdict, active) {
                        (Verdict::Faulty, false) => {
                            let max_ratio = report
                                .findings
                                .iter()
                                .filter(|f| f.flagged)
                                .map(|f| f.ratio)
                                .fold(0.0, f64::max);
                            new_events.push(AlarmEvent {
                                channel_id,
                                kind: AlarmKind::OrderFault,
                                value: max_ratio,
                                limit: engine.ratio_threshold,
                                t: block.t_end,
                                cleared_t: None,
                            });
                        }
                        (Verdict::Healthy, true) => {
                            // Find the raise time from the registry.
                            let t_raise = registry
                                .active()
                                .iter()
                                .find(|a| {
                                    a.channel_id == channel_id && a.kind == AlarmKind::OrderFault
                                })
                                .map(|a| (a.t, a.value, a.limit));
                            if let Some((t, value, limit)) = t_raise {
                                new_events.push(AlarmEvent {
                                    channel_id,
                                    kind: AlarmKind::OrderFault,
                                    value,
                                    limit,
                                    t,
                                    cleared_t: Some(block.t_end),
                                });
                            }
                        }
                        _ => {}
                    }
                    let keep = match &worst {
                        Some(w) => {
                            w.verdict == Verdict::Healthy || report.verdict == Verdict::Faulty
                        }
                        None => true,
                    };
                    if keep {
                        worst = Some(report);
                    }
                }
                if let Some(w) = worst {
                    last_diagnosis = Some(w);
                }
                if !block.spectra.is_empty()
                    && storage_q.push(StorageItem::Spectra(block.spectra)).is_err()
                {
                    return Err(Error::Queue("storage queue closed mid-run".into()));
                }
            }
        }

        if !new_events.is_empty() {
            for e in &new_events {
                registry.apply(e);
                if e.cleared_t.is_none() {
                    out.alarms_raised += 1;
                }
            }
            if storage_q
                .push(StorageItem::Events(new_events))
                .is_err()
            {
                return Err(Error::Queue("storage queue closed mid-run".into()));
            }
        }

        let state = combine(registry.active().to_vec(), last_diagnosis.clone());
        out.final_state = state.overall;
        let mut latest_sorted: Vec<(u16, f64)> =
            latest.iter().map(|(&k, &v)| (k, v)).collect();
        latest_sorted.sort_by_key(|(id, _)| *id);
        let _ = monitor.push(MonitorUpdate {
            t: update_t,
            latest: latest_sorted,
            rpm: last_rpm,
            state,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Storage activity
// ---------------------------------------------------------------------------

struct StorageOutcome {
    frames_stored: u64,
    samples_archived: u64,
    batches_committed: u64,
    latency_max: f64,
    latency_mean: f64,
}

const RETRY_QUEUE_CAP: usize = 64;

fn storage_loop(
    config: &RunConfig,
    run_id: RunId,
    mut store: Store,
    mut recording: Option<RecordingWriter>,
    storage_q: BoundedQueue<StorageItem>,
    hooks: &TestHooks,
    abandon: Arc<AtomicBool>,
) -> Result<StorageOutcome> {
    let batch_channels: Vec<u16> = config
        .channels
        .iter()
        .filter(|c| c.spec.kind != ChannelKind::Tachometer)
        .map(|c| c.spec.id)
        .collect();
    let mut batcher = Batcher::new(config.archive.period, &batch_channels);
    let mut outbox = match &config.archive.remote {
        Some(_) => Some(OutboxWriter::create(&store.outbox_path())?),
        None => None,
    };
    let journal = store.journal_path();
    let mut retry: VecDeque<ArchiveBatch> = VecDeque::new();
    let mut out = StorageOutcome {
        frames_stored: 0,
        samples_archived: 0,
        batches_committed: 0,
        latency_max: 0.0,
        latency_mean: 0.0,
    };
    let mut latency_sum = 0.0;
    let mut latency_n = 0u64;

    loop {
        // Wedge hook: refuse progress until released or abandoned.
        if let Some(wedge) = &hooks.storage_wedge {
            while wedge.load(Ordering::Acquire) && !abandon.load(Ordering::Acquire) {
                std::thread::sleep(Duration::from_millis(5));
            }
        }
        if abandon.load(Ordering::Acquire) {
            return Ok(out); // stranded items stay in the queue; drained=false upstream
        }
        let item = match storage_q.pop_timeout(Duration::from_millis(100)) {
            Ok(Some(item)) => item,
            Ok(None) => break, // closed and drained
            Err(()) => continue,
        };
        match item {
            StorageItem::Frame {
                physical,
                raw,
                produced_at,
            } => {
                batcher.push_frame(&physical);
                out.frames_stored += 1;
                let lat = produced_at.elapsed().as_secs_f64();
                latency_sum += lat;
                latency_n += 1;
                out.latency_max = out.latency_max.max(lat);
                if let (Some(rec), Some(raw)) = (recording.as_mut(), raw) {
                    rec.write_frame(&raw)?;
                }
            }
            StorageItem::RpmValues(points) => {
                if let Some(tach) = config.tach_channel() {
                    for (t, rpm) in points {
                        batcher.push_value(tach.spec.id, t, rpm);
                    }
                }
            }
            StorageItem::TachRaw { chunk, sequence } => {
                if let (Some(rec), Some(tach)) = (recording.as_mut(), config.tach_channel()) {
                    rec.write_tach_chunk(tach.spec.id, sequence, &chunk)?;
                }
            }
            StorageItem::Events(events) => {
                for e in events {
                    batcher.push_event(e);
                }
            }
            StorageItem::Spectra(rows) => {
                batcher.push_spectrum_rows(rows);
            }
        }
        for batch in batcher.drain_ready() {
            commit_with_retry(
                &mut store,
                run_id,
                batch,
                &mut retry,
                &journal,
                &mut outbox,
                &mut out,
            )?;
        }
    }

    // Final flush: every remaining window commits before we return.
    for batch in batcher.flush() {
        commit_with_retry(
            &mut store,
            run_id,
            batch,
            &mut retry,
            &journal,
            &mut outbox,
            &mut out,
        )?;
    }
    // One last pass over the retry queue; what still fails goes to the
    // journal for replay on next open.
    let leftovers: Vec<ArchiveBatch> = retry.drain(..).collect();
    for batch in leftovers {
        match store.write_batch(run_id, &batch) {
            Ok(_) => {
                out.batches_committed += 1;
                if let Some(o) = outbox.as_mut() {
                    o.append(run_id, &batch)?;
                }
            }
            Err(_) => {
                crate::archive::journal_append(&journal, run_id, &batch)?;
            }
        }
    }
    if let Some(o) = outbox.as_mut() {
        o.flush()?;
    }
    if let Some(rec) = recording.take() {
        rec.finish()?;
    }
    out.samples_archived = batcher.samples_in();
    out.latency_mean = if latency_n > 0 {
        latency_sum / latency_n as f64
    } else {
        0.0
    };
    Ok(out)
}

fn commit_with_retry(
    store: &mut Store,
    run_id: RunId,
    batch: ArchiveBatch,
    retry: &mut VecDeque<ArchiveBatch>,
    journal: &std::path::Path,
    outbox: &mut Option<OutboxWriter>,
    out: &mut StorageOutcome,
) -> Result<()> {
    // Retry older failures first so batch ids stay ordered in the store's
    // outbox.
    while let Some(front) = retry.front() {
        match store.write_batch(run_id, front) {
            Ok(_) => {
                let b = retry.pop_front().unwrap();
                out.batches_committed += 1;
                if let Some(o) = outbox.as_mut() {
                    o.append(run_id, &b)?;
                    o.flush()?;
                }
            }
            Err(_) => break,
        }
    }
    if retry.is_empty() {
        match store.write_batch(run_id, &batch) {
            Ok(_) => {
                out.batches_committed += 1;
                if let Some(o) = outbox.as_mut() {
                    o.append(run_id, &batch)?;
                    o.flush()?;
                }
                return Ok(());
            }
            Err(_) => {}
        }
    }
    // Store is struggling: queue the batch, spilling the oldest to the
    // journal if the queue is full.
    retry.push_back(batch);
    if retry.len() > RETRY_QUEUE_CAP {
        let spill = retry.pop_front().unwrap();
        crate::archive::journal_append(journal, run_id, &spill)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Offline recording (the `record` command)
// ---------------------------------------------------------------------------

/// Synthesize a run straight to a recording file, no pipeline involved.
pub fn record_run(config: &RunConfig, path: &std::path::Path) -> Result<(u64, u64)> {
    config.validate()?;
    let specs: Vec<_> = config.channels.iter().map(|c| c.spec.clone()).collect();
    let mut writer = RecordingWriter::create(path, &specs)?;
    let mut frames_written = 0u64;
    for ch in &config.channels {
        if ch.spec.kind == ChannelKind::Tachometer {
            continue;
        }
        let frame_dt = FRAME_SECONDS.max(1.0 / ch.spec.sample_rate);
        let frame_len = (ch.spec.sample_rate * frame_dt).round() as usize;
        let mut seq = 0u64;
        loop {
            let t0 = seq as f64 * frame_dt;
            if t0 >= config.duration {
                break;
            }
            let remaining = ((config.duration - t0) * ch.spec.sample_rate).round() as usize;
            let n = frame_len.min(remaining);
            if n == 0 {
                break;
            }
            let frame = if ch.spec.kind.is_vibration() {
                synth_vibration(&config.profile, &ch.spec, t0, n, seq, config.seed)?
            } else {
                synth_aux(&config.profile, &ch.spec, t0, n, seq, config.seed)?
            };
            writer.write_frame(&frame)?;
            frames_written += 1;
            seq += 1;
        }
    }
    let mut pulses_written = 0u64;
    if let Some(tach) = config.tach_channel() {
        if config.duration > 0.0 {
            let train = synth_tach(&config.profile, config.duration)?;
            pulses_written = train.times.len() as u64;
            writer.write_tach_chunk(tach.spec.id, 0, &train.times)?;
        }
    }
    writer.finish()?;
    Ok((frames_written, pulses_written))
}
