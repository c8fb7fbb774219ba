//! Batched archiving: 10 ms windows of down-sampled physical values,
//! alarm events and spectrum rows committed atomically to a local SQLite
//! store, with an append-only outbox journal feeding replication.
//!
//! Logical schema (four user-data tables): `run_config`, `samples`,
//! `analysis_results`, `alarms`. Two bookkeeping tables back them:
//! `batches` records every committed window (including empty ones) so
//! writes stay idempotent and the replication watermark is durable, and
//! `meta` holds replication state.

use rusqlite::Connection;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::order::OrderSpectrum;
use crate::signal::SampleFrame;
use crate::threshold::AlarmEvent;
use crate::wire;

/// Default archive period: 10 ms.
pub const DEFAULT_ARCHIVE_PERIOD: f64 = 0.01;

/// 128-bit run identity, derived deterministically from the run seed so
/// identical (config, seed) runs are bit-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RunId(pub [u8; 16]);

impl RunId {
    pub fn from_seed(seed: u64) -> Self {
        let mut bytes = [0u8; 16];
        let a = mix(seed ^ 0x72756e5f69645f31);
        let b = mix(a ^ seed.rotate_left(17));
        bytes[..8].copy_from_slice(&a.to_be_bytes());
        bytes[8..].copy_from_slice(&b.to_be_bytes());
        RunId(bytes)
    }

    pub fn to_hex(self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse_hex(s: &str) -> Option<Self> {
        if s.len() != 32 {
            return None;
        }
        let mut bytes = [0u8; 16];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hex = std::str::from_utf8(chunk).ok()?;
            bytes[i] = u8::from_str_radix(hex, 16).ok()?;
        }
        Some(RunId(bytes))
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_hex())
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// One down-sampled value: per-channel mean over the batch window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRow {
    pub channel_id: u16,
    /// Window start time.
    pub t: f64,
    pub value: f64,
}

/// One order-spectrum bin bound for the analysis_results table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumRow {
    pub channel_id: u16,
    /// Analysis block end time.
    pub t: f64,
    pub order: f64,
    pub amplitude: f64,
    pub baseline: bool,
}

/// One archive window's worth of rows, committed atomically and
/// replicated as a unit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArchiveBatch {
    pub batch_id: u64,
    pub t_start: f64,
    pub t_end: f64,
    pub rows: Vec<SampleRow>,
    pub events: Vec<AlarmEvent>,
    pub spectra: Vec<SpectrumRow>,
}

// ---------------------------------------------------------------------------
// Batcher: frames → 10 ms windows
// ---------------------------------------------------------------------------

#[derive(Default)]
struct WindowAccum {
    /// channel → (sum, count)
    per_channel: BTreeMap<u16, (f64, u64)>,
}

/// Slices the processed frame stream into nominal-width archive windows.
/// Every sample lands in exactly the window its timestamp falls in; a
/// window is emitted once every channel's watermark has passed it (or at
/// flush).
pub struct Batcher {
    period: f64,
    next_emit: u64,
    accums: BTreeMap<u64, WindowAccum>,
    watermark: HashMap<u16, f64>,
    pending_events: Vec<AlarmEvent>,
    pending_spectra: Vec<SpectrumRow>,
    samples_in: u64,
}

impl Batcher {
    /// `channels` lists every uniformly-sampled channel expected to flow;
    /// readiness waits for all of them.
    pub fn new(period: f64, channels: &[u16]) -> Self {
        debug_assert!(period > 0.0);
        Batcher {
            period,
            next_emit: 0,
            accums: BTreeMap::new(),
            watermark: channels.iter().map(|&c| (c, 0.0)).collect(),
            pending_events: Vec::new(),
            pending_spectra: Vec::new(),
            samples_in: 0,
        }
    }

    pub fn push_frame(&mut self, frame: &SampleFrame) {
        for (i, &v) in frame.values.iter().enumerate() {
            let t = frame.sample_time(i);
            // A sample for an already-committed window folds into the next
            // open one rather than being lost.
            let k = ((t / self.period).floor().max(0.0) as u64).max(self.next_emit);
            let entry = self.accums.entry(k).or_default();
            let slot = entry.per_channel.entry(frame.channel_id).or_insert((0.0, 0));
            slot.0 += v;
            slot.1 += 1;
            self.samples_in += 1;
        }
        let wm = self.watermark.entry(frame.channel_id).or_insert(0.0);
        *wm = wm.max(frame.end_time());
    }

    /// Irregular series (per-pulse RPM estimates) go straight into windows.
    pub fn push_value(&mut self, channel_id: u16, t: f64, value: f64) {
        let k = ((t / self.period).floor().max(0.0) as u64).max(self.next_emit);
        let entry = self.accums.entry(k).or_default();
        let slot = entry.per_channel.entry(channel_id).or_insert((0.0, 0));
        slot.0 += value;
        slot.1 += 1;
    }

    pub fn push_event(&mut self, event: AlarmEvent) {
        self.pending_events.push(event);
    }

    pub fn push_spectrum_rows(&mut self, rows: Vec<SpectrumRow>) {
        self.pending_spectra.extend(rows);
    }

    /// Total samples folded into windows so far (conservation check).
    pub fn samples_in(&self) -> u64 {
        self.samples_in
    }

    /// Windows that every expected channel has moved past.
    pub fn drain_ready(&mut self) -> Vec<ArchiveBatch> {
        let min_wm = self
            .watermark
            .values()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if !min_wm.is_finite() {
            return Vec::new();
        }
        let ready_below = (min_wm / self.period).floor() as u64;
        self.emit_until(ready_below)
    }

    /// Emit everything still pending, including the final partial window.
    pub fn flush(&mut self) -> Vec<ArchiveBatch> {
        let last = self.accums.keys().next_back().copied();
        match last {
            Some(last) => self.emit_until(last + 1),
            None if !self.pending_events.is_empty() || !self.pending_spectra.is_empty() => {
                // Events with no sample windows still need a carrier batch.
                self.emit_until(self.next_emit + 1)
            }
            None => Vec::new(),
        }
    }

    fn emit_until(&mut self, end: u64) -> Vec<ArchiveBatch> {
        let mut out = Vec::new();
        while self.next_emit < end {
            let k = self.next_emit;
            let accum = self.accums.remove(&k).unwrap_or_default();
            let rows = accum
                .per_channel
                .into_iter()
                .map(|(channel_id, (sum, count))| SampleRow {
                    channel_id,
                    t: k as f64 * self.period,
                    value: sum / count as f64,
                })
                .collect();
            let mut batch = ArchiveBatch {
                batch_id: k,
                t_start: k as f64 * self.period,
                t_end: (k + 1) as f64 * self.period,
                rows,
                events: Vec::new(),
                spectra: Vec::new(),
            };
            if !self.pending_events.is_empty() {
                batch.events = std::mem::take(&mut self.pending_events);
            }
            if !self.pending_spectra.is_empty() {
                batch.spectra = std::mem::take(&mut self.pending_spectra);
            }
            out.push(batch);
            self.next_emit += 1;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

/// Filter for history queries and CSV export.
#[derive(Debug, Clone, Default)]
pub struct QueryFilter {
    /// Defaults to the most recently started run.
    pub run_id: Option<RunId>,
    pub t_from: Option<f64>,
    pub t_to: Option<f64>,
    pub channels: Option<Vec<u16>>,
    /// Query analysis_results instead of samples.
    pub analysis: bool,
}

impl QueryFilter {
    fn validate(&self) -> Result<()> {
        if let (Some(a), Some(b)) = (self.t_from, self.t_to) {
            if a > b {
                return Err(Error::Config(format!(
                    "query range start ({a}) must not exceed end ({b})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryRow {
    Sample {
        batch_id: u64,
        channel_id: u16,
        t: f64,
        value: f64,
    },
    Analysis {
        channel_id: u16,
        t: f64,
        order: f64,
        amplitude: f64,
        baseline: bool,
    },
}

/// Exact row-content snapshot of one run across all tables, for
/// store-equality assertions. Floats are compared by bit pattern.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StoreSnapshot {
    pub config: Option<String>,
    pub batches: Vec<(u64, u64, u64)>,
    pub samples: Vec<(u64, u16, u64, u64)>,
    pub analysis: Vec<(u16, u64, u64, u64, bool)>,
    pub alarms: Vec<(u16, u8, u64, u64, u64, Option<u64>)>,
}

/// SQLite-backed archive store.
pub struct Store {
    conn: Connection,
    path: PathBuf,
    fail_next_writes: u32,
}

impl Store {
    /// Open (or create) a store; any pending journal from a previous crash
    /// is replayed idempotently first.
    pub fn open<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let conn = Connection::open(&path)
            .map_err(|e| Error::Config(format!("cannot open store at {}: {e}", path.display())))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.execute_batch(
            "CREATE TABLE IF NOT EXISTS run_config (
                 run_id     TEXT PRIMARY KEY,
                 start_time REAL NOT NULL,
                 config     TEXT NOT NULL
             );
             CREATE TABLE IF NOT EXISTS samples (
                 run_id     TEXT NOT NULL,
                 batch_id   INTEGER NOT NULL,
                 channel_id INTEGER NOT NULL,
                 t          REAL NOT NULL,
                 value      REAL NOT NULL,
                 UNIQUE (run_id, batch_id, channel_id, t)
             );
             CREATE TABLE IF NOT EXISTS analysis_results (
                 run_id     TEXT NOT NULL,
                 channel_id INTEGER NOT NULL,
                 t          REAL NOT NULL,
                 ord        REAL NOT NULL,
                 amplitude  REAL NOT NULL,
                 baseline   INTEGER NOT NULL,
                 UNIQUE (run_id, channel_id, t, ord)
             );
             CREATE TABLE IF NOT EXISTS alarms (
                 run_id      TEXT NOT NULL,
                 channel_id  INTEGER NOT NULL,
                 kind        INTEGER NOT NULL,
                 value       REAL NOT NULL,
                 limit_value REAL NOT NULL,
                 t_raise     REAL NOT NULL,
                 t_clear     REAL,
                 UNIQUE (run_id, channel_id, kind, t_raise)
             );
             CREATE TABLE IF NOT EXISTS batches (
                 run_id   TEXT NOT NULL,
                 batch_id INTEGER NOT NULL,
                 t_start  REAL NOT NULL,
                 t_end    REAL NOT NULL,
                 PRIMARY KEY (run_id, batch_id)
             );
             CREATE TABLE IF NOT EXISTS meta (
                 key   TEXT PRIMARY KEY,
                 value TEXT NOT NULL
             );",
        )?;
        let mut store = Store {
            conn,
            path,
            fail_next_writes: 0,
        };
        store.replay_journal()?;
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Path of this store's crash-recovery journal.
    pub fn journal_path(&self) -> PathBuf {
        journal_path_for(&self.path)
    }

    /// Path of this store's replication outbox.
    pub fn outbox_path(&self) -> PathBuf {
        let mut os = self.path.clone().into_os_string();
        os.push(".outbox");
        PathBuf::from(os)
    }

    /// Register a run (idempotent).
    pub fn begin_run(&self, run_id: RunId, start_time: f64, config_text: &str) -> Result<()> {
        self.conn.execute(
            "INSERT OR IGNORE INTO run_config (run_id, start_time, config) VALUES (?1, ?2, ?3)",
            rusqlite::params![run_id.to_hex(), start_time, config_text],
        )?;
        Ok(())
    }

    pub fn run_exists(&self, run_id: RunId) -> Result<bool> {
        let n: u32 = self.conn.query_row(
            "SELECT COUNT(*) FROM run_config WHERE run_id = ?1",
            [run_id.to_hex()],
            |r| r.get(0),
        )?;
        Ok(n > 0)
    }

    /// Most recently started run.
    pub fn latest_run(&self) -> Result<Option<RunId>> {
        let mut stmt = self
            .conn
            .prepare("SELECT run_id FROM run_config ORDER BY start_time DESC, run_id LIMIT 1")?;
        let mut rows = stmt.query([])?;
        match rows.next()? {
            Some(row) => {
                let hex: String = row.get(0)?;
                Ok(RunId::parse_hex(&hex))
            }
            None => Ok(None),
        }
    }

    /// Commit one batch atomically; a batch id already committed for this
    /// run makes the call a no-op (idempotent apply).
    pub fn write_batch(&mut self, run_id: RunId, batch: &ArchiveBatch) -> Result<u64> {
        if self.fail_next_writes > 0 {
            self.fail_next_writes -= 1;
            return Err(Error::Store("injected write failure".into()));
        }
        let run_hex = run_id.to_hex();
        let tx = self.conn.transaction()?;
        let inserted = tx.execute(
            "INSERT OR IGNORE INTO batches (run_id, batch_id, t_start, t_end) VALUES (?1, ?2, ?3, ?4)",
            rusqlite::params![run_hex, batch.batch_id as i64, batch.t_start, batch.t_end],
        )?;
        if inserted == 0 {
            // Duplicate delivery: already committed, change nothing.
            tx.commit()?;
            return Ok(batch.batch_id);
        }
        {
            let mut ins = tx.prepare_cached(
                "INSERT OR IGNORE INTO samples (run_id, batch_id, channel_id, t, value)
                 VALUES (?1, ?2, ?3, ?4, ?5)",
            )?;
            for row in &batch.rows {
                ins.execute(rusqlite::params![
                    run_hex,
                    batch.batch_id as i64,
                    row.channel_id,
                    row.t,
                    row.value
                ])?;
            }
        }
        {
            let mut raise = tx.prepare_cached(
                "INSERT OR IGNORE INTO alarms (run_id, channel_id, kind, value, limit_value, t_raise, t_clear)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, NULL)",
            )?;
            let mut clear = tx.prepare_cached(
                "UPDATE alarms SET t_clear = ?4
                 WHERE run_id = ?1 AND channel_id = ?2 AND kind = ?3 AND t_raise = ?5
                   AND t_clear IS NULL",
            )?;
            for e in &batch.events {
                match e.cleared_t {
                    None => {
                        raise.execute(rusqlite::params![
                            run_hex,
                            e.channel_id,
                            e.kind.code(),
                            e.value,
                            e.limit,
                            e.t
                        ])?;
                    }
                    Some(tc) => {
                        clear.execute(rusqlite::params![
                            run_hex,
                            e.channel_id,
                            e.kind.code(),
                            tc,
                            e.t
                        ])?;
                    }
                }
            }
        }
        {
            let mut ins = tx.prepare_cached(
                "INSERT OR IGNORE INTO analysis_results (run_id, channel_id, t, ord, amplitude, baseline)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            )?;
            for s in &batch.spectra {
                ins.execute(rusqlite::params![
                    run_hex,
                    s.channel_id,
                    s.t,
                    s.order,
                    s.amplitude,
                    s.baseline
                ])?;
            }
        }
        tx.commit()?;
        Ok(batch.batch_id)
    }

    /// Make the next `n` write_batch calls fail (fault-injection hook for
    /// the retry/journal-spill path).
    #[doc(hidden)]
    pub fn inject_write_failures(&mut self, n: u32) {
        self.fail_next_writes = n;
    }

    pub fn batch_count(&self, run_id: RunId) -> Result<u64> {
        let n: i64 = self.conn.query_row(
            "SELECT COUNT(*) FROM batches WHERE run_id = ?1",
            [run_id.to_hex()],
            |r| r.get(0),
        )?;
        Ok(n as u64)
    }

    pub fn sample_row_count(&self, run_id: RunId, channel_id: Option<u16>) -> Result<u64> {
        let n: i64 = match channel_id {
            Some(ch) => self.conn.query_row(
                "SELECT COUNT(*) FROM samples WHERE run_id = ?1 AND channel_id = ?2",
                rusqlite::params![run_id.to_hex(), ch],
                |r| r.get(0),
            )?,
            None => self.conn.query_row(
                "SELECT COUNT(*) FROM samples WHERE run_id = ?1",
                [run_id.to_hex()],
                |r| r.get(0),
            )?,
        };
        Ok(n as u64)
    }

    /// Highest batch id such that 0..=id are all committed.
    pub fn highest_contiguous_batch(&self, run_id: RunId) -> Result<Option<u64>> {
        let mut stmt = self
            .conn
            .prepare("SELECT batch_id FROM batches WHERE run_id = ?1 ORDER BY batch_id")?;
        let ids = stmt.query_map([run_id.to_hex()], |r| r.get::<_, i64>(0))?;
        let mut expect: u64 = 0;
        let mut highest = None;
        for id in ids {
            let id = id? as u64;
            if id != expect {
                break;
            }
            highest = Some(id);
            expect += 1;
        }
        Ok(highest)
    }

    /// Rows matching all filter predicates, ordered by time.
    pub fn query(&self, filter: &QueryFilter) -> Result<Vec<QueryRow>> {
        filter.validate()?;
        let run = match filter.run_id {
            Some(r) => r,
            None => match self.latest_run()? {
                Some(r) => r,
                None => return Ok(Vec::new()),
            },
        };
        let t_from = filter.t_from.unwrap_or(f64::NEG_INFINITY);
        let t_to = filter.t_to.unwrap_or(f64::INFINITY);
        let channel_list = filter.channels.as_ref().map(|cs| {
            cs.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        });

        let mut out = Vec::new();
        if filter.analysis {
            let sql = format!(
                "SELECT channel_id, t, ord, amplitude, baseline FROM analysis_results
                 WHERE run_id = ?1 AND t >= ?2 AND t <= ?3{}
                 ORDER BY t, channel_id, ord",
                channel_clause(&channel_list)
            );
            let mut stmt = self.conn.prepare(&sql)?;
            let rows = stmt.query_map(
                rusqlite::params![run.to_hex(), t_from, t_to],
                |r| {
                    Ok(QueryRow::Analysis {
                        channel_id: r.get::<_, i64>(0)? as u16,
                        t: r.get(1)?,
                        order: r.get(2)?,
                        amplitude: r.get(3)?,
                        baseline: r.get::<_, i64>(4)? != 0,
                    })
                },
            )?;
            for row in rows {
                out.push(row?);
            }
        } else {
            let sql = format!(
                "SELECT batch_id, channel_id, t, value FROM samples
                 WHERE run_id = ?1 AND t >= ?2 AND t <= ?3{}
                 ORDER BY t, channel_id",
                channel_clause(&channel_list)
            );
            let mut stmt = self.conn.prepare(&sql)?;
            let rows = stmt.query_map(
                rusqlite::params![run.to_hex(), t_from, t_to],
                |r| {
                    Ok(QueryRow::Sample {
                        batch_id: r.get::<_, i64>(0)? as u64,
                        channel_id: r.get::<_, i64>(1)? as u16,
                        t: r.get(2)?,
                        value: r.get(3)?,
                    })
                },
            )?;
            for row in rows {
                out.push(row?);
            }
        }
        Ok(out)
    }

    /// Export query results as RFC-4180 CSV; returns the data row count.
    /// Values round-trip bit-exactly (shortest f64 form).
    pub fn export_csv<P: AsRef<Path>>(&self, filter: &QueryFilter, path: P) -> Result<u64> {
        let rows = self.query(filter)?;
        let mut w = csv::Writer::from_path(path.as_ref())
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let write_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut count = 0u64;
        if filter.analysis {
            w.write_record(["t", "channel", "order", "amplitude"])
                .map_err(write_err)?;
            for row in &rows {
                if let QueryRow::Analysis {
                    channel_id,
                    t,
                    order,
                    amplitude,
                    ..
                } = row
                {
                    w.write_record([
                        format_f64(*t),
                        channel_id.to_string(),
                        format_f64(*order),
                        format_f64(*amplitude),
                    ])
                    .map_err(write_err)?;
                    count += 1;
                }
            }
        } else {
            w.write_record(["t", "channel", "value"]).map_err(write_err)?;
            for row in &rows {
                if let QueryRow::Sample {
                    channel_id,
                    t,
                    value,
                    ..
                } = row
                {
                    w.write_record([format_f64(*t), channel_id.to_string(), format_f64(*value)])
                        .map_err(write_err)?;
                    count += 1;
                }
            }
        }
        w.flush()?;
        Ok(count)
    }

    /// Average baseline spectrum per channel for a designated healthy run.
    pub fn load_baseline(&self, run_id: RunId) -> Result<HashMap<u16, OrderSpectrum>> {
        let mut stmt = self.conn.prepare(
            "SELECT channel_id, ord, AVG(amplitude) FROM analysis_results
             WHERE run_id = ?1 AND baseline = 1
             GROUP BY channel_id, ord ORDER BY channel_id, ord",
        )?;
        let rows = stmt.query_map([run_id.to_hex()], |r| {
            Ok((
                r.get::<_, i64>(0)? as u16,
                r.get::<_, f64>(1)?,
                r.get::<_, f64>(2)?,
            ))
        })?;
        let mut per_channel: HashMap<u16, Vec<(f64, f64)>> = HashMap::new();
        for row in rows {
            let (ch, ord, amp) = row?;
            per_channel.entry(ch).or_default().push((ord, amp));
        }
        let mut out = HashMap::new();
        for (ch, bins) in per_channel {
            // Bins are stored dense from order 0; resolution is the first
            // nonzero order.
            let resolution = bins
                .iter()
                .map(|(o, _)| *o)
                .filter(|o| *o > 0.0)
                .fold(f64::INFINITY, f64::min);
            if !resolution.is_finite() {
                continue;
            }
            let n_bins = bins.len();
            let mut amplitudes = vec![0.0; n_bins];
            for (o, a) in bins {
                let idx = (o / resolution).round() as usize;
                if idx < n_bins {
                    amplitudes[idx] = a;
                }
            }
            out.insert(
                ch,
                OrderSpectrum {
                    order_resolution: resolution,
                    amplitudes,
                    revolutions: 1.0 / resolution,
                },
            );
        }
        Ok(out)
    }

    pub fn get_meta(&self, key: &str) -> Result<Option<String>> {
        let mut stmt = self.conn.prepare("SELECT value FROM meta WHERE key = ?1")?;
        let mut rows = stmt.query([key])?;
        Ok(rows.next()?.map(|r| r.get(0)).transpose()?)
    }

    pub fn set_meta(&self, key: &str, value: &str) -> Result<()> {
        self.conn.execute(
            "INSERT INTO meta (key, value) VALUES (?1, ?2)
             ON CONFLICT(key) DO UPDATE SET value = excluded.value",
            rusqlite::params![key, value],
        )?;
        Ok(())
    }

    /// The config text stored for a run.
    pub fn run_config_text(&self, run_id: RunId) -> Result<Option<String>> {
        let mut stmt = self
            .conn
            .prepare("SELECT config FROM run_config WHERE run_id = ?1")?;
        let mut rows = stmt.query([run_id.to_hex()])?;
        Ok(rows.next()?.map(|r| r.get(0)).transpose()?)
    }

    /// Exact content snapshot for one run (floats by bit pattern).
    pub fn snapshot(&self, run_id: RunId) -> Result<StoreSnapshot> {
        let run_hex = run_id.to_hex();
        let mut snap = StoreSnapshot {
            config: self.run_config_text(run_id)?,
            ..Default::default()
        };
        let mut stmt = self.conn.prepare(
            "SELECT batch_id, t_start, t_end FROM batches WHERE run_id = ?1 ORDER BY batch_id",
        )?;
        for row in stmt.query_map([&run_hex], |r| {
            Ok((
                r.get::<_, i64>(0)? as u64,
                r.get::<_, f64>(1)?.to_bits(),
                r.get::<_, f64>(2)?.to_bits(),
            ))
        })? {
            snap.batches.push(row?);
        }
        let mut stmt = self.conn.prepare(
            "SELECT batch_id, channel_id, t, value FROM samples WHERE run_id = ?1
             ORDER BY batch_id, channel_id, t",
        )?;
        for row in stmt.query_map([&run_hex], |r| {
            Ok((
                r.get::<_, i64>(0)? as u64,
                r.get::<_, i64>(1)? as u16,
                r.get::<_, f64>(2)?.to_bits(),
                r.get::<_, f64>(3)?.to_bits(),
            ))
        })? {
            snap.samples.push(row?);
        }
        let mut stmt = self.conn.prepare(
            "SELECT channel_id, t, ord, amplitude, baseline FROM analysis_results
             WHERE run_id = ?1 ORDER BY t, channel_id, ord",
        )?;
        for row in stmt.query_map([&run_hex], |r| {
            Ok((
                r.get::<_, i64>(0)? as u16,
                r.get::<_, f64>(1)?.to_bits(),
                r.get::<_, f64>(2)?.to_bits(),
                r.get::<_, f64>(3)?.to_bits(),
                r.get::<_, i64>(4)? != 0,
            ))
        })? {
            snap.analysis.push(row?);
        }
        let mut stmt = self.conn.prepare(
            "SELECT channel_id, kind, value, limit_value, t_raise, t_clear FROM alarms
             WHERE run_id = ?1 ORDER BY t_raise, channel_id, kind",
        )?;
        for row in stmt.query_map([&run_hex], |r| {
            Ok((
                r.get::<_, i64>(0)? as u16,
                r.get::<_, i64>(1)? as u8,
                r.get::<_, f64>(2)?.to_bits(),
                r.get::<_, f64>(3)?.to_bits(),
                r.get::<_, f64>(4)?.to_bits(),
                r.get::<_, Option<f64>>(5)?.map(f64::to_bits),
            ))
        })? {
            snap.alarms.push(row?);
        }
        Ok(snap)
    }

    /// Replay and truncate the crash-recovery journal.
    fn replay_journal(&mut self) -> Result<()> {
        let jpath = self.journal_path();
        if !jpath.exists() {
            return Ok(());
        }
        let bytes = std::fs::read(&jpath)?;
        let mut offset = 0usize;
        while offset < bytes.len() {
            match wire::decode_message(&bytes[offset..]) {
                Ok((wire::Message::Batch { run_id, batch }, consumed)) => {
                    self.write_batch(run_id, &batch)?;
                    offset += consumed;
                }
                Ok((_, consumed)) => {
                    offset += consumed;
                }
                Err(_) => break, // torn tail from the crash; committed prefix applied
            }
        }
        std::fs::remove_file(&jpath)?;
        Ok(())
    }
}

fn channel_clause(list: &Option<String>) -> String {
    match list {
        Some(l) if !l.is_empty() => format!(" AND channel_id IN ({l})"),
        _ => String::new(),
    }
}

/// Rust's f64 Display is the shortest representation that parses back to
/// the identical bits, which is what the export round-trip contract needs.
fn format_f64(v: f64) -> String {
    format!("{v}")
}

pub fn journal_path_for(store_path: &Path) -> PathBuf {
    let mut os = store_path.to_path_buf().into_os_string();
    os.push(".journal");
    PathBuf::from(os)
}

/// Append one batch to a journal file (wire-encoded), used when the store
/// is unavailable and the in-memory retry queue overflows.
pub fn journal_append(path: &Path, run_id: RunId, batch: &ArchiveBatch) -> Result<()> {
    let msg = wire::Message::Batch {
        run_id,
        batch: batch.clone(),
    };
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&wire::encode_message(&msg))?;
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Outbox: append-only replication feed
// ---------------------------------------------------------------------------

/// Appends committed batches for the replication activity to stream out.
pub struct OutboxWriter {
    file: File,
}

impl OutboxWriter {
    pub fn create(path: &Path) -> Result<Self> {
        // Truncate: the outbox belongs to a single run of the pipeline.
        let file = File::create(path)?;
        Ok(OutboxWriter { file })
    }

    pub fn append(&mut self, run_id: RunId, batch: &ArchiveBatch) -> Result<()> {
        let msg = wire::Message::Batch {
            run_id,
            batch: batch.clone(),
        };
        self.file.write_all(&wire::encode_message(&msg))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// Sequential reader over the outbox; tolerates a still-growing file by
/// treating a torn tail as "nothing more yet".
pub struct OutboxReader {
    path: PathBuf,
    offset: u64,
}

impl OutboxReader {
    pub fn new(path: PathBuf) -> Self {
        OutboxReader { path, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Next complete batch, or `None` if the tail hasn't landed yet.
    pub fn next(&mut self) -> Result<Option<(RunId, ArchiveBatch)>> {
        let mut file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let len = file.metadata()?.len();
        if self.offset >= len {
            return Ok(None);
        }
        file.seek(SeekFrom::Start(self.offset))?;
        let mut buf = Vec::with_capacity(4096);
        file.take(len - self.offset).read_to_end(&mut buf)?;
        match wire::decode_message(&buf) {
            Ok((wire::Message::Batch { run_id, batch }, consumed)) => {
                self.offset += consumed as u64;
                Ok(Some((run_id, batch)))
            }
            Ok((_, consumed)) => {
                self.offset += consumed as u64;
                self.next()
            }
            Err(Error::Format { reason, .. })
                if reason.contains("truncated") || reason.contains("shorter") =>
            {
                Ok(None) // writer mid-append
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SampleFrame;
    use crate::threshold::AlarmKind;

    fn temp_store(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("motormon-store-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        let _ = std::fs::remove_file(&p);
        let _ = std::fs::remove_file(journal_path_for(&p));
        p
    }

    fn batch_with_rows(id: u64, rows: Vec<SampleRow>) -> ArchiveBatch {
        ArchiveBatch {
            batch_id: id,
            t_start: id as f64 * 0.01,
            t_end: (id + 1) as f64 * 0.01,
            rows,
            events: vec![],
            spectra: vec![],
        }
    }

    #[test]
    fn empty_batch_commits_zero_rows() {
        let mut store = Store::open(temp_store("empty.db")).unwrap();
        let run = RunId::from_seed(1);
        store.begin_run(run, 0.0, "").unwrap();
        store.write_batch(run, &batch_with_rows(0, vec![])).unwrap();
        assert_eq!(store.batch_count(run).unwrap(), 1);
        assert_eq!(store.sample_row_count(run, None).unwrap(), 0);
    }

    #[test]
    fn batch_rows_retrievable_by_range() {
        let mut store = Store::open(temp_store("rows.db")).unwrap();
        let run = RunId::from_seed(2);
        store.begin_run(run, 0.0, "").unwrap();
        let rows: Vec<SampleRow> = (1..=7)
            .map(|c| SampleRow {
                channel_id: c,
                t: 0.0,
                value: c as f64 * 1.5,
            })
            .collect();
        store.write_batch(run, &batch_with_rows(0, rows)).unwrap();
        let got = store
            .query(&QueryFilter {
                run_id: Some(run),
                t_from: Some(0.0),
                t_to: Some(1.0),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(got.len(), 7);
    }

    #[test]
    fn duplicate_write_is_noop() {
        let mut store = Store::open(temp_store("dup.db")).unwrap();
        let run = RunId::from_seed(3);
        store.begin_run(run, 0.0, "").unwrap();
        let batch = batch_with_rows(
            42,
            vec![SampleRow {
                channel_id: 1,
                t: 0.42,
                value: 1.0,
            }],
        );
        store.write_batch(run, &batch).unwrap();
        let before = store.snapshot(run).unwrap();
        store.write_batch(run, &batch).unwrap();
        // A conflicting duplicate (different payload, same id) changes nothing either.
        let mut altered = batch.clone();
        altered.rows[0].value = 999.0;
        store.write_batch(run, &altered).unwrap();
        assert_eq!(store.snapshot(run).unwrap(), before);
    }

    #[test]
    fn alarm_raise_then_clear_updates_row() {
        let mut store = Store::open(temp_store("alarms.db")).unwrap();
        let run = RunId::from_seed(4);
        store.begin_run(run, 0.0, "").unwrap();
        let raise = AlarmEvent {
            channel_id: 3,
            kind: AlarmKind::HighLimit,
            value: 90.0,
            limit: 80.0,
            t: 0.005,
            cleared_t: None,
        };
        let mut b0 = batch_with_rows(0, vec![]);
        b0.events.push(raise.clone());
        store.write_batch(run, &b0).unwrap();
        let mut b1 = batch_with_rows(1, vec![]);
        b1.events.push(AlarmEvent {
            cleared_t: Some(0.015),
            ..raise
        });
        store.write_batch(run, &b1).unwrap();
        let snap = store.snapshot(run).unwrap();
        assert_eq!(snap.alarms.len(), 1);
        assert_eq!(snap.alarms[0].5, Some(0.015f64.to_bits()));
    }

    #[test]
    fn query_empty_range_is_empty() {
        let mut store = Store::open(temp_store("emptyrange.db")).unwrap();
        let run = RunId::from_seed(5);
        store.begin_run(run, 0.0, "").unwrap();
        store
            .write_batch(
                run,
                &batch_with_rows(
                    0,
                    vec![SampleRow {
                        channel_id: 1,
                        t: 0.0,
                        value: 1.0,
                    }],
                ),
            )
            .unwrap();
        let got = store
            .query(&QueryFilter {
                run_id: Some(run),
                t_from: Some(5.0),
                t_to: Some(6.0),
                ..Default::default()
            })
            .unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn malformed_range_is_validation_error() {
        let store = Store::open(temp_store("badrange.db")).unwrap();
        let err = store
            .query(&QueryFilter {
                t_from: Some(2.0),
                t_to: Some(1.0),
                ..Default::default()
            })
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn csv_export_round_trips_bit_exactly() {
        let mut store = Store::open(temp_store("csv.db")).unwrap();
        let run = RunId::from_seed(6);
        store.begin_run(run, 0.0, "").unwrap();
        // Awkward values: subnormal-ish, huge, negative zero, thirds.
        let values = [1.0 / 3.0, -0.0, 1.7e308, 5e-324, 0.1 + 0.2, -273.15];
        let rows: Vec<SampleRow> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| SampleRow {
                channel_id: i as u16,
                t: i as f64 * 0.01 + 0.001,
                value: v,
            })
            .collect();
        store.write_batch(run, &batch_with_rows(0, rows.clone())).unwrap();
        let path = temp_store("export.csv");
        let count = store
            .export_csv(
                &QueryFilter {
                    run_id: Some(run),
                    ..Default::default()
                },
                &path,
            )
            .unwrap();
        assert_eq!(count, rows.len() as u64);

        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let mut got: Vec<(f64, u16, f64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            got.push((
                rec[0].parse().unwrap(),
                rec[1].parse().unwrap(),
                rec[2].parse().unwrap(),
            ));
        }
        assert_eq!(got.len(), rows.len());
        for (got, want) in got.iter().zip(rows.iter()) {
            assert_eq!(got.0.to_bits(), want.t.to_bits(), "t not bit-exact");
            assert_eq!(got.1, want.channel_id);
            assert_eq!(got.2.to_bits(), want.value.to_bits(), "value not bit-exact");
        }
        // Line count = rows + header.
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), rows.len() + 1);
    }

    #[test]
    fn csv_export_empty_result_is_header_only() {
        let store = Store::open(temp_store("csvempty.db")).unwrap();
        let path = temp_store("export_empty.csv");
        let count = store.export_csv(&QueryFilter::default(), &path).unwrap();
        assert_eq!(count, 0);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("t,channel,value"));
    }

    #[test]
    fn journal_replay_restores_batches() {
        let path = temp_store("journal.db");
        let run = RunId::from_seed(7);
        {
            let store = Store::open(&path).unwrap();
            store.begin_run(run, 0.0, "cfg").unwrap();
        }
        // Simulate a crash: two batches made it only into the journal.
        let jpath = journal_path_for(&path);
        for id in 0..2u64 {
            journal_append(
                &jpath,
                run,
                &batch_with_rows(
                    id,
                    vec![SampleRow {
                        channel_id: 1,
                        t: id as f64 * 0.01,
                        value: id as f64,
                    }],
                ),
            )
            .unwrap();
        }
        let store = Store::open(&path).unwrap();
        assert_eq!(store.batch_count(run).unwrap(), 2);
        assert!(!jpath.exists(), "journal must be consumed");
    }

    #[test]
    fn highest_contiguous_stops_at_gap() {
        let mut store = Store::open(temp_store("contig.db")).unwrap();
        let run = RunId::from_seed(8);
        store.begin_run(run, 0.0, "").unwrap();
        for id in [0u64, 1, 2, 4, 5] {
            store.write_batch(run, &batch_with_rows(id, vec![])).unwrap();
        }
        assert_eq!(store.highest_contiguous_batch(run).unwrap(), Some(2));
    }

    #[test]
    fn batcher_slices_frames_into_windows() {
        let mut batcher = Batcher::new(0.01, &[1]);
        // 100 samples at 1 kHz = 0.1 s = 10 windows of 10 samples each.
        let frame = SampleFrame {
            channel_id: 1,
            t0: 0.0,
            sample_rate: 1000.0,
            values: (0..100).map(|i| i as f64).collect(),
            sequence: 0,
        };
        batcher.push_frame(&frame);
        let ready = batcher.drain_ready();
        // Watermark reached exactly 0.1 → windows 0..9 are final.
        assert_eq!(ready.len(), 10);
        for (k, b) in ready.iter().enumerate() {
            assert_eq!(b.batch_id, k as u64);
            assert_eq!(b.rows.len(), 1);
            // Mean of 10 consecutive integers starting at 10k.
            let want = (0..10).map(|i| (10 * k + i) as f64).sum::<f64>() / 10.0;
            assert!((b.rows[0].value - want).abs() < 1e-12);
            assert!((b.t_end - b.t_start - 0.01).abs() < 1e-12);
        }
        assert_eq!(batcher.samples_in(), 100);
        assert!(batcher.flush().is_empty());
    }

    #[test]
    fn batcher_waits_for_slowest_channel() {
        let mut batcher = Batcher::new(0.01, &[1, 2]);
        batcher.push_frame(&SampleFrame {
            channel_id: 1,
            t0: 0.0,
            sample_rate: 1000.0,
            values: vec![1.0; 100],
            sequence: 0,
        });
        // Channel 2 hasn't delivered anything yet: nothing is final.
        assert!(batcher.drain_ready().is_empty());
        batcher.push_frame(&SampleFrame {
            channel_id: 2,
            t0: 0.0,
            sample_rate: 1000.0,
            values: vec![2.0; 50],
            sequence: 0,
        });
        let ready = batcher.drain_ready();
        assert_eq!(ready.len(), 5); // min watermark 0.05
        assert!(ready.iter().all(|b| b.rows.len() == 2));
    }

    #[test]
    fn batcher_flush_fills_gaps_with_empty_batches() {
        let mut batcher = Batcher::new(0.01, &[1]);
        batcher.push_value(1, 0.005, 1.0);
        batcher.push_value(1, 0.045, 2.0); // windows 0 and 4; 1..3 empty
        let all = batcher.flush();
        assert_eq!(all.len(), 5);
        assert_eq!(all[0].rows.len(), 1);
        assert!(all[1].rows.is_empty());
        assert!(all[3].rows.is_empty());
        assert_eq!(all[4].rows.len(), 1);
    }

    #[test]
    fn outbox_round_trip_and_torn_tail() {
        let dir = std::env::temp_dir().join(format!("motormon-outbox-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.outbox");
        let _ = std::fs::remove_file(&path);
        let run = RunId::from_seed(9);
        let mut writer = OutboxWriter::create(&path).unwrap();
        writer.append(run, &batch_with_rows(0, vec![])).unwrap();
        writer
            .append(
                run,
                &batch_with_rows(
                    1,
                    vec![SampleRow {
                        channel_id: 1,
                        t: 0.01,
                        value: 3.0,
                    }],
                ),
            )
            .unwrap();
        writer.flush().unwrap();

        let mut reader = OutboxReader::new(path.clone());
        let (r0, b0) = reader.next().unwrap().unwrap();
        assert_eq!(r0, run);
        assert_eq!(b0.batch_id, 0);
        let (_, b1) = reader.next().unwrap().unwrap();
        assert_eq!(b1.batch_id, 1);
        assert!(reader.next().unwrap().is_none());

        // Torn tail: append half a message; reader must wait, then resume.
        let full = wire::encode_message(&wire::Message::Batch {
            run_id: run,
            batch: batch_with_rows(2, vec![]),
        });
        {
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            f.write_all(&full[..full.len() / 2]).unwrap();
        }
        assert!(reader.next().unwrap().is_none());
        {
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            f.write_all(&full[full.len() / 2..]).unwrap();
        }
        let (_, b2) = reader.next().unwrap().unwrap();
        assert_eq!(b2.batch_id, 2);
    }

    #[test]
    fn run_id_hex_round_trip() {
        let run = RunId::from_seed(0xdead_beef);
        assert_eq!(RunId::parse_hex(&run.to_hex()), Some(run));
        assert_ne!(RunId::from_seed(1), RunId::from_seed(2));
        assert_eq!(RunId::from_seed(7), RunId::from_seed(7));
    }

    #[test]
    fn injected_write_failure_then_recovery() {
        let mut store = Store::open(temp_store("inject.db")).unwrap();
        let run = RunId::from_seed(10);
        store.begin_run(run, 0.0, "").unwrap();
        store.inject_write_failures(1);
        assert!(store.write_batch(run, &batch_with_rows(0, vec![])).is_err());
        store.write_batch(run, &batch_with_rows(0, vec![])).unwrap();
        assert_eq!(store.batch_count(run).unwrap(), 1);
    }
}
