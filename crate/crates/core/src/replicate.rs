//! Remote replication: a client that streams committed batches from the
//! outbox to a remote store over the framed wire protocol, and the server
//! that applies them idempotently.
//!
//! Delivery is at-least-once (reconnect + resend on any failure); the
//! store's batch-id idempotence turns that into exactly-once effect. The
//! remote ACKs its highest contiguous batch id, so a reconnecting client
//! skips everything already applied.

use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::archive::{ArchiveBatch, OutboxReader, RunId, Store};
use crate::error::{Error, Result};
use crate::wire::{self, Message};

/// Reconnect backoff: 100 ms base, doubling, capped at 10 s.
pub const BACKOFF_BASE: Duration = Duration::from_millis(100);
pub const BACKOFF_CAP: Duration = Duration::from_secs(10);

const READ_TIMEOUT: Duration = Duration::from_secs(2);
const CONNECT_TIMEOUT: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplicationOutcome {
    /// Everything in the outbox was acknowledged by the remote.
    pub drained: bool,
    pub batches_sent: u64,
    pub highest_acked: Option<u64>,
    pub reconnects: u64,
}

/// Streams the outbox to one remote endpoint.
pub struct ReplicationClient {
    endpoint: String,
    reader: OutboxReader,
    hello: Message,
    conn: Option<TcpStream>,
    backoff: Duration,
    acked: Option<u64>,
    pending: Option<(RunId, ArchiveBatch)>,
    outcome: ReplicationOutcome,
}

impl ReplicationClient {
    pub fn new(
        endpoint: String,
        outbox_path: PathBuf,
        run_id: RunId,
        start_time: f64,
        config_text: String,
    ) -> Self {
        ReplicationClient {
            endpoint,
            reader: OutboxReader::new(outbox_path),
            hello: Message::Hello {
                run_id,
                start_time,
                config_text,
            },
            conn: None,
            backoff: BACKOFF_BASE,
            acked: None,
            pending: None,
            outcome: ReplicationOutcome::default(),
        }
    }

    /// Drive replication until `stop_when_drained` is set *and* the outbox
    /// is fully acknowledged, or `deadline` passes. The producer keeps
    /// appending while this runs.
    pub fn run(
        mut self,
        stop_when_drained: &AtomicBool,
        deadline_after_stop: Duration,
    ) -> ReplicationOutcome {
        let mut stop_seen_at: Option<std::time::Instant> = None;
        loop {
            let stopping = stop_when_drained.load(Ordering::Acquire);
            if stopping && stop_seen_at.is_none() {
                stop_seen_at = Some(std::time::Instant::now());
            }
            if let Some(at) = stop_seen_at {
                if at.elapsed() > deadline_after_stop {
                    self.outcome.drained = false;
                    return self.outcome;
                }
            }

            // Next batch: a resend takes priority over new outbox entries.
            let item = match self.pending.take() {
                Some(p) => Some(p),
                None => match self.reader.next() {
                    Ok(item) => item,
                    Err(_) => None,
                },
            };
            let (run_id, batch) = match item {
                Some(x) => x,
                None => {
                    if stopping {
                        self.outcome.drained = true;
                        return self.outcome;
                    }
                    std::thread::sleep(Duration::from_millis(5));
                    continue;
                }
            };
            if let Some(acked) = self.acked {
                if batch.batch_id <= acked {
                    continue; // remote already has it
                }
            }
            match self.send_one(run_id, &batch) {
                Ok(()) => {
                    self.outcome.batches_sent += 1;
                    self.backoff = BACKOFF_BASE;
                }
                Err(_) => {
                    self.conn = None;
                    self.pending = Some((run_id, batch));
                    let wait = self.backoff.min(BACKOFF_CAP);
                    // Cap each wait by the remaining drain budget.
                    let wait = match stop_seen_at {
                        Some(at) => {
                            let left = deadline_after_stop.saturating_sub(at.elapsed());
                            wait.min(left)
                        }
                        None => wait,
                    };
                    std::thread::sleep(wait);
                    self.backoff = (self.backoff * 2).min(BACKOFF_CAP);
                }
            }
        }
    }

    fn send_one(&mut self, run_id: RunId, batch: &ArchiveBatch) -> Result<()> {
        self.ensure_connected()?;
        let stream = self.conn.as_mut().expect("connected above");
        let msg = Message::Batch {
            run_id,
            batch: batch.clone(),
        };
        use std::io::Write;
        stream.write_all(&wire::encode_message(&msg))?;
        match wire::read_message(stream)? {
            Some(Message::Ack { highest_contiguous }) => {
                self.acked = highest_contiguous;
                self.outcome.highest_acked = highest_contiguous;
                Ok(())
            }
            Some(Message::Nak) => {
                // Remote saw a damaged frame: resend over the same link.
                stream.write_all(&wire::encode_message(&msg))?;
                match wire::read_message(stream)? {
                    Some(Message::Ack { highest_contiguous }) => {
                        self.acked = highest_contiguous;
                        self.outcome.highest_acked = highest_contiguous;
                        Ok(())
                    }
                    other => Err(Error::Net(format!("after resend, expected ACK, got {other:?}"))),
                }
            }
            other => Err(Error::Net(format!("expected ACK, got {other:?}"))),
        }
    }

    fn ensure_connected(&mut self) -> Result<()> {
        if self.conn.is_some() {
            return Ok(());
        }
        let addr = resolve(&self.endpoint)?;
        let mut stream = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT)
            .map_err(|e| Error::Net(format!("connect {}: {e}", self.endpoint)))?;
        stream.set_nodelay(true).ok();
        stream.set_read_timeout(Some(READ_TIMEOUT))?;
        use std::io::Write;
        stream.write_all(&wire::encode_message(&self.hello))?;
        match wire::read_message(&mut stream)? {
            Some(Message::Ack { highest_contiguous }) => {
                self.acked = highest_contiguous;
                self.outcome.highest_acked = highest_contiguous;
                self.outcome.reconnects += 1;
                self.conn = Some(stream);
                Ok(())
            }
            other => Err(Error::Net(format!("HELLO expected ACK, got {other:?}"))),
        }
    }
}

fn resolve(endpoint: &str) -> Result<SocketAddr> {
    endpoint
        .to_socket_addrs()
        .map_err(|e| Error::Net(format!("resolve {endpoint}: {e}")))?
        .next()
        .ok_or_else(|| Error::Net(format!("no address for {endpoint}")))
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

/// Tracks the highest contiguous batch id without re-walking the store per
/// message.
struct ContigTracker {
    next: u64,
    ahead: std::collections::BTreeSet<u64>,
}

impl ContigTracker {
    fn from_store(store: &Store, run_id: RunId) -> Result<Self> {
        let highest = store.highest_contiguous_batch(run_id)?;
        Ok(ContigTracker {
            next: highest.map_or(0, |h| h + 1),
            ahead: Default::default(),
        })
    }

    fn apply(&mut self, batch_id: u64) {
        if batch_id == self.next {
            self.next += 1;
            while self.ahead.remove(&self.next) {
                self.next += 1;
            }
        } else if batch_id > self.next {
            self.ahead.insert(batch_id);
        }
    }

    fn highest(&self) -> Option<u64> {
        self.next.checked_sub(1)
    }
}

/// A running replication target.
pub struct RemoteServer {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accepting: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl RemoteServer {
    /// Bind `listen` and apply incoming batches into the store at
    /// `store_path`. Returns once the listener is live.
    pub fn start(listen: &str, store_path: &Path) -> Result<RemoteServer> {
        let listener = TcpListener::bind(listen)
            .map_err(|e| Error::Net(format!("bind {listen}: {e}")))?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let store = Arc::new(Mutex::new(Store::open(store_path)?));
        let shutdown = Arc::new(AtomicBool::new(false));
        let accepting = Arc::new(AtomicBool::new(true));
        let handle = {
            let shutdown = Arc::clone(&shutdown);
            let accepting = Arc::clone(&accepting);
            std::thread::Builder::new()
                .name("replication-server".into())
                .spawn(move || accept_loop(listener, store, shutdown, accepting))
                .expect("spawn replication server")
        };
        Ok(RemoteServer {
            addr,
            shutdown,
            accepting,
            handle: Some(handle),
        })
    }

    /// Outage injection: while false, new connections are dropped and
    /// in-flight handlers hang up before their next message.
    pub fn set_accepting(&self, accepting: bool) {
        self.accepting.store(accepting, Ordering::Release);
    }

    pub fn stop(mut self) {
        self.shutdown.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RemoteServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    store: Arc<Mutex<Store>>,
    shutdown: Arc<AtomicBool>,
    accepting: Arc<AtomicBool>,
) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !shutdown.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, _peer)) => {
                if !accepting.load(Ordering::Acquire) {
                    drop(stream); // scripted outage: refuse service
                    continue;
                }
                let store = Arc::clone(&store);
                let accepting = Arc::clone(&accepting);
                let shutdown = Arc::clone(&shutdown);
                workers.push(
                    std::thread::Builder::new()
                        .name("replication-conn".into())
                        .spawn(move || {
                            let _ = handle_connection(stream, &store, &accepting, &shutdown);
                        })
                        .expect("spawn connection handler"),
                );
                workers.retain(|w| !w.is_finished());
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(_) => std::thread::sleep(Duration::from_millis(10)),
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

/// Apply messages from one client connection until it hangs up, the
/// scripted outage trips, or the server shuts down.
pub fn handle_connection(
    mut stream: TcpStream,
    store: &Mutex<Store>,
    accepting: &AtomicBool,
    shutdown: &AtomicBool,
) -> Result<()> {
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    stream.set_nodelay(true).ok();
    let mut tracker: Option<(RunId, ContigTracker)> = None;
    loop {
        if !accepting.load(Ordering::Acquire) || shutdown.load(Ordering::Acquire) {
            return Ok(()); // hang up mid-stream
        }
        let msg = match wire::read_message(&mut stream) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()), // clean close
            Err(Error::Io(e))
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                continue; // idle; poll the gate again
            }
            Err(Error::Format { .. }) => {
                // Damaged or garbage frame: NAK and drop the link, since
                // framing may be lost.
                use std::io::Write;
                let _ = stream.write_all(&wire::encode_message(&Message::Nak));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        match msg {
            Message::Hello {
                run_id,
                start_time,
                config_text,
            } => {
                let store_guard = store.lock().unwrap();
                store_guard.begin_run(run_id, start_time, &config_text)?;
                let t = ContigTracker::from_store(&store_guard, run_id)?;
                drop(store_guard);
                let ack = Message::Ack {
                    highest_contiguous: t.highest(),
                };
                tracker = Some((run_id, t));
                use std::io::Write;
                stream.write_all(&wire::encode_message(&ack))?;
            }
            Message::Batch { run_id, batch } => {
                let mut store_guard = store.lock().unwrap();
                if !store_guard.run_exists(run_id)? {
                    // Batch before HELLO: register a stub so rows land.
                    store_guard.begin_run(run_id, 0.0, "")?;
                }
                store_guard.write_batch(run_id, &batch)?;
                let need_new_tracker = !matches!(&tracker, Some((r, _)) if *r == run_id);
                if need_new_tracker {
                    tracker = Some((run_id, ContigTracker::from_store(&store_guard, run_id)?));
                }
                drop(store_guard);
                let (_, t) = tracker.as_mut().expect("tracker set above");
                t.apply(batch.batch_id);
                let ack = Message::Ack {
                    highest_contiguous: t.highest(),
                };
                use std::io::Write;
                stream.write_all(&wire::encode_message(&ack))?;
            }
            Message::Ack { .. } | Message::Nak => {
                // Clients don't send these; ignore.
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::SampleRow;

    fn temp_dir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "motormon-repl-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn mk_batch(id: u64) -> ArchiveBatch {
        ArchiveBatch {
            batch_id: id,
            t_start: id as f64 * 0.01,
            t_end: (id + 1) as f64 * 0.01,
            rows: vec![SampleRow {
                channel_id: 1,
                t: id as f64 * 0.01,
                value: id as f64,
            }],
            events: vec![],
            spectra: vec![],
        }
    }

    #[test]
    fn replicates_outbox_to_remote() {
        let dir = temp_dir();
        let run = RunId::from_seed(21);
        let outbox = dir.join("a.outbox");
        let _ = std::fs::remove_file(&outbox);
        {
            let mut w = crate::archive::OutboxWriter::create(&outbox).unwrap();
            for id in 0..20 {
                w.append(run, &mk_batch(id)).unwrap();
            }
            w.flush().unwrap();
        }
        let remote_store = dir.join("remote_a.db");
        let _ = std::fs::remove_file(&remote_store);
        let server = RemoteServer::start("127.0.0.1:0", &remote_store).unwrap();

        let client = ReplicationClient::new(
            server.addr.to_string(),
            outbox,
            run,
            123.0,
            "cfg".into(),
        );
        let stop = AtomicBool::new(true); // drain immediately after outbox end
        let outcome = client.run(&stop, Duration::from_secs(10));
        assert!(outcome.drained);
        assert_eq!(outcome.highest_acked, Some(19));
        server.stop();

        let store = Store::open(&remote_store).unwrap();
        assert_eq!(store.batch_count(run).unwrap(), 20);
        assert_eq!(store.sample_row_count(run, None).unwrap(), 20);
        assert_eq!(store.run_config_text(run).unwrap().unwrap(), "cfg");
    }

    #[test]
    fn duplicate_delivery_changes_nothing() {
        let dir = temp_dir();
        let run = RunId::from_seed(22);
        let remote_store = dir.join("remote_dup.db");
        let _ = std::fs::remove_file(&remote_store);
        let server = RemoteServer::start("127.0.0.1:0", &remote_store).unwrap();

        let mut stream = TcpStream::connect(server.addr).unwrap();
        use std::io::Write;
        stream
            .write_all(&wire::encode_message(&Message::Hello {
                run_id: run,
                start_time: 0.0,
                config_text: String::new(),
            }))
            .unwrap();
        let _ = wire::read_message(&mut stream).unwrap();
        let batch_msg = wire::encode_message(&Message::Batch {
            run_id: run,
            batch: mk_batch(0),
        });
        for _ in 0..3 {
            stream.write_all(&batch_msg).unwrap();
            match wire::read_message(&mut stream).unwrap() {
                Some(Message::Ack { highest_contiguous }) => {
                    assert_eq!(highest_contiguous, Some(0));
                }
                other => panic!("expected ACK, got {other:?}"),
            }
        }
        drop(stream);
        server.stop();
        let store = Store::open(&remote_store).unwrap();
        assert_eq!(store.batch_count(run).unwrap(), 1);
        assert_eq!(store.sample_row_count(run, None).unwrap(), 1);
    }

    #[test]
    fn garbage_bytes_get_nak_or_close_and_server_survives() {
        let dir = temp_dir();
        let remote_store = dir.join("remote_garbage.db");
        let _ = std::fs::remove_file(&remote_store);
        let server = RemoteServer::start("127.0.0.1:0", &remote_store).unwrap();

        {
            let mut stream = TcpStream::connect(server.addr).unwrap();
            use std::io::Write;
            stream.write_all(b"definitely not a frame").unwrap();
            stream.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
            // Either a NAK arrives or the server hangs up; both are in
            // contract.
            let _ = wire::read_message(&mut stream);
        }
        // Server must still accept new clients.
        let run = RunId::from_seed(23);
        let mut stream = TcpStream::connect(server.addr).unwrap();
        use std::io::Write;
        stream
            .write_all(&wire::encode_message(&Message::Hello {
                run_id: run,
                start_time: 0.0,
                config_text: String::new(),
            }))
            .unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
        match wire::read_message(&mut stream).unwrap() {
            Some(Message::Ack { highest_contiguous }) => assert_eq!(highest_contiguous, None),
            other => panic!("expected ACK, got {other:?}"),
        }
        server.stop();
    }

    #[test]
    fn contig_tracker_handles_out_of_order() {
        let mut t = ContigTracker {
            next: 0,
            ahead: Default::default(),
        };
        t.apply(0);
        t.apply(2);
        t.apply(3);
        assert_eq!(t.highest(), Some(0));
        t.apply(1);
        assert_eq!(t.highest(), Some(3));
    }
}
