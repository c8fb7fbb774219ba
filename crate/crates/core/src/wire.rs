//! Framed binary replication protocol (big-endian).
//!
//! ```text
//! magic "MOTR" | version u8 = 1 | msg type u8 | payload len u32 | payload
//! | CRC32 (IEEE) of type + length + payload
//! ```
//!
//! Message types: 1 = BATCH, 2 = ACK, 3 = NAK, 4 = HELLO.
//!
//! BATCH payload: run id (16 bytes) | batch id u64 | window start f64 |
//! window end f64 | row count u32 | rows (channel u16, t f64, value f64) |
//! event section | spectrum section, each count-prefixed.
//!
//! ACK payload: highest contiguous batch id u64 (`u64::MAX` = none yet).
//! HELLO payload: run id | start time f64 | config text (u32 length + UTF-8).
//! NAK payload: empty.

use std::io::Read;

use crate::archive::{ArchiveBatch, RunId, SampleRow, SpectrumRow};
use crate::error::{Error, Result};
use crate::threshold::{AlarmEvent, AlarmKind};

pub const WIRE_MAGIC: [u8; 4] = *b"MOTR";
pub const WIRE_VERSION: u8 = 1;

const MSG_BATCH: u8 = 1;
const MSG_ACK: u8 = 2;
const MSG_NAK: u8 = 3;
const MSG_HELLO: u8 = 4;

/// Payload cap; a 10 ms batch is a few KB, so anything near this is bogus.
const MAX_PAYLOAD: u32 = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Batch {
        run_id: RunId,
        batch: ArchiveBatch,
    },
    Ack {
        /// Highest contiguous committed batch id; `None` before the first.
        highest_contiguous: Option<u64>,
    },
    Nak,
    Hello {
        run_id: RunId,
        start_time: f64,
        config_text: String,
    },
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let (msg_type, payload) = match msg {
        Message::Batch { run_id, batch } => (MSG_BATCH, encode_batch_payload(run_id, batch)),
        Message::Ack { highest_contiguous } => {
            let id = highest_contiguous.unwrap_or(u64::MAX);
            (MSG_ACK, id.to_be_bytes().to_vec())
        }
        Message::Nak => (MSG_NAK, Vec::new()),
        Message::Hello {
            run_id,
            start_time,
            config_text,
        } => {
            let mut p = Vec::with_capacity(28 + config_text.len());
            p.extend_from_slice(&run_id.0);
            p.extend_from_slice(&start_time.to_be_bytes());
            p.extend_from_slice(&(config_text.len() as u32).to_be_bytes());
            p.extend_from_slice(config_text.as_bytes());
            (MSG_HELLO, p)
        }
    };
    let mut out = Vec::with_capacity(14 + payload.len());
    out.extend_from_slice(&WIRE_MAGIC);
    out.push(WIRE_VERSION);
    out.push(msg_type);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&[msg_type]);
    hasher.update(&(payload.len() as u32).to_be_bytes());
    hasher.update(&payload);
    out.extend_from_slice(&hasher.finalize().to_be_bytes());
    out
}

fn encode_batch_payload(run_id: &RunId, batch: &ArchiveBatch) -> Vec<u8> {
    let mut p = Vec::with_capacity(44 + batch.rows.len() * 18);
    p.extend_from_slice(&run_id.0);
    p.extend_from_slice(&batch.batch_id.to_be_bytes());
    p.extend_from_slice(&batch.t_start.to_be_bytes());
    p.extend_from_slice(&batch.t_end.to_be_bytes());
    p.extend_from_slice(&(batch.rows.len() as u32).to_be_bytes());
    for row in &batch.rows {
        p.extend_from_slice(&row.channel_id.to_be_bytes());
        p.extend_from_slice(&row.t.to_be_bytes());
        p.extend_from_slice(&row.value.to_be_bytes());
    }
    p.extend_from_slice(&(batch.events.len() as u32).to_be_bytes());
    for e in &batch.events {
        p.extend_from_slice(&e.channel_id.to_be_bytes());
        p.push(e.kind.code());
        p.extend_from_slice(&e.value.to_be_bytes());
        p.extend_from_slice(&e.limit.to_be_bytes());
        p.extend_from_slice(&e.t.to_be_bytes());
        p.push(u8::from(e.cleared_t.is_some()));
        p.extend_from_slice(&e.cleared_t.unwrap_or(0.0).to_be_bytes());
    }
    p.extend_from_slice(&(batch.spectra.len() as u32).to_be_bytes());
    for s in &batch.spectra {
        p.extend_from_slice(&s.channel_id.to_be_bytes());
        p.extend_from_slice(&s.t.to_be_bytes());
        p.extend_from_slice(&s.order.to_be_bytes());
        p.extend_from_slice(&s.amplitude.to_be_bytes());
        p.push(u8::from(s.baseline));
    }
    p
}

/// Read one framed message from a stream. `Ok(None)` means the peer closed
/// cleanly at a message boundary.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut magic = [0u8; 4];
    match read_exact_or_eof(r, &mut magic)? {
        ReadOutcome::Eof => return Ok(None),
        ReadOutcome::Partial => {
            return Err(Error::Format {
                reason: "truncated message header".into(),
                offset: 0,
            })
        }
        ReadOutcome::Full => {}
    }
    if magic != WIRE_MAGIC {
        return Err(Error::Format {
            reason: format!("bad wire magic {magic:02x?}"),
            offset: 0,
        });
    }
    let mut vt = [0u8; 2];
    read_all(r, &mut vt, 4)?;
    if vt[0] != WIRE_VERSION {
        return Err(Error::Format {
            reason: format!("unsupported wire version {}", vt[0]),
            offset: 4,
        });
    }
    let msg_type = vt[1];
    let mut len_b = [0u8; 4];
    read_all(r, &mut len_b, 6)?;
    let len = u32::from_be_bytes(len_b);
    if len > MAX_PAYLOAD {
        return Err(Error::Format {
            reason: format!("payload length {len} exceeds cap"),
            offset: 6,
        });
    }
    let mut payload = vec![0u8; len as usize];
    read_all(r, &mut payload, 10)?;
    let mut crc_b = [0u8; 4];
    read_all(r, &mut crc_b, 10 + u64::from(len))?;
    let stored = u32::from_be_bytes(crc_b);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&[msg_type]);
    hasher.update(&len_b);
    hasher.update(&payload);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(Error::Format {
            reason: format!("wire CRC mismatch: stored {stored:#010x}, computed {computed:#010x}"),
            offset: 10 + u64::from(len),
        });
    }
    decode_payload(msg_type, &payload).map(Some)
}

/// Decode a message from a full in-memory frame (journal replay).
pub fn decode_message(bytes: &[u8]) -> Result<(Message, usize)> {
    let mut cursor = std::io::Cursor::new(bytes);
    match read_message(&mut cursor)? {
        Some(msg) => Ok((msg, cursor.position() as usize)),
        None => Err(Error::Format {
            reason: "empty buffer".into(),
            offset: 0,
        }),
    }
}

fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message> {
    let mut c = Cursor::new(payload);
    match msg_type {
        MSG_BATCH => {
            let run_id = RunId(c.take16()?);
            let batch_id = c.u64()?;
            let t_start = c.f64()?;
            let t_end = c.f64()?;
            let row_count = c.u32()? as usize;
            c.ensure_remaining(row_count, 18, "sample rows")?;
            let mut rows = Vec::with_capacity(row_count);
            for _ in 0..row_count {
                rows.push(SampleRow {
                    channel_id: c.u16()?,
                    t: c.f64()?,
                    value: c.f64()?,
                });
            }
            let event_count = c.u32()? as usize;
            c.ensure_remaining(event_count, 36, "events")?;
            let mut events = Vec::with_capacity(event_count);
            for _ in 0..event_count {
                let channel_id = c.u16()?;
                let kind = AlarmKind::from_code(c.u8()?).ok_or_else(|| Error::Format {
                    reason: "unknown alarm kind".into(),
                    offset: c.pos as u64,
                })?;
                let value = c.f64()?;
                let limit = c.f64()?;
                let t = c.f64()?;
                let has_clear = c.u8()? != 0;
                let cleared = c.f64()?;
                events.push(AlarmEvent {
                    channel_id,
                    kind,
                    value,
                    limit,
                    t,
                    cleared_t: has_clear.then_some(cleared),
                });
            }
            let spec_count = c.u32()? as usize;
            c.ensure_remaining(spec_count, 27, "spectrum rows")?;
            let mut spectra = Vec::with_capacity(spec_count);
            for _ in 0..spec_count {
                spectra.push(SpectrumRow {
                    channel_id: c.u16()?,
                    t: c.f64()?,
                    order: c.f64()?,
                    amplitude: c.f64()?,
                    baseline: c.u8()? != 0,
                });
            }
            Ok(Message::Batch {
                run_id,
                batch: ArchiveBatch {
                    batch_id,
                    t_start,
                    t_end,
                    rows,
                    events,
                    spectra,
                },
            })
        }
        MSG_ACK => {
            let id = c.u64()?;
            Ok(Message::Ack {
                highest_contiguous: (id != u64::MAX).then_some(id),
            })
        }
        MSG_NAK => Ok(Message::Nak),
        MSG_HELLO => {
            let run_id = RunId(c.take16()?);
            let start_time = c.f64()?;
            let len = c.u32()? as usize;
            let bytes = c.take(len)?;
            let config_text = String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
                reason: "HELLO config text is not UTF-8".into(),
                offset: c.pos as u64,
            })?;
            Ok(Message::Hello {
                run_id,
                start_time,
                config_text,
            })
        }
        other => Err(Error::Format {
            reason: format!("unknown message type {other}"),
            offset: 5,
        }),
    }
}

enum ReadOutcome {
    Full,
    Partial,
    Eof,
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<ReadOutcome> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(ReadOutcome::Eof),
            Ok(0) => return Ok(ReadOutcome::Partial),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ReadOutcome::Full)
}

fn read_all<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                reason: "truncated message".into(),
                offset,
            }
        } else {
            e.into()
        }
    })
}

/// Bounds-checked little parser over a payload slice.
struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format {
                reason: "payload shorter than declared".into(),
                offset: self.pos as u64,
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take16(&mut self) -> Result<[u8; 16]> {
        Ok(self.take(16)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn ensure_remaining(&self, count: usize, min_size: usize, what: &str) -> Result<()> {
        if count.saturating_mul(min_size) > self.data.len() - self.pos {
            return Err(Error::Format {
                reason: format!("{what} count {count} exceeds payload"),
                offset: self.pos as u64,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_batch() -> Message {
        Message::Batch {
            run_id: RunId([7u8; 16]),
            batch: ArchiveBatch {
                batch_id: 42,
                t_start: 0.42,
                t_end: 0.43,
                rows: vec![
                    SampleRow {
                        channel_id: 1,
                        t: 0.42,
                        value: -1.5,
                    },
                    SampleRow {
                        channel_id: 3,
                        t: 0.42,
                        value: 25.0,
                    },
                ],
                events: vec![AlarmEvent {
                    channel_id: 3,
                    kind: AlarmKind::HighLimit,
                    value: 90.0,
                    limit: 80.0,
                    t: 0.421,
                    cleared_t: None,
                }],
                spectra: vec![SpectrumRow {
                    channel_id: 1,
                    t: 0.43,
                    order: 5.0,
                    amplitude: 1.0,
                    baseline: false,
                }],
            },
        }
    }

    #[test]
    fn round_trip_all_message_types() {
        let messages = vec![
            sample_batch(),
            Message::Ack {
                highest_contiguous: Some(41),
            },
            Message::Ack {
                highest_contiguous: None,
            },
            Message::Nak,
            Message::Hello {
                run_id: RunId([1u8; 16]),
                start_time: 1_700_000_000.5,
                config_text: "duration = 1.0\n".into(),
            },
        ];
        for msg in messages {
            let bytes = encode_message(&msg);
            let (decoded, consumed) = decode_message(&bytes).unwrap();
            assert_eq!(decoded, msg);
            assert_eq!(consumed, bytes.len());
        }
    }

    #[test]
    fn crc_corruption_detected() {
        let mut bytes = encode_message(&sample_batch());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        match decode_message(&bytes) {
            Err(Error::Format { reason, .. }) => {
                assert!(
                    reason.contains("CRC") || reason.contains("payload"),
                    "reason: {reason}"
                )
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn garbage_magic_rejected() {
        let bytes = b"GARBAGEGARBAGEGARBAGE".to_vec();
        assert!(matches!(
            decode_message(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn clean_eof_is_none() {
        let mut empty: &[u8] = &[];
        assert!(read_message(&mut empty).unwrap().is_none());
    }

    #[test]
    fn bogus_row_count_rejected_without_allocation() {
        // Claim 4 billion rows in a tiny payload.
        let mut msg = encode_message(&sample_batch());
        // Payload starts at byte 10; row count sits after 16+8+8+8 = 40.
        let row_count_at = 10 + 40;
        msg[row_count_at..row_count_at + 4].copy_from_slice(&u32::MAX.to_be_bytes());
        assert!(decode_message(&msg).is_err());
    }

    #[test]
    fn two_messages_back_to_back() {
        let a = encode_message(&Message::Nak);
        let b = encode_message(&Message::Ack {
            highest_contiguous: Some(7),
        });
        let mut stream: Vec<u8> = Vec::new();
        stream.extend_from_slice(&a);
        stream.extend_from_slice(&b);
        let mut r = std::io::Cursor::new(stream);
        assert_eq!(read_message(&mut r).unwrap(), Some(Message::Nak));
        assert_eq!(
            read_message(&mut r).unwrap(),
            Some(Message::Ack {
                highest_contiguous: Some(7)
            })
        );
        assert_eq!(read_message(&mut r).unwrap(), None);
    }
}
