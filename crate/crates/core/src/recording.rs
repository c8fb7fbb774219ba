//! Binary recording format for raw channel data, used for full-fidelity
//! retention and offline replay.
//!
//! Layout (little-endian):
//!
//! ```text
//! header:  magic "MOTR" | version u16 = 1 | channel count u16
//!          per channel: id u16 | kind u8 | rate f64 | gain f64 | offset f64
//! frames:  channel id u16 | sequence u64 | t0 f64 | count u32 | count × f64
//!          | CRC32 (IEEE) of the frame body (channel id through values)
//! ```
//!
//! Tachometer pulses are stored as a channel of kind `Tachometer` whose
//! frame values are pulse times; for those channels the header `rate`
//! field carries pulses-per-revolution (so Δθ survives the round trip).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::{ChannelKind, ChannelSpec, SampleFrame, TachPulseTrain};

pub const MAGIC: [u8; 4] = *b"MOTR";
pub const FORMAT_VERSION: u16 = 1;

/// Streaming writer for the recording format.
pub struct RecordingWriter {
    out: BufWriter<File>,
}

impl RecordingWriter {
    pub fn create<P: AsRef<Path>>(path: P, channels: &[ChannelSpec]) -> Result<Self> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        out.write_all(&MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(channels.len() as u16).to_le_bytes())?;
        for ch in channels {
            out.write_all(&ch.id.to_le_bytes())?;
            out.write_all(&[ch.kind.code()])?;
            out.write_all(&ch.sample_rate.to_le_bytes())?;
            out.write_all(&ch.gain.to_le_bytes())?;
            out.write_all(&ch.offset.to_le_bytes())?;
        }
        Ok(RecordingWriter { out })
    }

    pub fn write_frame(&mut self, frame: &SampleFrame) -> Result<()> {
        let mut body = Vec::with_capacity(22 + frame.values.len() * 8);
        body.extend_from_slice(&frame.channel_id.to_le_bytes());
        body.extend_from_slice(&frame.sequence.to_le_bytes());
        body.extend_from_slice(&frame.t0.to_le_bytes());
        body.extend_from_slice(&(frame.values.len() as u32).to_le_bytes());
        for v in &frame.values {
            body.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&body);
        self.out.write_all(&body)?;
        self.out.write_all(&crc.to_le_bytes())?;
        Ok(())
    }

    /// Store a chunk of tach pulses as a frame on the tach channel.
    pub fn write_tach_chunk(
        &mut self,
        channel_id: u16,
        sequence: u64,
        pulse_times: &[f64],
    ) -> Result<()> {
        if pulse_times.is_empty() {
            return Ok(());
        }
        let frame = SampleFrame {
            channel_id,
            t0: pulse_times[0],
            sample_rate: 0.0, // not meaningful for pulse frames
            values: pulse_times.to_vec(),
            sequence,
        };
        self.write_frame(&frame)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Streaming reader; yields frames in recorded order with their original
/// timestamps and sequence numbers.
pub struct RecordingReader {
    input: BufReader<File>,
    channels: Vec<ChannelSpec>,
    offset: u64,
}

impl RecordingReader {
    pub fn open<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = File::open(&path)?;
        let mut input = BufReader::new(file);
        let mut offset = 0u64;

        let mut magic = [0u8; 4];
        read_exact_at(&mut input, &mut magic, &mut offset, "header magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                reason: format!("bad magic {magic:02x?}, expected \"MOTR\""),
                offset: 0,
            });
        }
        let version = read_u16(&mut input, &mut offset, "format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                reason: format!("unsupported format version {version}"),
                offset: 4,
            });
        }
        let count = read_u16(&mut input, &mut offset, "channel count")?;
        let mut channels = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = read_u16(&mut input, &mut offset, "channel id")?;
            let mut kind_b = [0u8; 1];
            read_exact_at(&mut input, &mut kind_b, &mut offset, "channel kind")?;
            let kind = ChannelKind::from_code(kind_b[0]).ok_or(Error::Format {
                reason: format!("unknown channel kind code {}", kind_b[0]),
                offset: offset - 1,
            })?;
            let sample_rate = read_f64(&mut input, &mut offset, "channel rate")?;
            let gain = read_f64(&mut input, &mut offset, "channel gain")?;
            let off = read_f64(&mut input, &mut offset, "channel offset")?;
            channels.push(ChannelSpec {
                id,
                kind,
                sample_rate,
                gain,
                offset: off,
            });
        }
        Ok(RecordingReader {
            input,
            channels,
            offset,
        })
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    /// Next frame, `None` at a clean end of file.
    pub fn next_frame(&mut self) -> Result<Option<SampleFrame>> {
        let frame_start = self.offset;
        let mut id_buf = [0u8; 2];
        match self.input.read(&mut id_buf)? {
            0 => return Ok(None), // clean EOF
            1 => {
                // One stray byte then EOF.
                return Err(Error::PartialRead {
                    reason: "truncated frame header".into(),
                    offset: frame_start,
                });
            }
            _ => {}
        }
        self.offset += 2;
        let channel_id = u16::from_le_bytes(id_buf);

        let mut body = Vec::with_capacity(64);
        body.extend_from_slice(&id_buf);
        let sequence = self.read_body_u64(&mut body, "frame sequence", frame_start)?;
        let t0 = self.read_body_f64(&mut body, "frame t0", frame_start)?;
        let count = self.read_body_u32(&mut body, "frame count", frame_start)?;
        let mut values = Vec::with_capacity(count as usize);
        for _ in 0..count {
            values.push(self.read_body_f64(&mut body, "frame values", frame_start)?);
        }
        let mut crc_buf = [0u8; 4];
        self.read_exact_partial(&mut crc_buf, "frame crc", frame_start)?;
        let stored_crc = u32::from_le_bytes(crc_buf);
        let actual_crc = crc32fast::hash(&body);
        if stored_crc != actual_crc {
            return Err(Error::Format {
                reason: format!(
                    "frame CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
                ),
                offset: frame_start,
            });
        }
        Ok(Some(SampleFrame {
            channel_id,
            t0,
            sample_rate: self
                .channels
                .iter()
                .find(|c| c.id == channel_id)
                .map(|c| c.sample_rate)
                .unwrap_or(0.0),
            values,
            sequence,
        }))
    }

    fn read_exact_partial(&mut self, buf: &mut [u8], what: &str, frame_start: u64) -> Result<()> {
        match self.input.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::PartialRead {
                reason: format!("truncated {what}"),
                offset: frame_start,
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn read_body_u64(&mut self, body: &mut Vec<u8>, what: &str, fs: u64) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_partial(&mut b, what, fs)?;
        body.extend_from_slice(&b);
        Ok(u64::from_le_bytes(b))
    }

    fn read_body_u32(&mut self, body: &mut Vec<u8>, what: &str, fs: u64) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_partial(&mut b, what, fs)?;
        body.extend_from_slice(&b);
        Ok(u32::from_le_bytes(b))
    }

    fn read_body_f64(&mut self, body: &mut Vec<u8>, what: &str, fs: u64) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact_partial(&mut b, what, fs)?;
        body.extend_from_slice(&b);
        Ok(f64::from_le_bytes(b))
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    match r.read_exact(buf) {
        Ok(()) => {
            *offset += buf.len() as u64;
            Ok(())
        }
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::Format {
            reason: format!("truncated {what}"),
            offset: *offset,
        }),
        Err(e) => Err(e.into()),
    }
}

fn read_u16<R: Read>(r: &mut R, offset: &mut u64, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_at(r, &mut b, offset, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R, offset: &mut u64, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact_at(r, &mut b, offset, what)?;
    Ok(f64::from_le_bytes(b))
}

/// A fully loaded recording: frames in recorded order plus the tachometer
/// pulse train reassembled from its channel.
#[derive(Debug, Clone)]
pub struct Replay {
    pub channels: Vec<ChannelSpec>,
    /// Non-tach frames in recorded order.
    pub frames: Vec<SampleFrame>,
    pub tach: Option<TachPulseTrain>,
}

/// Open and fully read a recording, splitting the tach channel back into a
/// pulse train.
pub fn replay_open<P: AsRef<Path>>(path: P) -> Result<Replay> {
    let mut reader = RecordingReader::open(path)?;
    let channels = reader.channels().to_vec();
    let tach_ids: Vec<u16> = channels
        .iter()
        .filter(|c| c.kind == ChannelKind::Tachometer)
        .map(|c| c.id)
        .collect();
    // For tach channels the rate field carries pulses-per-rev.
    let delta_theta = channels
        .iter()
        .find(|c| c.kind == ChannelKind::Tachometer)
        .map(|c| {
            let ppr = if c.sample_rate >= 1.0 { c.sample_rate } else { 1.0 };
            2.0 * std::f64::consts::PI / ppr
        });

    let mut frames = Vec::new();
    let mut pulses: Vec<f64> = Vec::new();
    while let Some(frame) = reader.next_frame()? {
        if tach_ids.contains(&frame.channel_id) {
            pulses.extend_from_slice(&frame.values);
        } else {
            frames.push(frame);
        }
    }
    let tach = match (pulses.is_empty(), delta_theta) {
        (false, Some(dt)) => Some(TachPulseTrain::new(pulses, dt)),
        _ => None,
    };
    Ok(Replay {
        channels,
        frames,
        tach,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth_tach, synth_vibration, MotorProfile, SpeedSegment};

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("motormon-rec-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_channels() -> Vec<ChannelSpec> {
        vec![
            ChannelSpec {
                id: 1,
                kind: ChannelKind::VibrationX,
                sample_rate: 5000.0,
                gain: 1.0,
                offset: 0.0,
            },
            ChannelSpec {
                id: 9,
                kind: ChannelKind::Tachometer,
                sample_rate: 1.0, // pulses per rev
                gain: 1.0,
                offset: 0.0,
            },
        ]
    }

    fn write_sample_recording(path: &std::path::Path) -> (Vec<SampleFrame>, TachPulseTrain) {
        let profile = MotorProfile {
            speed_segments: vec![SpeedSegment {
                duration: 2.0,
                rpm_start: 600.0,
                rpm_end: 900.0,
            }],
            ..MotorProfile::default()
        };
        let channels = sample_channels();
        let mut writer = RecordingWriter::create(path, &channels).unwrap();
        let mut frames = Vec::new();
        for seq in 0..4u64 {
            let frame = synth_vibration(
                &profile,
                &channels[0],
                seq as f64 * 0.1,
                500,
                seq,
                11,
            )
            .unwrap();
            writer.write_frame(&frame).unwrap();
            frames.push(frame);
        }
        let tach = synth_tach(&profile, 0.4).unwrap();
        writer.write_tach_chunk(9, 0, &tach.times).unwrap();
        writer.finish().unwrap();
        (frames, tach)
    }

    #[test]
    fn record_replay_round_trip_is_identical() {
        let path = temp_path("roundtrip.motr");
        let (frames, tach) = write_sample_recording(&path);
        let replay = replay_open(&path).unwrap();
        assert_eq!(replay.frames, frames);
        let got_tach = replay.tach.unwrap();
        assert_eq!(got_tach.times, tach.times);
        assert!((got_tach.delta_theta - tach.delta_theta).abs() < 1e-15);
    }

    #[test]
    fn empty_file_is_format_error() {
        let path = temp_path("empty.motr");
        std::fs::write(&path, b"").unwrap();
        match RecordingReader::open(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            Err(other) => panic!("expected format error, got {other:?}"),
            Ok(_) => panic!("empty file must not open"),
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let path = temp_path("badmagic.motr");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            RecordingReader::open(&path),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn corrupted_crc_yields_prior_frames_then_error() {
        let path = temp_path("corrupt.motr");
        let (frames, _) = write_sample_recording(&path);

        // Flip one byte inside the third frame's values.
        let mut bytes = std::fs::read(&path).unwrap();
        let header_len = 4 + 2 + 2 + 2 * (2 + 1 + 8 + 8 + 8);
        let frame_len = 2 + 8 + 8 + 4 + 500 * 8 + 4;
        let target = header_len + 2 * frame_len + 40; // inside frame 2's body
        bytes[target] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();

        let mut reader = RecordingReader::open(&path).unwrap();
        let f0 = reader.next_frame().unwrap().unwrap();
        let f1 = reader.next_frame().unwrap().unwrap();
        assert_eq!(f0, frames[0]);
        assert_eq!(f1, frames[1]);
        match reader.next_frame() {
            Err(Error::Format { reason, offset }) => {
                assert!(reason.contains("CRC"), "reason: {reason}");
                assert_eq!(offset, (header_len + 2 * frame_len) as u64);
            }
            other => panic!("expected CRC error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_partial_read_after_complete_frames() {
        let path = temp_path("trunc.motr");
        let (frames, _) = write_sample_recording(&path);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 37); // chop into the last (tach) frame
        std::fs::write(&path, &bytes).unwrap();

        let mut reader = RecordingReader::open(&path).unwrap();
        for want in &frames {
            let got = reader.next_frame().unwrap().unwrap();
            assert_eq!(&got, want);
        }
        assert!(matches!(
            reader.next_frame(),
            Err(Error::PartialRead { .. })
        ));
    }
}
