//! CAN-style transport between the real-time controller and the learner.
//!
//! Frames carry at most eight payload bytes. On top of them:
//!
//! * experiences travel upstream as a 76-byte record (u24 sequence number,
//!   u8 flags, then `o ‖ a ‖ r ‖ o'` as 18 little-endian f32) split over ten
//!   frames on id [`ID_EXPERIENCE`];
//! * actor weights travel downstream as 32-bit floats in six-byte chunks on
//!   id [`ID_WEIGHT_CHUNK`], followed by one commit frame on
//!   [`ID_WEIGHT_COMMIT`] with the full version, the parameter count and a
//!   CRC-32 of the parameter byte stream;
//! * telemetry frames on [`ID_TELEMETRY`] carry `(step, reward)`.
//!
//! A chunk frame starts with a little-endian u16 holding the version tag
//! (version mod 4) in its top two bits and the chunk index in the lower
//! fourteen, so one sync carries at most 16384 chunks (24576 parameters).
//!
//! [`BusModel`] replays the bus timing deterministically: each frame costs
//! `47 + 8·dlc` bits at the configured bit rate, the lowest identifier wins
//! arbitration, and frames never overlap.

use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::cmp::Reverse;
use std::io::{self, Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agent::Experience;
use crate::neural::{LayerSpec, MlpParams};
use crate::task::OBS_DIM;

pub const ID_EXPERIENCE: u16 = 0x100;
pub const ID_WEIGHT_CHUNK: u16 = 0x200;
pub const ID_WEIGHT_COMMIT: u16 = 0x201;
pub const ID_TELEMETRY: u16 = 0x300;

pub const BIT_RATE: f64 = 1e6;
/// Fixed per-frame overhead in bits (no bit stuffing).
pub const FRAME_OVERHEAD_BITS: u32 = 47;

pub const EXPERIENCE_VALUES: usize = 2 * OBS_DIM + 2;
pub const EXPERIENCE_BYTES: usize = 4 + 4 * EXPERIENCE_VALUES;
pub const EXPERIENCE_FRAMES: usize = EXPERIENCE_BYTES.div_ceil(8);
pub const CHUNK_DATA_BYTES: usize = 6;
pub const MAX_CHUNKS: usize = 1 << 14;
const SEQ_MASK: u32 = 0x00FF_FFFF;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkError {
    #[error("identifier {0:#x} does not fit in 11 bits")]
    BadId(u16),
    #[error("payload of {0} bytes exceeds 8")]
    PayloadTooLong(usize),
    #[error("actor of {0} parameters is too large for one weight sync")]
    TooLarge(usize),
    #[error("malformed {kind} frame: {reason}")]
    Malformed { kind: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CanFrame {
    pub id: u16,
    pub dlc: u8,
    pub data: [u8; 8],
}

impl CanFrame {
    pub fn new(id: u16, payload: &[u8]) -> Result<Self, LinkError> {
        if id >= 0x800 {
            return Err(LinkError::BadId(id));
        }
        if payload.len() > 8 {
            return Err(LinkError::PayloadTooLong(payload.len()));
        }
        let mut data = [0u8; 8];
        data[..payload.len()].copy_from_slice(payload);
        Ok(Self {
            id,
            dlc: payload.len() as u8,
            data,
        })
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..self.dlc as usize]
    }

    /// Bits the frame occupies on the bus.
    pub fn cost_bits(&self) -> u32 {
        frame_cost(self.dlc)
    }
}

pub fn frame_cost(dlc: u8) -> u32 {
    FRAME_OVERHEAD_BITS + 8 * dlc as u32
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Experience { seq: u32, flags: u8, payload: [f32; EXPERIENCE_VALUES] },
    WeightChunk { tag: u8, index: u16, data: Vec<u8> },
    WeightCommit { version: u16, param_count: u16, checksum: u32 },
    Telemetry { step: u32, reward: f32 },
}

impl Message {
    pub fn experience(e: &Experience, seq: u32, flags: u8) -> Self {
        let mut payload = [0f32; EXPERIENCE_VALUES];
        for (p, v) in payload.iter_mut().zip(e.to_array()) {
            *p = v as f32;
        }
        Message::Experience {
            seq: seq & SEQ_MASK,
            flags,
            payload,
        }
    }

    pub fn to_frames(&self) -> Result<Vec<CanFrame>, LinkError> {
        match self {
            Message::Experience { seq, flags, payload } => {
                let mut bytes = Vec::with_capacity(EXPERIENCE_BYTES);
                bytes.extend_from_slice(&(seq & SEQ_MASK).to_le_bytes()[..3]);
                bytes.push(*flags);
                for v in payload {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                bytes.chunks(8).map(|c| CanFrame::new(ID_EXPERIENCE, c)).collect()
            }
            Message::WeightChunk { tag, index, data } => {
                if *tag > 3 || *index as usize >= MAX_CHUNKS || data.len() > CHUNK_DATA_BYTES {
                    return Err(LinkError::Malformed {
                        kind: "weight chunk",
                        reason: format!("tag {tag}, index {index}, {} bytes", data.len()),
                    });
                }
                let head = ((*tag as u16) << 14) | index;
                let mut bytes = head.to_le_bytes().to_vec();
                bytes.extend_from_slice(data);
                Ok(vec![CanFrame::new(ID_WEIGHT_CHUNK, &bytes)?])
            }
            Message::WeightCommit {
                version,
                param_count,
                checksum,
            } => {
                let mut bytes = version.to_le_bytes().to_vec();
                bytes.extend_from_slice(&param_count.to_le_bytes());
                bytes.extend_from_slice(&checksum.to_le_bytes());
                Ok(vec![CanFrame::new(ID_WEIGHT_COMMIT, &bytes)?])
            }
            Message::Telemetry { step, reward } => {
                let mut bytes = step.to_le_bytes().to_vec();
                bytes.extend_from_slice(&reward.to_le_bytes());
                Ok(vec![CanFrame::new(ID_TELEMETRY, &bytes)?])
            }
        }
    }

    /// Decodes a single-frame message (everything except experiences).
    pub fn from_frame(frame: &CanFrame) -> Result<Self, LinkError> {
        let p = frame.payload();
        let malformed = |kind: &'static str| LinkError::Malformed {
            kind,
            reason: format!("dlc {}", frame.dlc),
        };
        match frame.id {
            ID_WEIGHT_CHUNK => {
                if p.len() < 2 {
                    return Err(malformed("weight chunk"));
                }
                let head = u16::from_le_bytes([p[0], p[1]]);
                Ok(Message::WeightChunk {
                    tag: (head >> 14) as u8,
                    index: head & 0x3FFF,
                    data: p[2..].to_vec(),
                })
            }
            ID_WEIGHT_COMMIT => {
                if p.len() != 8 {
                    return Err(malformed("weight commit"));
                }
                Ok(Message::WeightCommit {
                    version: u16::from_le_bytes([p[0], p[1]]),
                    param_count: u16::from_le_bytes([p[2], p[3]]),
                    checksum: u32::from_le_bytes([p[4], p[5], p[6], p[7]]),
                })
            }
            ID_TELEMETRY => {
                if p.len() != 8 {
                    return Err(malformed("telemetry"));
                }
                Ok(Message::Telemetry {
                    step: u32::from_le_bytes([p[0], p[1], p[2], p[3]]),
                    reward: f32::from_le_bytes([p[4], p[5], p[6], p[7]]),
                })
            }
            ID_EXPERIENCE => Err(LinkError::Malformed {
                kind: "experience",
                reason: "experiences span several frames; use ExperienceDecoder".into(),
            }),
            other => Err(LinkError::BadId(other)),
        }
    }
}

/// Splits one experience into its ten frames.
pub fn encode_experience(e: &Experience, seq: u32) -> Vec<CanFrame> {
    Message::experience(e, seq, 0)
        .to_frames()
        .expect("experience layout always fits")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedExperience {
    pub seq: u32,
    pub flags: u8,
    pub experience: Experience,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("incomplete experience record ({received} of {EXPERIENCE_BYTES} bytes)")]
pub struct Incomplete {
    pub received: usize,
}

/// Reassembles experience records from a stream of experience frames. A
/// record ends with its short final frame; anything but exactly nine full
/// frames before it is reported as incomplete and dropped.
#[derive(Debug, Clone, Default)]
pub struct ExperienceDecoder {
    buf: Vec<u8>,
    overflow: bool,
}

impl ExperienceDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one frame; returns a result whenever a record boundary is seen.
    pub fn push(&mut self, frame: &CanFrame) -> Option<Result<DecodedExperience, Incomplete>> {
        let p = frame.payload();
        let last_len = EXPERIENCE_BYTES - 8 * (EXPERIENCE_FRAMES - 1);
        if p.len() == 8 {
            if self.buf.len() + 8 > EXPERIENCE_BYTES - last_len {
                self.overflow = true;
            } else {
                self.buf.extend_from_slice(p);
            }
            return None;
        }
        let complete = !self.overflow && p.len() == last_len && self.buf.len() == EXPERIENCE_BYTES - last_len;
        let received = self.buf.len() + p.len();
        if !complete {
            self.buf.clear();
            self.overflow = false;
            return Some(Err(Incomplete { received }));
        }
        self.buf.extend_from_slice(p);
        let b = std::mem::take(&mut self.buf);
        let seq = u32::from_le_bytes([b[0], b[1], b[2], 0]);
        let flags = b[3];
        let mut values = [0f64; EXPERIENCE_VALUES];
        for (v, c) in values.iter_mut().zip(b[4..].chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
        Some(Ok(DecodedExperience {
            seq,
            flags,
            experience: Experience::from_array(&values),
        }))
    }
}

/// Decodes exactly one record from its frames.
pub fn decode_experience(frames: &[CanFrame]) -> Result<DecodedExperience, Incomplete> {
    let mut dec = ExperienceDecoder::new();
    let mut received = 0;
    for (i, f) in frames.iter().enumerate() {
        received += f.payload().len();
        if let Some(out) = dec.push(f) {
            return if i + 1 == frames.len() { out } else { Err(Incomplete { received }) };
        }
    }
    Err(Incomplete { received })
}

/// Parameter byte stream as sent on the wire (little-endian f32).
pub fn weight_stream(params: &MlpParams) -> Vec<u8> {
    params
        .values()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn checksum(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Splits the actor into chunk messages followed by one commit.
pub fn chunk_weights(params: &MlpParams, version: u16) -> Result<Vec<Message>, LinkError> {
    let n = params.param_count();
    let stream = weight_stream(params);
    let n_chunks = stream.len().div_ceil(CHUNK_DATA_BYTES);
    if n > u16::MAX as usize || n_chunks > MAX_CHUNKS {
        return Err(LinkError::TooLarge(n));
    }
    let tag = (version & 3) as u8;
    let mut out: Vec<Message> = stream
        .chunks(CHUNK_DATA_BYTES)
        .enumerate()
        .map(|(i, c)| Message::WeightChunk {
            tag,
            index: i as u16,
            data: c.to_vec(),
        })
        .collect();
    out.push(Message::WeightCommit {
        version,
        param_count: n as u16,
        checksum: checksum(&stream),
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reassembly {
    /// A complete, checksum-valid, newer actor.
    Applied { version: u16, params: MlpParams },
    Pending,
    Discarded { version: u16, reason: String },
}

#[derive(Debug, Clone, Default)]
struct PartialSync {
    chunks: Vec<Option<Vec<u8>>>,
    commit: Option<(u16, u16, u32)>,
}

/// Controller-side weight reassembly with version gating. Only complete
/// versions newer than the last applied one are ever returned.
#[derive(Debug, Clone)]
pub struct WeightReassembler {
    shapes: Vec<LayerSpec>,
    slots: [PartialSync; 4],
    applied: Option<u16>,
}

impl WeightReassembler {
    pub fn new(shapes: Vec<LayerSpec>, current_version: Option<u16>) -> Self {
        Self {
            shapes,
            slots: Default::default(),
            applied: current_version,
        }
    }

    pub fn applied_version(&self) -> Option<u16> {
        self.applied
    }

    pub fn push(&mut self, msg: &Message) -> Reassembly {
        match msg {
            Message::WeightChunk { tag, index, data } => {
                let slot = &mut self.slots[*tag as usize & 3];
                let i = *index as usize;
                if slot.chunks.len() <= i {
                    slot.chunks.resize(i + 1, None);
                }
                slot.chunks[i] = Some(data.clone());
                if slot.commit.is_some() {
                    return self.try_complete(*tag as usize & 3);
                }
                Reassembly::Pending
            }
            Message::WeightCommit {
                version,
                param_count,
                checksum,
            } => {
                if self.applied.is_some_and(|a| *version <= a) {
                    return Reassembly::Discarded {
                        version: *version,
                        reason: "not newer than the applied version".into(),
                    };
                }
                let tag = (*version & 3) as usize;
                // older versions can never complete once a newer commit is seen
                for older in [1u16, 2] {
                    self.slots[(version.wrapping_sub(older) & 3) as usize] = PartialSync::default();
                }
                self.slots[tag].commit = Some((*version, *param_count, *checksum));
                self.try_complete(tag)
            }
            _ => Reassembly::Pending,
        }
    }

    fn try_complete(&mut self, tag: usize) -> Reassembly {
        let Some((version, count, crc)) = self.slots[tag].commit else {
            return Reassembly::Pending;
        };
        let n_bytes = 4 * count as usize;
        let n_chunks = n_bytes.div_ceil(CHUNK_DATA_BYTES);
        let slot = &self.slots[tag];
        if slot.chunks.len() < n_chunks || slot.chunks[..n_chunks].iter().any(Option::is_none) {
            return Reassembly::Pending;
        }
        let mut stream = Vec::with_capacity(n_bytes);
        for c in slot.chunks[..n_chunks].iter().flatten() {
            stream.extend_from_slice(c);
        }
        self.slots[tag] = PartialSync::default();
        if stream.len() != n_bytes || checksum(&stream) != crc {
            log::warn!("weight version {version} failed its checksum and was dropped");
            return Reassembly::Discarded {
                version,
                reason: "checksum mismatch".into(),
            };
        }
        let values = stream
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        match MlpParams::from_values(self.shapes.clone(), values) {
            Ok(params) => {
                self.applied = Some(version);
                Reassembly::Applied { version, params }
            }
            Err(e) => Reassembly::Discarded {
                version,
                reason: format!("layout mismatch: {e}"),
            },
        }
    }
}

/// A frame that finished transmission at `time` (s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub time: f64,
    pub frame: CanFrame,
}

/// Deterministic single-bus timing model.
#[derive(Debug, Clone)]
pub struct BusModel {
    bit_rate: f64,
    now: f64,
    seq: u64,
    waiting: VecDeque<(f64, u64, CanFrame)>,
    ready: BinaryHeap<Reverse<(u16, u64)>>,
    ready_frames: HashMap<u64, CanFrame>,
    in_flight: Option<(f64, CanFrame)>,
    busy_bits: u64,
    drop_probability: f64,
    rng: Option<ChaCha8Rng>,
    dropped: u64,
    queued_by_id: BTreeMap<u16, usize>,
}

impl BusModel {
    pub fn new(bit_rate: f64) -> Self {
        Self {
            bit_rate,
            now: 0.0,
            seq: 0,
            waiting: VecDeque::new(),
            ready: BinaryHeap::new(),
            ready_frames: Default::default(),
            in_flight: None,
            busy_bits: 0,
            drop_probability: 0.0,
            rng: None,
            dropped: 0,
            queued_by_id: BTreeMap::new(),
        }
    }

    /// Frames still occupy the bus but are lost at the receiver with
    /// probability `p`.
    pub fn with_losses(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        self.drop_probability = p;
        self.rng = Some(rng);
        self
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn transit_time(&self, dlc: u8) -> f64 {
        frame_cost(dlc) as f64 / self.bit_rate
    }

    /// Total bits put on the bus so far.
    pub fn busy_bits(&self) -> u64 {
        self.busy_bits
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn pending(&self) -> usize {
        self.waiting.len() + self.ready.len() + usize::from(self.in_flight.is_some())
    }

    /// Number of queued or in-flight frames with identifier `id`.
    pub fn pending_with_id(&self, id: u16) -> usize {
        self.queued_by_id.get(&id).copied().unwrap_or(0)
    }

    /// Queues `frame`, ready for arbitration from `at` (clamped to be
    /// non-decreasing).
    pub fn enqueue(&mut self, frame: CanFrame, at: f64) {
        let at = self.waiting.back().map_or(at, |&(t, _, _)| at.max(t));
        self.seq += 1;
        *self.queued_by_id.entry(frame.id).or_default() += 1;
        self.waiting.push_back((at, self.seq, frame));
    }

    fn admit(&mut self, t: f64) {
        while let Some(&(ready_at, seq, frame)) = self.waiting.front() {
            if ready_at > t {
                break;
            }
            self.waiting.pop_front();
            self.ready.push(Reverse((frame.id, seq)));
            self.ready_frames.insert(seq, frame);
        }
    }

    /// Advances the bus to `until`, returning frames whose transmission
    /// completed by then in completion order.
    pub fn step(&mut self, until: f64) -> Vec<Delivery> {
        let mut out = Vec::new();
        loop {
            if let Some((end, frame)) = self.in_flight {
                if end > until {
                    break;
                }
                self.in_flight = None;
                self.now = end;
                if let Some(n) = self.queued_by_id.get_mut(&frame.id) {
                    *n -= 1;
                }
                let lost = match self.rng.as_mut() {
                    Some(rng) if self.drop_probability > 0.0 => rng.gen::<f64>() < self.drop_probability,
                    _ => false,
                };
                if lost {
                    self.dropped += 1;
                } else {
                    out.push(Delivery { time: end, frame });
                }
            }
            self.admit(self.now);
            if self.ready.is_empty() {
                match self.waiting.front() {
                    Some(&(t, _, _)) if t < until => {
                        self.now = self.now.max(t);
                        continue;
                    }
                    _ => break,
                }
            }
            if self.now >= until {
                break;
            }
            let Reverse((_, seq)) = self.ready.pop().expect("non-empty");
            let frame = self.ready_frames.remove(&seq).expect("tracked");
            let bits = frame.cost_bits();
            self.busy_bits += bits as u64;
            self.in_flight = Some((self.now + bits as f64 / self.bit_rate, frame));
        }
        if self.in_flight.is_none() {
            self.now = self.now.max(until);
        }
        out
    }
}

const CAPTURE_RECORD: usize = 8 + 2 + 1 + 8;

/// Writes delivered frames as fixed 19-byte records: u64 time in ns,
/// u16 id, u8 dlc, eight data bytes, all little-endian.
pub struct CaptureWriter<W: Write> {
    inner: W,
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn record(&mut self, d: &Delivery) -> io::Result<()> {
        let mut rec = [0u8; CAPTURE_RECORD];
        let ns = (d.time * 1e9).round() as u64;
        rec[..8].copy_from_slice(&ns.to_le_bytes());
        rec[8..10].copy_from_slice(&d.frame.id.to_le_bytes());
        rec[10] = d.frame.dlc;
        rec[11..].copy_from_slice(&d.frame.data);
        self.inner.write_all(&rec)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub fn read_capture<R: Read>(mut r: R) -> io::Result<Vec<(u64, CanFrame)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() % CAPTURE_RECORD != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "truncated capture record"));
    }
    Ok(buf
        .chunks_exact(CAPTURE_RECORD)
        .map(|rec| {
            let ns = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
            let mut data = [0u8; 8];
            data.copy_from_slice(&rec[11..]);
            (
                ns,
                CanFrame {
                    id: u16::from_le_bytes([rec[8], rec[9]]),
                    dlc: rec[10],
                    data,
                },
            )
        })
        .collect())
}
