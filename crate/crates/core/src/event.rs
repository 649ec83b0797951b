//! Raw event data model, the EVT1 binary codec and dataset manifests.
//!
//! EVT1 layout (little-endian, no padding):
//!
//! ```text
//! "EVT1" | width u32 | height u32 | count u64 | count × (x u16 | y u16 | t u32 | p u8)
//! ```
//!
//! Polarity bytes map `0 -> -1` and `1 -> +1`. Timestamps are microseconds
//! relative to the start of the stream.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
pub const EVT1_HEADER_LEN: usize = 20;
pub const EVT1_RECORD_LEN: usize = 9;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("bad magic: expected \"EVT1\"")]
    BadMagic,
    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("line {line}: label present on some lines but not others")]
    MixedLabelPresence { line: usize },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sign of the brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn from_sign(sign: i8) -> Option<Self> {
        match sign {
            -1 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Negative => Polarity::Positive,
            Polarity::Positive => Polarity::Negative,
        }
    }

    fn to_byte(self) -> u8 {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }
}

/// A single event: pixel column `x`, pixel row `y`, timestamp `t` in µs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u32,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u32, polarity: Polarity) -> Self {
        Self { x, y, t, polarity }
    }
}

/// An ordered, validated sequence of events over a `width × height` sensor.
///
/// Every event lies inside the sensor and timestamps never decrease.
/// Construction goes through [`EventStream::new`], so holding an
/// `EventStream` means the invariants hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u32,
    height: u32,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u32, height: u32, events: Vec<Event>) -> Result<Self, EventError> {
        validate(width, height, &events)?;
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Time between the first and last event, 0 for streams with fewer than two events.
    pub fn duration(&self) -> u32 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }
}

fn validate(width: u32, height: u32, events: &[Event]) -> Result<(), EventError> {
    let mut prev_t = 0u32;
    for (i, e) in events.iter().enumerate() {
        if u32::from(e.x) >= width || u32::from(e.y) >= height {
            return Err(EventError::InvariantViolation(format!(
                "event {i} at ({}, {}) outside {width}x{height} sensor",
                e.x, e.y
            )));
        }
        if i > 0 && e.t < prev_t {
            return Err(EventError::InvariantViolation(format!(
                "event {i} timestamp {} precedes {prev_t}",
                e.t
            )));
        }
        prev_t = e.t;
    }
    Ok(())
}

pub fn encode_evt1(stream: &EventStream) -> Result<Vec<u8>, EventError> {
    // Streams built outside `new` are impossible, but re-check so a bad
    // stream can never reach disk.
    validate(stream.width, stream.height, &stream.events)?;
    let mut out = Vec::with_capacity(EVT1_HEADER_LEN + EVT1_RECORD_LEN * stream.events.len());
    out.extend_from_slice(EVT1_MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.events.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.polarity.to_byte());
    }
    Ok(out)
}

pub fn decode_evt1(bytes: &[u8]) -> Result<EventStream, EventError> {
    if bytes.len() < 4 || &bytes[..4] != EVT1_MAGIC {
        return Err(EventError::BadMagic);
    }
    if bytes.len() < EVT1_HEADER_LEN {
        return Err(EventError::Truncated {
            expected: EVT1_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = count
        .checked_mul(EVT1_RECORD_LEN as u64)
        .and_then(|n| n.checked_add(EVT1_HEADER_LEN as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(EventError::Truncated {
            expected: expected.unwrap_or(u64::MAX),
            actual: bytes.len() as u64,
        });
    }
    let mut events = Vec::with_capacity(count as usize);
    for (i, rec) in bytes[EVT1_HEADER_LEN..]
        .chunks_exact(EVT1_RECORD_LEN)
        .enumerate()
    {
        let polarity = Polarity::from_byte(rec[8]).ok_or_else(|| {
            EventError::InvariantViolation(format!("event {i} has polarity byte {}", rec[8]))
        })?;
        events.push(Event {
            x: u16::from_le_bytes([rec[0], rec[1]]),
            y: u16::from_le_bytes([rec[2], rec[3]]),
            t: u32::from_le_bytes([rec[4], rec[5], rec[6], rec[7]]),
            polarity,
        });
    }
    EventStream::new(width, height, events)
}

pub fn read_evt1(path: impl AsRef<Path>) -> Result<EventStream, EventError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => EventError::MissingFile(path.to_path_buf()),
        _ => EventError::Io(e),
    })?;
    decode_evt1(&bytes)
}

pub fn write_evt1(path: impl AsRef<Path>, stream: &EventStream) -> Result<(), EventError> {
    fs::write(path, encode_evt1(stream)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub events: PathBuf,
    pub teacher: PathBuf,
    pub label: Option<u32>,
}

/// Ordered dataset entries. Paths are resolved against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.entries.is_empty() && self.entries[0].label.is_some()
    }

    pub fn labels(&self) -> Option<Vec<u32>> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// Parses manifest text. `base` is joined onto relative paths; no file checks.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest, EventError> {
    let mut entries = Vec::new();
    let mut labeled: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 && cols.len() != 3 {
            return Err(EventError::MalformedLine {
                line: line_no,
                reason: format!("expected 2 or 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let has_label = cols.len() == 3;
        match labeled {
            None => labeled = Some(has_label),
            Some(prev) if prev != has_label => {
                return Err(EventError::MixedLabelPresence { line: line_no })
            }
            _ => {}
        }
        let label = if has_label {
            Some(cols[2].trim().parse::<u32>().map_err(|_| EventError::MalformedLine {
                line: line_no,
                reason: format!("label {:?} is not a non-negative integer", cols[2]),
            })?)
        } else {
            None
        };
        entries.push(ManifestEntry {
            events: base.join(cols[0]),
            teacher: base.join(cols[1]),
            label,
        });
    }
    Ok(DatasetManifest { entries })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, EventError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(EventError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let manifest = parse_manifest(&text, base)?;
    for e in &manifest.entries {
        for p in [&e.events, &e.teacher] {
            if !p.is_file() {
                return Err(EventError::MissingFile(p.clone()));
            }
        }
    }
    Ok(manifest)
}

/// Renders entries with paths relative to `base` when possible.
pub fn format_manifest(manifest: &DatasetManifest, base: &Path) -> String {
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::new();
    for e in &manifest.entries {
        out.push_str(&rel(&e.events));
        out.push('\t');
        out.push_str(&rel(&e.teacher));
        if let Some(l) = e.label {
            out.push('\t');
            out.push_str(&l.to_string());
        }
        out.push('\n');
    }
    out
}
