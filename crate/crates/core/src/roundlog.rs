//! Packed on-disk rounding logs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VTRL"
//! 4       1     version (1)
//! 5       1     rounding amount b_r
//! 6       1     flags (bit 0: payload is raw DEFLATE)
//! 7       8     entry count
//! 15      ..    payload: ceil(count / 5) packed bytes
//! ```
//!
//! Each payload byte holds five directions as base-3 digits, first-written
//! entry in the least significant digit. A trailing partial group is padded
//! with `Ignore`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Cursor, Read, Seek, SeekFrom, Write};
use std::path::Path;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::fpround::RoundingDirection;

pub const MAGIC: [u8; 4] = *b"VTRL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: u64 = 15;
pub const FLAG_DEFLATE: u8 = 0b0000_0001;
/// Directions packed into one payload byte.
pub const ENTRIES_PER_BYTE: u64 = 5;
/// Largest valid payload byte, `3^5 - 1`.
pub const MAX_PACKED: u8 = 242;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("I/O error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },
    #[error("not a rounding log")]
    NotARoundingLog,
    #[error("unsupported rounding log version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown rounding log flags {0:#04x}")]
    UnknownFlags(u8),
    #[error("corrupt log byte {value} at payload offset {offset}")]
    CorruptByte { offset: u64, value: u8 },
    #[error("direction digit {0} is not in 0..=2")]
    InvalidDigit(u8),
    #[error("log exhausted after {0} entries")]
    Exhausted(u64),
    #[error("log payload truncated after {0} bytes")]
    Truncated(u64),
    #[error("unexpected data after the last log entry")]
    TrailingData,
}

fn io_at(offset: u64) -> impl FnOnce(io::Error) -> LogError {
    move |source| LogError::Io { offset, source }
}

/// Encodes five direction codes as one byte.
pub fn pack_codes(codes: [u8; 5]) -> Result<u8, LogError> {
    let mut value = 0u8;
    for &code in codes.iter().rev() {
        if code > 2 {
            return Err(LogError::InvalidDigit(code));
        }
        value = value * 3 + code;
    }
    Ok(value)
}

pub fn pack5(dirs: [RoundingDirection; 5]) -> u8 {
    dirs.iter().rev().fold(0u8, |acc, d| acc * 3 + d.code())
}

pub fn unpack5(byte: u8) -> Result<[RoundingDirection; 5], LogError> {
    if byte > MAX_PACKED {
        return Err(LogError::CorruptByte {
            offset: 0,
            value: byte,
        });
    }
    let mut rest = byte;
    let mut out = [RoundingDirection::Ignore; 5];
    for slot in out.iter_mut() {
        *slot = RoundingDirection::try_from(rest % 3).expect("digit below 3");
        rest /= 3;
    }
    Ok(out)
}

/// Payload bytes needed for `entries` directions.
pub fn payload_len(entries: u64) -> u64 {
    entries.div_ceil(ENTRIES_PER_BYTE)
}

/// Size of an uncompressed log file holding `entries` directions.
pub fn file_len(entries: u64) -> u64 {
    HEADER_LEN + payload_len(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogHeader {
    pub b_r: u8,
    pub compressed: bool,
    pub entry_count: u64,
}

impl LogHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5] = self.b_r;
        out[6] = if self.compressed { FLAG_DEFLATE } else { 0 };
        out[7..].copy_from_slice(&self.entry_count.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8; HEADER_LEN as usize]) -> Result<Self, LogError> {
        if bytes[..4] != MAGIC {
            return Err(LogError::NotARoundingLog);
        }
        if bytes[4] != VERSION {
            return Err(LogError::UnsupportedVersion(bytes[4]));
        }
        let flags = bytes[6];
        if flags & !FLAG_DEFLATE != 0 {
            return Err(LogError::UnknownFlags(flags));
        }
        Ok(Self {
            b_r: bytes[5],
            compressed: flags & FLAG_DEFLATE != 0,
            entry_count: u64::from_le_bytes(bytes[7..].try_into().expect("8 bytes")),
        })
    }
}

enum Sink<W: Write> {
    Plain(BufWriter<W>),
    Deflate(DeflateEncoder<BufWriter<W>>),
}

impl<W: Write> Sink<W> {
    fn put(&mut self, byte: u8) -> io::Result<()> {
        match self {
            Sink::Plain(w) => w.write_all(&[byte]),
            Sink::Deflate(w) => w.write_all(&[byte]),
        }
    }

    fn close(self) -> io::Result<W> {
        let buffered = match self {
            Sink::Plain(w) => w,
            Sink::Deflate(w) => w.finish()?,
        };
        buffered.into_inner().map_err(|e| e.into_error())
    }
}

/// Streams directions to disk five at a time.
pub struct LogWriter<W: Write + Seek> {
    sink: Sink<W>,
    start: u64,
    b_r: u8,
    compressed: bool,
    group: [RoundingDirection; 5],
    filled: usize,
    count: u64,
}

impl LogWriter<File> {
    pub fn create(path: impl AsRef<Path>, b_r: u8, compress: bool) -> Result<Self, LogError> {
        let file = File::create(path).map_err(io_at(0))?;
        Self::new(file, b_r, compress)
    }
}

impl<W: Write + Seek> LogWriter<W> {
    /// Writes a placeholder header at the current position of `inner`.
    pub fn new(mut inner: W, b_r: u8, compress: bool) -> Result<Self, LogError> {
        let start = inner.stream_position().map_err(io_at(0))?;
        let header = LogHeader {
            b_r,
            compressed: compress,
            entry_count: 0,
        };
        inner.write_all(&header.to_bytes()).map_err(io_at(start))?;
        let buffered = BufWriter::with_capacity(1 << 16, inner);
        let sink = if compress {
            Sink::Deflate(DeflateEncoder::new(buffered, Compression::default()))
        } else {
            Sink::Plain(buffered)
        };
        Ok(Self {
            sink,
            start,
            b_r,
            compressed: compress,
            group: [RoundingDirection::Ignore; 5],
            filled: 0,
            count: 0,
        })
    }

    pub fn entry_count(&self) -> u64 {
        self.count
    }

    fn payload_offset(&self) -> u64 {
        HEADER_LEN + self.count / ENTRIES_PER_BYTE
    }

    pub fn write(&mut self, dir: RoundingDirection) -> Result<(), LogError> {
        self.group[self.filled] = dir;
        self.filled += 1;
        if self.filled == 5 {
            let offset = self.payload_offset();
            self.sink.put(pack5(self.group)).map_err(io_at(offset))?;
            self.filled = 0;
        }
        self.count += 1;
        Ok(())
    }

    /// Pads the last group, patches the entry count into the header and
    /// returns the underlying stream positioned at the end of the log.
    pub fn finish(mut self) -> Result<(W, LogHeader), LogError> {
        if self.filled > 0 {
            self.group[self.filled..].fill(RoundingDirection::Ignore);
            let offset = self.payload_offset();
            self.sink.put(pack5(self.group)).map_err(io_at(offset))?;
        }
        let end_offset = HEADER_LEN + payload_len(self.count);
        let mut inner = self.sink.close().map_err(io_at(end_offset))?;
        let header = LogHeader {
            b_r: self.b_r,
            compressed: self.compressed,
            entry_count: self.count,
        };
        let end = inner.stream_position().map_err(io_at(end_offset))?;
        inner
            .seek(SeekFrom::Start(self.start))
            .and_then(|_| inner.write_all(&header.to_bytes()))
            .and_then(|_| inner.seek(SeekFrom::Start(end)))
            .and_then(|_| inner.flush())
            .map_err(io_at(self.start))?;
        Ok((inner, header))
    }
}

enum Source<R: Read> {
    Plain(BufReader<R>),
    Inflate(DeflateDecoder<BufReader<R>>),
}

impl<R: Read> Source<R> {
    /// Reads one byte, `None` at end of stream.
    fn next_byte(&mut self) -> io::Result<Option<u8>> {
        let mut buf = [0u8; 1];
        let n = loop {
            let res = match self {
                Source::Plain(r) => r.read(&mut buf),
                Source::Inflate(r) => r.read(&mut buf),
            };
            match res {
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                other => break other?,
            }
        };
        Ok((n == 1).then_some(buf[0]))
    }
}

/// Reads directions back in write order.
pub struct LogReader<R: Read> {
    source: Source<R>,
    header: LogHeader,
    position: u64,
    group: [RoundingDirection; 5],
}

impl LogReader<File> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LogError> {
        Self::new(File::open(path).map_err(io_at(0))?)
    }
}

impl<R: Read> LogReader<R> {
    pub fn new(mut inner: R) -> Result<Self, LogError> {
        let mut raw = [0u8; HEADER_LEN as usize];
        inner.read_exact(&mut raw).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => LogError::NotARoundingLog,
            _ => LogError::Io {
                offset: 0,
                source: e,
            },
        })?;
        let header = LogHeader::parse(&raw)?;
        let buffered = BufReader::with_capacity(1 << 16, inner);
        let source = if header.compressed {
            Source::Inflate(DeflateDecoder::new(buffered))
        } else {
            Source::Plain(buffered)
        };
        Ok(Self {
            source,
            header,
            position: 0,
            group: [RoundingDirection::Ignore; 5],
        })
    }

    pub fn header(&self) -> &LogHeader {
        &self.header
    }

    /// Entries consumed so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn remaining(&self) -> u64 {
        self.header.entry_count - self.position
    }

    fn fetch(&mut self) -> Result<u8, LogError> {
        let offset = self.position / ENTRIES_PER_BYTE;
        match self.source.next_byte() {
            Ok(Some(b)) => Ok(b),
            Ok(None) => Err(LogError::Truncated(offset)),
            Err(source) => Err(LogError::Io {
                offset: HEADER_LEN + offset,
                source,
            }),
        }
    }

    pub fn read(&mut self) -> Result<RoundingDirection, LogError> {
        if self.position >= self.header.entry_count {
            return Err(LogError::Exhausted(self.header.entry_count));
        }
        let slot = (self.position % ENTRIES_PER_BYTE) as usize;
        if slot == 0 {
            let byte = self.fetch()?;
            self.group = unpack5(byte).map_err(|_| LogError::CorruptByte {
                offset: self.position / ENTRIES_PER_BYTE,
                value: byte,
            })?;
        }
        self.position += 1;
        Ok(self.group[slot])
    }

    /// Checks that every entry was consumed, the padding is well formed and
    /// nothing follows the payload.
    pub fn finish(mut self) -> Result<(), LogError> {
        if self.position < self.header.entry_count {
            return Err(LogError::TrailingData);
        }
        let used = (self.position % ENTRIES_PER_BYTE) as usize;
        if used != 0
            && self.group[used..]
                .iter()
                .any(|&d| d != RoundingDirection::Ignore)
        {
            return Err(LogError::TrailingData);
        }
        match self.source.next_byte() {
            Ok(None) => Ok(()),
            Ok(Some(_)) => Err(LogError::TrailingData),
            Err(source) => Err(LogError::Io {
                offset: HEADER_LEN + payload_len(self.position),
                source,
            }),
        }
    }
}

impl<R: Read> Iterator for LogReader<R> {
    type Item = Result<RoundingDirection, LogError>;

    fn next(&mut self) -> Option<Self::Item> {
        (self.remaining() > 0).then(|| self.read())
    }
}

/// Encodes a whole sequence into an in-memory log file.
pub fn encode(
    dirs: impl IntoIterator<Item = RoundingDirection>,
    b_r: u8,
    compress: bool,
) -> Result<Vec<u8>, LogError> {
    let mut writer = LogWriter::new(Cursor::new(Vec::new()), b_r, compress)?;
    for d in dirs {
        writer.write(d)?;
    }
    Ok(writer.finish()?.0.into_inner())
}

/// Decodes an in-memory log file.
pub fn decode(bytes: &[u8]) -> Result<(LogHeader, Vec<RoundingDirection>), LogError> {
    let mut reader = LogReader::new(bytes)?;
    let header = *reader.header();
    let dirs = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    reader.finish()?;
    Ok((header, dirs))
}

/// Count of each direction in a log, indexed by code.
pub fn histogram<R: Read>(reader: &mut LogReader<R>) -> Result<[u64; 3], LogError> {
    let mut counts = [0u64; 3];
    for d in reader {
        counts[d?.code() as usize] += 1;
    }
    Ok(counts)
}
