//! The `NVCR` container: a fixed 44-byte header followed by one chunk per
//! frame. All integers are little-endian.
//!
//! ```text
//! header  magic "NVCR" | version u8 | mode u8 | colorspace u8 | patch u8
//!         | C u16 | C_hyper u16 | dc_blocks u8 | split u8
//!         | width u32 | height u32 | frame_count u32 | base_qp u16 (1/256)
//!         | gop_offsets i8 x 8 | model_hash u64
//! chunk   qp u16 (1/256) | len_z u32 | len_y1 u32 | len_y2 u32
//!         | z bytes | y1 bytes | y2 bytes
//! ```

use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::model::{CodecConfig, ColorSpace, Mode};
use crate::rate::Qp;

pub const STREAM_MAGIC: &[u8; 4] = b"NVCR";
pub const STREAM_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 44;
pub const CHUNK_HEADER_BYTES: usize = 14;
/// Largest accepted frame width or height.
pub const MAX_DIMENSION: u32 = 1 << 14;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub mode: Mode,
    pub config: CodecConfig,
    /// Original, unpadded frame size.
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub base_qp: Qp,
    pub gop_offsets: [i8; 8],
    pub model_hash: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameChunk {
    pub qp: Qp,
    pub z: Vec<u8>,
    pub y1: Vec<u8>,
    pub y2: Vec<u8>,
}

impl FrameChunk {
    pub fn payload_bytes(&self) -> usize {
        self.z.len() + self.y1.len() + self.y2.len()
    }

    /// Bits the chunk occupies in the stream, chunk header included.
    pub fn bits(&self) -> usize {
        8 * (CHUNK_HEADER_BYTES + self.payload_bytes())
    }
}

impl StreamHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        let mut w = Vec::with_capacity(HEADER_BYTES);
        w.extend_from_slice(STREAM_MAGIC);
        w.push(STREAM_VERSION);
        w.push(self.mode.tag());
        w.extend_from_slice(&self.config.to_bytes());
        w.extend_from_slice(&self.width.to_le_bytes());
        w.extend_from_slice(&self.height.to_le_bytes());
        w.extend_from_slice(&self.frame_count.to_le_bytes());
        w.extend_from_slice(&self.base_qp.raw().to_le_bytes());
        w.extend(self.gop_offsets.iter().map(|&o| o as u8));
        w.extend_from_slice(&self.model_hash.to_le_bytes());
        out.copy_from_slice(&w);
        out
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let magic = r.take(4)?;
        if magic != STREAM_MAGIC {
            return Err(Error::stream(0, None, format!("bad magic {magic:02x?}")));
        }
        let version = r.u8()?;
        if version != STREAM_VERSION {
            return Err(Error::stream(4, None, format!("unsupported version {version}")));
        }
        let mode = Mode::from_tag(r.u8()?).map_err(|e| r.error(e.to_string()))?;
        let config = CodecConfig::read(r).map_err(|e| r.error(e.to_string()))?;
        let width = r.u32()?;
        let height = r.u32()?;
        let odd = config.colorspace == ColorSpace::Yuv420 && (width % 2 != 0 || height % 2 != 0);
        if width == 0 || height == 0 || width > MAX_DIMENSION || height > MAX_DIMENSION || odd {
            return Err(r.error(format!("invalid {} frame size {width}x{height}", config.colorspace)));
        }
        let frame_count = r.u32()?;
        let base_qp = Qp::from_raw(r.u16()?).map_err(|e| r.error(e.to_string()))?;
        let mut gop_offsets = [0i8; 8];
        for o in &mut gop_offsets {
            *o = r.i8()?;
        }
        let model_hash = r.u64()?;
        Ok(StreamHeader {
            mode,
            config,
            width,
            height,
            frame_count,
            base_qp,
            gop_offsets,
            model_hash,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(&mut Reader::new(bytes))
    }
}

impl FrameChunk {
    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.qp.raw().to_le_bytes());
        for p in [&self.z, &self.y1, &self.y2] {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.z);
        out.extend_from_slice(&self.y1);
        out.extend_from_slice(&self.y2);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let qp = Qp::from_raw(r.u16()?).map_err(|e| r.error(e.to_string()))?;
        let lens = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let total: usize = lens.iter().sum();
        if total > r.remaining() {
            return Err(r.error(format!(
                "payload of {total} bytes but only {} remain",
                r.remaining()
            )));
        }
        Ok(FrameChunk {
            qp,
            z: r.take(lens[0])?.to_vec(),
            y1: r.take(lens[1])?.to_vec(),
            y2: r.take(lens[2])?.to_vec(),
        })
    }
}

pub fn write_stream(header: &StreamHeader, chunks: &[FrameChunk]) -> Result<Vec<u8>> {
    if chunks.len() != header.frame_count as usize {
        return Err(Error::invalid(format!(
            "header announces {} frames, {} chunks given",
            header.frame_count,
            chunks.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + chunks.iter().map(|c| c.bits() / 8).sum::<usize>());
    out.extend_from_slice(&header.to_bytes());
    for c in chunks {
        c.write(&mut out);
    }
    Ok(out)
}

/// Parses a whole stream; every byte must belong to the header or a chunk.
pub fn read_stream(bytes: &[u8]) -> Result<(StreamHeader, Vec<FrameChunk>)> {
    let mut r = Reader::new(bytes);
    let header = StreamHeader::read(&mut r)?;
    let mut chunks = Vec::new();
    for i in 0..header.frame_count as usize {
        r.set_chunk(Some(i));
        chunks.push(FrameChunk::read(&mut r)?);
    }
    r.set_chunk(None);
    if !r.is_empty() {
        return Err(r.error(format!("{} trailing bytes after the last chunk", r.remaining())));
    }
    Ok((header, chunks))
}
