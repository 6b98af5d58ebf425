//! Fixed-width index packing, the framed wire format, and compression-rate
//! accounting.
//!
//! Indices are packed LSB-first: value `i` occupies bits
//! `[i·b, (i+1)·b)` of the little-endian bit stream, so `[1, 0, 3, 2]` at
//! `b = 2` is the single byte `0xB1`. Unused bits of the final byte are zero.
//!
//! Every frame is
//!
//! ```text
//! +------+------+---------+------+-------------+--------+
//! | 0x53 | 0x51 | version | type | body len LE | body   |
//! | 'S'  | 'Q'  |   u8    |  u8  |    u32      | ...    |
//! +------+------+---------+------+-------------+--------+
//! ```
//!
//! with all multi-byte integers little-endian. Body layouts:
//!
//! * `Hello` (1): `u16 protocol_version, u16 K, u8 rank, u32 dims[rank]`
//! * `Features` (2): `u64 request_id, u16 K, u8 rank, u32 dims[rank],
//!   u8 bit_width, u32 count, packed[ceil(count·bit_width/8)]`
//! * `Response` (3): `u64 request_id, u8 kind`, then for kind 0 a tensor
//!   `u8 rank, u32 dims[rank], f64 data[..]`, for kind 1 one `f64`
//! * `Error` (4): `u16 code, u32 len, utf8 message[len]`
//! * `TopK` (5): `u64 request_id, u32 rows, u32 dims, u32 k, u8 index_bits,
//!   packed indices[ceil(rows·k·index_bits/8)], u16 f16 values[rows·k]`

use std::fmt;

use thiserror::Error;

/// Frame magic, ASCII "SQ".
pub const MAGIC: [u8; 2] = [0x53, 0x51];
/// Wire format version carried in every frame header.
pub const WIRE_VERSION: u8 = 1;
/// Session protocol version carried in `Hello`.
pub const PROTOCOL_VERSION: u16 = 1;
/// Bytes before the body: magic, version, type, length.
pub const HEADER_LEN: usize = 8;
/// Largest body a stream reader accepts.
pub const MAX_BODY_LEN: usize = 1 << 28;
/// Widest index the public packer accepts.
pub const MAX_BIT_WIDTH: u8 = 8;
/// Bits per element of the uncompressed FP16 baseline.
pub const FP16_BITS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("bit width {0} is outside 1..=8")]
    InvalidBitWidth(u8),
    #[error("index {value} at position {position} does not fit in {bit_width} bits")]
    IndexOutOfRange { position: usize, value: u32, bit_width: u8 },
    #[error("truncated payload: {count} indices at {bit_width} bits need {needed} bytes, got {actual}")]
    TruncatedPayload {
        count: usize,
        bit_width: u8,
        needed: usize,
        actual: usize,
    },
    #[error("payload has {extra} trailing bytes")]
    TrailingPayload { extra: usize },
    #[error("non-zero padding bits in final payload byte")]
    DirtyPadding,
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("length mismatch: header says {declared} body bytes, got {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown frame type {0}")]
    UnknownFrameType(u8),
    #[error("body of {0} bytes exceeds limit")]
    BodyTooLarge(usize),
    #[error("malformed body: {0}")]
    Malformed(String),
    #[error("zero divisor in compression rate")]
    ZeroDivisor,
}

/// Bits needed to index `levels` values, `ceil(log2 K)`.
pub fn bits_for_levels(levels: u32) -> u8 {
    debug_assert!(levels >= 2);
    (32 - (levels - 1).leading_zeros()) as u8
}

/// Packed bytes needed for `count` values at `bit_width`.
pub fn packed_len(count: usize, bit_width: u32) -> usize {
    (count * bit_width as usize).div_ceil(8)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedIndices {
    bit_width: u8,
    count: usize,
    bytes: Vec<u8>,
}

impl PackedIndices {
    /// Validates an externally supplied payload.
    pub fn from_parts(bit_width: u8, count: usize, bytes: Vec<u8>) -> Result<Self, CodecError> {
        if !(1..=MAX_BIT_WIDTH).contains(&bit_width) {
            return Err(CodecError::InvalidBitWidth(bit_width));
        }
        check_payload(count, bit_width as u32, &bytes)?;
        Ok(Self {
            bit_width,
            count,
            bytes,
        })
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

fn check_payload(count: usize, bit_width: u32, bytes: &[u8]) -> Result<(), CodecError> {
    let needed = packed_len(count, bit_width);
    if bytes.len() < needed {
        return Err(CodecError::TruncatedPayload {
            count,
            bit_width: bit_width.min(255) as u8,
            needed,
            actual: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(CodecError::TrailingPayload {
            extra: bytes.len() - needed,
        });
    }
    let used = (count * bit_width as usize) % 8;
    if used != 0 && bytes[needed - 1] >> used != 0 {
        return Err(CodecError::DirtyPadding);
    }
    Ok(())
}

/// LSB-first packing for widths up to 32 bits. Callers guarantee every value
/// fits.
fn pack_bits(values: &[u32], bit_width: u32) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(values.len(), bit_width)];
    let mut bit = 0usize;
    for &v in values {
        let mut v = v as u64;
        let mut remaining = bit_width as usize;
        while remaining > 0 {
            let byte = bit / 8;
            let offset = bit % 8;
            let take = remaining.min(8 - offset);
            out[byte] |= ((v & ((1u64 << take) - 1)) << offset) as u8;
            v >>= take;
            bit += take;
            remaining -= take;
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], count: usize, bit_width: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let mut v = 0u64;
        let mut got = 0usize;
        while got < bit_width as usize {
            let byte = bit / 8;
            let offset = bit % 8;
            let take = (bit_width as usize - got).min(8 - offset);
            let chunk = (bytes[byte] as u64 >> offset) & ((1u64 << take) - 1);
            v |= chunk << got;
            got += take;
            bit += take;
        }
        out.push(v as u32);
    }
    out
}

pub fn pack(indices: &[u32], bit_width: u8) -> Result<PackedIndices, CodecError> {
    if !(1..=MAX_BIT_WIDTH).contains(&bit_width) {
        return Err(CodecError::InvalidBitWidth(bit_width));
    }
    let limit = 1u32 << bit_width;
    if let Some((position, &value)) = indices.iter().enumerate().find(|(_, &v)| v >= limit) {
        return Err(CodecError::IndexOutOfRange {
            position,
            value,
            bit_width,
        });
    }
    Ok(PackedIndices {
        bit_width,
        count: indices.len(),
        bytes: pack_bits(indices, bit_width as u32),
    })
}

pub fn unpack(p: &PackedIndices) -> Result<Vec<u32>, CodecError> {
    check_payload(p.count, p.bit_width as u32, &p.bytes)?;
    Ok(unpack_bits(&p.bytes, p.count, p.bit_width as u32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Hello = 1,
    Features = 2,
    Response = 3,
    Error = 4,
    TopK = 5,
}

impl FrameType {
    pub fn from_u8(v: u8) -> Result<Self, CodecError> {
        Ok(match v {
            1 => FrameType::Hello,
            2 => FrameType::Features,
            3 => FrameType::Response,
            4 => FrameType::Error,
            5 => FrameType::TopK,
            other => return Err(CodecError::UnknownFrameType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub protocol_version: u16,
    pub levels: u16,
    pub shape: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Features {
    pub request_id: u64,
    pub levels: u16,
    pub shape: Vec<u32>,
    pub packed: PackedIndices,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResponseBody {
    Tensor { shape: Vec<u32>, data: Vec<f64> },
    Scalar(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub request_id: u64,
    pub body: ResponseBody,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorFrame {
    pub code: u16,
    pub message: String,
}

/// Sparse top-k rows: `k` kept `(index, f16 value)` pairs per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKFrame {
    pub request_id: u64,
    pub rows: u32,
    pub dims: u32,
    pub k: u32,
    /// Row-major, `rows · k` entries, each `< dims`.
    pub indices: Vec<u32>,
    /// IEEE half-precision bit patterns, aligned with `indices`.
    pub values: Vec<u16>,
}

impl TopKFrame {
    /// Bits used per kept index, `ceil(log2 dims)` (at least 1).
    pub fn index_bits(dims: u32) -> u32 {
        if dims <= 2 {
            1
        } else {
            32 - (dims - 1).leading_zeros()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireFrame {
    Hello(Hello),
    Features(Features),
    Response(Response),
    Error(ErrorFrame),
    TopK(TopKFrame),
}

impl WireFrame {
    pub fn frame_type(&self) -> FrameType {
        match self {
            WireFrame::Hello(_) => FrameType::Hello,
            WireFrame::Features(_) => FrameType::Features,
            WireFrame::Response(_) => FrameType::Response,
            WireFrame::Error(_) => FrameType::Error,
            WireFrame::TopK(_) => FrameType::TopK,
        }
    }
}

impl fmt::Display for WireFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireFrame::Hello(h) => write!(
                f,
                "type=hello protocol_version={} k={} shape={}",
                h.protocol_version,
                h.levels,
                fmt_shape(&h.shape)
            ),
            WireFrame::Features(x) => write!(
                f,
                "type=features request_id={} k={} shape={} bit_width={} count={} payload_bytes={}",
                x.request_id,
                x.levels,
                fmt_shape(&x.shape),
                x.packed.bit_width,
                x.packed.count,
                x.packed.bytes.len()
            ),
            WireFrame::Response(r) => match &r.body {
                ResponseBody::Tensor { shape, data } => write!(
                    f,
                    "type=response request_id={} kind=tensor shape={} elements={}",
                    r.request_id,
                    fmt_shape(shape),
                    data.len()
                ),
                ResponseBody::Scalar(v) => {
                    write!(f, "type=response request_id={} kind=scalar value={v:.6}", r.request_id)
                }
            },
            WireFrame::Error(e) => write!(f, "type=error code={} message={:?}", e.code, e.message),
            WireFrame::TopK(t) => write!(
                f,
                "type=topk request_id={} rows={} dims={} k={}",
                t.request_id, t.rows, t.dims, t.k
            ),
        }
    }
}

fn fmt_shape(shape: &[u32]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn shape(&mut self, shape: &[u32]) {
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::Malformed(format!(
                "needed {n} more bytes, {} left",
                self.buf.len()
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn shape(&mut self) -> Result<Vec<u32>, CodecError> {
        let rank = self.u8()? as usize;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(CodecError::Malformed(format!("rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        if shape.contains(&0) {
            return Err(CodecError::Malformed("zero dimension".into()));
        }
        Ok(shape)
    }
    fn finish(self) -> Result<(), CodecError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CodecError::Malformed(format!("{} unread bytes", self.buf.len())))
        }
    }
}

/// Element count of a wire shape, rejecting overflow.
pub fn shape_elements(shape: &[u32]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

fn encode_body(frame: &WireFrame) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match frame {
        WireFrame::Hello(h) => {
            w.u16(h.protocol_version);
            w.u16(h.levels);
            w.shape(&h.shape);
        }
        WireFrame::Features(x) => {
            w.u64(x.request_id);
            w.u16(x.levels);
            w.shape(&x.shape);
            w.u8(x.packed.bit_width);
            w.u32(x.packed.count as u32);
            w.0.extend_from_slice(&x.packed.bytes);
        }
        WireFrame::Response(r) => {
            w.u64(r.request_id);
            match &r.body {
                ResponseBody::Tensor { shape, data } => {
                    w.u8(0);
                    w.shape(shape);
                    for &v in data {
                        w.f64(v);
                    }
                }
                ResponseBody::Scalar(v) => {
                    w.u8(1);
                    w.f64(*v);
                }
            }
        }
        WireFrame::Error(e) => {
            w.u16(e.code);
            w.u32(e.message.len() as u32);
            w.0.extend_from_slice(e.message.as_bytes());
        }
        WireFrame::TopK(t) => {
            w.u64(t.request_id);
            w.u32(t.rows);
            w.u32(t.dims);
            w.u32(t.k);
            let bits = TopKFrame::index_bits(t.dims);
            w.u8(bits as u8);
            w.0.extend_from_slice(&pack_bits(&t.indices, bits));
            for &v in &t.values {
                w.u16(v);
            }
        }
    }
    w.0
}

pub fn encode_frame(frame: &WireFrame) -> Vec<u8> {
    let body = encode_body(frame);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(WIRE_VERSION);
    out.push(frame.frame_type() as u8);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Validates a frame header, returning the frame type and declared body length.
pub fn parse_header(header: &[u8]) -> Result<(FrameType, usize), CodecError> {
    if header.len() < 2 || header[..2] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    if header.len() < HEADER_LEN {
        return Err(CodecError::LengthMismatch {
            declared: HEADER_LEN,
            actual: header.len(),
        });
    }
    if header[2] != WIRE_VERSION {
        return Err(CodecError::UnsupportedVersion(header[2]));
    }
    let frame_type = FrameType::from_u8(header[3])?;
    let len = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    if len > MAX_BODY_LEN {
        return Err(CodecError::BodyTooLarge(len));
    }
    Ok((frame_type, len))
}

pub fn decode_frame(bytes: &[u8]) -> Result<WireFrame, CodecError> {
    let (frame_type, declared) = parse_header(bytes)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != declared {
        return Err(CodecError::LengthMismatch {
            declared,
            actual: body.len(),
        });
    }
    decode_body(frame_type, body)
}

pub fn decode_body(frame_type: FrameType, body: &[u8]) -> Result<WireFrame, CodecError> {
    let mut r = Reader { buf: body };
    let frame = match frame_type {
        FrameType::Hello => {
            let protocol_version = r.u16()?;
            let levels = r.u16()?;
            let shape = r.shape()?;
            WireFrame::Hello(Hello {
                protocol_version,
                levels,
                shape,
            })
        }
        FrameType::Features => {
            let request_id = r.u64()?;
            let levels = r.u16()?;
            if levels < 2 {
                return Err(CodecError::Malformed(format!("level count {levels}")));
            }
            let shape = r.shape()?;
            let bit_width = r.u8()?;
            if bit_width != bits_for_levels(levels as u32) {
                return Err(CodecError::Malformed(format!(
                    "bit width {bit_width} does not match K={levels}"
                )));
            }
            let count = r.u32()? as usize;
            if shape_elements(&shape) != Some(count) {
                return Err(CodecError::Malformed(format!(
                    "count {count} does not match shape {}",
                    fmt_shape(&shape)
                )));
            }
            let bytes = r.take(packed_len(count, bit_width as u32))?.to_vec();
            let packed = PackedIndices::from_parts(bit_width, count, bytes)?;
            WireFrame::Features(Features {
                request_id,
                levels,
                shape,
                packed,
            })
        }
        FrameType::Response => {
            let request_id = r.u64()?;
            let body = match r.u8()? {
                0 => {
                    let shape = r.shape()?;
                    let n = shape_elements(&shape)
                        .filter(|&n| n <= body.len() / 8)
                        .ok_or_else(|| CodecError::Malformed("tensor larger than body".into()))?;
                    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                    ResponseBody::Tensor { shape, data }
                }
                1 => ResponseBody::Scalar(r.f64()?),
                other => return Err(CodecError::Malformed(format!("response kind {other}"))),
            };
            WireFrame::Response(Response { request_id, body })
        }
        FrameType::Error => {
            let code = r.u16()?;
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            let message = std::str::from_utf8(raw)
                .map_err(|_| CodecError::Malformed("error message is not utf-8".into()))?
                .to_string();
            WireFrame::Error(ErrorFrame { code, message })
        }
        FrameType::TopK => {
            let request_id = r.u64()?;
            let rows = r.u32()?;
            let dims = r.u32()?;
            let k = r.u32()?;
            if dims == 0 || k == 0 || k > dims {
                return Err(CodecError::Malformed(format!("k={k} dims={dims}")));
            }
            let bits = TopKFrame::index_bits(dims);
            if r.u8()? as u32 != bits {
                return Err(CodecError::Malformed("index width does not match dims".into()));
            }
            let n = (rows as usize)
                .checked_mul(k as usize)
                .filter(|&n| n <= body.len())
                .ok_or_else(|| CodecError::Malformed("entry count larger than body".into()))?;
            let packed = r.take(packed_len(n, bits))?;
            check_payload(n, bits, packed)?;
            let indices = unpack_bits(packed, n, bits);
            if let Some(bad) = indices.iter().find(|&&i| i >= dims) {
                return Err(CodecError::Malformed(format!("index {bad} >= dims {dims}")));
            }
            let values = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
            WireFrame::TopK(TopKFrame {
                request_id,
                rows,
                dims,
                k,
                indices,
                values,
            })
        }
    };
    r.finish()?;
    Ok(frame)
}

/// Classic 16-bytes-per-line hex dump with offsets.
pub fn hex_dump(bytes: &[u8]) -> String {
    let mut out = String::new();
    for (line, chunk) in bytes.chunks(16).enumerate() {
        out.push_str(&format!("{:08x} ", line * 16));
        for b in chunk {
            out.push_str(&format!(" {b:02x}"));
        }
        out.push('\n');
    }
    out
}

/// Parses contiguous hex, ignoring ASCII whitespace.
pub fn parse_hex(s: &str) -> Result<Vec<u8>, CodecError> {
    let digits: Vec<u8> = s.bytes().filter(|b| !b.is_ascii_whitespace()).collect();
    if !digits.len().is_multiple_of(2) {
        return Err(CodecError::Malformed("odd number of hex digits".into()));
    }
    digits
        .chunks(2)
        .map(|pair| {
            std::str::from_utf8(pair)
                .ok()
                .and_then(|p| u8::from_str_radix(p, 16).ok())
                .ok_or_else(|| CodecError::Malformed("invalid hex digit".into()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressionMethod {
    /// Fixed-width discrete indices; the argument is the bit width.
    Discrete,
    /// Top-k sparsification; the argument is `k`.
    TopK,
}

/// Nominal rate versus FP16: `16 / bits` for discrete codes, `dims / k` for
/// top-k.
pub fn compression_rate(method: CompressionMethod, bits_or_k: u32, dims: u32) -> Result<f64, CodecError> {
    if bits_or_k == 0 {
        return Err(CodecError::ZeroDivisor);
    }
    Ok(match method {
        CompressionMethod::Discrete => FP16_BITS as f64 / bits_or_k as f64,
        CompressionMethod::TopK => dims as f64 / bits_or_k as f64,
    })
}

/// Raw FP16 size over actual transmitted size.
pub fn measured_ratio(features_bytes_fp16: usize, frame_bytes: usize) -> f64 {
    features_bytes_fp16 as f64 / frame_bytes as f64
}

/// Size in bytes of `elements` values at FP16.
pub fn fp16_bytes(elements: usize) -> usize {
    2 * elements
}
