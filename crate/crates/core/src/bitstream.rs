//! Compressed file format.
//!
//! ```text
//! header   47 bytes
//!   magic        4   "RNIC"
//!   version      u8
//!   width        u32 LE   original, before padding
//!   height       u32 LE
//!   iterations   u8
//!   flags        u8       bit 0: entropy coded, bit 1: residual-scaled codec
//!   codec hash   16
//!   entropy hash 16       zero when raw
//! payload
//!   raw:   k blocks of Hc·Wc·32 bits, MSB first, order (y, x, d)
//!   coded: k × u32 LE cumulative segment end offsets, then the segments
//! ```
//!
//! Either payload can be cut at an iteration boundary and still decodes the
//! iterations before the cut.

use crate::codec::{Codec, DecoderSession, Mode, CODE_STRIDE};
use crate::codes::CodeTensor;
use crate::container::{hash_hex, ModelHash, HASH_LEN};
use crate::entropy::{decode_codes, encode_codes, EntropyModel};
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const MAGIC: &[u8; 4] = b"RNIC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 1 + 1 + 2 * HASH_LEN;

const FLAG_ENTROPY: u8 = 1;
const FLAG_SCALED: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub width: u32,
    pub height: u32,
    pub iterations: u8,
    pub entropy_coded: bool,
    pub residual_scaled: bool,
    pub codec_hash: ModelHash,
    pub entropy_hash: ModelHash,
}

impl Header {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0; HEADER_LEN];
        b[..4].copy_from_slice(MAGIC);
        b[4] = self.version;
        b[5..9].copy_from_slice(&self.width.to_le_bytes());
        b[9..13].copy_from_slice(&self.height.to_le_bytes());
        b[13] = self.iterations;
        b[14] = (u8::from(self.entropy_coded) * FLAG_ENTROPY) | (u8::from(self.residual_scaled) * FLAG_SCALED);
        b[15..31].copy_from_slice(&self.codec_hash);
        b[31..47].copy_from_slice(&self.entropy_hash);
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not an RNIC bitstream".into()));
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {version}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let flags = bytes[14];
        if flags & !(FLAG_ENTROPY | FLAG_SCALED) != 0 {
            return Err(Error::Format(format!("unknown header flags {flags:#04x}")));
        }
        let h = Header {
            version,
            width: u32_at(5),
            height: u32_at(9),
            iterations: bytes[13],
            entropy_coded: flags & FLAG_ENTROPY != 0,
            residual_scaled: flags & FLAG_SCALED != 0,
            codec_hash: bytes[15..31].try_into().expect("16 bytes"),
            entropy_hash: bytes[31..47].try_into().expect("16 bytes"),
        };
        if h.width == 0 || h.height == 0 || h.iterations == 0 {
            return Err(Error::Format(format!(
                "header has {}×{} pixels and {} iterations",
                h.width, h.height, h.iterations
            )));
        }
        Ok(h)
    }

    fn alignment(&self) -> usize {
        if self.residual_scaled {
            Mode::ResidualScaled.alignment()
        } else {
            CODE_STRIDE
        }
    }

    /// Padded image extent `(width, height)`.
    pub fn padded(&self) -> (usize, usize) {
        let a = self.alignment();
        ((self.width as usize).div_ceil(a) * a, (self.height as usize).div_ceil(a) * a)
    }

    /// Code grid `(height, width)`.
    pub fn code_grid(&self) -> (usize, usize) {
        let (w, h) = self.padded();
        (h / CODE_STRIDE, w / CODE_STRIDE)
    }
}

/// `+1` bits as one, MSB first.
pub fn pack_bits(codes: &CodeTensor) -> Vec<u8> {
    let mut out = vec![0u8; codes.len().div_ceil(8)];
    for (i, &b) in codes.bits().iter().enumerate() {
        out[i / 8] |= b << (7 - i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], height: usize, width: usize, depth: usize, iteration: usize) -> Result<CodeTensor> {
    let n = height * width * depth;
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Format(format!(
            "{} bytes cannot hold exactly {n} code bits",
            bytes.len()
        )));
    }
    let bits = (0..n).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect();
    CodeTensor::new(height, width, depth, iteration, bits)
}

/// An entropy model together with its own hash.
#[derive(Clone, Copy)]
pub struct EntropyRef<'a> {
    pub model: &'a EntropyModel<f32>,
    pub hash: ModelHash,
}

fn mismatch(what: &str, expect: &ModelHash, got: &ModelHash) -> Error {
    Error::ModelMismatch(format!(
        "bitstream was written with {what} {}, but {} was supplied",
        hash_hex(expect),
        hash_hex(got)
    ))
}

/// Compresses `image` with `k` iterations. Output is a pure function of the
/// inputs.
pub fn compress(
    image: &RgbImage,
    codec: &Codec<f32>,
    codec_hash: &ModelHash,
    k: usize,
    entropy: Option<EntropyRef<'_>>,
) -> Result<Vec<u8>> {
    if k == 0 || k > usize::from(u8::MAX) {
        return Err(Error::Usage(format!("iteration count {k} is outside 1..=255")));
    }
    let mode = codec.arch().mode;
    let padded = image.pad_to_multiple(mode.alignment());
    let codes = codec.encode_image(&padded.to_signed(), k)?;
    let header = Header {
        version: VERSION,
        width: image.width() as u32,
        height: image.height() as u32,
        iterations: k as u8,
        entropy_coded: entropy.is_some(),
        residual_scaled: mode == Mode::ResidualScaled,
        codec_hash: *codec_hash,
        entropy_hash: entropy.map(|e| e.hash).unwrap_or([0; HASH_LEN]),
    };
    let mut out = header.to_bytes().to_vec();
    match entropy {
        None => {
            for c in &codes {
                out.extend_from_slice(&pack_bits(c));
            }
        }
        Some(e) => {
            let segments = encode_codes(e.model, codec_hash, &codes)?;
            let mut end = 0u32;
            for s in &segments {
                end += s.len() as u32;
                out.extend_from_slice(&end.to_le_bytes());
            }
            for s in &segments {
                out.extend_from_slice(s);
            }
        }
    }
    Ok(out)
}

/// Codes recovered from a bitstream, possibly fewer iterations than the
/// header announces when the stream was cut at an iteration boundary.
pub fn read_codes(bytes: &[u8], codec: &Codec<f32>, codec_hash: &ModelHash, entropy: Option<EntropyRef<'_>>) -> Result<(Header, Vec<CodeTensor>)> {
    let header = Header::parse(bytes)?;
    if &header.codec_hash != codec_hash {
        return Err(mismatch("codec", &header.codec_hash, codec_hash));
    }
    if header.residual_scaled != (codec.arch().mode == Mode::ResidualScaled) {
        return Err(Error::ModelMismatch(
            "bitstream and codec disagree on residual scaling".into(),
        ));
    }
    let (hc, wc) = header.code_grid();
    let depth = codec.arch().code_depth;
    let k = usize::from(header.iterations);
    let payload = &bytes[HEADER_LEN..];
    let codes = if header.entropy_coded {
        let e = entropy.ok_or_else(|| {
            Error::Usage("bitstream is entropy coded; an entropy model is required".into())
        })?;
        if e.hash != header.entropy_hash {
            return Err(mismatch("entropy model", &header.entropy_hash, &e.hash));
        }
        if payload.len() < 4 * k {
            return Err(Error::Format("segment offset table is truncated".into()));
        }
        let (table, data) = payload.split_at(4 * k);
        let ends: Vec<usize> = table
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        if ends.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Format("segment offsets are not monotone".into()));
        }
        let available = ends.iter().take_while(|&&e| e <= data.len()).count();
        let used = if available == 0 { 0 } else { ends[available - 1] };
        if used != data.len() {
            return Err(Error::Format(
                "coded payload does not end at an iteration boundary".into(),
            ));
        }
        let mut start = 0;
        let segments: Vec<&[u8]> = ends[..available]
            .iter()
            .map(|&end| {
                let s = &data[start..end];
                start = end;
                s
            })
            .collect();
        decode_codes(e.model, codec_hash, &segments, hc, wc)?
    } else {
        let block = (hc * wc * depth).div_ceil(8);
        if payload.len() % block != 0 || payload.len() / block > k {
            return Err(Error::Format(format!(
                "raw payload of {} bytes is not a whole number of {block}-byte iterations (at most {k})",
                payload.len()
            )));
        }
        payload
            .chunks(block)
            .enumerate()
            .map(|(t, b)| unpack_bits(b, hc, wc, depth, t + 1))
            .collect::<Result<_>>()?
    };
    Ok((header, codes))
}

/// Reconstruction from the first `iterations` iterations (all available when
/// `None`), cropped to the original size.
pub fn decompress(
    bytes: &[u8],
    codec: &Codec<f32>,
    codec_hash: &ModelHash,
    entropy: Option<EntropyRef<'_>>,
    iterations: Option<usize>,
) -> Result<RgbImage> {
    if iterations == Some(0) {
        return Err(Error::Usage("at least one iteration must be decoded".into()));
    }
    let header = Header::parse(bytes)?;
    if let Some(j) = iterations {
        if j > usize::from(header.iterations) {
            return Err(Error::Usage(format!(
                "requested {j} iterations from a {}-iteration bitstream",
                header.iterations
            )));
        }
    }
    let (header, codes) = read_codes(bytes, codec, codec_hash, entropy)?;
    let want = iterations.unwrap_or(codes.len());
    if codes.len() < want || codes.is_empty() {
        return Err(Error::Format(format!(
            "stream holds {} complete iterations, {want} requested",
            codes.len()
        )));
    }
    let (w, h) = header.padded();
    let mut session = DecoderSession::new(codec, h, w)?;
    let mut recon = None;
    for c in &codes[..want] {
        recon = Some(session.push(c)?);
    }
    let padded = RgbImage::from_signed(&recon.expect("at least one iteration"))?;
    padded.crop(0, 0, header.width as usize, header.height as usize)
}
