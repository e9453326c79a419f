//! Versioned binary container for model parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RNICMODL"
//! version    u8
//! precision  u8       4 = f32, 8 = f64
//! kind       u8       1 = codec, 2 = entropy model
//! descriptor u32 length + JSON
//! count      u32
//! tensors    count × { name: u16 length + UTF-8, dims: 4 × u32, data }
//! hash       16 bytes, SHA-256 of everything above, truncated
//! ```
//!
//! The trailing hash identifies the model: bitstreams and entropy models
//! refer to a codec by it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Architecture, Codec};
use crate::entropy::{EntropyArchitecture, EntropyModel};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"RNICMODL";
pub const VERSION: u8 = 1;
pub const HASH_LEN: usize = 16;

pub type ModelHash = [u8; HASH_LEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Codec,
    Entropy,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Codec => 1,
            ModelKind::Entropy => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::Codec),
            2 => Some(ModelKind::Entropy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodecDescriptor {
    architecture: Architecture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EntropyDescriptor {
    architecture: EntropyArchitecture,
    codec_hash: String,
}

/// Truncated SHA-256.
pub fn content_hash(bytes: &[u8]) -> ModelHash {
    let digest = Sha256::digest(bytes);
    let mut h = [0; HASH_LEN];
    h.copy_from_slice(&digest[..HASH_LEN]);
    h
}

pub fn hash_hex(h: &ModelHash) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_hex(s: &str) -> Option<ModelHash> {
    if s.len() != 2 * HASH_LEN || !s.is_ascii() {
        return None;
    }
    let mut h = [0; HASH_LEN];
    for (i, b) in h.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(h)
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn serialize<T: Scalar>(kind: ModelKind, descriptor: &[u8], names: &[String], tensors: &[Tensor<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::PRECISION.tag());
    out.push(kind.tag());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().0 {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let h = content_hash(&out);
    out.extend_from_slice(&h);
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| fmt_err("model file is truncated"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// A parsed container with tensors converted to `T`.
#[derive(Debug, Clone)]
pub struct Container<T> {
    pub kind: ModelKind,
    pub precision: Precision,
    pub descriptor: Vec<u8>,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub hash: ModelHash,
}

pub fn parse<T: Scalar>(bytes: &[u8]) -> Result<Container<T>> {
    if bytes.len() < MAGIC.len() + HASH_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt_err("not a model file"));
    }
    let (body, stored) = bytes.split_at(bytes.len() - HASH_LEN);
    let hash = content_hash(body);
    if hash[..] != stored[..] {
        return Err(fmt_err("model file hash does not match its contents"));
    }
    let mut c = Cursor {
        data: body,
        pos: MAGIC.len(),
    };
    let version = c.u8()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported model file version {version}")));
    }
    let ptag = c.u8()?;
    let precision = Precision::from_tag(ptag).ok_or_else(|| fmt_err(format!("unknown precision tag {ptag}")))?;
    let ktag = c.u8()?;
    let kind = ModelKind::from_tag(ktag).ok_or_else(|| fmt_err(format!("unknown model kind {ktag}")))?;
    let dlen = c.u32()? as usize;
    let descriptor = c.take(dlen)?.to_vec();
    let count = c.u32()? as usize;
    let width = precision.tag() as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| fmt_err("tensor name is not UTF-8"))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = c.u32()? as usize;
        }
        let shape = Shape(dims);
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fmt_err("tensor shape overflows"))?;
        let raw = c.take(n.checked_mul(width).ok_or_else(|| fmt_err("tensor shape overflows"))?)?;
        let data: Vec<T> = match precision {
            Precision::F32 => raw.chunks(4).map(|b| T::from_f64(f32::read_le(b).to_f64())).collect(),
            Precision::F64 => raw.chunks(8).map(|b| T::from_f64(f64::read_le(b))).collect(),
        };
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    if c.pos != body.len() {
        return Err(fmt_err("trailing bytes after the last tensor"));
    }
    Ok(Container {
        kind,
        precision,
        descriptor,
        tensors,
        hash,
    })
}

fn expect_kind<T>(c: &Container<T>, kind: ModelKind) -> Result<()> {
    if c.kind != kind {
        return Err(fmt_err(format!("expected a {kind:?} model file, found {:?}", c.kind)));
    }
    Ok(())
}

fn model_err(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Format(format!("model file does not fit its architecture: {m}")),
        other => other,
    }
}

pub fn codec_to_bytes<T: Scalar>(codec: &Codec<T>) -> Vec<u8> {
    let d = serde_json::to_vec(&CodecDescriptor {
        architecture: *codec.arch(),
    })
    .expect("descriptor serializes");
    serialize(ModelKind::Codec, &d, codec.params().names(), codec.params().tensors())
}

/// Loads a codec, converting parameters to `T`, and returns it with its hash.
pub fn codec_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Codec<T>, ModelHash)> {
    let c = parse::<T>(bytes)?;
    expect_kind(&c, ModelKind::Codec)?;
    let d: CodecDescriptor =
        serde_json::from_slice(&c.descriptor).map_err(|e| fmt_err(format!("bad codec descriptor: {e}")))?;
    let codec = Codec::from_named(d.architecture, c.tensors).map_err(model_err)?;
    Ok((codec, c.hash))
}

pub fn entropy_to_bytes<T: Scalar>(model: &EntropyModel<T>) -> Vec<u8> {
    let d = serde_json::to_vec(&EntropyDescriptor {
        architecture: *model.arch(),
        codec_hash: hash_hex(&model.codec_hash()),
    })
    .expect("descriptor serializes");
    serialize(ModelKind::Entropy, &d, model.params().names(), model.params().tensors())
}

pub fn entropy_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(EntropyModel<T>, ModelHash)> {
    let c = parse::<T>(bytes)?;
    expect_kind(&c, ModelKind::Entropy)?;
    let d: EntropyDescriptor =
        serde_json::from_slice(&c.descriptor).map_err(|e| fmt_err(format!("bad entropy descriptor: {e}")))?;
    let codec_hash = parse_hex(&d.codec_hash).ok_or_else(|| fmt_err("entropy model lacks a valid codec hash"))?;
    let model = EntropyModel::from_named(d.architecture, codec_hash, c.tensors).map_err(model_err)?;
    Ok((model, c.hash))
}

/// Writes `bytes` to `path` and returns the model hash they carry.
pub fn write_model(path: &Path, bytes: &[u8]) -> Result<ModelHash> {
    std::fs::write(path, bytes)?;
    let mut h = [0; HASH_LEN];
    h.copy_from_slice(&bytes[bytes.len() - HASH_LEN..]);
    Ok(h)
}

pub fn read_model(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Format(format!("cannot read model file {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::codec::Mode;

    fn codec() -> Codec<f32> {
        Codec::new(Architecture::desk(CellKind::Gru, Mode::ResidualScaled), 4).unwrap()
    }

    #[test]
    fn codec_round_trip() {
        let c = codec();
        let bytes = codec_to_bytes(&c);
        let (back, hash) = codec_from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back.arch(), c.arch());
        assert_eq!(back.params().tensors(), c.params().tensors());
        assert_eq!(&bytes[bytes.len() - HASH_LEN..], &hash);
        assert_eq!(codec_to_bytes(&back), bytes);
    }

    #[test]
    fn precision_conversion() {
        let c = codec();
        let (wide, _) = codec_from_bytes::<f64>(&codec_to_bytes(&c)).unwrap();
        let bytes64 = codec_to_bytes(&wide);
        assert_eq!(bytes64[MAGIC.len() + 1], 8);
        let (narrow, _) = codec_from_bytes::<f32>(&bytes64).unwrap();
        assert_eq!(narrow.params().tensors(), c.params().tensors());
    }

    #[test]
    fn entropy_round_trip_keeps_binding() {
        let m = EntropyModel::<f32>::new(EntropyArchitecture::desk(), [9; 16], 2).unwrap();
        let (back, _) = entropy_from_bytes::<f32>(&entropy_to_bytes(&m)).unwrap();
        assert_eq!(back.codec_hash(), [9; 16]);
        assert_eq!(back.params().tensors(), m.params().tensors());
    }

    #[test]
    fn corruption_is_a_format_error() {
        let mut bytes = codec_to_bytes(&codec());
        bytes[40] ^= 1;
        assert!(matches!(codec_from_bytes::<f32>(&bytes), Err(Error::Format(_))));
        assert!(matches!(codec_from_bytes::<f32>(b"RNICMODL"), Err(Error::Format(_))));
        let m = EntropyModel::<f32>::new(EntropyArchitecture::desk(), [9; 16], 2).unwrap();
        assert!(matches!(
            codec_from_bytes::<f32>(&entropy_to_bytes(&m)),
            Err(Error::Format(_))
        ));
    }
}
