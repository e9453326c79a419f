//! Arithmetic coding of code tensors under the learned model.
//!
//! Each iteration is coded as an independent segment, so a stream cut at any
//! segment boundary still decodes the iterations before the cut.

use crate::codes::CodeTensor;
use crate::error::{config_err, Error, Result};
use crate::tensor::Scalar;

use super::arith::{quantize, Decoder, Encoder};
use super::eval::Progressive;
use super::EntropyModel;

/// Codes all iterations of one image; returns one byte segment per iteration.
pub fn encode_codes<T: Scalar>(
    model: &EntropyModel<T>,
    codec_hash: &[u8; 16],
    codes: &[CodeTensor],
) -> Result<Vec<Vec<u8>>> {
    model.check_binding(codec_hash)?;
    let Some(first) = codes.first() else {
        return Ok(Vec::new());
    };
    let (h, w, d) = (first.height(), first.width(), model.arch().code_depth);
    let mut progressive = Progressive::new(model, h, w)?;
    let mut segments = Vec::with_capacity(codes.len());
    let mut probs = vec![0.0; d];
    for c in codes {
        if (c.height(), c.width(), c.depth()) != (h, w, d) {
            return Err(config_err!(
                "code tensor {:?} does not match {h}×{w}×{d}",
                c.shape()
            ));
        }
        let mut ev = progressive.begin_iteration()?;
        let mut enc = Encoder::new();
        for y in 0..h {
            for x in 0..w {
                ev.probabilities(c, y, x, &mut probs);
                for (di, &p) in probs.iter().enumerate() {
                    enc.encode(c.get(y, x, di), quantize(p));
                }
            }
        }
        segments.push(enc.finish());
        progressive.end_iteration(c)?;
    }
    Ok(segments)
}

/// Inverse of [`encode_codes`] for an `height × width` code grid. Decodes as
/// many iterations as segments are given.
pub fn decode_codes<T: Scalar, S: AsRef<[u8]>>(
    model: &EntropyModel<T>,
    codec_hash: &[u8; 16],
    segments: &[S],
    height: usize,
    width: usize,
) -> Result<Vec<CodeTensor>> {
    model.check_binding(codec_hash)?;
    let d = model.arch().code_depth;
    let mut progressive = Progressive::new(model, height, width)?;
    let mut out = Vec::with_capacity(segments.len());
    let mut probs = vec![0.0; d];
    for (t, seg) in segments.iter().enumerate() {
        let seg = seg.as_ref();
        let mut codes = CodeTensor::zeros(height, width, d, t + 1);
        let mut ev = progressive.begin_iteration()?;
        let mut dec = Decoder::new(seg)?;
        for y in 0..height {
            for x in 0..width {
                ev.probabilities(&codes, y, x, &mut probs);
                for (di, &p) in probs.iter().enumerate() {
                    let bit = dec.decode(quantize(p))?;
                    codes.set(y, x, di, bit);
                }
            }
        }
        if dec.position() != seg.len() {
            return Err(Error::Decode(format!(
                "iteration {} segment has {} trailing bytes",
                t + 1,
                seg.len() - dec.position()
            )));
        }
        progressive.end_iteration(&codes)?;
        out.push(codes);
    }
    Ok(out)
}
