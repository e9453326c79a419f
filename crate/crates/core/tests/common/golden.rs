//! The frozen golden bitstream fixture: a tiny codec and entropy model, one
//! input image, the bitstreams they produce and SHA-256 digests of the
//! decoded pixels.

use std::fs;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use rnic_core::bitstream::{self, EntropyRef};
use rnic_core::cells::CellKind;
use rnic_core::codec::{Architecture, Codec, Mode};
use rnic_core::container;
use rnic_core::entropy::{EntropyArchitecture, EntropyModel};
use rnic_core::image::RgbImage;
use rnic_core::synthetic;

pub const ITERATIONS: usize = 3;

pub fn dir() -> PathBuf {
    super::fixtures().join("golden")
}

pub fn tiny_arch() -> Architecture {
    Architecture {
        cell: CellKind::Gru,
        mode: Mode::ResidualScaled,
        encoder_conv: 4,
        encoder_rnn: [8, 8, 8],
        code_depth: 32,
        decoder_conv: 8,
        decoder_rnn: [8, 8, 8, 8],
        gain_depth: 2,
        iterations: ITERATIONS,
    }
}

pub fn pixel_digest(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update((img.width() as u32).to_le_bytes());
    h.update((img.height() as u32).to_le_bytes());
    h.update(img.data());
    hex::encode(h.finalize())
}

/// Decodes of the stored bitstreams after 1 and after all iterations, raw
/// stream first.
pub fn decoded_digests(raw: &[u8], coded: &[u8]) -> Vec<String> {
    let (codec, ch) = container::codec_from_bytes::<f32>(&fs::read(dir().join("codec.rnic")).unwrap()).unwrap();
    let (em, eh) = container::entropy_from_bytes::<f32>(&fs::read(dir().join("entropy.rnic")).unwrap()).unwrap();
    let e = EntropyRef { model: &em, hash: eh };
    let mut out = Vec::new();
    for j in [Some(1), None] {
        out.push(pixel_digest(&bitstream::decompress(raw, &codec, &ch, None, j).unwrap()));
        out.push(pixel_digest(&bitstream::decompress(coded, &codec, &ch, Some(e), j).unwrap()));
    }
    out
}

/// Rewrites every fixture file from seeds.
pub fn regenerate() {
    let d = dir();
    fs::create_dir_all(&d).unwrap();
    let codec = Codec::<f32>::new(tiny_arch(), 2024).unwrap();
    let codec_bytes = container::codec_to_bytes(&codec);
    let ch = container::write_model(&d.join("codec.rnic"), &codec_bytes).unwrap();
    let arch = EntropyArchitecture {
        code_depth: 32,
        features: 8,
    };
    let em = EntropyModel::<f32>::new(arch, ch, 7).unwrap();
    let eh = container::write_model(&d.join("entropy.rnic"), &container::entropy_to_bytes(&em)).unwrap();
    let input = synthetic::scene(40, 24, 5);
    input.write_png(&d.join("input.png")).unwrap();
    let raw = bitstream::compress(&input, &codec, &ch, ITERATIONS, None).unwrap();
    let coded = bitstream::compress(&input, &codec, &ch, ITERATIONS, Some(EntropyRef { model: &em, hash: eh })).unwrap();
    fs::write(d.join("raw.rnic"), &raw).unwrap();
    fs::write(d.join("coded.rnic"), &coded).unwrap();
    fs::write(d.join("decoded.sha256"), decoded_digests(&raw, &coded).join("\n") + "\n").unwrap();
}

/// Checks the stored fixture against the current build: the seeded codec
/// serializes to the stored bytes, compression reproduces both bitstreams and
/// decoding reproduces the stored pixel digests.
pub fn verify() -> Result<(), String> {
    let d = dir();
    let read = |name: &str| fs::read(d.join(name)).map_err(|e| format!("{name}: {e}"));
    let codec_bytes = read("codec.rnic")?;
    let (codec, ch) = container::codec_from_bytes::<f32>(&codec_bytes).map_err(|e| e.to_string())?;
    let fresh = Codec::<f32>::new(tiny_arch(), 2024).map_err(|e| e.to_string())?;
    if container::codec_to_bytes(&fresh) != codec_bytes {
        return Err("seeded codec no longer serializes to the stored model".into());
    }
    let (em, eh) = container::entropy_from_bytes::<f32>(&read("entropy.rnic")?).map_err(|e| e.to_string())?;
    let input = RgbImage::read_png(&d.join("input.png")).map_err(|e| e.to_string())?;
    let raw = read("raw.rnic")?;
    let coded = read("coded.rnic")?;
    let e = EntropyRef { model: &em, hash: eh };
    for (name, stored, entropy) in [("raw", &raw, None), ("coded", &coded, Some(e))] {
        let again = bitstream::compress(&input, &codec, &ch, ITERATIONS, entropy).map_err(|e| e.to_string())?;
        if &again != stored {
            return Err(format!("{name} bitstream changed"));
        }
    }
    let expected: Vec<String> = String::from_utf8_lossy(&read("decoded.sha256")?)
        .lines()
        .map(str::to_owned)
        .collect();
    if decoded_digests(&raw, &coded) != expected {
        return Err("decoded pixels changed".into());
    }
    Ok(())
}
