use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rnic_core::bitstream::{self, EntropyRef, HEADER_LEN};
use rnic_core::container;
use rnic_core::image::RgbImage;
use rnic_core::synthetic;
use tempfile::TempDir;

fn rnic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnic"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("running rnic")
}

fn status(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("UTF-8 temp path")
}

/// A codec and entropy model trained for a handful of steps, plus an image.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        synthetic::scene(128, 96, 3).write_png(&dir.path().join("images/a.png")).unwrap();
        synthetic::scene(64, 64, 4).write_png(&dir.path().join("images/b.png")).unwrap();
        let f = Fixture { dir };
        let out = rnic(&[
            "train",
            "--data",
            path(&f.at("images")),
            "--out",
            path(&f.at("codec.rnic")),
            "--cell",
            "gru",
            "--steps",
            "2",
            "--batch-size",
            "2",
            "--iterations",
            "2",
        ]);
        assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let out = rnic(&[
            "entropy-train",
            "--model",
            path(&f.at("codec.rnic")),
            "--data",
            path(&f.at("images")),
            "--out",
            path(&f.at("entropy.rnic")),
            "--iterations",
            "2",
            "--steps",
            "2",
            "--crop",
            "4",
        ]);
        assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn at(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn round_trip_matches_the_library() {
    let f = Fixture::new();
    let input = f.at("images/a.png");
    let model = f.at("codec.rnic");
    for (name, entropy) in [("raw", false), ("coded", true)] {
        let stream = f.at(&format!("{name}.bin"));
        let mut args = vec!["compress", path(&input), "--model", path(&model), "--iterations", "3"];
        let entropy_path = f.at("entropy.rnic");
        if entropy {
            args.extend(["--entropy-model", path(&entropy_path)]);
        }
        args.extend(["--out", path(&stream)]);
        assert_eq!(status(&rnic(&args)), 0);
        let first = std::fs::read(&stream).unwrap();
        assert_eq!(status(&rnic(&args)), 0);
        assert_eq!(std::fs::read(&stream).unwrap(), first, "compression is deterministic");
        if !entropy {
            assert_eq!(first.len(), HEADER_LEN + 3 * (96 / 16) * (128 / 16) * 32 / 8);
        }

        let decoded = f.at(&format!("{name}.png"));
        let mut args = vec!["decompress", path(&stream), "--model", path(&model)];
        if entropy {
            args.extend(["--entropy-model", path(&entropy_path)]);
        }
        args.extend(["--out", path(&decoded)]);
        assert_eq!(status(&rnic(&args)), 0);

        let (codec, hash) = container::codec_from_bytes::<f32>(&std::fs::read(f.at("codec.rnic")).unwrap()).unwrap();
        let em = container::entropy_from_bytes::<f32>(&std::fs::read(&entropy_path).unwrap()).unwrap();
        let eref = entropy.then_some(EntropyRef { model: &em.0, hash: em.1 });
        let img = RgbImage::read_png(&input).unwrap();
        assert_eq!(bitstream::compress(&img, &codec, &hash, 3, eref).unwrap(), first);
        let expected = bitstream::decompress(&first, &codec, &hash, eref, None).unwrap();
        assert_eq!(RgbImage::read_png(&decoded).unwrap(), expected);
    }
}

#[test]
fn eval_and_rd_curve_write_csv() {
    let f = Fixture::new();
    let out = rnic(&[
        "eval",
        "--model",
        path(&f.at("codec.rnic")),
        "--entropy-model",
        path(&f.at("entropy.rnic")),
        "--data",
        path(&f.at("images")),
        "--iterations",
        "2",
    ]);
    assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "image,iteration,bpp_raw,bpp_coded,msssim,psnr");
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[1].starts_with("\"a.png\",1,0.125,"));
    assert!(lines[4].starts_with("\"b.png\",2,0.25,"));

    let csv = f.at("rd.csv");
    let out = rnic(&[
        "rd-curve",
        "--model",
        path(&f.at("codec.rnic")),
        "--data",
        path(&f.at("images")),
        "--iterations",
        "3",
        "--out",
        path(&csv),
    ]);
    assert_eq!(status(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("msssim AUC (raw)"));
    let rows = std::fs::read_to_string(&csv).unwrap();
    // Header plus one row per metric and iteration.
    assert_eq!(rows.lines().count(), 1 + 2 * 3);
    assert!(rows.lines().skip(1).all(|l| l.starts_with("codec,")));
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    let model = f.at("codec.rnic");
    let entropy = f.at("entropy.rnic");
    let stream = f.at("s.bin");
    let compress = |input: &Path, entropy: Option<&Path>| {
        let mut args = vec!["compress", path(input), "--model", path(&model), "--iterations", "2"];
        if let Some(e) = entropy {
            args.extend(["--entropy-model", path(e)]);
        }
        args.extend(["--out", path(&stream)]);
        status(&rnic(&args))
    };
    let decompress = |input: &Path| {
        status(&rnic(&["decompress", path(input), "--model", path(&model), "--out", path(&f.at("d.png"))]))
    };

    // Usage: bad flags, missing files, an unknown mode.
    assert_eq!(status(&rnic(&["compress"])), 2);
    assert_eq!(status(&rnic(&["train", "--data", "x", "--out", "y", "--mode", "bogus"])), 2);
    assert_eq!(compress(&f.at("missing.png"), None), 2);
    let rd = rnic(&["rd-curve", "--model", path(&model), "--data", path(&f.at("images")), "--max-bpp", "-1"]);
    assert_eq!(status(&rd), 2);

    // Format: a truncated or foreign bitstream.
    assert_eq!(compress(&f.at("images/a.png"), None), 0);
    let bytes = std::fs::read(&stream).unwrap();
    let cut = f.at("cut.bin");
    std::fs::write(&cut, &bytes[..HEADER_LEN - 3]).unwrap();
    assert_eq!(decompress(&cut), 3);
    let junk = f.at("junk.bin");
    std::fs::write(&junk, b"definitely not a bitstream, but long enough to fill a header").unwrap();
    assert_eq!(decompress(&junk), 3);

    // Model mismatch: a second codec that neither the stream nor the entropy model belongs to.
    let other = f.at("other.rnic");
    let out = rnic(&[
        "train",
        "--data",
        path(&f.at("images")),
        "--out",
        path(&other),
        "--seed",
        "1",
        "--steps",
        "1",
        "--batch-size",
        "1",
        "--iterations",
        "1",
    ]);
    assert_eq!(status(&out), 0);
    let with_other = rnic(&["decompress", path(&stream), "--model", path(&other), "--out", path(&f.at("d.png"))]);
    assert_eq!(status(&with_other), 4);
    let bound_elsewhere = rnic(&[
        "compress",
        path(&f.at("images/a.png")),
        "--model",
        path(&other),
        "--entropy-model",
        path(&entropy),
        "--out",
        path(&stream),
    ]);
    assert_eq!(status(&bound_elsewhere), 4);
}
