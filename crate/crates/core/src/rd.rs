//! Rate-distortion curves, area under the curve and CSV export.

use std::io::Write;

use serde::Serialize;

use crate::error::{config_err, Error, Result};
use crate::metrics::PSNR_CAP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Msssim,
    Psnr,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Msssim => "msssim",
            Metric::Psnr => "psnr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

/// Quality above the lowest available rate, integrated with the trapezoid
/// rule up to `max_bpp` (linearly interpolated there) or to the last point,
/// whichever comes first. No extrapolation below the first point.
pub fn auc(points: &[RdPoint], max_bpp: f64) -> Result<f64> {
    if points.len() < 2 {
        return Err(config_err!("AUC needs at least two points, got {}", points.len()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    if pts[0].bpp > max_bpp {
        return Err(config_err!("every point lies above {max_bpp} bpp"));
    }
    let mut area = 0.0;
    for pair in pts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.bpp >= max_bpp {
            break;
        }
        let (x1, q1) = if b.bpp > max_bpp {
            let t = (max_bpp - a.bpp) / (b.bpp - a.bpp);
            (max_bpp, a.quality + t * (b.quality - a.quality))
        } else {
            (b.bpp, b.quality)
        };
        area += 0.5 * (x1 - a.bpp) * (a.quality + q1);
    }
    Ok(area)
}

/// Raw code rate after `iteration` iterations: `iteration / 8` bpp, computed
/// from integer bit counts.
pub fn raw_bpp(iteration: usize, height: usize, width: usize, code_depth: usize) -> f64 {
    let bits = iteration * (height / 16) * (width / 16) * code_depth;
    bits as f64 / (height * width) as f64
}

/// One CSV row: a metric aggregated over an image set after one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RdRow {
    pub model_id: String,
    pub metric: Metric,
    pub iteration: usize,
    pub bpp_raw: f64,
    /// Empty when no entropy model was used.
    pub bpp_coded: Option<f64>,
    pub quality_mean: f64,
    pub quality_std: f64,
    pub n_images: usize,
}

impl RdRow {
    pub fn raw_point(&self) -> RdPoint {
        RdPoint {
            bpp: self.bpp_raw,
            quality: self.quality_mean,
        }
    }

    pub fn coded_point(&self) -> Option<RdPoint> {
        self.bpp_coded.map(|bpp| RdPoint {
            bpp,
            quality: self.quality_mean,
        })
    }
}

/// Mean and population standard deviation; infinite PSNR values count as the cap.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let v: Vec<f64> = values.iter().map(|&x| x.min(PSNR_CAP)).collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn write_csv<W: Write>(rows: &[RdRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
