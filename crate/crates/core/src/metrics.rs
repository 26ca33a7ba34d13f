//! Two-sample statistics between image sets and the point-to-segment
//! diagnostic on discriminator outputs.
//!
//! Images are compared through a fixed featurization: luminance averaged
//! over a 16 x 16 grid of equal cells, flattened to 256 values.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::substrate::Tensor;
use crate::{Error, Result};

pub const FEATURE_SIDE: usize = 16;

/// Luminance of a `3 x H x W` image averaged over a 16 x 16 grid.
pub fn featurize(image: &Tensor) -> Result<Vec<f64>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Invalid(format!(
            "expected a 3 x H x W image, got {:?}",
            image.shape()
        )));
    };
    if h < FEATURE_SIDE || w < FEATURE_SIDE {
        return Err(Error::Invalid(format!(
            "images must be at least {FEATURE_SIDE}x{FEATURE_SIDE}, got {h}x{w}"
        )));
    }
    let d = image.data();
    let plane = h * w;
    let mut out = Vec::with_capacity(FEATURE_SIDE * FEATURE_SIDE);
    for i in 0..FEATURE_SIDE {
        let (y0, y1) = (i * h / FEATURE_SIDE, (i + 1) * h / FEATURE_SIDE);
        for j in 0..FEATURE_SIDE {
            let (x0, x1) = (j * w / FEATURE_SIDE, (j + 1) * w / FEATURE_SIDE);
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let k = y * w + x;
                    s += 0.299 * d[k] + 0.587 * d[plane + k] + 0.114 * d[2 * plane + k];
                }
            }
            out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    Ok(out)
}

pub fn featurize_all(images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(featurize).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled sets.
    Auto,
    Fixed(f64),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid(
            "two-sample statistics need non-empty sets".into(),
        ));
    }
    let dim = a[0].len();
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(Error::Invalid(format!(
            "feature dimension mismatch: {} vs {dim}",
            v.len()
        )));
    }
    Ok(dim)
}

/// Median of all pairwise distances among distinct elements of `a ++ b`;
/// 1 when that median is 0 or there is only one element.
pub fn median_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let pool: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d = Vec::with_capacity(pool.len() * (pool.len() - 1) / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            d.push(sq_dist(pool[i], pool[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

fn mean_over_pairs(a: &[Vec<f64>], b: &[Vec<f64>], f: impl Fn(f64) -> f64) -> f64 {
    let mut s = 0.0;
    for u in a {
        for v in b {
            s += f(sq_dist(u, v));
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Biased (V-statistic) squared MMD under the Gaussian kernel
/// `exp(-|u - v|^2 / (2 sigma^2))`. Returns the value and the bandwidth used.
pub fn mmd2_with_bandwidth(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    bandwidth: Bandwidth,
) -> Result<(f64, f64)> {
    check_sets(a, b)?;
    let sigma = match bandwidth {
        Bandwidth::Auto => median_distance(a, b)?,
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => {
            return Err(Error::Invalid(format!(
                "bandwidth must be positive, got {s}"
            )))
        }
    };
    let k = |d2: f64| (-d2 / (2.0 * sigma * sigma)).exp();
    let v = mean_over_pairs(a, a, k) + mean_over_pairs(b, b, k) - 2.0 * mean_over_pairs(a, b, k);
    Ok((v.max(0.0), sigma))
}

pub fn mmd2(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Bandwidth) -> Result<f64> {
    Ok(mmd2_with_bandwidth(a, b, bandwidth)?.0)
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` over all ordered pairs, clamped at 0.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let v = 2.0 * mean_over_pairs(a, b, f64::sqrt)
        - mean_over_pairs(a, a, f64::sqrt)
        - mean_over_pairs(b, b, f64::sqrt);
    Ok(v.max(0.0))
}

/// Distance from `dz` to the closed segment `[dx, dy]`, divided by
/// `sqrt(len)`.
pub fn point_to_segment(dx: &[f64], dy: &[f64], dz: &[f64]) -> Result<f64> {
    if dx.len() != dy.len() || dx.len() != dz.len() || dx.is_empty() {
        return Err(Error::Invalid(format!(
            "point_to_segment needs equal non-empty maps, got {}, {}, {}",
            dx.len(),
            dy.len(),
            dz.len()
        )));
    }
    let seg2 = sq_dist(dx, dy);
    let t = if seg2 > 0.0 {
        let dot: f64 = dx
            .iter()
            .zip(dy)
            .zip(dz)
            .map(|((x, y), z)| (z - x) * (y - x))
            .sum();
        (dot / seg2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d2: f64 = dx
        .iter()
        .zip(dy)
        .zip(dz)
        .map(|((x, y), z)| {
            let p = x + t * (y - x);
            (z - p) * (z - p)
        })
        .sum();
    Ok(d2.sqrt() / (dx.len() as f64).sqrt())
}

/// Discriminator maps of one (clear, rainy, generated) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct MapTriple {
    pub clear: Vec<f64>,
    pub rainy: Vec<f64>,
    pub generated: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    /// Generated vs rainy.
    pub mmd2: f64,
    pub energy_distance: f64,
    /// Clear vs rainy, under the same bandwidth.
    pub baseline_mmd2: f64,
    pub baseline_energy_distance: f64,
    pub mean_segment_distance: f64,
    pub clear_count: usize,
    pub rainy_count: usize,
    pub generated_count: usize,
    pub triple_count: usize,
    pub bandwidth: f64,
}

impl DomainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Compare generated images against the rainy set, with the clear set as
/// the untranslated baseline. The kernel bandwidth is the median distance
/// over clear and rainy features and is shared by both comparisons.
pub fn domain_report(
    clear: &[Tensor],
    rainy: &[Tensor],
    generated: &[Tensor],
    maps: &[MapTriple],
) -> Result<DomainReport> {
    let (fc, fr, fg) = (
        featurize_all(clear)?,
        featurize_all(rainy)?,
        featurize_all(generated)?,
    );
    let sigma = median_distance(&fc, &fr)?;
    let bw = Bandwidth::Fixed(sigma);
    let segments = maps
        .iter()
        .map(|m| point_to_segment(&m.clear, &m.rainy, &m.generated))
        .collect::<Result<Vec<_>>>()?;
    let mean_segment_distance = if segments.is_empty() {
        0.0
    } else {
        segments.iter().sum::<f64>() / segments.len() as f64
    };
    Ok(DomainReport {
        mmd2: mmd2(&fg, &fr, bw)?,
        energy_distance: energy_distance(&fg, &fr)?,
        baseline_mmd2: mmd2(&fc, &fr, bw)?,
        baseline_energy_distance: energy_distance(&fc, &fr)?,
        mean_segment_distance,
        clear_count: clear.len(),
        rainy_count: rainy.len(),
        generated_count: generated.len(),
        triple_count: maps.len(),
        bandwidth: sigma,
    })
}

/// Append one JSON object as a line.
pub fn append_record<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Parse every non-empty line of `path` as `T`.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
