//! Structure- and color-transfer metrics.
//!
//! Content fidelity is measured by comparing patch self-similarity: each
//! image is reduced to mean-subtracted, L2-normalized 8×8 luma patches,
//! the patch-to-patch similarity matrix is turned into per-row softmax
//! distributions, and the two images' distributions are compared row-wise
//! with KL divergence. Color transfer is measured in log-chroma space:
//! intensity-weighted (u, v) histograms per primary channel, compared with
//! the Hellinger distance. All accumulation runs in f64 so results are
//! independent of threading and stable across platforms.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Edge length and stride of the square luma patches used for features.
pub const PATCH: usize = 8;
/// Default number of histogram bins per log-chroma axis.
pub const DEFAULT_BINS: usize = 64;
/// Log-chroma values are accumulated over [−LOG_CHROMA_RANGE, +LOG_CHROMA_RANGE].
pub const LOG_CHROMA_RANGE: f64 = 3.0;
/// Falloff of the inverse-quadratic binning kernel, in log-chroma units.
pub const KERNEL_FALLOFF: f64 = 0.02;
const CHROMA_EPS: f64 = 1e-6;

/// Patch features: one row per extraction position, `[hw, PATCH²]`.
pub struct FeatureMap {
    pub f: Tensor,
}

/// Row-stochastic patch-similarity map, `[hw, hw]`.
pub struct CorrelationMap {
    pub s: Tensor,
}

/// Intensity-weighted log-chroma histogram, `[3, B, B]`, normalized to
/// total mass 1. Plane `c` holds the (u, v) distribution of primary `c`
/// against the other two channels.
pub struct RgbUvHistogram {
    pub h: Tensor,
}

fn check_rgb_image(image: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!(
            "{what} expects a [3,h,w] image, got {s:?}"
        )));
    }
    Ok((s[1], s[2]))
}

/// Rec. 601 luma of an interleaved-plane RGB image, `[h, w]` as a flat vec.
fn luma(image: &Tensor) -> Vec<f32> {
    let plane = image.shape()[1] * image.shape()[2];
    let d = image.data();
    (0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect()
}

/// Extracts non-overlapping 8×8 luma patches (stride 8), flattens each
/// row-major, subtracts the patch mean, and L2-normalizes. Constant
/// patches become zero rows. For a 64×64 image this yields `[64, 64]`.
pub fn extract_patch_features(image: &Tensor) -> Result<FeatureMap> {
    let (h, w) = check_rgb_image(image, "feature extraction")?;
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::Shape(format!(
            "image sides must be multiples of {PATCH}, got {h}x{w}"
        )));
    }
    let y = luma(image);
    let (gh, gw) = (h / PATCH, w / PATCH);
    let c = PATCH * PATCH;
    let mut rows = vec![0.0f32; gh * gw * c];
    for py in 0..gh {
        for px in 0..gw {
            let row = &mut rows[(py * gw + px) * c..(py * gw + px + 1) * c];
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    row[dy * PATCH + dx] = y[(py * PATCH + dy) * w + (px * PATCH + dx)];
                }
            }
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let mut sumsq = 0.0f64;
            for v in row.iter_mut() {
                let centered = *v as f64 - mean;
                *v = centered as f32;
                sumsq += centered * centered;
            }
            let norm = sumsq.sqrt();
            if norm > 1e-12 {
                let inv = (1.0 / norm) as f32;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            } else {
                row.fill(0.0);
            }
        }
    }
    Ok(FeatureMap {
        f: Tensor::new(vec![gh * gw, c], rows)?,
    })
}

/// Patch-similarity distributions: `S_i = softmax((F·Fᵀ)_i)`.
pub fn correlation_map(features: &FeatureMap) -> Result<CorrelationMap> {
    let ft = features.f.transpose2d()?;
    let m = features.f.matmul(&ft)?;
    Ok(CorrelationMap {
        s: m.softmax_rows()?,
    })
}

/// Mean row-wise KL divergence between two correlation maps, f64.
fn cfsd_from_maps(s_content: &CorrelationMap, s_stylized: &CorrelationMap) -> Result<f64> {
    let (p, q) = (&s_content.s, &s_stylized.s);
    if p.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "correlation maps disagree: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let hw = p.shape()[0];
    let mut total = 0.0f64;
    for (prow, qrow) in p.data().chunks(hw).zip(q.data().chunks(hw)) {
        let mut kl = 0.0f64;
        for (&pj, &qj) in prow.iter().zip(qrow) {
            // Softmax outputs are strictly positive, so the logs are finite.
            let (pj, qj) = (pj as f64, qj as f64);
            kl += pj * (pj.ln() - qj.ln());
        }
        total += kl;
    }
    Ok(total / hw as f64)
}

/// Content-fidelity structure distance: mean KL divergence between the
/// patch self-similarity distributions of the two images. Zero iff the
/// correlation maps coincide; not symmetric (KL is directional).
pub fn cfsd(content_image: &Tensor, stylized_image: &Tensor) -> Result<f64> {
    if content_image.shape() != stylized_image.shape() {
        return Err(Error::Shape(format!(
            "structure distance needs equal resolutions: {:?} vs {:?}",
            content_image.shape(),
            stylized_image.shape()
        )));
    }
    let s_c = correlation_map(&extract_patch_features(content_image)?)?;
    let s_cs = correlation_map(&extract_patch_features(stylized_image)?)?;
    cfsd_from_maps(&s_c, &s_cs)
}

/// Log-chroma coordinates of one pixel for primary `c` against the other
/// two channels, plus its intensity weight.
fn pixel_chroma(r: f64, g: f64, b: f64) -> ([(f64, f64); 3], f64) {
    let lr = (r + CHROMA_EPS).ln();
    let lg = (g + CHROMA_EPS).ln();
    let lb = (b + CHROMA_EPS).ln();
    let coords = [(lr - lg, lr - lb), (lg - lr, lg - lb), (lb - lr, lb - lg)];
    (coords, (r * r + g * g + b * b).sqrt())
}

fn bin_centers(bins: usize) -> Vec<f64> {
    let width = 2.0 * LOG_CHROMA_RANGE / bins as f64;
    (0..bins)
        .map(|j| -LOG_CHROMA_RANGE + (j as f64 + 0.5) * width)
        .collect()
}

/// Intensity-weighted RGB-uv histogram with an inverse-quadratic kernel:
/// every pixel spreads its weight over the (u, v) grid with falloff
/// `KERNEL_FALLOFF`, and the result is normalized to total mass 1. An
/// all-black image has zero weight everywhere; the histogram is then
/// defined as uniform and a warning is printed.
pub fn rgb_uv_histogram(image: &Tensor, bins: usize) -> Result<RgbUvHistogram> {
    let (h, w) = check_rgb_image(image, "color histogram")?;
    if bins == 0 {
        return Err(Error::Range("histogram needs at least one bin".into()));
    }
    if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Range(
            "color histogram expects an image in [0,1]".into(),
        ));
    }
    let plane = h * w;
    let d = image.data();
    let centers = bin_centers(bins);
    let mut acc = vec![0.0f64; 3 * bins * bins];
    let mut ku = vec![0.0f64; bins];
    let mut kv = vec![0.0f64; bins];
    for i in 0..plane {
        let (coords, weight) =
            pixel_chroma(d[i] as f64, d[plane + i] as f64, d[2 * plane + i] as f64);
        if weight == 0.0 {
            continue;
        }
        for (c, &(u, v)) in coords.iter().enumerate() {
            for (j, &center) in centers.iter().enumerate() {
                let du = (u - center) / KERNEL_FALLOFF;
                let dv = (v - center) / KERNEL_FALLOFF;
                ku[j] = 1.0 / (1.0 + du * du);
                kv[j] = 1.0 / (1.0 + dv * dv);
            }
            let plane_acc = &mut acc[c * bins * bins..(c + 1) * bins * bins];
            for (j, &kuj) in ku.iter().enumerate() {
                let wj = weight * kuj;
                let row = &mut plane_acc[j * bins..(j + 1) * bins];
                for (cell, &kvk) in row.iter_mut().zip(kv.iter()) {
                    *cell += wj * kvk;
                }
            }
        }
    }
    let total: f64 = acc.iter().sum();
    let data: Vec<f32> = if total > 0.0 {
        acc.iter().map(|&v| (v / total) as f32).collect()
    } else {
        eprintln!("warning: all-black image has no chroma weight; using a uniform histogram");
        vec![1.0 / (3 * bins * bins) as f32; 3 * bins * bins]
    };
    Ok(RgbUvHistogram {
        h: Tensor::new(vec![3, bins, bins], data)?,
    })
}

fn check_normalized(hist: &RgbUvHistogram, what: &str) -> Result<()> {
    let sum: f64 = hist.h.data().iter().map(|&v| v as f64).sum();
    if hist.h.data().iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-3 {
        return Err(Error::Normalization(format!(
            "{what} histogram is not a distribution (sum {sum:.6})"
        )));
    }
    Ok(())
}

/// Hellinger distance between two normalized histograms:
/// `(1/√2)·‖√H₁ − √H₂‖₂`, in [0, 1]; 0 iff equal, 1 iff disjoint supports.
pub fn histogram_loss(h_stylized: &RgbUvHistogram, h_style: &RgbUvHistogram) -> Result<f64> {
    if h_stylized.h.shape() != h_style.h.shape() {
        return Err(Error::Shape(format!(
            "histogram shapes disagree: {:?} vs {:?}",
            h_stylized.h.shape(),
            h_style.h.shape()
        )));
    }
    check_normalized(h_stylized, "first")?;
    check_normalized(h_style, "second")?;
    let mut sumsq = 0.0f64;
    for (&a, &b) in h_stylized.h.data().iter().zip(h_style.h.data()) {
        let diff = (a as f64).sqrt() - (b as f64).sqrt();
        sumsq += diff * diff;
    }
    Ok((0.5 * sumsq).sqrt())
}

/// Peak signal-to-noise ratio in dB for signals with peak 1 (images in
/// [0,1] or reconstructions compared in the same range). Identical inputs
/// give +∞.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "psnr needs equal shapes: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut se = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        se += d * d;
    }
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}
