//! Diagnostics: PSNR, 8-bit quantization, the effective-receptive-field
//! probe, and example-image statistics (patch entropy, patch NCC).

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// PSNR values are capped here so that identical images do not report +inf.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB: `20 log10(max_val / rmse)`.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("numel", a.shape().numel(), b.shape().numel(), format!("psnr of {} vs {}", a.shape(), b.shape())));
    }
    let mut se = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        se += d * d;
    }
    let mse = se / a.shape().numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (max_val / mse.sqrt()).log10()).min(PSNR_CAP_DB))
}

/// Clamps to [0, 1] and snaps every value to the 8-bit grid `round(v*255)/255`
/// (round half away from zero). Idempotent.
pub fn quantize_8bit(image: &Tensor) -> Tensor {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Per-pixel response magnitudes of the center-pixel perturbation probe.
#[derive(Clone, Debug)]
pub struct ErfMap {
    /// Mean absolute output difference per pixel (channel-averaged), h x w.
    pub values: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub probe_row: usize,
    pub probe_col: usize,
    pub delta: f64,
    pub n_images: usize,
}

/// Measures the effective receptive field of `f`: for each image, the center
/// pixel (all channels) is perturbed by `+delta` (then clamped to [0, 1]) and
/// the per-pixel channel-mean absolute output difference is averaged over
/// images.
pub fn erf_probe_fn<F>(mut f: F, images: &[Tensor], delta: f64) -> Result<ErfMap>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if images.is_empty() {
        return Err(Error::invalid("erf_probe needs at least one image"));
    }
    if delta <= 0.0 {
        return Err(Error::invalid(format!("erf_probe delta must be positive, got {delta}")));
    }
    let shape = images[0].shape();
    let (h, w) = (shape.h, shape.w);
    let (row, col) = (h / 2, w / 2);
    let mut acc = vec![0.0; h * w];
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape("height", shape.h, img.shape().h, "erf_probe images must share one shape"));
        }
        let base = f(img)?;
        let mut perturbed = img.clone();
        for c in 0..shape.c {
            let v = perturbed.at(0, c, row, col);
            *perturbed.at_mut(0, c, row, col) = (v + delta).clamp(0.0, 1.0);
        }
        let probed = f(&perturbed)?;
        if base.shape() != probed.shape() {
            return Err(Error::shape("numel", base.shape().numel(), probed.shape().numel(), "erf_probe model output"));
        }
        let oc = base.shape().c;
        for y in 0..h.min(base.shape().h) {
            for x in 0..w.min(base.shape().w) {
                let mut d = 0.0;
                for c in 0..oc {
                    d += (probed.at(0, c, y, x) - base.at(0, c, y, x)).abs();
                }
                acc[y * w + x] += d / oc as f64;
            }
        }
    }
    let n = images.len();
    acc.iter_mut().for_each(|v| *v /= n as f64);
    Ok(ErfMap { values: acc, h, w, probe_row: row, probe_col: col, delta, n_images: n })
}

/// [`erf_probe_fn`] specialized to a built model.
pub fn erf_probe(model: &Model, images: &[Tensor], delta: f64) -> Result<ErfMap> {
    erf_probe_fn(|x| model.apply(x), images, delta)
}

/// Bounding-box size (height, width) of the pixels whose response is at
/// least `rel_threshold * max(map)`. All-zero maps give (0, 0).
pub fn erf_support(map: &ErfMap, rel_threshold: f64) -> Result<(usize, usize)> {
    if rel_threshold <= 0.0 || rel_threshold >= 1.0 {
        return Err(Error::invalid(format!("rel_threshold must be in (0, 1), got {rel_threshold}")));
    }
    let max = map.values.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok((0, 0));
    }
    let thr = rel_threshold * max;
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..map.h {
        for x in 0..map.w {
            if map.values[y * map.w + x] >= thr {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        return Ok((0, 0));
    }
    Ok((y1 - y0 + 1, x1 - x0 + 1))
}

impl ErfMap {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// 16-bit PGM rendering on a log scale with floor 1e-8.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        const FLOOR: f64 = 1e-8;
        let lo = FLOOR.log10();
        let hi = self.max().max(FLOOR * 10.0).log10();
        let span = hi - lo;
        let mut buf = Vec::with_capacity(self.values.len() * 2 + 32);
        buf.extend_from_slice(format!("P5\n{} {}\n65535\n", self.w, self.h).as_bytes());
        for &v in &self.values {
            let t = ((v.max(FLOOR).log10() - lo) / span).clamp(0.0, 1.0);
            let g = (t * 65535.0).round() as u16;
            buf.extend_from_slice(&g.to_be_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Raw values as CSV, one image row per line.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for y in 0..self.h {
            let row: Vec<String> = (0..self.w).map(|x| format!("{:e}", self.values[y * self.w + x])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Patch-statistics score of a candidate example image.
#[derive(Clone, Debug, Serialize)]
pub struct ExampleScore {
    pub image_id: String,
    pub patch_size: usize,
    /// Mean over patches of the Shannon entropy (bits) of the 256-bin
    /// histogram of 8-bit grayscale patch values.
    pub entropy_bits: f64,
    /// Mean pairwise normalized cross-correlation between patches
    /// (upper-triangular mean; zero-variance patches correlate 0).
    pub mean_ncc: f64,
}

/// Rec. 601 luma weights used for all grayscale conversions.
pub fn to_gray(image: &Tensor) -> Vec<f64> {
    let s = image.shape();
    let hw = s.hw();
    match s.c {
        3 => {
            let (r, g, b) = (image.plane(0, 0), image.plane(0, 1), image.plane(0, 2));
            (0..hw).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect()
        }
        _ => image.plane(0, 0).to_vec(),
    }
}

/// Tiles the image into non-overlapping `patch_size` squares (trailing
/// partial patches dropped) and scores entropy and self-similarity.
pub fn example_score(image: &Tensor, patch_size: usize, image_id: impl Into<String>) -> Result<ExampleScore> {
    if patch_size <= 1 {
        return Err(Error::invalid(format!("patch_size must be > 1, got {patch_size}")));
    }
    let s = image.shape();
    if s.h < patch_size || s.w < patch_size {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than patch_size {patch_size}",
            s.h, s.w
        )));
    }
    let gray = to_gray(image);
    let (ph, pw) = (s.h / patch_size, s.w / patch_size);
    let mut patches: Vec<Vec<f64>> = Vec::with_capacity(ph * pw);
    for py in 0..ph {
        for px in 0..pw {
            let mut patch = Vec::with_capacity(patch_size * patch_size);
            for y in 0..patch_size {
                let row = (py * patch_size + y) * s.w + px * patch_size;
                patch.extend_from_slice(&gray[row..row + patch_size]);
            }
            patches.push(patch);
        }
    }

    let mut entropy_sum = 0.0;
    for patch in &patches {
        let mut hist = [0u32; 256];
        for &v in patch {
            let bin = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
            hist[bin] += 1;
        }
        let n = patch.len() as f64;
        let mut h = 0.0;
        for &c in &hist {
            if c > 0 {
                let p = c as f64 / n;
                h -= p * p.log2();
            }
        }
        entropy_sum += h;
    }
    let entropy_bits = entropy_sum / patches.len() as f64;

    // Mean-subtract and L2-normalize each patch; zero-variance patches keep
    // a zero vector so they contribute NCC 0 against everything.
    let normalized: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| {
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let mut v: Vec<f64> = p.iter().map(|&x| x - mean).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                v.iter_mut().for_each(|x| *x /= norm);
            } else {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
            v
        })
        .collect();
    let mut ncc_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..normalized.len() {
        for j in i + 1..normalized.len() {
            ncc_sum += normalized[i].iter().zip(&normalized[j]).map(|(a, b)| a * b).sum::<f64>();
            pairs += 1;
        }
    }
    let mean_ncc = if pairs > 0 { ncc_sum / pairs as f64 } else { 0.0 };

    Ok(ExampleScore { image_id: image_id.into(), patch_size, entropy_bits, mean_ncc })
}

impl ExampleScore {
    /// Appends one row to `path`, writing the header first if the file is new.
    pub fn append_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let new = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if new {
            writeln!(f, "image,patch_size,entropy_bits,mean_ncc")?;
        }
        writeln!(f, "{},{},{:.6},{:.6}", self.image_id, self.patch_size, self.entropy_bits, self.mean_ncc)?;
        Ok(())
    }
}
