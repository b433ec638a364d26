//! Grayscale images and the intensity statistics used by the direct methods.
//!
//! Intensities are `f64` in `[0, 1]`. Every image carries a validity mask so
//! that rendered views (which leave holes where no point landed) and real
//! photographs share one type. Pixel `(x, y)` has its center at integer
//! coordinates.

use nalgebra::Vector2;
use thiserror::Error;

/// Default number of intensity bins for joint histograms.
pub const DEFAULT_BINS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("image dimensions must be positive (got {0}x{1})")]
    EmptyImage(usize, usize),
    #[error("buffer has {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("sample location ({0:.3}, {1:.3}) outside the interpolation domain")]
    OutOfBounds(f64, f64),
    #[error("no jointly valid pixels")]
    EmptyOverlap,
    #[error("both images have zero entropy over the overlap")]
    DegenerateImage,
    #[error("bin count must be at least 2")]
    TooFewBins,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl GrayImage {
    /// Fully valid image from row-major intensities; values are clamped to `[0, 1]`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImagingError> {
        let mask = vec![true; data.len()];
        Self::from_parts(width, height, data, mask)
    }

    pub fn from_parts(
        width: usize,
        height: usize,
        mut data: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage(width, height));
        }
        let n = width * height;
        if data.len() != n {
            return Err(ImagingError::BufferSize { expected: n, got: data.len() });
        }
        if mask.len() != n {
            return Err(ImagingError::BufferSize { expected: n, got: mask.len() });
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { width, height, data, mask })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self, ImagingError> {
        Self::from_vec(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, ImagingError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_vec(width, height, data)
    }

    /// Quantizes 8-bit samples to `v / 255`.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, ImagingError> {
        Self::from_vec(width, height, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    /// 8-bit encoding; invalid pixels are written as 0.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { (v * 255.0).round() as u8 } else { 0 })
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn same_size(&self, other: &GrayImage) -> Result<(), ImagingError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImagingError::SizeMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Applies `f` to every valid intensity; results are clamped to `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        let data = self
            .data
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { f(v).clamp(0.0, 1.0) } else { v })
            .collect();
        GrayImage { width: self.width, height: self.height, data, mask: self.mask.clone() }
    }

    /// Mean over valid pixels, `None` when nothing is valid.
    pub fn mean(&self) -> Option<f64> {
        let (sum, n) = self
            .data
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Half-sample symmetric reflection of an index into `0..n`.
#[inline]
fn reflect(i: isize, n: isize) -> usize {
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian blur of an arbitrary real-valued buffer with symmetric
/// boundary extension. No clamping, no mask.
pub fn gaussian_blur_raw(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let (w, h) = (width as isize, height as isize);
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        let row = &data[y * width..(y + 1) * width];
        let out = &mut tmp[y * width..(y + 1) * width];
        for x in 0..w {
            let mut s = 0.0;
            if x >= r && x + r < w {
                let base = (x - r) as usize;
                for (k, &t) in taps.iter().enumerate() {
                    s += t * row[base + k];
                }
            } else {
                for (k, &t) in taps.iter().enumerate() {
                    s += t * row[reflect(x + k as isize - r, w)];
                }
            }
            out[x as usize] = s;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        let dst = &mut out[(y * w) as usize..((y + 1) * w) as usize];
        for (k, &t) in taps.iter().enumerate() {
            let yy = reflect(y + k as isize - r, h);
            let src = &tmp[yy * width..(yy + 1) * width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += t * s;
            }
        }
    }
    out
}

/// Separable Gaussian blur restricted to valid pixels.
///
/// Uses normalized convolution (weights renormalized over valid neighbours)
/// with symmetric boundary extension, so a fully valid image keeps its mean
/// and a constant image is unchanged. The mask is carried over unchanged.
pub fn gaussian_smooth(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    if img.mask.iter().all(|&m| m) {
        let mut data = gaussian_blur_raw(&img.data, img.width, img.height, sigma);
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        return GrayImage { width: img.width, height: img.height, data, mask: img.mask.clone() };
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let n = img.len();

    let weight: Vec<f64> = img.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let signal: Vec<f64> = img.data.iter().zip(&weight).map(|(v, m)| v * m).collect();

    let mut num_h = vec![0.0; n];
    let mut den_h = vec![0.0; n];
    for y in 0..h {
        let row = (y * w) as usize;
        for x in 0..w {
            let (mut s, mut d) = (0.0, 0.0);
            for (k, &t) in taps.iter().enumerate() {
                let xx = reflect(x + k as isize - r, w);
                s += t * signal[row + xx];
                d += t * weight[row + xx];
            }
            num_h[row + x as usize] = s;
            den_h[row + x as usize] = d;
        }
    }

    let mut data = img.data.clone();
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            if !img.mask[idx] {
                continue;
            }
            let (mut s, mut d) = (0.0, 0.0);
            for (k, &t) in taps.iter().enumerate() {
                let yy = reflect(y + k as isize - r, h);
                let j = yy * w as usize + x as usize;
                s += t * num_h[j];
                d += t * den_h[j];
            }
            data[idx] = (s / d).clamp(0.0, 1.0);
        }
    }
    GrayImage { width: img.width, height: img.height, data, mask: img.mask.clone() }
}

/// Keys cubic convolution kernel (a = -1/2), exact for quadratics.
#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

/// Bicubic interpolation at a sub-pixel location.
///
/// The domain is `[1, w-2] × [1, h-2]` so the 4×4 support stays inside the
/// image. Integer locations return the stored value exactly. The result is
/// clamped to `[0, 1]`.
pub fn sample_bicubic(img: &GrayImage, p: &Vector2<f64>) -> Result<f64, ImagingError> {
    let (x, y) = (p.x, p.y);
    let (w, h) = (img.width as f64, img.height as f64);
    if !(x >= 1.0 && y >= 1.0 && x <= w - 2.0 && y <= h - 2.0) {
        return Err(ImagingError::OutOfBounds(x, y));
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let (tx, ty) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    if tx == 0.0 && ty == 0.0 {
        return Ok(img.get(x0, y0));
    }
    let wx = cubic_weights(tx);
    let wy = cubic_weights(ty);
    let last_x = img.width - 1;
    let last_y = img.height - 1;
    let mut acc = 0.0;
    for (j, wyj) in wy.iter().enumerate() {
        if *wyj == 0.0 {
            continue;
        }
        let yy = (y0 + j).saturating_sub(1).min(last_y);
        let mut row = 0.0;
        for (i, wxi) in wx.iter().enumerate() {
            if *wxi == 0.0 {
                continue;
            }
            let xx = (x0 + i).saturating_sub(1).min(last_x);
            row += wxi * img.get(xx, yy);
        }
        acc += wyj * row;
    }
    Ok(acc.clamp(0.0, 1.0))
}

/// Bin index of an intensity: uniform over `[0, 1]`, last bin closed on the right.
#[inline]
pub fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64) as usize).min(bins - 1)
}

/// `B×B` joint histogram of two equally sized images over jointly valid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    bins: usize,
    counts: Vec<u64>,
    total: u64,
}

impl JointHistogram {
    pub fn new(a: &GrayImage, b: &GrayImage, bins: usize) -> Result<Self, ImagingError> {
        if bins < 2 {
            return Err(ImagingError::TooFewBins);
        }
        a.same_size(b)?;
        let mut counts = vec![0u64; bins * bins];
        let mut total = 0;
        for i in 0..a.len() {
            if a.mask[i] && b.mask[i] {
                counts[bin_of(a.data[i], bins) * bins + bin_of(b.data[i], bins)] += 1;
                total += 1;
            }
        }
        Ok(Self { bins, counts, total })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Count at (bin of first image, bin of second image).
    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.bins + j]
    }

    /// Marginal entropies and joint entropy, in bits.
    pub fn entropies(&self) -> (f64, f64, f64) {
        let b = self.bins;
        let mut row = vec![0u64; b];
        let mut col = vec![0u64; b];
        for i in 0..b {
            for j in 0..b {
                let c = self.counts[i * b + j];
                row[i] += c;
                col[j] += c;
            }
        }
        let n = self.total as f64;
        (entropy(&row, n), entropy(&col, n), entropy(&self.counts, n))
    }
}

/// Entropy in bits of a count vector. Nonzero counts are summed in sorted
/// order so the result does not depend on cell layout (transposes agree bit for bit).
fn entropy(counts: &[u64], total: f64) -> f64 {
    let mut nz: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    nz.sort_unstable();
    let mut acc = 0.0;
    for c in nz {
        let p = c as f64 / total;
        acc -= p * p.log2();
    }
    acc
}

/// Mutual information normalized by the larger marginal entropy.
pub fn nmi(a: &GrayImage, b: &GrayImage, bins: usize) -> Result<f64, ImagingError> {
    let hist = JointHistogram::new(a, b, bins)?;
    if hist.total() == 0 {
        return Err(ImagingError::EmptyOverlap);
    }
    nmi_from_histogram(&hist)
}

pub fn nmi_from_histogram(hist: &JointHistogram) -> Result<f64, ImagingError> {
    let (ha, hb, hab) = hist.entropies();
    let denom = ha.max(hb);
    if denom <= 0.0 {
        return Err(ImagingError::DegenerateImage);
    }
    let mi = ha + hb - hab;
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Median-trimmed mean squared difference over pixels valid in both images.
///
/// Per-pixel residuals `E = (q - s)²` above their median get zero weight;
/// the rest are averaged.
pub fn robust_rse(q: &GrayImage, s: &GrayImage) -> Result<f64, ImagingError> {
    q.same_size(s)?;
    let mut residuals: Vec<f64> = (0..q.len())
        .filter(|&i| q.mask[i] && s.mask[i])
        .map(|i| {
            let d = q.data[i] - s.data[i];
            d * d
        })
        .collect();
    trimmed_mean(&mut residuals).ok_or(ImagingError::EmptyOverlap)
}

/// Mean of the values not exceeding their median. Reorders `values`.
pub fn trimmed_mean(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let theta = median_in_place(values);
    let (sum, kept) = values
        .iter()
        .filter(|&&e| e <= theta)
        .fold((0.0, 0usize), |(s, k), &e| (s + e, k + 1));
    Some(sum / kept as f64)
}

/// Median with the midpoint rule for even lengths. Reorders `values`.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}
