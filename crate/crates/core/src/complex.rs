//! Domain types shared by every stage: complex images, multi-coil stacks,
//! sensitivity maps, sampling masks, and the coil combine/expand operators.
//!
//! All complex data is row-major, coil-major `Complex<f64>`; the in-memory
//! layout is the same interleaved (re, im) pair layout used on disk.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub type C64 = Complex<f64>;

/// Guard on the combine denominator for pixels with vanishing sensitivity.
pub const COMBINE_EPS: f64 = 1e-12;

/// Relative RSS threshold below which a pixel is excluded from map support.
pub const SUPPORT_THRESHOLD: f64 = 1e-3;

fn all_finite(data: &[C64]) -> bool {
    data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
}

/// Single-slice complex image, `height x width`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<C64>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, data: Vec<C64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::BadDims(format!("{height}x{width}")));
        }
        if data.len() != height * width {
            return Err(shape_err(format!(
                "image data length {} != {height}x{width}",
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite("ComplexImage"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![C64::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.data[row * self.width + col]
    }

    pub fn magnitude(&self) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.norm()).collect(),
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Real-valued image (magnitudes, metric inputs, exports).
#[derive(Clone, Debug, PartialEq)]
pub struct RealImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::BadDims(format!("{height}x{width}")));
        }
        if data.len() != height * width {
            return Err(shape_err(format!(
                "image data length {} != {height}x{width}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("RealImage"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn to_complex(&self) -> ComplexImage {
        ComplexImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| C64::new(v, 0.0)).collect(),
        }
    }
}

/// Multi-coil complex stack, `coils x height x width`, coil-major.
///
/// Used both for k-space measurements and for per-coil images.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilStack {
    coils: usize,
    height: usize,
    width: usize,
    data: Vec<C64>,
}

/// Multi-coil k-space; same layout as any other coil stack.
pub type CoilKspace = CoilStack;

impl CoilStack {
    pub fn new(coils: usize, height: usize, width: usize, data: Vec<C64>) -> Result<Self> {
        if coils == 0 || height == 0 || width == 0 {
            return Err(Error::BadDims(format!("{coils}x{height}x{width}")));
        }
        if data.len() != coils * height * width {
            return Err(shape_err(format!(
                "stack data length {} != {coils}x{height}x{width}",
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite("CoilStack"));
        }
        Ok(Self {
            coils,
            height,
            width,
            data,
        })
    }

    pub fn zeros(coils: usize, height: usize, width: usize) -> Self {
        Self {
            coils,
            height,
            width,
            data: vec![C64::new(0.0, 0.0); coils * height * width],
        }
    }

    /// Stacks equally-shaped coil images.
    pub fn from_images(images: &[ComplexImage]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::BadDims("empty coil list".into()))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for (i, img) in images.iter().enumerate() {
            if img.shape() != (h, w) {
                return Err(shape_err(format!(
                    "coil {i} is {:?}, expected {:?}",
                    img.shape(),
                    (h, w)
                )));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Self {
            coils: images.len(),
            height: h,
            width: w,
            data,
        })
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn coil(&self, c: usize) -> &[C64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn coil_mut(&mut self, c: usize) -> &mut [C64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn image(&self, c: usize) -> ComplexImage {
        ComplexImage {
            height: self.height,
            width: self.width,
            data: self.coil(c).to_vec(),
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Per-coil complex sensitivities, unit-RSS on `support` and zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps {
    maps: CoilStack,
    support: Vec<bool>,
}

impl SensitivityMaps {
    /// Wraps already-normalized maps, checking the unit-RSS invariant.
    pub fn new(maps: CoilStack, support: Vec<bool>) -> Result<Self> {
        let n = maps.pixels();
        if support.len() != n {
            return Err(shape_err("support length differs from map pixels"));
        }
        for (p, &on) in support.iter().enumerate() {
            let energy: f64 = (0..maps.coils()).map(|c| maps.coil(c)[p].norm_sqr()).sum();
            if on && (energy - 1.0).abs() > 1e-6 {
                return Err(Error::BadDims(format!(
                    "pixel {p} has sum |S|^2 = {energy}, expected 1"
                )));
            }
            if !on && energy != 0.0 {
                return Err(Error::BadDims(format!(
                    "pixel {p} outside support has nonzero sensitivity"
                )));
            }
        }
        Ok(Self { maps, support })
    }

    /// Derives support (RSS above [`SUPPORT_THRESHOLD`] times the maximum)
    /// and divides each pixel by its RSS.
    pub fn normalize(raw: &CoilStack) -> Self {
        let n = raw.pixels();
        let rss = rss_values(raw);
        let max = rss.iter().cloned().fold(0.0_f64, f64::max);
        let support: Vec<bool> = rss
            .iter()
            .map(|&r| r > 0.0 && r > SUPPORT_THRESHOLD * max)
            .collect();
        let mut maps = CoilStack::zeros(raw.coils(), raw.height(), raw.width());
        for c in 0..raw.coils() {
            let src = raw.coil(c);
            let dst = maps.coil_mut(c);
            for p in 0..n {
                if support[p] {
                    dst[p] = src[p] / rss[p];
                }
            }
        }
        Self { maps, support }
    }

    /// Reconstructs maps read back from disk; support is wherever any coil
    /// is nonzero.
    pub fn from_stack(maps: CoilStack) -> Result<Self> {
        let n = maps.pixels();
        let support = (0..n)
            .map(|p| (0..maps.coils()).any(|c| maps.coil(c)[p] != C64::new(0.0, 0.0)))
            .collect();
        Self::new(maps, support)
    }

    /// Single coil with unit sensitivity everywhere.
    pub fn uniform(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            maps: CoilStack {
                coils: 1,
                height,
                width,
                data: vec![C64::new(1.0, 0.0); n],
            },
            support: vec![true; n],
        }
    }

    pub fn coils(&self) -> usize {
        self.maps.coils()
    }

    pub fn height(&self) -> usize {
        self.maps.height()
    }

    pub fn width(&self) -> usize {
        self.maps.width()
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.maps.image_shape()
    }

    pub fn stack(&self) -> &CoilStack {
        &self.maps
    }

    pub fn coil(&self, c: usize) -> &[C64] {
        self.maps.coil(c)
    }

    pub fn support(&self) -> &[bool] {
        &self.support
    }

    pub fn support_count(&self) -> usize {
        self.support.iter().filter(|&&s| s).count()
    }

    /// Multiplies every map by a global phase factor.
    pub fn rotated(&self, phase: C64) -> Self {
        let mut maps = self.maps.clone();
        for v in maps.data_mut() {
            *v *= phase;
        }
        Self {
            maps,
            support: self.support.clone(),
        }
    }
}

/// Binary sampling pattern: every `accel`-th phase-encode column plus a
/// central `acs_h x acs_w` calibration block. Phase encoding runs along
/// the width axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    accel: usize,
    acs_h: usize,
    acs_w: usize,
}

/// Start index of a centered block of length `len` in an axis of length `n`.
pub fn centered_start(n: usize, len: usize) -> usize {
    n / 2 - len / 2
}

impl SamplingMask {
    pub fn new(height: usize, width: usize, accel: usize, acs_h: usize, acs_w: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::BadDims(format!("mask {height}x{width}")));
        }
        if accel == 0 || accel > width {
            return Err(Error::BadDims(format!(
                "acceleration {accel} outside 1..={width}"
            )));
        }
        if acs_h > height || acs_w > width {
            return Err(Error::BadDims(format!(
                "ACS {acs_h}x{acs_w} exceeds {height}x{width}"
            )));
        }
        let r0 = centered_start(height, acs_h);
        let c0 = centered_start(width, acs_w);
        let mut bits = vec![false; height * width];
        for r in 0..height {
            for c in 0..width {
                let stride = c % accel == 0;
                let acs = (r0..r0 + acs_h).contains(&r) && (c0..c0 + acs_w).contains(&c);
                bits[r * width + c] = stride || acs;
            }
        }
        Ok(Self {
            height,
            width,
            bits,
            accel,
            acs_h,
            acs_w,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
            accel: 1,
            acs_h: 0,
            acs_w: 0,
        }
    }

    /// All-zero mask; used for degenerate-case tests.
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
            accel: width.max(1),
            acs_h: 0,
            acs_w: 0,
        }
    }

    /// The pure stride-`accel` pattern, dropping the ACS block.
    pub fn stride_only(&self) -> Self {
        Self::new(self.height, self.width, self.accel, 0, 0).expect("validated geometry")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn accel(&self) -> usize {
        self.accel
    }

    pub fn acs(&self) -> (usize, usize) {
        (self.acs_h, self.acs_w)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_sampled(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn sampled_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Total pixels over sampled pixels.
    pub fn effective_acceleration(&self) -> f64 {
        (self.height * self.width) as f64 / self.sampled_count() as f64
    }

    pub fn acs_rows(&self) -> std::ops::Range<usize> {
        let r0 = centered_start(self.height, self.acs_h);
        r0..r0 + self.acs_h
    }

    pub fn acs_cols(&self) -> std::ops::Range<usize> {
        let c0 = centered_start(self.width, self.acs_w);
        c0..c0 + self.acs_w
    }
}

/// Complex Gaussian measurement noise: each of re/im has std `std/sqrt(2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub std: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(std: f64, seed: u64) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::BadDims(format!("noise std {std} must be >= 0")));
        }
        Ok(Self { std, seed })
    }

    pub fn noiseless() -> Self {
        Self { std: 0.0, seed: 0 }
    }
}

/// The (min, max) pair needed to undo [`normalize_unit_range`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleRecord {
    pub min: f64,
    pub max: f64,
}

impl ScaleRecord {
    pub fn invert(&self, img: &RealImage) -> RealImage {
        let span = self.max - self.min;
        RealImage {
            height: img.height,
            width: img.width,
            data: img.data.iter().map(|v| v * span + self.min).collect(),
        }
    }
}

/// Affinely maps the image onto [0, 1].
pub fn normalize_unit_range(img: &RealImage) -> Result<(RealImage, ScaleRecord)> {
    let (min, max) = img
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(max > min) {
        return Err(Error::ConstantImage(min));
    }
    let span = max - min;
    let data = img.data.iter().map(|v| (v - min) / span).collect();
    Ok((
        RealImage {
            height: img.height,
            width: img.width,
            data,
        },
        ScaleRecord { min, max },
    ))
}

fn rss_values(stack: &CoilStack) -> Vec<f64> {
    let n = stack.pixels();
    let mut acc = vec![0.0; n];
    for c in 0..stack.coils() {
        for (a, v) in acc.iter_mut().zip(stack.coil(c)) {
            *a += v.norm_sqr();
        }
    }
    acc.iter_mut().for_each(|a| *a = a.sqrt());
    acc
}

/// Root-sum-of-squares coil combination.
pub fn rss_combine(coil_imgs: &CoilStack) -> RealImage {
    RealImage {
        height: coil_imgs.height(),
        width: coil_imgs.width(),
        data: rss_values(coil_imgs),
    }
}

fn check_stack_vs_maps(stack: &CoilStack, maps: &SensitivityMaps) -> Result<()> {
    if stack.coils() != maps.coils() || stack.image_shape() != maps.image_shape() {
        return Err(shape_err(format!(
            "coil stack {}x{}x{} vs maps {}x{}x{}",
            stack.coils(),
            stack.height(),
            stack.width(),
            maps.coils(),
            maps.height(),
            maps.width()
        )));
    }
    Ok(())
}

/// `S_c * img` for every coil.
pub fn sens_expand(img: &ComplexImage, maps: &SensitivityMaps) -> Result<CoilStack> {
    if img.shape() != maps.image_shape() {
        return Err(shape_err(format!(
            "image {:?} vs maps {:?}",
            img.shape(),
            maps.image_shape()
        )));
    }
    let mut out = CoilStack::zeros(maps.coils(), img.height(), img.width());
    for c in 0..maps.coils() {
        for ((o, s), x) in out.coil_mut(c).iter_mut().zip(maps.coil(c)).zip(img.data()) {
            *o = s * x;
        }
    }
    Ok(out)
}

/// Normalized conjugate combine `sum_c conj(S_c) v_c / max(sum_c |S_c|^2, eps)`,
/// zero outside support. Left inverse of [`sens_expand`] on support.
pub fn sens_combine(coil_imgs: &CoilStack, maps: &SensitivityMaps) -> Result<ComplexImage> {
    check_stack_vs_maps(coil_imgs, maps)?;
    let n = coil_imgs.pixels();
    let mut num = vec![C64::new(0.0, 0.0); n];
    let mut den = vec![0.0; n];
    for c in 0..maps.coils() {
        for p in 0..n {
            let s = maps.coil(c)[p];
            num[p] += s.conj() * coil_imgs.coil(c)[p];
            den[p] += s.norm_sqr();
        }
    }
    let data = (0..n)
        .map(|p| {
            if maps.support()[p] {
                num[p] / den[p].max(COMBINE_EPS)
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    Ok(ComplexImage {
        height: coil_imgs.height(),
        width: coil_imgs.width(),
        data,
    })
}

/// Plain conjugate sum `sum_c conj(S_c) v_c`; the adjoint of [`sens_expand`].
pub fn sens_adjoint(coil_imgs: &CoilStack, maps: &SensitivityMaps) -> Result<ComplexImage> {
    check_stack_vs_maps(coil_imgs, maps)?;
    let n = coil_imgs.pixels();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for c in 0..maps.coils() {
        for p in 0..n {
            out[p] += maps.coil(c)[p].conj() * coil_imgs.coil(c)[p];
        }
    }
    Ok(ComplexImage {
        height: coil_imgs.height(),
        width: coil_imgs.width(),
        data: out,
    })
}
