//! Synthetic ground truth: phantoms, smooth coil sensitivities, sampling
//! masks and the forward acquisition `y = M F S x + n`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::complex::{
    sens_expand, CoilKspace, CoilStack, ComplexImage, NoiseSpec, SamplingMask, SensitivityMaps, C64,
};
use crate::error::{shape_err, Error, Result};
use crate::transform::fft2c_multicoil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    SheppLogan,
    Disks,
    Checker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub height: usize,
    pub width: usize,
    /// Scales the internal (non-outermost) structure intensities.
    pub contrast_scale: f64,
    pub seed: u64,
    /// Peak phase (radians) of the linear phase ramp at the field-of-view edge.
    #[serde(default = "default_phase_ramp")]
    pub phase_ramp: f64,
}

fn default_phase_ramp() -> f64 {
    0.3
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, height: usize, width: usize, seed: u64) -> Self {
        Self {
            kind,
            height,
            width,
            contrast_scale: 1.0,
            seed,
            phase_ramp: default_phase_ramp(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::BadDims(format!(
                "phantom {}x{} below 16x16",
                self.height, self.width
            )));
        }
        if !(self.contrast_scale > 0.0 && self.contrast_scale <= 1.0) {
            return Err(Error::BadDims(format!(
                "contrast_scale {} outside (0, 1]",
                self.contrast_scale
            )));
        }
        if !self.phase_ramp.is_finite() {
            return Err(Error::BadDims("non-finite phase ramp".into()));
        }
        Ok(())
    }
}

/// Stable per-slice seed: SHA-256 of `(seed, key)`, first 8 bytes.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

// Modified Shepp-Logan: intensity, semi-axes (a, b), center (x, y), angle (deg).
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Pixel center in normalized coordinates, x right and y up, both in [-1, 1].
fn norm_coords(r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
    let x = (c as f64 + 0.5 - w as f64 / 2.0) / (w as f64 / 2.0);
    let y = -(r as f64 + 0.5 - h as f64 / 2.0) / (h as f64 / 2.0);
    (x, y)
}

fn shepp_logan(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let scale = rng.random_range(0.85..1.0);
    let rot = rng.random_range(-8.0f64..8.0).to_radians();
    let (dx, dy) = (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04));
    let gains: Vec<f64> = (0..SHEPP_LOGAN.len())
        .map(|i| {
            if i < 2 {
                1.0
            } else {
                spec.contrast_scale * rng.random_range(0.7..1.3)
            }
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = norm_coords(r, c, h, w);
            // undo the global similarity transform
            let (xs, ys) = ((x - dx) / scale, (y - dy) / scale);
            let (xr, yr) = (xs * rot.cos() + ys * rot.sin(), -xs * rot.sin() + ys * rot.cos());
            let mut v = 0.0;
            for (&(amp, a, b, x0, y0, deg), g) in SHEPP_LOGAN.iter().zip(&gains) {
                let t = deg.to_radians();
                let (px, py) = (xr - x0, yr - y0);
                let u = px * t.cos() + py * t.sin();
                let q = -px * t.sin() + py * t.cos();
                if (u / a).powi(2) + (q / b).powi(2) <= 1.0 {
                    v += amp * g;
                }
            }
            out[r * w + c] = v.max(0.0);
        }
    }
    out
}

/// Disk geometry in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    pub value: f64,
}

/// Non-overlapping disks drawn for a `Disks` phantom (3 to 6 of them).
pub fn disk_layout(spec: &PhantomSpec) -> Vec<Disk> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    disk_layout_with(spec, &mut rng)
}

fn disk_layout_with(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Disk> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let side = h.min(w);
    let count = 3 + (spec.seed % 4) as usize;
    let mut disks: Vec<Disk> = Vec::with_capacity(count);
    let mut attempts = 0;
    while disks.len() < count && attempts < 10_000 {
        attempts += 1;
        let radius = rng.random_range(0.07..0.16) * side;
        let row = rng.random_range(radius + 1.0..h - radius - 1.0);
        let col = rng.random_range(radius + 1.0..w - radius - 1.0);
        let clear = disks
            .iter()
            .all(|d| ((d.row - row).powi(2) + (d.col - col).powi(2)).sqrt() > d.radius + radius + 2.0);
        if clear {
            let value = if disks.is_empty() {
                1.0
            } else {
                spec.contrast_scale * rng.random_range(0.4..1.0)
            };
            disks.push(Disk {
                row,
                col,
                radius,
                value,
            });
        }
    }
    disks
}

fn disks(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let layout = disk_layout_with(spec, rng);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            for d in &layout {
                if (pr - d.row).powi(2) + (pc - d.col).powi(2) <= d.radius * d.radius {
                    out[r * w + c] = d.value;
                }
            }
        }
    }
    out
}

fn checker(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let cell = rng.random_range(4..9usize);
    let low = 1.0 - 0.6 * spec.contrast_scale;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = norm_coords(r, c, h, w);
            if x * x / 0.64 + y * y / 0.72 <= 1.0 {
                out[r * w + c] = if (r / cell + c / cell) % 2 == 0 { 1.0 } else { low };
            }
        }
    }
    out
}

/// Complex phantom with magnitude in [0, 1] (peak exactly 1) and a seeded
/// linear phase ramp.
pub fn make_phantom(spec: &PhantomSpec) -> Result<ComplexImage> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mag = match spec.kind {
        PhantomKind::SheppLogan => shepp_logan(spec, &mut rng),
        PhantomKind::Disks => disks(spec, &mut rng),
        PhantomKind::Checker => checker(spec, &mut rng),
    };
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::BadDims("phantom rasterized to an empty image".into()));
    }
    let a = rng.random_range(-1.0..1.0) * spec.phase_ramp;
    let b = rng.random_range(-1.0..1.0) * spec.phase_ramp;
    Ok(ComplexImage::from_fn(h, w, |r, c| {
        let (x, y) = norm_coords(r, c, h, w);
        C64::from_polar(mag[r * w + c] / peak, a * x + b * y)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoilProfileSpec {
    pub coils: usize,
    /// Gaussian width of each coil lobe, pixels.
    pub falloff: f64,
    /// Radius of the ring the coil centers sit on, pixels from the image center.
    pub ring_radius: f64,
    pub seed: u64,
}

impl CoilProfileSpec {
    /// Coil center (row, col) in pixel coordinates.
    pub fn coil_centers(&self, height: usize, width: usize) -> Vec<(f64, f64)> {
        self.angles()
            .into_iter()
            .map(|t| {
                (
                    height as f64 / 2.0 - self.ring_radius * t.sin(),
                    width as f64 / 2.0 + self.ring_radius * t.cos(),
                )
            })
            .collect()
    }

    fn angles(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let step = 2.0 * PI / self.coils as f64;
        (0..self.coils)
            .map(|c| c as f64 * step + rng.random_range(-0.1..0.1) * step)
            .collect()
    }
}

/// Gaussian coil lobes on a ring around the field of view, each with a
/// smooth quadratic phase, normalized to unit RSS.
pub fn make_coil_maps(spec: &CoilProfileSpec, height: usize, width: usize) -> Result<SensitivityMaps> {
    if spec.coils == 0 || height == 0 || width == 0 {
        return Err(Error::BadDims(format!(
            "{} coils on {height}x{width}",
            spec.coils
        )));
    }
    if !(spec.falloff > 0.0) || !(spec.ring_radius >= 0.0) {
        return Err(Error::BadDims("falloff and ring radius must be positive".into()));
    }
    let angles = spec.angles();
    let centers = spec.coil_centers(height, width);
    let mut raw = CoilStack::zeros(spec.coils, height, width);
    let two_f2 = 2.0 * spec.falloff * spec.falloff;
    for (c, (&(cr, cc), &theta)) in centers.iter().zip(&angles).enumerate() {
        let coil = raw.coil_mut(c);
        for r in 0..height {
            for col in 0..width {
                let d2 = (r as f64 + 0.5 - cr).powi(2) + (col as f64 + 0.5 - cc).powi(2);
                let phase = theta + 0.25 * d2 / (spec.falloff * spec.falloff);
                coil[r * width + col] = C64::from_polar((-d2 / two_f2).exp(), phase);
            }
        }
    }
    Ok(SensitivityMaps::normalize(&raw))
}

/// See [`SamplingMask::new`].
pub fn make_mask(height: usize, width: usize, accel: usize, acs_h: usize, acs_w: usize) -> Result<SamplingMask> {
    SamplingMask::new(height, width, accel, acs_h, acs_w)
}

/// One simulated slice: the tuple (y, M, x, S) plus bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionRecord {
    pub kspace: CoilKspace,
    pub mask: SamplingMask,
    pub truth: ComplexImage,
    pub maps_true: SensitivityMaps,
    pub noise: NoiseSpec,
    pub slice_id: String,
    pub group_id: u32,
}

fn apply_mask(k: &mut CoilStack, mask: &SamplingMask) {
    let n = k.pixels();
    for c in 0..k.coils() {
        let coil = k.coil_mut(c);
        for p in 0..n {
            if !mask.bits()[p] {
                coil[p] = C64::new(0.0, 0.0);
            }
        }
    }
}

/// Complex Gaussian noise over the full grid; the caller masks it.
fn noise_stack(noise: &NoiseSpec, coils: usize, h: usize, w: usize) -> CoilStack {
    let mut out = CoilStack::zeros(coils, h, w);
    if noise.std == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, noise.std / 2f64.sqrt()).expect("std validated");
    for v in out.data_mut() {
        *v = C64::new(normal.sample(&mut rng), normal.sample(&mut rng));
    }
    out
}

/// Fully sampled, noise-free multi-coil k-space `F(S x)`.
pub fn full_kspace(x: &ComplexImage, maps: &SensitivityMaps) -> Result<CoilKspace> {
    Ok(fft2c_multicoil(&sens_expand(x, maps)?))
}

/// `y_c = M (F(S_c x) + n_c)`; noise exists only at sampled locations.
pub fn simulate_acquisition(
    x: &ComplexImage,
    maps: &SensitivityMaps,
    mask: &SamplingMask,
    noise: &NoiseSpec,
) -> Result<AcquisitionRecord> {
    if mask.shape() != x.shape() {
        return Err(shape_err(format!(
            "mask {:?} vs image {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    let mut k = full_kspace(x, maps)?;
    let n = noise_stack(noise, maps.coils(), x.height(), x.width());
    for (kv, nv) in k.data_mut().iter_mut().zip(n.data()) {
        *kv += nv;
    }
    apply_mask(&mut k, mask);
    Ok(AcquisitionRecord {
        kspace: k,
        mask: mask.clone(),
        truth: x.clone(),
        maps_true: maps.clone(),
        noise: *noise,
        slice_id: String::new(),
        group_id: 0,
    })
}

/// Masks reference k-space down to a higher acceleration.
pub fn simulate_from_reference(k_full: &CoilKspace, mask: &SamplingMask) -> Result<CoilKspace> {
    if k_full.image_shape() != mask.shape() {
        return Err(shape_err(format!(
            "k-space {:?} vs mask {:?}",
            k_full.image_shape(),
            mask.shape()
        )));
    }
    let mut k = k_full.clone();
    apply_mask(&mut k, mask);
    Ok(k)
}

/// Layout of a grouped synthetic dataset: `groups x series x slices`,
/// mirroring subjects x echoes x slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub groups: u32,
    pub series: u32,
    pub slices_per_series: u32,
    pub phantom: PhantomKind,
    #[serde(default = "default_phase_ramp")]
    pub phase_ramp: f64,
    pub coil: CoilProfileSpec,
    pub accel: usize,
    pub acs: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Identity of one slice in a grouped dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceKey {
    pub group: u32,
    pub series: u32,
    pub index: u32,
}

impl SliceKey {
    pub fn id(&self) -> String {
        format!("g{:02}_e{}_s{:03}", self.group, self.series, self.index)
    }
}

impl DatasetSpec {
    pub fn keys(&self) -> Vec<SliceKey> {
        let mut keys = Vec::new();
        for group in 0..self.groups {
            for series in 0..self.series {
                for index in 0..self.slices_per_series {
                    keys.push(SliceKey {
                        group,
                        series,
                        index,
                    });
                }
            }
        }
        keys
    }

    pub fn mask(&self) -> Result<SamplingMask> {
        make_mask(self.height, self.width, self.accel, self.acs, self.acs)
    }

    /// Later series lose internal contrast, loosely like later echoes.
    pub fn phantom_spec(&self, key: &SliceKey) -> PhantomSpec {
        PhantomSpec {
            kind: self.phantom,
            height: self.height,
            width: self.width,
            contrast_scale: (1.0 - 0.08 * key.series as f64).max(0.2),
            seed: derive_seed(self.seed, &key.id()),
            phase_ramp: self.phase_ramp,
        }
    }

    pub fn noise_spec(&self, key: &SliceKey) -> NoiseSpec {
        NoiseSpec {
            std: self.noise_std,
            seed: derive_seed(self.seed ^ 0x6e6f_6973_6500_0000, &key.id()),
        }
    }

    pub fn maps(&self) -> Result<SensitivityMaps> {
        make_coil_maps(&self.coil, self.height, self.width)
    }

    /// Simulates one slice under an arbitrary mask.
    pub fn simulate_slice(
        &self,
        key: &SliceKey,
        maps: &SensitivityMaps,
        mask: &SamplingMask,
    ) -> Result<AcquisitionRecord> {
        let x = make_phantom(&self.phantom_spec(key))?;
        let mut rec = simulate_acquisition(&x, maps, mask, &self.noise_spec(key))?;
        rec.slice_id = key.id();
        rec.group_id = key.group;
        Ok(rec)
    }

    pub fn generate(&self) -> Result<Vec<AcquisitionRecord>> {
        let maps = self.maps()?;
        let mask = self.mask()?;
        self.keys()
            .iter()
            .map(|k| self.simulate_slice(k, &maps, &mask))
            .collect()
    }
}
