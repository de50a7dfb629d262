//! Coil-sensitivity estimation from the fully sampled ACS block: a
//! low-resolution per-coil image divided by its root-sum-of-squares.

use serde::{Deserialize, Serialize};

use crate::complex::{centered_start, CoilKspace, CoilStack, SamplingMask, SensitivityMaps};
use crate::error::{shape_err, Error, Result};
use crate::transform::ifft2c_multicoil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Apodization {
    None,
    #[default]
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcsWindowSpec {
    pub acs_h: usize,
    pub acs_w: usize,
    #[serde(default)]
    pub apod: Apodization,
}

impl AcsWindowSpec {
    pub fn new(acs_h: usize, acs_w: usize) -> Self {
        Self {
            acs_h,
            acs_w,
            apod: Apodization::Hann,
        }
    }

    /// Window matching the ACS block a mask was built with.
    pub fn from_mask(mask: &SamplingMask) -> Self {
        let (acs_h, acs_w) = mask.acs();
        Self::new(acs_h, acs_w)
    }
}

/// Strictly positive Hann taper of length `n`.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin().powi(2))
        .collect()
}

pub fn estimate_csm_acs(k: &CoilKspace, mask: &SamplingMask, spec: &AcsWindowSpec) -> Result<SensitivityMaps> {
    let (h, w) = k.image_shape();
    if mask.shape() != (h, w) {
        return Err(shape_err(format!("k-space {:?} vs mask {:?}", (h, w), mask.shape())));
    }
    if spec.acs_h > h || spec.acs_w > w || spec.acs_h == 0 || spec.acs_w == 0 {
        return Err(Error::BadDims(format!(
            "ACS window {}x{} on {h}x{w}",
            spec.acs_h, spec.acs_w
        )));
    }
    let (r0, c0) = (centered_start(h, spec.acs_h), centered_start(w, spec.acs_w));
    for r in r0..r0 + spec.acs_h {
        for c in c0..c0 + spec.acs_w {
            if !mask.is_sampled(r, c) {
                return Err(Error::AcsNotSampled { row: r, col: c });
            }
        }
    }
    let (wr, wc) = match spec.apod {
        Apodization::None => (vec![1.0; spec.acs_h], vec![1.0; spec.acs_w]),
        Apodization::Hann => (hann(spec.acs_h), hann(spec.acs_w)),
    };
    let mut windowed = CoilStack::zeros(k.coils(), h, w);
    for coil in 0..k.coils() {
        let src = k.coil(coil);
        let dst = windowed.coil_mut(coil);
        for (i, r) in (r0..r0 + spec.acs_h).enumerate() {
            for (j, c) in (c0..c0 + spec.acs_w).enumerate() {
                dst[r * w + c] = src[r * w + c] * (wr[i] * wc[j]);
            }
        }
    }
    let low_res = ifft2c_multicoil(&windowed);
    Ok(SensitivityMaps::normalize(&low_res))
}

/// Mean over `region` of `sum_c |est_c - truth_c|`.
pub fn map_error(est: &SensitivityMaps, truth: &SensitivityMaps, region: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, &inside) in region.iter().enumerate() {
        if !inside {
            continue;
        }
        count += 1;
        total += (0..est.coils())
            .map(|c| (est.coil(c)[p] - truth.coil(c)[p]).norm())
            .sum::<f64>();
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
