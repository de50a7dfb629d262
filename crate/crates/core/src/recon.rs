//! Non-learned reconstruction: zero-filled RSS, SENSE unfolding, and the
//! composite k-space data-consistency operator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::complex::{
    rss_combine, sens_combine, sens_expand, CoilKspace, CoilStack, ComplexImage, RealImage,
    SamplingMask, SensitivityMaps, C64,
};
use crate::error::{shape_err, Result};
use crate::transform::{fft2c_multicoil, ifft2c_multicoil};

/// Condition number above which a SENSE solve is flagged.
pub const ILL_CONDITIONED: f64 = 1e6;

fn check_k_mask(k: &CoilKspace, mask: &SamplingMask) -> Result<()> {
    if k.image_shape() != mask.shape() {
        return Err(shape_err(format!(
            "k-space {:?} vs mask {:?}",
            k.image_shape(),
            mask.shape()
        )));
    }
    Ok(())
}

fn check_k_maps(k: &CoilKspace, maps: &SensitivityMaps) -> Result<()> {
    if k.coils() != maps.coils() || k.image_shape() != maps.image_shape() {
        return Err(shape_err(format!(
            "k-space {}x{:?} vs maps {}x{:?}",
            k.coils(),
            k.image_shape(),
            maps.coils(),
            maps.image_shape()
        )));
    }
    Ok(())
}

/// Per-coil inverse FFT of the (zero-filled) k-space followed by RSS.
/// Maps are accepted only for interface symmetry and shape checking.
pub fn zero_filled_recon(k: &CoilKspace, maps: Option<&SensitivityMaps>) -> Result<RealImage> {
    if let Some(maps) = maps {
        check_k_maps(k, maps)?;
    }
    Ok(rss_combine(&ifft2c_multicoil(k)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SenseSolveReport {
    /// Condition number of each solved aliasing group, row-major by (row, group).
    pub condition_numbers: Vec<f64>,
    pub max_condition: f64,
    pub pixels_unfolded: usize,
}

impl SenseSolveReport {
    pub fn ill_conditioned(&self) -> bool {
        self.max_condition > ILL_CONDITIONED
    }
}

/// Cartesian SENSE along the width (phase-encode) axis.
///
/// Only the stride-`R` lines of `mask` are used; ACS samples contribute
/// through the maps alone. With `W` divisible by `R` the stride-sampled
/// coil image at column `p` is
/// `(1/R) sum_j exp(2 pi i j (W/2) / R) S(p + jW/R) x(p + jW/R)`,
/// which is solved per group as a Tikhonov-regularized least-squares
/// problem over the unknowns inside map support.
pub fn sense_reconstruct(
    k: &CoilKspace,
    maps: &SensitivityMaps,
    mask: &SamplingMask,
    reg: f64,
) -> Result<(ComplexImage, SenseSolveReport)> {
    check_k_maps(k, maps)?;
    check_k_mask(k, mask)?;
    let (h, w) = k.image_shape();
    let accel = mask.accel();
    let stride = mask.stride_only();
    let mut ks = k.clone();
    for c in 0..ks.coils() {
        for (v, &b) in ks.coil_mut(c).iter_mut().zip(stride.bits()) {
            if !b {
                *v = C64::new(0.0, 0.0);
            }
        }
    }
    let aliased = ifft2c_multicoil(&ks);
    let period = w.div_ceil(accel);
    let f0 = (w / 2) as f64;
    let phases: Vec<C64> = (0..accel)
        .map(|j| {
            C64::from_polar(
                1.0 / accel as f64,
                2.0 * std::f64::consts::PI * j as f64 * f0 / accel as f64,
            )
        })
        .collect();

    let coils = maps.coils();
    let mut out = ComplexImage::zeros(h, w);
    let mut conds = Vec::new();
    let mut unfolded = 0;
    for r in 0..h {
        for p in 0..period {
            let cols: Vec<(usize, usize)> = (0..accel)
                .map(|j| (j, p + j * period))
                .filter(|&(_, col)| col < w && maps.support()[r * w + col])
                .collect();
            if cols.is_empty() {
                continue;
            }
            let n = cols.len();
            let enc = DMatrix::from_fn(coils, n, |c, u| {
                let (j, col) = cols[u];
                phases[j] * maps.coil(c)[r * w + col]
            });
            let rhs = DMatrix::from_fn(coils, 1, |c, _| aliased.coil(c)[r * w + p]);
            let sv = enc.clone().svd(false, false).singular_values;
            let smax = sv.max();
            let smin = sv.min();
            conds.push(if smin > 0.0 { smax / smin } else { f64::INFINITY });
            let adj = enc.adjoint();
            let mut normal = &adj * &enc;
            for d in 0..n {
                normal[(d, d)] += C64::new(reg, 0.0);
            }
            let solved = normal
                .lu()
                .solve(&(&adj * &rhs))
                .unwrap_or_else(|| DMatrix::zeros(n, 1));
            for (u, &(_, col)) in cols.iter().enumerate() {
                out.data_mut()[r * w + col] = solved[(u, 0)];
            }
            unfolded += n;
        }
    }
    let max_condition = conds.iter().cloned().fold(1.0, f64::max);
    let report = SenseSolveReport {
        condition_numbers: conds,
        max_condition,
        pixels_unfolded: unfolded,
    };
    if report.ill_conditioned() {
        log::warn!("SENSE unfolding ill-conditioned: max condition {max_condition:.3e}");
    }
    Ok((out, report))
}

/// How coil images are reduced to one image inside [`compose_kspace`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Normalized conjugate combine (left inverse of the expansion).
    #[default]
    PseudoInverse,
    /// RSS magnitude carrying the phase of the conjugate combine.
    RssMagnitude,
}

pub fn combine(coil_imgs: &CoilStack, maps: &SensitivityMaps, mode: CombineMode) -> Result<ComplexImage> {
    let pinv = sens_combine(coil_imgs, maps)?;
    match mode {
        CombineMode::PseudoInverse => Ok(pinv),
        CombineMode::RssMagnitude => {
            let rss = rss_combine(coil_imgs);
            let (h, w) = pinv.shape();
            Ok(ComplexImage::from_fn(h, w, |r, c| {
                let p = r * w + c;
                if !maps.support()[p] {
                    return C64::new(0.0, 0.0);
                }
                let v = pinv.data()[p];
                let phase = if v.norm() > 0.0 { v / v.norm() } else { C64::new(1.0, 0.0) };
                phase * rss.data()[p]
            }))
        }
    }
}

/// Composite k-space: measured samples pass through untouched, unmeasured
/// ones are filled with `lambda * F(S r)` where `r` is `refined` if given,
/// otherwise the combine of the zero-filled coil images.
pub fn compose_kspace(
    k: &CoilKspace,
    mask: &SamplingMask,
    maps: &SensitivityMaps,
    lambda: f64,
    refined: Option<&ComplexImage>,
    mode: CombineMode,
) -> Result<CoilKspace> {
    check_k_maps(k, maps)?;
    check_k_mask(k, mask)?;
    let estimate = match refined {
        Some(img) => img.clone(),
        None => combine(&ifft2c_multicoil(k), maps, mode)?,
    };
    let fill = fft2c_multicoil(&sens_expand(&estimate, maps)?);
    let mut out = CoilStack::zeros(k.coils(), k.height(), k.width());
    for c in 0..k.coils() {
        let (src, est, dst) = (k.coil(c), fill.coil(c), out.coil_mut(c));
        for (p, &b) in mask.bits().iter().enumerate() {
            dst[p] = if b {
                src[p]
            } else if lambda == 0.0 {
                C64::new(0.0, 0.0)
            } else {
                est[p] * lambda
            };
        }
    }
    Ok(out)
}

/// Inverse FFT of the composite k-space, combined with the maps.
pub fn initial_recon(k_plus: &CoilKspace, maps: &SensitivityMaps) -> Result<ComplexImage> {
    check_k_maps(k_plus, maps)?;
    sens_combine(&ifft2c_multicoil(k_plus), maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::NoiseSpec;
    use crate::eval::psnr;
    use crate::sim::{full_kspace, make_coil_maps, make_phantom, simulate_acquisition, CoilProfileSpec, PhantomKind, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coils(n: usize) -> CoilProfileSpec {
        CoilProfileSpec {
            coils: n,
            falloff: 26.0,
            ring_radius: 42.0,
            seed: 7,
        }
    }

    fn phantom(n: usize, seed: u64) -> ComplexImage {
        make_phantom(&PhantomSpec::new(PhantomKind::SheppLogan, n, n, seed)).unwrap()
    }

    fn psnr_mag(a: &ComplexImage, b: &ComplexImage) -> f64 {
        psnr(&a.magnitude(), &b.magnitude(), 1.0).unwrap()
    }

    #[test]
    fn zero_filled_fully_sampled_is_magnitude() {
        let x = phantom(32, 1);
        let maps = make_coil_maps(&coils(8), 32, 32).unwrap();
        let k = full_kspace(&x, &maps).unwrap();
        let zf = zero_filled_recon(&k, Some(&maps)).unwrap();
        for (a, b) in zf.data().iter().zip(x.magnitude().data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let zero = zero_filled_recon(&CoilStack::zeros(8, 32, 32), None).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(zero_filled_recon(&k, Some(&SensitivityMaps::uniform(32, 32))).is_err());
    }

    /// Peaks above half the maximum, as column indices along `row`.
    fn peak_columns(img: &RealImage, row: usize) -> Vec<usize> {
        let w = img.width();
        let max = (0..w).map(|c| img.get(row, c)).fold(0.0, f64::max);
        (0..w).filter(|&c| img.get(row, c) > 0.5 * max).collect()
    }

    #[test]
    fn zero_filled_point_source_aliases() {
        let (n, accel) = (64, 4);
        let (r0, c0) = (20, 9);
        let x = ComplexImage::from_fn(n, n, |r, c| {
            if (r, c) == (r0, c0) {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let maps = SensitivityMaps::uniform(n, n);
        let mask = SamplingMask::new(n, n, accel, 0, 0).unwrap();
        let rec = simulate_acquisition(&x, &maps, &mask, &NoiseSpec::noiseless()).unwrap();
        let zf = zero_filled_recon(&rec.kspace, None).unwrap();
        let peaks = peak_columns(&zf, r0);
        assert_eq!(peaks.len(), accel);
        for (j, &p) in peaks.iter().enumerate() {
            let expected = (c0 + j * n / accel) % n;
            let mut sorted: Vec<usize> = (0..accel).map(|i| (c0 + i * n / accel) % n).collect();
            sorted.sort();
            assert!((p as i64 - sorted[j] as i64).abs() <= 1, "{peaks:?} vs {expected}");
        }
        for &p in &peaks {
            assert!((zf.get(r0, p) - 1.0 / accel as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn sense_r1_is_combine() {
        let x = phantom(32, 2);
        let maps = make_coil_maps(&coils(4), 32, 32).unwrap();
        let mask = SamplingMask::full(32, 32);
        let rec = simulate_acquisition(&x, &maps, &mask, &NoiseSpec::noiseless()).unwrap();
        let (img, report) = sense_reconstruct(&rec.kspace, &maps, &mask, 0.0).unwrap();
        let direct = sens_combine(&ifft2c_multicoil(&rec.kspace), &maps).unwrap();
        for (a, b) in img.data().iter().zip(direct.data()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(report.pixels_unfolded, 32 * 32);
        assert!(report.condition_numbers.iter().all(|&c| c >= 1.0 - 1e-12));
    }

    fn sense_psnr(accel: usize) -> (f64, SenseSolveReport, f64) {
        let n = 64;
        let x = phantom(n, 3);
        let maps = make_coil_maps(&coils(8), n, n).unwrap();
        let mask = SamplingMask::new(n, n, accel, 0, 0).unwrap();
        let rec = simulate_acquisition(&x, &maps, &mask, &NoiseSpec::noiseless()).unwrap();
        let (img, report) = sense_reconstruct(&rec.kspace, &maps, &mask, 0.0).unwrap();
        let err: f64 = img.data().iter().zip(x.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
        (psnr_mag(&img, &x), report, (err / x.norm_sqr()).sqrt())
    }

    #[test]
    fn sense_exact_recovery() {
        let (p2, _, rel2) = sense_psnr(2);
        assert!(p2 >= 100.0, "R=2 PSNR {p2}");
        assert!(rel2 <= 1e-8);
        let (p4, report, rel4) = sense_psnr(4);
        assert!(p4 >= 80.0, "R=4 PSNR {p4}");
        assert!(rel4 <= 1e-8);
        assert!(report.max_condition.is_finite());
    }

    #[test]
    fn sense_ignores_acs_lines() {
        let n = 32;
        let x = phantom(n, 4);
        let maps = make_coil_maps(&coils(8), n, n).unwrap();
        let with_acs = SamplingMask::new(n, n, 4, 8, 8).unwrap();
        let rec = simulate_acquisition(&x, &maps, &with_acs, &NoiseSpec::noiseless()).unwrap();
        let (img, _) = sense_reconstruct(&rec.kspace, &maps, &with_acs, 0.0).unwrap();
        let err: f64 = img.data().iter().zip(x.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
        assert!((err / x.norm_sqr()).sqrt() < 1e-8);
    }

    #[test]
    fn sense_noise_response_monotone() {
        let n = 32;
        let maps = make_coil_maps(&coils(8), n, n).unwrap();
        let mask = SamplingMask::new(n, n, 2, 0, 0).unwrap();
        let mut mses = Vec::new();
        for &sigma in &[0.0, 1e-3, 1e-2] {
            let mut total = 0.0;
            for seed in 0..10 {
                let x = phantom(n, 100 + seed);
                let rec = simulate_acquisition(&x, &maps, &mask, &NoiseSpec::new(sigma, seed).unwrap()).unwrap();
                let (img, _) = sense_reconstruct(&rec.kspace, &maps, &mask, 1e-4).unwrap();
                total += img.data().iter().zip(x.data()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
            }
            mses.push(total / 10.0);
        }
        assert!(mses[0] <= mses[1] && mses[1] <= mses[2], "{mses:?}");
    }

    fn random_instance(seed: u64) -> (CoilKspace, SamplingMask, SensitivityMaps) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(4..12), rng.random_range(4..12));
        let data = (0..c * h * w)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let k = CoilStack::new(c, h, w, data).unwrap();
        let raw = CoilStack::new(
            c,
            h,
            w,
            (0..c * h * w)
                .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let accel = rng.random_range(1..=w.min(4));
        let mask = SamplingMask::new(h, w, accel, rng.random_range(0..=h / 2), rng.random_range(0..=w / 2)).unwrap();
        (k, mask, SensitivityMaps::normalize(&raw))
    }

    #[test]
    fn compose_preserves_measured_entries() {
        for seed in 0..200 {
            let (k, mask, maps) = random_instance(seed);
            for mode in [CombineMode::PseudoInverse, CombineMode::RssMagnitude] {
                let out = compose_kspace(&k, &mask, &maps, 0.7, None, mode).unwrap();
                for c in 0..k.coils() {
                    for (p, &b) in mask.bits().iter().enumerate() {
                        if b {
                            assert_eq!(out.coil(c)[p].re.to_bits(), k.coil(c)[p].re.to_bits());
                            assert_eq!(out.coil(c)[p].im.to_bits(), k.coil(c)[p].im.to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn compose_degenerate_cases() {
        let (k, mask, maps) = random_instance(1);
        let out = compose_kspace(&k, &mask, &maps, 0.0, None, CombineMode::PseudoInverse).unwrap();
        for c in 0..k.coils() {
            for (p, &b) in mask.bits().iter().enumerate() {
                let want = if b { k.coil(c)[p] } else { C64::new(0.0, 0.0) };
                assert_eq!(out.coil(c)[p], want);
            }
        }
        let (h, w) = k.image_shape();
        let full = SamplingMask::full(h, w);
        assert_eq!(compose_kspace(&k, &full, &maps, 1.3, None, CombineMode::PseudoInverse).unwrap(), k);
        assert!(compose_kspace(&k, &SamplingMask::full(h + 1, w), &maps, 1.0, None, CombineMode::PseudoInverse).is_err());
    }

    #[test]
    fn compose_fills_true_kspace_when_consistent() {
        let n = 32;
        let x = phantom(n, 5);
        let maps = make_coil_maps(&coils(6), n, n).unwrap();
        let full = full_kspace(&x, &maps).unwrap();
        let mask = SamplingMask::new(n, n, 4, 6, 6).unwrap();
        let measured = crate::sim::simulate_from_reference(&full, &mask).unwrap();
        let truth_combine = sens_combine(&ifft2c_multicoil(&full), &maps).unwrap();
        let out = compose_kspace(&measured, &mask, &maps, 1.0, Some(&truth_combine), CombineMode::PseudoInverse).unwrap();
        for (a, b) in out.data().iter().zip(full.data()) {
            assert!((a - b).norm() < 1e-10);
        }
        let x0 = initial_recon(&out, &maps).unwrap();
        for (a, b) in x0.data().iter().zip(x.data()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn initial_recon_cases() {
        let (k, mask, maps) = random_instance(9);
        let zero = initial_recon(&CoilStack::zeros(k.coils(), k.height(), k.width()), &maps).unwrap();
        assert!(zero.data().iter().all(|v| v.norm() == 0.0));
        let kp = compose_kspace(&k, &mask, &maps, 0.0, None, CombineMode::PseudoInverse).unwrap();
        let mut masked = k.clone();
        for c in 0..masked.coils() {
            for (v, &b) in masked.coil_mut(c).iter_mut().zip(mask.bits()) {
                if !b {
                    *v = C64::new(0.0, 0.0);
                }
            }
        }
        let a = initial_recon(&kp, &maps).unwrap();
        let b = sens_combine(&ifft2c_multicoil(&masked), &maps).unwrap();
        assert_eq!(a, b);
    }
}
