use pmri_core::complex::{ComplexImage, SamplingMask, SensitivityMaps, C64};
use pmri_core::error::Error;
use pmri_core::learn::*;
use pmri_core::recon::{compose_kspace, initial_recon, CombineMode};
use pmri_core::sim::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize, coils: usize, groups: u32, series: u32) -> DatasetSpec {
    DatasetSpec {
        height: n,
        width: n,
        groups,
        series,
        slices_per_series: 1,
        phantom: PhantomKind::SheppLogan,
        phase_ramp: 0.3,
        coil: CoilProfileSpec {
            coils,
            falloff: 0.45 * n as f64,
            ring_radius: 0.7 * n as f64,
            seed: 3,
        },
        accel: 4,
        acs: n / 4,
        noise_std: 0.0,
        seed: 21,
    }
}

fn tiny_model(coils: usize) -> ReconModel {
    ReconModel::new(ModelSpec::with_channels(coils, vec![4, 6], vec![3, 4]))
}

/// Scalar nested-loop U-Net forward, walking the documented layout:
/// encoder pairs, bottleneck pair, decoder triples (upsample conv, merge
/// conv, conv), final 1x1; weights `[cout][cin][k][k]` then biases.
struct Oracle<'a> {
    params: &'a [f64],
    cursor: usize,
}

type Maps = Vec<Vec<Vec<f64>>>;

impl Oracle<'_> {
    fn conv(&mut self, x: &Maps, cout: usize, k: usize, relu: bool) -> Maps {
        let cin = x.len();
        let (h, w) = (x[0].len(), x[0][0].len());
        let wts = &self.params[self.cursor..self.cursor + cout * cin * k * k];
        let bias = &self.params[self.cursor + cout * cin * k * k..self.cursor + cout * cin * k * k + cout];
        self.cursor += cout * cin * k * k + cout;
        let half = (k / 2) as isize;
        let mut out = vec![vec![vec![0.0; w]; h]; cout];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - half;
                                let sx = xx as isize + kx as isize - half;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += wts[((co * cin + ci) * k + ky) * k + kx] * x[ci][sy as usize][sx as usize];
                                }
                            }
                        }
                    }
                    out[co][y][xx] = if relu { acc.max(0.0) } else { acc };
                }
            }
        }
        out
    }

    fn run(params: &[f64], offset: usize, spec: &NetSpec, input: Maps) -> Maps {
        let mut o = Oracle { params, cursor: offset };
        let pool = |x: &Maps| -> Maps {
            x.iter()
                .map(|ch| {
                    (0..ch.len() / 2)
                        .map(|y| {
                            (0..ch[0].len() / 2)
                                .map(|c| 0.25 * (ch[2 * y][2 * c] + ch[2 * y][2 * c + 1] + ch[2 * y + 1][2 * c] + ch[2 * y + 1][2 * c + 1]))
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let up = |x: &Maps| -> Maps {
            x.iter()
                .map(|ch| (0..2 * ch.len()).map(|y| (0..2 * ch[0].len()).map(|c| ch[y / 2][c / 2]).collect()).collect())
                .collect()
        };
        let mut x = input;
        let mut skips = Vec::new();
        for &e in &spec.enc_channels {
            let a = o.conv(&x, e, 3, true);
            let b = o.conv(&a, e, 3, true);
            x = pool(&b);
            skips.push(b);
        }
        let bottom = 2 * spec.enc_channels.last().unwrap();
        x = o.conv(&x, bottom, 3, true);
        x = o.conv(&x, bottom, 3, true);
        for (&e, skip) in spec.enc_channels.iter().rev().zip(skips.iter().rev()) {
            let v = o.conv(&up(&x), e, 3, true);
            let mut cat = skip.clone();
            cat.extend(v);
            x = o.conv(&cat, e, 3, true);
            x = o.conv(&x, e, 3, true);
        }
        o.conv(&x, spec.out_channels, 1, false)
    }
}

#[test]
fn denoiser_matches_scalar_oracle() {
    let model = tiny_model(2);
    let mut params = model.init(1);
    model.randomize(&mut params, 1.0, 2);
    let d = model.denoiser_net();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (12, 8);
    let img = ComplexImage::from_fn(h, w, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let mut fm = layers::FeatureMap::zeros(2, h, w);
    for (p, v) in img.data().iter().enumerate() {
        fm.data[p] = v.re;
        fm.data[h * w + p] = v.im;
    }
    let (out, _) = d.forward(&params.values, &fm).unwrap();
    let input: Maps = (0..2)
        .map(|c| (0..h).map(|y| (0..w).map(|x| fm.data[c * h * w + y * w + x]).collect()).collect())
        .collect();
    let oracle = Oracle::run(&params.values, d.offset(), d.spec(), input);
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                assert!((out.data[c * h * w + y * w + x] - oracle[c][y][x]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn shapes_and_depth_checks() {
    let model = ReconModel::new(ModelSpec::new(8, Scale::Desk));
    let params = model.init(0);
    let spec = dataset(64, 8, 1, 1);
    let rec = &spec.generate().unwrap()[0];
    let (x, maps) = pipeline_forward(&model, &params, &rec.kspace, &rec.mask).unwrap();
    assert_eq!(x.shape(), (64, 64));
    assert_eq!(maps.coils(), 8);

    let small = tiny_model(2);
    let p = small.init(0);
    for (h, w) in [(64, 64), (96, 64)] {
        let k = pmri_core::complex::CoilStack::zeros(2, h, w);
        let mask = SamplingMask::new(h, w, 2, 8, 8).unwrap();
        let t = small.forward(&p.values, &k, &mask).unwrap();
        assert_eq!(t.x_hat.shape(), (h, w));
    }
    let k = pmri_core::complex::CoilStack::zeros(2, 30, 32);
    let mask = SamplingMask::new(30, 32, 2, 8, 8).unwrap();
    assert!(matches!(small.forward(&p.values, &k, &mask), Err(Error::DimsNotDivisible { .. })));
}

#[test]
fn initialization_is_the_classical_chain() {
    let model = tiny_model(4);
    let params = model.init(9);
    let rec = &dataset(32, 4, 1, 1).generate().unwrap()[0];
    let t = model.forward(&params.values, &rec.kspace, &rec.mask).unwrap();
    let expected_kp = compose_kspace(&rec.kspace, &rec.mask, &t.maps, 1.0, None, CombineMode::PseudoInverse).unwrap();
    assert_eq!(t.k_plus, expected_kp);
    let x0 = initial_recon(&t.k_plus, &t.maps).unwrap();
    assert_eq!(t.x0, x0);
    assert_eq!(t.x_hat, x0);

    // frozen true maps with the identity denoiser
    let f = model.forward_with_maps(&params.values, &rec.kspace, &rec.mask, &rec.maps_true).unwrap();
    let kp = compose_kspace(&rec.kspace, &rec.mask, &rec.maps_true, 1.0, None, CombineMode::PseudoInverse).unwrap();
    assert_eq!(f.x_hat, initial_recon(&kp, &rec.maps_true).unwrap());
}

#[test]
fn zero_input_gives_empty_support() {
    let model = tiny_model(2);
    let params = model.init(0);
    let k = pmri_core::complex::CoilStack::zeros(2, 16, 16);
    let maps = model.estimate_maps(&params.values, &k).unwrap();
    assert_eq!(maps.support_count(), 0);
    assert!(maps.stack().data().iter().all(|v| *v == C64::new(0.0, 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn network_maps_are_unit_rss(seed in any::<u64>(), scale in 0.1f64..3.0) {
        let model = tiny_model(3);
        let mut params = model.init(seed);
        model.randomize(&mut params, scale, seed ^ 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = pmri_core::complex::CoilStack::new(
            3, 16, 16,
            (0..3 * 256).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect(),
        ).unwrap();
        let maps = model.estimate_maps(&params.values, &k).unwrap();
        for p in 0..256 {
            let e: f64 = (0..3).map(|c| maps.coil(c)[p].norm_sqr()).sum();
            if maps.support()[p] {
                prop_assert!((e - 1.0).abs() < 1e-6);
            } else {
                prop_assert_eq!(e, 0.0);
            }
        }
        prop_assert!(SensitivityMaps::new(maps.stack().clone(), maps.support().to_vec()).is_ok());
    }
}

#[test]
fn loss_weights_and_zero_case() {
    let cfg = TrainConfig::default();
    assert!((cfg.w_img * 0.02 + cfg.w_ksp * 0.04 - 0.05).abs() < 1e-15);

    let rec = &dataset(16, 3, 1, 1).generate().unwrap()[0];
    let (parts, grads) = loss_total(&rec.truth, &rec.truth, &rec.maps_true, &rec.kspace, &rec.mask, &cfg).unwrap();
    assert!(parts.total < 1e-28, "{parts:?}");
    assert!(grads.x_hat.iter().all(|g| g.norm() < 1e-12));

    let shifted = ComplexImage::from_fn(16, 16, |r, c| rec.truth.get(r, c) + C64::new(0.1, 0.0));
    let (parts, _) = loss_total(&shifted, &rec.truth, &rec.maps_true, &rec.kspace, &rec.mask, &cfg).unwrap();
    assert!((parts.img - 0.01).abs() < 1e-12);
    assert!((parts.total - (1.5 * parts.img + 0.5 * parts.ksp)).abs() < 1e-15);
}

fn check_gradients(model: &ReconModel, n: usize, coils: usize, coords: usize, seed: u64, step: f64, tol: f64) {
    let rec = &dataset(n, coils, 1, 1).generate().unwrap()[0];
    let mut params = model.init(seed);
    model.randomize(&mut params, 0.5, seed + 1);
    params.set_lambda(0.8);
    let report = gradient_check(model, &params, &TrainSample::from(rec), &TrainConfig::default(), coords, step, 1e-5, seed).unwrap();
    assert_eq!(report.checked, coords);
    assert!(report.max_rel_err < tol, "{report:?}");
    assert!(report.max_small_abs_err < 1e-8, "{report:?}");
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    check_gradients(&tiny_model(3), 16, 3, 100, 1, 1e-5, 1e-5);
}

#[test]
fn gradient_variants() {
    let mut spec = ModelSpec::with_channels(2, vec![3, 4], vec![2, 3]);
    spec.combine = CombineMode::RssMagnitude;
    check_gradients(&ReconModel::new(spec.clone()), 16, 2, 60, 2, 1e-6, 1e-4);
    spec.combine = CombineMode::PseudoInverse;
    spec.csm_input = CsmInput::Kspace;
    check_gradients(&ReconModel::new(spec.clone()), 16, 2, 60, 3, 1e-6, 1e-4);
    spec.csm_input = CsmInput::CoilImages;
    spec.denoiser.skip_connections = false;
    check_gradients(&ReconModel::new(spec), 16, 2, 60, 4, 1e-6, 1e-4);
}

/// With exact maps and a consistent fill (the true image), the composite
/// k-space is exact at λ = 1, so the loss over λ has its minimum there.
#[test]
fn lambda_scan_minimum_near_one() {
    let mut spec = dataset(32, 4, 1, 1);
    spec.phase_ramp = 0.0;
    let rec = &spec.generate().unwrap()[0];
    let cfg = TrainConfig::default();
    let mut best = (f64::INFINITY, f64::NAN);
    for i in 0..=40 {
        let lambda = i as f64 * 0.05;
        let kp = compose_kspace(&rec.kspace, &rec.mask, &rec.maps_true, lambda, Some(&rec.truth), CombineMode::PseudoInverse).unwrap();
        let x0 = initial_recon(&kp, &rec.maps_true).unwrap();
        let (parts, _) = loss_total(&x0, &rec.truth, &rec.maps_true, &rec.kspace, &rec.mask, &cfg).unwrap();
        if parts.total < best.0 {
            best = (parts.total, lambda);
        }
    }
    assert!(best.1 > 0.0 && best.1 < 2.0, "minimum at the boundary: {best:?}");
    assert!((best.1 - 1.0).abs() < 1e-12, "minimum at λ = {}", best.1);

    // the pipeline's λ derivative vanishes there too
    let model = tiny_model(4);
    let params = model.init(0);
    let k_full = full_kspace(&rec.truth, &rec.maps_true).unwrap();
    let t = model.forward_with_maps(&params.values, &k_full, &SamplingMask::full(32, 32), &rec.maps_true).unwrap();
    let (parts, _) = loss_total(&t.x_hat, &rec.truth, &t.maps, &k_full, &SamplingMask::full(32, 32), &cfg).unwrap();
    assert!(parts.total < 1e-25);
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let model = tiny_model(2);
    let recs = dataset(16, 2, 1, 6).generate().unwrap();
    let samples: Vec<TrainSample> = recs.iter().map(TrainSample::from).collect();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 4,
        checkpoint_every: 2,
        ..Default::default()
    };
    let mut calls = Vec::new();
    let a = train(&model, &samples, model.init(1), &cfg, &mut |e, _| {
        calls.push(e);
        Ok(())
    })
    .unwrap();
    let b = train(&model, &samples, model.init(1), &cfg, &mut |_, _| Ok(())).unwrap();
    assert_eq!(calls, vec![2, 3]);
    assert_eq!(a.log.len(), 3);
    assert_eq!(a.log, b.log);
    assert!(a.params.values.iter().zip(&b.params.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.params.lambda().is_finite());
}

#[test]
fn dataset_mean_loss_ignores_order() {
    let model = tiny_model(2);
    let params = model.init(3);
    let recs = dataset(16, 2, 1, 5).generate().unwrap();
    let cfg = TrainConfig::default();
    let mean = |order: &[usize]| -> f64 {
        let mut s: Vec<f64> = order
            .iter()
            .map(|&i| model.loss(&params.values, &recs[i].kspace, &recs[i].mask, &recs[i].truth, &cfg).unwrap().0.total)
            .collect();
        s.sort_by(f64::total_cmp);
        s.iter().sum::<f64>() / s.len() as f64
    };
    let base = mean(&[0, 1, 2, 3, 4]);
    for epoch in 1..4 {
        let order: Vec<usize> = epoch_batches(5, 2, 9, epoch).concat();
        assert_eq!(mean(&order), base);
    }
}

#[test]
fn divergence_returns_last_good_params() {
    let model = tiny_model(2);
    let recs = dataset(16, 2, 1, 2).generate().unwrap();
    let samples: Vec<TrainSample> = recs.iter().map(TrainSample::from).collect();
    let mut params = model.init(0);
    params.set_lambda(f64::NAN);
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    match train(&model, &samples, params, &cfg, &mut |_, _| Ok(())) {
        Err(Error::Divergence { epoch, last_good }) => {
            assert_eq!(epoch, 1);
            assert_eq!(last_good.len(), model.param_len());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn params_file_round_trip() {
    let model = tiny_model(2);
    let mut params = model.init(0);
    model.randomize(&mut params, 1.0, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.bin");
    save_params(&params, model.spec(), &path).unwrap();
    let back = load_params(model.spec(), model.param_len(), &path).unwrap();
    assert_eq!(back.values, params.values);
}
