//! Forward and reverse passes of the full learned reconstruction.
//!
//! Complex gradients follow the convention `g = dL/dRe + i dL/dIm`, so for
//! `w = a p` the gradient flowing back to `p` is `conj(a) g_w`, and the
//! unitary FFT's adjoint is its inverse.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::FeatureMap;
use super::unet::{UNet, UNetTrace};
use super::{CsmInput, ModelSpec, NetParams, TrainConfig};
use crate::complex::{
    sens_combine, sens_expand, CoilKspace, CoilStack, ComplexImage, SamplingMask, SensitivityMaps,
    C64, COMBINE_EPS,
};
use crate::error::{shape_err, Result};
use crate::recon::CombineMode;
use crate::transform::{fft2c_multicoil, ifft2c_multicoil};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// The two networks laid out in one flat parameter vector, followed by λ.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconModel {
    spec: ModelSpec,
    csm: UNet,
    denoiser: UNet,
}

/// Image and k-space loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub img: f64,
    pub ksp: f64,
    pub total: f64,
}

/// Gradient of the total loss with respect to the reconstruction and the
/// estimated maps.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub x_hat: Vec<C64>,
    pub maps: CoilStack,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct PipelineTrace {
    pub x_hat: ComplexImage,
    pub maps: SensitivityMaps,
    pub k_plus: CoilKspace,
    pub x0: ComplexImage,
    frozen_maps: bool,
    zero_filled: CoilStack,
    csm_trace: Option<UNetTrace>,
    rss: Vec<f64>,
    pinv: ComplexImage,
    refined: ComplexImage,
    fill: CoilStack,
    w: CoilStack,
    den_trace: UNetTrace,
}

impl PipelineTrace {
    /// Hash of every ReLU on/off decision and the map support; equal
    /// signatures mean two evaluations lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        if let Some(t) = &self.csm_trace {
            t.hash_pattern(&mut h);
        }
        self.den_trace.hash_pattern(&mut h);
        self.maps.support().hash(&mut h);
        h.finish()
    }
}

impl UNetTrace {
    fn hash_pattern(&self, h: &mut impl Hasher) {
        for v in self.activations() {
            for x in &v.data {
                (*x > 0.0).hash(h);
            }
        }
    }
}

fn pack_stack(s: &CoilStack) -> FeatureMap {
    let mut f = FeatureMap::zeros(2 * s.coils(), s.height(), s.width());
    for c in 0..s.coils() {
        for (p, v) in s.coil(c).iter().enumerate() {
            f.channel_mut(2 * c)[p] = v.re;
            f.channel_mut(2 * c + 1)[p] = v.im;
        }
    }
    f
}

fn unpack_stack(f: &FeatureMap) -> CoilStack {
    let coils = f.channels / 2;
    let mut s = CoilStack::zeros(coils, f.height, f.width);
    for c in 0..coils {
        let (re, im) = (f.channel(2 * c), f.channel(2 * c + 1));
        for (p, v) in s.coil_mut(c).iter_mut().enumerate() {
            *v = C64::new(re[p], im[p]);
        }
    }
    s
}

fn pack_image(x: &[C64], height: usize, width: usize) -> FeatureMap {
    let n = height * width;
    let mut f = FeatureMap::zeros(2, height, width);
    for (p, v) in x.iter().enumerate() {
        f.data[p] = v.re;
        f.data[n + p] = v.im;
    }
    f
}

fn rss_of(s: &CoilStack) -> Vec<f64> {
    (0..s.pixels())
        .map(|p| (0..s.coils()).map(|c| s.coil(c)[p].norm_sqr()).sum::<f64>().sqrt())
        .collect()
}

/// Reverse pass of `r = sens_combine(v, maps)` given the forward output `r`.
/// Adds into `g_maps` and, when present, into `g_v`.
fn combine_backward(
    v: &CoilStack,
    maps: &SensitivityMaps,
    r: &ComplexImage,
    g_r: &[C64],
    mut g_v: Option<&mut CoilStack>,
    g_maps: &mut CoilStack,
) {
    let coils = maps.coils();
    for (p, &inside) in maps.support().iter().enumerate() {
        if !inside {
            continue;
        }
        let den_raw: f64 = (0..coils).map(|c| maps.coil(c)[p].norm_sqr()).sum();
        let den = den_raw.max(COMBINE_EPS);
        let g_num = g_r[p] / den;
        let num = r.data()[p] * den;
        let d_den = if den_raw > COMBINE_EPS {
            -(g_r[p].conj() * num).re / (den * den)
        } else {
            0.0
        };
        for c in 0..coils {
            let s = maps.coil(c)[p];
            g_maps.coil_mut(c)[p] += g_num.conj() * v.coil(c)[p] + s * (2.0 * d_den);
            if let Some(gv) = g_v.as_deref_mut() {
                gv.coil_mut(c)[p] += s * g_num;
            }
        }
    }
}

impl ReconModel {
    pub fn new(spec: ModelSpec) -> Self {
        let csm = UNet::new(spec.csm.clone(), 0);
        let denoiser = UNet::new(spec.denoiser.clone(), csm.len());
        Self {
            spec,
            csm,
            denoiser,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn csm_net(&self) -> &UNet {
        &self.csm
    }

    pub fn denoiser_net(&self) -> &UNet {
        &self.denoiser
    }

    /// Total parameter count including λ.
    pub fn param_len(&self) -> usize {
        self.csm.len() + self.denoiser.len() + 1
    }

    pub fn lambda_index(&self) -> usize {
        self.param_len() - 1
    }

    /// Seeded initialization: Xavier-uniform hidden layers, zero output
    /// layers, λ = 1.
    pub fn init(&self, seed: u64) -> NetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetParams::zeros(self.param_len());
        self.csm.init(&mut params.values, &mut rng);
        self.denoiser.init(&mut params.values, &mut rng);
        params.set_lambda(1.0);
        params
    }

    /// Every weight (output layers included) uniform in `+-scale`; biases
    /// too. Used to exercise all gradient paths.
    pub fn randomize(&self, params: &mut NetParams, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in self.csm.convs().iter().chain(self.denoiser.convs()) {
            let fan = ((conv.cin + conv.cout) * conv.kernel * conv.kernel) as f64;
            let bound = scale * (6.0 / fan).sqrt();
            for v in &mut params.values[conv.offset..conv.offset + conv.len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
    }

    pub fn check_input(&self, k: &CoilKspace, mask: &SamplingMask) -> Result<()> {
        if k.coils() != self.spec.coils {
            return Err(shape_err(format!(
                "model expects {} coils, got {}",
                self.spec.coils,
                k.coils()
            )));
        }
        if k.image_shape() != mask.shape() {
            return Err(shape_err(format!(
                "k-space {:?} vs mask {:?}",
                k.image_shape(),
                mask.shape()
            )));
        }
        self.csm.check_dims(k.height(), k.width())?;
        self.denoiser.check_dims(k.height(), k.width())
    }

    /// Raw maps from the sensitivity network: zero-filled coil images plus
    /// the network output, before normalization.
    fn raw_maps(&self, params: &[f64], k: &CoilKspace, z: &CoilStack) -> Result<(CoilStack, UNetTrace)> {
        let base = pack_stack(z);
        let input = match self.spec.csm_input {
            CsmInput::CoilImages => base.clone(),
            CsmInput::Kspace => pack_stack(k),
        };
        let (mut out, trace) = self.csm.forward(params, &input)?;
        out.data.iter_mut().zip(&base.data).for_each(|(o, b)| *o += b);
        Ok((unpack_stack(&out), trace))
    }

    /// Estimated sensitivity maps alone.
    pub fn estimate_maps(&self, params: &[f64], k: &CoilKspace) -> Result<SensitivityMaps> {
        let z = ifft2c_multicoil(k);
        let (u, _) = self.raw_maps(params, k, &z)?;
        Ok(SensitivityMaps::normalize(&u))
    }

    pub fn forward(&self, params: &[f64], k: &CoilKspace, mask: &SamplingMask) -> Result<PipelineTrace> {
        self.forward_impl(params, k, mask, None)
    }

    /// Forward pass with the sensitivity network replaced by fixed maps.
    pub fn forward_with_maps(
        &self,
        params: &[f64],
        k: &CoilKspace,
        mask: &SamplingMask,
        maps: &SensitivityMaps,
    ) -> Result<PipelineTrace> {
        self.forward_impl(params, k, mask, Some(maps))
    }

    fn forward_impl(
        &self,
        params: &[f64],
        k: &CoilKspace,
        mask: &SamplingMask,
        frozen: Option<&SensitivityMaps>,
    ) -> Result<PipelineTrace> {
        self.check_input(k, mask)?;
        if params.len() != self.param_len() {
            return Err(shape_err(format!(
                "parameter vector has {} entries, model needs {}",
                params.len(),
                self.param_len()
            )));
        }
        let (h, w) = k.image_shape();
        let lambda = params[self.lambda_index()];
        let z = ifft2c_multicoil(k);
        let (maps, csm_trace, rss) = match frozen {
            Some(m) => {
                if m.coils() != k.coils() || m.image_shape() != (h, w) {
                    return Err(shape_err("frozen maps do not match k-space"));
                }
                (m.clone(), None, Vec::new())
            }
            None => {
                let (u, trace) = self.raw_maps(params, k, &z)?;
                let rss = rss_of(&u);
                (SensitivityMaps::normalize(&u), Some(trace), rss)
            }
        };
        let pinv = sens_combine(&z, &maps)?;
        let refined = match self.spec.combine {
            CombineMode::PseudoInverse => pinv.clone(),
            CombineMode::RssMagnitude => crate::recon::combine(&z, &maps, CombineMode::RssMagnitude)?,
        };
        let fill = fft2c_multicoil(&sens_expand(&refined, &maps)?);
        let mut k_plus = CoilStack::zeros(k.coils(), h, w);
        for c in 0..k.coils() {
            let (src, est, dst) = (k.coil(c), fill.coil(c), k_plus.coil_mut(c));
            for (p, &b) in mask.bits().iter().enumerate() {
                dst[p] = if b {
                    src[p]
                } else if lambda == 0.0 {
                    ZERO
                } else {
                    est[p] * lambda
                };
            }
        }
        let wimg = ifft2c_multicoil(&k_plus);
        let x0 = sens_combine(&wimg, &maps)?;
        let (d, den_trace) = self.denoiser.forward(params, &pack_image(x0.data(), h, w))?;
        let n = h * w;
        let x_hat = ComplexImage::from_fn(h, w, |r, c| {
            let p = r * w + c;
            x0.data()[p] + C64::new(d.data[p], d.data[n + p])
        });
        Ok(PipelineTrace {
            x_hat,
            maps,
            k_plus,
            x0,
            frozen_maps: frozen.is_some(),
            zero_filled: z,
            csm_trace,
            rss,
            pinv,
            refined,
            fill,
            w: wimg,
            den_trace,
        })
    }

    /// Adds the parameter gradient implied by `lg` into `grads`.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &PipelineTrace,
        mask: &SamplingMask,
        lg: &LossGrads,
        grads: &mut [f64],
    ) {
        let (h, w) = trace.x_hat.shape();
        let n = h * w;
        let maps = &trace.maps;
        let mut g_maps = lg.maps.clone();

        // denoiser residual
        let g_den = pack_image(&lg.x_hat, h, w);
        let g_in = self
            .denoiser
            .backward(params, &trace.den_trace, &g_den, grads, true)
            .expect("input grad requested");
        let g_x0: Vec<C64> = (0..n)
            .map(|p| lg.x_hat[p] + C64::new(g_in.data[p], g_in.data[n + p]))
            .collect();

        // x0 = combine(F^-1 k+, S)
        let mut g_w = CoilStack::zeros(maps.coils(), h, w);
        combine_backward(&trace.w, maps, &trace.x0, &g_x0, Some(&mut g_w), &mut g_maps);
        let g_kp = fft2c_multicoil(&g_w);

        // k+ = M k + λ (1 - M) F(S r)
        let lambda = params[self.lambda_index()];
        let mut g_lambda = 0.0;
        let mut g_fill = CoilStack::zeros(maps.coils(), h, w);
        for c in 0..maps.coils() {
            let (g, q, dst) = (g_kp.coil(c), trace.fill.coil(c), g_fill.coil_mut(c));
            for (p, &b) in mask.bits().iter().enumerate() {
                if !b {
                    g_lambda += (g[p].conj() * q[p]).re;
                    dst[p] = g[p] * lambda;
                }
            }
        }
        grads[self.lambda_index()] += g_lambda;
        if trace.frozen_maps {
            return;
        }

        // fill = F(S r)
        let g_t = ifft2c_multicoil(&g_fill);
        let mut g_r = vec![ZERO; n];
        for c in 0..maps.coils() {
            for p in 0..n {
                let gt = g_t.coil(c)[p];
                g_r[p] += maps.coil(c)[p].conj() * gt;
                g_maps.coil_mut(c)[p] += trace.refined.data()[p].conj() * gt;
            }
        }

        // r = combine(z, S) (or its RSS-magnitude variant)
        if self.spec.combine == CombineMode::RssMagnitude {
            let rss = crate::complex::rss_combine(&trace.zero_filled);
            for p in 0..n {
                let v = trace.pinv.data()[p];
                let mag = v.norm();
                if mag > 0.0 && maps.support()[p] {
                    let unit = v / mag;
                    let g = g_r[p];
                    g_r[p] = (g - unit * (unit.conj() * g).re) * (rss.data()[p] / mag);
                } else {
                    g_r[p] = ZERO;
                }
            }
        }
        combine_backward(&trace.zero_filled, maps, &trace.pinv, &g_r, None, &mut g_maps);

        // S = u / |u| on support
        let mut g_u = CoilStack::zeros(maps.coils(), h, w);
        for (p, &inside) in maps.support().iter().enumerate() {
            if !inside {
                continue;
            }
            let a: f64 = (0..maps.coils())
                .map(|c| (g_maps.coil(c)[p].conj() * maps.coil(c)[p]).re)
                .sum();
            for c in 0..maps.coils() {
                g_u.coil_mut(c)[p] = (g_maps.coil(c)[p] - maps.coil(c)[p] * a) / trace.rss[p];
            }
        }
        let csm_trace = trace.csm_trace.as_ref().expect("unfrozen trace");
        self.csm.backward(params, csm_trace, &pack_stack(&g_u), grads, false);
    }

    /// Loss of one slice; its gradient is added into `grads`.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        k: &CoilKspace,
        mask: &SamplingMask,
        truth: &ComplexImage,
        cfg: &TrainConfig,
        grads: &mut [f64],
    ) -> Result<LossParts> {
        let trace = self.forward(params, k, mask)?;
        let (parts, lg) = loss_total(&trace.x_hat, truth, &trace.maps, k, mask, cfg)?;
        self.backward(params, &trace, mask, &lg, grads);
        Ok(parts)
    }

    /// Loss of one slice without gradients.
    pub fn loss(
        &self,
        params: &[f64],
        k: &CoilKspace,
        mask: &SamplingMask,
        truth: &ComplexImage,
        cfg: &TrainConfig,
    ) -> Result<(LossParts, PipelineTrace)> {
        let trace = self.forward(params, k, mask)?;
        let (parts, _) = loss_total(&trace.x_hat, truth, &trace.maps, k, mask, cfg)?;
        Ok((parts, trace))
    }
}

/// Runs the learned reconstruction, returning the image and estimated maps.
pub fn pipeline_forward(
    model: &ReconModel,
    params: &NetParams,
    k: &CoilKspace,
    mask: &SamplingMask,
) -> Result<(ComplexImage, SensitivityMaps)> {
    let t = model.forward(&params.values, k, mask)?;
    Ok((t.x_hat, t.maps))
}

/// `w_img * mean|x_hat - x_gt|^2 + w_ksp * mean_sampled |M F(S x_hat) - y|^2`
/// and its gradient with respect to `x_hat` and `maps`.
pub fn loss_total(
    x_hat: &ComplexImage,
    x_gt: &ComplexImage,
    maps: &SensitivityMaps,
    y: &CoilKspace,
    mask: &SamplingMask,
    cfg: &TrainConfig,
) -> Result<(LossParts, LossGrads)> {
    if x_hat.shape() != x_gt.shape() || x_hat.shape() != mask.shape() || y.image_shape() != mask.shape() {
        return Err(shape_err("loss inputs differ in shape"));
    }
    if y.coils() != maps.coils() {
        return Err(shape_err("k-space and maps differ in coil count"));
    }
    let (h, w) = x_hat.shape();
    let n = h * w;
    let mut g_x = vec![ZERO; n];
    let mut img = 0.0;
    for p in 0..n {
        let e = x_hat.data()[p] - x_gt.data()[p];
        img += e.norm_sqr();
        g_x[p] = e * (2.0 * cfg.w_img / n as f64);
    }
    img /= n as f64;

    let coils = maps.coils();
    let sampled = mask.sampled_count();
    let pred = fft2c_multicoil(&sens_expand(x_hat, maps)?);
    let mut ksp = 0.0;
    let mut g_pred = CoilStack::zeros(coils, h, w);
    if sampled > 0 {
        let scale = 2.0 * cfg.w_ksp / (coils * sampled) as f64;
        for c in 0..coils {
            for (p, &b) in mask.bits().iter().enumerate() {
                if b {
                    let e = pred.coil(c)[p] - y.coil(c)[p];
                    ksp += e.norm_sqr();
                    g_pred.coil_mut(c)[p] = e * scale;
                }
            }
        }
        ksp /= (coils * sampled) as f64;
    }
    let g_v = ifft2c_multicoil(&g_pred);
    let mut g_maps = CoilStack::zeros(coils, h, w);
    for c in 0..coils {
        for p in 0..n {
            let gv = g_v.coil(c)[p];
            g_x[p] += maps.coil(c)[p].conj() * gv;
            g_maps.coil_mut(c)[p] = x_hat.data()[p].conj() * gv;
        }
    }
    let parts = LossParts {
        img,
        ksp,
        total: cfg.w_img * img + cfg.w_ksp * ksp,
    };
    Ok((parts, LossGrads { x_hat: g_x, maps: g_maps }))
}
