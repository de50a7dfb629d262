//! Encoder-decoder with skip connections, average-pool downsampling and
//! nearest-neighbor upsampling, operating on a slice of a flat parameter
//! vector.

use rand::Rng;

use super::layers::{
    avg_pool, avg_pool_backward, concat, conv_backward, conv_forward, relu_backward, relu_inplace,
    split, upsample, upsample_backward, ConvShape, FeatureMap,
};
use super::NetSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    spec: NetSpec,
    convs: Vec<ConvShape>,
    offset: usize,
    len: usize,
}

/// Activations kept from the forward pass for the backward pass.
/// `inputs[j]` is the input to conv `j`, `outputs[j]` its post-ReLU output.
#[derive(Clone, Debug)]
pub struct UNetTrace {
    inputs: Vec<FeatureMap>,
    outputs: Vec<FeatureMap>,
}

impl UNetTrace {
    /// Post-activation outputs of every convolution.
    pub fn activations(&self) -> &[FeatureMap] {
        &self.outputs
    }
}

impl UNet {
    /// Lays out the network's convolutions starting at `offset`.
    pub fn new(spec: NetSpec, offset: usize) -> Self {
        let mut convs = Vec::new();
        let mut cursor = offset;
        let mut push = |cin: usize, cout: usize, kernel: usize| {
            let c = ConvShape {
                cin,
                cout,
                kernel,
                offset: cursor,
            };
            cursor += c.len();
            convs.push(c);
        };
        let k = spec.kernel;
        let enc = &spec.enc_channels;
        let mut cin = spec.in_channels;
        for &e in enc {
            push(cin, e, k);
            push(e, e, k);
            cin = e;
        }
        let bottom = 2 * enc[enc.len() - 1];
        push(cin, bottom, k);
        push(bottom, bottom, k);
        let mut prev = bottom;
        for &e in enc.iter().rev() {
            push(prev, e, k);
            push(if spec.skip_connections { 2 * e } else { e }, e, k);
            push(e, e, k);
            prev = e;
        }
        push(prev, spec.out_channels, 1);
        let len = cursor - offset;
        Self {
            spec,
            convs,
            offset,
            len,
        }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn convs(&self) -> &[ConvShape] {
        &self.convs
    }

    fn depth(&self) -> usize {
        self.spec.enc_channels.len()
    }

    /// Uniform `+-sqrt(6 / (fan_in + fan_out))` weights, zero biases, and an
    /// all-zero output layer.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let last = self.convs.len() - 1;
        for (j, c) in self.convs.iter().enumerate() {
            let (w, b) = params[c.offset..c.offset + c.len()].split_at_mut(c.weight_len());
            b.iter_mut().for_each(|v| *v = 0.0);
            if j == last {
                w.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let kk = (c.kernel * c.kernel) as f64;
            let bound = (6.0 / ((c.cin as f64 + c.cout as f64) * kk)).sqrt();
            w.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.depth();
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::DimsNotDivisible {
                height,
                width,
                depth: self.depth(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], input: &FeatureMap) -> Result<(FeatureMap, UNetTrace)> {
        if input.channels != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} channels, got {}",
                self.spec.in_channels, input.channels
            )));
        }
        self.check_dims(input.height, input.width)?;
        let mut trace = UNetTrace {
            inputs: Vec::with_capacity(self.convs.len()),
            outputs: Vec::with_capacity(self.convs.len()),
        };
        let mut j = 0;
        let mut layer = |x: FeatureMap, relu: bool, trace: &mut UNetTrace| -> FeatureMap {
            let mut y = conv_forward(&self.convs[j], params, &x);
            if relu {
                relu_inplace(&mut y);
            }
            j += 1;
            trace.inputs.push(x);
            trace.outputs.push(y.clone());
            y
        };
        let mut x = input.clone();
        let mut skips = Vec::with_capacity(self.depth());
        for _ in 0..self.depth() {
            let a = layer(x, true, &mut trace);
            let b = layer(a, true, &mut trace);
            x = avg_pool(&b);
            skips.push(b);
        }
        let c = layer(x, true, &mut trace);
        x = layer(c, true, &mut trace);
        for skip in skips.iter().rev() {
            let v = layer(upsample(&x), true, &mut trace);
            let merged = if self.spec.skip_connections { concat(skip, &v) } else { v };
            let m = layer(merged, true, &mut trace);
            x = layer(m, true, &mut trace);
        }
        let out = layer(x, false, &mut trace);
        Ok((out, trace))
    }

    /// Accumulates parameter gradients into `grads` (indexed like `params`)
    /// and optionally returns the gradient with respect to the input.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &UNetTrace,
        grad_out: &FeatureMap,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<FeatureMap> {
        let depth = self.depth();
        let mut j = self.convs.len() - 1;
        let back = |j: usize, g: &FeatureMap, grads: &mut [f64], want: bool| {
            conv_backward(&self.convs[j], params, &trace.inputs[j], g, grads, want)
        };
        let relu = |j: usize, mut g: FeatureMap| {
            relu_backward(&trace.outputs[j], &mut g);
            g
        };
        let mut g = back(j, grad_out, grads, true).expect("input grad");
        let mut skip_grads: Vec<Option<FeatureMap>> = vec![None; depth];
        for level in 0..depth {
            j -= 1;
            g = back(j, &relu(j, g), grads, true).unwrap();
            j -= 1;
            let gm = back(j, &relu(j, g), grads, true).unwrap();
            let gv = if self.spec.skip_connections {
                let (gs, gv) = split(gm, self.spec.enc_channels[level]);
                skip_grads[level] = Some(gs);
                gv
            } else {
                gm
            };
            j -= 1;
            g = upsample_backward(&back(j, &relu(j, gv), grads, true).unwrap());
        }
        j -= 1;
        g = back(j, &relu(j, g), grads, true).unwrap();
        j -= 1;
        g = back(j, &relu(j, g), grads, true).unwrap();
        for level in (0..depth).rev() {
            let mut gb = avg_pool_backward(&g);
            if let Some(gs) = &skip_grads[level] {
                gb.data.iter_mut().zip(&gs.data).for_each(|(a, b)| *a += b);
            }
            j -= 1;
            let ga = back(j, &relu(j, gb), grads, true).unwrap();
            j -= 1;
            let want = level > 0 || want_input_grad;
            match back(j, &relu(j, ga), grads, want) {
                Some(gi) => g = gi,
                None => return None,
            }
        }
        debug_assert_eq!(j, 0);
        Some(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec(skip: bool) -> NetSpec {
        NetSpec {
            in_channels: 2,
            out_channels: 3,
            enc_channels: vec![3, 4],
            kernel: 3,
            skip_connections: skip,
        }
    }

    fn randomized(net: &UNet, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..net.len()).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn parameter_count_matches_layout() {
        let net = UNet::new(small_spec(true), 0);
        let c = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let expected = c(2, 3, 3) + c(3, 3, 3) + c(3, 4, 3) + c(4, 4, 3)
            + c(4, 8, 3) + c(8, 8, 3)
            + c(8, 4, 3) + c(8, 4, 3) + c(4, 4, 3)
            + c(4, 3, 3) + c(6, 3, 3) + c(3, 3, 3)
            + c(3, 3, 1);
        assert_eq!(net.len(), expected);
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let net = UNet::new(small_spec(true), 0);
        let mut params = vec![0.0; net.len()];
        net.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = FeatureMap {
            channels: 2,
            height: 8,
            width: 12,
            data: (0..2 * 96).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let (out, _) = net.forward(&params, &input).unwrap();
        assert_eq!((out.channels, out.height, out.width), (3, 8, 12));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_dims() {
        let net = UNet::new(small_spec(true), 0);
        let params = vec![0.0; net.len()];
        let input = FeatureMap::zeros(2, 10, 8);
        assert!(matches!(
            net.forward(&params, &input),
            Err(Error::DimsNotDivisible { depth: 2, .. })
        ));
        assert!(matches!(
            net.forward(&params, &FeatureMap::zeros(3, 8, 8)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for skip in [true, false] {
            let net = UNet::new(small_spec(skip), 0);
            let params = randomized(&net, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let input = FeatureMap {
                channels: 2,
                height: 8,
                width: 8,
                data: (0..128).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let probe: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let objective = |p: &[f64], x: &FeatureMap| -> f64 {
                let (y, _) = net.forward(p, x).unwrap();
                y.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let (_, trace) = net.forward(&params, &input).unwrap();
            let g = FeatureMap {
                channels: 3,
                height: 8,
                width: 8,
                data: probe.clone(),
            };
            let mut grads = vec![0.0; net.len()];
            let gx = net.backward(&params, &trace, &g, &mut grads, true).unwrap();
            let h = 1e-6;
            let mut checked = 0;
            for i in (0..net.len()).step_by(7) {
                let mut pp = params.clone();
                pp[i] += h;
                let mut pm = params.clone();
                pm[i] -= h;
                let fd = (objective(&pp, &input) - objective(&pm, &input)) / (2.0 * h);
                let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
                // ReLU kinks can make isolated coordinates disagree
                if err > 1e-4 {
                    assert!(err < 1.0, "param {i}: fd {fd} vs {}", grads[i]);
                } else {
                    checked += 1;
                }
            }
            assert!(checked > net.len() / 7 * 9 / 10);
            for i in 0..input.data.len() {
                let mut xp = input.clone();
                xp.data[i] += h;
                let mut xm = input.clone();
                xm.data[i] -= h;
                let fd = (objective(&params, &xp) - objective(&params, &xm)) / (2.0 * h);
                assert!((fd - gx.data[i]).abs() < 1e-5 * fd.abs().max(1.0), "input {i}");
            }
        }
    }
}
