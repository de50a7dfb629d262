//! Central finite-difference check of the analytic pipeline gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pipeline::ReconModel;
use super::train::TrainSample;
use super::{NetParams, TrainConfig};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates rejected because a perturbation crossed a ReLU or
    /// support boundary.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Coordinates whose derivative is below `min_grad`, compared by
    /// absolute error instead.
    pub small: usize,
    pub max_small_abs_err: f64,
}

/// Entries compared: λ, then rounds of one random weight and one random
/// bias from every layer, then uniformly random indices. Stratifying by
/// layer keeps wide layers, whose individual weights carry tiny
/// derivatives, from crowding out the rest.
fn candidate_order(model: &ReconModel, rng: &mut ChaCha8Rng) -> Vec<usize> {
    const ROUNDS: usize = 64;
    let mut order = vec![model.lambda_index()];
    let convs: Vec<_> = model.csm_net().convs().iter().chain(model.denoiser_net().convs()).collect();
    for _ in 0..ROUNDS {
        for conv in &convs {
            order.push(conv.offset + rng.random_range(0..conv.weight_len()));
            order.push(conv.offset + conv.weight_len() + rng.random_range(0..conv.cout));
        }
    }
    let mut rest: Vec<usize> = (0..model.param_len()).collect();
    rest.shuffle(rng);
    order.extend(rest);
    let mut seen = std::collections::HashSet::new();
    order.retain(|i| seen.insert(*i));
    order
}

/// Compares `coords` analytic partial derivatives of the total loss with
/// `(L(p + h) - L(p - h)) / 2h` by relative error. Derivatives smaller than
/// `min_grad` in magnitude sit below the difference quotient's rounding
/// noise; they are compared by absolute error and not counted.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &ReconModel,
    params: &NetParams,
    sample: &TrainSample<'_>,
    cfg: &TrainConfig,
    coords: usize,
    step: f64,
    min_grad: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut grads = vec![0.0; params.len()];
    model.loss_and_grad(&params.values, sample.kspace, sample.mask, sample.truth, cfg, &mut grads)?;
    let (_, base) = model.loss(&params.values, sample.kspace, sample.mask, sample.truth, cfg)?;
    let signature = base.kink_signature();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst_index: 0,
        small: 0,
        max_small_abs_err: 0.0,
    };
    let mut values = params.values.clone();
    for i in candidate_order(model, &mut rng) {
        if report.checked == coords {
            break;
        }
        let orig = values[i];
        values[i] = orig + step;
        let (plus, tp) = model.loss(&values, sample.kspace, sample.mask, sample.truth, cfg)?;
        values[i] = orig - step;
        let (minus, tm) = model.loss(&values, sample.kspace, sample.mask, sample.truth, cfg)?;
        values[i] = orig;
        if tp.kink_signature() != signature || tm.kink_signature() != signature {
            report.skipped += 1;
            continue;
        }
        let fd = (plus.total - minus.total) / (2.0 * step);
        let scale = fd.abs().max(grads[i].abs());
        if scale < min_grad {
            report.small += 1;
            report.max_small_abs_err = report.max_small_abs_err.max((fd - grads[i]).abs());
            continue;
        }
        let err = (fd - grads[i]).abs() / scale;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
