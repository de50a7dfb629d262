use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::pipeline::ReconModel;
use super::{NetParams, TrainConfig};
use crate::complex::{CoilKspace, ComplexImage, SamplingMask};
use crate::error::{Error, Result};
use crate::sim::{derive_seed, AcquisitionRecord};

/// One training example: measured k-space, its mask and the ground truth.
#[derive(Clone, Copy, Debug)]
pub struct TrainSample<'a> {
    pub kspace: &'a CoilKspace,
    pub mask: &'a SamplingMask,
    pub truth: &'a ComplexImage,
}

impl<'a> From<&'a AcquisitionRecord> for TrainSample<'a> {
    fn from(rec: &'a AcquisitionRecord) -> Self {
        Self {
            kspace: &rec.kspace,
            mask: &rec.mask,
            truth: &rec.truth,
        }
    }
}

/// Slice-mean losses over one epoch and λ at its end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub img: f64,
    pub ksp: f64,
    pub total: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub log: Vec<EpochLog>,
    /// Whether the last epoch's total loss is below the first's.
    pub trend_ok: bool,
}

/// Seeded shuffle of `0..n` split into consecutive batches.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch{epoch}")));
    order.shuffle(&mut rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Mini-batch Adam over `samples`. Gradients are averaged over each batch
/// in slice order. `on_checkpoint` is called every `cfg.checkpoint_every`
/// epochs and after the last one.
pub fn train(
    model: &ReconModel,
    samples: &[TrainSample<'_>],
    init: NetParams,
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &NetParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::BadDims("no training samples".into()));
    }
    if init.len() != model.param_len() {
        return Err(Error::ShapeMismatch(format!(
            "initial parameters have {} entries, model needs {}",
            init.len(),
            model.param_len()
        )));
    }
    for s in samples {
        model.check_input(s.kspace, s.mask)?;
    }
    let mut params = init;
    let mut state = AdamState::new(params.len());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut sums = [0.0; 3];
        for batch in epoch_batches(samples.len(), cfg.batch, cfg.seed, epoch) {
            params.zero_grads();
            let mut batch_total = 0.0;
            for &i in &batch {
                let s = &samples[i];
                let parts = model.loss_and_grad(&params.values, s.kspace, s.mask, s.truth, cfg, &mut params.grads)?;
                sums[0] += parts.img;
                sums[1] += parts.ksp;
                sums[2] += parts.total;
                batch_total += parts.total;
            }
            let diverged = |params: &NetParams| Error::Divergence {
                epoch,
                last_good: Box::new(NetParams::from_values(params.values.clone())),
            };
            if !batch_total.is_finite() {
                return Err(diverged(&params));
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<f64> = params.grads.iter().map(|g| g * scale).collect();
            match adam_step(&mut params.values, &grads, &mut state, cfg) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(_)) => return Err(diverged(&params)),
                Err(e) => return Err(e),
            }
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            img: sums[0] / n,
            ksp: sums[1] / n,
            total: sums[2] / n,
            lambda: params.lambda(),
        };
        log::info!(
            "epoch {epoch}: total {:.6} (img {:.6}, ksp {:.6}) λ {:.4} in {:.1}s",
            entry.total,
            entry.img,
            entry.ksp,
            entry.lambda,
            started.elapsed().as_secs_f64()
        );
        log.push(entry);
        if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) || epoch == cfg.epochs {
            on_checkpoint(epoch, &params)?;
        }
    }
    let trend_ok = match (log.first(), log.last()) {
        (Some(a), Some(b)) => b.total < a.total,
        _ => true,
    };
    if !trend_ok {
        log::warn!("training loss did not decrease over the run");
    }
    params.zero_grads();
    Ok(TrainOutcome {
        params,
        log,
        trend_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_partition_every_epoch() {
        for epoch in 1..5 {
            let batches = epoch_batches(10, 4, 7, epoch);
            assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
            let mut all: Vec<usize> = batches.concat();
            all.sort();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ordering_is_seeded() {
        assert_eq!(epoch_batches(24, 4, 3, 2), epoch_batches(24, 4, 3, 2));
        assert_ne!(epoch_batches(24, 4, 3, 2), epoch_batches(24, 4, 3, 3));
        assert_ne!(epoch_batches(24, 4, 3, 2), epoch_batches(24, 4, 4, 2));
    }
}
