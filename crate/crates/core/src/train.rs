//! Shared mini-batch training loop.

use psam_nn::{load_state_dict, state_dict, zero_grad, Adam, Parameterized};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, EpochLoss};
use crate::{Error, Result};

pub(crate) struct LoopConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

/// Runs `epochs` shuffled passes over `n` items. `step` computes the loss of
/// one batch and accumulates parameter gradients; returning `None` skips the
/// batch. A non-finite loss restores the weights of the last completed epoch
/// and reports them through [`Error::NonFiniteLoss`].
pub(crate) fn train_loop<M: Parameterized>(
    model: &mut M,
    n: usize,
    cfg: &LoopConfig,
    rng: &mut ChaCha8Rng,
    mut step: impl FnMut(&mut M, &[usize], &mut ChaCha8Rng) -> Result<Option<f64>>,
    snapshot: impl Fn(&mut M, Vec<EpochLoss>) -> Checkpoint,
) -> Result<Vec<EpochLoss>> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidInput("learning rate must be positive".into()));
    }
    let mut opt = Adam::new(cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = state_dict(model);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            zero_grad(model);
            let Some(loss) = step(model, batch, rng)? else {
                continue;
            };
            if !loss.is_finite() {
                load_state_dict(model, &last_good)?;
                let ckpt = snapshot(model, log);
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_good: Box::new(ckpt),
                });
            }
            opt.step(model);
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let loss = if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        };
        log::info!("epoch {epoch}/{}: loss {loss:.6}", cfg.epochs);
        log.push(EpochLoss { epoch, loss });
        last_good = state_dict(model);
    }
    Ok(log)
}
