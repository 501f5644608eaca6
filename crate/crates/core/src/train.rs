//! Shared mini-batch training loop: per-sample tapes, ordered gradient
//! reduction, AdamW updates.
//!
//! Samples within a batch may run on worker threads; every random draw is
//! derived from `(seed, epoch, sample index)` and gradients are summed in
//! sample order, so results do not depend on the worker count.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, AdamWState, Grid, NodeId, Tape};
pub(crate) use crate::rng::stream as derive_rng;

/// Build the per-sample loss graph. Receives a fresh tape, the parameter
/// nodes in declaration order, the dataset index, and the sample's derived
/// RNG stream.
pub(crate) trait LossBuilder: Sync {
    fn build(&self, tape: &mut Tape, params: &[NodeId], index: usize, rng: &mut ChaCha8Rng)
        -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &[NodeId], usize, &mut ChaCha8Rng) -> Result<NodeId> + Sync,
{
    fn build(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        self(tape, params, index, rng)
    }
}

/// Run `epochs` passes over `n_samples` shuffled samples, updating `params`
/// in place. Returns the per-epoch mean loss.
pub(crate) fn run_epochs(
    params: &mut Vec<Grid>,
    n_samples: usize,
    epochs: usize,
    batch_size: usize,
    optimizer: AdamWConfig,
    seed: u64,
    builder: &dyn LossBuilder,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if epochs == 0 || batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be >= 1"));
    }
    let mut opt = AdamWState::for_params(optimizer, params)?;
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut derive_rng(seed, epoch as u64, u64::MAX));
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(batch_size) {
            let per_sample: Vec<Result<(f64, Vec<Grid>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let mut rng = derive_rng(seed, epoch as u64, idx as u64);
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> =
                        params.iter().map(|p| tape.input(p.clone())).collect();
                    let loss_id = builder.build(&mut tape, &ids, idx, &mut rng)?;
                    if tape.value(loss_id).len() != 1 {
                        return Err(Error::invalid("loss must be scalar"));
                    }
                    let loss = tape.value(loss_id).item() as f64;
                    let grads = tape.backward(loss_id)?;
                    let g: Vec<Grid> = ids
                        .iter()
                        .map(|id| grads.get_or_zeros(*id, tape.value(*id).shape()))
                        .collect();
                    Ok((loss, g))
                })
                .collect();

            let mut batch_grads: Vec<Grid> =
                params.iter().map(|p| Grid::zeros(p.shape())).collect();
            let mut batch_loss = 0.0f64;
            for result in per_sample {
                let (loss, grads) = result?;
                batch_loss += loss;
                for (acc, g) in batch_grads.iter_mut().zip(&grads) {
                    let dst = acc.data_mut();
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in &mut batch_grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            opt.step(params, &batch_grads)?;
            epoch_loss += batch_loss * batch.len() as f64;
        }
        trace.push(epoch_loss / n_samples as f64);
    }
    Ok(trace)
}
