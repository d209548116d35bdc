use rand::Rng;
use rand_distr::StandardNormal;

use super::denoiser::TinyDenoiser;
use super::schedule::NoiseSchedule;
use super::DiffusionError;
use crate::conditioning::ChunkCondition;
use crate::nn::{Adam, Graph, Tensor};

/// One supervised sample: clean chunk latents, a timestep and its noise.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub cond: ChunkCondition,
    pub z0: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

impl TrainExample {
    /// Draws `t` uniformly from `[1, T]` and standard normal noise.
    pub fn draw(cond: ChunkCondition, z0: Vec<f64>, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Self {
        let t = rng.random_range(1..=schedule.steps());
        let eps = (0..z0.len()).map(|_| rng.sample(StandardNormal)).collect();
        Self { cond, z0, t, eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Mean over the batch of the per-sample v-prediction MSE.
pub fn batch_loss(model: &TinyDenoiser, g: &mut Graph, batch: &[TrainExample], schedule: &NoiseSchedule) -> Result<crate::nn::Var, DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::Training("empty batch".into()));
    }
    let mut total = None;
    for ex in batch {
        let z_t = schedule.q_sample(&ex.z0, ex.t, &ex.eps)?;
        let target = schedule.v_target(&ex.z0, &ex.eps, ex.t);
        let pred = model.forward(g, &z_t, &ex.cond, ex.t);
        let shape = g.shape(pred).to_vec();
        let l = g.mse(pred, Tensor::new(shape, target));
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l),
        });
    }
    let total = total.unwrap();
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Forward, backward and one clipped Adam update.
pub fn train_step(
    model: &mut TinyDenoiser,
    adam: &mut Adam,
    batch: &[TrainExample],
    schedule: &NoiseSchedule,
) -> Result<StepStats, DiffusionError> {
    let mut g = Graph::new();
    let loss = batch_loss(model, &mut g, batch, schedule)?;
    let value = g.value(loss).data[0];
    if !value.is_finite() {
        let ts: Vec<usize> = batch.iter().map(|e| e.t).collect();
        return Err(DiffusionError::NonFinite(format!(
            "loss {value} at optimizer step {} (timesteps {ts:?})",
            adam.step_count()
        )));
    }
    let grads = g.backward(loss, model.params.len());
    let grad_norm = adam.update(&mut model.params, &grads);
    Ok(StepStats { loss: value, grad_norm })
}
