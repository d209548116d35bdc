use rand::Rng;
use rand_distr::StandardNormal;

use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use super::DiffusionError;
use crate::codec::LATENT_CHANNELS;
use crate::conditioning::ChunkCondition;

/// Deterministic DDIM (eta = 0) from pure noise over `steps` evenly spaced
/// timesteps. With `guidance != 1` the unconditional branch uses the
/// dropped condition and `v = v_u + g (v_c - v_u)`.
pub fn sample_chunk(
    denoiser: &dyn Denoiser,
    cond: &ChunkCondition,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, DiffusionError> {
    let len = cond.rows() * LATENT_CHANNELS * cond.height * cond.width;
    let z: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    sample_from(denoiser, cond, schedule, steps, guidance, z)
}

/// DDIM from a given initial `z_T`.
pub fn sample_from(
    denoiser: &dyn Denoiser,
    cond: &ChunkCondition,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance: f64,
    mut z: Vec<f64>,
) -> Result<Vec<f64>, DiffusionError> {
    let ts = schedule.sampling_timesteps(steps)?;
    let uncond = (guidance != 1.0).then(|| cond.dropped_copy());
    let mut z0 = z.clone();
    for (i, &t) in ts.iter().enumerate() {
        let vc = denoiser.predict_v(&z, cond, t)?;
        let v = match &uncond {
            None => vc,
            Some(u) => {
                let vu = denoiser.predict_v(&z, u, t)?;
                vu.iter().zip(&vc).map(|(u, c)| u + guidance * (c - u)).collect()
            }
        };
        z0 = schedule.predict_z0_from_v(&z, &v, t);
        let eps = schedule.predict_eps_from_v(&z, &v, t);
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let ab = schedule.alpha_bar(t_prev);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        z = z0.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();
    }
    Ok(z0)
}
