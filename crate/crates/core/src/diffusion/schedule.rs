use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Linear-in-beta schedule; timesteps are 1-based, `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_first: f64, beta_last: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 2 {
        return Err(DiffusionError::Schedule(format!("need at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_first && beta_first <= beta_last && beta_last < 1.0) {
        return Err(DiffusionError::Schedule(format!("invalid beta range [{beta_first}, {beta_last}]")));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_first + i as f64 / (steps - 1) as f64 * (beta_last - beta_first))
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut acc = 1.0;
    let alpha_bars = alphas
        .iter()
        .map(|a| {
            acc *= a;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Timestep { t, steps: self.steps() });
        }
        Ok(())
    }

    /// `sqrt(ab) * z0 + sqrt(1 - ab) * eps`.
    pub fn q_sample(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
    }

    /// `sqrt(ab) * eps - sqrt(1 - ab) * z0`.
    pub fn v_target(&self, z0: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.iter().zip(eps).map(|(z, e)| a * e - s * z).collect()
    }

    /// `sqrt(ab) * z_t - sqrt(1 - ab) * v`.
    pub fn predict_z0_from_v(&self, z_t: &[f64], v: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        z_t.iter().zip(v).map(|(z, v)| a * z - s * v).collect()
    }

    /// `sqrt(1 - ab) * z_t + sqrt(ab) * v`.
    pub fn predict_eps_from_v(&self, z_t: &[f64], v: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        z_t.iter().zip(v).map(|(z, v)| s * z + a * v).collect()
    }

    /// `count` timesteps evenly spread over `[1, T]`, descending, starting at T.
    pub fn sampling_timesteps(&self, count: usize) -> Result<Vec<usize>, DiffusionError> {
        let t_max = self.steps();
        if count == 0 || count > t_max {
            return Err(DiffusionError::Schedule(format!("sampler steps {count} outside [1, {t_max}]")));
        }
        if count == 1 {
            return Ok(vec![t_max]);
        }
        let mut ts: Vec<usize> = (0..count)
            .map(|i| t_max - ((i * (t_max - 1)) as f64 / (count - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }
}
