//! Exploration policy for open-loop rollouts that should not terminate early.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use acwm::geometry::{wrap_angle, ActionFrame};
use acwm::world::{Aabb, Observation, Policy, PolicyError};

/// Bounded random walk of the EEF with a periodic open/close cycle.
pub struct RandomWalkPolicy {
    rng: ChaCha8Rng,
    chunk: usize,
    step_m: f64,
    bounds: Aabb,
    period: usize,
    t: usize,
}

impl RandomWalkPolicy {
    pub fn new(seed: u64, chunk: usize, bounds: Aabb) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), chunk, step_m: 0.015, bounds, period: 23, t: 0 }
    }
}

impl Policy for RandomWalkPolicy {
    fn id(&self) -> String {
        "random_walk".into()
    }

    fn next_chunk(&mut self, obs: &Observation) -> Result<Vec<ActionFrame>, PolicyError> {
        let mut cur = obs.action.clone();
        let mut out = Vec::with_capacity(self.chunk);
        for _ in 0..self.chunk {
            for s in cur.iter_mut() {
                let p = &mut s.pose.position;
                for i in 0..3 {
                    p[i] += self.rng.random_range(-self.step_m..self.step_m);
                }
                *p = self.bounds.clamp(p);
                s.pose.rpy.yaw = wrap_angle(s.pose.rpy.yaw + self.rng.random_range(-0.1..0.1));
                s.openness = if (self.t / self.period) % 2 == 0 { 1.0 } else { 0.2 };
            }
            self.t += 1;
            out.push(cur.clone());
        }
        Ok(out)
    }
}
