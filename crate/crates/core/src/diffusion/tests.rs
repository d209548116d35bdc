use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::conditioning::{ChunkCondition, STATIC_CHANNELS};
use crate::nn::{Adam, AdamConfig, Graph};

pub(crate) fn random_condition(views: usize, frames: usize, h: usize, w: usize, rng: &mut impl Rng) -> ChunkCondition {
    let n = h * w;
    let mut spatial: Vec<f64> = (0..views * frames * STATIC_CHANNELS * n).map(|_| rng.sample(StandardNormal)).collect();
    for r in 0..views * frames {
        let base = (r * STATIC_CHANNELS + STATIC_CHANNELS - 1) * n;
        spatial[base..base + n].iter_mut().for_each(|v| *v = 1.0);
    }
    ChunkCondition {
        views,
        frames,
        height: h,
        width: w,
        spatial,
        deltas: (0..frames * 7).map(|_| rng.random_range(-0.02..0.02)).collect(),
        delta_dim: 7,
        style_patches: (0..5 * 4 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        style_sets: 5,
        patches: 4,
        dropped: false,
    }
}

fn randn(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn schedule() -> NoiseSchedule {
    make_linear_schedule(1000, 0.00085, 0.0120).unwrap()
}

#[test]
fn v_round_trip() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let t = rng.random_range(1..=1000);
        let z0 = randn(8, &mut rng);
        let eps = randn(8, &mut rng);
        let zt = s.q_sample(&z0, t, &eps).unwrap();
        let back = s.predict_z0_from_v(&zt, &s.v_target(&z0, &eps, t), t);
        assert!(z0.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}

struct OracleDenoiser<'a> {
    z0: Vec<f64>,
    schedule: &'a NoiseSchedule,
    calls: Cell<usize>,
}

impl Denoiser for OracleDenoiser<'_> {
    fn predict_v(&self, z_t: &[f64], _cond: &ChunkCondition, t: usize) -> Result<Vec<f64>, DiffusionError> {
        self.calls.set(self.calls.get() + 1);
        let ab = self.schedule.alpha_bar(t);
        let eps: Vec<f64> = z_t.iter().zip(&self.z0).map(|(z, x)| (z - ab.sqrt() * x) / (1.0 - ab).sqrt()).collect();
        Ok(self.schedule.v_target(&self.z0, &eps, t))
    }
}

#[test]
fn oracle_denoiser_is_a_fixed_point() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cond = random_condition(1, 2, 2, 3, &mut rng);
    let z0 = randn(2 * 4 * 6, &mut rng);
    for steps in [1, 2, 7, 16, 50] {
        let d = OracleDenoiser { z0: z0.clone(), schedule: &s, calls: Cell::new(0) };
        let out = sample_chunk(&d, &cond, &s, steps, 1.0, &mut rng).unwrap();
        assert!(out.iter().zip(&z0).all(|(a, b)| (a - b).abs() < 1e-6), "steps {steps}");
        assert_eq!(d.calls.get(), steps);
    }
    let d = OracleDenoiser { z0: z0.clone(), schedule: &s, calls: Cell::new(0) };
    sample_chunk(&d, &cond, &s, 16, 2.0, &mut rng).unwrap();
    assert_eq!(d.calls.get(), 32);
}

fn small_model(seed: u64) -> TinyDenoiser {
    TinyDenoiser::new(DenoiserConfig { c_base: 8, ctx_dim: 16, delta_tokens: 4, attn_dim: 8, time_dim: 16, seed, ..Default::default() })
}

#[test]
fn sampling_is_deterministic() {
    let s = schedule();
    let mut m = small_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    m.params.randomize(0.2, &mut rng);
    let cond = random_condition(2, 2, 4, 4, &mut rng);
    let a = sample_chunk(&m, &cond, &s, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let b = sample_chunk(&m, &cond, &s, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_head_loss_equals_target_power() {
    let s = schedule();
    let m = small_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cond = random_condition(1, 3, 4, 4, &mut rng);
    let ex = TrainExample::draw(cond, randn(3 * 4 * 16, &mut rng), &s, &mut rng);
    let mut g = Graph::new();
    let loss = batch_loss(&m, &mut g, std::slice::from_ref(&ex), &s).unwrap();
    let v = s.v_target(&ex.z0, &ex.eps, ex.t);
    let expect = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    assert!((g.value(loss).data[0] - expect).abs() < 1e-12);
}

#[test]
fn overfits_one_sample() {
    let s = schedule();
    let mut m = small_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cond = random_condition(1, 2, 4, 4, &mut rng);
    let ex = TrainExample::draw(cond, randn(2 * 4 * 16, &mut rng), &s, &mut rng);
    let mut adam = Adam::new(AdamConfig { lr: 3e-3, ..Default::default() }, &m.params);
    let first = train_step(&mut m, &mut adam, std::slice::from_ref(&ex), &s).unwrap().loss;
    let mut last = first;
    for _ in 0..199 {
        last = train_step(&mut m, &mut adam, std::slice::from_ref(&ex), &s).unwrap().loss;
    }
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn single_view_ignores_view_attention() {
    let mut m = small_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    m.params.randomize(0.2, &mut rng);
    let cond = random_condition(1, 2, 4, 4, &mut rng);
    let z = randn(2 * 4 * 16, &mut rng);
    let a = m.predict_v(&z, &cond, 500).unwrap();
    for name in ["view_attn.wq", "view_attn.wk", "view_attn.wv", "view_attn.wo", "view_attn.bo"] {
        let id = m.params.find(name).unwrap();
        m.params.get_mut(id).data.iter_mut().for_each(|v| *v += 1.0);
    }
    assert_eq!(a, m.predict_v(&z, &cond, 500).unwrap());
}

#[test]
fn two_view_permutation_equivariance() {
    let mut m = small_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    m.params.randomize(0.2, &mut rng);
    let cond = random_condition(2, 2, 4, 4, &mut rng);
    let per_view = 2 * 4 * 16;
    let z = randn(2 * per_view, &mut rng);
    let a = m.predict_v(&z, &cond, 300).unwrap();
    let swapped = cond.select_views(&[1, 0]);
    let mut zs = z[per_view..].to_vec();
    zs.extend_from_slice(&z[..per_view]);
    let b = m.predict_v(&zs, &swapped, 300).unwrap();
    assert_eq!(&a[..per_view], &b[per_view..]);
    assert_eq!(&a[per_view..], &b[..per_view]);
    // views do interact
    let mut z2 = z.clone();
    z2[per_view] += 1.0;
    let c = m.predict_v(&z2, &cond, 300).unwrap();
    assert_ne!(&a[..per_view], &c[..per_view]);
}
