use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::codec::LATENT_CHANNELS;
use crate::conditioning::{sinusoidal, ChunkCondition, DeltaResampler, StyleTokenizer, STATIC_CHANNELS};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

/// Predicts v for every view/frame of a chunk.
pub trait Denoiser {
    /// `z_t` is `[views * frames, 4, h, w]`, flattened.
    fn predict_v(&self, z_t: &[f64], cond: &ChunkCondition, t: usize) -> Result<Vec<f64>, DiffusionError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub c_base: usize,
    pub ctx_dim: usize,
    pub delta_tokens: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    /// 7 per arm.
    pub delta_dim: usize,
    /// Condition frame plus memory frames.
    pub style_sets: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { c_base: 32, ctx_dim: 64, delta_tokens: 8, attn_dim: 32, time_dim: 64, delta_dim: 7, style_sets: 5, seed: 0 }
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Attention {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

/// Small UNet: stem, two stride-2 blocks, a bottleneck with context
/// cross-attention, cross-view attention and a conv, two upsampling blocks
/// with skips, and a zero-initialised head. Each block receives a
/// per-channel timestep bias.
#[derive(Debug, Clone)]
pub struct TinyDenoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    stem: Conv,
    down1: Conv,
    down2: Conv,
    mid: Conv,
    up2: Conv,
    up1: Conv,
    head: Conv,
    ctx_attn: Attention,
    view_attn: Attention,
    t_w: ParamId,
    t_b: ParamId,
    /// Per block (stem, down1, down2, mid, up2, up1) projection of the time embedding.
    t_proj: Vec<(ParamId, ParamId)>,
    resampler: DeltaResampler,
    style: StyleTokenizer,
}

fn he(cin: usize, k: usize) -> f64 {
    (2.0 / (cin * k * k) as f64).sqrt()
}

impl TinyDenoiser {
    pub fn new(config: DenoiserConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let c = config.c_base;
        let cin = LATENT_CHANNELS + STATIC_CHANNELS;
        let conv = |p: &mut ParamStore, name: &str, ci: usize, co: usize, stride: usize, zero: bool, rng: &mut ChaCha8Rng| {
            let w = if zero {
                p.add_zeros(&format!("{name}.w"), &[co, ci, 3, 3])
            } else {
                p.add_normal(&format!("{name}.w"), &[co, ci, 3, 3], he(ci, 3), rng)
            };
            let b = p.add_zeros(&format!("{name}.b"), &[co]);
            Conv { w, b, stride }
        };
        let stem = conv(&mut p, "stem", cin, c, 1, false, &mut rng);
        let down1 = conv(&mut p, "down1", c, c, 2, false, &mut rng);
        let down2 = conv(&mut p, "down2", c, 2 * c, 2, false, &mut rng);
        let mid = conv(&mut p, "mid", 2 * c, 2 * c, 1, false, &mut rng);
        let up2 = conv(&mut p, "up2", 3 * c, c, 1, false, &mut rng);
        let up1 = conv(&mut p, "up1", 2 * c, c, 1, false, &mut rng);
        let head = conv(&mut p, "head", c, LATENT_CHANNELS, 1, true, &mut rng);
        let a = config.attn_dim;
        let attn = |p: &mut ParamStore, name: &str, dq: usize, dkv: usize, dout: usize, rng: &mut ChaCha8Rng| Attention {
            wq: p.add_normal(&format!("{name}.wq"), &[dq, a], 1.0 / (dq as f64).sqrt(), rng),
            bq: p.add_zeros(&format!("{name}.bq"), &[a]),
            wk: p.add_normal(&format!("{name}.wk"), &[dkv, a], 1.0 / (dkv as f64).sqrt(), rng),
            bk: p.add_zeros(&format!("{name}.bk"), &[a]),
            wv: p.add_normal(&format!("{name}.wv"), &[dkv, a], 1.0 / (dkv as f64).sqrt(), rng),
            bv: p.add_zeros(&format!("{name}.bv"), &[a]),
            wo: p.add_normal(&format!("{name}.wo"), &[a, dout], 0.5 / (a as f64).sqrt(), rng),
            bo: p.add_zeros(&format!("{name}.bo"), &[dout]),
        };
        let ctx_attn = attn(&mut p, "ctx_attn", 2 * c, config.ctx_dim, 2 * c, &mut rng);
        let view_attn = attn(&mut p, "view_attn", 2 * c, 2 * c, 2 * c, &mut rng);
        let td = config.time_dim;
        let t_w = p.add_normal("time.w", &[td, td], 1.0 / (td as f64).sqrt(), &mut rng);
        let t_b = p.add_zeros("time.b", &[td]);
        let t_proj = [("stem", c), ("down1", c), ("down2", 2 * c), ("mid", 2 * c), ("up2", c), ("up1", c)]
            .iter()
            .map(|(name, ch)| {
                (
                    p.add_normal(&format!("{name}.time_w"), &[td, *ch], 0.5 / (td as f64).sqrt(), &mut rng),
                    p.add_zeros(&format!("{name}.time_b"), &[*ch]),
                )
            })
            .collect();
        let resampler =
            DeltaResampler::new(&mut p, "delta", config.delta_dim, config.ctx_dim, config.delta_tokens, &mut rng);
        let style = StyleTokenizer::new(&mut p, "style", config.ctx_dim, &mut rng);
        Self { config, params: p, stem, down1, down2, mid, up2, up1, head, ctx_attn, view_attn, t_w, t_b, t_proj, resampler, style }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn resampler(&self) -> &DeltaResampler {
        &self.resampler
    }

    pub fn style_tokenizer(&self) -> &StyleTokenizer {
        &self.style
    }

    fn conv(&self, g: &mut Graph, x: Var, c: &Conv) -> Var {
        let (w, b) = (g.param(&self.params, c.w), g.param(&self.params, c.b));
        g.conv2d(x, w, b, c.stride, 1)
    }

    fn block(&self, g: &mut Graph, x: Var, c: &Conv, temb: Var, slot: usize, rows: usize) -> Var {
        let h = self.conv(g, x, c);
        let (tw, tb) = (g.param(&self.params, self.t_proj[slot].0), g.param(&self.params, self.t_proj[slot].1));
        let bias = g.linear(temb, tw, tb);
        let bias = g.repeat_leading(bias, rows);
        let h = g.add_channel_bias(h, bias);
        g.silu(h)
    }

    fn lin(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (g.param(&self.params, w), g.param(&self.params, b));
        g.linear(x, w, b)
    }

    /// Context tokens `[1 + delta_tokens + memory, ctx_dim]`: reference style
    /// token, delta-action tokens, memory style tokens.
    pub fn context(&self, g: &mut Graph, cond: &ChunkCondition) -> Var {
        let per = cond.patches * 3;
        let first = Tensor::new(vec![1, cond.patches, 3], cond.style_patches[..per].to_vec());
        let s0 = self.style.forward(g, &self.params, &first);
        let steps = cond.deltas.len() / cond.delta_dim;
        let deltas = Tensor::new(vec![1, steps, cond.delta_dim], cond.deltas.clone());
        let d = self.resampler.forward(g, &self.params, &deltas);
        let d = g.reshape(d, &[self.config.delta_tokens, self.config.ctx_dim]);
        if cond.style_sets > 1 {
            let rest = Tensor::new(vec![cond.style_sets - 1, cond.patches, 3], cond.style_patches[per..].to_vec());
            let sm = self.style.forward(g, &self.params, &rest);
            g.concat(&[s0, d, sm], 0)
        } else {
            g.concat(&[s0, d], 0)
        }
    }

    /// Builds the forward pass; returns predicted v `[rows, 4, h, w]`.
    pub fn forward(&self, g: &mut Graph, z_t: &[f64], cond: &ChunkCondition, t: usize) -> Var {
        let (rows, h, w) = (cond.rows(), cond.height, cond.width);
        let n = h * w;
        let c = self.config.c_base;
        let mut input = Vec::with_capacity(rows * (LATENT_CHANNELS + STATIC_CHANNELS) * n);
        for r in 0..rows {
            input.extend_from_slice(&z_t[r * LATENT_CHANNELS * n..(r + 1) * LATENT_CHANNELS * n]);
            input.extend_from_slice(&cond.spatial[r * STATIC_CHANNELS * n..(r + 1) * STATIC_CHANNELS * n]);
        }
        let x = g.constant(Tensor::new(vec![rows, LATENT_CHANNELS + STATIC_CHANNELS, h, w], input));

        let te = g.constant(Tensor::new(vec![1, self.config.time_dim], sinusoidal(t as f64, self.config.time_dim)));
        let temb = self.lin(g, te, self.t_w, self.t_b);
        let temb = g.silu(temb);

        let h0 = self.block(g, x, &self.stem, temb, 0, rows);
        let h1 = self.block(g, h0, &self.down1, temb, 1, rows);
        let h2 = self.block(g, h1, &self.down2, temb, 2, rows);
        let (bh, bw) = (g.shape(h2)[2], g.shape(h2)[3]);
        let p = bh * bw;
        let a = self.config.attn_dim;

        // cross-attention to context tokens
        let ctx = self.context(g, cond);
        let ntok = g.shape(ctx)[0];
        let xt = g.reshape(h2, &[rows, 2 * c, p]);
        let xt = g.permute(xt, &[0, 2, 1]);
        let xf = g.reshape(xt, &[rows * p, 2 * c]);
        let q = self.lin(g, xf, self.ctx_attn.wq, self.ctx_attn.bq);
        let q = g.reshape(q, &[rows, p, a]);
        let k = self.lin(g, ctx, self.ctx_attn.wk, self.ctx_attn.bk);
        let k = g.reshape(k, &[1, ntok, a]);
        let k = g.repeat_leading(k, rows);
        let kt = g.permute(k, &[0, 2, 1]);
        let v = self.lin(g, ctx, self.ctx_attn.wv, self.ctx_attn.bv);
        let v = g.reshape(v, &[1, ntok, a]);
        let v = g.repeat_leading(v, rows);
        let s = g.bmm(q, kt);
        let s = g.scale(s, 1.0 / (a as f64).sqrt());
        let att = g.softmax_last(s);
        let o = g.bmm(att, v);
        let o = g.reshape(o, &[rows * p, a]);
        let o = self.lin(g, o, self.ctx_attn.wo, self.ctx_attn.bo);
        let o = g.reshape(o, &[rows, p, 2 * c]);
        let o = g.permute(o, &[0, 2, 1]);
        let o = g.reshape(o, &[rows, 2 * c, bh, bw]);
        let mut hb = g.add(h2, o);

        // each view attends to the other views at the same frame and location
        let views = cond.views;
        if views > 1 {
            let k_frames = cond.frames;
            let b = k_frames * p;
            let xv = g.reshape(hb, &[views, k_frames, 2 * c, p]);
            let xv = g.permute(xv, &[1, 3, 0, 2]);
            let xf = g.reshape(xv, &[b * views, 2 * c]);
            let q = self.lin(g, xf, self.view_attn.wq, self.view_attn.bq);
            let q = g.reshape(q, &[b, views, a]);
            let k = self.lin(g, xf, self.view_attn.wk, self.view_attn.bk);
            let k = g.reshape(k, &[b, views, a]);
            let kt = g.permute(k, &[0, 2, 1]);
            let v = self.lin(g, xf, self.view_attn.wv, self.view_attn.bv);
            let v = g.reshape(v, &[b, views, a]);
            let s = g.bmm(q, kt);
            let s = g.scale(s, 1.0 / (a as f64).sqrt());
            let mut mask = vec![0.0; b * views * views];
            for i in 0..b {
                for j in 0..views {
                    mask[(i * views + j) * views + j] = -1e30;
                }
            }
            let mask = g.constant(Tensor::new(vec![b, views, views], mask));
            let s = g.add(s, mask);
            let att = g.softmax_last(s);
            let o = g.bmm(att, v);
            let o = g.reshape(o, &[b * views, a]);
            let o = self.lin(g, o, self.view_attn.wo, self.view_attn.bo);
            let o = g.reshape(o, &[k_frames, p, views, 2 * c]);
            let o = g.permute(o, &[2, 0, 3, 1]);
            let o = g.reshape(o, &[rows, 2 * c, bh, bw]);
            hb = g.add(hb, o);
        }

        let m = self.block(g, hb, &self.mid, temb, 3, rows);
        let (h1h, h1w) = (g.shape(h1)[2], g.shape(h1)[3]);
        let u = g.resize_nearest(m, h1h, h1w);
        let u = g.concat(&[u, h1], 1);
        let u2 = self.block(g, u, &self.up2, temb, 4, rows);
        let u = g.resize_nearest(u2, h, w);
        let u = g.concat(&[u, h0], 1);
        let u1 = self.block(g, u, &self.up1, temb, 5, rows);
        self.conv(g, u1, &self.head)
    }
}

impl Denoiser for TinyDenoiser {
    fn predict_v(&self, z_t: &[f64], cond: &ChunkCondition, t: usize) -> Result<Vec<f64>, DiffusionError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, z_t, cond, t);
        let v = g.value(out).data.clone();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DiffusionError::NonFinite(format!("denoiser output at t={t}")));
        }
        Ok(v)
    }
}
