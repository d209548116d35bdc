//! Denoiser inputs: the 19-channel spatial stack per view and frame, the
//! context tokens (reference style, delta-action tokens, memory style), and
//! whole-sample condition dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_map::{render_action_map, GlyphStyle};
use crate::backend::SparseMemory;
use crate::codec::{Latent, LatentCodec, LATENT_CHANNELS};
use crate::geometry::{delta_action, ActionFrame, CameraRig, GeometryError, RayMap};
use crate::image::{Frame, RgbImage};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

pub const CONDITION_CHANNELS: usize = 19;
/// Channels other than the noisy latent: condition 4, action map 4, ray 6, mask 1.
pub const STATIC_CHANNELS: usize = 15;
pub const STYLE_PATCH: usize = 8;
/// Per-dimension input scale for delta actions (position, rpy, openness).
pub const DELTA_SCALE: [f64; 7] = [50.0, 50.0, 50.0, 5.0, 5.0, 5.0, 4.0];

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least 2 frames, got {0}")]
    TooShort(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("codec: {0}")]
    Codec(String),
}

/// Maps codec output (block means in `[0, 8]`, texture channel near 0) to
/// roughly unit range.
pub fn to_model_space(l: &Latent) -> Vec<f64> {
    let plane = l.height * l.width;
    l.data
        .iter()
        .enumerate()
        .map(|(i, v)| if i / plane < 3 { (v - 4.0) / 4.0 } else { v / 4.0 })
        .collect()
}

pub fn from_model_space(data: &[f64], height: usize, width: usize) -> Latent {
    let plane = height * width;
    let d = data
        .iter()
        .enumerate()
        .map(|(i, v)| if i / plane < 3 { v * 4.0 + 4.0 } else { v * 4.0 })
        .collect();
    Latent::from_data(height, width, d)
}

/// One view/frame of the 19-channel input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ConditionBundle {
    pub fn channels(&self) -> usize {
        self.data.len() / (self.height * self.width)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Concatenates noisy latent, condition latent, action-map latent, ray map
/// and mask plane in that order. Dropping zeroes channels 4..18.
pub fn assemble_condition(
    noisy: &Latent,
    cond: &Latent,
    action_map: &Latent,
    ray: &RayMap,
    dropped: bool,
) -> Result<ConditionBundle, ConditionError> {
    let (h, w) = (noisy.height, noisy.width);
    for (name, lh, lw) in [
        ("condition", cond.height, cond.width),
        ("action map", action_map.height, action_map.width),
        ("ray map", ray.height, ray.width),
    ] {
        if lh != h || lw != w {
            return Err(ConditionError::Shape(format!("{name} is {lh}x{lw}, expected {h}x{w}")));
        }
    }
    for (name, c) in [("noisy", noisy.channels), ("condition", cond.channels), ("action map", action_map.channels)] {
        if c != LATENT_CHANNELS {
            return Err(ConditionError::Shape(format!("{name} has {c} channels")));
        }
    }
    let n = h * w;
    let mut data = Vec::with_capacity(CONDITION_CHANNELS * n);
    data.extend_from_slice(&noisy.data);
    if dropped {
        data.resize(CONDITION_CHANNELS * n, 0.0);
    } else {
        data.extend_from_slice(&cond.data);
        data.extend_from_slice(&action_map.data);
        data.extend(ray.to_channels());
        data.extend(std::iter::repeat_n(1.0, n));
    }
    Ok(ConditionBundle { height: h, width: w, data })
}

/// Everything except the noisy latent for one chunk sample. Spatial rows are
/// ordered view-major: row `v * frames + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkCondition {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `[views * frames, 15, height, width]`.
    pub spatial: Vec<f64>,
    /// `[steps, delta_dim]`, unscaled; one step per chunk action.
    pub deltas: Vec<f64>,
    pub delta_dim: usize,
    /// `[style_sets, patches, 3]`: condition frame first, then memory frames.
    pub style_patches: Vec<f64>,
    pub style_sets: usize,
    pub patches: usize,
    pub dropped: bool,
}

impl ChunkCondition {
    pub fn rows(&self) -> usize {
        self.views * self.frames
    }

    /// Full 19-channel bundle for view `v`, frame `k` given its noisy latent.
    pub fn bundle(&self, noisy: &Latent, v: usize, k: usize) -> ConditionBundle {
        let n = self.height * self.width;
        let row = v * self.frames + k;
        let mut data = noisy.data.clone();
        data.extend_from_slice(&self.spatial[row * STATIC_CHANNELS * n..(row + 1) * STATIC_CHANNELS * n]);
        ConditionBundle { height: self.height, width: self.width, data }
    }

    /// The unconditional version: spatial condition, deltas and style
    /// inputs all zero, mask plane 0.
    pub fn dropped_copy(&self) -> Self {
        let mut c = self.clone();
        c.drop_in_place();
        c
    }

    pub fn drop_in_place(&mut self) {
        self.spatial.iter_mut().for_each(|v| *v = 0.0);
        self.deltas.iter_mut().for_each(|v| *v = 0.0);
        self.style_patches.iter_mut().for_each(|v| *v = 0.0);
        self.dropped = true;
    }

    /// Keeps the spatial rows of the listed frames in every view; context
    /// inputs are untouched.
    pub fn select_frames(&self, frames: &[usize]) -> Self {
        let row = STATIC_CHANNELS * self.height * self.width;
        let mut spatial = Vec::with_capacity(self.views * frames.len() * row);
        for v in 0..self.views {
            for &k in frames {
                let r = v * self.frames + k;
                spatial.extend_from_slice(&self.spatial[r * row..(r + 1) * row]);
            }
        }
        Self { frames: frames.len(), spatial, ..self.clone() }
    }

    /// View subset in the given order (used for view-permutation checks).
    pub fn select_views(&self, order: &[usize]) -> Self {
        let per_view = self.frames * STATIC_CHANNELS * self.height * self.width;
        let mut spatial = Vec::with_capacity(order.len() * per_view);
        for &v in order {
            spatial.extend_from_slice(&self.spatial[v * per_view..(v + 1) * per_view]);
        }
        Self { views: order.len(), spatial, ..self.clone() }
    }
}

/// Drops whole samples with probability `p_drop`, one draw per sample.
pub fn apply_condition_dropout(stream: Vec<ChunkCondition>, p_drop: f64, rng: &mut impl Rng) -> Vec<ChunkCondition> {
    let p = p_drop.clamp(0.0, 1.0);
    stream
        .into_iter()
        .map(|mut c| {
            if rng.random_bool(p) {
                c.drop_in_place();
            }
            c
        })
        .collect()
}

/// 8x8 average pooling of an RGB frame: `[patches, 3]`.
pub fn pool_patches(frame: &Frame) -> Vec<f64> {
    let (ph, pw) = (frame.height / STYLE_PATCH, frame.width / STYLE_PATCH);
    let n = frame.width * frame.height;
    let inv = 1.0 / (STYLE_PATCH * STYLE_PATCH) as f64;
    let mut out = Vec::with_capacity(ph * pw * 3);
    for bi in 0..ph {
        for bj in 0..pw {
            for c in 0..3 {
                let mut s = 0.0;
                for dy in 0..STYLE_PATCH {
                    let row = (bi * STYLE_PATCH + dy) * frame.width + bj * STYLE_PATCH;
                    s += frame.data[c * n + row..c * n + row + STYLE_PATCH].iter().sum::<f64>();
                }
                out.push(s * inv);
            }
        }
    }
    out
}

/// Delta actions of consecutive frames: `[frames.len() - 1, 7 * arms]`.
pub fn delta_matrix(frames: &[ActionFrame]) -> Result<Vec<f64>, ConditionError> {
    if frames.len() < 2 {
        return Err(ConditionError::TooShort(frames.len()));
    }
    let mut out = Vec::new();
    for w in frames.windows(2) {
        if w[0].len() != w[1].len() {
            return Err(ConditionError::Shape("arm count changes within segment".into()));
        }
        for (cur, prev) in w[1].iter().zip(&w[0]) {
            out.extend(delta_action(cur, prev)?.to_vector());
        }
    }
    Ok(out)
}

pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

/// Linear projection of per-step deltas plus a step encoding, resampled to
/// a fixed number of tokens by one cross-attention layer from learned
/// queries (with a residual to the queries).
#[derive(Debug, Clone)]
pub struct DeltaResampler {
    pub in_dim: usize,
    pub dim: usize,
    pub tokens: usize,
    w_in: ParamId,
    b_in: ParamId,
    queries: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl DeltaResampler {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, dim: usize, tokens: usize, rng: &mut impl Rng) -> Self {
        let s_in = 1.0 / (in_dim as f64).sqrt();
        let s = 1.0 / (dim as f64).sqrt();
        let mut p = |name: &str, shape: &[usize], std: f64| store.add_normal(&format!("{prefix}.{name}"), shape, std, rng);
        let w_in = p("w_in", &[in_dim, dim], s_in);
        let queries = p("queries", &[tokens, dim], 1.0);
        let wq = p("wq", &[dim, dim], s);
        let wk = p("wk", &[dim, dim], s);
        let wv = p("wv", &[dim, dim], s);
        let wo = p("wo", &[dim, dim], s);
        let b_in = store.add_zeros(&format!("{prefix}.b_in"), &[dim]);
        let bq = store.add_zeros(&format!("{prefix}.bq"), &[dim]);
        let bk = store.add_zeros(&format!("{prefix}.bk"), &[dim]);
        let bv = store.add_zeros(&format!("{prefix}.bv"), &[dim]);
        let bo = store.add_zeros(&format!("{prefix}.bo"), &[dim]);
        Self { in_dim, dim, tokens, w_in, b_in, queries, wq, bq, wk, bk, wv, bv, wo, bo }
    }

    /// `deltas [batch, steps, in_dim]` (unscaled) to tokens `[batch, tokens, dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, deltas: &Tensor) -> Var {
        let (b, steps) = (deltas.shape[0], deltas.shape[1]);
        let (d, m) = (self.dim, self.tokens);
        let scaled: Vec<f64> =
            deltas.data.iter().enumerate().map(|(i, v)| v * DELTA_SCALE[(i % self.in_dim) % 7]).collect();
        let x = g.constant(Tensor::new(vec![b * steps, self.in_dim], scaled));
        let (w_in, b_in) = (g.param(store, self.w_in), g.param(store, self.b_in));
        let h = g.linear(x, w_in, b_in);
        let mut pos = Vec::with_capacity(b * steps * d);
        for _ in 0..b {
            for k in 0..steps {
                pos.extend(sinusoidal(k as f64, d));
            }
        }
        let pos = g.constant(Tensor::new(vec![b * steps, d], pos));
        let h = g.add(h, pos);

        let q0 = g.param(store, self.queries);
        let q0 = g.reshape(q0, &[1, m, d]);
        let q0 = g.repeat_leading(q0, b);
        let q0f = g.reshape(q0, &[b * m, d]);
        let (wq, bq) = (g.param(store, self.wq), g.param(store, self.bq));
        let (wk, bk) = (g.param(store, self.wk), g.param(store, self.bk));
        let (wv, bv) = (g.param(store, self.wv), g.param(store, self.bv));
        let q = g.linear(q0f, wq, bq);
        let q = g.reshape(q, &[b, m, d]);
        let k = g.linear(h, wk, bk);
        let k = g.reshape(k, &[b, steps, d]);
        let kt = g.permute(k, &[0, 2, 1]);
        let v = g.linear(h, wv, bv);
        let v = g.reshape(v, &[b, steps, d]);
        let scores = g.bmm(q, kt);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_last(scores);
        let o = g.bmm(attn, v);
        let o = g.reshape(o, &[b * m, d]);
        let (wo, bo) = (g.param(store, self.wo), g.param(store, self.bo));
        let o = g.linear(o, wo, bo);
        let o = g.reshape(o, &[b, m, d]);
        g.add(q0, o)
    }

    /// Tokens `[tokens, dim]` for one segment of at least two action frames.
    pub fn encode(&self, store: &ParamStore, segment: &[ActionFrame]) -> Result<Tensor, ConditionError> {
        let deltas = delta_matrix(segment)?;
        if deltas.len() != (segment.len() - 1) * self.in_dim {
            return Err(ConditionError::Shape(format!("delta width differs from {}", self.in_dim)));
        }
        let mut g = Graph::new();
        let t = Tensor::new(vec![1, segment.len() - 1, self.in_dim], deltas);
        let out = self.forward(&mut g, store, &t);
        Ok(g.value(out).clone().reshaped(&[self.tokens, self.dim]))
    }
}

/// Reference style token: 8x8 average-pooled patches, a learned linear map,
/// mean over patches.
#[derive(Debug, Clone)]
pub struct StyleTokenizer {
    pub dim: usize,
    w: ParamId,
    b: ParamId,
}

impl StyleTokenizer {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_normal(&format!("{prefix}.w"), &[3, dim], 1.0, rng);
        let b = store.add_normal(&format!("{prefix}.b"), &[dim], 0.1, rng);
        Self { dim, w, b }
    }

    /// `patches [sets, count, 3]` to `[sets, dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: &Tensor) -> Var {
        let (s, p) = (patches.shape[0], patches.shape[1]);
        let x = g.constant(patches.clone().reshaped(&[s * p, 3]));
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.linear(x, w, b);
        let y = g.reshape(y, &[s, p, self.dim]);
        g.mean_axis1(y)
    }

    pub fn reference_style_token(&self, store: &ParamStore, frame: &Frame) -> Vec<f64> {
        let patches = pool_patches(frame);
        let n = patches.len() / 3;
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &Tensor::new(vec![1, n, 3], patches));
        g.value(out).data.clone()
    }
}

/// Converts raw observations and actions into a [`ChunkCondition`].
#[derive(Debug, Clone)]
pub struct ConditionBuilder {
    pub codec: LatentCodec,
    pub glyph: GlyphStyle,
    pub rig: CameraRig,
    pub memory_slots: usize,
}

impl ConditionBuilder {
    pub fn latent_shape(&self) -> (usize, usize) {
        let c = &self.rig.views[0].camera;
        (c.height / crate::codec::BLOCK, c.width / crate::codec::BLOCK)
    }

    pub fn encode_frame(&self, img: &RgbImage) -> Result<Vec<f64>, ConditionError> {
        let l = self.codec.encode(&img.to_frame()).map_err(|e| ConditionError::Codec(e.to_string()))?;
        Ok(to_model_space(&l))
    }

    /// `condition_frames` holds one frame per view; `actions` the next K frames.
    pub fn build(
        &self,
        condition_frames: &[RgbImage],
        condition_action: &ActionFrame,
        actions: &[ActionFrame],
        memory: &SparseMemory,
    ) -> Result<ChunkCondition, ConditionError> {
        let views = self.rig.len();
        if condition_frames.len() != views {
            return Err(ConditionError::Shape(format!("{} condition frames for {views} views", condition_frames.len())));
        }
        let k = actions.len();
        let (h, w) = self.latent_shape();
        let n = h * w;
        let anchor = self.rig.anchor(condition_action)?;
        let mut spatial = Vec::with_capacity(views * k * STATIC_CHANNELS * n);
        for (v, view) in self.rig.views.iter().enumerate() {
            let cond = self.encode_frame(&condition_frames[v])?;
            for a in actions {
                let c2w = view.extrinsics.camera_to_world(Some(a))?;
                let map = render_action_map(a, &view.camera, &c2w, &self.glyph);
                let ray = crate::geometry::compute_ray_map(&view.camera, &c2w, &anchor, h, w);
                spatial.extend_from_slice(&cond);
                spatial.extend(self.encode_frame(&map)?);
                spatial.extend(ray.to_channels());
                spatial.extend(std::iter::repeat_n(1.0, n));
            }
        }
        let mut segment = Vec::with_capacity(k + 1);
        segment.push(condition_action.clone());
        segment.extend_from_slice(actions);
        let deltas = delta_matrix(&segment)?;
        let delta_dim = deltas.len() / k;

        let mut style_patches = pool_patches(&condition_frames[0].to_frame());
        let patches = style_patches.len() / 3;
        for slot in 0..self.memory_slots {
            let src = match memory.entries().get(slot) {
                Some(e) => pool_patches(&e.frames[0].to_frame()),
                None => style_patches[..patches * 3].to_vec(),
            };
            style_patches.extend(src);
        }
        Ok(ChunkCondition {
            views,
            frames: k,
            height: h,
            width: w,
            spatial,
            deltas,
            delta_dim,
            style_patches,
            style_sets: 1 + self.memory_slots,
            patches,
            dropped: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ActionState, ArmId, Rpy};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lat(v: f64) -> Latent {
        Latent::from_data(10, 16, vec![v; 4 * 160])
    }

    fn ray(v: f64) -> RayMap {
        let mut r = RayMap::zeros(10, 16);
        r.origins.iter_mut().for_each(|o| *o = Vector3::new(v, v, v));
        r.directions.iter_mut().for_each(|o| *o = Vector3::new(v, v, v));
        r
    }

    #[test]
    fn bundle_layout() {
        let b = assemble_condition(&lat(1.0), &lat(2.0), &lat(3.0), &ray(4.0), false).unwrap();
        assert_eq!(b.channels(), 19);
        for (c, expect) in [(0, 1.0), (4, 2.0), (8, 3.0), (12, 4.0), (17, 4.0), (18, 1.0)] {
            assert!(b.channel(c).iter().all(|v| *v == expect), "channel {c}");
        }
    }

    #[test]
    fn dropped_zeroes_everything_but_noise() {
        let b = assemble_condition(&lat(1.0), &lat(2.0), &lat(3.0), &ray(4.0), true).unwrap();
        assert!(b.data[4 * 160..].iter().all(|v| *v == 0.0));
        assert!(b.channel(0).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn zero_ray_passthrough() {
        let b = assemble_condition(&lat(1.0), &lat(2.0), &lat(3.0), &RayMap::zeros(10, 16), false).unwrap();
        assert!((12..18).all(|c| b.channel(c).iter().all(|v| *v == 0.0)));
        assert!(b.channel(18).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let small = Latent::from_data(5, 8, vec![0.0; 4 * 40]);
        assert!(assemble_condition(&lat(1.0), &small, &lat(3.0), &ray(0.0), false).is_err());
    }

    fn resampler() -> (ParamStore, DeltaResampler) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = DeltaResampler::new(&mut store, "delta", 7, 64, 8, &mut rng);
        store.randomize(0.3, &mut rng);
        (store, r)
    }

    fn z_traj(zs: &[f64], offset: f64) -> Vec<ActionFrame> {
        zs.iter()
            .map(|z| vec![ActionState::new(ArmId::Left, Vector3::new(offset, 0.25, z + offset), Rpy::ZERO, 1.0)])
            .collect()
    }

    #[test]
    fn constant_trajectories_share_bias_response() {
        let (store, r) = resampler();
        let a = r.encode(&store, &z_traj(&[0.1; 6], 0.0)).unwrap();
        let b = r.encode(&store, &z_traj(&[0.3; 6], 0.5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_short_rejected() {
        let (store, r) = resampler();
        assert!(matches!(r.encode(&store, &z_traj(&[0.1], 0.0)), Err(ConditionError::TooShort(1))));
    }

    #[test]
    fn toss_and_shake_differ() {
        let (store, r) = resampler();
        let mut toss = vec![0.0; 11];
        toss[1..].iter_mut().for_each(|v| *v = 0.10);
        let shake: Vec<f64> = (0..11).map(|i| 0.01 * i as f64).collect();
        let a = r.encode(&store, &z_traj(&toss, 0.0)).unwrap();
        let b = r.encode(&store, &z_traj(&shake, 0.0)).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn style_token_linearity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = StyleTokenizer::new(&mut store, "style", 16, &mut rng);
        let black = st.reference_style_token(&store, &Frame::zeros(128, 80));
        let bias = &store.get(store.find("style.b").unwrap()).data;
        assert!(black.iter().zip(bias).all(|(a, b)| (a - b).abs() < 1e-12));
        let x = Frame::constant(128, 80, [0.8, 0.4, 0.2]);
        let mut half = x.clone();
        half.data.iter_mut().for_each(|v| *v *= 0.5);
        let tx = st.reference_style_token(&store, &x);
        let th = st.reference_style_token(&store, &half);
        assert_ne!(tx, th);
        for i in 0..16 {
            let pre_x = tx[i] - black[i];
            let pre_h = th[i] - black[i];
            assert!((pre_h - 0.5 * pre_x).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_rates() {
        let c = ChunkCondition {
            views: 1,
            frames: 1,
            height: 1,
            width: 1,
            spatial: vec![1.0; 15],
            deltas: vec![1.0; 7],
            delta_dim: 7,
            style_patches: vec![1.0; 3],
            style_sets: 1,
            patches: 1,
            dropped: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keep = apply_condition_dropout(vec![c.clone(); 50], 0.0, &mut rng);
        assert!(keep.iter().all(|x| *x == c));
        let all = apply_condition_dropout(vec![c.clone(); 50], 1.0, &mut rng);
        assert!(all.iter().all(|x| x.dropped && x.spatial.iter().all(|v| *v == 0.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mixed = apply_condition_dropout(vec![c; 10_000], 0.1, &mut rng);
        let rate = mixed.iter().filter(|x| x.dropped).count() as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&rate), "{rate}");
    }

    #[test]
    fn model_space_round_trip() {
        let l = Latent::from_data(2, 2, (0..16).map(|i| i as f64 * 0.5).collect());
        let back = from_model_space(&to_model_space(&l), 2, 2);
        assert!(l.mean_abs_diff(&back) < 1e-15);
    }
}
