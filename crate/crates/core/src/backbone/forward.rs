//! DiT forward pass and its hand-written reverse mode.

use std::ops::Range;

use super::condition::{check_ids, ConditionBundle};
use super::config::ModelConfig;
use super::params::{
    LayerParams, ModelParams, GATE_A, GATE_M, SCALE_A, SCALE_M, SHIFT_A, SHIFT_M,
};
use crate::error::{Error, Result};
use crate::masks::{build_mask, BoolMatrix, MaskKind};
use crate::numerics::{
    dot, gelu, gelu_grad, layer_norm_backward, layer_norm_with_stats, matmul, matmul_nt,
    matmul_tn, softmax_row_backward, softmax_row_masked, Matrix, NormStats, Real, SeededRng,
};

/// A mask together with the column span of each row's allowed entries, so
/// attention only visits columns that can be nonzero.
#[derive(Debug, Clone)]
pub struct LayerMask {
    pub mask: BoolMatrix,
    spans: Vec<Range<usize>>,
}

impl LayerMask {
    pub fn new(mask: BoolMatrix) -> Self {
        let spans = mask.row_spans();
        Self { mask, spans }
    }
}

/// Masks for every layer of a schedule at one sequence length, built once per
/// distinct kind.
pub struct MaskSet {
    built: Vec<(MaskKind, LayerMask)>,
    order: Vec<usize>,
}

impl MaskSet {
    pub fn build(config: &ModelConfig, frames: usize) -> Self {
        let mut built: Vec<(MaskKind, LayerMask)> = Vec::new();
        let mut order = Vec::with_capacity(config.layers);
        for &kind in &config.schedule.layer_masks {
            let idx = match built.iter().position(|(k, _)| *k == kind) {
                Some(i) => i,
                None => {
                    built.push((
                        kind,
                        LayerMask::new(build_mask(kind, frames, config.block_size())),
                    ));
                    built.len() - 1
                }
            };
            order.push(idx);
        }
        Self { built, order }
    }

    pub fn layer(&self, l: usize) -> &LayerMask {
        &self.built[self.order[l]].1
    }
}

/// Training-time dropout state for one forward pass.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f32,
    pub rng: SeededRng,
}

impl Dropout {
    fn keep_matrix<T: Real>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        let scale = T::one() / (T::one() - T::from_f32(self.rate).unwrap());
        let rate = self.rate as f64;
        Matrix::from_fn(rows, cols, |_, _| {
            if self.rng.next_uniform() < rate {
                T::zero()
            } else {
                scale
            }
        })
    }
}

/// Sinusoidal features `[cos(w_k s), sin(w_k s)]` with `w_k = 10000^(-k/half)`.
fn sinusoid<T: Real>(value: f64, dim: usize, out: &mut [T]) {
    let half = dim / 2;
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = value * freq;
        out[k] = T::lit(arg.cos());
        out[half + k] = T::lit(arg.sin());
    }
}

/// Absolute-position features for frames `start..start + frames`.
pub fn positional_encoding<T: Real>(start: usize, frames: usize, dim: usize) -> Matrix<T> {
    let mut pe = Matrix::zeros(frames, dim);
    for f in 0..frames {
        sinusoid((start + f) as f64, dim, pe.row_mut(f));
    }
    pe
}

const TIME_SCALE: f64 = 1000.0;

fn time_features<T: Real>(t: f64, dim: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(1, dim);
    sinusoid(TIME_SCALE * t, dim, m.row_mut(0));
    m
}

fn linear<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut y = matmul(x, w)?;
    y.add_row_broadcast(b.row(0));
    Ok(y)
}

fn check_finite<T: Real>(m: &Matrix<T>, location: impl FnOnce() -> String) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            location: location(),
        })
    }
}

#[derive(Debug, Clone)]
struct TimeCache<T> {
    features: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

fn time_embed<T: Real>(
    t: f64,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(Matrix<T>, TimeCache<T>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("timestep {t} outside [0, 1]")));
    }
    let features = time_features::<T>(t, config.hidden_dim);
    let pre = linear(&features, &params.time_w1, &params.time_b1)?;
    let act = pre.map(gelu);
    let emb = linear(&act, &params.time_w2, &params.time_b2)?;
    Ok((emb, TimeCache { features, pre, act }))
}

/// Intermediate values of one block kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache<T> {
    temb: Matrix<T>,
    act: Matrix<T>,
    modv: Vec<T>,
    xhat1: Matrix<T>,
    stats1: NormStats<T>,
    a_in: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Softmax output per head (`frames x frames`), before dropout.
    probs: Vec<Matrix<T>>,
    /// Dropout scale per head, `None` when dropout is off.
    attn_keep: Option<Vec<Matrix<T>>>,
    heads: Matrix<T>,
    attn: Matrix<T>,
    xhat2: Matrix<T>,
    stats2: NormStats<T>,
    m_in: Matrix<T>,
    pre: Matrix<T>,
    hidden: Matrix<T>,
    mlp_keep: Option<Matrix<T>>,
    mlp: Matrix<T>,
}

fn modulate<T: Real>(xhat: &Matrix<T>, shift: &[T], scale: &[T]) -> Matrix<T> {
    let mut out = xhat.clone();
    for i in 0..out.rows() {
        for ((o, &sh), &sc) in out.row_mut(i).iter_mut().zip(shift).zip(scale) {
            *o = *o * (T::one() + sc) + sh;
        }
    }
    out
}

fn gated_residual<T: Real>(x: &Matrix<T>, gate: &[T], branch: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for ((o, &g), &b) in out.row_mut(i).iter_mut().zip(gate).zip(branch.row(i)) {
            *o += g * b;
        }
    }
    out
}

fn block_forward<T: Real>(
    x: &Matrix<T>,
    temb: &Matrix<T>,
    layer: &LayerParams<T>,
    mask: &LayerMask,
    config: &ModelConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<(Matrix<T>, BlockCache<T>)> {
    let frames = x.rows();
    let h = config.hidden_dim;
    if x.cols() != h || mask.mask.shape() != (frames, frames) || temb.cols() != h {
        return Err(Error::Config(format!(
            "block input {:?} / mask {:?} / modulation {:?} do not fit hidden_dim {h}",
            x.shape(),
            mask.mask.shape(),
            temb.shape()
        )));
    }
    let eps = T::from_f32(config.norm_eps).unwrap();
    let act = temb.map(gelu);
    let modv = linear(&act, &layer.ada_w, &layer.ada_b)?.into_vec();
    let seg = |k: usize| &modv[k * h..(k + 1) * h];

    let (xhat1, stats1) = layer_norm_with_stats(x, eps);
    let a_in = modulate(&xhat1, seg(SHIFT_A), seg(SCALE_A));
    let q = linear(&a_in, &layer.wq, &layer.bq)?;
    let k = linear(&a_in, &layer.wk, &layer.bk)?;
    let v = linear(&a_in, &layer.wv, &layer.bv)?;

    let dh = config.head_dim();
    let inv_sqrt = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut heads = Matrix::zeros(frames, h);
    let mut probs = Vec::with_capacity(config.heads);
    let mut keeps = Vec::new();
    for head in 0..config.heads {
        let cols = head * dh..(head + 1) * dh;
        let mut p = Matrix::zeros(frames, frames);
        for i in 0..frames {
            let span = mask.spans[i].clone();
            let qi = &q.row(i)[cols.clone()];
            let row = &mut p.row_mut(i)[span.clone()];
            for (s, j) in row.iter_mut().zip(span.clone()) {
                *s = dot(qi, &k.row(j)[cols.clone()]) * inv_sqrt;
            }
            if !softmax_row_masked(row, &mask.mask.row(i)[span]) {
                return Err(Error::Invariant(format!("attention row {i} is fully masked")));
            }
        }
        let keep = dropout
            .as_deref_mut()
            .map(|d| d.keep_matrix::<T>(frames, frames));
        for i in 0..frames {
            let span = mask.spans[i].clone();
            let mut acc = vec![T::zero(); dh];
            for j in span {
                let pij = match &keep {
                    Some(k) => p.get(i, j) * k.get(i, j),
                    None => p.get(i, j),
                };
                for (a, &vv) in acc.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *a += pij * vv;
                }
            }
            heads.row_mut(i)[cols.clone()].copy_from_slice(&acc);
        }
        probs.push(p);
        keeps.extend(keep);
    }
    let attn = linear(&heads, &layer.wo, &layer.bo)?;
    let x_mid = gated_residual(x, seg(GATE_A), &attn);

    let (xhat2, stats2) = layer_norm_with_stats(&x_mid, eps);
    let m_in = modulate(&xhat2, seg(SHIFT_M), seg(SCALE_M));
    let pre = linear(&m_in, &layer.mlp_w1, &layer.mlp_b1)?;
    let mut hidden = pre.map(gelu);
    let mlp_keep = dropout.as_deref_mut().map(|d| {
        let keep = d.keep_matrix::<T>(hidden.rows(), hidden.cols());
        for (hv, &kv) in hidden.as_mut_slice().iter_mut().zip(keep.as_slice()) {
            *hv *= kv;
        }
        keep
    });
    let mlp = linear(&hidden, &layer.mlp_w2, &layer.mlp_b2)?;
    let y = gated_residual(&x_mid, seg(GATE_M), &mlp);

    let cache = BlockCache {
        temb: temb.clone(),
        act,
        modv,
        xhat1,
        stats1,
        a_in,
        q,
        k,
        v,
        probs,
        attn_keep: dropout.is_some().then_some(keeps),
        heads,
        attn,
        xhat2,
        stats2,
        m_in,
        pre,
        hidden,
        mlp_keep,
        mlp,
    };
    Ok((y, cache))
}

fn col_sum_product<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); a.cols()];
    for i in 0..a.rows() {
        for ((o, &x), &y) in out.iter_mut().zip(a.row(i)).zip(b.row(i)) {
            *o += x * y;
        }
    }
    out
}

fn scale_cols<T: Real>(a: &Matrix<T>, s: &[T], offset_one: bool) -> Matrix<T> {
    let mut out = a.clone();
    for i in 0..out.rows() {
        for (o, &c) in out.row_mut(i).iter_mut().zip(s) {
            *o *= if offset_one { T::one() + c } else { c };
        }
    }
    out
}

/// Reverse pass of one block. Accumulates parameter gradients into `grads`
/// and returns `(d_input, d_timestep_embedding)`.
fn block_backward<T: Real>(
    dy: &Matrix<T>,
    cache: &BlockCache<T>,
    layer: &LayerParams<T>,
    mask: &LayerMask,
    config: &ModelConfig,
    grads: &mut LayerParams<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let h = config.hidden_dim;
    let frames = dy.rows();
    let seg = |k: usize| &cache.modv[k * h..(k + 1) * h];
    let mut d_mod = vec![T::zero(); 6 * h];

    // MLP branch.
    let d_gate_m = col_sum_product(dy, &cache.mlp);
    let d_mlp = scale_cols(dy, seg(GATE_M), false);
    grads.mlp_w2.add_assign(&matmul_tn(&cache.hidden, &d_mlp)?);
    grads.mlp_b2.add_assign(&Matrix::row_vector(d_mlp.col_sums()));
    let mut d_pre = matmul_nt(&d_mlp, &layer.mlp_w2)?;
    for (idx, g) in d_pre.as_mut_slice().iter_mut().enumerate() {
        let keep = cache
            .mlp_keep
            .as_ref()
            .map_or(T::one(), |k| k.as_slice()[idx]);
        *g = *g * keep * gelu_grad(cache.pre.as_slice()[idx]);
    }
    grads.mlp_w1.add_assign(&matmul_tn(&cache.m_in, &d_pre)?);
    grads.mlp_b1.add_assign(&Matrix::row_vector(d_pre.col_sums()));
    let d_m_in = matmul_nt(&d_pre, &layer.mlp_w1)?;
    let d_shift_m = d_m_in.col_sums();
    let d_scale_m = col_sum_product(&d_m_in, &cache.xhat2);
    let d_xhat2 = scale_cols(&d_m_in, seg(SCALE_M), true);
    let mut d_mid = dy.clone();
    d_mid.add_assign(&layer_norm_backward(&d_xhat2, &cache.xhat2, &cache.stats2));

    // Attention branch.
    let d_gate_a = col_sum_product(&d_mid, &cache.attn);
    let d_attn = scale_cols(&d_mid, seg(GATE_A), false);
    grads.wo.add_assign(&matmul_tn(&cache.heads, &d_attn)?);
    grads.bo.add_assign(&Matrix::row_vector(d_attn.col_sums()));
    let d_heads = matmul_nt(&d_attn, &layer.wo)?;

    let dh = config.head_dim();
    let inv_sqrt = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = Matrix::zeros(frames, h);
    let mut dk = Matrix::zeros(frames, h);
    let mut dv = Matrix::zeros(frames, h);
    let mut dp = vec![T::zero(); frames];
    for head in 0..config.heads {
        let cols = head * dh..(head + 1) * dh;
        let p = &cache.probs[head];
        let keep = cache.attn_keep.as_ref().map(|k| &k[head]);
        for i in 0..frames {
            let span = mask.spans[i].clone();
            let d_out = &d_heads.row(i)[cols.clone()];
            for j in span.clone() {
                let kept = keep.map_or(T::one(), |k| k.get(i, j));
                let pij = p.get(i, j) * kept;
                let dv_row = &mut dv.row_mut(j)[cols.clone()];
                for (d, &g) in dv_row.iter_mut().zip(d_out) {
                    *d += pij * g;
                }
                dp[j] = dot(d_out, &cache.v.row(j)[cols.clone()]) * kept;
            }
            softmax_row_backward(&p.row(i)[span.clone()], &mut dp[span.clone()]);
            for j in span {
                let ds = dp[j] * inv_sqrt;
                if ds == T::zero() {
                    continue;
                }
                let krow = &cache.k.row(j)[cols.clone()];
                for (d, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(krow) {
                    *d += ds * kv;
                }
                let qrow = &cache.q.row(i)[cols.clone()];
                for (d, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qrow) {
                    *d += ds * qv;
                }
            }
        }
    }
    grads.wq.add_assign(&matmul_tn(&cache.a_in, &dq)?);
    grads.bq.add_assign(&Matrix::row_vector(dq.col_sums()));
    grads.wk.add_assign(&matmul_tn(&cache.a_in, &dk)?);
    grads.bk.add_assign(&Matrix::row_vector(dk.col_sums()));
    grads.wv.add_assign(&matmul_tn(&cache.a_in, &dv)?);
    grads.bv.add_assign(&Matrix::row_vector(dv.col_sums()));
    let mut d_a_in = matmul_nt(&dq, &layer.wq)?;
    d_a_in.add_assign(&matmul_nt(&dk, &layer.wk)?);
    d_a_in.add_assign(&matmul_nt(&dv, &layer.wv)?);
    let d_shift_a = d_a_in.col_sums();
    let d_scale_a = col_sum_product(&d_a_in, &cache.xhat1);
    let d_xhat1 = scale_cols(&d_a_in, seg(SCALE_A), true);
    let mut dx = d_mid;
    dx.add_assign(&layer_norm_backward(&d_xhat1, &cache.xhat1, &cache.stats1));

    // Modulation projector.
    for (k, part) in [
        (SHIFT_A, d_shift_a),
        (SCALE_A, d_scale_a),
        (GATE_A, d_gate_a),
        (SHIFT_M, d_shift_m),
        (SCALE_M, d_scale_m),
        (GATE_M, d_gate_m),
    ] {
        d_mod[k * h..(k + 1) * h].copy_from_slice(&part);
    }
    let d_mod = Matrix::row_vector(d_mod);
    grads.ada_w.add_assign(&matmul_tn(&cache.act, &d_mod)?);
    grads.ada_b.add_assign(&d_mod);
    let d_act = matmul_nt(&d_mod, &layer.ada_w)?;
    let d_temb = d_act.zip_map(&cache.temb, |g, t| g * gelu_grad(t))?;
    Ok((dx, d_temb))
}

/// One DiT block applied to `x` (frames x hidden) with modulation derived
/// from the timestep embedding `temb` (1 x hidden).
pub fn dit_block_forward<T: Real>(
    x: &Matrix<T>,
    temb: &Matrix<T>,
    mask: &BoolMatrix,
    layer: &LayerParams<T>,
    config: &ModelConfig,
) -> Result<Matrix<T>> {
    let lm = LayerMask::new(mask.clone());
    Ok(block_forward(x, temb, layer, &lm, config, None)?.0)
}

/// Everything the reverse pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: Matrix<T>,
    frame_ids: Option<Vec<u32>>,
    time: TimeCache<T>,
    blocks: Vec<BlockCache<T>>,
    last_hidden: Matrix<T>,
    masks_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl Model<f32> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Timestep embedding: sinusoidal features of `t` through a two-layer MLP.
    pub fn timestep_embedding(&self, t: f64) -> Result<Matrix<T>> {
        Ok(time_embed(t, &self.params, &self.config)?.0)
    }

    pub fn assemble_condition(&self, frame_ids: &[u32], speaker: &[f32]) -> Result<ConditionBundle<T>> {
        super::condition::assemble_condition(frame_ids, speaker, &self.params, &self.config)
    }

    fn check_inputs(&self, x_t: &Matrix<T>, cond: &ConditionBundle<T>) -> Result<()> {
        if x_t.cols() != self.config.feature_dim {
            return Err(Error::Input(format!(
                "features have {} channels, model expects {}",
                x_t.cols(),
                self.config.feature_dim
            )));
        }
        if x_t.rows() != cond.frames() {
            return Err(Error::Input(format!(
                "{} feature frames vs {} condition frames",
                x_t.rows(),
                cond.frames()
            )));
        }
        if cond.cond.cols() != self.config.cond_dim() {
            return Err(Error::Input(format!(
                "condition width {} vs expected {}",
                cond.cond.cols(),
                self.config.cond_dim()
            )));
        }
        if x_t.rows() == 0 {
            return Err(Error::Input("empty feature sequence".into()));
        }
        if let Some(ids) = &cond.frame_ids {
            if ids.len() != cond.frames() {
                return Err(Error::Input("frame id count does not match condition".into()));
            }
            check_ids(ids, self.config.token_vocab)?;
        }
        Ok(())
    }

    /// Predicted velocity for `x_t` at time `t`. `start_frame` is the absolute
    /// index of the first row, used for positional features so that a window
    /// cut from a longer sequence sees the same positions.
    pub fn vector_field(
        &self,
        x_t: &Matrix<T>,
        t: f64,
        cond: &ConditionBundle<T>,
        start_frame: usize,
    ) -> Result<Matrix<T>> {
        Ok(self.forward(x_t, t, cond, start_frame, None, false)?.0)
    }

    /// Forward pass that keeps the intermediates for [`Model::backward`].
    pub fn forward_train(
        &self,
        x_t: &Matrix<T>,
        t: f64,
        cond: &ConditionBundle<T>,
        start_frame: usize,
        dropout: Option<&mut Dropout>,
    ) -> Result<(Matrix<T>, ForwardCache<T>)> {
        let (out, cache) = self.forward(x_t, t, cond, start_frame, dropout, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn forward(
        &self,
        x_t: &Matrix<T>,
        t: f64,
        cond: &ConditionBundle<T>,
        start_frame: usize,
        mut dropout: Option<&mut Dropout>,
        keep: bool,
    ) -> Result<(Matrix<T>, Option<ForwardCache<T>>)> {
        self.check_inputs(x_t, cond)?;
        let config = &self.config;
        let params = &self.params;
        let frames = x_t.rows();
        let dropout_on = config.dropout > 0.0 && dropout.is_some();

        let input = Matrix::concat_cols(x_t, &cond.cond)?;
        let mut hidden = linear(&input, &params.in_w, &params.in_b)?;
        if config.positional {
            hidden.add_assign(&positional_encoding(start_frame, frames, config.hidden_dim));
        }
        check_finite(&hidden, || "input projection".into())?;
        let (temb, time) = time_embed(t, params, config)?;
        check_finite(&temb, || "timestep embedding".into())?;

        let masks = MaskSet::build(config, frames);
        let mut blocks = Vec::new();
        for (l, layer) in params.layers.iter().enumerate() {
            let d = if dropout_on { dropout.as_deref_mut() } else { None };
            let (next, cache) = block_forward(&hidden, &temb, layer, masks.layer(l), config, d)?;
            check_finite(&next, || format!("layer {l}"))?;
            if keep {
                blocks.push(cache);
            }
            hidden = next;
        }
        let out = linear(&hidden, &params.out_w, &params.out_b)?;
        check_finite(&out, || "output projection".into())?;
        let cache = keep.then(|| ForwardCache {
            input,
            frame_ids: cond.frame_ids.clone(),
            time,
            blocks,
            last_hidden: hidden,
            masks_frames: frames,
        });
        Ok((out, cache))
    }

    /// Gradients of `sum(d_out ⊙ output)` w.r.t. every parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &Matrix<T>) -> Result<ModelParams<T>> {
        let config = &self.config;
        let params = &self.params;
        let mut grads = params.zeros_like();
        grads.out_w = matmul_tn(&cache.last_hidden, d_out)?;
        grads.out_b = Matrix::row_vector(d_out.col_sums());
        let mut dh = matmul_nt(d_out, &params.out_w)?;

        let masks = MaskSet::build(config, cache.masks_frames);
        let mut d_temb = Matrix::zeros(1, config.hidden_dim);
        for l in (0..config.layers).rev() {
            let (dx, dt) = block_backward(
                &dh,
                &cache.blocks[l],
                &params.layers[l],
                masks.layer(l),
                config,
                &mut grads.layers[l],
            )?;
            d_temb.add_assign(&dt);
            dh = dx;
        }

        let time = &cache.time;
        grads.time_w2 = matmul_tn(&time.act, &d_temb)?;
        grads.time_b2 = d_temb.clone();
        let d_act = matmul_nt(&d_temb, &params.time_w2)?;
        let d_pre = d_act.zip_map(&time.pre, |g, x| g * gelu_grad(x))?;
        grads.time_w1 = matmul_tn(&time.features, &d_pre)?;
        grads.time_b1 = d_pre;

        grads.in_w = matmul_tn(&cache.input, &dh)?;
        grads.in_b = Matrix::row_vector(dh.col_sums());
        if let Some(ids) = &cache.frame_ids {
            let d_input = matmul_nt(&dh, &params.in_w)?;
            let offset = config.feature_dim;
            let e = config.token_embed_dim;
            for (f, &id) in ids.iter().enumerate() {
                let src = &d_input.row(f)[offset..offset + e];
                for (g, &v) in grads.token_embed.row_mut(id as usize).iter_mut().zip(src) {
                    *g += v;
                }
            }
        }
        Ok(grads)
    }
}
