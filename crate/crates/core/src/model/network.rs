//! Teacher-forced forward and backward passes over packed batches.
//!
//! Examples are packed row-wise without padding: every row-local operation
//! (projections, feed-forward, normalization) runs once over the whole batch
//! and attention runs per example over its own span of rows.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::ops::{self, gemm, layer_norm, layer_norm_backward, NormCache, View, ViewMut};
use super::params::{AttentionIds, FeedForwardIds, Layout, LinearIds, NormIds, Parameters};
use super::positional::sinusoid_into;
use crate::error::{Error, Result};
use crate::schedule::{build_attention_mask, ScheduleSpec, ScheduledTarget, MASK_NEG};
use crate::vocab::{Token, PAD};

/// One teacher-forced training example.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub src: &'a [Token],
    pub target: &'a ScheduledTarget,
}

/// Model structure without learned values: shapes, schedule and a
/// precomputed sinusoid table.
#[derive(Debug, Clone)]
pub struct Network {
    pub(crate) config: ModelConfig,
    pub(crate) schedule: ScheduleSpec,
    pub(crate) layout: Layout,
    pe_table: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Span {
    pub q_off: usize,
    pub q_len: usize,
    pub k_off: usize,
    pub k_len: usize,
}

/// Additive attention bias for one span.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Bias<'a> {
    /// Full `q_len x k_len` matrix.
    Dense(&'a [f32]),
    /// One value per key, shared by all queries.
    Keys(&'a [f32]),
}

impl<'a> Bias<'a> {
    fn row(&self, i: usize, k_len: usize) -> &'a [f32] {
        match self {
            Bias::Dense(m) => &m[i * k_len..(i + 1) * k_len],
            Bias::Keys(k) => k,
        }
    }
}

#[cfg(test)]
thread_local! {
    /// Replaces ReLU by the identity so finite differences never straddle a kink.
    pub(crate) static LINEAR_ACTIVATION: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

pub(crate) fn relu_in_place(x: &mut [f32]) {
    #[cfg(test)]
    if LINEAR_ACTIVATION.with(|c| c.get()) {
        return;
    }
    for v in x {
        *v = v.max(0.0);
    }
}

fn relu_backward(activated: &[f32], grad: &mut [f32]) {
    #[cfg(test)]
    if LINEAR_ACTIVATION.with(|c| c.get()) {
        return;
    }
    for (g, h) in grad.iter_mut().zip(activated) {
        if *h <= 0.0 {
            *g = 0.0;
        }
    }
}

pub(crate) fn key_bias(tokens: &[Token]) -> Vec<f32> {
    tokens.iter().map(|&t| if t == PAD { MASK_NEG } else { 0.0 }).collect()
}

pub(crate) struct AttnCore {
    pub ctx: Vec<f32>,
    probs: Vec<f32>,
    drop: Option<Vec<f32>>,
    offsets: Vec<usize>,
}

fn dropout_mask(rng: &mut Option<&mut ChaCha8Rng>, p: f32, len: usize) -> Option<Vec<f32>> {
    let rng = rng.as_deref_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some((0..len).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep }).collect())
}

fn apply_mask(x: &mut [f32], mask: &Option<Vec<f32>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// Multi-head scaled dot-product attention over packed spans.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    spans: &[Span],
    biases: &[Bias],
    heads: usize,
    d: usize,
    mut rng: Option<&mut ChaCha8Rng>,
    p_drop: f32,
) -> AttnCore {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut offsets = Vec::with_capacity(spans.len());
    let mut total = 0;
    for s in spans {
        offsets.push(total);
        total += heads * s.q_len * s.k_len;
    }
    let mut probs = vec![0.0; total];
    let mut ctx = vec![0.0; q.len()];
    let drop = dropout_mask(&mut rng, p_drop, total);
    let mut scratch = Vec::new();
    for (si, s) in spans.iter().enumerate() {
        let block = s.q_len * s.k_len;
        for h in 0..heads {
            let o = offsets[si] + h * block;
            gemm(
                s.q_len,
                dh,
                s.k_len,
                View { data: q, offset: s.q_off * d + h * dh, rs: d, cs: 1 },
                View { data: k, offset: s.k_off * d + h * dh, rs: 1, cs: d },
                0.0,
                ViewMut { data: &mut probs, offset: o, rs: s.k_len, cs: 1 },
            );
            for i in 0..s.q_len {
                let row = &mut probs[o + i * s.k_len..o + (i + 1) * s.k_len];
                for (x, b) in row.iter_mut().zip(biases[si].row(i, s.k_len)) {
                    *x = *x * scale + b;
                }
                ops::softmax_in_place(row);
            }
            let weights: &[f32] = match &drop {
                Some(m) => {
                    scratch.clear();
                    scratch.extend(probs[o..o + block].iter().zip(&m[o..o + block]).map(|(p, k)| p * k));
                    &scratch
                }
                None => &probs[o..o + block],
            };
            gemm(
                s.q_len,
                s.k_len,
                dh,
                View::rows(weights, s.k_len),
                View { data: v, offset: s.k_off * d + h * dh, rs: d, cs: 1 },
                0.0,
                ViewMut { data: &mut ctx, offset: s.q_off * d + h * dh, rs: d, cs: 1 },
            );
        }
    }
    AttnCore { ctx, probs, drop, offsets }
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    core: &AttnCore,
    dctx: &[f32],
    spans: &[Span],
    heads: usize,
    d: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut weights = Vec::new();
    let mut dp = Vec::new();
    for (si, s) in spans.iter().enumerate() {
        let block = s.q_len * s.k_len;
        for h in 0..heads {
            let o = core.offsets[si] + h * block;
            let probs = &core.probs[o..o + block];
            weights.clear();
            match &core.drop {
                Some(m) => weights.extend(probs.iter().zip(&m[o..o + block]).map(|(p, k)| p * k)),
                None => weights.extend_from_slice(probs),
            }
            dp.clear();
            dp.resize(block, 0.0);
            gemm(
                s.q_len,
                dh,
                s.k_len,
                View { data: dctx, offset: s.q_off * d + h * dh, rs: d, cs: 1 },
                View { data: v, offset: s.k_off * d + h * dh, rs: 1, cs: d },
                0.0,
                ViewMut::rows(&mut dp, s.k_len),
            );
            gemm(
                s.k_len,
                s.q_len,
                dh,
                View::transposed(&weights, s.k_len),
                View { data: dctx, offset: s.q_off * d + h * dh, rs: d, cs: 1 },
                1.0,
                ViewMut { data: &mut dv, offset: s.k_off * d + h * dh, rs: d, cs: 1 },
            );
            if let Some(m) = &core.drop {
                for (g, k) in dp.iter_mut().zip(&m[o..o + block]) {
                    *g *= k;
                }
            }
            // softmax backward, reusing dp as dS
            for i in 0..s.q_len {
                let p = &probs[i * s.k_len..(i + 1) * s.k_len];
                let g = &mut dp[i * s.k_len..(i + 1) * s.k_len];
                let dot: f32 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                for (gj, pj) in g.iter_mut().zip(p) {
                    *gj = pj * (*gj - dot) * scale;
                }
            }
            gemm(
                s.q_len,
                s.k_len,
                dh,
                View::rows(&dp, s.k_len),
                View { data: k, offset: s.k_off * d + h * dh, rs: d, cs: 1 },
                1.0,
                ViewMut { data: &mut dq, offset: s.q_off * d + h * dh, rs: d, cs: 1 },
            );
            gemm(
                s.k_len,
                s.q_len,
                dh,
                View::transposed(&dp, s.k_len),
                View { data: q, offset: s.q_off * d + h * dh, rs: d, cs: 1 },
                1.0,
                ViewMut { data: &mut dk, offset: s.k_off * d + h * dh, rs: d, cs: 1 },
            );
        }
    }
    (dq, dk, dv)
}

struct AttnBlock {
    norm: NormCache,
    normed: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    core: AttnCore,
    out_drop: Option<Vec<f32>>,
}

struct FfBlock {
    norm: NormCache,
    normed: Vec<f32>,
    hidden: Vec<f32>,
    out_drop: Option<Vec<f32>>,
}

struct EncLayerCache {
    attn: AttnBlock,
    ff: FfBlock,
}

struct DecLayerCache {
    self_attn: AttnBlock,
    cross: AttnBlock,
    ff: FfBlock,
}

/// Activations recorded by [`Network::forward`] for the backward pass.
pub(crate) struct Forward {
    pub logits: Vec<f32>,
    pub rows: usize,
    src_tokens: Vec<Token>,
    dec_tokens: Vec<Token>,
    dec_dirs: Vec<usize>,
    enc_spans: Vec<Span>,
    self_spans: Vec<Span>,
    cross_spans: Vec<Span>,
    enc_emb_drop: Option<Vec<f32>>,
    dec_emb_drop: Option<Vec<f32>>,
    enc_layers: Vec<EncLayerCache>,
    enc_norm: NormCache,
    memory: Vec<f32>,
    dec_layers: Vec<DecLayerCache>,
    dec_norm: NormCache,
    dec_out: Vec<f32>,
}

pub(crate) struct Grads<'a> {
    pub tensors: &'a mut Parameters,
}

impl Grads<'_> {
    fn pair(&mut self, a: usize, b: usize) -> (&mut [f32], &mut [f32]) {
        assert!(a < b);
        let (lo, hi) = self.tensors.tensors.split_at_mut(b);
        (&mut lo[a].data, &mut hi[0].data)
    }

    fn one(&mut self, a: usize) -> &mut [f32] {
        &mut self.tensors.tensors[a].data
    }
}

impl Network {
    pub fn new(config: ModelConfig, schedule: ScheduleSpec) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let layout = Layout::new(&config, &schedule);
        let span = 2 * config.max_abs_position + 1;
        let mut pe_table = vec![0.0; span * config.d];
        for (i, row) in pe_table.chunks_exact_mut(config.d).enumerate() {
            sinusoid_into(i as i64 - config.max_abs_position as i64, row);
        }
        Ok(Self { config, schedule, layout, pe_table })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScheduleSpec {
        &self.schedule
    }

    pub(crate) fn pe(&self, index: i64) -> Result<&[f32]> {
        let max = self.config.max_abs_position;
        if index.unsigned_abs() as usize > max {
            return Err(Error::PositionOverflow { position: index, max });
        }
        let row = (index + max as i64) as usize;
        Ok(&self.pe_table[row * self.config.d..(row + 1) * self.config.d])
    }

    pub(crate) fn linear(&self, params: &Parameters, ids: LinearIds, x: &[f32]) -> Vec<f32> {
        let rows = x.len() / ids.din;
        ops::linear(x, rows, &params.tensors[ids.w].data, &params.tensors[ids.b].data, ids.din, ids.dout)
    }

    fn linear_backward(&self, params: &Parameters, grads: &mut Grads, ids: LinearIds, x: &[f32], dy: &[f32]) -> Vec<f32> {
        let rows = x.len() / ids.din;
        let (dw, db) = grads.pair(ids.w, ids.b);
        ops::linear_backward(x, dy, rows, &params.tensors[ids.w].data, dw, db, ids.din, ids.dout)
    }

    pub(crate) fn norm(&self, params: &Parameters, ids: NormIds, x: &[f32]) -> (Vec<f32>, NormCache) {
        layer_norm(x, self.config.d, &params.tensors[ids.g].data, &params.tensors[ids.b].data)
    }

    fn norm_backward(&self, params: &Parameters, grads: &mut Grads, ids: NormIds, cache: &NormCache, dy: &[f32]) -> Vec<f32> {
        let (dg, db) = grads.pair(ids.g, ids.b);
        layer_norm_backward(cache, dy, self.config.d, &params.tensors[ids.g].data, dg, db)
    }

    pub(crate) fn check_tokens(&self, tokens: &[Token], vocab: usize) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }

    /// Embedding lookup scaled by `sqrt(d)` plus sinusoidal positions.
    pub(crate) fn embed_source(&self, params: &Parameters, src: &[Token], out: &mut Vec<f32>) -> Result<()> {
        let d = self.config.d;
        let table = &params.tensors[self.layout.src_emb].data;
        let scale = (d as f32).sqrt();
        for (pos, &t) in src.iter().enumerate() {
            let pe = self.pe(pos as i64)?;
            let e = &table[t as usize * d..(t as usize + 1) * d];
            out.extend(e.iter().zip(pe).map(|(a, b)| a * scale + b));
        }
        Ok(())
    }

    /// Decoder input row for `token` at decoder slot `slot`.
    pub(crate) fn embed_target_slot(&self, params: &Parameters, token: Token, slot: usize, out: &mut Vec<f32>) -> Result<()> {
        let d = self.config.d;
        let table = &params.tensors[self.layout.tgt_emb].data;
        let scale = (d as f32).sqrt();
        let pe = self.pe(self.schedule.position_at(slot).encoding_index())?;
        let e = &table[token as usize * d..(token as usize + 1) * d];
        let start = out.len();
        out.extend(e.iter().zip(pe).map(|(a, b)| a * scale + b));
        if let Some(dir) = self.layout.dir_emb {
            let dir_row = self.schedule.direction_of(slot);
            let de = &params.tensors[dir].data[dir_row * d..(dir_row + 1) * d];
            ops::add_in_place(&mut out[start..], de);
        }
        Ok(())
    }

    pub(crate) fn output_logits(&self, params: &Parameters, hidden: &[f32]) -> Vec<f32> {
        let (d, v) = (self.config.d, self.config.vocab_tgt);
        let rows = hidden.len() / d;
        let bias = &params.tensors[self.layout.out_b].data;
        let mut logits = Vec::with_capacity(rows * v);
        for _ in 0..rows {
            logits.extend_from_slice(bias);
        }
        let w = match self.layout.out_w {
            Some(id) => View::rows(&params.tensors[id].data, v),
            None => View::transposed(&params.tensors[self.layout.tgt_emb].data, d),
        };
        gemm(rows, d, v, View::rows(hidden, d), w, 1.0, ViewMut::rows(&mut logits, v));
        logits
    }

    fn attn_block(
        &self,
        params: &Parameters,
        ids: (NormIds, AttentionIds),
        x: &mut [f32],
        memory: Option<&[f32]>,
        spans: &[Span],
        biases: &[Bias],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> AttnBlock {
        let (norm_ids, a) = ids;
        let p = self.config.dropout;
        let (normed, norm) = self.norm(params, norm_ids, x);
        let q = self.linear(params, a.q, &normed);
        let kv_src = memory.unwrap_or(&normed);
        let k = self.linear(params, a.k, kv_src);
        let v = self.linear(params, a.v, kv_src);
        let core = attend(&q, &k, &v, spans, biases, self.config.heads, self.config.d, rng.as_deref_mut(), p);
        let mut out = self.linear(params, a.o, &core.ctx);
        let out_drop = dropout_mask(rng, p, out.len());
        apply_mask(&mut out, &out_drop);
        ops::add_in_place(x, &out);
        AttnBlock { norm, normed, q, k, v, core, out_drop }
    }

    /// Returns the gradient w.r.t. the block input (residual included) and,
    /// for cross-attention, accumulates into `dmemory`.
    #[allow(clippy::too_many_arguments)]
    fn attn_block_backward(
        &self,
        params: &Parameters,
        grads: &mut Grads,
        ids: (NormIds, AttentionIds),
        cache: &AttnBlock,
        dx: &[f32],
        memory: Option<(&[f32], &mut Vec<f32>)>,
        spans: &[Span],
    ) -> Vec<f32> {
        let (norm_ids, a) = ids;
        let mut dout = dx.to_vec();
        apply_mask(&mut dout, &cache.out_drop);
        let dctx = self.linear_backward(params, grads, a.o, &cache.core.ctx, &dout);
        let (dq, dk, dv) =
            attend_backward(&cache.q, &cache.k, &cache.v, &cache.core, &dctx, spans, self.config.heads, self.config.d);
        let mut dnormed = self.linear_backward(params, grads, a.q, &cache.normed, &dq);
        match memory {
            Some((mem, dmem)) => {
                let g = self.linear_backward(params, grads, a.k, mem, &dk);
                ops::add_in_place(dmem, &g);
                let g = self.linear_backward(params, grads, a.v, mem, &dv);
                ops::add_in_place(dmem, &g);
            }
            None => {
                let g = self.linear_backward(params, grads, a.k, &cache.normed, &dk);
                ops::add_in_place(&mut dnormed, &g);
                let g = self.linear_backward(params, grads, a.v, &cache.normed, &dv);
                ops::add_in_place(&mut dnormed, &g);
            }
        }
        let mut dinput = self.norm_backward(params, grads, norm_ids, &cache.norm, &dnormed);
        ops::add_in_place(&mut dinput, dx);
        dinput
    }

    fn ff_block(
        &self,
        params: &Parameters,
        ids: (NormIds, FeedForwardIds),
        x: &mut [f32],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> FfBlock {
        let (norm_ids, f) = ids;
        let (normed, norm) = self.norm(params, norm_ids, x);
        let mut hidden = self.linear(params, f.up, &normed);
        relu_in_place(&mut hidden);
        let mut out = self.linear(params, f.down, &hidden);
        let out_drop = dropout_mask(rng, self.config.dropout, out.len());
        apply_mask(&mut out, &out_drop);
        ops::add_in_place(x, &out);
        FfBlock { norm, normed, hidden, out_drop }
    }

    fn ff_block_backward(
        &self,
        params: &Parameters,
        grads: &mut Grads,
        ids: (NormIds, FeedForwardIds),
        cache: &FfBlock,
        dx: &[f32],
    ) -> Vec<f32> {
        let (norm_ids, f) = ids;
        let mut dout = dx.to_vec();
        apply_mask(&mut dout, &cache.out_drop);
        let mut dhidden = self.linear_backward(params, grads, f.down, &cache.hidden, &dout);
        relu_backward(&cache.hidden, &mut dhidden);
        let dnormed = self.linear_backward(params, grads, f.up, &cache.normed, &dhidden);
        let mut dinput = self.norm_backward(params, grads, norm_ids, &cache.norm, &dnormed);
        ops::add_in_place(&mut dinput, dx);
        dinput
    }

    /// Teacher-forced pass over a packed batch. Dropout is active only when
    /// `rng` is given.
    pub(crate) fn forward(
        &self,
        params: &Parameters,
        batch: &[Example],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let cfg = &self.config;
        let d = cfg.d;
        let z = self.schedule.step_width();

        let mut src_tokens = Vec::new();
        let mut dec_tokens = Vec::new();
        let mut dec_dirs = Vec::new();
        let mut enc_spans = Vec::with_capacity(batch.len());
        let mut self_spans = Vec::with_capacity(batch.len());
        let mut cross_spans = Vec::with_capacity(batch.len());
        let mut enc_keys = Vec::with_capacity(batch.len());
        let mut self_masks = Vec::with_capacity(batch.len());
        let mut enc_x = Vec::new();
        let mut dec_x = Vec::new();
        for ex in batch {
            let (m, n) = (ex.src.len(), ex.target.len());
            if m == 0 || n == 0 {
                return Err(Error::EmptySequence);
            }
            let t = ex.target;
            if t.decoder_input.len() != n || t.loss_mask.len() != n || n % z != 0 {
                return Err(Error::Shape(format!("scheduled target of length {n} is inconsistent")));
            }
            if n > cfg.max_len {
                return Err(Error::CursorOverflow { cursor: n, max: cfg.max_len });
            }
            self.check_tokens(ex.src, cfg.vocab_src)?;
            self.check_tokens(&t.decoder_input, cfg.vocab_tgt)?;
            self.check_tokens(&t.target, cfg.vocab_tgt)?;
            let (e_off, d_off) = (src_tokens.len(), dec_tokens.len());
            enc_spans.push(Span { q_off: e_off, q_len: m, k_off: e_off, k_len: m });
            self_spans.push(Span { q_off: d_off, q_len: n, k_off: d_off, k_len: n });
            cross_spans.push(Span { q_off: d_off, q_len: n, k_off: e_off, k_len: m });
            enc_keys.push(key_bias(ex.src));
            self_masks.push(build_attention_mask(n, &self.schedule)?.data);
            src_tokens.extend_from_slice(ex.src);
            dec_tokens.extend_from_slice(&t.decoder_input);
            self.embed_source(params, ex.src, &mut enc_x)?;
            for (slot, &tok) in t.decoder_input.iter().enumerate() {
                self.embed_target_slot(params, tok, slot, &mut dec_x)?;
                dec_dirs.push(self.schedule.direction_of(slot));
            }
        }

        let enc_biases: Vec<Bias> = enc_keys.iter().map(|k| Bias::Keys(k)).collect();
        let self_biases: Vec<Bias> = self_masks.iter().map(|m| Bias::Dense(m)).collect();

        let enc_emb_drop = dropout_mask(&mut rng, cfg.dropout, enc_x.len());
        apply_mask(&mut enc_x, &enc_emb_drop);
        let mut enc_layers = Vec::with_capacity(cfg.enc_layers);
        for ids in &self.layout.encoder {
            let attn = self.attn_block(params, (ids.norm_attn, ids.attn), &mut enc_x, None, &enc_spans, &enc_biases, &mut rng);
            let ff = self.ff_block(params, (ids.norm_ff, ids.ff), &mut enc_x, &mut rng);
            enc_layers.push(EncLayerCache { attn, ff });
        }
        let (memory, enc_norm) = self.norm(params, self.layout.enc_norm, &enc_x);

        let dec_emb_drop = dropout_mask(&mut rng, cfg.dropout, dec_x.len());
        apply_mask(&mut dec_x, &dec_emb_drop);
        let mut dec_layers = Vec::with_capacity(cfg.dec_layers);
        for ids in &self.layout.decoder {
            let self_attn =
                self.attn_block(params, (ids.norm_self, ids.self_attn), &mut dec_x, None, &self_spans, &self_biases, &mut rng);
            let cross = self.attn_block(
                params,
                (ids.norm_cross, ids.cross_attn),
                &mut dec_x,
                Some(&memory),
                &cross_spans,
                &enc_biases,
                &mut rng,
            );
            let ff = self.ff_block(params, (ids.norm_ff, ids.ff), &mut dec_x, &mut rng);
            dec_layers.push(DecLayerCache { self_attn, cross, ff });
        }
        let (dec_out, dec_norm) = self.norm(params, self.layout.dec_norm, &dec_x);
        let logits = self.output_logits(params, &dec_out);
        let rows = dec_tokens.len();
        debug_assert_eq!(dec_out.len(), rows * d);
        Ok(Forward {
            logits,
            rows,
            src_tokens,
            dec_tokens,
            dec_dirs,
            enc_spans,
            self_spans,
            cross_spans,
            enc_emb_drop,
            dec_emb_drop,
            enc_layers,
            enc_norm,
            memory,
            dec_layers,
            dec_norm,
            dec_out,
        })
    }

    /// Gradients of all parameters given `dlogits`, accumulated into `grads`.
    pub(crate) fn backward(&self, params: &Parameters, fwd: &Forward, dlogits: &[f32], grads: &mut Parameters) {
        let cfg = &self.config;
        let (d, v) = (cfg.d, cfg.vocab_tgt);
        let mut g = Grads { tensors: grads };

        // output projection
        let mut ddec = vec![0.0; fwd.rows * d];
        match self.layout.out_w {
            Some(id) => {
                gemm(d, fwd.rows, v, View::transposed(&fwd.dec_out, d), View::rows(dlogits, v), 1.0, ViewMut::rows(g.one(id), v));
                gemm(fwd.rows, v, d, View::rows(dlogits, v), View::transposed(&params.tensors[id].data, v), 0.0, ViewMut::rows(&mut ddec, d));
            }
            None => {
                let emb = self.layout.tgt_emb;
                gemm(v, fwd.rows, d, View::transposed(dlogits, v), View::rows(&fwd.dec_out, d), 1.0, ViewMut::rows(g.one(emb), d));
                gemm(fwd.rows, v, d, View::rows(dlogits, v), View::rows(&params.tensors[emb].data, d), 0.0, ViewMut::rows(&mut ddec, d));
            }
        }
        {
            let db = g.one(self.layout.out_b);
            for row in dlogits.chunks_exact(v) {
                ops::add_in_place(db, row);
            }
        }
        let mut dx = self.norm_backward(params, &mut g, self.layout.dec_norm, &fwd.dec_norm, &ddec);

        let mut dmemory = vec![0.0; fwd.memory.len()];
        for (ids, cache) in self.layout.decoder.iter().zip(&fwd.dec_layers).rev() {
            dx = self.ff_block_backward(params, &mut g, (ids.norm_ff, ids.ff), &cache.ff, &dx);
            dx = self.attn_block_backward(
                params,
                &mut g,
                (ids.norm_cross, ids.cross_attn),
                &cache.cross,
                &dx,
                Some((&fwd.memory, &mut dmemory)),
                &fwd.cross_spans,
            );
            dx = self.attn_block_backward(params, &mut g, (ids.norm_self, ids.self_attn), &cache.self_attn, &dx, None, &fwd.self_spans);
        }
        apply_mask(&mut dx, &fwd.dec_emb_drop);
        let scale = (d as f32).sqrt();
        {
            let table = g.one(self.layout.tgt_emb);
            for (row, &tok) in dx.chunks_exact(d).zip(&fwd.dec_tokens) {
                let e = &mut table[tok as usize * d..(tok as usize + 1) * d];
                for (a, b) in e.iter_mut().zip(row) {
                    *a += b * scale;
                }
            }
        }
        if let Some(dir) = self.layout.dir_emb {
            let table = g.one(dir);
            for (row, &k) in dx.chunks_exact(d).zip(&fwd.dec_dirs) {
                ops::add_in_place(&mut table[k * d..(k + 1) * d], row);
            }
        }

        let mut dx = self.norm_backward(params, &mut g, self.layout.enc_norm, &fwd.enc_norm, &dmemory);
        for (ids, cache) in self.layout.encoder.iter().zip(&fwd.enc_layers).rev() {
            dx = self.ff_block_backward(params, &mut g, (ids.norm_ff, ids.ff), &cache.ff, &dx);
            dx = self.attn_block_backward(params, &mut g, (ids.norm_attn, ids.attn), &cache.attn, &dx, None, &fwd.enc_spans);
        }
        apply_mask(&mut dx, &fwd.enc_emb_drop);
        let table = g.one(self.layout.src_emb);
        for (row, &tok) in dx.chunks_exact(d).zip(&fwd.src_tokens) {
            let e = &mut table[tok as usize * d..(tok as usize + 1) * d];
            for (a, b) in e.iter_mut().zip(row) {
                *a += b * scale;
            }
        }
    }
}

/// Token-level cross-entropy over scored slots of a packed batch.
///
/// Returns the summed loss, the number of scored slots and `dlogits` for the
/// *mean* loss.
pub(crate) fn cross_entropy(
    logits: &[f32],
    batch: &[Example],
    vocab: usize,
    label_smoothing: f32,
) -> Result<(f64, usize, Vec<f32>)> {
    let count: usize = batch.iter().map(|ex| ex.target.scored_slots()).sum();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let inv = 1.0 / count as f32;
    let eps = label_smoothing;
    let mut dlogits = vec![0.0; logits.len()];
    let mut total = 0.0f64;
    let mut row = 0;
    let mut probs = vec![0.0; vocab];
    for ex in batch {
        for (slot, &target) in ex.target.target.iter().enumerate() {
            let r = row + slot;
            if ex.target.loss_mask[slot] == 0 {
                continue;
            }
            let lrow = &logits[r * vocab..(r + 1) * vocab];
            probs.copy_from_slice(lrow);
            ops::log_softmax_in_place(&mut probs);
            let nll = -probs[target as usize] as f64;
            total += if eps > 0.0 {
                let mean_nll = -probs.iter().map(|&p| p as f64).sum::<f64>() / vocab as f64;
                (1.0 - eps as f64) * nll + eps as f64 * mean_nll
            } else {
                nll
            };
            let grow = &mut dlogits[r * vocab..(r + 1) * vocab];
            for (g, lp) in grow.iter_mut().zip(&probs) {
                *g = (lp.exp() - eps / vocab as f32) * inv;
            }
            grow[target as usize] -= (1.0 - eps) * inv;
        }
        row += ex.target.len();
    }
    Ok((total, count, dlogits))
}
