//! Step-wise decoding with cached keys and values.

use super::network::{attend, key_bias, relu_in_place, Bias, Network, Span};
use super::ops;
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::vocab::Token;

/// Encoder memory for one source sentence, with the cross-attention keys and
/// values of every decoder layer precomputed.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    len: usize,
    key_bias: Vec<f32>,
    cross: Vec<(Vec<f32>, Vec<f32>)>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Self-attention cache of one hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    cursor: usize,
}

impl DecoderState {
    /// Number of decoder slots consumed so far.
    pub fn cursor(&self) -> usize {
        self.cursor
    }
}

/// One hypothesis advanced by [`Network::decode_batch`].
pub struct StepItem<'a> {
    pub encoder: &'a EncoderOutput,
    pub state: &'a mut DecoderState,
    /// Tokens fed at the next `tokens.len()` decoder slots.
    pub tokens: &'a [Token],
}

impl Network {
    pub(crate) fn encode(&self, params: &Parameters, src: &[Token]) -> Result<EncoderOutput> {
        if src.is_empty() {
            return Err(Error::EmptySequence);
        }
        self.check_tokens(src, self.config.vocab_src)?;
        let d = self.config.d;
        let mut x = Vec::with_capacity(src.len() * d);
        self.embed_source(params, src, &mut x)?;
        let key_bias = key_bias(src);
        let spans = [Span { q_off: 0, q_len: src.len(), k_off: 0, k_len: src.len() }];
        for ids in &self.layout.encoder {
            let (normed, _) = self.norm(params, ids.norm_attn, &x);
            let q = self.linear(params, ids.attn.q, &normed);
            let k = self.linear(params, ids.attn.k, &normed);
            let v = self.linear(params, ids.attn.v, &normed);
            let core = attend(&q, &k, &v, &spans, &[Bias::Keys(&key_bias)], self.config.heads, d, None, 0.0);
            ops::add_in_place(&mut x, &self.linear(params, ids.attn.o, &core.ctx));
            self.feed_forward_in_place(params, ids.norm_ff, ids.ff, &mut x);
        }
        let (memory, _) = self.norm(params, self.layout.enc_norm, &x);
        let cross = self
            .layout
            .decoder
            .iter()
            .map(|ids| {
                (self.linear(params, ids.cross_attn.k, &memory), self.linear(params, ids.cross_attn.v, &memory))
            })
            .collect();
        Ok(EncoderOutput { len: src.len(), key_bias, cross })
    }

    pub(crate) fn start_state(&self) -> DecoderState {
        let layers = self.config.dec_layers;
        DecoderState { keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers], cursor: 0 }
    }

    fn feed_forward_in_place(
        &self,
        params: &Parameters,
        norm: super::params::NormIds,
        ff: super::params::FeedForwardIds,
        x: &mut [f32],
    ) {
        let (normed, _) = self.norm(params, norm, x);
        let mut hidden = self.linear(params, ff.up, &normed);
        relu_in_place(&mut hidden);
        ops::add_in_place(x, &self.linear(params, ff.down, &hidden));
    }

    /// Feeds each item's tokens at its next slots and returns, per item, the
    /// logits (`tokens.len() x vocab`) for those slots. Caches and cursors
    /// advance in place.
    pub(crate) fn decode_batch(&self, params: &Parameters, items: &mut [StepItem]) -> Result<Vec<Vec<f32>>> {
        let cfg = &self.config;
        let d = cfg.d;
        let mut x = Vec::new();
        let mut offsets = Vec::with_capacity(items.len());
        let mut rows = 0;
        for item in items.iter() {
            let w = item.tokens.len();
            if w == 0 {
                return Err(Error::EmptyInput("decode step without tokens"));
            }
            let end = item.state.cursor + w;
            if end > cfg.max_len {
                return Err(Error::CursorOverflow { cursor: end, max: cfg.max_len });
            }
            self.check_tokens(item.tokens, cfg.vocab_tgt)?;
            for (i, &tok) in item.tokens.iter().enumerate() {
                self.embed_target_slot(params, tok, item.state.cursor + i, &mut x)?;
            }
            offsets.push(rows);
            rows += w;
        }

        for (l, ids) in self.layout.decoder.iter().enumerate() {
            // masked self-attention over the cache
            let (normed, _) = self.norm(params, ids.norm_self, &x);
            let q = self.linear(params, ids.self_attn.q, &normed);
            let k = self.linear(params, ids.self_attn.k, &normed);
            let v = self.linear(params, ids.self_attn.v, &normed);
            let mut ctx = vec![0.0; rows * d];
            for (item, &off) in items.iter_mut().zip(&offsets) {
                let w = item.tokens.len();
                let state = &mut *item.state;
                state.keys[l].extend_from_slice(&k[off * d..(off + w) * d]);
                state.values[l].extend_from_slice(&v[off * d..(off + w) * d]);
                let total = state.cursor + w;
                let mut mask = Vec::with_capacity(w * total);
                for i in 0..w {
                    let slot = state.cursor + i;
                    mask.extend((0..total).map(|j| if self.schedule.allows(slot, j) { 0.0 } else { crate::schedule::MASK_NEG }));
                }
                let core = attend(
                    &q[off * d..(off + w) * d],
                    &state.keys[l],
                    &state.values[l],
                    &[Span { q_off: 0, q_len: w, k_off: 0, k_len: total }],
                    &[Bias::Dense(&mask)],
                    cfg.heads,
                    d,
                    None,
                    0.0,
                );
                ctx[off * d..(off + w) * d].copy_from_slice(&core.ctx);
            }
            ops::add_in_place(&mut x, &self.linear(params, ids.self_attn.o, &ctx));

            // cross-attention over the encoder memory
            let (normed, _) = self.norm(params, ids.norm_cross, &x);
            let q = self.linear(params, ids.cross_attn.q, &normed);
            for (item, &off) in items.iter().zip(&offsets) {
                let w = item.tokens.len();
                let enc = item.encoder;
                let (ck, cv) = &enc.cross[l];
                let core = attend(
                    &q[off * d..(off + w) * d],
                    ck,
                    cv,
                    &[Span { q_off: 0, q_len: w, k_off: 0, k_len: enc.len }],
                    &[Bias::Keys(&enc.key_bias)],
                    cfg.heads,
                    d,
                    None,
                    0.0,
                );
                ctx[off * d..(off + w) * d].copy_from_slice(&core.ctx);
            }
            ops::add_in_place(&mut x, &self.linear(params, ids.cross_attn.o, &ctx));
            self.feed_forward_in_place(params, ids.norm_ff, ids.ff, &mut x);
        }
        for item in items.iter_mut() {
            item.state.cursor += item.tokens.len();
        }
        let (out, _) = self.norm(params, self.layout.dec_norm, &x);
        let logits = self.output_logits(params, &out);
        let v = cfg.vocab_tgt;
        Ok(items
            .iter()
            .zip(&offsets)
            .map(|(item, &off)| logits[off * v..(off + item.tokens.len()) * v].to_vec())
            .collect())
    }
}
