//! Beam search that commits a whole block of tokens per step.
//!
//! Each live hypothesis proposes its `B` best tokens at every position of the
//! next block; the per-position candidates are combined by outer addition and
//! only the `B` best combinations survive. A combination containing EOS
//! finishes its hypothesis. When to stop is set by [`StopRule`].

use crate::error::{Error, Result};
use crate::model::{DecoderState, EncoderOutput, Model};
use crate::schedule::{direction_ids_for, positions_for, recover_output, recover_truncated, ScheduleSpec, ScheduledTarget};
use crate::vocab::{Token, BOS, EOS, PAD};

/// Anything that can score the next block of a hypothesis.
pub trait StepModel {
    type State: Clone;

    /// Schedule governing block width and order recovery.
    fn schedule(&self) -> &ScheduleSpec;

    /// Largest number of decoder slots a hypothesis may occupy.
    fn max_slots(&self) -> usize;

    /// Fresh decoder state for source sentence `sentence`.
    fn initial_state(&self, sentence: usize) -> Result<Self::State>;

    /// Feeds one block of tokens to each state and returns the
    /// log-probabilities (`block x vocab`, row-major) of the following slots.
    fn step(&self, batch: &mut [(&mut Self::State, &[Token])]) -> Result<Vec<Vec<f32>>>;
}

/// How finished hypotheses are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LengthNorm {
    /// Score divided by the number of generated slots.
    #[default]
    ByLength,
    /// Score divided by `((5 + t) / 6)^alpha`.
    Gnmt(f64),
}

impl LengthNorm {
    pub fn normalize(&self, score: f64, slots: usize) -> f64 {
        match *self {
            LengthNorm::ByLength => score / slots.max(1) as f64,
            LengthNorm::Gnmt(alpha) => score / ((5.0 + slots as f64) / 6.0).powf(alpha),
        }
    }
}

/// When a sentence stops searching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopRule {
    /// Once `beam` hypotheses have finished and no live hypothesis can still
    /// outrank the best finished one. Scores never increase, so a live
    /// hypothesis with score `s` is bounded by its normalized score at the
    /// length limit.
    #[default]
    Settled,
    /// As soon as `beam` hypotheses have finished. With a confident model the
    /// low-ranked EOS combinations of every step fill the finished set before
    /// the real hypothesis completes.
    FirstB,
}

#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum number of generated slots, excluding the start block.
    pub max_len: usize,
    pub norm: LengthNorm,
    /// Remove repeated adjacent n-grams up to this order after recovery.
    pub dedup: Option<usize>,
    pub stop: StopRule,
}

impl BeamConfig {
    pub fn new(beam: usize, max_len: usize) -> Self {
        Self { beam, max_len, norm: LengthNorm::ByLength, dedup: None, stop: StopRule::Settled }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Natural-order output.
    pub output: Vec<Token>,
    /// Normalized score used for ranking.
    pub score: f64,
    /// Sum of log-probabilities of every generated slot.
    pub raw_score: f64,
    pub steps: usize,
    /// Schedule-order tokens including the start block.
    pub raw: Vec<Token>,
    /// No EOS was produced within the length limit.
    pub unterminated: bool,
}

/// Top `k` entries of a row, best first; ties go to the smaller index.
fn top_k(row: &[f32], k: usize) -> Vec<(usize, f64)> {
    if k == 0 {
        return Vec::new();
    }
    let mut best: Vec<(usize, f32)> = Vec::with_capacity(k + 1);
    for (i, &v) in row.iter().enumerate() {
        if v == f32::NEG_INFINITY || (best.len() == k && v <= best[k - 1].1) {
            continue;
        }
        // scanning in index order, so an equal earlier entry stays ahead
        let at = best.partition_point(|&(_, b)| b >= v);
        best.insert(at, (i, v));
        best.truncate(k);
    }
    best.into_iter().map(|(i, v)| (i, v as f64)).collect()
}

/// The `b` best sums taking one entry from each row, with their index
/// tuples. Ties are broken by the lexicographically smallest tuple.
pub fn combine_scores(rows: &[Vec<f64>], b: usize) -> Vec<(f64, Vec<usize>)> {
    let mut partial: Vec<(f64, Vec<usize>)> = vec![(0.0, Vec::new())];
    for row in rows {
        // (score, parent, index); tuples are only built for the survivors
        let mut next: Vec<(f64, usize, usize)> = Vec::with_capacity(partial.len() * row.len());
        for (p, (score, _)) in partial.iter().enumerate() {
            next.extend(row.iter().enumerate().map(|(i, v)| (score + v, p, i)));
        }
        next.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| partial[x.1].1.cmp(&partial[y.1].1)).then(x.2.cmp(&y.2)));
        next.truncate(b);
        partial = next
            .into_iter()
            .map(|(score, p, i)| {
                let mut t = Vec::with_capacity(rows.len());
                t.extend_from_slice(&partial[p].1);
                t.push(i);
                (score, t)
            })
            .collect();
    }
    partial
}

/// Drop an n-gram (largest `n` first) whenever it repeats the n-gram right
/// before it.
pub fn dedup_ngrams(tokens: &[Token], max_n: usize) -> Vec<Token> {
    let mut out: Vec<Token> = Vec::with_capacity(tokens.len());
    let mut i = 0;
    'scan: while i < tokens.len() {
        for n in (1..=max_n).rev() {
            if out.len() >= n && i + n <= tokens.len() && out[out.len() - n..] == tokens[i..i + n] {
                i += n;
                continue 'scan;
            }
        }
        out.push(tokens[i]);
        i += 1;
    }
    out
}

struct Hyp<S> {
    tokens: Vec<Token>,
    score: f64,
    state: S,
}

struct Finished {
    tokens: Vec<Token>,
    score: f64,
}

struct Beam<S> {
    live: Vec<Hyp<S>>,
    finished: Vec<Finished>,
    done: bool,
}

fn finish_result(spec: &ScheduleSpec, raw: Vec<Token>, raw_score: f64, cfg: &BeamConfig, unterminated: bool) -> DecodeResult {
    let z = spec.step_width();
    let generated = raw.len() - z;
    let mut output = if unterminated {
        recover_truncated(&raw[z..], spec)
    } else {
        recover_output(&raw[z..], spec).unwrap_or_else(|_| recover_truncated(&raw[z..], spec))
    };
    if let Some(n) = cfg.dedup {
        output = dedup_ngrams(&output, n);
    }
    DecodeResult {
        output,
        score: cfg.norm.normalize(raw_score, generated),
        raw_score,
        steps: generated / z,
        raw,
        unterminated,
    }
}

fn settled<S>(bm: &Beam<S>, cfg: &BeamConfig, z: usize, limit: usize) -> bool {
    match cfg.stop {
        StopRule::FirstB => true,
        StopRule::Settled => {
            let best = bm
                .finished
                .iter()
                .map(|f| cfg.norm.normalize(f.score, f.tokens.len() - z))
                .fold(f64::NEG_INFINITY, f64::max);
            bm.live.iter().all(|h| cfg.norm.normalize(h.score, limit) <= best)
        }
    }
}

fn sort_results(results: &mut [DecodeResult]) {
    results.sort_by(|a, b| b.score.total_cmp(&a.score));
}

fn effective_limit<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<usize> {
    let z = model.schedule().step_width();
    if cfg.beam == 0 {
        return Err(Error::InvalidConfig("beam size must be at least 1".into()));
    }
    if cfg.max_len == 0 || cfg.max_len % z != 0 {
        return Err(Error::InvalidConfig(format!("maximum length {} is not a positive multiple of {z}", cfg.max_len)));
    }
    let cap = model.max_slots().saturating_sub(z) / z * z;
    Ok(cfg.max_len.min(cap))
}

/// Beam search for several source sentences at once; hypotheses of all
/// sentences share each model call. Returns up to `beam` results per
/// sentence, best first.
pub fn beam_search_batch<M: StepModel>(model: &M, sentences: usize, cfg: &BeamConfig) -> Result<Vec<Vec<DecodeResult>>> {
    let spec = *model.schedule();
    let z = spec.step_width();
    let limit = effective_limit(model, cfg)?;
    let b = cfg.beam;
    let mut beams: Vec<Beam<M::State>> = (0..sentences)
        .map(|s| {
            Ok(Beam {
                live: vec![Hyp { tokens: vec![BOS; z], score: 0.0, state: model.initial_state(s)? }],
                finished: Vec::new(),
                done: limit == 0,
            })
        })
        .collect::<Result<_>>()?;

    let mut t = 0;
    while t < limit && beams.iter().any(|bm| !bm.done) {
        // one model call over every live hypothesis of every active sentence
        let mut owners = Vec::new();
        let mut hyps: Vec<Hyp<M::State>> = Vec::new();
        for (s, bm) in beams.iter_mut().enumerate() {
            if !bm.done {
                for h in bm.live.drain(..) {
                    owners.push(s);
                    hyps.push(h);
                }
            }
        }
        let log_probs = {
            let mut batch: Vec<(&mut M::State, &[Token])> =
                hyps.iter_mut().map(|h| (&mut h.state, &h.tokens[h.tokens.len() - z..])).collect();
            model.step(&mut batch)?
        };

        let mut candidates: Vec<Vec<(f64, usize, Vec<Token>)>> = vec![Vec::new(); sentences];
        for (hi, lp) in log_probs.iter().enumerate() {
            let vocab = lp.len() / z;
            let per_pos: Vec<Vec<(usize, f64)>> = lp.chunks_exact(vocab).map(|row| top_k(row, b)).collect();
            let rows: Vec<Vec<f64>> = per_pos.iter().map(|r| r.iter().map(|&(_, v)| v).collect()).collect();
            for (score, tuple) in combine_scores(&rows, b) {
                let words: Vec<Token> = tuple.iter().enumerate().map(|(p, &i)| per_pos[p][i].0 as Token).collect();
                candidates[owners[hi]].push((hyps[hi].score + score, hi, words));
            }
        }

        for (s, mut cands) in candidates.into_iter().enumerate() {
            let bm = &mut beams[s];
            if bm.done {
                continue;
            }
            // stable sort keeps hypothesis order, then combination order, among ties
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            for (score, hi, words) in cands {
                let finished = words.contains(&EOS);
                if !finished && bm.live.len() >= b {
                    continue;
                }
                let mut tokens = hyps[hi].tokens.clone();
                tokens.extend_from_slice(&words);
                if finished {
                    bm.finished.push(Finished { tokens, score });
                } else {
                    bm.live.push(Hyp { tokens, score, state: hyps[hi].state.clone() });
                }
            }
            if bm.live.is_empty() || (bm.finished.len() >= b && settled(bm, cfg, z, limit)) {
                bm.done = true;
            }
        }
        t += z;
    }

    Ok(beams
        .into_iter()
        .map(|bm| {
            let mut results: Vec<DecodeResult> = if bm.finished.is_empty() {
                bm.live.into_iter().map(|h| finish_result(&spec, h.tokens, h.score, cfg, true)).collect()
            } else {
                bm.finished.into_iter().map(|f| finish_result(&spec, f.tokens, f.score, cfg, false)).collect()
            };
            sort_results(&mut results);
            results.truncate(b);
            results
        })
        .collect())
}

/// Beam search for a single sentence (index 0 of `model`).
pub fn beam_search<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<Vec<DecodeResult>> {
    Ok(beam_search_batch(model, 1, cfg)?.pop().unwrap_or_default())
}

/// Per-position argmax decoding; stops at the first block containing EOS.
pub fn greedy_decode<M: StepModel>(model: &M, sentence: usize, max_len: usize, norm: LengthNorm) -> Result<DecodeResult> {
    let cfg = BeamConfig { norm, ..BeamConfig::new(1, max_len) };
    let limit = effective_limit(model, &cfg)?;
    let spec = *model.schedule();
    let z = spec.step_width();
    let mut state = model.initial_state(sentence)?;
    let mut raw = vec![BOS; z];
    let mut score = 0.0f64;
    let mut t = 0;
    while t < limit {
        let lp = model.step(&mut [(&mut state, &raw[raw.len() - z..])])?.pop().expect("one row block");
        let vocab = lp.len() / z;
        let mut block = Vec::with_capacity(z);
        for row in lp.chunks_exact(vocab) {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            score += row[best] as f64;
            block.push(best as Token);
        }
        raw.extend_from_slice(&block);
        t += z;
        if block.contains(&EOS) {
            return Ok(finish_result(&spec, raw, score, &cfg, false));
        }
    }
    Ok(finish_result(&spec, raw, score, &cfg, true))
}

/// Log-softmax of each row with PAD and BOS excluded: neither can be a
/// decoded token.
pub fn inference_log_probs(logits: &mut [f32], vocab: usize) {
    for row in logits.chunks_exact_mut(vocab) {
        row[PAD as usize] = f32::NEG_INFINITY;
        row[BOS as usize] = f32::NEG_INFINITY;
        crate::model::ops::log_softmax_in_place(row);
    }
}

/// [`StepModel`] over a trained transformer and a set of encoded sources.
pub struct TransformerStepper<'m> {
    model: &'m Model,
    encoders: Vec<EncoderOutput>,
}

impl<'m> TransformerStepper<'m> {
    pub fn new(model: &'m Model, sources: &[Vec<Token>]) -> Result<Self> {
        let encoders = sources.iter().map(|s| model.encode(s)).collect::<Result<_>>()?;
        Ok(Self { model, encoders })
    }
}

#[derive(Debug, Clone)]
pub struct SentenceState {
    sentence: usize,
    decoder: DecoderState,
}

impl StepModel for TransformerStepper<'_> {
    type State = SentenceState;

    fn schedule(&self) -> &ScheduleSpec {
        self.model.schedule()
    }

    fn max_slots(&self) -> usize {
        self.model.config().max_len
    }

    fn initial_state(&self, sentence: usize) -> Result<SentenceState> {
        if sentence >= self.encoders.len() {
            return Err(Error::EmptyInput("no such source sentence"));
        }
        Ok(SentenceState { sentence, decoder: self.model.start_state() })
    }

    fn step(&self, batch: &mut [(&mut SentenceState, &[Token])]) -> Result<Vec<Vec<f32>>> {
        let steps = batch
            .iter_mut()
            .map(|(st, tokens)| {
                let st = &mut **st;
                (&self.encoders[st.sentence], &mut st.decoder, *tokens)
            })
            .collect();
        let mut out = self.model.decode_steps(steps)?;
        let vocab = self.model.config().vocab_tgt;
        for lp in &mut out {
            inference_log_probs(lp, vocab);
        }
        Ok(out)
    }
}

/// Best result for every source, decoding `batch` sentences per model call.
/// Results keep the input order.
pub fn decode_sources(model: &Model, sources: &[Vec<Token>], cfg: &BeamConfig, batch: usize) -> Result<Vec<DecodeResult>> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(batch.max(1)) {
        let stepper = TransformerStepper::new(model, chunk)?;
        for results in beam_search_batch(&stepper, chunk.len(), cfg)? {
            out.push(results.into_iter().next().ok_or(Error::Unterminated)?);
        }
    }
    Ok(out)
}

/// Teacher-forced sum of log-probabilities of every generated slot of `raw`
/// (schedule order, start block included), normalized as during search.
pub fn rescore(model: &Model, src: &[Token], raw: &[Token]) -> Result<f64> {
    let spec = model.schedule();
    let z = spec.step_width();
    if raw.len() <= z || raw.len() % z != 0 || raw[..z].iter().any(|&t| t != BOS) {
        return Err(Error::Shape("raw hypothesis must be a start block followed by whole blocks".into()));
    }
    let n = raw.len() - z;
    let target = ScheduledTarget {
        decoder_input: raw[..n].to_vec(),
        target: raw[z..].to_vec(),
        loss_mask: vec![1; n],
        positions: positions_for(n, spec)?,
        direction_ids: direction_ids_for(n, spec),
    };
    let mut logits = model.teacher_forced_logits(src, &target)?;
    let vocab = model.config().vocab_tgt;
    inference_log_probs(&mut logits, vocab);
    Ok(target.target.iter().enumerate().map(|(i, &t)| logits[i * vocab + t as usize] as f64).sum())
}
