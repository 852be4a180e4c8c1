//! Quality metrics, perplexity, PMI estimation and the decoding benchmark.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::schedule::{prepare_target, ScheduleSpec};
use crate::search::{decode_sources, BeamConfig};
use crate::tasks::Dataset;
use crate::vocab::Token;

/// Anything that can give teacher-forced negative log-likelihoods.
pub trait TeacherForcedScorer {
    fn schedule(&self) -> &ScheduleSpec;

    /// Summed negative log-likelihood over scored slots, and their count.
    fn nll(&self, batch: &[Example]) -> Result<(f64, usize)>;
}

impl TeacherForcedScorer for Model {
    fn schedule(&self) -> &ScheduleSpec {
        Model::schedule(self)
    }

    fn nll(&self, batch: &[Example]) -> Result<(f64, usize)> {
        self.log_likelihood(batch)
    }
}

const SCORE_CHUNK: usize = 32;

/// `exp` of the mean per-slot negative log-likelihood over every scored slot
/// (EOS included), teacher-forced under the scorer's own schedule.
pub fn perplexity<S: TeacherForcedScorer>(scorer: &S, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("perplexity needs at least one example"));
    }
    let schedule = *scorer.schedule();
    let targets = data.pairs.iter().map(|p| prepare_target(&p.tgt, &schedule)).collect::<Result<Vec<_>>>()?;
    let (mut sum, mut count) = (0.0, 0);
    for (pairs, targets) in data.pairs.chunks(SCORE_CHUNK).zip(targets.chunks(SCORE_CHUNK)) {
        let batch: Vec<Example> = pairs.iter().zip(targets).map(|(p, t)| Example { src: &p.src, target: t }).collect();
        let (s, n) = scorer.nll(&batch)?;
        sum += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((sum / count as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmiEstimate {
    pub ppl_factored: f64,
    pub ppl_baseline: f64,
    /// `log10(ppl_factored) - log10(ppl_baseline)`.
    pub pmi: f64,
}

impl PmiEstimate {
    pub fn from_perplexities(ppl_factored: f64, ppl_baseline: f64) -> Self {
        Self { ppl_factored, ppl_baseline, pmi: ppl_factored.log10() - ppl_baseline.log10() }
    }
}

/// Average pointwise mutual information between slots that the factored
/// model predicts in parallel, estimated against a model that decodes the
/// same order one slot at a time.
pub fn estimate_pmi<F, B>(factored: &F, baseline: &B, data: &Dataset) -> Result<PmiEstimate>
where
    F: TeacherForcedScorer,
    B: TeacherForcedScorer,
{
    let (f, b) = (factored.schedule(), baseline.schedule());
    if b.step_width() != 1 {
        return Err(Error::ScheduleMismatch(format!("baseline {b} does not decode one slot per step")));
    }
    if f.order != b.order || f.h != b.h {
        return Err(Error::ScheduleMismatch(format!("baseline {b} does not follow the order of {f}")));
    }
    Ok(PmiEstimate::from_perplexities(perplexity(factored, data)?, perplexity(baseline, data)?))
}

fn ngram_counts(tokens: &[Token], n: usize) -> HashMap<&[Token], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU (0..100) over token ids: clipped 1- to 4-gram
/// precisions, add-one smoothing on orders 2 to 4, brevity penalty.
pub fn corpus_bleu(hypotheses: &[Vec<Token>], references: &[Vec<Token>]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::EmptyInput("BLEU needs equally many nonempty hypothesis and reference lists"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (matched[0] as f64 / total[0] as f64).ln();
    for n in 1..4 {
        log_sum += ((matched[n] + 1) as f64 / (total[n] + 1) as f64).ln();
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

/// Fraction of hypotheses identical to their reference.
pub fn sequence_accuracy(hypotheses: &[Vec<Token>], references: &[Vec<Token>]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::EmptyInput("accuracy needs equally many nonempty hypothesis and reference lists"));
    }
    let hits = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
    Ok(hits as f64 / hypotheses.len() as f64)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub beams: Vec<usize>,
    pub batches: Vec<usize>,
    pub repeats: usize,
    /// Untimed passes before measuring.
    pub warmup: usize,
    pub max_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { beams: vec![4], batches: vec![1], repeats: 3, warmup: 1, max_len: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub schedule: String,
    pub beam: usize,
    pub batch: usize,
    /// Mean wall-clock milliseconds per sentence.
    pub latency_ms: f64,
    /// Mean decoding steps per sentence.
    pub steps: f64,
    pub tokens_per_sec: f64,
    /// Baseline latency over this row's latency at the same beam and batch.
    pub speedup: f64,
    pub baseline: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_table(&self) -> String {
        let header = ["name", "schedule", "beam", "batch", "latency_ms", "steps", "tokens/s", "speedup"];
        let cells: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    r.schedule.clone(),
                    r.beam.to_string(),
                    r.batch.to_string(),
                    format!("{:.2}", r.latency_ms),
                    format!("{:.2}", r.steps),
                    format!("{:.1}", r.tokens_per_sec),
                    format!("{:.2}x", r.speedup),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row.iter().zip(widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

#[derive(Default)]
struct Timing {
    seconds: f64,
    steps: f64,
    tokens: usize,
}

/// Times every model on the same sources. Repeats are interleaved across
/// models so that slow stretches of the machine hit all of them alike.
fn time_decoding(models: &[(&str, &Model)], sources: &[Vec<Token>], beam: usize, batch: usize, cfg: &BenchConfig) -> Result<Vec<Timing>> {
    let configs: Vec<BeamConfig> = models
        .iter()
        .map(|(_, m)| {
            let z = m.schedule().step_width();
            BeamConfig::new(beam, cfg.max_len.div_ceil(z) * z)
        })
        .collect();
    for ((_, model), beam_cfg) in models.iter().zip(&configs) {
        for _ in 0..cfg.warmup {
            decode_sources(model, sources, beam_cfg, batch)?;
        }
    }
    let mut timings: Vec<Timing> = models.iter().map(|_| Timing::default()).collect();
    for _ in 0..cfg.repeats {
        for (((_, model), beam_cfg), t) in models.iter().zip(&configs).zip(&mut timings) {
            let start = Instant::now();
            let results = decode_sources(model, sources, beam_cfg, batch)?;
            t.seconds += start.elapsed().as_secs_f64();
            t.steps = results.iter().map(|r| r.steps).sum::<usize>() as f64 / sources.len() as f64;
            t.tokens = results.iter().map(|r| r.output.len()).sum::<usize>();
        }
    }
    for t in &mut timings {
        t.seconds /= cfg.repeats as f64;
    }
    Ok(timings)
}

/// Times beam decoding of `sources` for every model, beam size and batch
/// size. The first model is the baseline for the speedup column.
pub fn benchmark(models: &[(&str, &Model)], sources: &[Vec<Token>], cfg: &BenchConfig) -> Result<BenchReport> {
    if models.is_empty() || sources.is_empty() {
        return Err(Error::EmptyInput("benchmark needs models and sources"));
    }
    if cfg.repeats < 3 {
        return Err(Error::InvalidConfig("benchmark needs at least 3 timed repeats".into()));
    }
    let vocab = (models[0].1.config().vocab_src, models[0].1.config().vocab_tgt);
    if models.iter().any(|(_, m)| (m.config().vocab_src, m.config().vocab_tgt) != vocab) {
        return Err(Error::ScheduleMismatch("benchmarked models must share vocabularies".into()));
    }
    let mut rows = Vec::new();
    for &beam in &cfg.beams {
        for &batch in &cfg.batches {
            let timings = time_decoding(models, sources, beam, batch, cfg)?;
            let base = 1e3 * timings[0].seconds / sources.len() as f64;
            for (&(name, model), t) in models.iter().zip(timings) {
                let latency_ms = 1e3 * t.seconds / sources.len() as f64;
                rows.push(BenchRow {
                    name: name.to_string(),
                    schedule: model.schedule().to_string(),
                    beam,
                    batch,
                    latency_ms,
                    steps: t.steps,
                    tokens_per_sec: t.tokens as f64 / t.seconds,
                    speedup: base / latency_ms,
                    baseline: models[0].0.to_string(),
                });
            }
        }
    }
    Ok(BenchReport { rows })
}
