//! Optimization loop, checkpoint averaging and sequence-level distillation.

mod config;
mod optim;

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::TrainConfig;
pub use optim::{lr_at, Adam, OptimizerConfig};

use crate::error::{Error, Result};
use crate::model::{Example, Model, ModelConfig, Parameters};
use crate::schedule::{prepare_target, ScheduledTarget};
use crate::search::{beam_search_batch, BeamConfig, TransformerStepper};
use crate::tasks::{Dataset, DatasetMeta, Pair};
use crate::vocab::Token;

/// Reported every `log_every` updates and once at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss per scored slot since the previous report.
    pub loss: f64,
    pub lr: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: usize,
    pub history: Vec<Progress>,
}

struct Prepared {
    src: Vec<Token>,
    target: ScheduledTarget,
}

/// Groups example indices into batches whose padded size (examples times the
/// longest source plus target) stays within `tokens_per_batch`. Examples are
/// shuffled, then sorted by length so that batches hold similar lengths.
fn make_batches(data: &[Prepared], tokens_per_batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| (data[i].target.len(), data[i].src.len()));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut widest = 0;
    for i in order {
        let width = data[i].src.len() + data[i].target.len();
        let grown = widest.max(width);
        if !current.is_empty() && grown * (current.len() + 1) > tokens_per_batch {
            batches.push(std::mem::take(&mut current));
            widest = 0;
        }
        widest = widest.max(width);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(rng);
    batches
}

fn model_config(cfg: &TrainConfig, meta: &DatasetMeta) -> ModelConfig {
    ModelConfig { vocab_src: meta.vocab_src, vocab_tgt: meta.vocab_tgt, ..cfg.model.clone() }
}

/// Trains a fresh model on `data`.
pub fn train(data: &Dataset, cfg: &TrainConfig, progress: impl FnMut(&Progress)) -> Result<TrainOutcome> {
    let model = Model::new(model_config(cfg, &data.meta), cfg.schedule, cfg.seed)?;
    train_model(model, data, cfg, progress)
}

/// Continues training `model` on `data`; the model's architecture and
/// schedule are kept, everything else comes from `cfg`.
pub fn train_model(mut model: Model, data: &Dataset, cfg: &TrainConfig, mut progress: impl FnMut(&Progress)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    let schedule = *model.schedule();
    let prepared = data
        .pairs
        .iter()
        .map(|p| Ok(Prepared { src: p.src.clone(), target: prepare_target(&p.tgt, &schedule)? }))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(2));
    let mut adam = Adam::new(model.params(), &cfg.optim);
    let mut snapshots: VecDeque<Parameters> = VecDeque::with_capacity(cfg.average_last);
    let mut history = Vec::new();
    let d = model.config().d;
    let (mut loss_sum, mut loss_tokens) = (0.0f64, 0usize);
    let mut step = 0;
    let mut lr = 0.0;
    let mut epoch = 0;
    let max_steps = if cfg.max_steps == 0 { usize::MAX } else { cfg.max_steps };
    let epochs = if cfg.epochs == 0 { usize::MAX } else { cfg.epochs };
    'epochs: while epoch < epochs {
        epoch += 1;
        for batch in make_batches(&prepared, cfg.optim.tokens_per_batch, &mut rng) {
            if step >= max_steps {
                break 'epochs;
            }
            let examples: Vec<Example> =
                batch.iter().map(|&i| Example { src: &prepared[i].src, target: &prepared[i].target }).collect();
            let mut out = model.loss_and_gradients(&examples, Some(&mut dropout_rng))?;
            let mean = out.mean_loss();
            if !mean.is_finite() {
                return Err(Error::Diverged { step: step + 1, loss: mean as f32 });
            }
            if cfg.optim.clip_norm > 0.0 {
                let norm = out.grads.l2_norm();
                if norm > cfg.optim.clip_norm {
                    out.grads.scale(cfg.optim.clip_norm / norm);
                }
            }
            step += 1;
            lr = lr_at(step, d, cfg.optim.warmup, cfg.optim.lr_scale);
            adam.step(model.params_mut(), &out.grads, lr)?;
            if !model.params().is_finite() {
                return Err(Error::Diverged { step, loss: mean as f32 });
            }
            loss_sum += out.loss_sum;
            loss_tokens += out.tokens;
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                let p = Progress { step, epoch, loss: loss_sum / loss_tokens as f64, lr };
                progress(&p);
                history.push(p);
                (loss_sum, loss_tokens) = (0.0, 0);
            }
            if step % cfg.snapshot_every == 0 {
                push_snapshot(&mut snapshots, model.params().clone(), cfg.average_last);
            }
        }
    }
    if step == 0 {
        return Err(Error::EmptyInput("no training steps were run"));
    }
    if step % cfg.snapshot_every != 0 {
        push_snapshot(&mut snapshots, model.params().clone(), cfg.average_last);
    }
    if loss_tokens > 0 {
        let p = Progress { step, epoch, loss: loss_sum / loss_tokens as f64, lr };
        progress(&p);
        history.push(p);
    }
    let refs: Vec<&Parameters> = snapshots.iter().collect();
    model.set_params(Parameters::average(&refs)?)?;
    Ok(TrainOutcome { model, steps: step, history })
}

fn push_snapshot(ring: &mut VecDeque<Parameters>, params: Parameters, capacity: usize) {
    if ring.len() == capacity {
        ring.pop_front();
    }
    ring.push_back(params);
}

/// Mean per-slot loss of `model` on `data` without dropout.
pub fn evaluate_loss(model: &Model, data: &Dataset, tokens_per_batch: usize) -> Result<f64> {
    let schedule = *model.schedule();
    let prepared = data
        .pairs
        .iter()
        .map(|p| Ok(Prepared { src: p.src.clone(), target: prepare_target(&p.tgt, &schedule)? }))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut sum, mut count) = (0.0, 0);
    for batch in make_batches(&prepared, tokens_per_batch, &mut rng) {
        let examples: Vec<Example> =
            batch.iter().map(|&i| Example { src: &prepared[i].src, target: &prepared[i].target }).collect();
        let (s, n) = model.loss(&examples)?;
        sum += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone)]
pub struct Distilled {
    pub data: Dataset,
    /// Sources whose teacher output never terminated.
    pub dropped: usize,
}

/// Replaces every target with the teacher's best beam output.
pub fn distill(teacher: &Model, sources: &[Vec<Token>], beam: usize, max_len: usize, batch: usize) -> Result<Distilled> {
    let spec = teacher.schedule();
    if spec.h != 1 || spec.c != 1 {
        return Err(Error::ScheduleMismatch(format!("the teacher must be left-to-right autoregressive, found {spec}")));
    }
    let cfg = BeamConfig::new(beam, max_len);
    let mut pairs = Vec::with_capacity(sources.len());
    let mut dropped = 0;
    for chunk in sources.chunks(batch.max(1)) {
        let stepper = TransformerStepper::new(teacher, chunk)?;
        for (src, results) in chunk.iter().zip(beam_search_batch(&stepper, chunk.len(), &cfg)?) {
            match results.into_iter().next() {
                Some(best) if !best.unterminated && !best.output.is_empty() => {
                    pairs.push(Pair { src: src.clone(), tgt: best.output })
                }
                _ => dropped += 1,
            }
        }
    }
    let meta = DatasetMeta { vocab_src: teacher.config().vocab_src, vocab_tgt: teacher.config().vocab_tgt, task: None };
    Ok(Distilled { data: Dataset { meta, pairs }, dropped })
}
