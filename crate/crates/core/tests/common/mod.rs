//! Hand-built step models with known behaviour, shared by the search tests.
#![allow(dead_code)]

use bidecoder::schedule::{prepare_target, ScheduleSpec};
use bidecoder::search::StepModel;
use bidecoder::vocab::{Token, BOS, EOS, NUM_SPECIAL, PAD, UNK};
use bidecoder::Result;

/// Deterministic pseudo-random scores that depend on the whole prefix, so
/// that search decisions interact across steps.
#[derive(Debug, Clone)]
pub struct TableModel {
    pub spec: ScheduleSpec,
    pub vocab: usize,
    pub seed: u64,
    pub max_slots: usize,
    /// Added to the EOS logit; positive values make hypotheses end sooner.
    pub eos_bias: f32,
}

fn mix(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

impl TableModel {
    pub fn new(spec: ScheduleSpec, vocab: usize, seed: u64, max_slots: usize) -> Self {
        Self { spec, vocab, seed, max_slots, eos_bias: 0.0 }
    }

    /// Log-probabilities of the slot following `prefix`, in f64. PAD, BOS and
    /// UNK are excluded.
    pub fn log_probs(&self, prefix: &[Token], position: usize) -> Vec<f64> {
        let mut h = mix(self.seed ^ 0x1234_5678);
        for &t in prefix {
            h = mix(h ^ (t as u64 + 1));
        }
        h = mix(h ^ (position as u64 + 101));
        let mut logits: Vec<f64> = (0..self.vocab)
            .map(|v| {
                let r = mix(h ^ (v as u64 * 0x9e37_79b9));
                3.0 * (r >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        logits[EOS as usize] += self.eos_bias as f64;
        logits[PAD as usize] = f64::NEG_INFINITY;
        logits[BOS as usize] = f64::NEG_INFINITY;
        logits[UNK as usize] = f64::NEG_INFINITY;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }
}

impl StepModel for TableModel {
    type State = Vec<Token>;

    fn schedule(&self) -> &ScheduleSpec {
        &self.spec
    }

    fn max_slots(&self) -> usize {
        self.max_slots
    }

    fn initial_state(&self, _sentence: usize) -> Result<Vec<Token>> {
        Ok(Vec::new())
    }

    fn step(&self, batch: &mut [(&mut Vec<Token>, &[Token])]) -> Result<Vec<Vec<f32>>> {
        let z = self.spec.step_width();
        Ok(batch
            .iter_mut()
            .map(|(prefix, block)| {
                prefix.extend_from_slice(block);
                (0..z).flat_map(|p| self.log_probs(prefix, p)).map(|v| v as f32).collect()
            })
            .collect())
    }
}

/// Puts almost all mass on the schedule-order rewriting of a fixed target
/// per sentence, so decoding reproduces it exactly.
#[derive(Debug, Clone)]
pub struct ForcedModel {
    pub spec: ScheduleSpec,
    pub vocab: usize,
    pub targets: Vec<Vec<Token>>,
    pub max_slots: usize,
}

impl ForcedModel {
    pub fn new(spec: ScheduleSpec, vocab: usize, outputs: &[Vec<Token>]) -> Self {
        let targets: Vec<Vec<Token>> = outputs.iter().map(|y| prepare_target(y, &spec).unwrap().target).collect();
        let longest = targets.iter().map(Vec::len).max().unwrap_or(0);
        Self { spec, vocab, targets, max_slots: 2 * longest + 8 * spec.step_width() }
    }
}

impl StepModel for ForcedModel {
    type State = (usize, usize);

    fn schedule(&self) -> &ScheduleSpec {
        &self.spec
    }

    fn max_slots(&self) -> usize {
        self.max_slots
    }

    fn initial_state(&self, sentence: usize) -> Result<(usize, usize)> {
        Ok((sentence, 0))
    }

    fn step(&self, batch: &mut [(&mut (usize, usize), &[Token])]) -> Result<Vec<Vec<f32>>> {
        let z = self.spec.step_width();
        Ok(batch
            .iter_mut()
            .map(|((sentence, cursor), _)| {
                let target = &self.targets[*sentence];
                let mut out = Vec::with_capacity(z * self.vocab);
                for p in 0..z {
                    let want = match target.get(*cursor + p) {
                        Some(&t) if t != PAD => t,
                        _ => EOS,
                    };
                    let wrong = (-20.0f32).exp() * (self.vocab - 3) as f32;
                    for v in 0..self.vocab as Token {
                        out.push(match v {
                            PAD | BOS => f32::NEG_INFINITY,
                            v if v == want => -wrong,
                            _ => -20.0,
                        });
                    }
                }
                *cursor += z;
                out
            })
            .collect())
    }
}

/// Every terminated block sequence of at most `max_len` slots with its
/// score, ranked by per-slot score.
pub fn enumerate_finished(model: &TableModel, max_len: usize) -> Vec<(Vec<Token>, f64)> {
    let z = model.spec.step_width();
    let alphabet: Vec<Token> = [EOS].into_iter().chain(NUM_SPECIAL as Token..model.vocab as Token).collect();
    let mut out = Vec::new();
    let mut frontier: Vec<(Vec<Token>, f64)> = vec![(vec![BOS; z], 0.0)];
    for _ in 0..max_len / z {
        let mut next = Vec::new();
        for (prefix, score) in &frontier {
            let mut blocks: Vec<Vec<Token>> = vec![Vec::new()];
            for _ in 0..z {
                blocks = blocks
                    .into_iter()
                    .flat_map(|b| alphabet.iter().map(move |&v| [b.clone(), vec![v]].concat()))
                    .collect();
            }
            for block in blocks {
                let s: f64 = block.iter().enumerate().map(|(p, &v)| model.log_probs(prefix, p)[v as usize] as f32 as f64).sum();
                let mut tokens = prefix.clone();
                tokens.extend_from_slice(&block);
                if block.contains(&EOS) {
                    out.push((tokens, score + s));
                } else {
                    next.push((tokens, score + s));
                }
            }
        }
        frontier = next;
    }
    let norm = |(tokens, s): &(Vec<Token>, f64)| s / (tokens.len() - z) as f64;
    out.sort_by(|a, b| norm(b).total_cmp(&norm(a)));
    out
}

/// Natural index (0-based) of every schedule slot, `None` for padding, built
/// by alternately taking the leftmost and rightmost unused token of each
/// segment.
pub fn reference_forward(n: usize, spec: &ScheduleSpec) -> Vec<Option<usize>> {
    use bidecoder::schedule::GenerationOrder;
    let alternate = |start: usize, len: usize| -> (Vec<usize>, Vec<usize>) {
        let (mut lo, mut hi) = (start as isize, (start + len) as isize - 1);
        let (mut l2r, mut r2l) = (Vec::new(), Vec::new());
        let mut left = true;
        while lo <= hi {
            if left {
                l2r.push(lo as usize);
                lo += 1;
            } else {
                r2l.push(hi as usize);
                hi -= 1;
            }
            left = !left;
        }
        (l2r, r2l)
    };
    let streams: Vec<Vec<usize>> = match spec.order {
        GenerationOrder::L2r => vec![(0..n).collect()],
        GenerationOrder::Bd => {
            let (a, b) = alternate(0, n);
            vec![a, b]
        }
        GenerationOrder::MiddleToSide => {
            let (mut a, mut b) = alternate(0, n);
            a.reverse();
            b.reverse();
            vec![a, b]
        }
        GenerationOrder::Md => {
            let k = spec.h / 2;
            let mut out = Vec::new();
            let mut start = 0;
            for s in 0..k {
                let len = n / k + usize::from(s < n % k);
                let (a, b) = alternate(start, len);
                out.push(a);
                out.push(b);
                start += len;
            }
            out
        }
    };
    let pad = spec.order == GenerationOrder::Md;
    let longest = streams.iter().map(Vec::len).max().unwrap();
    let mut forward = Vec::new();
    let mut step = 0;
    while step * spec.c < longest {
        for k in 0..spec.c {
            for stream in &streams {
                match stream.get(step * spec.c + k) {
                    Some(&i) => forward.push(Some(i)),
                    None if pad => forward.push(None),
                    None => {}
                }
            }
        }
        step += 1;
    }
    forward
}

/// Mask predicate over 1-based slots: a slot sees every slot of its own
/// block and of earlier blocks.
pub fn reference_allows(spec: &ScheduleSpec, i1: usize, j1: usize) -> bool {
    use bidecoder::schedule::MaskMode;
    let z = spec.step_width();
    let visible = match spec.mask {
        MaskMode::Block => i1.div_ceil(z) >= j1.div_ceil(z),
        MaskMode::Causal => i1 >= j1,
    };
    let same_direction = (i1 - 1) % spec.h == (j1 - 1) % spec.h;
    visible && (spec.cross_direction || same_direction)
}

/// Every schedule variant the library supports, for exhaustive checks.
pub fn supported_schedules() -> Vec<ScheduleSpec> {
    use bidecoder::schedule::{MaskMode, PositionMode};
    let mut out = Vec::new();
    for c in 1..=4 {
        out.push(ScheduleSpec::semi_autoregressive(c));
        out.push(ScheduleSpec::bidirectional_sa(c));
        out.push(ScheduleSpec { c, ..ScheduleSpec::middle_to_side() });
    }
    for h in [4, 6, 8] {
        for c in 1..=2 {
            out.push(ScheduleSpec { c, ..ScheduleSpec::multi_directional(h) });
        }
    }
    let bd = ScheduleSpec::bidirectional();
    out.extend([
        bd.with_mask(MaskMode::Causal),
        bd.with_positions(PositionMode::Vanilla),
        bd.independent_directions(),
        bd.with_direction_embedding(true),
        bd.as_autoregressive(),
        ScheduleSpec::bidirectional_sa(2).independent_directions(),
        ScheduleSpec::multi_directional(4).as_autoregressive(),
    ]);
    out
}
