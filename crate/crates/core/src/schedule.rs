//! Decoding schedules: target reordering, position indices, direction ids and
//! attention masks for left-to-right, interleaved bidirectional,
//! multi-directional and semi-autoregressive generation.
//!
//! A schedule splits the target into `h` directional streams and emits `c`
//! tokens of every stream per decoding step, so each step produces
//! `z = h * c` slots. Within a step the slot order is
//! `for k in 0..c { for s in 0..h { stream[s][k] } }`, which keeps the
//! direction of slot `t` equal to `t mod h`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{is_special, Token, BOS, EOS, PAD};

/// Additive mask value for blocked attention entries.
pub const MASK_NEG: f32 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationOrder {
    /// Plain left-to-right.
    L2r,
    /// Interleave `y1 yn y2 yn-1 ...`.
    Bd,
    /// Contiguous segments, each decoded bidirectionally.
    Md,
    /// Bidirectional, starting at the middle and running outward.
    MiddleToSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// `t - 1` for slot `t`.
    Vanilla,
    /// `(-1)^(t-1) * ceil(t / 2)`.
    Signed,
    /// `(floor((t-1) / h), (t-1) mod h)`.
    StepDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Full attention within a step block and to all earlier blocks.
    Block,
    /// Token-level causal mask regardless of the step width.
    Causal,
}

/// The complete decoding factorization shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub h: usize,
    pub c: usize,
    pub order: GenerationOrder,
    pub positions: PositionMode,
    pub mask: MaskMode,
    pub cross_direction: bool,
    pub use_direction_embedding: bool,
    /// Generate one slot per step over the reordered sequence. Used for the
    /// autoregressive counterpart of a reordered factorization.
    pub autoregressive: bool,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::autoregressive()
    }
}

impl ScheduleSpec {
    pub fn autoregressive() -> Self {
        Self {
            h: 1,
            c: 1,
            order: GenerationOrder::L2r,
            positions: PositionMode::Vanilla,
            mask: MaskMode::Block,
            cross_direction: true,
            use_direction_embedding: false,
            autoregressive: false,
        }
    }

    /// Left-to-right, `c` neighbouring tokens per step.
    pub fn semi_autoregressive(c: usize) -> Self {
        Self { c, ..Self::autoregressive() }
    }

    pub fn bidirectional() -> Self {
        Self {
            h: 2,
            order: GenerationOrder::Bd,
            positions: PositionMode::Signed,
            ..Self::autoregressive()
        }
    }

    /// Bidirectional with `c` tokens per direction per step.
    pub fn bidirectional_sa(c: usize) -> Self {
        Self { c, ..Self::bidirectional() }
    }

    pub fn multi_directional(h: usize) -> Self {
        Self {
            h,
            order: GenerationOrder::Md,
            positions: PositionMode::StepDirection,
            use_direction_embedding: true,
            ..Self::autoregressive()
        }
    }

    pub fn middle_to_side() -> Self {
        Self { order: GenerationOrder::MiddleToSide, ..Self::bidirectional() }
    }

    pub fn with_positions(mut self, positions: PositionMode) -> Self {
        self.positions = positions;
        self
    }

    pub fn with_mask(mut self, mask: MaskMode) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_direction_embedding(mut self, on: bool) -> Self {
        self.use_direction_embedding = on;
        self
    }

    pub fn independent_directions(mut self) -> Self {
        self.cross_direction = false;
        self
    }

    /// The one-slot-per-step counterpart of this schedule's ordering.
    pub fn as_autoregressive(mut self) -> Self {
        self.autoregressive = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSchedule(msg));
        if self.h == 0 || self.c == 0 {
            return bad(format!("h={} and c={} must be positive", self.h, self.c));
        }
        match self.order {
            GenerationOrder::L2r if self.h != 1 => {
                return bad(format!("left-to-right order needs h=1, got {}", self.h))
            }
            GenerationOrder::Bd | GenerationOrder::MiddleToSide if self.h != 2 => {
                return bad(format!("bidirectional order needs h=2, got {}", self.h))
            }
            GenerationOrder::Md if self.h < 4 || self.h % 2 != 0 => {
                return bad(format!("multi-directional order needs even h >= 4, got {}", self.h))
            }
            _ => {}
        }
        if self.positions == PositionMode::StepDirection && !self.use_direction_embedding {
            return bad("step/direction positions require direction embeddings".into());
        }
        Ok(())
    }

    /// Slots in one interleave group (`h * c`).
    pub fn group(&self) -> usize {
        self.h * self.c
    }

    /// Slots generated per decoding step: the shift applied to decoder inputs
    /// and the block width of the attention mask.
    pub fn step_width(&self) -> usize {
        if self.autoregressive {
            1
        } else {
            self.group()
        }
    }

    pub fn direction_of(&self, slot: usize) -> usize {
        slot % self.h
    }

    /// Mask predicate over 0-based decoder slots.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        let base = match self.mask {
            MaskMode::Block => {
                let z = self.step_width();
                i / z >= j / z
            }
            MaskMode::Causal => i >= j,
        };
        base && (self.cross_direction || i == j || self.direction_of(i) == self.direction_of(j))
    }

    pub fn position_at(&self, slot: usize) -> PositionIndex {
        match self.positions {
            PositionMode::Vanilla => PositionIndex::Scalar(slot as i64),
            PositionMode::Signed => {
                let t = slot as i64 + 1;
                let magnitude = (t + 1) / 2;
                PositionIndex::Scalar(if slot % 2 == 0 { magnitude } else { -magnitude })
            }
            PositionMode::StepDirection => PositionIndex::StepDirection {
                step: slot / self.h,
                direction: slot % self.h,
            },
        }
    }

    /// Natural-order indices of each directional stream, in emission order.
    pub fn streams(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        self.validate()?;
        let streams = match self.order {
            GenerationOrder::L2r => vec![(0..n).collect()],
            GenerationOrder::Bd => bd_streams(0, n).to_vec(),
            GenerationOrder::MiddleToSide => {
                let [mut left, mut right] = bd_streams(0, n);
                left.reverse();
                right.reverse();
                vec![left, right]
            }
            GenerationOrder::Md => {
                let segments = self.h / 2;
                if segments > n {
                    return Err(Error::DegenerateSplit { n, segments });
                }
                let (base, rem) = (n / segments, n % segments);
                let mut start = 0;
                let mut out = Vec::with_capacity(self.h);
                for s in 0..segments {
                    let len = base + usize::from(s < rem);
                    out.extend(bd_streams(start, len));
                    start += len;
                }
                out
            }
        };
        Ok(streams)
    }

    fn pads_with_pad(&self) -> bool {
        self.order == GenerationOrder::Md
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(h={},c={})", self.order, self.h, self.c)?;
        if self.autoregressive {
            f.write_str("+ar")?;
        }
        if self.mask == MaskMode::Causal {
            f.write_str("+causal")?;
        }
        if !self.cross_direction {
            f.write_str("+indep")?;
        }
        Ok(())
    }
}

impl fmt::Display for GenerationOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenerationOrder::L2r => "l2r",
            GenerationOrder::Bd => "bd",
            GenerationOrder::Md => "md",
            GenerationOrder::MiddleToSide => "m2s",
        })
    }
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionMode::Vanilla => "vanilla",
            PositionMode::Signed => "signed",
            PositionMode::StepDirection => "step_direction",
        })
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Block => "block",
            MaskMode::Causal => "causal",
        })
    }
}

macro_rules! enum_from_str {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(Error::InvalidSchedule(format!(
                        "unknown {} '{other}'", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

enum_from_str!(GenerationOrder,
    "l2r" => GenerationOrder::L2r,
    "bd" => GenerationOrder::Bd,
    "md" => GenerationOrder::Md,
    "middle_to_side" => GenerationOrder::MiddleToSide,
    "m2s" => GenerationOrder::MiddleToSide,
);
enum_from_str!(PositionMode,
    "vanilla" => PositionMode::Vanilla,
    "signed" => PositionMode::Signed,
    "step_direction" => PositionMode::StepDirection,
);
enum_from_str!(MaskMode,
    "block" => MaskMode::Block,
    "causal" => MaskMode::Causal,
    "vanilla" => MaskMode::Causal,
);

/// Left-to-right and right-to-left streams over `start..start + len`.
fn bd_streams(start: usize, len: usize) -> [Vec<usize>; 2] {
    let mid = start + len.div_ceil(2);
    let left = (start..mid).collect();
    let right = (mid..start + len).rev().collect();
    [left, right]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PositionIndex {
    Scalar(i64),
    StepDirection { step: usize, direction: usize },
}

impl PositionIndex {
    /// The index fed to the sinusoidal encoding.
    pub fn encoding_index(&self) -> i64 {
        match *self {
            PositionIndex::Scalar(p) => p,
            PositionIndex::StepDirection { step, .. } => step as i64,
        }
    }
}

/// Schedule-order slot to natural index (`None` marks a PAD slot).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pub forward: Vec<Option<usize>>,
    pub inverse: Vec<usize>,
}

impl Permutation {
    /// Number of natural-order tokens.
    pub fn len(&self) -> usize {
        self.inverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inverse.is_empty()
    }

    pub fn apply<T: Copy>(&self, natural: &[T], pad: T) -> Vec<T> {
        self.forward.iter().map(|slot| slot.map_or(pad, |i| natural[i])).collect()
    }
}

pub fn build_permutation(n: usize, spec: &ScheduleSpec) -> Result<Permutation> {
    let streams = spec.streams(n)?;
    let longest = streams.iter().map(Vec::len).max().unwrap_or(0);
    let steps = longest.div_ceil(spec.c);
    let mut forward = Vec::with_capacity(steps * spec.group());
    for step in 0..steps {
        for k in 0..spec.c {
            for stream in &streams {
                match stream.get(step * spec.c + k) {
                    Some(&i) => forward.push(Some(i)),
                    None if spec.pads_with_pad() => forward.push(None),
                    None => {}
                }
            }
        }
    }
    let mut inverse = vec![usize::MAX; n];
    for (slot, idx) in forward.iter().enumerate() {
        if let Some(i) = *idx {
            inverse[i] = slot;
        }
    }
    debug_assert!(inverse.iter().all(|&s| s != usize::MAX));
    Ok(Permutation { forward, inverse })
}

pub fn positions_for(n: usize, spec: &ScheduleSpec) -> Result<Vec<PositionIndex>> {
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    Ok((0..n).map(|slot| spec.position_at(slot)).collect())
}

pub fn direction_ids_for(n: usize, spec: &ScheduleSpec) -> Vec<usize> {
    (0..n).map(|slot| spec.direction_of(slot)).collect()
}

/// Dense additive `n x n` self-attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub n: usize,
    pub block_width: usize,
    pub data: Vec<f32>,
}

impl AttentionMask {
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j] == 0.0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

pub fn build_attention_mask(n: usize, spec: &ScheduleSpec) -> Result<AttentionMask> {
    let z = spec.step_width();
    if n % z != 0 {
        return Err(Error::Alignment { len: n, width: z });
    }
    let mut data = vec![MASK_NEG; n * n];
    for i in 0..n {
        for j in 0..n {
            if spec.allows(i, j) {
                data[i * n + j] = 0.0;
            }
        }
    }
    Ok(AttentionMask { n, block_width: z, data })
}

/// A training example rewritten into schedule order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledTarget {
    pub decoder_input: Vec<Token>,
    pub target: Vec<Token>,
    pub loss_mask: Vec<u8>,
    pub positions: Vec<PositionIndex>,
    pub direction_ids: Vec<usize>,
}

impl ScheduledTarget {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn scored_slots(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m != 0).count()
    }
}

pub fn prepare_target(y: &[Token], spec: &ScheduleSpec) -> Result<ScheduledTarget> {
    if let Some(&t) = y.iter().find(|&&t| is_special(t)) {
        return Err(Error::ReservedToken(t));
    }
    let streams = spec.streams(y.len())?;
    let filler = if spec.pads_with_pad() { PAD } else { EOS };
    let stream_len = streams.iter().map(|s| s.len() + 1).max().unwrap_or(1);
    let stream_len = stream_len.div_ceil(spec.c) * spec.c;
    let padded: Vec<Vec<Token>> = streams
        .iter()
        .map(|s| {
            let mut tokens: Vec<Token> = s.iter().map(|&i| y[i]).collect();
            tokens.push(EOS);
            tokens.resize(stream_len, filler);
            tokens
        })
        .collect();

    let mut target = Vec::with_capacity(stream_len * spec.h);
    for step in 0..stream_len / spec.c {
        for k in 0..spec.c {
            for stream in &padded {
                target.push(stream[step * spec.c + k]);
            }
        }
    }
    let z = spec.step_width();
    let n = target.len();
    let mut decoder_input = vec![BOS; z];
    decoder_input.extend_from_slice(&target[..n - z]);
    let loss_mask = target.iter().map(|&t| u8::from(t != PAD)).collect();
    Ok(ScheduledTarget {
        decoder_input,
        target,
        loss_mask,
        positions: positions_for(n, spec)?,
        direction_ids: direction_ids_for(n, spec),
    })
}

/// Map a schedule-order hypothesis back to natural order.
///
/// The hypothesis stops at the earliest step in which any stream emits EOS.
/// Every stream contributes its tokens up to that step, cut at its own first
/// EOS; PAD is dropped.
pub fn recover_output(scheduled: &[Token], spec: &ScheduleSpec) -> Result<Vec<Token>> {
    let group = spec.group();
    if scheduled.len() % group != 0 {
        return Err(Error::Alignment { len: scheduled.len(), width: group });
    }
    let stop = scheduled
        .iter()
        .position(|&t| t == EOS)
        .map(|slot| slot / group)
        .ok_or(Error::Unterminated)?;
    Ok(collect_streams(scheduled, spec, stop + 1))
}

/// Best-effort recovery for a hypothesis cut off at the length limit.
pub fn recover_truncated(scheduled: &[Token], spec: &ScheduleSpec) -> Vec<Token> {
    let group = spec.group();
    let mut padded = scheduled.to_vec();
    padded.resize(scheduled.len().div_ceil(group) * group, PAD);
    match recover_output(&padded, spec) {
        Ok(out) => out,
        Err(_) => collect_streams(&padded, spec, padded.len() / group),
    }
}

fn collect_streams(scheduled: &[Token], spec: &ScheduleSpec, steps: usize) -> Vec<Token> {
    let (h, c, group) = (spec.h, spec.c, spec.group());
    let mut streams: Vec<Vec<Token>> = vec![Vec::new(); h];
    for (s, stream) in streams.iter_mut().enumerate() {
        'steps: for step in 0..steps {
            for k in 0..c {
                match scheduled[step * group + k * h + s] {
                    EOS => break 'steps,
                    PAD => {}
                    t => stream.push(t),
                }
            }
        }
    }
    let mut out = Vec::with_capacity(streams.iter().map(Vec::len).sum());
    match spec.order {
        GenerationOrder::L2r => out.extend(streams.swap_remove(0)),
        GenerationOrder::MiddleToSide => {
            out.extend(streams[0].iter().rev());
            out.extend(&streams[1]);
        }
        GenerationOrder::Bd | GenerationOrder::Md => {
            for pair in streams.chunks(2) {
                out.extend(&pair[0]);
                out.extend(pair[1].iter().rev());
            }
        }
    }
    out
}
