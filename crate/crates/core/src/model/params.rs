//! Named parameter arrays and the index layout the forward pass uses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::schedule::ScheduleSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { name: name.into(), shape, data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Every learned array of a model, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub tensors: Vec<Tensor>,
}

impl Parameters {
    pub fn zeros_like(&self) -> Self {
        let tensors = self.tensors.iter().map(|t| Tensor::zeros(t.name.clone(), t.shape.clone())).collect();
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn fill(&mut self, value: f32) {
        for t in &mut self.tensors {
            t.data.fill(value);
        }
    }

    pub fn add_assign(&mut self, other: &Parameters) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f32 {
        let sq: f64 = self.tensors.iter().flat_map(|t| &t.data).map(|&v| (v as f64) * (v as f64)).sum();
        sq.sqrt() as f32
    }

    /// Element-wise mean of several snapshots with identical layout.
    pub fn average(snapshots: &[&Parameters]) -> Result<Parameters> {
        let first = snapshots.first().ok_or(Error::EmptyInput("no snapshots to average"))?;
        for s in snapshots {
            if !first.same_layout(s) {
                return Err(Error::Shape("snapshots differ in layout".into()));
            }
        }
        let mut out = first.zeros_like();
        let n = snapshots.len() as f64;
        for (i, t) in out.tensors.iter_mut().enumerate() {
            for (j, v) in t.data.iter_mut().enumerate() {
                let sum: f64 = snapshots.iter().map(|s| s.tensors[i].data[j] as f64).sum();
                *v = (sum / n) as f32;
            }
        }
        Ok(out)
    }

    pub fn same_layout(&self, other: &Parameters) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForwardIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayerIds {
    pub norm_attn: NormIds,
    pub attn: AttentionIds,
    pub norm_ff: NormIds,
    pub ff: FeedForwardIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayerIds {
    pub norm_self: NormIds,
    pub self_attn: AttentionIds,
    pub norm_cross: NormIds,
    pub cross_attn: AttentionIds,
    pub norm_ff: NormIds,
    pub ff: FeedForwardIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub src_emb: usize,
    pub tgt_emb: usize,
    pub dir_emb: Option<usize>,
    /// Separate output projection (`d x vocab`) when embeddings are untied.
    pub out_w: Option<usize>,
    pub out_b: usize,
    pub encoder: Vec<EncoderLayerIds>,
    pub enc_norm: NormIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub dec_norm: NormIds,
}

enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f32),
    /// Uniform Glorot over a `fan_in x fan_out` matrix.
    Glorot,
}

struct Builder<'r> {
    tensors: Vec<Tensor>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let mut t = Tensor::zeros(name, shape);
        if let Some(rng) = self.rng.as_deref_mut() {
            match init {
                Init::Zeros => {}
                Init::Ones => t.data.fill(1.0),
                Init::Normal(std) => {
                    for v in &mut t.data {
                        *v = std * standard_normal(rng);
                    }
                }
                Init::Glorot => {
                    let (fan_in, fan_out) = (t.shape[0], t.shape[1]);
                    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
                    for v in &mut t.data {
                        *v = rng.gen_range(-limit..limit);
                    }
                }
            }
        }
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> LinearIds {
        let w = self.push(format!("{prefix}.weight"), vec![din, dout], Init::Glorot);
        let b = self.push(format!("{prefix}.bias"), vec![dout], Init::Zeros);
        LinearIds { w, b, din, dout }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        let g = self.push(format!("{prefix}.gain"), vec![d], Init::Ones);
        let b = self.push(format!("{prefix}.bias"), vec![d], Init::Zeros);
        NormIds { g, b }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionIds {
        AttentionIds {
            q: self.linear(&format!("{prefix}.query"), d, d),
            k: self.linear(&format!("{prefix}.key"), d, d),
            v: self.linear(&format!("{prefix}.value"), d, d),
            o: self.linear(&format!("{prefix}.output"), d, d),
        }
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, ffn: usize) -> FeedForwardIds {
        FeedForwardIds {
            up: self.linear(&format!("{prefix}.up"), d, ffn),
            down: self.linear(&format!("{prefix}.down"), ffn, d),
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; rand_distr is not worth a dependency for one call site.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

fn build(config: &ModelConfig, schedule: &ScheduleSpec, rng: Option<&mut ChaCha8Rng>) -> (Layout, Vec<Tensor>) {
    let d = config.d;
    let emb_std = (d as f32).powf(-0.5);
    let mut b = Builder { tensors: Vec::new(), rng };
    let src_emb = b.push("src_embedding".into(), vec![config.vocab_src, d], Init::Normal(emb_std));
    let tgt_emb = b.push("tgt_embedding".into(), vec![config.vocab_tgt, d], Init::Normal(emb_std));
    let dir_emb = schedule
        .use_direction_embedding
        .then(|| b.push("direction_embedding".into(), vec![schedule.h, d], Init::Normal(emb_std)));
    let out_w = (!config.tie_embeddings)
        .then(|| b.push("output.weight".into(), vec![d, config.vocab_tgt], Init::Glorot));
    let out_b = b.push("output.bias".into(), vec![config.vocab_tgt], Init::Zeros);
    let encoder = (0..config.enc_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayerIds {
                norm_attn: b.norm(&format!("{p}.norm_attn"), d),
                attn: b.attention(&format!("{p}.attn"), d),
                norm_ff: b.norm(&format!("{p}.norm_ff"), d),
                ff: b.feed_forward(&format!("{p}.ff"), d, config.ffn),
            }
        })
        .collect();
    let enc_norm = b.norm("encoder.norm", d);
    let decoder = (0..config.dec_layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayerIds {
                norm_self: b.norm(&format!("{p}.norm_self"), d),
                self_attn: b.attention(&format!("{p}.self_attn"), d),
                norm_cross: b.norm(&format!("{p}.norm_cross"), d),
                cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                norm_ff: b.norm(&format!("{p}.norm_ff"), d),
                ff: b.feed_forward(&format!("{p}.ff"), d, config.ffn),
            }
        })
        .collect();
    let dec_norm = b.norm("decoder.norm", d);
    let layout = Layout { src_emb, tgt_emb, dir_emb, out_w, out_b, encoder, enc_norm, decoder, dec_norm };
    (layout, b.tensors)
}

impl Layout {
    pub fn new(config: &ModelConfig, schedule: &ScheduleSpec) -> Self {
        build(config, schedule, None).0
    }
}

/// Freshly initialized parameters for `config` and `schedule`.
pub fn init_parameters(config: &ModelConfig, schedule: &ScheduleSpec, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, tensors) = build(config, schedule, Some(&mut rng));
    Parameters { tensors }
}

/// Check that `params` has exactly the arrays `config` and `schedule` require.
pub fn check_parameters(params: &Parameters, config: &ModelConfig, schedule: &ScheduleSpec) -> Result<()> {
    let (_, expected) = build(config, schedule, None);
    if expected.len() != params.tensors.len() {
        return Err(Error::Shape(format!("expected {} arrays, found {}", expected.len(), params.tensors.len())));
    }
    for (e, t) in expected.iter().zip(&params.tensors) {
        if e.name != t.name || e.shape != t.shape || t.data.len() != e.data.len() {
            return Err(Error::Shape(format!(
                "array '{}' {:?} does not match expected '{}' {:?}",
                t.name, t.shape, e.name, e.shape
            )));
        }
    }
    Ok(())
}
