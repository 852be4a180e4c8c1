//! Encoder-decoder transformer with schedule-aware decoder inputs.

mod checkpoint;
mod config;
mod incremental;
mod network;
pub(crate) mod ops;
mod params;
mod positional;

use std::path::Path;

use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use incremental::{DecoderState, EncoderOutput};
pub use network::{Example, Network};
pub use params::{check_parameters, init_parameters, Parameters, Tensor};
pub use positional::{sinusoid, sinusoidal_encoding};

use crate::error::{Error, Result};
use crate::schedule::{ScheduleSpec, ScheduledTarget};
use crate::vocab::Token;
use incremental::StepItem;

/// Summed loss over a batch together with its gradient.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Sum of per-slot losses over scored slots.
    pub loss_sum: f64,
    /// Number of scored slots.
    pub tokens: usize,
    /// Gradient of the mean loss.
    pub grads: Parameters,
}

impl LossOutput {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens as f64
    }
}

/// A network together with its learned values.
#[derive(Debug, Clone)]
pub struct Model {
    network: Network,
    params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig, schedule: ScheduleSpec, seed: u64) -> Result<Self> {
        let network = Network::new(config, schedule)?;
        let params = init_parameters(&network.config, &network.schedule, seed);
        Ok(Self { network, params })
    }

    pub fn from_parameters(config: ModelConfig, schedule: ScheduleSpec, params: Parameters) -> Result<Self> {
        check_parameters(&params, &config, &schedule)?;
        Ok(Self { network: Network::new(config, schedule)?, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn schedule(&self) -> &ScheduleSpec {
        &self.network.schedule
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Parameters) -> Result<()> {
        if !params.same_layout(&self.params) {
            return Err(Error::Shape("parameter layout does not match the model".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Loss and gradients over a packed batch; dropout is applied when `rng`
    /// is given.
    pub fn loss_and_gradients(&self, batch: &[Example], rng: Option<&mut ChaCha8Rng>) -> Result<LossOutput> {
        let fwd = self.network.forward(&self.params, batch, rng)?;
        let cfg = &self.network.config;
        let (loss_sum, tokens, dlogits) =
            network::cross_entropy(&fwd.logits, batch, cfg.vocab_tgt, cfg.label_smoothing)?;
        let mut grads = self.params.zeros_like();
        self.network.backward(&self.params, &fwd, &dlogits, &mut grads);
        Ok(LossOutput { loss_sum, tokens, grads })
    }

    /// Loss without gradients and without dropout.
    pub fn loss(&self, batch: &[Example]) -> Result<(f64, usize)> {
        let fwd = self.network.forward(&self.params, batch, None)?;
        let cfg = &self.network.config;
        let (sum, tokens, _) = network::cross_entropy(&fwd.logits, batch, cfg.vocab_tgt, cfg.label_smoothing)?;
        Ok((sum, tokens))
    }

    /// Summed negative log-likelihood (no label smoothing) over scored slots
    /// and their count.
    pub fn log_likelihood(&self, batch: &[Example]) -> Result<(f64, usize)> {
        let fwd = self.network.forward(&self.params, batch, None)?;
        let (sum, tokens, _) = network::cross_entropy(&fwd.logits, batch, self.network.config.vocab_tgt, 0.0)?;
        Ok((sum, tokens))
    }

    /// Teacher-forced logits (`len x vocab`, row-major) for one example.
    pub fn teacher_forced_logits(&self, src: &[Token], target: &ScheduledTarget) -> Result<Vec<f32>> {
        let fwd = self.network.forward(&self.params, &[Example { src, target }], None)?;
        Ok(fwd.logits)
    }

    pub fn encode(&self, src: &[Token]) -> Result<EncoderOutput> {
        self.network.encode(&self.params, src)
    }

    pub fn start_state(&self) -> DecoderState {
        self.network.start_state()
    }

    /// Feeds `tokens` at the next slots of `state` and returns their logits.
    pub fn decode_step(&self, encoder: &EncoderOutput, state: &mut DecoderState, tokens: &[Token]) -> Result<Vec<f32>> {
        let mut items = [StepItem { encoder, state, tokens }];
        Ok(self.network.decode_batch(&self.params, &mut items)?.pop().expect("one item"))
    }

    /// Batched [`Model::decode_step`] over independent hypotheses.
    pub fn decode_steps(&self, steps: Vec<(&EncoderOutput, &mut DecoderState, &[Token])>) -> Result<Vec<Vec<f32>>> {
        let mut items: Vec<StepItem> =
            steps.into_iter().map(|(encoder, state, tokens)| StepItem { encoder, state, tokens }).collect();
        self.network.decode_batch(&self.params, &mut items)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_checkpoint(path, &self.network.config, &self.network.schedule, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, schedule, params) = checkpoint::read_checkpoint(path)?;
        Self::from_parameters(config, schedule, params)
    }
}
