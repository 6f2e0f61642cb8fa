//! The full network: encoder, a stack of warp + attention layers, decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::EncoderBlock;
use crate::dataio::{Batch, Label, TaskKind};
use crate::decoder::{fuse, Decoder, Head};
use crate::encoder::{Encoder, EncoderToggles};
use crate::error::{Error, Result};
use crate::nn::ForwardCtx;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::warp::{identity_warp, warp_layer, ScoreNet, WarpMode, WarpTransform};

/// Architecture hyper-parameters.
///
/// `scales` holds one normalized length per layer. The first layer always
/// works on the raw grid, so `scales[0]` must be 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub scales: Vec<f64>,
    pub warp: WarpMode,
    /// Use widened segment boundaries in the soft transform weights too.
    pub soft_adjusted: bool,
    pub time_scale: f64,
    pub dropout: f64,
    pub encoder: EncoderToggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 1,
            depth: 2,
            scales: vec![1.0, 0.2, 1.0],
            warp: WarpMode::Adaptive,
            soft_adjusted: false,
            time_scale: 1.0,
            dropout: 0.0,
            encoder: EncoderToggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.depth == 0 {
            return bad("d_model, heads and depth must be positive".into());
        }
        match self.scales.first() {
            None => return bad("scales must list at least one layer".into()),
            Some(&s) if s != 1.0 => return bad(format!("scales[0] must be 1 (raw grid), got {s}")),
            _ => {}
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return bad(format!("scales must be positive, got {s}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return bad(format!("time_scale must be positive, got {}", self.time_scale));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.scales.len()
    }
}

/// Dataset-dependent sizes fixed at construction time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_variates: usize,
    pub num_classes: usize,
    pub task: TaskKind,
    /// Median length of training instances.
    pub median_length: f64,
}

/// Target length for a normalized length: `max(1, round(scale * median))`.
pub fn resolve_length(scale: f64, median_length: f64) -> usize {
    ((scale * median_length).round() as usize).max(1)
}

/// Per-layer tensors kept for inspection and export.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    /// Warped input to the attention block, `[B, K, L_n, D]`.
    pub z: Var,
    /// Attention block output, `[B, K, L_n, D]`.
    pub h: Var,
    /// Fractional mask `[B, K, L_n]`.
    pub m: Var,
    /// Anchor times `[B, K, L_n]`.
    pub t: Var,
    pub transform: WarpTransform,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Encoder output `[B, K, L, D]`.
    pub encoded: Var,
    pub layers: Vec<LayerState>,
    /// Fused sequence vector `[B, D]`.
    pub pooled: Var,
    /// Sequence logits `[B, C]`.
    pub logits: Var,
    /// Per-step logits `[B, L_N, C]` for per-step tasks.
    pub step_logits: Option<Var>,
}

struct WarpLayer {
    score: Option<ScoreNet>,
    block: EncoderBlock,
}

pub struct Warpformer {
    pub config: ModelConfig,
    pub dims: ModelDims,
    encoder: Encoder,
    layers: Vec<WarpLayer>,
    decoder: Decoder,
}

impl Warpformer {
    /// Builds the model and registers its parameters in `store`, drawing
    /// initial values from `seed`.
    pub fn new(config: ModelConfig, dims: ModelDims, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let encoder = Encoder::new(
            store,
            dims.num_variates,
            d,
            config.encoder.clone(),
            config.time_scale,
            &mut rng,
        )?;
        let mut layers = Vec::with_capacity(config.num_layers());
        for n in 0..config.num_layers() {
            let learned = n > 0 && matches!(config.warp, WarpMode::Adaptive | WarpMode::NoUpsample);
            let score = if learned {
                Some(ScoreNet::new(store, &format!("layer{n}.score"), d, &mut rng)?)
            } else {
                None
            };
            let block = EncoderBlock::new(store, &format!("layer{n}.block"), d, config.heads, config.depth, &mut rng)?;
            layers.push(WarpLayer { score, block });
        }
        let head = match dims.task {
            TaskKind::MultiLabel => Head::Sigmoid,
            _ => Head::Softmax,
        };
        let decoder = Decoder::new(
            store,
            d,
            dims.num_classes,
            head,
            dims.task == TaskKind::PerStep,
            &mut rng,
        )?;
        Ok(Self {
            config,
            dims,
            encoder,
            layers,
            decoder,
        })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Sequence length of every layer for a batch of raw length `raw_len`.
    pub fn layer_lengths(&self, raw_len: usize) -> Vec<usize> {
        self.config
            .scales
            .iter()
            .enumerate()
            .map(|(n, &s)| {
                if n == 0 || self.config.warp == WarpMode::Identity {
                    raw_len
                } else {
                    resolve_length(s, self.dims.median_length)
                }
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
        let (b, k, l) = (batch.size, batch.num_variates, batch.len);
        let encoded = self.encoder.encode(tape, store, batch)?;
        let m0 = tape.constant(Tensor::new(&[b, k, l], batch.mask.clone())?);
        let mut times = Vec::with_capacity(b * k * l);
        for bi in 0..b {
            for _ in 0..k {
                times.extend_from_slice(&batch.times[bi * l..(bi + 1) * l]);
            }
        }
        let t0 = tape.constant(Tensor::new(&[b, k, l], times)?);
        let lengths = self.layer_lengths(l);
        let raw_valid = batch.valid();

        let mut states: Vec<LayerState> = Vec::with_capacity(self.layers.len());
        for (n, layer) in self.layers.iter().enumerate() {
            let warped = match states.last() {
                None => identity_warp(encoded, m0, t0, l),
                Some(prev) => {
                    let ones;
                    let valid = if n == 1 {
                        &raw_valid
                    } else {
                        ones = vec![1.0; b * prev.len];
                        &ones
                    };
                    warp_layer(
                        tape,
                        store,
                        layer.score.as_ref(),
                        prev.h,
                        prev.m,
                        prev.t,
                        valid,
                        lengths[n],
                        self.config.warp,
                        self.config.soft_adjusted,
                    )?
                }
            };
            let mask = tape.value(warped.m).data().to_vec();
            let h = layer.block.forward(tape, store, warped.z, &mask, ctx)?;
            states.push(LayerState {
                z: warped.z,
                h,
                m: warped.m,
                t: warped.t,
                transform: warped.transform,
                len: lengths[n],
            });
        }

        let mut pooled = Vec::with_capacity(states.len());
        for s in &states {
            let mask = tape.value(s.m).data().to_vec();
            pooled.push(self.decoder.pool(tape, store, s.h, &mask)?);
        }
        let v = fuse(tape, &pooled)?;
        let logits = self.decoder.logits(tape, store, v)?;
        let step_logits = if self.dims.task == TaskKind::PerStep {
            let last = states.last().expect("at least one layer");
            Some(self.decoder.step_logits(tape, store, last.h, v)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            encoded,
            layers: states,
            pooled: v,
            logits,
            step_logits,
        })
    }

    /// Mean training loss for a forward pass against the batch's labels.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOutput, labels: &[&Label]) -> Result<Var> {
        let c = self.dims.num_classes;
        let loss = match self.dims.task {
            TaskKind::Sequence => {
                let targets = labels
                    .iter()
                    .map(|l| match l {
                        Label::Class(y) if *y < c => Ok(Some(*y)),
                        other => Err(Error::Config(format!("label {other:?} does not fit a {c}-class sequence task"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.cross_entropy(out.logits, &targets)?
            }
            TaskKind::MultiLabel => {
                let mut targets = Vec::with_capacity(labels.len() * c);
                for l in labels {
                    match l {
                        Label::Multi(ys) if ys.len() == c => {
                            targets.extend(ys.iter().map(|&y| Some(if y { 1.0 } else { 0.0 })))
                        }
                        other => return Err(Error::Config(format!("label {other:?} does not fit {c} labels"))),
                    }
                }
                let flat = tape.reshape(out.logits, &[labels.len() * c])?;
                tape.bce_with_logits(flat, &targets)?
            }
            TaskKind::PerStep => {
                let steps = out
                    .step_logits
                    .ok_or_else(|| Error::Config("per-step task without step logits".into()))?;
                let shape = tape.shape(steps).to_vec();
                let len = shape[1];
                let mut targets = Vec::with_capacity(labels.len() * len);
                for l in labels {
                    match l {
                        Label::Steps(ys) if ys.len() == len && ys.iter().all(|&y| y < c) => {
                            targets.extend(ys.iter().map(|&y| Some(y)))
                        }
                        Label::Steps(ys) => {
                            return Err(Error::Config(format!(
                                "per-step labels have length {} but the last layer has length {len}",
                                ys.len()
                            )))
                        }
                        other => return Err(Error::Config(format!("label {other:?} is not per-step"))),
                    }
                }
                let flat = tape.reshape(steps, &[labels.len() * len, c])?;
                tape.cross_entropy(flat, &targets)?
            }
        };
        if !tape.value(loss).data()[0].is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(loss)
    }

    /// Output probabilities: `[B, C]`, or `[B, L_N, C]` for per-step tasks.
    pub fn probabilities(&self, tape: &mut Tape, out: &ForwardOutput) -> Result<Tensor> {
        let logits = out.step_logits.unwrap_or(out.logits);
        let p = self.decoder.probabilities(tape, logits)?;
        Ok(tape.value(p).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_rounds_half_away_with_floor_one() {
        assert_eq!(resolve_length(0.2, 50.0), 10);
        assert_eq!(resolve_length(0.25, 10.0), 3);
        assert_eq!(resolve_length(0.01, 10.0), 1);
        assert_eq!(resolve_length(1.2, 50.0), 60);
    }

    #[test]
    fn scales_must_start_at_raw_grid() {
        let cfg = ModelConfig {
            scales: vec![0.5, 1.0],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
