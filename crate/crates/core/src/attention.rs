//! Stacked temporal and variate self-attention over `[B, K, L, D]` grids.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, LayerNorm, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const HEAD_WIDTH: usize = 8;

/// Multi-head scaled dot-product self-attention with a pre-norm.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub heads: usize,
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        let width = heads * HEAD_WIDTH;
        Ok(Self {
            heads,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model)?,
            query: Linear::new(store, &format!("{name}.query"), d_model, width, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d_model, width, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d_model, width, rng)?,
            output: Linear::new(store, &format!("{name}.output"), width, d_model, rng)?,
        })
    }

    /// Attention along axis 2 of `x: [B, S, N, D]`, independently for each
    /// of the `B * S` sequences. `key_mask` is `[B, S, N]` (non-zero = usable
    /// key); sequences without any usable key get a zero update. Returns the
    /// update only, without the residual.
    pub fn update(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        key_mask: Option<&[f64]>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [b, s, n, _] = shape[..] else {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: shape,
                rhs: vec![],
            });
        };
        let h = self.heads;
        let xn = self.norm.forward(tape, store, x)?;
        let split = |tape: &mut Tape, lin: &Linear| -> Result<Var> {
            let y = lin.forward(tape, store, xn)?;
            let y = tape.reshape(y, &[b, s, n, h, HEAD_WIDTH])?;
            tape.permute(y, &[0, 1, 3, 2, 4])
        };
        let q = split(tape, &self.query)?;
        let k = split(tape, &self.key)?;
        let v = split(tape, &self.value)?;
        let kt = tape.permute(k, &[0, 1, 2, 4, 3])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (HEAD_WIDTH as f64).sqrt());
        let (mask, gate) = match key_mask {
            None => (None, None),
            Some(m) => {
                if m.len() != b * s * n {
                    return Err(Error::DataLength {
                        shape: vec![b, s, n],
                        expected: b * s * n,
                        actual: m.len(),
                    });
                }
                let keys: Vec<f64> = m.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
                let gate: Vec<f64> = keys
                    .chunks(n)
                    .map(|row| if row.iter().any(|&x| x > 0.0) { 1.0 } else { 0.0 })
                    .collect();
                let gate = gate.iter().any(|&g| g == 0.0).then_some(gate);
                (Some(Tensor::new(&[b, s, 1, 1, n], keys)?), gate)
            }
        };
        let weights = tape.masked_softmax(scores, mask.as_ref(), 4)?;
        let out = tape.bmm(weights, v)?;
        let out = tape.permute(out, &[0, 1, 3, 2, 4])?;
        let out = tape.reshape(out, &[b, s, n, h * HEAD_WIDTH])?;
        let mut out = self.output.forward(tape, store, out)?;
        if let Some(g) = gate {
            let g = tape.constant(Tensor::new(&[b, s, 1, 1], g)?);
            out = tape.mul(out, g)?;
        }
        Ok(out)
    }
}

/// Position-wise `D -> 4D -> D` map with a pre-norm.
#[derive(Clone, Debug)]
pub struct FeedForward {
    norm: LayerNorm,
    hidden: Linear,
    output: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model)?,
            hidden: Linear::new(store, &format!("{name}.hidden"), d_model, 4 * d_model, rng)?,
            output: Linear::new(store, &format!("{name}.output"), 4 * d_model, d_model, rng)?,
        })
    }

    pub fn update(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.norm.forward(tape, store, x)?;
        let y = self.hidden.forward(tape, store, y)?;
        let y = tape.relu(y);
        self.output.forward(tape, store, y)
    }
}

/// Temporal attention, then variate attention, then the feed-forward map,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub temporal: SelfAttention,
    pub variate: SelfAttention,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            temporal: SelfAttention::new(store, &format!("{name}.temporal"), d_model, heads, rng)?,
            variate: SelfAttention::new(store, &format!("{name}.variate"), d_model, heads, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, rng)?,
        })
    }

    /// `z: [B, K, L, D]`; `mask: [B, K, L]` marks positions usable as
    /// temporal keys.
    pub fn temporal_attention(&self, tape: &mut Tape, store: &ParamStore, z: Var, mask: &[f64], ctx: &mut ForwardCtx) -> Result<Var> {
        let u = self.temporal.update(tape, store, z, Some(mask))?;
        let u = ctx.dropout(tape, u)?;
        tape.add(z, u)
    }

    pub fn variate_attention(&self, tape: &mut Tape, store: &ParamStore, z: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let zt = tape.permute(z, &[0, 2, 1, 3])?;
        let u = self.variate.update(tape, store, zt, None)?;
        let u = tape.permute(u, &[0, 2, 1, 3])?;
        let u = ctx.dropout(tape, u)?;
        tape.add(z, u)
    }

    pub fn feed_forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let u = self.ffn.update(tape, store, z)?;
        let u = ctx.dropout(tape, u)?;
        tape.add(z, u)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, mask: &[f64], ctx: &mut ForwardCtx) -> Result<Var> {
        let z = self.temporal_attention(tape, store, z, mask, ctx)?;
        let z = self.variate_attention(tape, store, z, ctx)?;
        self.feed_forward(tape, store, z, ctx)
    }
}

/// `J` stacked encoder layers for one scale.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("encoder block depth must be at least 1".into()));
        }
        let layers = (0..depth)
            .map(|j| EncoderLayer::new(store, &format!("{name}.layer{j}"), d_model, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, mask: &[f64], ctx: &mut ForwardCtx) -> Result<Var> {
        self.layers
            .iter()
            .try_fold(z, |z, layer| layer.forward(tape, store, z, mask, ctx))
    }
}
