//! Query-based pooling over time and variates, scale fusion and output heads.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// `softmax(keys . query) . values` along the second-to-last axis of `keys`
/// and `values` (`[..., N, D]`). `mask` is `[..., N]`; a fully masked slice
/// yields a zero vector. Returns `[..., D]`.
pub fn agg(tape: &mut Tape, query: Var, keys: Var, values: Var, mask: Option<&Tensor>) -> Result<Var> {
    let ks = tape.shape(keys).to_vec();
    if ks.len() < 2 || tape.shape(values) != ks.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "agg",
            lhs: ks,
            rhs: tape.shape(values).to_vec(),
        });
    }
    let r = ks.len();
    let (n, d) = (ks[r - 2], ks[r - 1]);
    let q = tape.reshape(query, &[d, 1])?;
    let scores = tape.matmul(keys, q)?;
    let lead = &ks[..r - 2];
    let mut flat = lead.to_vec();
    flat.push(n);
    let scores = tape.reshape(scores, &flat)?;
    let w = tape.masked_softmax(scores, mask, r - 2)?;
    let mut row = lead.to_vec();
    row.extend([1, n]);
    let w = tape.reshape(w, &row)?;
    let out = tape.bmm(w, values)?;
    let mut shape = lead.to_vec();
    shape.push(d);
    tape.reshape(out, &shape)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Mutually exclusive classes, softmax output.
    Softmax,
    /// Independent labels, sigmoid output.
    Sigmoid,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub num_classes: usize,
    pub head: Head,
    time_query: ParamId,
    variate_query: ParamId,
    time_key: Linear,
    variate_key: Linear,
    classifier: Linear,
    step_classifier: Option<Linear>,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        d_model: usize,
        num_classes: usize,
        head: Head,
        per_step: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_classes < 1 || (head == Head::Softmax && num_classes < 2) {
            return Err(Error::Config(format!("invalid class count {num_classes}")));
        }
        Ok(Self {
            num_classes,
            head,
            time_query: store.add_uniform("decoder.time_query", &[d_model], d_model, rng)?,
            variate_query: store.add_uniform("decoder.variate_query", &[d_model], d_model, rng)?,
            time_key: Linear::new(store, "decoder.time_key", d_model, d_model, rng)?,
            variate_key: Linear::new(store, "decoder.variate_key", d_model, d_model, rng)?,
            classifier: Linear::new(store, "decoder.classifier", d_model, num_classes, rng)?,
            step_classifier: if per_step {
                Some(Linear::new(store, "decoder.step_classifier", d_model, num_classes, rng)?)
            } else {
                None
            },
        })
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn queries(&self) -> (ParamId, ParamId) {
        (self.time_query, self.variate_query)
    }

    /// `h: [B, K, L, D]`, `m: [B, K, L]` -> `[B, K, D]`.
    pub fn condense_time(&self, tape: &mut Tape, store: &ParamStore, h: Var, m: &[f64]) -> Result<Var> {
        let hs = tape.shape(h).to_vec();
        let mask: Vec<f64> = m.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::new(&hs[..3], mask)?;
        let keys = self.time_key.forward(tape, store, h)?;
        let keys = tape.tanh(keys);
        let q = tape.param(store, self.time_query);
        agg(tape, q, keys, h, Some(&mask))
    }

    /// `u: [..., K, D]` -> `[..., D]`.
    pub fn condense_variate(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let keys = self.variate_key.forward(tape, store, u)?;
        let keys = tape.tanh(keys);
        let q = tape.param(store, self.variate_query);
        agg(tape, q, keys, u, None)
    }

    /// Sequence vector `[B, D]` for one scale.
    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, h: Var, m: &[f64]) -> Result<Var> {
        let u = self.condense_time(tape, store, h, m)?;
        self.condense_variate(tape, store, u)
    }

    /// Logits `[B, C]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<Var> {
        self.classifier.forward(tape, store, v)
    }

    /// Per-step logits `[B, L, C]` from the last scale `h: [B, K, L, D]` and
    /// the fused vector `v: [B, D]`.
    pub fn step_logits(&self, tape: &mut Tape, store: &ParamStore, h: Var, v: Var) -> Result<Var> {
        let head = self
            .step_classifier
            .as_ref()
            .ok_or_else(|| Error::Config("decoder was built without a per-step head".into()))?;
        let hs = tape.shape(h).to_vec();
        let ht = tape.permute(h, &[0, 2, 1, 3])?;
        let per_step = self.condense_variate(tape, store, ht)?;
        let v = tape.reshape(v, &[hs[0], 1, hs[3]])?;
        let x = tape.add(per_step, v)?;
        head.forward(tape, store, x)
    }

    /// Output probabilities for logits along the last axis.
    pub fn probabilities(&self, tape: &mut Tape, logits: Var) -> Result<Var> {
        match self.head {
            Head::Softmax => {
                let axis = tape.shape(logits).len() - 1;
                tape.softmax(logits, axis)
            }
            Head::Sigmoid => Ok(tape.sigmoid(logits)),
        }
    }
}

/// Sum of per-scale vectors.
pub fn fuse(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    let (&first, rest) = vs
        .split_first()
        .ok_or_else(|| Error::Config("fuse needs at least one scale".into()))?;
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}
