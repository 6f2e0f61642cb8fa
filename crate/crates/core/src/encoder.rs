//! Input encoder: `H = f_val(X) + f_type(E) + f_abs(T) + f_rel(T, M)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Batch;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Which of the four embedding components contribute to `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderToggles {
    pub value: bool,
    pub types: bool,
    pub abs_time: bool,
    pub rel_time: bool,
}

impl Default for EncoderToggles {
    fn default() -> Self {
        Self {
            value: true,
            types: true,
            abs_time: true,
            rel_time: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub d_model: usize,
    pub num_variates: usize,
    pub toggles: EncoderToggles,
    /// Raw times are divided by this before embedding.
    pub time_scale: f64,
    value_w: ParamId,
    value_b: ParamId,
    type_table: ParamId,
    abs_w: ParamId,
    abs_b: ParamId,
    rel_hidden: Linear,
    rel_out: Linear,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        num_variates: usize,
        d_model: usize,
        toggles: EncoderToggles,
        time_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if time_scale <= 0.0 || !time_scale.is_finite() {
            return Err(Error::Config(format!("time_scale must be positive, got {time_scale}")));
        }
        Ok(Self {
            d_model,
            num_variates,
            toggles,
            time_scale,
            value_w: store.add_uniform("encoder.value.weight", &[d_model], 1, rng)?,
            value_b: store.add_zeros("encoder.value.bias", &[d_model])?,
            type_table: store.add_uniform("encoder.type_table", &[num_variates + 1, d_model], 1, rng)?,
            abs_w: store.add_uniform("encoder.abs_time.weight", &[d_model], 1, rng)?,
            abs_b: store.add_zeros("encoder.abs_time.bias", &[d_model])?,
            rel_hidden: Linear::new(store, "encoder.rel_time.hidden", 1, d_model, rng)?,
            rel_out: Linear::new(store, "encoder.rel_time.out", d_model, d_model, rng)?,
        })
    }

    pub fn type_table(&self) -> ParamId {
        self.type_table
    }

    /// `w * x + b` per scalar; `values` of shape `shape` maps to `shape + [D]`.
    pub fn value_embed(&self, tape: &mut Tape, store: &ParamStore, values: &[f64], shape: &[usize]) -> Result<Var> {
        let mut s = shape.to_vec();
        s.push(1);
        let x = tape.constant(Tensor::new(&s, values.to_vec())?);
        let w = tape.param(store, self.value_w);
        let b = tape.param(store, self.value_b);
        let y = tape.mul(x, w)?;
        tape.add(y, b)
    }

    pub fn type_embed(&self, tape: &mut Tape, store: &ParamStore, types: &[usize], shape: &[usize]) -> Result<Var> {
        let table = tape.param(store, self.type_table);
        tape.gather(table, types, shape)
    }

    /// Channel 0 is linear in time, the rest are sinusoids: `[L] -> [L, D]`
    /// (any leading shape).
    pub fn abs_time_embed(&self, tape: &mut Tape, store: &ParamStore, times: &[f64], shape: &[usize]) -> Result<Var> {
        let mut s = shape.to_vec();
        s.push(1);
        let scaled: Vec<f64> = times.iter().map(|t| t / self.time_scale).collect();
        let t = tape.constant(Tensor::new(&s, scaled)?);
        let w = tape.param(store, self.abs_w);
        let b = tape.param(store, self.abs_b);
        let u = tape.mul(t, w)?;
        let u = tape.add(u, b)?;
        let sines = tape.sin(u);
        let mut linear_sel = vec![0.0; self.d_model];
        linear_sel[0] = 1.0;
        let mut sine_sel = vec![1.0; self.d_model];
        sine_sel[0] = 0.0;
        let ls = tape.constant(Tensor::vector(linear_sel));
        let ss = tape.constant(Tensor::vector(sine_sel));
        let lin = tape.mul(u, ls)?;
        let sin = tape.mul(sines, ss)?;
        tape.add(lin, sin)
    }

    /// Two-layer perceptron over sampling intervals: `shape -> shape + [D]`.
    pub fn rel_time_embed(&self, tape: &mut Tape, store: &ParamStore, intervals: &[f64], shape: &[usize]) -> Result<Var> {
        let mut s = shape.to_vec();
        s.push(1);
        let scaled: Vec<f64> = intervals.iter().map(|t| t / self.time_scale).collect();
        let x = tape.constant(Tensor::new(&s, scaled)?);
        let h = self.rel_hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.rel_out.forward(tape, store, h)
    }

    /// `[B, K, L, D]` enriched representation of a batch.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<Var> {
        let (b, k, l, d) = (batch.size, batch.num_variates, batch.len, self.d_model);
        if k != self.num_variates {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![b, k, l],
                rhs: vec![self.num_variates],
            });
        }
        let shape = [b, k, l];
        let mut parts = Vec::with_capacity(4);
        if self.toggles.value {
            parts.push(self.value_embed(tape, store, &batch.values, &shape)?);
        }
        if self.toggles.types {
            parts.push(self.type_embed(tape, store, &batch.types, &shape)?);
        }
        if self.toggles.abs_time {
            let a = self.abs_time_embed(tape, store, &batch.times, &[b, l])?;
            parts.push(tape.reshape(a, &[b, 1, l, d])?);
        }
        if self.toggles.rel_time {
            let iv = sampling_intervals(&batch.times, &batch.mask, b, k, l);
            parts.push(self.rel_time_embed(tape, store, &iv, &shape)?);
        }
        let zero = tape.constant(Tensor::zeros(&[b, k, l, d]));
        let mut h = zero;
        for p in parts {
            h = tape.add(h, p)?;
        }
        Ok(h)
    }
}

/// Time since the previous observation of the same variate (0 before the
/// first one), for every column. `times` is `[B, L]`, `mask` `[B, K, L]`.
pub fn sampling_intervals(times: &[f64], mask: &[f64], b: usize, k: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * k * l];
    for bi in 0..b {
        let t = &times[bi * l..(bi + 1) * l];
        for kk in 0..k {
            let row = (bi * k + kk) * l;
            let mut last: Option<f64> = None;
            for j in 0..l {
                out[row + j] = last.map_or(0.0, |p| t[j] - p);
                if mask[row + j] != 0.0 {
                    last = Some(t[j]);
                }
            }
        }
    }
    out
}
