//! Small parameterised building blocks shared by the model modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Affine map `x @ w + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), &[inputs, outputs], inputs, rng)?,
            bias: store.add_zeros(format!("{name}.bias"), &[outputs])?,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0))?,
            bias: store.add_zeros(format!("{name}.bias"), &[width])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Per-call forward options. Dropout only applies when an RNG is supplied.
pub struct ForwardCtx<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n)
            .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(&shape, mask)?);
        tape.mul(x, m)
    }
}
