//! Adaptive re-gridding of per-variate sequences.
//!
//! A score network turns each representation row into a non-negative score.
//! Normalized cumulative scores give a monotone warping curve in `[0, 1]`,
//! which is cut into `L_new` equal segments; every segment averages the
//! positions whose curve value falls inside it. Segments containing no curve
//! value borrow the nearest neighbour on either side, which is what lets the
//! same machinery up-sample.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Guard for the curve normalizer.
pub const CURVE_EPS: f64 = 1e-8;
/// Guard for row normalization of transform matrices.
pub const ROW_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarpMode {
    #[default]
    Adaptive,
    Identity,
    NoUpsample,
    Hourly,
}

impl std::str::FromStr for WarpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "identity" => Ok(Self::Identity),
            "no-upsample" => Ok(Self::NoUpsample),
            "hourly" => Ok(Self::Hourly),
            other => Err(Error::Config(format!("unknown warp mode {other:?}"))),
        }
    }
}

impl WarpMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adaptive => "adaptive",
            Self::Identity => "identity",
            Self::NoUpsample => "no-upsample",
            Self::Hourly => "hourly",
        }
    }
}

impl std::fmt::Display for WarpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Options for building a transform from a curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformOptions {
    /// Widen segment boundaries so that empty segments copy a neighbour.
    pub upsample: bool,
    /// Use the widened boundaries in the soft weights as well as the hard mask.
    pub soft_adjusted: bool,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            upsample: true,
            soft_adjusted: false,
        }
    }
}

/// Two-layer perceptron `D -> D -> 1` with sigmoid output.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    hidden: Linear,
    out: Linear,
}

impl ScoreNet {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_model, d_model, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_model, 1, rng)?,
        })
    }

    pub fn out_layer(&self) -> &Linear {
        &self.out
    }

    /// Scores `[B, K, L]` for representations `h: [B, K, L, D]`, zeroed where
    /// the mask `m: [B, K, L]` is zero.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, h: Var, m: Var) -> Result<Var> {
        let x = self.hidden.forward(tape, store, h)?;
        let x = tape.relu(x);
        let x = self.out.forward(tape, store, x)?;
        let x = tape.sigmoid(x);
        let shape = tape.shape(m).to_vec();
        let x = tape.reshape(x, &shape)?;
        tape.mul(x, m)
    }
}

/// Warping curve of a single score vector.
pub fn warping_curve(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let total: f64 = scores.iter().fold(0.0, |acc, s| acc + s);
    if total <= CURVE_EPS {
        return (1..=n).map(|i| i as f64 / n as f64).collect();
    }
    let denom = total.max(CURVE_EPS);
    let mut acc = 0.0;
    scores
        .iter()
        .map(|s| {
            acc += s;
            acc / denom
        })
        .collect()
}

/// Left and right boundaries of `l_new` equal segments of `[0, 1]`.
pub fn segment_boundaries(l_new: usize) -> (Vec<f64>, Vec<f64>) {
    let n = l_new as f64;
    let r1 = (0..l_new).map(|j| j as f64 / n).collect();
    let r2 = (1..=l_new).map(|j| j as f64 / n).collect();
    (r1, r2)
}

/// Curve for a batch of scores `s: [B, K, L]`. `valid` is `[B, L]` with 1 on
/// real columns; padded columns must carry zero score. Variates whose total
/// score is at most [`CURVE_EPS`] get the uniform curve over the real columns
/// and are reported in the returned flags (`[B * K]`, true = degenerate).
pub fn curve(tape: &mut Tape, s: Var, valid: &[f64]) -> Result<(Var, Vec<bool>)> {
    let shape = tape.shape(s).to_vec();
    let [b, k, l] = shape[..] else {
        return Err(Error::ShapeMismatch {
            op: "curve",
            lhs: shape,
            rhs: vec![],
        });
    };
    if valid.len() != b * l {
        return Err(Error::DataLength {
            shape: vec![b, l],
            expected: b * l,
            actual: valid.len(),
        });
    }
    let cs = tape.cumsum(s, 2)?;
    let total = tape.sum_axis(s, 2)?;
    let denom = tape.clamp_min(total, CURVE_EPS);
    let lam = tape.div(cs, denom)?;
    let degenerate: Vec<bool> = tape.value(total).data().iter().map(|&t| t <= CURVE_EPS).collect();
    if !degenerate.iter().any(|&d| d) {
        return Ok((lam, degenerate));
    }
    let mut keep = vec![1.0; b * k];
    let mut uniform = vec![0.0; b * k * l];
    for bi in 0..b {
        let v = &valid[bi * l..(bi + 1) * l];
        let len = v.iter().filter(|&&x| x != 0.0).count().max(1) as f64;
        for kk in 0..k {
            if !degenerate[bi * k + kk] {
                continue;
            }
            keep[bi * k + kk] = 0.0;
            let row = &mut uniform[(bi * k + kk) * l..(bi * k + kk + 1) * l];
            let mut seen = 0usize;
            for (j, u) in row.iter_mut().enumerate() {
                if v[j] != 0.0 {
                    seen += 1;
                }
                *u = (seen as f64 / len).min(1.0);
            }
        }
    }
    let keep = tape.constant(Tensor::new(&[b, k, 1], keep)?);
    let uniform = tape.constant(Tensor::new(&[b, k, l], uniform)?);
    let lam = tape.mul(lam, keep)?;
    Ok((tape.add(lam, uniform)?, degenerate))
}

/// Segment boundaries after the up-sampling adjustment for one curve.
/// Columns with `valid[i] == 0` are ignored.
pub fn adjusted_boundaries(lam: &[f64], valid: &[f64], l_new: usize, upsample: bool) -> (Vec<f64>, Vec<f64>) {
    let (mut r1, mut r2) = segment_boundaries(l_new);
    if !upsample {
        return (r1, r2);
    }
    for j in 0..l_new {
        let (lo, hi) = (r1[j], r2[j]);
        let mut below = 0.0f64;
        let mut above = f64::INFINITY;
        for (&x, &v) in lam.iter().zip(valid) {
            if v == 0.0 {
                continue;
            }
            if x <= hi {
                below = below.max(x);
            }
            if x >= lo && x > 0.0 {
                above = above.min(x);
            }
        }
        r1[j] = lo.min(below);
        if above.is_finite() {
            r2[j] = hi.max(above);
        }
    }
    (r1, r2)
}

/// Transform `[B, K, L_new, L_old]` from curves `lam: [B, K, L_old]`.
pub fn transform(tape: &mut Tape, lam: Var, valid: &[f64], l_new: usize, opts: TransformOptions) -> Result<Var> {
    if l_new == 0 {
        return Err(Error::Config("target length must be at least 1".into()));
    }
    let shape = tape.shape(lam).to_vec();
    let [b, k, l] = shape[..] else {
        return Err(Error::ShapeMismatch {
            op: "transform",
            lhs: shape,
            rhs: vec![],
        });
    };
    if valid.len() != b * l {
        return Err(Error::DataLength {
            shape: vec![b, l],
            expected: b * l,
            actual: valid.len(),
        });
    }
    let mut hard = vec![0.0; b * k * l_new * l];
    let mut r1_all = Vec::with_capacity(b * k * l_new);
    let mut r2_all = Vec::with_capacity(b * k * l_new);
    {
        let ld = tape.value(lam).data();
        for bi in 0..b {
            let v = &valid[bi * l..(bi + 1) * l];
            for kk in 0..k {
                let row = bi * k + kk;
                let x = &ld[row * l..(row + 1) * l];
                let (r1u, r2u) = adjusted_boundaries(x, v, l_new, opts.upsample);
                let block = &mut hard[row * l_new * l..(row + 1) * l_new * l];
                for j in 0..l_new {
                    for i in 0..l {
                        if v[i] != 0.0 && x[i] >= r1u[j] && x[i] <= r2u[j] {
                            block[j * l + i] = 1.0;
                        }
                    }
                }
                r1_all.extend(r1u);
                r2_all.extend(r2u);
            }
        }
    }
    let (r1, r2) = if opts.soft_adjusted {
        (
            Tensor::new(&[b, k, l_new, 1], r1_all)?,
            Tensor::new(&[b, k, l_new, 1], r2_all)?,
        )
    } else {
        let (r1, r2) = segment_boundaries(l_new);
        (Tensor::new(&[l_new, 1], r1)?, Tensor::new(&[l_new, 1], r2)?)
    };
    let r1 = tape.constant(r1);
    let r2 = tape.constant(r2);
    let lam4 = tape.reshape(lam, &[b, k, 1, l])?;
    let left = tape.sub(lam4, r1)?;
    let left = tape.relu(left);
    let right = tape.sub(r2, lam4)?;
    let right = tape.relu(right);
    let soft = tape.add(left, right)?;
    let hard = tape.constant(Tensor::new(&[b, k, l_new, l], hard)?);
    let au = tape.mul(soft, hard)?;
    row_normalize(tape, au)
}

fn row_normalize(tape: &mut Tape, a: Var) -> Result<Var> {
    let axis = tape.shape(a).len() - 1;
    let rs = tape.sum_axis(a, axis)?;
    let rs = tape.clamp_min(rs, ROW_EPS);
    tape.div(a, rs)
}

/// Fixed equal-time bins over `[t_first, t_last]` of each variate's real
/// columns. `times` is `[B, K, L_old]`; returns `[B, K, L_new, L_old]` with
/// uniform weights inside each bin. Bins without columns are zero rows.
pub fn hourly_transform(times: &[f64], valid: &[f64], b: usize, k: usize, l: usize, l_new: usize) -> Result<Tensor> {
    if l_new == 0 {
        return Err(Error::Config("target length must be at least 1".into()));
    }
    let mut a = vec![0.0; b * k * l_new * l];
    for bi in 0..b {
        let v = &valid[bi * l..(bi + 1) * l];
        for kk in 0..k {
            let row = bi * k + kk;
            let t = &times[row * l..(row + 1) * l];
            let real: Vec<usize> = (0..l).filter(|&i| v[i] != 0.0).collect();
            let Some((&first, &last)) = real.first().zip(real.last()) else {
                continue;
            };
            let (t0, t1) = (t[first], t[last]);
            let width = (t1 - t0) / l_new as f64;
            let block = &mut a[row * l_new * l..(row + 1) * l_new * l];
            for &i in &real {
                let bin = if width > 0.0 {
                    (((t[i] - t0) / width).floor() as usize).min(l_new - 1)
                } else {
                    0
                };
                block[bin * l + i] = 1.0;
            }
            for j in 0..l_new {
                let r = &mut block[j * l..(j + 1) * l];
                let n = r.iter().sum::<f64>();
                if n > 0.0 {
                    r.iter_mut().for_each(|x| *x /= n);
                }
            }
        }
    }
    Tensor::new(&[b, k, l_new, l], a)
}

/// The transform a warp layer applied.
#[derive(Clone, Copy, Debug)]
pub enum WarpTransform {
    /// `A = I` over `len` positions; nothing was multiplied.
    Identity { len: usize },
    /// Explicit `[B, K, L_new, L_old]` weights.
    Matrix(Var),
}

impl WarpTransform {
    /// Dense weights, materializing the identity if needed.
    pub fn to_tensor(&self, tape: &Tape, b: usize, k: usize) -> Tensor {
        match *self {
            Self::Matrix(v) => tape.value(v).clone(),
            Self::Identity { len } => {
                let mut data = vec![0.0; b * k * len * len];
                for row in 0..b * k {
                    for j in 0..len {
                        data[(row * len + j) * len + j] = 1.0;
                    }
                }
                Tensor::from_parts(vec![b, k, len, len], data)
            }
        }
    }
}

/// Output of a warp layer. `m` and `t` are `[B, K, L_new]`, `z` is
/// `[B, K, L_new, D]`.
#[derive(Clone, Copy, Debug)]
pub struct Warped {
    pub z: Var,
    pub m: Var,
    pub t: Var,
    pub transform: WarpTransform,
}

/// Identity transform over `len` positions.
pub fn identity_warp(h: Var, m: Var, t: Var, len: usize) -> Warped {
    Warped {
        z: h,
        m,
        t,
        transform: WarpTransform::Identity { len },
    }
}

/// Applies `a: [B, K, L_new, L_old]` to `h: [B, K, L_old, D]`, `m` and `t`
/// (`[B, K, L_old]`).
///
/// For the representation product, columns at unobserved positions are
/// dropped and rows re-normalized; rows that cover no observation keep their
/// weights. The mask and times use `a` as is. Variates flagged in `drop`
/// (`[B * K]`) get an all-zero output mask.
pub fn apply_warp(tape: &mut Tape, a: Var, h: Var, m: Var, t: Var, drop: Option<&[bool]>) -> Result<Warped> {
    let shape = tape.shape(a).to_vec();
    let [b, k, ln, lo] = shape[..] else {
        return Err(Error::ShapeMismatch {
            op: "apply_warp",
            lhs: shape,
            rhs: vec![],
        });
    };
    let mut scale = vec![1.0; b * k * ln * lo];
    {
        let ad = tape.value(a).data();
        let md = tape.value(m).data();
        if md.len() != b * k * lo {
            return Err(Error::ShapeMismatch {
                op: "apply_warp",
                lhs: shape.clone(),
                rhs: tape.shape(m).to_vec(),
            });
        }
        for row in 0..b * k {
            let obs = &md[row * lo..(row + 1) * lo];
            for j in 0..ln {
                let off = (row * ln + j) * lo;
                let w = &ad[off..off + lo];
                let covered = w.iter().zip(obs).any(|(&x, &o)| x > 0.0 && o > 0.0);
                if covered {
                    for i in 0..lo {
                        scale[off + i] = if obs[i] > 0.0 { 1.0 } else { 0.0 };
                    }
                }
            }
        }
    }
    let scale = tape.constant(Tensor::new(&shape, scale)?);
    let scaled = tape.mul(a, scale)?;
    let scaled = row_normalize(tape, scaled)?;
    let z = tape.bmm(scaled, h)?;
    let mut m_new = tape.bmm(a, m)?;
    if let Some(flags) = drop.filter(|f| f.iter().any(|&x| x)) {
        let keep: Vec<f64> = flags.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let keep = tape.constant(Tensor::new(&[b, k, 1], keep)?);
        m_new = tape.mul(m_new, keep)?;
    }
    let t_new = tape.bmm(a, t)?;
    Ok(Warped {
        z,
        m: m_new,
        t: t_new,
        transform: WarpTransform::Matrix(a),
    })
}

/// One re-gridding step. `valid` is `[B, L_old]`; `net` is required in the
/// adaptive and no-upsample modes.
#[allow(clippy::too_many_arguments)]
pub fn warp_layer(
    tape: &mut Tape,
    store: &ParamStore,
    net: Option<&ScoreNet>,
    h: Var,
    m: Var,
    t: Var,
    valid: &[f64],
    l_new: usize,
    mode: WarpMode,
    soft_adjusted: bool,
) -> Result<Warped> {
    if l_new == 0 {
        return Err(Error::Config("target length must be at least 1".into()));
    }
    let shape = tape.shape(m).to_vec();
    let [b, k, l] = shape[..] else {
        return Err(Error::ShapeMismatch {
            op: "warp_layer",
            lhs: shape,
            rhs: vec![],
        });
    };
    match mode {
        WarpMode::Identity => {
            if l_new != l {
                return Err(Error::Config(format!(
                    "identity warp cannot change length {l} to {l_new}"
                )));
            }
            Ok(identity_warp(h, m, t, l))
        }
        WarpMode::Hourly => {
            let a = hourly_transform(tape.value(t).data(), valid, b, k, l, l_new)?;
            let a = tape.constant(a);
            apply_warp(tape, a, h, m, t, None)
        }
        WarpMode::Adaptive | WarpMode::NoUpsample => {
            let net = net.ok_or_else(|| Error::Config("adaptive warp needs a score network".into()))?;
            let s = net.scores(tape, store, h, m)?;
            let (lam, degenerate) = curve(tape, s, valid)?;
            let opts = TransformOptions {
                upsample: mode == WarpMode::Adaptive,
                soft_adjusted,
            };
            let a = transform(tape, lam, valid, l_new, opts)?;
            apply_warp(tape, a, h, m, t, Some(&degenerate))
        }
    }
}

/// Transform for a single curve as a dense `L_new x L_old` row-major matrix.
pub fn transform_matrix(lam: &[f64], l_new: usize, opts: TransformOptions) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let n = lam.len();
    let v = tape.constant(Tensor::new(&[1, 1, n], lam.to_vec())?);
    let a = transform(&mut tape, v, &vec![1.0; n], l_new, opts)?;
    Ok(tape.value(a).data().to_vec())
}
