//! Finite-difference checks over every differentiable op and the main
//! model components.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::EncoderBlock;
use crate::dataio::{build_grid, Batch, EventSeries, Grid, Label, TaskKind};
use crate::error::Result;
use crate::model::{ModelConfig, ModelDims, Warpformer};
use crate::nn::ForwardCtx;
use crate::tensor::{grad_check, GradCheckConfig, ParamStore, Tape, Tensor, Var};
use crate::warp::{warp_layer, ScoreNet, WarpMode};

/// Relative error bound every check must meet.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub seconds: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Loss<'a> = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var> + 'a>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn extent(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

/// Moves parameters off zero so differences do not straddle ReLU kinks.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.value_mut(id).data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
}

/// Contracts `x` with fixed random weights so every output entry matters.
fn weigh(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let c = tape.constant(w.clone());
    let y = tape.mul(x, c)?;
    Ok(tape.sum(y))
}

fn run(name: &str, store: &mut ParamStore, f: Loss<'_>) -> Result<GradCase> {
    let start = Instant::now();
    let report = grad_check(store, None, &GradCheckConfig::default(), f)?;
    Ok(GradCase {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        coords: report.coords_checked,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn unary_cases(rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    type Unary = fn(&mut Tape, Var) -> Var;
    let ops: [(&str, Unary); 9] = [
        ("scale", |t, x| t.scale(x, -1.7)),
        ("add_scalar", |t, x| t.add_scalar(x, 0.3)),
        ("relu", |t, x| t.relu(x)),
        ("clamp_min", |t, x| t.clamp_min(x, -0.2)),
        ("tanh", |t, x| t.tanh(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("sin", |t, x| t.sin(x)),
        ("exp", |t, x| t.exp(x)),
        ("ln", |t, x| {
            let sq = t.mul(x, x).expect("same shape");
            let pos = t.add_scalar(sq, 0.5);
            t.ln(pos)
        }),
    ];
    for (name, op) in ops {
        let shape = [extent(rng), extent(rng)];
        let mut store = ParamStore::new();
        let x = store.add("x", random(rng, &shape))?;
        let w = random(rng, &shape);
        out.push(run(
            name,
            &mut store,
            Box::new(move |tape, s| {
                let xv = tape.param(s, x);
                let y = op(tape, xv);
                weigh(tape, y, &w)
            }),
        )?);
    }
    Ok(())
}

fn binary_cases(rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;
    let ops: [(&str, Binary); 4] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
    ];
    for (name, op) in ops {
        // Same shape, trailing broadcast and a middle singleton axis.
        let (d0, d1, d2) = (extent(rng), extent(rng), extent(rng));
        for (tag, rhs) in [("same", vec![d0, d1, d2]), ("suffix", vec![d1, d2]), ("inner", vec![d0, 1, d2])] {
            let mut store = ParamStore::new();
            let a = store.add("a", random(rng, &[d0, d1, d2]))?;
            let mut b_init = random(rng, &rhs);
            if name == "div" {
                b_init.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
            }
            let b = store.add("b", b_init)?;
            let w = random(rng, &[d0, d1, d2]);
            out.push(run(
                &format!("{name}/{tag}"),
                &mut store,
                Box::new(move |tape, s| {
                    let (av, bv) = (tape.param(s, a), tape.param(s, b));
                    let y = op(tape, av, bv)?;
                    weigh(tape, y, &w)
                }),
            )?);
        }
    }
    Ok(())
}

fn structural_cases(rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    let (d0, d1, d2, d3) = (extent(rng), extent(rng), extent(rng), extent(rng));

    let mut store = ParamStore::new();
    let x = store.add("x", random(rng, &[d0, d1, d2]))?;
    let wt = store.add("w", random(rng, &[d2, d3]))?;
    let w = random(rng, &[d0, d1, d3]);
    out.push(run(
        "matmul",
        &mut store,
        Box::new(move |tape, s| {
            let (xv, wv) = (tape.param(s, x), tape.param(s, wt));
            let y = tape.matmul(xv, wv)?;
            weigh(tape, y, &w)
        }),
    )?);

    let mut store = ParamStore::new();
    let a = store.add("a", random(rng, &[d0, d1, d2]))?;
    let b = store.add("b", random(rng, &[d0, d2, d3]))?;
    let v = store.add("v", random(rng, &[d0, d2]))?;
    let w = random(rng, &[d0, d1, d3]);
    let wv = random(rng, &[d0, d1]);
    out.push(run(
        "bmm",
        &mut store,
        Box::new(move |tape, s| {
            let (av, bv, vv) = (tape.param(s, a), tape.param(s, b), tape.param(s, v));
            let y = tape.bmm(av, bv)?;
            let mv = tape.bmm(av, vv)?;
            let l1 = weigh(tape, y, &w)?;
            let l2 = weigh(tape, mv, &wv)?;
            tape.add(l1, l2)
        }),
    )?);

    let mut store = ParamStore::new();
    let table = store.add("table", random(rng, &[4, d2]))?;
    let idx: Vec<usize> = (0..d0 * d1).map(|_| rng.random_range(0..4)).collect();
    let w = random(rng, &[d0, d1, d2]);
    out.push(run(
        "gather",
        &mut store,
        Box::new(move |tape, s| {
            let t = tape.param(s, table);
            let y = tape.gather(t, &idx, &[d0, d1])?;
            weigh(tape, y, &w)
        }),
    )?);

    let mut store = ParamStore::new();
    let x = store.add("x", random(rng, &[d0, d1, d2]))?;
    let wp = random(rng, &[d2, d0, d1]);
    let wr = random(rng, &[d0 * d1, d2]);
    out.push(run(
        "permute+reshape",
        &mut store,
        Box::new(move |tape, s| {
            let xv = tape.param(s, x);
            let p = tape.permute(xv, &[2, 0, 1])?;
            let r = tape.reshape(xv, &[d0 * d1, d2])?;
            let l1 = weigh(tape, p, &wp)?;
            let l2 = weigh(tape, r, &wr)?;
            tape.add(l1, l2)
        }),
    )?);

    let mut store = ParamStore::new();
    let x = store.add("x", random(rng, &[d0, d1, d2]))?;
    let ws = random(rng, &[d0, d2]);
    let wc = random(rng, &[d0, d1, d2]);
    out.push(run(
        "sum+mean+sum_axis+cumsum",
        &mut store,
        Box::new(move |tape, s| {
            let xv = tape.param(s, x);
            let sa = tape.sum_axis(xv, 1)?;
            let cs = tape.cumsum(xv, 1)?;
            let sq = tape.mul(xv, xv)?;
            let total = tape.sum(sq);
            let mean = tape.mean(xv);
            let l1 = weigh(tape, sa, &ws)?;
            let l2 = weigh(tape, cs, &wc)?;
            let l = tape.add(l1, l2)?;
            let l = tape.add(l, total)?;
            tape.add(l, mean)
        }),
    )?);

    let mut store = ParamStore::new();
    let x = store.add("x", random(rng, &[d0, d1, d2 + 1]))?;
    let mask = Tensor::from_parts(
        vec![d0, d1, d2 + 1],
        (0..d0 * d1 * (d2 + 1)).map(|i| if i % 3 == 1 { 0.0 } else { 1.0 }).collect(),
    );
    let w = random(rng, &[d0, d1, d2 + 1]);
    out.push(run(
        "masked_softmax+softmax",
        &mut store,
        Box::new(move |tape, s| {
            let xv = tape.param(s, x);
            let m = tape.masked_softmax(xv, Some(&mask), 2)?;
            let p = tape.softmax(xv, 1)?;
            let l1 = weigh(tape, m, &w)?;
            let l2 = weigh(tape, p, &w)?;
            tape.add(l1, l2)
        }),
    )?);

    let mut store = ParamStore::new();
    let x = store.add("x", random(rng, &[d0, d1, d2 + 1]))?;
    let g = store.add("gain", random(rng, &[d2 + 1]))?;
    let bias = store.add("bias", random(rng, &[d2 + 1]))?;
    let w = random(rng, &[d0, d1, d2 + 1]);
    out.push(run(
        "layer_norm",
        &mut store,
        Box::new(move |tape, s| {
            let (xv, gv, bv) = (tape.param(s, x), tape.param(s, g), tape.param(s, bias));
            let y = tape.layer_norm(xv, gv, bv)?;
            weigh(tape, y, &w)
        }),
    )?);

    let c = d2 + 1;
    let mut store = ParamStore::new();
    let logits = store.add("logits", random(rng, &[d0 + 1, c]))?;
    let targets: Vec<Option<usize>> = (0..=d0)
        .map(|i| (i != 1).then(|| rng.random_range(0..c)))
        .collect();
    let flags: Vec<Option<f64>> = (0..(d0 + 1) * c)
        .map(|i| (i % 4 != 2).then(|| f64::from(rng.random_bool(0.5))))
        .collect();
    out.push(run(
        "cross_entropy+bce_with_logits",
        &mut store,
        Box::new(move |tape, s| {
            let lv = tape.param(s, logits);
            let ce = tape.cross_entropy(lv, &targets)?;
            let flat = tape.reshape(lv, &[(d0 + 1) * c])?;
            let bce = tape.bce_with_logits(flat, &flags)?;
            tape.add(ce, bce)
        }),
    )?);
    Ok(())
}

fn warp_cases(rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    let cases = [
        (6, 2, WarpMode::Adaptive),
        (4, 6, WarpMode::Adaptive),
        (5, 5, WarpMode::NoUpsample),
        (6, 3, WarpMode::Hourly),
    ];
    for (lo, ln, mode) in cases {
        let (k, d) = (2, 3);
        let mut store = ParamStore::new();
        let net = ScoreNet::new(&mut store, "score", d, rng)?;
        let h = store.add("h", random(rng, &[1, k, lo, d]))?;
        jitter(&mut store, rng);
        let m: Vec<f64> = (0..k * lo).map(|i| if i % 3 == 1 { 0.0 } else { 1.0 }).collect();
        let times: Vec<f64> = (0..k * lo).map(|i| (i % lo) as f64 * 0.7).collect();
        let wz = random(rng, &[1, k, ln, d]);
        let wm = random(rng, &[1, k, ln]);
        let net_ref = (mode != WarpMode::Hourly).then_some(&net);
        let f: Loss<'_> = Box::new(move |tape, s| {
            let hv = tape.param(s, h);
            let mv = tape.constant(Tensor::new(&[1, k, lo], m.clone())?);
            let tv = tape.constant(Tensor::new(&[1, k, lo], times.clone())?);
            let w = warp_layer(tape, s, net_ref, hv, mv, tv, &vec![1.0; lo], ln, mode, false)?;
            let a = weigh(tape, w.z, &wz)?;
            let b = weigh(tape, w.m, &wm)?;
            tape.add(a, b)
        });
        out.push(run(&format!("warp_layer/{mode}/{lo}->{ln}"), &mut store, f)?);
    }
    Ok(())
}

fn attention_case(rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    let (b, k, l, d) = (1, 2, 4, 8);
    let mut store = ParamStore::new();
    let block = EncoderBlock::new(&mut store, "block", d, 1, 2, rng)?;
    let x = store.add("x", random(rng, &[b, k, l, d]))?;
    jitter(&mut store, rng);
    let mask: Vec<f64> = (0..b * k * l).map(|i| if i % 3 == 2 { 0.0 } else { 1.0 }).collect();
    let w = random(rng, &[b, k, l, d]);
    out.push(run(
        "attention_block/2-layer",
        &mut store,
        Box::new(move |tape, s| {
            let xv = tape.param(s, x);
            let y = block.forward(tape, s, xv, &mask, &mut ForwardCtx::eval())?;
            weigh(tape, y, &w)
        }),
    )?);
    Ok(())
}

/// Random grid with exactly `len` columns over `k` variates.
pub fn toy_grid(rng: &mut ChaCha8Rng, k: usize, len: usize) -> Grid {
    let mut series = EventSeries::new(k);
    let mut t = 0.0;
    for _ in 0..len {
        t += rng.random_range(0.2..1.5);
        let first = rng.random_range(0..k);
        for v in 0..k {
            if v == first || rng.random_bool(0.3) {
                series.variates[v].push((t, rng.random_range(-2.0..2.0)));
            }
        }
    }
    build_grid(&series).expect("strictly increasing times")
}

fn model_case(rng: &mut ChaCha8Rng, out: &mut Vec<GradCase>) -> Result<()> {
    let (k, l) = (3, 6);
    let grids = [toy_grid(rng, k, l), toy_grid(rng, k, l)];
    let refs: Vec<&Grid> = grids.iter().collect();
    let batch = Batch::new(&refs, None)?;
    let config = ModelConfig {
        d_model: 8,
        heads: 1,
        depth: 1,
        scales: vec![1.0, 0.5],
        ..ModelConfig::default()
    };
    let dims = ModelDims {
        num_variates: k,
        num_classes: 2,
        task: TaskKind::Sequence,
        median_length: l as f64,
    };
    let mut store = ParamStore::new();
    let model = Warpformer::new(config, dims, &mut store, rng.random())?;
    jitter(&mut store, rng);
    let labels = [Label::Class(0), Label::Class(1)];
    out.push(run(
        "model/N=2,K=3,L=6,D=8",
        &mut store,
        Box::new(move |tape, s| {
            let refs: Vec<&Label> = labels.iter().collect();
            let fwd = model.forward(tape, s, &batch, &mut ForwardCtx::eval())?;
            model.loss(tape, &fwd, &refs)
        }),
    )?);
    Ok(())
}

/// Runs every check; each case reports its own error and runtime.
pub fn run_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    unary_cases(&mut rng, &mut out)?;
    binary_cases(&mut rng, &mut out)?;
    structural_cases(&mut rng, &mut out)?;
    warp_cases(&mut rng, &mut out)?;
    attention_case(&mut rng, &mut out)?;
    model_case(&mut rng, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_grid_has_requested_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(toy_grid(&mut rng, 3, 6).len(), 6);
        }
    }
}
