//! Central finite-difference checks, one per differentiable operation. Each
//! check builds a random instance from its seed, contracts the output with a
//! random probe and compares every analytic partial against
//! `(f(x + h) - f(x - h)) / 2h`.

use etp::localization::model::{pyramid_pool, pyramid_pool_backward, LnOutput, StageCounts};
use etp::localization::{LnConfig, LnInput, LnModel, NonLocalBlock};
use etp::refinement::gru::{GruCell, GruStack};
use etp::refinement::{RnConfig, RnModel, UnitConfig};
use etp::tensor::ops::{
    cross_entropy, hinge, sigmoid, sigmoid_backward, smooth_l1, smooth_l1_backward, softmax, softmax_backward, tanh,
    tanh_backward,
};
use etp::tensor::{Linear, Module, Tensor};
use etp::timeline::TemporalInterval;
use rand::RngExt;

use super::{dot, rng};

pub const REL_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

/// Largest relative error seen, or a description of the first violation.
pub type Check = Result<f64, String>;

fn step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

/// Checks `analytic` as the gradient of `f` at each input tensor.
pub fn fd_inputs(what: &str, inputs: &[Tensor], analytic: &[Tensor], f: impl Fn(&[Tensor]) -> f64) -> Check {
    let mut x: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..x.len() {
        if analytic[t].shape() != x[t].shape() {
            return Err(format!("{what}: gradient {t} has shape {:?}", analytic[t].shape()));
        }
        for i in 0..x[t].len() {
            let x0 = x[t].data()[i];
            let h = step(x0);
            x[t].data_mut()[i] = x0 + h;
            let up = f(&x);
            x[t].data_mut()[i] = x0 - h;
            let down = f(&x);
            x[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let e = rel(analytic[t].data()[i], numeric);
            if e.is_nan() || e > REL_TOL {
                return Err(format!(
                    "{what}: input {t}[{i}] analytic {} numeric {numeric} rel {e:.2e}",
                    analytic[t].data()[i]
                ));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// Checks the gradients accumulated in `model` against `f`.
pub fn fd_params<M: Module>(what: &str, model: &mut M, f: impl Fn(&M) -> f64) -> Check {
    let grads: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();
    let mut worst: f64 = 0.0;
    for (t, (name, g)) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let x0 = model.params()[t].value.data()[i];
            let h = step(x0);
            model.params_mut()[t].value.data_mut()[i] = x0 + h;
            let up = f(model);
            model.params_mut()[t].value.data_mut()[i] = x0 - h;
            let down = f(model);
            model.params_mut()[t].value.data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let e = rel(a, numeric);
            if e.is_nan() || e > REL_TOL {
                return Err(format!(
                    "{what}: `{name}`[{i}] analytic {a} numeric {numeric} rel {e:.2e}"
                ));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// Uniform values in `[-bound, bound]` at least `gap` away from each kink.
fn away_from(kinks: &[f64], gap: f64, shape: &[usize], bound: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = r.random_range(-bound..bound);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn linear(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut lin = Linear::new("lin", 4, 3, &mut r);
    lin.bias.value = Tensor::uniform(&[3], 1.0, &mut r);
    let x = Tensor::uniform(&[5, 4], 1.0, &mut r);
    let probe = Tensor::uniform(&[5, 3], 1.0, &mut r);
    let dx = lin.backward(&x, &probe).map_err(|e| e.to_string())?;
    let a = fd_inputs("linear", std::slice::from_ref(&x), &[dx], |t| {
        dot(&lin.forward(&t[0]).unwrap(), &probe)
    })?;
    let b = fd_params("linear", &mut lin, |l| dot(&l.forward(&x).unwrap(), &probe))?;
    Ok(a.max(b))
}

fn elementwise(
    what: &str,
    seed: u64,
    fwd: fn(&Tensor) -> Tensor,
    bwd: fn(&Tensor, &Tensor) -> etp::Result<Tensor>,
) -> Check {
    let mut r = rng(seed);
    let x = Tensor::uniform(&[4, 5], 3.0, &mut r);
    let probe = Tensor::uniform(&[4, 5], 1.0, &mut r);
    let dx = bwd(&fwd(&x), &probe).map_err(|e| e.to_string())?;
    fd_inputs(what, &[x], &[dx], |t| dot(&fwd(&t[0]), &probe))
}

pub fn sigmoid_op(seed: u64) -> Check {
    elementwise("sigmoid", seed, sigmoid, sigmoid_backward)
}

pub fn tanh_op(seed: u64) -> Check {
    elementwise("tanh", seed, tanh, tanh_backward)
}

pub fn softmax_op(seed: u64) -> Check {
    elementwise("softmax", seed, softmax, softmax_backward)
}

pub fn smooth_l1_op(seed: u64) -> Check {
    let x = away_from(&[-1.0, 1.0], 1e-3, &[4, 5], 3.0, seed);
    let probe = Tensor::uniform(&[4, 5], 1.0, &mut rng(seed + 1000));
    let dx = smooth_l1_backward(&x, &probe).map_err(|e| e.to_string())?;
    fd_inputs("smooth-L1", &[x], &[dx], |t| dot(&smooth_l1(&t[0]), &probe))
}

pub fn cross_entropy_op(seed: u64) -> Check {
    let mut r = rng(seed);
    let logits = Tensor::uniform(&[6, 4], 3.0, &mut r);
    let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
    let (_, grad) = cross_entropy(&logits, &labels).map_err(|e| e.to_string())?;
    fd_inputs("cross-entropy", &[logits], &[grad], |t| {
        cross_entropy(&t[0], &labels).unwrap().0
    })
}

pub fn hinge_op(seed: u64) -> Check {
    let mut r = rng(seed);
    let labels: Vec<f64> = (0..8).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    // margins 1 - c p stay clear of zero when p stays clear of ±1
    let preds = away_from(&[-1.0, 1.0], 1e-3, &[8], 2.5, seed + 2000);
    let (_, g) = hinge(preds.data(), &labels).map_err(|e| e.to_string())?;
    let grad = Tensor::new(vec![8], g).unwrap();
    fd_inputs("hinge", &[preds], &[grad], |t| hinge(t[0].data(), &labels).unwrap().0)
}

pub fn gru_cell(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut cell = GruCell::new("gru", 3, 4, &mut r);
    for p in cell.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::uniform(&shape, 0.8, &mut r);
    }
    let x = Tensor::uniform(&[2, 3], 1.0, &mut r);
    let h = Tensor::uniform(&[2, 4], 1.0, &mut r);
    let probe = Tensor::uniform(&[2, 4], 1.0, &mut r);
    let (_, cache) = cell.step(&x, &h).map_err(|e| e.to_string())?;
    let (dx, dh) = cell.step_backward(&cache, &probe).map_err(|e| e.to_string())?;
    let a = fd_inputs("GRU cell", &[x.clone(), h.clone()], &[dx, dh], |t| {
        dot(&cell.step(&t[0], &t[1]).unwrap().0, &probe)
    })?;
    let b = fd_params("GRU cell", &mut cell, |c| dot(&c.step(&x, &h).unwrap().0, &probe))?;
    Ok(a.max(b))
}

pub fn gru_stack(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut stack = GruStack::new("stack", 3, 4, 2, &mut r);
    let seq: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[2, 3], 1.0, &mut r)).collect();
    let probe = Tensor::uniform(&[2, 4], 1.0, &mut r);
    let (_, cache) = stack.forward(&seq).map_err(|e| e.to_string())?;
    let d_seq = stack.backward(&cache, &probe).map_err(|e| e.to_string())?;
    let a = fd_inputs("GRU stack", &seq, &d_seq, |t| dot(&stack.forward(t).unwrap().0, &probe))?;
    let b = fd_params("GRU stack", &mut stack, |s| dot(&s.forward(&seq).unwrap().0, &probe))?;
    Ok(a.max(b))
}

pub fn nonlocal(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut block = NonLocalBlock::new("nl", 4, 2, &mut r);
    for p in block.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::uniform(&shape, 0.7, &mut r);
    }
    let x = Tensor::uniform(&[5, 4], 1.0, &mut r);
    let probe = Tensor::uniform(&[5, 4], 1.0, &mut r);
    let (_, cache) = block.forward(&x).map_err(|e| e.to_string())?;
    let dx = block.backward(&cache, &probe).map_err(|e| e.to_string())?;
    let a = fd_inputs("non-local", std::slice::from_ref(&x), &[dx], |t| {
        dot(&block.forward(&t[0]).unwrap().0, &probe)
    })?;
    let b = fd_params("non-local", &mut block, |m| dot(&m.forward(&x).unwrap().0, &probe))?;
    Ok(a.max(b))
}

pub fn pooling(seed: u64) -> Check {
    let mut r = rng(seed);
    let counts = StageCounts {
        starting: r.random_range(0..3),
        course: r.random_range(1..6),
        ending: r.random_range(0..3),
    };
    let rows = counts.total();
    let x = Tensor::uniform(&[rows, 3], 1.0, &mut r);
    let probe = Tensor::uniform(&[15], 1.0, &mut r);
    let dx = pyramid_pool_backward(rows, 3, &counts, probe.data());
    fd_inputs("pyramid pooling", &[x], &[dx], |t| {
        pyramid_pool(&t[0], &counts)
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    })
}

pub fn full_rn(seed: u64) -> Check {
    let mut r = rng(seed);
    let cfg = RnConfig {
        input_dim: 3,
        hidden: 4,
        depth: 2,
    };
    let mut model = RnModel::new(&cfg, &mut r);
    let seq: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[2, 3], 1.0, &mut r)).collect();
    let probe = Tensor::uniform(&[2, 2], 1.0, &mut r);
    let (_, cache) = model.forward_batch(&seq).map_err(|e| e.to_string())?;
    let d_seq = model.backward_batch(&cache, &probe).map_err(|e| e.to_string())?;
    let a = fd_inputs("RN", &seq, &d_seq, |t| dot(&model.forward_batch(t).unwrap().0, &probe))?;
    let b = fd_params("RN", &mut model, |m| dot(&m.forward_batch(&seq).unwrap().0, &probe))?;
    Ok(a.max(b))
}

pub fn full_ln(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut model = LnModel::new(
        &LnConfig {
            input_dim: 4,
            num_classes: 2,
        },
        &mut r,
    );
    // a trained-looking block, since the zero-initialized output map hides
    // the attention path
    model.nonlocal.out = Linear::new("ln.nonlocal.out", 2, 4, &mut r);
    let features = Tensor::uniform(&[120, 4], 1.0, &mut r);
    let units = UnitConfig::with_len(16);
    let iv = |s, e| TemporalInterval::new(s, e).unwrap();
    let inputs = [
        LnInput::new(&features, &iv(30, 78), &units).map_err(|e| e.to_string())?,
        LnInput::new(&features, &iv(0, 40), &units).map_err(|e| e.to_string())?,
    ];
    let refs: Vec<&LnInput> = inputs.iter().collect();
    let probe = LnOutput {
        logits: Tensor::uniform(&[2, 3], 1.0, &mut r),
        completeness: Tensor::uniform(&[2, 1], 1.0, &mut r),
        offsets: Tensor::uniform(&[2, 2], 1.0, &mut r),
    };
    let objective = |m: &LnModel| {
        let (o, _) = m.forward(&refs).unwrap();
        dot(&o.logits, &probe.logits) + dot(&o.completeness, &probe.completeness) + dot(&o.offsets, &probe.offsets)
    };
    let (_, cache) = model.forward(&refs).map_err(|e| e.to_string())?;
    model.backward(&cache, &probe).map_err(|e| e.to_string())?;
    fd_params("LN", &mut model, objective)
}

pub type Op = (&'static str, fn(u64) -> Check);

pub const ALL: [Op; 13] = [
    ("linear", linear),
    ("sigmoid", sigmoid_op),
    ("tanh", tanh_op),
    ("softmax", softmax_op),
    ("smooth-L1", smooth_l1_op),
    ("cross-entropy", cross_entropy_op),
    ("hinge", hinge_op),
    ("GRU cell", gru_cell),
    ("GRU stack", gru_stack),
    ("non-local block", nonlocal),
    ("pyramid pooling", pooling),
    ("full RN", full_rn),
    ("full LN", full_ln),
];

/// Runs `op` over seeds `0..SEEDS` and returns the largest relative error.
pub fn over_seeds(op: fn(u64) -> Check) -> Check {
    (0..SEEDS).try_fold(0.0f64, |acc, seed| Ok(acc.max(op(seed)?)))
}
