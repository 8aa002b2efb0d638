//! Central finite-difference gradient checking.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, BatchStats, Tape, Var};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Largest discrepancy found between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with an absolute floor so that two vanishing gradients
/// compare equal.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the tape gradient of `f` against central differences with
/// step `h` for every element of every input.
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], h: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.parameter(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0].to_f64_lossy())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.to_vec());
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + T::from_f64_lossy(h);
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - T::from_f64_lossy(h);
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g[e].to_f64_lossy());
            let err = relative_error(a, numeric, floor);
            if err > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst_input: i,
                    worst_element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Worst relative error found for one operator.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values bounded away from zero so that kinks stay out of reach of the
/// finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.05 + v.abs()));
    t
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = 0.5 + v.abs());
    t
}

/// Reduces `out` to a scalar through random weights so that every output
/// element contributes a distinct amount to the checked loss.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.value(out).shape());
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn groups(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Vec<usize> {
    // Every group gets at least one row.
    let mut g: Vec<usize> = (0..rows).map(|r| if r < n { r } else { rng.random_range(0..n) }).collect();
    g.shuffle(rng);
    g
}

/// One random instance of every differentiable operator.
fn op_instances(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Loss)> {
    let ws: u64 = rng.random();
    let mut out: Vec<(&'static str, Vec<Tensor<f64>>, Loss)> = Vec::new();
    let (b, h, w) = (rng.random_range(1..3), rng.random_range(3..6), rng.random_range(3..6));
    let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
    out.push((
        "conv2d_same",
        vec![rand_tensor(rng, &[b, h, w, cin]), rand_tensor(rng, &[3, 3, cin, cout]), rand_tensor(rng, &[cout])],
        Box::new(move |t, v| {
            let y = t.conv2d_same(v[0], v[1], v[2])?;
            weighted_sum(t, y, ws)
        }),
    ));
    out.push((
        "maxpool_2x2",
        vec![rand_tensor(rng, &[b, h, w, cin])],
        Box::new(move |t, v| {
            let y = t.maxpool_2x2(v[0])?;
            weighted_sum(t, y, ws)
        }),
    ));
    let c = rng.random_range(1..4);
    out.push((
        "batchnorm_train",
        vec![rand_tensor(rng, &[b + 1, h, w, c]), positive(rng, &[c]), rand_tensor(rng, &[c])],
        Box::new(move |t, v| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, ws)
        }),
    ));
    let stats = BatchStats { mean: rand_tensor(rng, &[c]).into_data(), var: positive(rng, &[c]).into_data() };
    out.push((
        "batchnorm_frozen",
        vec![rand_tensor(rng, &[b, h, w, c]), positive(rng, &[c]), rand_tensor(rng, &[c])],
        Box::new(move |t, v| {
            let y = t.batchnorm_frozen(v[0], v[1], v[2], &stats, 1e-5)?;
            weighted_sum(t, y, ws)
        }),
    ));
    let (r, d) = (rng.random_range(2..6), rng.random_range(1..5));
    for (name, act) in [("relu", Activation::Relu), ("softplus", Activation::Softplus), ("sigmoid", Activation::Sigmoid)] {
        out.push((
            name,
            vec![away_from_zero(rng, &[r, d])],
            Box::new(move |t, v| {
                let y = t.activation(v[0], act)?;
                weighted_sum(t, y, ws)
            }),
        ));
    }
    let (scale, shift) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    out.push((
        "affine",
        vec![rand_tensor(rng, &[r, d])],
        Box::new(move |t, v| {
            let y = t.affine(v[0], scale, shift)?;
            weighted_sum(t, y, ws)
        }),
    ));
    out.push((
        "add_scalar",
        vec![rand_tensor(rng, &[r, d]), rand_tensor(rng, &[1])],
        Box::new(move |t, v| {
            let y = t.add_scalar(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
    ));
    out.push((
        "mul_scalar",
        vec![rand_tensor(rng, &[r, d]), rand_tensor(rng, &[1])],
        Box::new(move |t, v| {
            let y = t.mul_scalar(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
    ));
    out.push((
        "div_scalar",
        vec![rand_tensor(rng, &[r, d]), positive(rng, &[1])],
        Box::new(move |t, v| {
            let y = t.div_scalar(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
    ));
    out.push((
        "mul",
        vec![rand_tensor(rng, &[r, d]), rand_tensor(rng, &[r, d])],
        Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
    ));
    out.push((
        "sqrt",
        vec![positive(rng, &[r, d])],
        Box::new(move |t, v| {
            let y = t.sqrt(v[0])?;
            weighted_sum(t, y, ws)
        }),
    ));
    out.push(("sum", vec![rand_tensor(rng, &[r, d])], Box::new(|t, v| t.sum(v[0]))));
    out.push((
        "reshape",
        vec![rand_tensor(rng, &[r, d])],
        Box::new(move |t, v| {
            let y = t.reshape(v[0], &[d * r])?;
            weighted_sum(t, y, ws)
        }),
    ));
    let wide = d + 3;
    let (start, len) = (rng.random_range(0..wide), 1);
    let len = rng.random_range(len..=wide - start);
    out.push((
        "slice_cols",
        vec![rand_tensor(rng, &[r, wide])],
        Box::new(move |t, v| {
            let y = t.slice_cols(v[0], start, len)?;
            weighted_sum(t, y, ws)
        }),
    ));
    let picks: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..r)).collect();
    out.push((
        "gather_rows",
        vec![rand_tensor(rng, &[r, d])],
        Box::new(move |t, v| {
            let y = t.gather_rows(v[0], &picks)?;
            weighted_sum(t, y, ws)
        }),
    ));
    out.push((
        "broadcast_cols",
        vec![rand_tensor(rng, &[r, 1])],
        Box::new(move |t, v| {
            let y = t.broadcast_cols(v[0], d)?;
            weighted_sum(t, y, ws)
        }),
    ));
    let n_groups = rng.random_range(1..=r);
    let g = groups(rng, r, n_groups);
    let g2 = g.clone();
    out.push((
        "segment_sum",
        vec![rand_tensor(rng, &[r, d])],
        Box::new(move |t, v| {
            let y = t.segment_sum(v[0], &g, n_groups)?;
            weighted_sum(t, y, ws)
        }),
    ));
    out.push((
        "segment_weighted_mean",
        vec![rand_tensor(rng, &[r, d]), positive(rng, &[r, d])],
        Box::new(move |t, v| {
            let y = t.segment_weighted_mean(v[0], v[1], &g2, n_groups)?;
            weighted_sum(t, y, ws)
        }),
    ));
    let n = rng.random_range(1..5);
    out.push((
        "weighted_sq_distance",
        vec![rand_tensor(rng, &[r, d]), rand_tensor(rng, &[n, d]), positive(rng, &[n, d])],
        Box::new(move |t, v| {
            let y = t.weighted_sq_distance(v[0], v[1], v[2])?;
            weighted_sum(t, y, ws)
        }),
    ));
    out.push((
        "cosine_distance",
        vec![away_from_zero(rng, &[r, d]), away_from_zero(rng, &[n, d])],
        Box::new(move |t, v| {
            let y = t.cosine_distance(v[0], v[1])?;
            weighted_sum(t, y, ws)
        }),
    ));
    let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..n + 1)).collect();
    out.push((
        "softmax_cross_entropy",
        vec![rand_tensor(rng, &[r, n + 1])],
        Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
    ));
    out
}

/// Gradient-checks every tape operator in 64-bit precision on `instances`
/// random small inputs each and returns the worst relative error per op.
/// Gradients smaller than 1e-4 in magnitude are compared absolutely, since
/// a vanishing gradient has no meaningful relative error.
pub fn check_all_ops(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut worst: Vec<OpCheck> = Vec::new();
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        for (op, inputs, f) in op_instances(&mut rng) {
            let report = check_gradients(&inputs, 1e-5, 1e-4, f)?;
            match worst.iter_mut().find(|w| w.op == op) {
                Some(w) => {
                    w.instances += 1;
                    w.max_rel_error = w.max_rel_error.max(report.max_rel_error);
                }
                None => worst.push(OpCheck { op, instances: 1, max_rel_error: report.max_rel_error }),
            }
        }
    }
    Ok(worst)
}
