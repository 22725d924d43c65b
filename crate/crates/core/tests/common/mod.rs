//! Oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remix_core::tensor::{Tape, Tensor, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const GRAD_ABS_TOL: f64 = 1e-8;
/// Minimum distance of a kink input (relu, leaky relu, clamp) from its kink.
const KINK_MARGIN: f64 = 1e-3;

const ROWS: usize = 3;
const COLS: usize = 4;

/// Input shapes of every random graph: `a, b: [3 × 4]`, `w: [4 × 4]`, `v: [4]`.
pub fn input_shapes() -> [Vec<usize>; 4] {
    [vec![ROWS, COLS], vec![ROWS, COLS], vec![COLS, COLS], vec![COLS]]
}

pub fn random_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    input_shapes()
        .into_iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
        })
        .collect()
}

/// Op names a random graph can use; every one is drawn in a 100-graph sweep.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "ln",
    "square",
    "neg",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "softplus",
    "scale",
    "add_scalar",
    "clamp",
    "broadcast_add",
    "broadcast_mul",
    "concat_slice",
    "reshape",
    "sum_axis",
    "mean_axis",
    "logsumexp",
];

/// A graph rebuilt identically from its seed on any tape and inputs.
pub struct RandomGraph {
    pub seed: u64,
    pub depth: usize,
}

pub struct Built<'t> {
    pub loss: Var<'t>,
    pub used: Vec<&'static str>,
    /// Values entering ops with a kink, paired with the kink locations.
    kinks: Vec<(Var<'t>, Vec<f64>)>,
}

impl<'t> Built<'t> {
    /// True when no kink input sits within the margin of its kink.
    pub fn smooth(&self) -> bool {
        self.kinks.iter().all(|(v, at)| {
            v.value()
                .data()
                .iter()
                .all(|x| at.iter().all(|k| (x - k).abs() > KINK_MARGIN))
        })
    }
}

impl RandomGraph {
    pub fn build<'t>(&self, tape: &'t Tape, inputs: &[Var<'t>]) -> Built<'t> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (a, b, w, v) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let mut used = Vec::new();
        let mut kinks = Vec::new();
        // x always has shape [ROWS × COLS] between steps
        let mut x = a;
        for _ in 0..self.depth {
            let op = OPS[rng.random_range(0..OPS.len())];
            used.push(op);
            let other = if rng.random::<bool>() { b } else { a };
            x = match op {
                "add" => x.add(other).unwrap(),
                "sub" => x.sub(other).unwrap(),
                "mul" => x.mul(other).unwrap(),
                // keep the denominator away from zero
                "div" => x.div(other.softplus().add_scalar(0.5)).unwrap(),
                "matmul" => x.matmul(w).unwrap().scale(0.5),
                "exp" => x.tanh().exp(),
                "ln" => x.square().add_scalar(0.3).ln(),
                "square" => x.tanh().square(),
                "neg" => x.neg(),
                "relu" => {
                    kinks.push((x, vec![0.0]));
                    x.relu()
                }
                "leaky_relu" => {
                    kinks.push((x, vec![0.0]));
                    x.leaky_relu(0.1)
                }
                "sigmoid" => x.sigmoid(),
                "tanh" => x.tanh(),
                "softplus" => x.softplus(),
                "scale" => x.scale(rng.random_range(-2.0..2.0)),
                "add_scalar" => x.add_scalar(rng.random_range(-1.0..1.0)),
                "clamp" => {
                    kinks.push((x, vec![-0.8, 0.8]));
                    x.clamp(-0.8, 0.8)
                }
                "broadcast_add" => x.add(v).unwrap(),
                "broadcast_mul" => v.mul(x).unwrap(),
                "concat_slice" => {
                    let wide = tape.concat(&[x, other], 1).unwrap();
                    let start = rng.random_range(1..COLS);
                    wide.slice(1, start, start + COLS).unwrap()
                }
                "reshape" => x
                    .reshape(vec![COLS, ROWS])
                    .unwrap()
                    .tanh()
                    .reshape(vec![ROWS, COLS])
                    .unwrap(),
                "sum_axis" => x
                    .add(
                        x.sum(1)
                            .unwrap()
                            .reshape(vec![ROWS, 1])
                            .unwrap()
                            .scale(0.1)
                            .matmul(ones_row(tape))
                            .unwrap(),
                    )
                    .unwrap(),
                "mean_axis" => x.mul(x.mean(0).unwrap()).unwrap(),
                "logsumexp" => {
                    let l = x.logsumexp(1).unwrap().reshape(vec![ROWS, 1]).unwrap();
                    x.sub(l.matmul(ones_row(tape)).unwrap()).unwrap()
                }
                _ => unreachable!(),
            };
        }
        let loss = match rng.random_range(0..3) {
            0 => x.sum_all(),
            1 => x.mean_all().scale(3.0),
            _ => x.logsumexp(0).unwrap().sum_all(),
        };
        Built { loss, used, kinks }
    }
}

fn ones_row(tape: &Tape) -> Var<'_> {
    tape.constant(Tensor::full(vec![1, COLS], 1.0))
}

pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= GRAD_ABS_TOL || diff <= GRAD_REL_TOL * analytic.abs().max(numeric.abs())
}

pub struct GradCheck {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub failures: usize,
    pub checked: usize,
    pub used: Vec<&'static str>,
}

fn loss_at(graph: &RandomGraph, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    graph.build(&tape, &vars).loss.value().item()
}

/// Compares tape gradients with central differences for every input element.
/// Returns `None` when the graph has a kink input too close to its kink.
pub fn check_graph(graph: &RandomGraph, inputs: &[Tensor]) -> Option<GradCheck> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let built = graph.build(&tape, &vars);
    if !built.smooth() || !built.loss.value().item().is_finite() {
        return None;
    }
    let grads = built.loss.backward().unwrap();
    let mut report = GradCheck {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        failures: 0,
        checked: 0,
        used: built.used.clone(),
    };
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (loss_at(graph, &plus) - loss_at(graph, &minus)) / (2.0 * FD_STEP);
            let diff = (a - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(diff);
            if diff > GRAD_ABS_TOL {
                report.max_rel_err = report.max_rel_err.max(diff / a.abs().max(numeric.abs()));
            }
            report.checked += 1;
            if !within_tolerance(a, numeric) {
                report.failures += 1;
            }
        }
    }
    Some(report)
}

/// Composite trapezoid rule on `[lo, hi]` with `n` intervals.
pub fn trapezoid(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / n as f64;
    let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h)).sum();
    h * (0.5 * (f(lo) + f(hi)) + inner)
}

/// Sample mean and standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
