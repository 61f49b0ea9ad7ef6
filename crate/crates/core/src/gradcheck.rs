//! Finite-difference verification of every tape primitive and both losses.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::nn::{cross_entropy_loss, mse_loss};
use crate::seed;
use crate::tensor::{finite_diff_grad, max_relative_error, Tape, Tensor, TensorError, Var, PRIMITIVES};

pub const DEFAULT_POINTS: usize = 20;
pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

type Builder = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + Send + Sync;

/// A differentiable expression of some random inputs.
#[derive(Clone)]
pub struct GradCase {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    build: Arc<Builder>,
}

impl GradCase {
    pub fn new<F>(name: impl Into<String>, shapes: Vec<Vec<usize>>, build: F) -> Self
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            shapes,
            build: Arc::new(build),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }

    /// One `PASS`/`FAIL` line per case.
    pub fn render(&self) -> String {
        let width = self.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{} {:width$}  max_rel_err={:.3e}  points={}\n",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.max_rel_error,
                r.points,
            ));
        }
        let failed = self.failures().len();
        out.push_str(&format!(
            "{} of {} checks passed (tolerance {:.0e})\n",
            self.results.len() - failed,
            self.results.len(),
            self.tolerance
        ));
        out
    }
}

/// One case per built-in primitive, in [`PRIMITIVES`] order, then the two losses.
pub fn registry() -> Vec<GradCase> {
    let mut cases: Vec<GradCase> = PRIMITIVES.iter().map(|&p| primitive_case(p)).collect();
    cases.push(GradCase::new("loss:mse", vec![vec![4, 2], vec![4, 2]], |t, v| {
        mse_loss(t, v[0], v[1]).map_err(into_tensor_error)
    }));
    cases.push(GradCase::new("loss:cross_entropy", vec![vec![4, 3]], |t, v| {
        cross_entropy_loss(t, v[0], &[2, 0, 1, 2]).map_err(into_tensor_error)
    }));
    cases
}

fn into_tensor_error(e: crate::nn::NnError) -> TensorError {
    match e {
        crate::nn::NnError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

fn primitive_case(name: &str) -> GradCase {
    let m = |r: usize, c: usize| vec![r, c];
    match name {
        "matmul" => GradCase::new(name, vec![m(3, 4), m(4, 2)], |t, v| t.matmul(v[0], v[1])),
        "add" => GradCase::new(name, vec![m(2, 3), m(2, 3)], |t, v| t.add(v[0], v[1])),
        "sub" => GradCase::new(name, vec![m(2, 3), m(2, 3)], |t, v| t.sub(v[0], v[1])),
        "mul" => GradCase::new(name, vec![m(2, 3), m(2, 3)], |t, v| t.mul(v[0], v[1])),
        "scale" => GradCase::new(name, vec![m(2, 3)], |t, v| t.scale(v[0], -1.7)),
        "add_scalar" => GradCase::new(name, vec![m(2, 3)], |t, v| t.add_scalar(v[0], 0.3)),
        "relu" => GradCase::new(name, vec![m(3, 3)], |t, v| t.relu(v[0])),
        "tanh" => GradCase::new(name, vec![m(3, 3)], |t, v| t.tanh(v[0])),
        "softmax" => GradCase::new(name, vec![m(3, 4)], |t, v| t.softmax(v[0])),
        "sum" => GradCase::new(name, vec![m(2, 3)], |t, v| t.sum(v[0])),
        "mean" => GradCase::new(name, vec![m(2, 3)], |t, v| t.mean(v[0])),
        "transpose" => GradCase::new(name, vec![m(2, 3)], |t, v| t.transpose(v[0])),
        "add_row" => GradCase::new(name, vec![m(3, 4), vec![4]], |t, v| t.add_row(v[0], v[1])),
        "slice_cols" => GradCase::new(name, vec![m(3, 5)], |t, v| t.slice_cols(v[0], 1, 4)),
        "concat_cols" => GradCase::new(name, vec![m(3, 2), m(3, 1)], |t, v| t.concat_cols(&[v[0], v[1]])),
        "concat_rows" => GradCase::new(name, vec![m(2, 3), m(1, 3)], |t, v| t.concat_rows(&[v[0], v[1]])),
        "mean_rows" => GradCase::new(name, vec![m(4, 3)], |t, v| t.mean_rows(v[0])),
        "cross_entropy" => GradCase::new(name, vec![m(3, 4)], |t, v| t.cross_entropy(v[0], &[1, 3, 0])),
        other => panic!("no gradient check registered for primitive {other:?}"),
    }
}

/// Reduces a non-scalar output to a scalar with fixed random weights so
/// every output coordinate contributes to the checked gradient.
fn scalarize(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var, TensorError> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = tape.constant(weights.reshape(tape.value(out).shape().to_vec())?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn evaluate(case: &GradCase, inputs: &[Tensor], weights: &Tensor, params: bool) -> Result<(f64, Tape, Vec<Var>), TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| if params { tape.param(x.detached()) } else { tape.constant(x.detached()) })
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out, weights)?;
    let value = tape.value(loss).item()?;
    if params {
        tape.backward(loss)?;
    }
    Ok((value, tape, vars))
}

fn check_case(case: &GradCase, points: usize, h: f64, tol: f64, seed: u64) -> CaseResult {
    let mut rng = seed::stream(&[seed, seed::name_id(&case.name)]);
    let mut worst = 0.0f64;
    let mut failed = false;
    for _ in 0..points {
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|_| rng.gen_range(-2.0..=2.0)).collect()).expect("valid shape")
            })
            .collect();
        let numel = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.detached())).collect();
            (case.build)(&mut tape, &vars).map(|o| tape.value(o).numel()).unwrap_or(1)
        };
        let weights = Tensor::new(vec![numel.max(1)], (0..numel.max(1)).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .expect("non-empty");
        let analytic = match evaluate(case, &inputs, &weights, true) {
            Ok((_, tape, vars)) => vars
                .iter()
                .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
                .collect::<Vec<_>>(),
            Err(_) => {
                failed = true;
                worst = f64::INFINITY;
                continue;
            }
        };
        for (i, x) in inputs.iter().enumerate() {
            let f = |probe: &Tensor| {
                let mut moved = inputs.clone();
                moved[i] = probe.detached();
                evaluate(case, &moved, &weights, false).map(|r| r.0).unwrap_or(f64::NAN)
            };
            let numeric = finite_diff_grad(f, x, h);
            let err = max_relative_error(&analytic[i], numeric.data());
            let err = if err.is_nan() { f64::INFINITY } else { err };
            worst = worst.max(err);
        }
    }
    CaseResult {
        name: case.name.clone(),
        points,
        max_rel_error: worst,
        passed: !failed && worst < tol,
    }
}

pub fn run_gradcheck_with(cases: &[GradCase], points: usize, h: f64, tol: f64, seed: u64) -> GradcheckReport {
    GradcheckReport {
        tolerance: tol,
        results: cases.iter().map(|c| check_case(c, points, h, tol, seed)).collect(),
    }
}

/// The full registry at the default points, step and tolerance.
pub fn run_gradcheck(seed: u64) -> GradcheckReport {
    run_gradcheck_with(&registry(), DEFAULT_POINTS, DEFAULT_STEP, DEFAULT_TOLERANCE, seed)
}
