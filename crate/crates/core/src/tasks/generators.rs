use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Example, SuiteSpec};
use crate::nn::{Input, Target};
use crate::seed;
use crate::tensor::Tensor;

/// Suite-wide pieces of the shared-low-rank family.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankBasis {
    /// `d x d` base map, also the frozen weight of the matching model.
    pub w0: Tensor,
    /// `true_rank x d`, shared by every task.
    pub a_star: Tensor,
    pub noise: f64,
}

impl LowRankBasis {
    pub fn generate(dim: usize, true_rank: usize, noise: f64, suite_seed: u64) -> Self {
        let mut rng = seed::stream(&[seed::TAG_SUITE, suite_seed]);
        let w_bound = 1.0 / (dim as f64).sqrt();
        let w0 = uniform(&mut rng, &[dim, dim], w_bound);
        let a_star = uniform(&mut rng, &[true_rank, dim], w_bound);
        Self { w0, a_star, noise }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Sinusoid {
        amplitude: f64,
        phase: f64,
    },
    LowRank {
        /// `d x true_rank` task factor.
        b: Tensor,
        /// `W0 + B_t A*`.
        weight: Tensor,
        basis: Arc<LowRankBasis>,
    },
    Sequence {
        vocab: usize,
        seq_len: usize,
        marker: (usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHandle {
    pub id: u64,
    pub suite_seed: u64,
    pub kind: TaskKind,
}

impl TaskHandle {
    pub(crate) fn generate(spec: &SuiteSpec, basis: Option<Arc<LowRankBasis>>, id: u64) -> Self {
        let suite_seed = spec.seed();
        let mut rng = seed::stream(&[seed::TAG_TASK, suite_seed, id]);
        let kind = match *spec {
            SuiteSpec::Sinusoid { .. } => TaskKind::Sinusoid {
                amplitude: rng.gen_range(0.1..=5.0),
                phase: rng.gen_range(0.0..=PI),
            },
            SuiteSpec::SharedLowRank { dim, true_rank, .. } => {
                let basis = basis.expect("low-rank suites carry a basis");
                let b = uniform(&mut rng, &[dim, true_rank], 1.0);
                Self::low_rank_kind(b, basis)
            }
            SuiteSpec::Sequence { vocab, seq_len, .. } => {
                let first = rng.gen_range(0..vocab);
                let second = (first + rng.gen_range(1..vocab)) % vocab;
                TaskKind::Sequence {
                    vocab,
                    seq_len,
                    marker: (first, second),
                }
            }
        };
        Self { id, suite_seed, kind }
    }

    pub fn low_rank_kind(b: Tensor, basis: Arc<LowRankBasis>) -> TaskKind {
        let delta = b.matmul(&basis.a_star).expect("factor shapes agree");
        let weight = basis.w0.add(&delta).expect("square delta");
        TaskKind::LowRank { b, weight, basis }
    }

    /// The task's exact target map for sinusoids, `None` otherwise.
    pub fn sinusoid(&self, x: f64) -> Option<f64> {
        match self.kind {
            TaskKind::Sinusoid { amplitude, phase } => Some(amplitude * (x + phase).sin()),
            _ => None,
        }
    }

    /// Sequence tasks honour `label`; the other families ignore it.
    pub(crate) fn draw(&self, rng: &mut ChaCha8Rng, label: usize) -> Example {
        match &self.kind {
            TaskKind::Sinusoid { amplitude, phase } => {
                let x = rng.gen_range(-5.0..=5.0);
                let y = amplitude * (x + phase).sin();
                Example::new(Input::Features(vec![x]), Target::Values(vec![y]))
            }
            TaskKind::LowRank { weight, basis, .. } => {
                let d = weight.shape()[0];
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let col = Tensor::new(vec![d, 1], x.clone()).expect("positive dim");
                let mut y = weight.matmul(&col).expect("square weight").into_data();
                if basis.noise > 0.0 {
                    let normal = Normal::new(0.0, basis.noise).expect("finite noise");
                    y.iter_mut().for_each(|v| *v += normal.sample(rng));
                }
                Example::new(Input::Features(x), Target::Values(y))
            }
            &TaskKind::Sequence {
                vocab,
                seq_len,
                marker: (a, b),
            } => {
                let mut tokens: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..vocab)).collect();
                if label == 1 {
                    let p = rng.gen_range(0..seq_len - 1);
                    tokens[p] = a;
                    tokens[p + 1] = b;
                } else {
                    while contains_marker(&tokens, a, b) {
                        tokens.iter_mut().for_each(|t| *t = rng.gen_range(0..vocab));
                    }
                }
                Example::new(Input::Tokens(tokens), Target::Class(label))
            }
        }
    }
}

/// True when `first` is immediately followed by `second` somewhere in `tokens`.
pub fn contains_marker(tokens: &[usize], first: usize, second: usize) -> bool {
    tokens.windows(2).any(|w| w[0] == first && w[1] == second)
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    #[test]
    fn sinusoid_values() {
        let t = TaskHandle {
            id: 0,
            suite_seed: 0,
            kind: TaskKind::Sinusoid {
                amplitude: 1.0,
                phase: 0.0,
            },
        };
        assert_eq!(t.sinusoid(PI / 2.0), Some(1.0));
        let t2 = TaskHandle {
            kind: TaskKind::Sinusoid {
                amplitude: 2.0,
                phase: 0.0,
            },
            ..t
        };
        assert_eq!(t2.sinusoid(0.0), Some(0.0));
    }

    #[test]
    fn sinusoid_parameters_in_range_and_reproducible() {
        let a = make_sinusoid_suite(50, 9).unwrap();
        let b = make_sinusoid_suite(50, 9).unwrap();
        assert_eq!(a.tasks, b.tasks);
        for t in &a.tasks {
            let TaskKind::Sinusoid { amplitude, phase } = t.kind else {
                panic!()
            };
            assert!((0.1..=5.0).contains(&amplitude));
            assert!((0.0..=PI).contains(&phase));
        }
        let ep = sample_episode(&a.tasks[0], 8, 8, 0).unwrap();
        for ex in ep.support.iter().chain(&ep.query) {
            let (Input::Features(x), Target::Values(y)) = (&ex.input, &ex.target) else {
                panic!()
            };
            assert!((-5.0..=5.0).contains(&x[0]));
            assert_eq!(a.tasks[0].sinusoid(x[0]), Some(y[0]));
        }
    }

    #[test]
    fn zero_task_factor_reproduces_base_map() {
        let suite = make_shared_lowrank_suite(3, 4, 1, 0.0, 1).unwrap();
        let basis = Arc::new(suite.basis().unwrap().clone());
        let task = TaskHandle {
            id: 99,
            suite_seed: 1,
            kind: TaskHandle::low_rank_kind(Tensor::zeros(&[4, 1]), basis.clone()),
        };
        let ep = sample_episode(&task, 4, 4, 0).unwrap();
        for ex in ep.support.iter().chain(&ep.query) {
            let (Input::Features(x), Target::Values(y)) = (&ex.input, &ex.target) else {
                panic!()
            };
            let col = Tensor::new(vec![4, 1], x.clone()).unwrap();
            assert_eq!(basis.w0.matmul(&col).unwrap().data(), y.as_slice());
        }
    }

    /// Numerical rank by Gaussian elimination with partial pivoting.
    fn numerical_rank(m: &Tensor, tol: f64) -> usize {
        let (r, c) = m.dims2().unwrap();
        let mut a = m.data().to_vec();
        let mut rank = 0;
        for col in 0..c {
            let pivot = (rank..r).max_by(|&i, &j| a[i * c + col].abs().total_cmp(&a[j * c + col].abs()));
            let Some(p) = pivot else { break };
            if a[p * c + col].abs() < tol {
                continue;
            }
            for k in 0..c {
                a.swap(rank * c + k, p * c + k);
            }
            for i in rank + 1..r {
                let f = a[i * c + col] / a[rank * c + col];
                for k in 0..c {
                    a[i * c + k] -= f * a[rank * c + k];
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn residual_maps_have_the_true_rank() {
        let suite = make_shared_lowrank_suite(6, 4, 1, 0.0, 3).unwrap();
        let w0 = &suite.basis().unwrap().w0;
        for t in &suite.tasks {
            let TaskKind::LowRank { weight, .. } = &t.kind else { panic!() };
            assert!(numerical_rank(&weight.sub(w0).unwrap(), 1e-9) <= 1);
        }
        let suite = make_shared_lowrank_suite(2, 8, 2, 0.0, 3).unwrap();
        let w0 = &suite.basis().unwrap().w0;
        let TaskKind::LowRank { weight, .. } = &suite.tasks[0].kind else { panic!() };
        assert_eq!(numerical_rank(&weight.sub(w0).unwrap(), 1e-9), 2);
    }

    #[test]
    fn noisy_targets_differ_from_clean_map() {
        let suite = make_shared_lowrank_suite(1, 3, 1, 0.5, 0).unwrap();
        let TaskKind::LowRank { weight, .. } = &suite.tasks[0].kind else { panic!() };
        let ep = sample_episode(&suite.tasks[0], 4, 4, 0).unwrap();
        let ex = &ep.support[0];
        let (Input::Features(x), Target::Values(y)) = (&ex.input, &ex.target) else { panic!() };
        let clean = weight.matmul(&Tensor::new(vec![3, 1], x.clone()).unwrap()).unwrap();
        assert_ne!(clean.data(), y.as_slice());
    }

    #[test]
    fn sequence_labels_and_balance() {
        let suite = make_sequence_suite(8, 8, 6, 4).unwrap();
        for t in &suite.tasks {
            let TaskKind::Sequence { marker: (a, b), .. } = t.kind else { panic!() };
            assert_ne!(a, b);
            for (ns, nq) in [(8, 8), (7, 5)] {
                let ep = sample_episode(t, ns, nq, 1).unwrap();
                for split in [&ep.support, &ep.query] {
                    let pos = split.iter().filter(|e| e.target == Target::Class(1)).count();
                    let neg = split.len() - pos;
                    assert!(pos.abs_diff(neg) <= 1);
                    for e in split.iter() {
                        let Input::Tokens(tok) = &e.input else { panic!() };
                        let label = contains_marker(tok, a, b) as usize;
                        assert_eq!(e.target, Target::Class(label));
                    }
                }
                if ns == 8 {
                    let pos = ep.support.iter().filter(|e| e.target == Target::Class(1)).count();
                    assert_eq!(pos, 4);
                }
            }
        }
    }

    #[test]
    fn marker_detection() {
        assert!(contains_marker(&[0, 2, 3, 1], 2, 3));
        assert!(!contains_marker(&[0, 3, 2, 1], 2, 3));
    }
}
