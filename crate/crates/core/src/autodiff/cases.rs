//! Seeded single-op losses for gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{OpKind, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Result of checking one op on one random shape.
#[derive(Clone, Debug)]
pub struct OpCaseReport {
    pub kind: OpKind,
    pub seed: u64,
    pub shapes: Vec<Vec<usize>>,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_rows(rows, cols, data).expect("sized")
}

/// Values in `±[0.1, 1]`, keeping kinks out of reach of the finite difference.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_rows(rows, cols, data).expect("sized")
}

struct Case {
    store: ParamStore,
    weights: Option<Tensor>,
    ints: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    reals: Vec<f64>,
}

impl Case {
    fn param(&mut self, name: &str, t: Tensor) -> ParamId {
        self.store.add(name, ParamGroup::TaskSpecific, t).expect("unique names")
    }
}

fn cube(x: f64) -> f64 {
    x * x * x + x.sin()
}

fn cube_grad(x: f64) -> f64 {
    3.0 * x * x + x.cos()
}

/// Builds a random instance of `kind` from `seed` and compares its analytic
/// gradient with central differences. Non-scalar outputs are reduced with a
/// fixed random weighting so every output entry matters.
pub fn check_op(kind: OpKind, seed: u64, config: GradCheckConfig) -> Result<OpCaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=5);
    let k = rng.gen_range(1..=4);
    let mut case = Case { store: ParamStore::new(), weights: None, ints: Vec::new(), pairs: Vec::new(), reals: Vec::new() };
    let out_shape: Option<(usize, usize)> = match kind {
        OpKind::MatMul => {
            case.param("a", uniform(&mut rng, m, k));
            case.param("b", uniform(&mut rng, k, n));
            Some((m, n))
        }
        OpKind::MatMulNt => {
            case.param("a", uniform(&mut rng, m, k));
            case.param("b", uniform(&mut rng, n, k));
            Some((m, n))
        }
        OpKind::Transpose => {
            case.param("a", uniform(&mut rng, m, n));
            Some((n, m))
        }
        OpKind::Add | OpKind::Mul => {
            case.param("a", uniform(&mut rng, m, n));
            case.param("b", uniform(&mut rng, m, n));
            Some((m, n))
        }
        OpKind::AddRow => {
            case.param("a", uniform(&mut rng, m, n));
            case.param("bias", uniform(&mut rng, 1, n));
            Some((m, n))
        }
        OpKind::Scale => {
            case.param("a", uniform(&mut rng, m, n));
            case.reals.push(rng.gen_range(-2.0..2.0));
            Some((m, n))
        }
        OpKind::ConcatCols => {
            case.param("a", uniform(&mut rng, m, n));
            case.param("b", uniform(&mut rng, m, k));
            Some((m, n + k))
        }
        OpKind::GatherRows => {
            case.param("a", uniform(&mut rng, m, n));
            case.param("b", uniform(&mut rng, k, n));
            let count = rng.gen_range(1..=6);
            case.pairs = (0..count)
                .map(|_| if rng.gen_bool(0.5) { (0, rng.gen_range(0..m)) } else { (1, rng.gen_range(0..k)) })
                .collect();
            Some((count, n))
        }
        OpKind::ColSlice => {
            case.param("a", uniform(&mut rng, m, n));
            let start = rng.gen_range(0..n);
            let end = rng.gen_range(start + 1..=n);
            case.ints = vec![start, end];
            Some((m, end - start))
        }
        OpKind::Sigmoid | OpKind::Tanh | OpKind::SoftmaxRows | OpKind::Map => {
            case.param("a", uniform(&mut rng, m, n));
            Some((m, n))
        }
        OpKind::Relu => {
            case.param("a", away_from_zero(&mut rng, m, n));
            Some((m, n))
        }
        OpKind::LayerNorm => {
            let n = n.max(2);
            case.param("x", uniform(&mut rng, m, n));
            case.param("gamma", uniform(&mut rng, 1, n));
            case.param("beta", uniform(&mut rng, 1, n));
            Some((m, n))
        }
        OpKind::CosineRows => {
            case.param("x", away_from_zero(&mut rng, m, n));
            case.param("proto", away_from_zero(&mut rng, 1, n));
            Some((m, 1))
        }
        OpKind::ScaleRows => {
            case.param("x", uniform(&mut rng, m, n));
            case.param("s", uniform(&mut rng, m, 1));
            Some((m, n))
        }
        OpKind::MeanRows => {
            case.param("a", uniform(&mut rng, m, n));
            Some((1, n))
        }
        OpKind::Sum => {
            case.param("a", uniform(&mut rng, m, n));
            None
        }
        OpKind::CrfLogLikelihood => {
            // a single label makes the likelihood identically zero
            let (len, labels) = (rng.gen_range(1..=5), rng.gen_range(2..=4));
            case.param("emissions", uniform(&mut rng, len, labels));
            case.param("transitions", uniform(&mut rng, labels + 2, labels + 2));
            case.ints = (0..len).map(|_| rng.gen_range(0..labels)).collect();
            None
        }
        OpKind::BceWithLogits => {
            case.param("logits", uniform(&mut rng, 1, n));
            case.reals = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            None
        }
    };
    if let Some((r, c)) = out_shape {
        case.weights = Some(uniform(&mut rng, r, c));
    }
    let shapes = case.store.iter().map(|(_, p)| p.value.shape().to_vec()).collect();
    let Case { mut store, weights, ints, pairs, reals } = case;
    let f = |tape: &mut Tape<'_>| -> Result<Var> {
        let p: Vec<Var> = tape.store().ids().collect::<Vec<_>>().into_iter().map(|id| tape.param(id)).collect();
        let out = match kind {
            OpKind::MatMul => tape.matmul(p[0], p[1])?,
            OpKind::MatMulNt => tape.matmul_nt(p[0], p[1])?,
            OpKind::Transpose => tape.transpose(p[0])?,
            OpKind::Add => tape.add(p[0], p[1])?,
            OpKind::Mul => tape.mul(p[0], p[1])?,
            OpKind::AddRow => tape.add_row(p[0], p[1])?,
            OpKind::Scale => tape.scale(p[0], reals[0])?,
            OpKind::ConcatCols => tape.concat_cols(&[p[0], p[1]])?,
            OpKind::GatherRows => tape.gather_rows(&[p[0], p[1]], &pairs)?,
            OpKind::ColSlice => tape.col_slice(p[0], ints[0], ints[1])?,
            OpKind::Sigmoid => tape.sigmoid(p[0])?,
            OpKind::Tanh => tape.tanh(p[0])?,
            OpKind::Relu => tape.relu(p[0])?,
            OpKind::SoftmaxRows => tape.softmax_rows(p[0])?,
            OpKind::LayerNorm => tape.layer_norm(p[0], p[1], p[2])?,
            OpKind::CosineRows => tape.cosine_rows(p[0], p[1])?,
            OpKind::ScaleRows => tape.scale_rows(p[0], p[1])?,
            OpKind::MeanRows => tape.mean_rows(p[0])?,
            OpKind::Map => tape.map(p[0], cube, cube_grad)?,
            OpKind::Sum => return tape.sum(p[0]),
            OpKind::CrfLogLikelihood => return tape.crf_log_likelihood(p[0], p[1], &ints),
            OpKind::BceWithLogits => return tape.bce_with_logits(p[0], &reals),
        };
        let w = tape.constant(weights.clone().expect("weighted output"))?;
        let weighted = tape.mul(out, w)?;
        tape.sum(weighted)
    };
    let report = grad_check(&mut store, f, config)?;
    Ok(OpCaseReport { kind, seed, shapes, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_builds_and_passes_one_case() {
        for kind in OpKind::ALL {
            let r = check_op(kind, 1, GradCheckConfig::default()).unwrap();
            assert!(r.report.passed(), "{kind:?} {:?}", r.report.params);
        }
    }

    #[test]
    fn cases_are_reproducible() {
        let a = check_op(OpKind::GatherRows, 9, GradCheckConfig::default()).unwrap();
        let b = check_op(OpKind::GatherRows, 9, GradCheckConfig::default()).unwrap();
        assert_eq!(a.shapes, b.shapes);
        assert_eq!(a.report.max_rel_error(), b.report.max_rel_error());
    }
}
