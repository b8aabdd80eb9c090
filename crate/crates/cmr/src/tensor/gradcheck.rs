//! Central finite-difference verification of tape gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CmrError, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    /// One error vector per checked input, in input order.
    pub per_element_errors: Vec<Vec<f64>>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the analytic gradient of a scalar-valued tensor function against
/// central differences `(f(x+h) - f(x-h)) / 2h`, elementwise over every
/// input. The function must be deterministic; it is re-evaluated twice per
/// input element.
pub fn grad_check<F>(op_name: &str, f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = points.iter().map(|t| tape.leaf(t, false)).collect();
        let out = f(&mut tape, &ids)?;
        if tape.values(out).len() != 1 {
            return Err(CmrError::InvalidInput {
                op: "grad_check",
                reason: format!("function output must be scalar, got shape {:?}", tape.shape(out)),
            });
        }
        Ok(tape.values(out)[0])
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let out = f(&mut tape, &ids)?;
    if tape.values(out).len() != 1 {
        return Err(CmrError::InvalidInput {
            op: "grad_check",
            reason: format!("function output must be scalar, got shape {:?}", tape.shape(out)),
        });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map_or_else(|| vec![0.0; tape.values(id).len()], <[f64]>::to_vec))
        .collect();

    let mut per_element_errors = Vec::with_capacity(inputs.len());
    let mut max_err: f64 = 0.0;
    let mut points: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let mut errs = Vec::with_capacity(input.numel());
        for e in 0..input.numel() {
            let orig = input.values()[e];
            let mut vals = input.values().to_vec();
            vals[e] = orig + h;
            points[which] = Tensor::new(input.shape().to_vec(), vals.clone())?;
            let fp = eval(&points)?;
            vals[e] = orig - h;
            points[which] = Tensor::new(input.shape().to_vec(), vals)?;
            let fm = eval(&points)?;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[which][e], numeric);
            max_err = max_err.max(err);
            errs.push(err);
        }
        points[which] = input.clone();
        per_element_errors.push(errs);
    }

    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_relative_error: max_err,
        per_element_errors,
        passed: max_err < tol,
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel = shape.iter().product();
    let values = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, values).expect("shape and length agree")
}

/// Reduces an arbitrary op output to a scalar through a fixed random linear
/// functional, so the finite-difference probe sees informative gradients.
fn weighted_sum(tape: &mut Tape, out: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let n = tape.values(out).len();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.mul_const(out, &weights)?;
    Ok(tape.sum_all(w))
}

/// Runs the finite-difference oracle over every registered op with seeded
/// random inputs. Returns one report per op per seed.
pub fn ops_suite(seeds: &[u64], h: f64, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut check = |name: &str,
                         inputs: Vec<Tensor>,
                         f: &dyn Fn(&mut Tape, &[NodeId], &mut ChaCha8Rng) -> Result<NodeId>,
                         rng: &mut ChaCha8Rng|
         -> Result<()> {
            // clone the functional rng per evaluation so f is deterministic
            let frozen = rng.clone();
            let report = grad_check(
                &format!("{name}[seed {seed}]"),
                |tape, ids| {
                    let mut r = frozen.clone();
                    f(tape, ids, &mut r)
                },
                &inputs,
                h,
                tol,
            )?;
            reports.push(report);
            Ok(())
        };

        let a = rand_tensor(&mut rng, vec![4, 3]);
        let b = rand_tensor(&mut rng, vec![3, 2]);
        check("matmul", vec![a, b], &|t, ids, r| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![3, 4]);
        check("transpose", vec![x], &|t, ids, r| {
            let y = t.transpose(ids[0])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let a = rand_tensor(&mut rng, vec![3, 3]);
        let b = rand_tensor(&mut rng, vec![3, 3]);
        check("add", vec![a, b], &|t, ids, r| {
            let y = t.add(ids[0], ids[1])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let parts: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, vec![2, 3])).collect();
        check("add_n", parts, &|t, ids, r| {
            let y = t.add_n(ids)?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let a = rand_tensor(&mut rng, vec![2, 4]);
        let b = rand_tensor(&mut rng, vec![2, 4]);
        check("mul", vec![a, b], &|t, ids, r| {
            let y = t.mul(ids[0], ids[1])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![3, 2]);
        check("scale", vec![x], &|t, ids, r| {
            let y = t.scale(ids[0], -1.7);
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![2, 3]);
        check("add_const", vec![x], &|t, ids, r| {
            let y = t.add_const(ids[0], &[0.5, -2.0, 1.0, 0.0, 3.0, -1.0])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![2, 3]);
        check("mul_const", vec![x], &|t, ids, r| {
            let y = t.mul_const(ids[0], &[1.0, 0.0, 2.0, -1.0, 0.0, 0.5])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![3, 3]);
        check("relu", vec![x], &|t, ids, r| {
            let y = t.relu(ids[0]);
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![4, 3]);
        check("softmax_columns", vec![x], &|t, ids, r| {
            let y = t.softmax_cols(ids[0])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![4, 3]);
        let gain = rand_tensor(&mut rng, vec![4]);
        let bias = rand_tensor(&mut rng, vec![4]);
        check("layer_norm", vec![x, gain, bias], &|t, ids, r| {
            let y = t.layer_norm_cols(ids[0], ids[1], ids[2])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let w = rand_tensor(&mut rng, vec![3, 4]);
        let x = rand_tensor(&mut rng, vec![4, 2]);
        let b = rand_tensor(&mut rng, vec![3]);
        check("linear", vec![w, x, b], &|t, ids, r| {
            let y = t.linear(ids[0], ids[1], ids[2])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let input = rand_tensor(&mut rng, vec![2, 4, 5]);
        let kernels = rand_tensor(&mut rng, vec![3, 2, 2, 2]);
        let b = rand_tensor(&mut rng, vec![3]);
        check("conv2d", vec![input, kernels, b], &|t, ids, r| {
            let y = t.conv2d(ids[0], ids[1], ids[2])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let input = rand_tensor(&mut rng, vec![2, 3, 5]);
        check("maxpool2d", vec![input], &|t, ids, r| {
            let y = t.maxpool2(ids[0])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let a = rand_tensor(&mut rng, vec![3, 2]);
        let b = rand_tensor(&mut rng, vec![3, 4]);
        check("concat_cols", vec![a, b], &|t, ids, r| {
            let y = t.concat_cols(ids)?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let a = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![4, 3]);
        check("concat_rows", vec![a, b], &|t, ids, r| {
            let y = t.concat_rows(ids)?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![3, 5]);
        check("slice_cols", vec![x], &|t, ids, r| {
            let y = t.slice_cols(ids[0], 1, 3)?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![3, 4]);
        check("gather_cols", vec![x], &|t, ids, r| {
            let y = t.gather_cols(ids[0], &[2, 0, 2, 3])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![3, 4]);
        check("reshape", vec![x], &|t, ids, r| {
            let y = t.reshape(ids[0], vec![2, 6])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let u = rand_tensor(&mut rng, vec![3]);
        let v = rand_tensor(&mut rng, vec![4]);
        check("outer_product", vec![u, v], &|t, ids, r| {
            let y = t.outer(ids[0], ids[1])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![3, 4]);
        check("row_max", vec![x], &|t, ids, r| {
            let y = t.row_max(ids[0], &[true, true, false, true])?;
            weighted_sum(t, y, r)
        }, &mut rng)?;

        let x = rand_tensor(&mut rng, vec![2, 3]);
        check("sum_all", vec![x], &|t, ids, _| Ok(t.sum_all(ids[0])), &mut rng)?;

        let logits = rand_tensor(&mut rng, vec![5]);
        check("cross_entropy", vec![logits], &|t, ids, _| t.cross_entropy(ids[0], 2), &mut rng)?;

        let logit = rand_tensor(&mut rng, vec![1]);
        check("sigmoid_bce", vec![logit], &|t, ids, _| t.sigmoid_bce(ids[0], 1), &mut rng)?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient_and_zero_error() {
        let x = Tensor::new(vec![2, 3], vec![0.3, 1.0, -2.0, 0.7, 0.1, 5.0]).unwrap();
        let report = grad_check("sum", |t, ids| Ok(t.sum_all(ids[0])), &[x], 1e-6, 1e-4).unwrap();
        assert!(report.passed);
        assert!(report.max_relative_error < 1e-9, "err {}", report.max_relative_error);
    }

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let x = Tensor::new(vec![4], vec![0.8, -1.3, 2.0, 0.4]).unwrap();
        let report = grad_check(
            "sum_sq",
            |t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                Ok(t.sum_all(sq))
            },
            &[x],
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "max err {}", report.max_relative_error);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let x = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let err = grad_check("identity", |t, ids| t.relu(ids[0]).pipe_ok(), &[x], 1e-6, 1e-4);
        assert!(err.is_err());
    }

    trait PipeOk {
        fn pipe_ok(self) -> crate::error::Result<NodeId>;
    }
    impl PipeOk for NodeId {
        fn pipe_ok(self) -> crate::error::Result<NodeId> {
            Ok(self)
        }
    }

    #[test]
    fn duplicated_input_oracle_confirms_gradient_accumulation() {
        // g(x) = f(x, x) with f(a, b) = sum(a ∘ b); the tape sees one node
        // used twice while the oracle perturbs a single shared input.
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = grad_check(
            "shared_input",
            |t, ids| {
                let y = t.mul(ids[0], ids[0])?;
                let s = t.scale(y, 0.5);
                Ok(t.sum_all(s))
            },
            &[x],
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "max err {}", report.max_relative_error);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, vec![4, 3]);
        let b = rand_tensor(&mut rng, vec![3, 2]);
        let report = grad_check(
            "matmul_4x3_3x2",
            |t, ids| {
                let y = t.matmul(ids[0], ids[1])?;
                Ok(t.sum_all(y))
            },
            &[a, b],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max err {}", report.max_relative_error);
    }

    #[test]
    fn layer_norm_and_conv_pass_at_module_tolerances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![4, 3]);
        let gain = rand_tensor(&mut rng, vec![4]);
        let bias = rand_tensor(&mut rng, vec![4]);
        let report = grad_check(
            "layer_norm",
            |t, ids| {
                let y = t.layer_norm_cols(ids[0], ids[1], ids[2])?;
                Ok(t.sum_all(y))
            },
            &[x, gain, bias],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "layer_norm err {}", report.max_relative_error);

        let input = rand_tensor(&mut rng, vec![1, 4, 4]);
        let kernels = rand_tensor(&mut rng, vec![2, 1, 2, 2]);
        let b = rand_tensor(&mut rng, vec![2]);
        let report = grad_check(
            "conv2d",
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2])?;
                Ok(t.sum_all(y))
            },
            &[input, kernels, b],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "conv2d err {}", report.max_relative_error);
    }

    #[test]
    fn ops_suite_passes_across_seeds() {
        let reports = ops_suite(&[1, 2], 1e-6, 1e-4).unwrap();
        for r in &reports {
            assert!(r.passed, "{} failed with max err {}", r.op_name, r.max_relative_error);
        }
    }
}
