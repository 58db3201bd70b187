//! Central finite-difference gradient checking.
//!
//! The oracle only evaluates forward passes: each checked coordinate is
//! perturbed by +/- eps on a fresh tape and the difference quotient is
//! compared against the analytic gradient from `backward`.

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape};
use super::tensor::{Tensor, TensorError};

/// Builds the scalar loss from the given inputs. Called repeatedly with
/// perturbed copies, so it must be deterministic and free of side effects
/// that leak across calls.
pub type BuildFn<'a> = &'a dyn Fn(&mut Tape, &[Tensor]) -> Result<NodeId, TensorError>;

pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely at the same tolerance.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Check analytic gradients of `build` against central differences.
///
/// `coords_per_input` bounds how many coordinates of each input are probed
/// (seeded subsample); `None` checks every coordinate.
pub fn check_gradients(
    inputs: &[Tensor],
    build: BuildFn,
    eps: f64,
    tol: f64,
    coords_per_input: Option<(usize, u64)>,
) -> Result<CheckReport, String> {
    // analytic pass
    let mut tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let loss = build(&mut tape, &tracked).map_err(|e| format!("build failed: {e}"))?;
    tape.backward(loss).map_err(|e| format!("backward failed: {e}"))?;

    // The builder must insert the checked inputs as the first leaves, in
    // order; their gradients are read back off the tape.
    let grads = collect_input_grads(&tape, inputs.len())?;

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (pi, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match coords_per_input {
            Some((k, seed)) if k < input.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9E37_79B9));
                let mut v: Vec<usize> = index_sample(&mut rng, input.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..input.len()).collect(),
        };
        for ci in coords {
            let numeric = {
                let mut plus = inputs.to_vec();
                plus[pi].values_mut()[ci] += eps;
                let mut minus = inputs.to_vec();
                minus[pi].values_mut()[ci] -= eps;
                let fp = eval(build, &plus)?;
                let fm = eval(build, &minus)?;
                (fp - fm) / (2.0 * eps)
            };
            let analytic = grads[pi][ci];
            let e = rel_err(analytic, numeric);
            if e > max_rel {
                max_rel = e;
            }
            if e > tol {
                return Err(format!(
                    "gradient mismatch at input {pi} coord {ci}: analytic {analytic:.9e} vs numeric {numeric:.9e} (rel err {e:.3e})"
                ));
            }
            checked += 1;
        }
    }
    Ok(CheckReport {
        max_rel_err: max_rel,
        checked,
    })
}

fn eval(build: BuildFn, inputs: &[Tensor]) -> Result<f64, String> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, inputs).map_err(|e| format!("build failed: {e}"))?;
    Ok(tape.scalar(loss))
}

fn collect_input_grads(tape: &Tape, n: usize) -> Result<Vec<Vec<f64>>, String> {
    let leaves: Vec<NodeId> = tape.leaf_ids().take(n).collect();
    if leaves.len() < n {
        return Err(format!("builder inserted fewer than {n} leaves"));
    }
    Ok(leaves
        .into_iter()
        .map(|id| {
            let len = tape.value(id).len();
            tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
        })
        .collect())
}
