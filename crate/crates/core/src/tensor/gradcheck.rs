//! Finite-difference verification of the reverse sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradient magnitudes below this are indistinguishable from finite-difference
/// rounding noise for O(1) losses probed at eps around 1e-5.
const ZERO_FLOOR: f64 = 1e-8;

/// Compares analytic gradients of `build` against central differences.
///
/// `build` must construct the same scalar loss from whatever parameter
/// tensors it is handed; it runs once on the tape for the analytic sweep and
/// twice per sampled coordinate for the numeric probe. Up to
/// `coords_per_param` coordinates of every parameter are sampled (seeded, so
/// runs are reproducible). Returns the worst relative error
/// `|a - n| / max(|a|, |n|)` over all probes. When both sides sit below the
/// central-difference noise floor they count as agreeing: a true zero
/// gradient probed numerically returns rounding residue of order
/// `ulp(loss)/eps`, not zero.
pub fn grad_check<F>(
    build: F,
    params: &[Tensor],
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Argument("grad_check step must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone().with_grad())).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Argument("grad_check needs a scalar loss".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|p| t.constant(p.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for (pi, param) in params.iter().enumerate() {
        let mut coords: Vec<usize> = (0..param.numel()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(coords_per_param);
        for ci in coords {
            let mut probe: Vec<Tensor> = params.to_vec();
            probe[pi].data_mut()[ci] += eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ci] -= 2.0 * eps;
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let denom = a.abs().max(numeric.abs());
            let err = if denom <= ZERO_FLOOR {
                0.0
            } else {
                (a - numeric).abs() / denom
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn linear_function_agrees_to_1e10() {
        // f(w) = mean(x.w): analytic and numeric derivatives are both exact.
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect()).unwrap();
        let w = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64) * 0.1).collect()).unwrap();
        let err = grad_check(
            |tape, params| {
                let xv = tape.constant(x.clone());
                let prod = tape.matmul(xv, params[0])?;
                Ok(tape.mean_all(prod))
            },
            &[w],
            1e-5,
            8,
            42,
        )
        .unwrap();
        assert!(err <= 1e-10, "worst relative error {err}");
    }

    #[test]
    fn softmax_cross_entropy_agrees_to_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::matrix(4, 5, (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let targets = [1usize, 0, 4, 2];
        let err = grad_check(
            |tape, params| {
                let lsm = tape.log_softmax_rows(params[0]);
                let entries: Vec<(usize, usize)> =
                    targets.iter().enumerate().map(|(r, &c)| (r, c)).collect();
                let picked = tape.pick_entries(lsm, &entries);
                let mean = tape.mean_all(picked);
                Ok(tape.scale(mean, -1.0))
            },
            &[logits],
            1e-5,
            20,
            7,
        )
        .unwrap();
        assert!(err <= 1e-6, "worst relative error {err}");
    }

    #[test]
    fn attention_block_gradients_verify() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = 4;
        let p = super::super::AttentionParams::new(d, 2, &mut rng).unwrap();
        let x = Tensor::matrix(3, d, (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let params = vec![
            p.wq.clone(),
            p.wk.clone(),
            p.wv.clone(),
            p.wo.clone(),
            p.bq.clone(),
        ];
        let heads = p.heads;
        let err = grad_check(
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let attn = super::super::attention::AttentionVars {
                    heads,
                    wq: vars[0],
                    bq: vars[4],
                    wk: vars[1],
                    bk: tape.constant(Tensor::zeros(vec![d])),
                    wv: vars[2],
                    bv: tape.constant(Tensor::zeros(vec![d])),
                    wo: vars[3],
                    bo: tape.constant(Tensor::zeros(vec![d])),
                };
                let out = super::super::attention::multi_head_attention_traced(
                    tape, xv, xv, xv, &attn,
                )?;
                Ok(tape.mean_all(out))
            },
            &params,
            1e-5,
            10,
            23,
        )
        .unwrap();
        assert!(err <= 1e-6, "worst relative error {err}");
    }

    #[test]
    fn layer_norm_gradients_verify() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = Tensor::matrix(3, 6, (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let gamma = Tensor::new(vec![6], (0..6).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let beta = Tensor::new(vec![6], (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let err = grad_check(
            |tape, vars| {
                let normed = tape.layer_norm(vars[0], vars[1], vars[2])?;
                // Keep the loss nonlinear and non-constant: log-softmax picked
                // at a few fixed entries.
                let lsm = tape.log_softmax_rows(normed);
                let picked = tape.pick_entries(lsm, &[(0, 1), (1, 4), (2, 0)]);
                Ok(tape.mean_all(picked))
            },
            &[x, gamma, beta],
            1e-5,
            18,
            31,
        )
        .unwrap();
        assert!(err <= 1e-6, "worst relative error {err}");
    }
}
