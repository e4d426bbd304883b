//! Central-difference gradient checking.
//!
//! The checker perturbs each coordinate of the input by `±h`, evaluates the
//! recorded scalar function, and compares `(f(x+h·e) - f(x-h·e)) / 2h`
//! against the tape's analytic gradient. Run it in `f64`; `f32` rounding
//! swamps the truncation error of central differences.

use crate::error::Result;
use crate::tensor::{GradTape, Scalar, Tensor, ValueId};

/// A scalar-valued tensor function expressed as tape ops over one input.
pub type TapeFn<'a, S> = dyn FnMut(&mut GradTape<S>, ValueId) -> Result<ValueId> + 'a;

/// Worst relative error between analytic and central-difference gradients,
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<S: Scalar>(
    f: &mut TapeFn<'_, S>,
    at: &Tensor<S>,
    h: S,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let x = tape.trainable_leaf("x", at.clone());
    let loss = f(&mut tape, x)?;
    let mut grads = tape.backward(loss)?;
    let analytic = grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(at.shape().to_vec()));

    let eval = |point: &Tensor<S>, f: &mut TapeFn<'_, S>| -> Result<f64> {
        let mut tape = GradTape::new();
        let x = tape.leaf(point.clone());
        let loss = f(&mut tape, x)?;
        Ok(tape.value(loss).item().to_f64())
    };

    let h64 = h.to_f64();
    let mut worst = 0.0f64;
    for i in 0..at.len() {
        let mut plus = at.clone();
        plus.data_mut()[i] += h;
        let mut minus = at.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus, f)? - eval(&minus, f)?) / (2.0 * h64);
        let exact = analytic.data()[i].to_f64();
        let denom = exact.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((numeric - exact).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_exact_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let at = Tensor::<f64>::gaussian(vec![3, 3], 0.0, 1.0, &mut rng);
        let err = finite_difference_check(&mut |t, x| t.sum(x), &at, 1e-4).unwrap();
        assert!(err < 1e-10, "sum gradient error {err}");
    }

    #[test]
    fn mul_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let at = Tensor::<f64>::gaussian(vec![2, 5], 0.0, 1.0, &mut rng);
        let other = Tensor::<f64>::gaussian(vec![2, 5], 0.0, 1.0, &mut rng);
        let err = finite_difference_check(
            &mut |t, x| {
                let b = t.leaf(other.clone());
                let y = t.mul(x, b)?;
                t.sum(y)
            },
            &at,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "mul gradient error {err}");
    }

    #[test]
    fn error_decays_quadratically_with_step() {
        // Central differences are O(h^2); halving h should cut the error of a
        // smooth loss by roughly 4x. Checked on the mean-square loss.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let at = Tensor::<f64>::gaussian(vec![6], 0.0, 1.0, &mut rng);
        let target = Tensor::<f64>::gaussian(vec![6], 0.0, 1.0, &mut rng);
        let mut f = |t: &mut GradTape<f64>, x: ValueId| {
            let y = t.leaf(target.clone());
            let d = t.sub(x, y)?;
            let sq = t.mul(d, d)?;
            let s = t.sum(sq)?;
            let cube = t.mul(s, s)?; // nonlinear in x so truncation error is visible
            t.sum(cube)
        };
        let e1 = finite_difference_check(&mut f, &at, 1e-2).unwrap();
        let e2 = finite_difference_check(&mut f, &at, 5e-3).unwrap();
        assert!(e2 < e1 * 0.5, "expected O(h^2) decay, got {e1} -> {e2}");
    }
}
