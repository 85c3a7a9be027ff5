use crate::error::Result;

use super::{Tape, Tensor, Var};

const DENOM_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Compares the tape's analytic gradient of the scalar `f(leaves)` against
/// central finite differences with step `h`, coordinate by coordinate.
/// Returns the largest relative error seen.
pub fn grad_check<F>(leaves: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |leaves: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad(*v)).collect();

    let mut work = leaves.to_vec();
    let mut worst: f64 = 0.0;
    for (li, grads) in analytic.iter().enumerate() {
        for (ci, a) in grads.iter().enumerate() {
            let orig = work[li].values()[ci];
            work[li].values_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[li].values_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[li].values_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(*a, numeric));
        }
    }
    Ok(worst)
}
