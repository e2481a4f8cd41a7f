//! Central finite-difference gradient oracle.
//!
//! `numeric_grads` re-evaluates a forward build at perturbed parameters and
//! never touches the reverse pass, so it stays an independent check on
//! `Tape::backward`. Used by the unit and acceptance test suites.

use crate::tensor::{Result, Scalar, Tape, Tensor, Var};

/// Gradients from the reverse pass, one flat buffer per parameter.
pub fn analytic_grads<S, F>(params: &[Tensor<S>], build: F) -> Result<Vec<Vec<S>>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient").to_vec())
        .collect())
}

/// Central finite differences (f(x+h) - f(x-h)) / 2h, element by element.
pub fn numeric_grads<S, F>(params: &[Tensor<S>], h: S, build: F) -> Result<Vec<Vec<S>>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |shifted: &[Tensor<S>]| -> Result<S> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shifted.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    let two_h = h + h;
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![S::zero(); params[p].numel()];
        for i in 0..params[p].numel() {
            let mut plus = params.to_vec();
            plus[p].data_mut()[i] = plus[p].data()[i] + h;
            let mut minus = params.to_vec();
            minus[p].data_mut()[i] = minus[p].data()[i] - h;
            g[i] = (eval(&plus)? - eval(&minus)?) / two_h;
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Maximum relative error between two gradient sets, with an absolute floor
/// below which entries are compared absolutely.
pub fn max_rel_err<S: Scalar>(analytic: &[Vec<S>], numeric: &[Vec<S>], floor: f64) -> f64 {
    let mut worst = 0.0_f64;
    for (ga, gn) in analytic.iter().zip(numeric) {
        for (&a, &n) in ga.iter().zip(gn) {
            let a = a.to_f64().unwrap();
            let n = n.to_f64().unwrap();
            let denom = a.abs().max(n.abs());
            let err = if denom < floor {
                (a - n).abs()
            } else {
                (a - n).abs() / denom
            };
            worst = worst.max(err);
        }
    }
    worst
}

/// Runs both passes in one precision and returns the worst relative error.
pub fn check<S, F>(params: &[Tensor<S>], h: S, floor: f64, build: F) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var> + Copy,
{
    let a = analytic_grads(params, build)?;
    let n = numeric_grads(params, h, build)?;
    Ok(max_rel_err(&a, &n, floor))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor::vector(vec![0.3_f64, -1.4, 2.2]);
        let err = check(&[x], 1e-5, 1e-7, |tape, vars| {
            let sq = tape.mul(vars[0], vars[0])?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // tanh forward with an (intentionally) mismatched loss: analytic and
        // numeric must agree with each other but differ from a broken pairing.
        let x = Tensor::vector(vec![0.5_f64, -0.2]);
        let analytic = analytic_grads(&[x.clone()], |tape, vars| {
            let t = tape.tanh(vars[0])?;
            tape.sum(t)
        })
        .unwrap();
        let numeric = numeric_grads(&[x], 1e-5, |tape, vars| {
            let s = tape.sigmoid(vars[0])?;
            tape.sum(s)
        })
        .unwrap();
        assert!(max_rel_err(&analytic, &numeric, 1e-7) > 1e-2);
    }
}
