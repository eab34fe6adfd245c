//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Scalar function of a parameter list, expressed as a tape program.
pub trait TapeFn {
    fn eval(&self, tape: &mut Tape<f64>, params: &[Var]) -> Result<Var>;
}

impl<F> TapeFn for F
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape<f64>, params: &[Var]) -> Result<Var> {
        self(tape, params)
    }
}

fn eval_value(f: &impl TapeFn, params: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Argument("grad_check: function must be scalar-valued".into()));
    }
    let v = tape.value(out)[0];
    if !v.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite function value".into()));
    }
    Ok(v)
}

/// Max over all parameter entries of the relative error between the analytic
/// gradient and a central finite difference with the given step.
pub fn grad_check(f: &impl TapeFn, params: &[Tensor<f64>], step: f64) -> Result<f64> {
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.input(p.clone(), true)).collect();
    let out = f.eval(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Argument("grad_check: function must be scalar-valued".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let fp = eval_value(f, &work)?;
            work[pi].data_mut()[ei] = orig - step;
            let fm = eval_value(f, &work)?;
            work[pi].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let an = analytic[pi][ei];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        // f(x) = x^2 at x = 3: analytic 6
        let f = |tape: &mut Tape<f64>, p: &[Var]| {
            let sq = tape.mul(p[0], p[0])?;
            Ok(tape.sum_all(sq))
        };
        let params = [Tensor::scalar(3.0)];
        let err = grad_check(&f, &params, 1e-4).unwrap();
        assert!(err < 1e-10, "rel err {err}");
    }

    #[test]
    fn non_finite_rejected() {
        let f = |tape: &mut Tape<f64>, p: &[Var]| {
            let y = tape.scale(p[0], f64::INFINITY);
            Ok(tape.sum_all(y))
        };
        let params = [Tensor::scalar(1.0)];
        assert!(grad_check(&f, &params, 1e-4).is_err());
    }
}
