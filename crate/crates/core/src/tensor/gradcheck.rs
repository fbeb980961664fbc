use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error.
///
/// Relative error per entry is `|a − n| / max(|a|, |n|, floor)`, with
/// `n = (f(x + ε·eᵢ) − f(x − ε·eᵢ)) / 2ε` and `floor = max(1e-8, 1e-6·|f(x)|)`.
/// The floor sits well above the rounding noise of the central difference,
/// about `|f(x)|·1e-16/ε`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let eval = |input: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input, false);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(Error::Contract("grad_check function must be scalar".into()));
        }
        let y = value.item();
        if !y.is_finite() {
            return Err(Error::Evaluation(format!("function value is {y}")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let y0 = tape.value(out);
    if y0.numel() != 1 {
        return Err(Error::Contract("grad_check function must be scalar".into()));
    }
    if !y0.item().is_finite() {
        return Err(Error::Evaluation(format!("function value is {}", y0.item())));
    }
    let analytic = if tape.requires_grad(out) {
        tape.backward(out)?.get_or_zeros(v)
    } else {
        Tensor::zeros(x.shape())
    };

    let floor = noise_floor(y0.item());
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Denominator floor of the relative error for a function value `y`.
pub fn noise_floor(y: f64) -> f64 {
    (1e-6 * y.abs()).max(1e-8)
}
