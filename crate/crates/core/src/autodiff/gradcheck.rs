use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients with central finite differences.
///
/// `f` maps the recorded inputs to a scalar. Returns the largest elementwise
/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)` over all inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for e in 0..inputs[idx].len() {
            let orig = inputs[idx].data()[e];
            probe[idx].data_mut()[e] = orig + h;
            let plus = eval(&probe)?;
            probe[idx].data_mut()[e] = orig - h;
            let minus = eval(&probe)?;
            probe[idx].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let ad = analytic.data()[e];
            worst = worst.max(relative_error(ad, fd));
        }
    }
    Ok(worst)
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check closure must return a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
