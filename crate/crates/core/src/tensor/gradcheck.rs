use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` records its computation on the supplied tape given one leaf per
/// input. Returns the maximum over all input elements of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]);
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[which].data_mut()[e] = orig + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[e] = orig - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.map_or(0.0, |g| g.data()[e]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
