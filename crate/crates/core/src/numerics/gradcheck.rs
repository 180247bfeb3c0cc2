use super::{NumericsError, Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input, element)` with the largest relative error.
    pub worst: Option<(usize, usize)>,
}

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradient of the scalar produced by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<Fwd>(inputs: &[Tensor<f64>], h: f64, f: Fwd) -> Result<GradReport, NumericsError>
where
    Fwd: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in 0..inputs[k].numel() {
            let orig = inputs[k].data()[e];
            probe[k].data_mut()[e] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[e] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = rel_err(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((k, e));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
