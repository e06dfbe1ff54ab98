use crate::autodiff::{ParamSet, Tape, Tensor, TensorError};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compare the reverse-mode gradient of `f` with central differences
/// `(f(p+h) − f(p−h)) / 2h`, coordinate by coordinate.
///
/// `f` must bind its parameters through [`Tape::bind`] (or
/// [`Tape::param`] with the set's names) and return a scalar.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamSet<f64>,
    step: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamSet<f64>) -> Result<Tensor<'t, f64>, TensorError>,
{
    let tape = Tape::new();
    let loss = f(&tape, params)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &ParamSet<f64>| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let out = f(&tape, p)?;
        out.item()
            .ok_or_else(|| TensorError::NonScalarLoss(out.shape()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let analytic = grads
            .param(&name)
            .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?
            .clone();
        for i in 0..analytic.len() {
            let original = params.get(&name).expect("present").data()[i];
            probe.get_mut(&name).expect("present").data_mut()[i] = original + step;
            let up = eval(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = original - step;
            let down = eval(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = original;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NdArray;

    #[test]
    fn sum_is_exact() {
        let mut p = ParamSet::new();
        p.insert("p", NdArray::from_fn(&[5], |i| i as f64 - 2.0))
            .unwrap();
        let r = finite_diff_check(|t, p| Ok(t.bind(p).get("p")?.sum()), &p, 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert_eq!(r.coordinates, 5);
    }

    #[test]
    fn mean_of_exp() {
        let mut p = ParamSet::new();
        p.insert("p", NdArray::from_fn(&[2, 3], |i| (i as f64 * 0.37).sin()))
            .unwrap();
        let r = finite_diff_check(|t, p| Ok(t.bind(p).get("p")?.exp().mean()), &p, 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
