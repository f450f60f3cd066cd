use super::{NeuralError, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the analytic gradient `analytic` (same structure as `model`)
/// against central finite differences of `loss` for every parameter.
/// Relative error is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn gradient_check<M, F>(model: &M, analytic: &M, eps: f64, loss: F) -> Result<GradCheckReport, NeuralError>
where
    M: Parameters + Clone,
    F: Fn(&M) -> Result<f64, NeuralError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NeuralError::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    if !model.all_finite() {
        return Err(NeuralError::NonFiniteValue("model parameters".into()));
    }
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(_, m)| m.as_slice().to_vec())
        .collect();
    if grads.len() != names.len() {
        return Err(NeuralError::ShapeMismatch {
            context: "gradient tensors",
            expected: names.len(),
            found: grads.len(),
        });
    }
    let eval = |m: &M| -> Result<f64, NeuralError> {
        let v = loss(m)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NeuralError::NonFiniteValue("loss evaluation".into()))
        }
    };
    eval(model)?;

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (t, name) in names.iter().enumerate() {
        let n = grads[t].len();
        for i in 0..n {
            let original = probe.tensors_mut()[t].as_slice()[i];
            probe.tensors_mut()[t].as_mut_slice()[i] = original + eps;
            let plus = eval(&probe)?;
            probe.tensors_mut()[t].as_mut_slice()[i] = original - eps;
            let minus = eval(&probe)?;
            probe.tensors_mut()[t].as_mut_slice()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[t][i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_tensor = name.clone();
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
