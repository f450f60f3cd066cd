use super::{check_len, NeuralError};

/// Mean absolute error and its gradient with respect to `x_hat`, using
/// `sign(0) = 0`.
pub fn mae_loss(x_hat: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>), NeuralError> {
    check_len("mae_loss", x.len(), x_hat.len())?;
    if x.is_empty() {
        return Err(NeuralError::EmptyVector);
    }
    let n = x.len() as f64;
    let sum = super::accurate_sum(x_hat.iter().zip(x).map(|(a, b)| (a - b).abs()));
    let grad = x_hat
        .iter()
        .zip(x)
        .map(|(a, b)| {
            let r = a - b;
            if r > 0.0 {
                1.0 / n
            } else if r < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}
