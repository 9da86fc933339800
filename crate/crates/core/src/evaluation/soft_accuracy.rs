use super::EvalError;

/// VQA soft accuracy: the mean over leave-one-out subsets of the annotations
/// of `min(1, matches / 3)`. With a single annotation the full list is used.
///
/// Inputs must already be normalized. The score is formed as one integer
/// ratio so it does not depend on summation order.
pub fn vqa_soft_accuracy<S: AsRef<str>>(predicted: &str, ground_truth: &[S]) -> Result<f64, EvalError> {
    let n = ground_truth.len();
    if n == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    let m = ground_truth.iter().filter(|g| g.as_ref() == predicted).count();
    if n < 2 {
        return Ok(m.min(3) as f64 / 3.0);
    }
    // Leaving out a matching annotation leaves m-1 matches; leaving out any
    // other leaves m.
    let numerator = m * (m.saturating_sub(1)).min(3) + (n - m) * m.min(3);
    Ok(numerator as f64 / (3 * n) as f64)
}
