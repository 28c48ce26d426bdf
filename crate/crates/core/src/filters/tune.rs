use crate::error::{Error, Result};

/// `{10^k : k = −4..1}`.
pub fn default_q2_grid() -> Vec<f64> {
    (-4..=1).map(|k| 10f64.powi(k)).collect()
}

/// Grid search: the candidate with the lowest validation error, ties going
/// to the smaller variance.
pub fn tune_q2<F>(candidates: &[f64], mut validation_mse: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::Config("empty process-noise grid".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (sorted[0], f64::INFINITY);
    for &q2 in &sorted {
        let mse = validation_mse(q2)?;
        log::debug!("q² = {q2:e}: validation MSE {mse:.6}");
        if mse < best.1 {
            best = (q2, mse);
        }
    }
    Ok(best.0)
}
