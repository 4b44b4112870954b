use super::TrainError;
use crate::autograd::{Tape, Var};
use crate::tensor::Result as TensorResult;

/// Mean of squared differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TrainError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Tape version: mean over every entry of `(pred − target)²`, which for a
/// `[B×6]` batch is the mean over samples of the per-sample loss.
pub fn mse_on_tape(tape: &mut Tape, pred: Var, target: Var) -> TensorResult<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(mse_loss(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert!((mse_loss(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).unwrap() - 0.25).abs() < 1e-15);
        let v = mse_loss(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0], &[0.0; 6]).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
        assert!(matches!(mse_loss(&[1.0], &[1.0, 2.0]), Err(TrainError::LengthMismatch { .. })));
    }
}
