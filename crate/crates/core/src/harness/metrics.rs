use crate::error::{Result, SqError};
use crate::matrix::{relative_frobenius, Matrix};

/// `‖A·(Ŵ − W)‖_F / ‖A·W‖_F`.
pub fn relative_output_error(a_eval: &Matrix, w_ref: &Matrix, w_hat: &Matrix) -> Result<f64> {
    let y_ref = a_eval.matmul(w_ref)?;
    let denom = y_ref.frobenius_norm();
    if denom == 0.0 {
        return Err(SqError::Numerical("reference output is all zero".into()));
    }
    let y_diff = a_eval.matmul(&w_hat.sub(w_ref)?)?;
    Ok(y_diff.frobenius_norm() / denom)
}

/// `‖X̂ − X‖_F / ‖X‖_F`.
pub fn relative_reconstruction_error(reference: &Matrix, approx: &Matrix) -> Result<f64> {
    relative_frobenius(reference, approx)
}
