//! Central finite-difference oracle for gradient checks.
//!
//! Deliberately independent of the reverse pass: it only ever calls the
//! forward builder, perturbing one input entry at a time. Intended for use
//! from tests; 64-bit precision only.

use crate::error::CoreError;
use crate::num::linalg::Matrix;
use crate::num::tape::{Tape, VarId};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Build a scalar loss from leaves that were inserted for `inputs`, in order.
pub type LossBuilder = dyn Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId, CoreError>;

fn forward_value(
    inputs: &[Matrix<f64>],
    build: &impl Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId, CoreError>,
) -> Result<f64, CoreError> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    Ok(tape.value(loss).get(0, 0))
}

/// Compare reverse-mode gradients of `build` against central differences for
/// every entry of every input. Relative error above `FD_REL_TOL` fails.
pub fn check_gradients(
    inputs: &[Matrix<f64>],
    build: impl Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId, CoreError>,
) -> Result<(), String> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &ids).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[which])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        for entry in 0..input.data().len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[entry] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[entry] -= FD_STEP;
            let fp = forward_value(&plus, &build).map_err(|e| e.to_string())?;
            let fm = forward_value(&minus, &build).map_err(|e| e.to_string())?;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.data()[entry];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / denom;
            if rel > FD_REL_TOL {
                return Err(format!(
                    "gradient mismatch: input {which} entry {entry}: analytic {a}, finite-difference {numeric}, rel {rel:.3e}"
                ));
            }
        }
    }
    Ok(())
}
