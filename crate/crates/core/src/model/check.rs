//! Finite-difference validation of whole-model gradients.

use super::forward::{ar_loss, forward, ForwardOptions};
use super::{Result, SimModel};
use crate::tensor::gradcheck::{check_five_point, GradcheckReport};
use crate::tensor::{Graph, Tensor, TensorError};

/// Which objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `MSE(p̂, target)` through the regression head.
    Supervised,
    /// Next-patch MSE through the decoder.
    Autoregressive,
}

/// Check analytic gradients of `objective` against five-point differences
/// for every parameter tensor, probing up to `per_tensor` entries of each.
pub fn gradcheck_model(
    model: &SimModel,
    left: &Tensor,
    right: &Tensor,
    target: f64,
    objective: Objective,
    per_tensor: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let inputs: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| p.value.as_ref().clone())
        .collect();
    let target = Tensor::full([model.config.head_out], target);
    let err = |e: super::ModelError| TensorError::Invalid {
        op: "model",
        msg: e.to_string(),
    };
    let report = check_five_point(
        &inputs,
        |t, vars| {
            let g = &t;
            let l = g.constant(left.clone());
            let r = g.constant(right.clone());
            let opts = ForwardOptions::default();
            match objective {
                Objective::Supervised => {
                    let y = forward(&t, model, vars, &l, &r, opts).map_err(err)?;
                    g.mse(&y, &g.constant(target.clone()))
                }
                Objective::Autoregressive => ar_loss(&t, model, vars, &l, &r, opts).map_err(err),
            }
        },
        1e-3,
        per_tensor,
        seed,
    )?;
    Ok(report)
}
