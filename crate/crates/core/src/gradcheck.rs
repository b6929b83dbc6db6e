//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Builds the loss for `params` on a fresh graph and compares reverse-mode
/// gradients with central differences of step `eps`.
///
/// Returns the max over all parameter entries of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(params: &[Tensor], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.parameter(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok((g, ids, loss))
    };

    let (g, ids, loss) = eval(params)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(id)).collect();

    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..params[p].len() {
            let original = params[p].data()[i];
            probe[p].data_mut()[i] = original + eps;
            let (g, _, l) = eval(&probe)?;
            let plus = g.value(l).item()?;
            probe[p].data_mut()[i] = original - eps;
            let (g, _, l) = eval(&probe)?;
            let minus = g.value(l).item()?;
            probe[p].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
