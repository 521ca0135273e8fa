use crate::autodiff::{CustomBackward, Graph, Tensor, Var};
use crate::error::{Error, Result};

struct StraightThrough;

impl CustomBackward for StraightThrough {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad_out.to_vec()), None]
    }
}

/// Straight-through substitution: the forward value is `ground_truth`, the
/// backward pass hands the upstream gradient to `pred` unchanged.
/// `ground_truth` never receives a gradient.
pub fn ste_replace(g: &mut Graph, pred: Var, ground_truth: Var) -> Result<Var> {
    let (tp, tg) = (g.value(pred), g.value(ground_truth));
    if tp.shape() != tg.shape() {
        return Err(Error::Shape {
            op: "ste_replace",
            lhs: tp.shape().to_vec(),
            rhs: tg.shape().to_vec(),
        });
    }
    let out = tg.clone();
    Ok(g.custom(&[pred, ground_truth], out, Box::new(StraightThrough)))
}
