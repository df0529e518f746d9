use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Mean binary cross-entropy of logits `[N, 1]` against `{0, 1}` targets,
/// in the overflow-free form `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_loss<T: Scalar>(g: &Graph<'_, T>, logits: &Var<T>, labels: &[T]) -> Result<Var<T>> {
    let d = logits.dims();
    if d.len() != 2 || d[1] != 1 || d[0] != labels.len() || labels.is_empty() {
        return Err(shape_err!("bce_loss expects [{}, 1] logits, got {:?}", labels.len(), d));
    }
    if let Some(y) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(Error::Data(format!("label {y} is not 0 or 1")));
    }
    let n = labels.len() as f64;
    let z: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = labels.iter().map(|v| v.as_f64()).collect();
    let total: f64 = z.iter().zip(&y).map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()).sum();
    let out = Tensor::scalar(T::cast(total / n));
    Ok(g.record(out, &[logits], move |gout| {
        let s = gout[0].as_f64() / n;
        let dz = z.iter().zip(&y).map(|(&z, &y)| T::cast(s * (sigmoid(z) - y))).collect();
        vec![Some(dz)]
    }))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
