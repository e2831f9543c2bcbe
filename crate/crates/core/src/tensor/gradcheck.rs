use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Compares the autodiff gradient of `f` at `point` against central finite
/// differences with step `eps`.
///
/// Returns the largest `|autodiff − fd| / max(1, |fd|)` over coordinates.
pub fn grad_check<S, F>(f: F, point: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(&point.clone().with_grad(true));
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).expect("leaf requires grad").to_vec();

    let eval = |data: Vec<S>| -> Result<S> {
        let mut g = Graph::inference();
        let x = g.leaf(&Tensor::new(point.shape(), data)?);
        let y = f(&mut g, x)?;
        Ok(g.scalar(y))
    };

    let two = S::of(2.0);
    let mut worst = S::zero();
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (two * eps);
        let err = (analytic[i] - fd).abs() / S::one().max(fd.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
