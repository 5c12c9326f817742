//! Reverse-mode gradients of a tiny conv + linear network, checked against
//! a central difference on one weight.

use btnet::rng::substream;
use btnet::{Graph, Result, Tensor, Var};
use rand::Rng;

fn loss(g: &mut Graph<f64>, x: &Tensor<f64>, w: &Tensor<f64>, fc: &Tensor<f64>) -> Result<(Var, Var)> {
    let xv = g.constant(x.clone())?;
    let wv = g.param(w, true)?;
    let fv = g.param(fc, true)?;
    let h = g.conv2d(xv, wv, None, 1, 1)?;
    let h = g.relu(h)?;
    let h = g.flatten(h)?;
    let y = g.linear(h, fv, None)?;
    let y = g.l2_normalize(y)?;
    let target = g.constant(Tensor::from_fn(&[2, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }))?;
    Ok((g.mse(y, target)?, wv))
}

fn main() -> Result<()> {
    let mut rng = substream(7, "example.autodiff");
    let x = Tensor::<f64>::from_fn(&[2, 1, 4, 4], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |_| rng.random_range(-1.0..1.0));
    let fc = Tensor::<f64>::from_fn(&[3, 32], |_| rng.random_range(-0.3..0.3));

    let mut g = Graph::<f64>::new();
    let (l, wv) = loss(&mut g, &x, &w, &fc)?;
    g.backward(l)?;
    let analytic = g.grad(wv).expect("weight takes part in the loss")[4];

    let eps = 1e-5;
    let at = |delta: f64| -> Result<f64> {
        let mut shifted = w.clone();
        shifted.data_mut()[4] += delta;
        let mut g = Graph::<f64>::new();
        let (l, _) = loss(&mut g, &x, &shifted, &fc)?;
        Ok(g.scalar(l))
    };
    let numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
    println!("loss {:.6}", g.scalar(l));
    println!("dL/dw[4] analytic {analytic:.9} numeric {numeric:.9}");
    Ok(())
}
