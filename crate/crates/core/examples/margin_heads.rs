//! Target logits of each margin head for the same cosines.

use btnet::losses::{cos_logits, margin_logits, MarginKind, MarginParams};
use btnet::{Graph, Result, Tensor};

fn main() -> Result<()> {
    // two unit embeddings against three class directions
    let emb = Tensor::new(&[2, 3], vec![0.8, 0.6, 0.0, 0.0, 0.6, 0.8])?;
    let weight = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?;
    let labels = [0, 2];
    for kind in [MarginKind::NormFace, MarginKind::CosFace, MarginKind::ArcFace, MarginKind::Curricular] {
        let m = if kind == MarginKind::CosFace { 0.35 } else { 0.5 };
        let p = MarginParams { kind, s: 64.0, m, t: 0.2 };
        let mut g = Graph::<f64>::new();
        let (e, w) = (g.constant(emb.clone())?, g.constant(weight.clone())?);
        let cos = cos_logits(&mut g, e, w)?;
        let logits = margin_logits(&mut g, cos, &labels, &p)?;
        let v = g.value(logits);
        println!("{:<10} sample0 {:>8.3?}  sample1 {:>8.3?}", kind.to_string(), &v[0..3], &v[3..6]);
    }
    Ok(())
}
