//! Verification accuracy, TAR@FAR, ROC-AUC and TPIR@FPIR on noisy
//! embeddings of random identities.

use btnet::eval::{cosine, roc_auc, tar_at_far, verification_accuracy, IdentificationScores, Probe, ScoredPair};
use btnet::rng::substream;
use btnet::Result;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> Result<()> {
    let mut rng = substream(3, "example.metrics");
    let (ids, dim) = (40, 16);
    let centers: Vec<Vec<f32>> = (0..ids).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let mut sample = |id: usize| -> Vec<f32> { centers[id].iter().map(|c| c + 0.8 * rng.sample::<f32, _>(StandardNormal)).collect() };
    let a: Vec<Vec<f32>> = (0..ids).map(&mut sample).collect();
    let b: Vec<Vec<f32>> = (0..ids).map(&mut sample).collect();

    let mut pairs = Vec::new();
    for i in 0..ids {
        for j in 0..ids {
            pairs.push(ScoredPair { score: cosine(&a[i], &b[j]), same: i == j });
        }
    }
    let genuine: Vec<f64> = pairs.iter().filter(|p| p.same).map(|p| p.score).collect();
    let impostor: Vec<f64> = pairs.iter().filter(|p| !p.same).map(|p| p.score).collect();
    println!("accuracy      {:.2}", verification_accuracy(&pairs)?);
    println!("TAR@FAR=1e-2  {:.3}", tar_at_far(&genuine, &impostor, 1e-2)?);
    println!("ROC-AUC       {:.4}", roc_auc(&genuine, &impostor)?);

    // the first half of the identities are enrolled; the rest probe as non-mated
    let gallery: Vec<Probe> = (0..ids / 2).map(|i| Probe { embedding: &a[i], identity: i }).collect();
    let mated: Vec<Probe> = (0..ids / 2).map(|i| Probe { embedding: &b[i], identity: i }).collect();
    let non_mated: Vec<&[f32]> = (ids / 2..ids).map(|i| b[i].as_slice()).collect();
    let scores = IdentificationScores::new(&mated, &non_mated, &gallery)?;
    for fpir in [0.05, 0.1, 0.3] {
        println!("TPIR@FPIR={fpir:<4} rank1 {:.3}", scores.tpir(1, fpir)?);
    }
    Ok(())
}
