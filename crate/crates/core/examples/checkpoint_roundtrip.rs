//! Builds a model, stores it, reloads it and embeds the same images with
//! both copies.

use btnet::data::{synth_dataset, SynthConfig};
use btnet::model::{build_trunk, BTNetModel, Checkpoint, ModelSpec};
use btnet::resample::resize_bilinear;
use btnet::Result;

fn main() -> Result<()> {
    let model = BTNetModel::from_trunk(build_trunk(&ModelSpec::desk(), 11)?)?;
    let path = std::env::temp_dir().join("btnet_example.btnt");
    model.to_checkpoint().save(&path)?;
    let loaded = BTNetModel::from_checkpoint(&Checkpoint::load(&path)?)?;

    let data = synth_dataset(&SynthConfig::new(2, 2, 32, 5))?;
    let low = data.images.iter().map(|i| resize_bilinear(i, 8, 8)).collect::<Result<Vec<_>>>()?;
    let (a, b) = (model.embed(&low, 8)?, loaded.embed(&low, 8)?);
    println!("checkpoint {} bytes at {}", std::fs::metadata(&path)?.len(), path.display());
    println!("embeddings identical after reload: {}", a == b);
    std::fs::remove_file(&path)?;
    Ok(())
}
