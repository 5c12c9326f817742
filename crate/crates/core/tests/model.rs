use std::collections::BTreeMap;

use btnet::image::Image;
use btnet::model::{build_trunk, param_breakdown, BTNetModel, Binder, Checkpoint, ModelSpec};
use btnet::rng::substream;
use btnet::{Graph, Tensor};
use rand::Rng;

fn arrays(model: &BTNetModel) -> BTreeMap<String, Vec<u32>> {
    let mut out = BTreeMap::new();
    model.visit(&mut |name, _, data| {
        out.insert(name.to_string(), data.iter().map(|v| v.to_bits()).collect());
    });
    out
}

fn batch(n: usize, r: usize, seed: u64) -> Tensor {
    let mut rng = substream(seed, "test.batch");
    Tensor::from_fn(&[n, 3, r, r], |_| rng.random_range(0.0..1.0))
}

fn desk_model() -> BTNetModel {
    BTNetModel::from_trunk(build_trunk(&ModelSpec::desk_compact(), 11).unwrap()).unwrap()
}

#[test]
fn branch_outputs_match_tap_shapes() {
    let model = desk_model();
    for (&r, tap) in model.spec().tap_points().unwrap().iter() {
        let mut g = Graph::new();
        let x = g.constant(batch(2, r, r as u64)).unwrap();
        let out = model.forward_infer(&mut g, x, r, &mut Binder::frozen()).unwrap();
        assert_eq!(g.shape(out.feature), [2, tap.channels, r, r]);
        assert_eq!(g.shape(out.embedding), [2, model.spec().embedding_dim]);
        for row in g.value(out.embedding).chunks(model.spec().embedding_dim) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn training_at_one_resolution_touches_only_its_bank() {
    for r in [4, 8, 16, 32] {
        let mut model = desk_model();
        let before = arrays(&model);
        let mut g = Graph::new();
        let x = g.constant(batch(4, r, 7)).unwrap();
        model.forward_train(&mut g, x, r, &mut Binder::frozen()).unwrap();
        let after = arrays(&model);
        let changed: Vec<&String> = after.keys().filter(|k| before[*k] != after[*k]).collect();
        assert!(!changed.is_empty(), "r={r}: running statistics did not move");
        let own_bank = format!("trunk.bn{r}.");
        let own_branch = format!("branch{r}.");
        for name in changed {
            assert!(name.starts_with(&own_bank) || name.starts_with(&own_branch), "r={r} changed {name}");
            assert!(name.ends_with("running_mean") || name.ends_with("running_var"), "{name}");
        }
    }
}

#[test]
fn convolution_weights_are_stored_once() {
    let model = desk_model();
    let names: Vec<String> = arrays(&model).into_keys().collect();
    let trunk_convs: Vec<&String> = names.iter().filter(|n| n.starts_with("trunk.") && n.contains(".conv")).collect();
    // no resolution tag on any trunk weight
    assert!(trunk_convs.iter().all(|n| n.starts_with("trunk.u")));
    assert!(!names.iter().any(|n| n.starts_with("trunk.bn") && n.contains(".conv")));
}

#[test]
fn storage_accounting_balances() {
    let model = desk_model();
    for r in [4, 8, 16, 32] {
        let b = param_breakdown(&model, r).unwrap();
        // a branch mirrors the trunk prefix and its bank mirrors the suffix BN
        assert_eq!(b.branch_plus_bn() + b.shared_weights, b.full_finetune, "r={r}");
    }
}

#[test]
fn same_seed_builds_identical_models() {
    let spec = ModelSpec::desk();
    let a = build_trunk(&spec, 5).unwrap().to_checkpoint().to_bytes().unwrap();
    let b = build_trunk(&spec, 5).unwrap().to_checkpoint().to_bytes().unwrap();
    let c = build_trunk(&spec, 6).unwrap().to_checkpoint().to_bytes().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn checkpoint_bytes_round_trip() {
    let model = desk_model();
    let bytes = model.to_checkpoint().to_bytes().unwrap();
    let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap();
    assert_eq!(bytes, again);
    let rebuilt = BTNetModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(rebuilt.to_checkpoint().to_bytes().unwrap(), bytes);
}

#[test]
fn embeddings_agree_between_image_and_tensor_paths() {
    let model = desk_model();
    let mut rng = substream(9, "test.images");
    let images: Vec<Image> =
        (0..3).map(|_| Image::from_fn(8, 8, 3, |_, _, _| rng.random_range(0.0..1.0)).unwrap()).collect();
    let via_images = model.embed(&images, 8).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Image::batch(&images).unwrap()).unwrap();
    let out = model.forward_infer(&mut g, x, 8, &mut Binder::frozen()).unwrap();
    let flat: Vec<f32> = via_images.concat();
    assert_eq!(flat, g.value(out.embedding));
}
