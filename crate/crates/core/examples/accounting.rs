//! Storage and FLOP cost of every branch for the desk and full-size models.

use btnet::model::{build_trunk, count_flops, flop_layers, param_breakdown, BTNetModel, ModelSpec};
use btnet::Result;

fn main() -> Result<()> {
    for (name, spec) in [("desk", ModelSpec::desk()), ("paper_scale", ModelSpec::paper_scale())] {
        let model = BTNetModel::from_trunk(build_trunk(&spec, 0)?)?;
        println!("{name}: canonical {}", spec.canonical_size);
        println!("  r  branch+bn  finetune  share   flops");
        for &r in &spec.branch_resolutions {
            let p = param_breakdown(&model, r)?;
            println!(
                "{r:>3} {:>10} {:>9} {:>5.1}% {:>9}",
                p.branch_plus_bn(),
                p.full_finetune,
                100.0 * p.fraction(),
                count_flops(&model, r)?
            );
        }
    }
    let r = ModelSpec::desk().branch_resolutions[0];
    println!("desk layers at r={r}:");
    for l in flop_layers(&ModelSpec::desk(), r)? {
        println!("  {:<24} {}", l.name, l.flops);
    }
    Ok(())
}
