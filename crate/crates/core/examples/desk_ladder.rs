//! Baselines and the branch-training ladder on synthetic identities.
//!
//! `cargo run --release --example desk_ladder` runs a seconds-long smoke
//! plan; pass `full` for the desk plan (minutes on one core) and an optional
//! directory to cache checkpoints in.

use btnet::experiments::desk::{accuracy_csv, baseline_table, baselines, ladder, ladder_checks, ladder_csv, ArtifactStore, DeskPlan};
use btnet::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let plan = if args.first().map(String::as_str) == Some("full") { DeskPlan::standard(1) } else { DeskPlan::smoke(1) };
    let store = args.get(1).map(ArtifactStore::new).unwrap_or_else(ArtifactStore::in_memory);
    let proto = plan.protocol()?;
    let base = baselines(&plan, &store)?;
    print!("{}", accuracy_csv(&baseline_table(&plan, &base, &proto)?));
    let rungs = ladder(&plan, &base.mr, &proto, &store)?;
    print!("{}", ladder_csv(&rungs));
    for (check, ok) in ladder_checks(&rungs) {
        println!("{} {check}", if ok { "ok  " } else { "miss" });
    }
    Ok(())
}
