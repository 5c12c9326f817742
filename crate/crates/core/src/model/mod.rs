//! Trunk, branches, resolution-aware BN banks, accounting and checkpoints.
//!
//! Parameter names follow one scheme throughout:
//! `trunk.u{i}.conv{j}.weight`, `trunk.bn{r}.u{i}.bn{j}.{gamma,beta,...}`,
//! `trunk.fc.{weight,bias}`, `branch{r}.u{i}.conv{j}.weight`,
//! `branch{r}.u{i}.bn{j}.*` and `head.weight`.

pub mod accounting;
pub mod branch;
pub mod checkpoint;
pub mod layers;
pub mod spec;
pub mod trunk;

pub use accounting::{count_flops, count_params, flop_layers, param_breakdown, LayerFlops, LayerKind, ParamBreakdown, ParamMode};
pub use branch::{build_branch, BTNetModel, BranchNet, BtOutput};
pub use checkpoint::Checkpoint;
pub use layers::{Binder, BnParams, Conv, Linear, UnitBns, UnitConvs};
pub use spec::{ModelSpec, StageSpec, StemSpec, TapPoint, UnitKind, UnitSpec};
pub use trunk::{build_trunk, TrunkModel};
