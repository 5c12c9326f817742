//! End-to-end pipelines behind `btnet reproduce`.

pub mod desk;
mod protocol;
pub mod table1;

pub use protocol::{identify, parse_setting, Embedder, PairProtocol, Routed, AUC_GRID};
