//! Relative gains recomputed from the published accuracy cells.

use btnet::experiments::table1::{gains_csv, recompute_gains};
use btnet::Result;

fn main() -> Result<()> {
    print!("{}", gains_csv(&recompute_gains()?));
    Ok(())
}
