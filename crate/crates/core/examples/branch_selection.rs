//! Which branch each selection strategy picks for a few native sizes.

use btnet::select::{Allocation, Indicator, SelectionPolicy};
use btnet::Result;

fn main() -> Result<()> {
    let branches = vec![7, 14, 28, 112];
    let sizes = [(6, 5), (24, 20), (40, 40), (150, 130)];
    print!("strategy  ");
    for (w, h) in sizes {
        print!("{:>9}", format!("{w}x{h}"));
    }
    println!();
    for ind in Indicator::ALL {
        for alloc in Allocation::ALL {
            let policy = SelectionPolicy::new(ind, alloc, branches.clone())?;
            print!("{:<10}", format!("{ind}/{alloc}"));
            for (w, h) in sizes {
                print!("{:>9}", policy.select(h, w)?);
            }
            println!();
        }
    }
    Ok(())
}
