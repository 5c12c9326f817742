//! Interpolation-error bound against resolution on a generated texture
//! corpus, plus the closed-form `x^2 y^2` case.

use btnet::data::texture_corpus;
use btnet::resample::{error_curve, error_upper_bound_field, BoundAggregation, Field};
use btnet::Result;

fn main() -> Result<()> {
    let corpus = texture_corpus(24, 112, 0)?;
    let curve = error_curve(&corpus, &[7, 14, 28, 56, 112], 112)?;
    print!("{}", curve.to_csv());

    let f = Field::from_fn(8, 8, |y, x| x * x * y * y);
    println!("x^2 y^2 bound: {} (4/64 = {})", error_upper_bound_field(&f, BoundAggregation::Max)?, 4.0 / 64.0);
    Ok(())
}
