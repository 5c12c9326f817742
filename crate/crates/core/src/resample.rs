//! Image resampling and the bilinear interpolation-error estimate.
//!
//! Bilinear interpolation between four unit-spaced samples errs by at most
//! `|f_xxyy| / 64` (the product of the two node polynomials is bounded by
//! `1/4` in each axis, and the Lagrange remainder carries a further `1/4`).
//! The mixed fourth derivative is estimated with the 3x3 difference stencil
//! `[1 -2 1; -2 4 -2; 1 -2 1]`, which is the outer product of two second
//! differences and so annihilates every `a xy + b x + c y + d`.

use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::image::Image;

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

// Exact at equal endpoints and never outside them.
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    (a + (b - a) * t).clamp(a.min(b), a.max(b))
}

/// Bilinear resize with half-pixel centers and edge-clamped sources.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("output size must be at least 1x1, got {out_h}x{out_w}"));
    }
    if out_h == img.height() && out_w == img.width() {
        return Ok(img.clone());
    }
    let ys: Vec<_> = (0..out_h).map(|y| source_coord(y, img.height(), out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| source_coord(x, img.width(), out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * img.channels());
    for c in 0..img.channels() {
        let p = img.plane(c);
        let w = img.width();
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(p[y0 * w + x0], p[y0 * w + x1], fx);
                let bottom = lerp(p[y1 * w + x0], p[y1 * w + x1], fx);
                data.push(lerp(top, bottom, fy));
            }
        }
    }
    Image::new(out_h, out_w, img.channels(), data)
}

/// Nearest-neighbour resize: source index `floor((i + 0.5) * in / out)`.
pub fn resize_nearest(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("output size must be at least 1x1, got {out_h}x{out_w}"));
    }
    let nearest = |i: usize, in_len: usize, out_len: usize| {
        ((((i as f64 + 0.5) * in_len as f64) / out_len as f64).floor() as usize).min(in_len - 1)
    };
    Image::from_fn(out_h, out_w, img.channels(), |c, y, x| {
        img.get(c, nearest(y, img.height(), out_h), nearest(x, img.width(), out_w))
    })
}

/// Down-sample to `r x r` and back up to the original size, both bilinear.
pub fn degrade(img: &Image, r: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if r == h && r == w {
        return Ok(img.clone());
    }
    resize_bilinear(&resize_bilinear(img, r, r)?, h, w)
}

/// An unclamped scalar field on the integer grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn from_fn(height: usize, width: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(x as f64, y as f64))
            .collect();
        Self { height, width, data }
    }

    /// The grayscale (channel-mean) intensity field of an image.
    pub fn from_image(img: &Image) -> Self {
        let g = img.to_gray();
        Self { height: g.height(), width: g.width(), data: g.data().iter().map(|&v| v as f64).collect() }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Valid-region correlation with `[1 -2 1; -2 4 -2; 1 -2 1]`; output is
/// `(H - 2) x (W - 2)`.
pub fn mixed_fourth_difference_field(f: &Field) -> Result<Field> {
    if f.height < 3 || f.width < 3 {
        return Err(Error::ImageTooSmall(format!("{}x{} is below the 3x3 stencil", f.height, f.width)));
    }
    const K: [f64; 3] = [1.0, -2.0, 1.0];
    let (oh, ow) = (f.height - 2, f.width - 2);
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (dy, ky) in K.iter().enumerate() {
                for (dx, kx) in K.iter().enumerate() {
                    acc += ky * kx * f.get(y + dy, x + dx);
                }
            }
            data.push(acc);
        }
    }
    Ok(Field { height: oh, width: ow, data })
}

pub fn mixed_fourth_difference(img: &Image) -> Result<Field> {
    mixed_fourth_difference_field(&Field::from_image(img))
}

/// How per-pixel bounds are reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundAggregation {
    #[default]
    Mean,
    Max,
}

pub fn error_upper_bound_field(f: &Field, agg: BoundAggregation) -> Result<f64> {
    let d = mixed_fourth_difference_field(f)?;
    let per_pixel = d.data.iter().map(|v| v.abs() / 64.0);
    Ok(match agg {
        BoundAggregation::Mean => per_pixel.sum::<f64>() / d.data.len() as f64,
        BoundAggregation::Max => per_pixel.fold(0.0, f64::max),
    })
}

/// Mean over the valid region of `|mixed fourth difference| / 64`.
pub fn error_upper_bound(img: &Image) -> Result<f64> {
    error_upper_bound_field(&Field::from_image(img), BoundAggregation::Mean)
}

/// Average estimated bound per resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub resolutions: Vec<usize>,
    pub mean_bound: Vec<f64>,
    pub n_images: usize,
}

impl ErrorCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("resolution,mean_bound,n_images\n");
        for (r, b) in self.resolutions.iter().zip(&self.mean_bound) {
            writeln!(out, "{r},{b},{}", self.n_images).unwrap();
        }
        out
    }

    pub fn bound_at(&self, r: usize) -> Option<f64> {
        self.resolutions.iter().position(|&x| x == r).map(|i| self.mean_bound[i])
    }
}

/// Down-samples each canonical-size image to every resolution and averages
/// the bound of the low-resolution grid, which is what a later up-sampling
/// interpolates from.
pub fn error_curve(images: &[Image], resolutions: &[usize], canonical: usize) -> Result<ErrorCurve> {
    error_curve_with(images, resolutions, canonical, BoundAggregation::Mean)
}

pub fn error_curve_with(
    images: &[Image],
    resolutions: &[usize],
    canonical: usize,
    agg: BoundAggregation,
) -> Result<ErrorCurve> {
    if images.is_empty() {
        return Err(invalid!("error curve needs at least one image"));
    }
    if resolutions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid!("resolutions must be strictly ascending: {resolutions:?}"));
    }
    if let Some(&r) = resolutions.iter().find(|&&r| r < 3) {
        return Err(Error::ImageTooSmall(format!("resolution {r} is below 3")));
    }
    if let Some(&r) = resolutions.iter().find(|&&r| r > canonical) {
        return Err(invalid!("resolution {r} exceeds canonical size {canonical}"));
    }
    if let Some(img) = images.iter().find(|i| i.height() != canonical || i.width() != canonical) {
        return Err(invalid!("image is {}x{}, expected canonical {canonical}x{canonical}", img.height(), img.width()));
    }
    let mut mean_bound = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let mut total = 0.0;
        for img in images {
            let low = resize_bilinear(img, r, r)?;
            total += error_upper_bound_field(&Field::from_image(&low), agg)?;
        }
        mean_bound.push(total / images.len() as f64);
    }
    Ok(ErrorCurve { resolutions: resolutions.to_vec(), mean_bound, n_images: images.len() })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn checker() -> Image {
        Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn same_size_and_constant_images_are_preserved() {
        let img = Image::from_fn(5, 7, 3, |c, y, x| ((c + y * x) % 5) as f32 / 4.0).unwrap();
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
        assert_eq!(resize_nearest(&img, 5, 7).unwrap(), img);
        let k = Image::constant(6, 6, 1, 0.37).unwrap();
        for (h, w) in [(1, 1), (3, 9), (13, 4)] {
            assert!(resize_bilinear(&k, h, w).unwrap().data().iter().all(|&v| v == 0.37));
            assert!(resize_nearest(&k, h, w).unwrap().data().iter().all(|&v| v == 0.37));
        }
    }

    #[test]
    fn bilinear_upsample_matches_hand_formula() {
        // Half-pixel source coordinate for a 2 -> 4 upsample:
        // s(i) = (i + 0.5) / 2 - 0.5 = {-0.25, 0.25, 0.75, 1.25}, clamped to [0, 1].
        let s = [0.0f32, 0.25, 0.75, 1.0];
        let src = [[0.0f32, 1.0], [1.0, 0.0]];
        let out = resize_bilinear(&checker(), 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (fy, fx) = (s[y], s[x]);
                let expected = src[0][0] * (1.0 - fy) * (1.0 - fx)
                    + src[0][1] * (1.0 - fy) * fx
                    + src[1][0] * fy * (1.0 - fx)
                    + src[1][1] * fy * fx;
                assert!((out.get(0, y, x) - expected).abs() < 1e-6, "({y},{x})");
            }
        }
        assert!((out.get(0, 1, 1) - 0.375).abs() < 1e-6);
    }

    #[test]
    fn nearest_upsample_replicates_blocks() {
        let out = resize_nearest(&checker(), 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.get(0, y, x), checker().get(0, y / 2, x / 2));
            }
        }
    }

    #[test]
    fn difference_operator_fixtures() {
        let zero = mixed_fourth_difference(&Image::constant(5, 6, 3, 0.4).unwrap()).unwrap();
        assert_eq!((zero.height, zero.width), (3, 4));
        assert!(zero.data.iter().all(|&v| v.abs() < 1e-12));

        let bilinear = Field::from_fn(8, 8, |x, y| x * y);
        assert!(mixed_fourth_difference_field(&bilinear).unwrap().data.iter().all(|&v| v == 0.0));

        let quartic = Field::from_fn(9, 7, |x, y| x * x * y * y);
        let d = mixed_fourth_difference_field(&quartic).unwrap();
        assert!(d.data.iter().all(|&v| v == 4.0));
        assert_eq!(error_upper_bound_field(&quartic, BoundAggregation::Mean).unwrap(), 4.0 / 64.0);
        assert_eq!(error_upper_bound_field(&quartic, BoundAggregation::Max).unwrap(), 4.0 / 64.0);
    }

    #[test]
    fn small_inputs_are_rejected() {
        let tiny = Image::constant(2, 5, 1, 0.0).unwrap();
        assert!(matches!(mixed_fourth_difference(&tiny), Err(Error::ImageTooSmall(_))));
        assert!(error_upper_bound(&tiny).is_err());
        let img = Image::constant(16, 16, 1, 0.5).unwrap();
        assert!(error_curve(std::slice::from_ref(&img), &[2, 8], 16).is_err());
        assert!(error_curve(std::slice::from_ref(&img), &[8, 4], 16).is_err());
        assert!(error_curve(&[img], &[8], 32).is_err());
    }

    #[test]
    fn constant_curve_is_zero_and_csv_has_header() {
        let img = Image::constant(32, 32, 3, 0.6).unwrap();
        let curve = error_curve(&[img], &[4, 8, 16], 32).unwrap();
        assert!(curve.mean_bound.iter().all(|&b| b.abs() < 1e-9));
        let csv = curve.to_csv();
        assert!(csv.starts_with("resolution,mean_bound,n_images\n4,"));
        assert_eq!(csv.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn bilinear_stays_in_input_range(
            h in 1usize..9, w in 1usize..9, oh in 1usize..20, ow in 1usize..20,
            vals in proptest::collection::vec(0.0f32..1.0, 81),
        ) {
            let img = Image::new(h, w, 1, vals[..h * w].to_vec()).unwrap();
            let (lo, hi) = img.min_max();
            let out = resize_bilinear(&img, oh, ow).unwrap();
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }

        #[test]
        fn stencil_annihilates_bilinear_functions(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, d in -3.0f64..3.0,
        ) {
            let f = Field::from_fn(6, 5, |x, y| a * x * y + b * x + c * y + d);
            for v in mixed_fourth_difference_field(&f).unwrap().data {
                prop_assert!(v.abs() < 1e-9);
            }
        }

        #[test]
        fn bound_is_positively_homogeneous(
            c in 0.0f32..1.0, vals in proptest::collection::vec(0.0f32..1.0, 36),
        ) {
            let img = Image::new(6, 6, 1, vals).unwrap();
            let scaled = img.scaled(c).unwrap();
            let (b, bc) = (error_upper_bound(&img).unwrap(), error_upper_bound(&scaled).unwrap());
            prop_assert!((bc - c as f64 * b).abs() < 1e-5);
        }
    }
}
