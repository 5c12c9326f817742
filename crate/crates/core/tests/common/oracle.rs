//! Independent reference computations for convolution, parameter storage
//! and FLOP counts. Nothing here goes through the crate's own layer
//! enumeration.

use std::collections::BTreeMap;

use btnet::model::{BTNetModel, ModelSpec};

/// One convolutional unit as read straight off the stem/stage fields.
#[derive(Debug, Clone, Copy)]
pub struct HandUnit {
    pub residual: bool,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_size: usize,
    pub out_size: usize,
}

impl HandUnit {
    /// `(cout, cin, k, stride)` of each convolution, projection last.
    pub fn convs(&self) -> Vec<(usize, usize, usize, usize)> {
        if !self.residual {
            return vec![(self.cout, self.cin, self.kernel, self.stride)];
        }
        let mut v = vec![(self.cout, self.cin, 3, self.stride), (self.cout, self.cout, 3, 1)];
        if self.stride != 1 || self.cin != self.cout {
            v.push((self.cout, self.cin, 1, self.stride));
        }
        v
    }
}

fn out_size(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * (k / 2) - k) / stride + 1
}

pub fn hand_units(spec: &ModelSpec) -> Vec<HandUnit> {
    let s = spec.canonical_size;
    let stem_out = out_size(s, spec.stem.kernel, spec.stem.stride);
    let mut units = vec![HandUnit {
        residual: false,
        cin: spec.in_channels,
        cout: spec.stem.channels,
        kernel: spec.stem.kernel,
        stride: spec.stem.stride,
        in_size: s,
        out_size: stem_out,
    }];
    let (mut c, mut size) = (spec.stem.channels, stem_out);
    for st in &spec.stages {
        for b in 0..st.blocks {
            let stride = if b == 0 { st.stride } else { 1 };
            let o = out_size(size, 3, stride);
            units.push(HandUnit { residual: true, cin: c, cout: st.out_channels, kernel: 3, stride, in_size: size, out_size: o });
            c = st.out_channels;
            size = o;
        }
    }
    units
}

/// Index of the first unit producing an `r x r` map.
pub fn hand_tap(units: &[HandUnit], r: usize) -> usize {
    units.iter().position(|u| u.out_size == r).expect("no unit produces this resolution")
}

fn bn_values(u: &HandUnit) -> usize {
    // gamma, beta, running mean, running variance per conv output
    u.convs().len() * 4 * u.cout
}

fn conv_weights(u: &HandUnit) -> usize {
    u.convs().iter().map(|&(co, ci, k, _)| co * ci * k * k).sum()
}

/// `(branch_plus_bn, full_finetune)` counted by hand from the stem and stage fields.
pub fn hand_param_counts(spec: &ModelSpec, r: usize) -> (usize, usize) {
    let units = hand_units(spec);
    let tap = hand_tap(&units, r);
    let last = units.last().unwrap();
    let fc = last.cout * last.out_size * last.out_size * spec.embedding_dim + spec.embedding_dim;
    let full = units.iter().map(|u| conv_weights(u) + bn_values(u)).sum::<usize>() + fc;
    let branch = units[..=tap].iter().map(|u| conv_weights(u) + bn_values(u)).sum::<usize>();
    let bank = units[tap + 1..].iter().map(bn_values).sum::<usize>();
    (branch + bank, full)
}

/// `(branch_plus_bn, full_finetune)` by summing the sizes of the arrays a
/// model actually stores, selected by name.
pub fn enumerated_param_counts(model: &BTNetModel, r: usize) -> (usize, usize) {
    let s = model.spec().canonical_size;
    let tap = hand_tap(&hand_units(model.spec()), r);
    let branch_prefix = format!("branch{r}.");
    let bank_prefix = format!("trunk.bn{r}.");
    let canonical_bank = format!("trunk.bn{s}.");
    let (mut branch_plus_bn, mut full) = (0, 0);
    let mut f = |name: &str, _: &[usize], data: &[f32]| {
        let n = data.len();
        let is_canonical = name.starts_with("trunk.u") || name.starts_with(&canonical_bank) || name.starts_with("trunk.fc.");
        if is_canonical {
            full += n;
        }
        if name.starts_with(&branch_prefix) {
            branch_plus_bn += n;
        } else if name.starts_with(&bank_prefix) {
            // the canonical bank also holds the prefix units that a branch replaces
            let unit: usize = name[bank_prefix.len() + 1..].split('.').next().unwrap().parse().unwrap();
            if unit > tap {
                branch_plus_bn += n;
            }
        }
    };
    model.visit(&mut f);
    (branch_plus_bn, full)
}

/// Direct six-loop convolution over an explicitly zero-padded input,
/// returning the output and the number of multiply-adds executed.
pub fn conv2d_naive(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4], u64) {
    let [n, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let mut padded = vec![0.0; n * cin * hp * wp];
    for b in 0..n {
        for c in 0..cin {
            for y in 0..h {
                for x0 in 0..wd {
                    padded[((b * cin + c) * hp + y + pad) * wp + x0 + pad] = x[((b * cin + c) * h + y) * wd + x0];
                }
            }
        }
    }
    let (ho, wo) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
    let mut out = vec![0.0; n * cout * ho * wo];
    let mut macs = 0u64;
    for b in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for x0 in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += padded[((b * cin + c) * hp + y * stride + ky) * wp + x0 * stride + kx]
                                    * w[((o * cin + c) * kh + ky) * kw + kx];
                                macs += 1;
                            }
                        }
                    }
                    out[((b * cout + o) * ho + y) * wo + x0] = acc;
                }
            }
        }
    }
    (out, [n, cout, ho, wo], macs)
}

/// Counts the operations of one `B_r`-then-`T_r` pass by executing
/// instrumented loops over a single zero input.
pub fn instrumented_flops(spec: &ModelSpec, r: usize) -> BTreeMap<String, u64> {
    let units = hand_units(spec);
    let tap = hand_tap(&units, r);
    let mut layers = BTreeMap::new();
    let mut run_unit = |prefix: &str, i: usize, u: &HandUnit, size_in: usize, same_res: bool| {
        let size_out = if same_res { size_in } else { u.out_size };
        let elems = u.cout * size_out * size_out;
        for (j, &(co, ci, k, stride)) in u.convs().iter().enumerate() {
            let s = if same_res { 1 } else { stride };
            // the second conv of a residual unit reads the first one's output
            let size = if j == 1 { size_out } else { size_in };
            let x = vec![0.0; ci * size * size];
            let w = vec![0.0; co * ci * k * k];
            let (_, shape, macs) = conv2d_naive(&x, [1, ci, size, size], &w, [co, ci, k, k], None, s, k / 2);
            assert_eq!(shape[2], size_out);
            layers.insert(format!("{prefix}.u{i}.conv{j}"), 2 * macs);
            // batch norm: one multiply and one add per element after folding
            let mut bn = 0u64;
            for _ in 0..elems {
                bn += 2;
            }
            layers.insert(format!("{prefix}.u{i}.bn{j}"), bn);
            if j == 0 {
                layers.insert(format!("{prefix}.u{i}.relu0"), (0..elems).map(|_| 1u64).sum());
            }
        }
        if u.residual {
            layers.insert(format!("{prefix}.u{i}.add"), (0..elems).map(|_| 1u64).sum());
            layers.insert(format!("{prefix}.u{i}.relu1"), (0..elems).map(|_| 1u64).sum());
        }
    };
    for (i, u) in units[..=tap].iter().enumerate() {
        run_unit(&format!("branch{r}"), i, u, r, true);
    }
    for (i, u) in units.iter().enumerate().skip(tap + 1) {
        run_unit("trunk", i, u, u.in_size, false);
    }
    let last = units.last().unwrap();
    let fin = last.cout * last.out_size * last.out_size;
    let mut fc = 0u64;
    for _ in 0..spec.embedding_dim {
        for _ in 0..fin {
            fc += 2;
        }
    }
    layers.insert("trunk.fc".into(), fc);
    // squares, sum, and one division per component
    layers.insert("trunk.normalize".into(), 3 * spec.embedding_dim as u64);
    layers
}
