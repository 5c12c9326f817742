use btnet::graph::{BnMode, Graph, Var};
use btnet::losses::{
    branch_distill_loss, cos_logits, influence_loss, margin_logits, total_loss, MarginHead, MarginKind, MarginParams,
};
use btnet::rng::substream;
use btnet::{Result, Tensor};
use rand::Rng;

pub const EPS: f64 = 1e-4;
pub const MAX_REL: f64 = 1e-4;
pub const INSTANCES: usize = 12;
pub const ROUNDOFF_FLOOR: f64 = 1e-6;

type Forward = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A scalar-valued computation of some inputs; only `wrt` inputs are checked.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub wrt: Vec<bool>,
    pub forward: Forward,
}

/// Reduces any output to a scalar with a fixed random projection so every
/// output element contributes to the checked gradient.
fn projected(g: &mut Graph<f64>, out: Var, proj: &[f64]) -> Result<Var> {
    let n = g.shape(out).iter().product::<usize>();
    if n == 1 {
        return g.reshape(out, &[1, 1]);
    }
    let flat = g.reshape(out, &[1, n])?;
    let w = g.constant(Tensor::new(&[1, n], proj[..n].to_vec())?)?;
    g.linear(flat, w, None)
}

fn evaluate(inst: &Instance, inputs: &[Tensor<f64>], proj: &[f64]) -> Result<(f64, Graph<f64>, Vec<Var>)> {
    let mut g = Graph::new();
    let vars = inputs.iter().zip(&inst.wrt).map(|(t, &w)| g.param(t, w)).collect::<Result<Vec<_>>>()?;
    let out = (inst.forward)(&mut g, &vars)?;
    let loss = projected(&mut g, out, proj)?;
    let v = g.scalar(loss);
    g.backward(loss)?;
    Ok((v, g, vars))
}

/// Largest relative difference between the analytic gradient and the
/// central difference over every coordinate of every checked input.
pub fn max_rel_error(inst: &Instance, seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "gradcheck.projection");
    let proj: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (f0, g, vars) = evaluate(inst, &inst.inputs, &proj)?;
    // Central differences lose about eps_machine * |f| / EPS to roundoff, so
    // gradients far below that are compared against this floor instead.
    let floor = ROUNDOFF_FLOOR * f0.abs().max(1.0);
    let mut worst = 0.0f64;
    for (k, input) in inst.inputs.iter().enumerate() {
        if !inst.wrt[k] {
            continue;
        }
        let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inst.inputs.clone();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inst.inputs.clone();
            minus[k].data_mut()[i] -= EPS;
            let fp = evaluate(inst, &plus, &proj)?.0;
            let fm = evaluate(inst, &minus, &proj)?.0;
            let numeric = (fp - fm) / (2.0 * EPS);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values at least `gap` away from zero.
pub fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn labels<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn angular_target(c: f64, m: f64) -> f64 {
    c * m.cos() - (1.0 - c * c).sqrt() * m.sin()
}

/// True if no non-target cosine sits within `gap` of the hard-negative
/// boundary `cos(theta_y + m)`.
fn clear_of_boundary(cos: &[f64], k: usize, labels: &[usize], m: f64, gap: f64) -> bool {
    labels.iter().enumerate().all(|(i, &l)| {
        let t = angular_target(cos[i * k + l], m);
        (0..k).all(|j| j == l || (cos[i * k + j] - t).abs() > gap)
    })
}

pub type Generator = fn(u64) -> Instance;

pub fn conv2d(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.conv2d");
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    let stride = rng.random_range(1..=2);
    let padding = if k == 3 { rng.random_range(0..=1) } else { 0 };
    let (h, w) = (rng.random_range(4..=6), rng.random_range(4..=6));
    Instance {
        inputs: vec![
            uniform(&mut rng, &[n, cin, h, w], -1.0, 1.0),
            uniform(&mut rng, &[cout, cin, k, k], -1.0, 1.0),
            uniform(&mut rng, &[cout], -1.0, 1.0),
        ],
        wrt: vec![true; 3],
        forward: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, padding)),
    }
}

pub fn batchnorm_train(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.bn_train");
    let (n, c, h) = (rng.random_range(2..=3), rng.random_range(1..=3), rng.random_range(2..=3));
    Instance {
        inputs: vec![
            uniform(&mut rng, &[n, c, h, h], -2.0, 2.0),
            uniform(&mut rng, &[c], 0.5, 1.5),
            uniform(&mut rng, &[c], -0.5, 0.5),
        ],
        wrt: vec![true; 3],
        forward: Box::new(move |g, v| {
            let (mut rm, mut rv) = (vec![0.0; c], vec![1.0; c]);
            g.batchnorm(v[0], v[1], v[2], BnMode::Train { running_mean: &mut rm, running_var: &mut rv })
        }),
    }
}

pub fn batchnorm_infer(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.bn_infer");
    let (n, c, h) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=3));
    let rm: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    Instance {
        inputs: vec![
            uniform(&mut rng, &[n, c, h, h], -2.0, 2.0),
            uniform(&mut rng, &[c], 0.5, 1.5),
            uniform(&mut rng, &[c], -0.5, 0.5),
        ],
        wrt: vec![true; 3],
        forward: Box::new(move |g, v| g.batchnorm(v[0], v[1], v[2], BnMode::Infer { running_mean: &rm, running_var: &rv })),
    }
}

pub fn linear(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.linear");
    let (n, i, o) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5));
    Instance {
        inputs: vec![uniform(&mut rng, &[n, i], -1.0, 1.0), uniform(&mut rng, &[o, i], -1.0, 1.0), uniform(&mut rng, &[o], -1.0, 1.0)],
        wrt: vec![true; 3],
        forward: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
    }
}

pub fn relu(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.relu");
    let n = rng.random_range(2..=12);
    Instance {
        inputs: vec![away_from_zero(&mut rng, &[n], 0.01)],
        wrt: vec![true],
        forward: Box::new(|g, v| g.relu(v[0])),
    }
}

pub fn l2_normalize(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.l2");
    let (n, d) = (rng.random_range(1..=4), rng.random_range(2..=6));
    Instance {
        inputs: vec![away_from_zero(&mut rng, &[n, d], 0.1)],
        wrt: vec![true],
        forward: Box::new(|g, v| g.l2_normalize(v[0])),
    }
}

pub fn mse(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.mse");
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4), 2, 2];
    Instance {
        inputs: vec![uniform(&mut rng, &shape, -1.0, 1.0), uniform(&mut rng, &shape, -1.0, 1.0)],
        wrt: vec![true, true],
        forward: Box::new(|g, v| g.mse(v[0], v[1])),
    }
}

pub fn softmax_cross_entropy(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.ce");
    let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=6));
    let y = labels(&mut rng, n, k);
    Instance {
        inputs: vec![uniform(&mut rng, &[n, k], -3.0, 3.0)],
        wrt: vec![true],
        forward: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &y)),
    }
}

fn margin_instance(seed: u64, kind: MarginKind) -> Instance {
    let mut rng = substream(seed, &format!("gradcheck.margin.{kind}"));
    let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
    let m = rng.random_range(0.1..0.6);
    let t = rng.random_range(0.0..1.0);
    let (cos, y) = loop {
        let cos = uniform(&mut rng, &[n, k], -0.9, 0.9);
        let y = labels(&mut rng, n, k);
        if clear_of_boundary(cos.data(), k, &y, m, 1e-3) {
            break (cos, y);
        }
    };
    let p = MarginParams { kind, s: 64.0, m, t };
    Instance { inputs: vec![cos], wrt: vec![true], forward: Box::new(move |g, v| margin_logits(g, v[0], &y, &p)) }
}

pub fn margin_normface(seed: u64) -> Instance {
    margin_instance(seed, MarginKind::NormFace)
}

pub fn margin_cosface(seed: u64) -> Instance {
    margin_instance(seed, MarginKind::CosFace)
}

pub fn margin_arcface(seed: u64) -> Instance {
    margin_instance(seed, MarginKind::ArcFace)
}

pub fn margin_curricular(seed: u64) -> Instance {
    margin_instance(seed, MarginKind::Curricular)
}

/// A frozen head whose cosines with the normalized `emb` avoid the
/// hard-negative boundary.
fn head_and_embeddings<R: Rng>(rng: &mut R, n: usize, k: usize, d: usize, kind: MarginKind) -> (MarginHead, Tensor<f64>, Vec<usize>) {
    loop {
        let mut head = MarginHead::new(k, d, rng).with_kind(kind);
        head.t = rng.random_range(0.0..1.0);
        head.frozen = true;
        let emb = away_from_zero(rng, &[n, d], 0.05);
        let y = labels(rng, n, k);
        let mut g = Graph::<f64>::new();
        let e = g.constant(emb.clone()).unwrap();
        let e = g.l2_normalize(e).unwrap();
        let w = g.constant(head.weight.cast::<f64>()).unwrap();
        let c = cos_logits(&mut g, e, w).unwrap();
        if clear_of_boundary(g.value(c), k, &y, head.m, 1e-3) {
            return (head, emb, y);
        }
    }
}

fn influence_instance(seed: u64, kind: MarginKind) -> Instance {
    let mut rng = substream(seed, &format!("gradcheck.influence.{kind}"));
    let (n, k, d) = (rng.random_range(1..=4), rng.random_range(2..=5), rng.random_range(2..=6));
    let (head, emb, y) = head_and_embeddings(&mut rng, n, k, d, kind);
    Instance {
        inputs: vec![emb],
        wrt: vec![true],
        forward: Box::new(move |g, v| {
            let e = g.l2_normalize(v[0])?;
            Ok(influence_loss(g, e, &y, &head)?.loss)
        }),
    }
}

pub fn influence_curricular(seed: u64) -> Instance {
    influence_instance(seed, MarginKind::Curricular)
}

pub fn influence_arcface(seed: u64) -> Instance {
    influence_instance(seed, MarginKind::ArcFace)
}

/// Cosine logits with a trainable head: gradients reach both the
/// embeddings and the head weights.
pub fn head_cosines(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.cos_logits");
    let (n, k, d) = (rng.random_range(1..=4), rng.random_range(2..=5), rng.random_range(2..=6));
    Instance {
        inputs: vec![away_from_zero(&mut rng, &[n, d], 0.05), away_from_zero(&mut rng, &[k, d], 0.05)],
        wrt: vec![true, true],
        forward: Box::new(|g, v| {
            let e = g.l2_normalize(v[0])?;
            cos_logits(g, e, v[1])
        }),
    }
}

pub fn distill(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.distill");
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4), 3, 3];
    Instance {
        inputs: vec![uniform(&mut rng, &shape, -1.0, 2.0), uniform(&mut rng, &shape, 0.0, 2.0)],
        wrt: vec![true, false],
        forward: Box::new(|g, v| branch_distill_loss(g, v[0], v[1])),
    }
}

pub fn total(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.total");
    let (n, k, d) = (rng.random_range(1..=3), rng.random_range(2..=4), rng.random_range(2..=4));
    let (head, emb, y) = head_and_embeddings(&mut rng, n, k, d, MarginKind::Curricular);
    let shape = [n, 2, 2, 2];
    let lambda = rng.random_range(0.1..1.0);
    Instance {
        inputs: vec![emb, uniform(&mut rng, &shape, -1.0, 2.0), uniform(&mut rng, &shape, 0.0, 2.0)],
        wrt: vec![true, true, false],
        forward: Box::new(move |g, v| {
            let e = g.l2_normalize(v[0])?;
            let inf = influence_loss(g, e, &y, &head)?.loss;
            let dist = branch_distill_loss(g, v[1], v[2])?;
            total_loss(g, inf, dist, lambda)
        }),
    }
}

pub fn elementwise_chain(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.chain");
    let (n, c) = (rng.random_range(1..=3), rng.random_range(2..=4));
    let s = rng.random_range(-2.0..2.0);
    Instance {
        inputs: vec![uniform(&mut rng, &[n, c, 2, 2], -1.0, 1.0), uniform(&mut rng, &[n, c, 2, 2], -1.0, 1.0)],
        wrt: vec![true, true],
        forward: Box::new(move |g, v| {
            let a = g.add(v[0], v[1])?;
            let a = g.scale(a, s)?;
            let f = g.flatten(a)?;
            let m = g.mean(f)?;
            let t = g.sum(v[0])?;
            g.add(m, t)
        }),
    }
}

/// Every differentiable operation with its instance generator.
pub const SUITE: [(&str, Generator); 19] = [
    ("conv2d", conv2d),
    ("batchnorm (train)", batchnorm_train),
    ("batchnorm (infer)", batchnorm_infer),
    ("linear", linear),
    ("relu", relu),
    ("l2_normalize", l2_normalize),
    ("mse", mse),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("margin logits normface", margin_normface),
    ("margin logits cosface", margin_cosface),
    ("margin logits arcface", margin_arcface),
    ("margin logits curricular", margin_curricular),
    ("cosine logits", head_cosines),
    ("influence loss curricular", influence_curricular),
    ("influence loss arcface", influence_arcface),
    ("distill loss", distill),
    ("total loss", total),
    ("add/scale/mean/sum", elementwise_chain),
    ("flatten+linear", linear_after_flatten),
];

pub fn linear_after_flatten(seed: u64) -> Instance {
    let mut rng = substream(seed, "gradcheck.flatten_linear");
    let (n, c) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let o = rng.random_range(1..=4);
    Instance {
        inputs: vec![uniform(&mut rng, &[n, c, 2, 2], -1.0, 1.0), uniform(&mut rng, &[o, c * 4], -1.0, 1.0)],
        wrt: vec![true, true],
        forward: Box::new(|g, v| {
            let f = g.flatten(v[0])?;
            g.linear(f, v[1], None)
        }),
    }
}

/// Worst relative error of each operation over [`INSTANCES`] instances.
pub fn run_suite() -> Vec<(&'static str, f64)> {
    SUITE
        .iter()
        .map(|(name, gen)| {
            let worst = (0..INSTANCES as u64)
                .map(|i| max_rel_error(&gen(i), i).unwrap_or_else(|e| panic!("{name} instance {i}: {e}")))
                .fold(0.0f64, f64::max);
            (*name, worst)
        })
        .collect()
}
