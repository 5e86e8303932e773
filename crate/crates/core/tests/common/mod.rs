// Oracles shared by the core integration tests and the cli acceptance suite.
#![allow(dead_code)]

use std::collections::HashMap;

use ebm_core::data::{FeatureSequence, TokenSequence};
use ebm_core::graph::{finite_difference_check, Graph, Layered, NodeId};
use ebm_core::model::{build_energy_graph, ModelConfig, ModelParams, FEATURES_LEAF};
use ebm_core::rng::seeded;
use ebm_core::Tensor;
use rand::Rng as _;

pub const FD_EPSILON: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ebm_core::rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// Values bounded away from zero so ReLU/log never sit on a kink or pole.
fn away_from_zero(shape: &[usize], rng: &mut ebm_core::rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub struct PrimitiveCase {
    pub name: &'static str,
    pub graph: Graph,
    pub leaves: HashMap<String, Tensor>,
    pub output: NodeId,
    pub wrt: Vec<&'static str>,
}

/// One small graph per primitive. Every op output is contracted against a
/// random constant so no gradient entry is trivially one.
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut rng = seeded(seed);
    let mut cases = Vec::new();
    let mut push = |name: &'static str,
                    leaves: Vec<(&'static str, Tensor)>,
                    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
                    rng: &mut ebm_core::rng::Rng| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|(n, _)| g.input(n)).collect();
        let y = build(&mut g, &ids);
        let bound: HashMap<String, Tensor> = leaves.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let probe = {
            let vals = ebm_core::graph::evaluate(&g, &bound).expect("primitive case evaluates");
            vals.get(y).shape().to_vec()
        };
        let w = g.constant(uniform(&probe, -1.0, 1.0, rng));
        let prod = g.mul(y, w);
        let out = g.reduce_sum(prod, None);
        cases.push(PrimitiveCase {
            name,
            wrt: leaves.iter().map(|(n, _)| *n).collect(),
            leaves: bound,
            graph: g,
            output: out,
        });
    };

    let (r, c, k) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let a = uniform(&[r, c], -1.0, 1.0, &mut rng);
    let b = uniform(&[r, c], -1.0, 1.0, &mut rng);
    let s = uniform(&[1], -1.0, 1.0, &mut rng);
    let bm = uniform(&[c, k], -1.0, 1.0, &mut rng);
    let pos = uniform(&[r, c], 0.2, 2.0, &mut rng);
    let nz = away_from_zero(&[r, c], &mut rng);
    let wide = uniform(&[r, c], -3.0, 3.0, &mut rng);
    let gain = uniform(&[1, c + 1], 0.5, 1.5, &mut rng);
    let bias = uniform(&[1, c + 1], -0.5, 0.5, &mut rng);
    let ln_in = uniform(&[r, c + 1], -1.0, 1.0, &mut rng);
    let b2 = uniform(&[r + 1, c], -1.0, 1.0, &mut rng);
    let b3 = uniform(&[r, c + 2], -1.0, 1.0, &mut rng);
    let sl = uniform(&[r + 2, c], -1.0, 1.0, &mut rng);

    push(
        "add",
        vec![("a", a.clone()), ("b", b.clone())],
        &|g, x| g.add(x[0], x[1]),
        &mut rng,
    );
    push(
        "add_broadcast",
        vec![("a", a.clone()), ("s", s.clone())],
        &|g, x| g.add(x[0], x[1]),
        &mut rng,
    );
    push(
        "mul",
        vec![("a", a.clone()), ("b", b.clone())],
        &|g, x| g.mul(x[0], x[1]),
        &mut rng,
    );
    push(
        "mul_broadcast",
        vec![("s", s.clone()), ("a", a.clone())],
        &|g, x| g.mul(x[0], x[1]),
        &mut rng,
    );
    push(
        "matmul",
        vec![("a", a.clone()), ("b", bm)],
        &|g, x| g.matmul(x[0], x[1]),
        &mut rng,
    );
    push("transpose", vec![("a", a.clone())], &|g, x| g.transpose(x[0]), &mut rng);
    push(
        "reshape",
        vec![("a", a.clone())],
        &|g, x| g.reshape(x[0], vec![r * c]),
        &mut rng,
    );
    push(
        "concat_rows",
        vec![("a", a.clone()), ("b", b2)],
        &|g, x| g.concat(vec![x[0], x[1]], 0),
        &mut rng,
    );
    push(
        "concat_cols",
        vec![("a", a.clone()), ("b", b3)],
        &|g, x| g.concat(vec![x[0], x[1]], 1),
        &mut rng,
    );
    push("slice", vec![("a", sl)], &|g, x| g.slice(x[0], 0, 1, r), &mut rng);
    push("exp", vec![("a", a.clone())], &|g, x| g.exp(x[0]), &mut rng);
    push("log", vec![("a", pos)], &|g, x| g.log(x[0]), &mut rng);
    push("tanh", vec![("a", wide.clone())], &|g, x| g.tanh(x[0]), &mut rng);
    push("relu", vec![("a", nz)], &|g, x| g.relu(x[0]), &mut rng);
    push(
        "softplus",
        vec![("a", wide.clone())],
        &|g, x| g.softplus(x[0]),
        &mut rng,
    );
    push(
        "softmax_rows",
        vec![("a", wide.clone())],
        &|g, x| g.softmax(x[0], 1),
        &mut rng,
    );
    push("softmax_cols", vec![("a", wide)], &|g, x| g.softmax(x[0], 0), &mut rng);
    push(
        "layer_norm",
        vec![("x", ln_in), ("g", gain), ("b", bias)],
        &|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5),
        &mut rng,
    );
    push(
        "reduce_sum_axis0",
        vec![("a", a.clone())],
        &|g, x| g.reduce_sum(x[0], Some(0)),
        &mut rng,
    );
    push(
        "reduce_sum_axis1",
        vec![("a", a.clone())],
        &|g, x| g.reduce_sum(x[0], Some(1)),
        &mut rng,
    );
    push(
        "reduce_sum_all",
        vec![("a", a.clone())],
        &|g, x| g.reduce_sum(x[0], None),
        &mut rng,
    );
    push(
        "reduce_mean_axis1",
        vec![("a", a.clone())],
        &|g, x| g.reduce_mean(x[0], Some(1)),
        &mut rng,
    );
    push(
        "reduce_mean_all",
        vec![("a", a.clone())],
        &|g, x| g.reduce_mean(x[0], None),
        &mut rng,
    );
    push("scale", vec![("a", a)], &|g, x| g.scale(x[0], -1.7), &mut rng);
    cases
}

/// Worst relative error over every primitive case and every input of it.
pub fn primitive_error(seed: u64) -> (String, f64) {
    let mut worst = (String::new(), 0.0);
    for case in primitive_cases(seed) {
        for leaf in &case.wrt {
            let err = finite_difference_check(&case.graph, &case.leaves, case.output, leaf, FD_EPSILON)
                .unwrap_or_else(|e| panic!("{} wrt {leaf}: {e}", case.name));
            if err > worst.1 {
                worst = (format!("{} wrt {leaf}", case.name), err);
            }
        }
    }
    worst
}

pub const TINY_VOCAB: usize = 5;
pub const TINY_FEATURES: usize = 4;

/// Tiny model with every parameter randomised, including the head bias and
/// the weighting scale that initialise to zero.
pub fn tiny_model(seed: u64) -> ModelParams {
    let mut rng = seeded(seed);
    let cfg = ModelConfig::tiny(TINY_VOCAB, TINY_FEATURES);
    let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
    for name in ["head.b", "weight.v"] {
        let t = p.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    p
}

pub fn tiny_inputs(seed: u64) -> (TokenSequence, FeatureSequence) {
    let mut rng = seeded(seed ^ 0x5eed);
    let len = rng.random_range(1..4);
    let ids = (0..len).map(|_| rng.random_range(0..TINY_VOCAB as u32)).collect();
    let frames = rng.random_range(1..6);
    let values = (0..frames * TINY_FEATURES)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    (
        TokenSequence::new(ids, TINY_VOCAB).unwrap(),
        FeatureSequence::new(frames, TINY_FEATURES, values).unwrap(),
    )
}

/// Worst relative error of dE/dθ over all parameter tensors.
pub fn parameter_error(seed: u64) -> (String, f64) {
    let p = tiny_model(seed);
    let (x, y) = tiny_inputs(seed);
    let eg = build_energy_graph(p.config(), &x, y.frames()).unwrap();
    let yt = y.to_tensor();
    let front = [(FEATURES_LEAF, &yt)];
    let leaves = Layered {
        front: &front,
        back: &p,
    };
    let mut worst = (String::new(), 0.0);
    for name in p.names() {
        let err = finite_difference_check(&eg.graph, &leaves, eg.energy, name, FD_EPSILON).unwrap();
        if err > worst.1 {
            worst = (name.to_string(), err);
        }
    }
    worst
}

/// Relative error of dE/dY.
pub fn feature_error(seed: u64) -> f64 {
    let p = tiny_model(seed);
    let (x, y) = tiny_inputs(seed);
    let eg = build_energy_graph(p.config(), &x, y.frames()).unwrap();
    let yt = y.to_tensor();
    let front = [(FEATURES_LEAF, &yt)];
    let leaves = Layered {
        front: &front,
        back: &p,
    };
    finite_difference_check(&eg.graph, &leaves, eg.energy, FEATURES_LEAF, FD_EPSILON).unwrap()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exhaustive DTW: enumerates every monotone path from (0,0) to (n-1,m-1),
/// keeps the cheapest, and breaks ties by preferring, from the end backwards,
/// a diagonal step, then a step back in `a`, then a step back in `b`.
pub fn brute_force_dtw(a: &FeatureSequence, b: &FeatureSequence) -> (f64, Vec<(usize, usize)>) {
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut path = vec![(0, 0)];
    fn rank(path: &[(usize, usize)]) -> Vec<u8> {
        path.windows(2)
            .rev()
            .map(|w| match (w[1].0 - w[0].0, w[1].1 - w[0].1) {
                (1, 1) => 0,
                (1, 0) => 1,
                _ => 2,
            })
            .collect()
    }
    fn walk(
        a: &FeatureSequence,
        b: &FeatureSequence,
        path: &mut Vec<(usize, usize)>,
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        let (i, j) = *path.last().unwrap();
        if i == a.frames() - 1 && j == b.frames() - 1 {
            // Same summation order as the dynamic programme.
            let cost = path
                .iter()
                .fold(0.0, |acc, &(p, q)| acc + euclidean(a.row(p), b.row(q)));
            let better = match best {
                None => true,
                Some((c, bp)) => cost < *c || (cost == *c && rank(path) < rank(bp)),
            };
            if better {
                *best = Some((cost, path.clone()));
            }
            return;
        }
        for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < a.frames() && nj < b.frames() {
                path.push((ni, nj));
                walk(a, b, path, best);
                path.pop();
            }
        }
    }
    walk(a, b, &mut path, &mut best);
    best.unwrap()
}

/// Random pair for the DTW oracle. Half the cases draw from a three-value
/// alphabet so that exact ties actually occur.
pub fn random_dtw_pair(seed: u64) -> (FeatureSequence, FeatureSequence) {
    let mut rng = seeded(seed);
    let dim = rng.random_range(1..=3);
    let coarse = rng.random_bool(0.5);
    let seq = |rng: &mut ebm_core::rng::Rng| {
        let frames = rng.random_range(1..=6);
        let v = (0..frames * dim)
            .map(|_| {
                if coarse {
                    rng.random_range(0..3) as f64
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        FeatureSequence::new(frames, dim, v).unwrap()
    };
    let a = seq(&mut rng);
    let b = seq(&mut rng);
    (a, b)
}
