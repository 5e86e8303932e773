//! The energy network.
//!
//! Text goes through a transformer encoder; feature frames go through a
//! transformer decoder whose self-attention is *not* causally masked and
//! which cross-attends to the encoder memory, so every enhanced frame `g_t`
//! sees the whole text and the whole feature sequence. A per-frame MLP head
//! maps `g_t` to a frame energy `e_t = a^T h_t + b`, and the utterance energy
//! is `E = sum_t alpha_t e_t` with `alpha = softmax_t(v * e_t)` for a single
//! learned scalar `v` (initialised to 0, i.e. plain mean pooling).
//!
//! Each utterance gets its own graph; there is no padding or masking.
//! The normaliser of the induced density is never computed.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, TokenSequence};
use crate::error::{invalid, Error, Result};
use crate::graph::{evaluate, gradients, Graph, LeafValues, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Name of the graph leaf holding the `T x F` feature matrix.
pub const FEATURES_LEAF: &str = "features";
const MEMORY_LEAF: &str = "memory";
const DECODED_LEAF: &str = "decoded";
const FRAME_ENERGY_LEAF: &str = "frame_energies";
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Width of the token embeddings (and their positional encoding).
    pub embed_dim: usize,
    /// Width of the encoder/decoder residual stream and of `g_t`.
    pub hidden_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Inner width of the transformer feed-forward blocks.
    pub ffn_dim: usize,
    /// Width of the two hidden layers of the frame-energy head.
    pub head_hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            embed_dim: 32,
            hidden_dim: 32,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 64,
            head_hidden_dim: 64,
            feature_dim: 16,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by gradient checks.
    pub fn tiny(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 8,
            hidden_dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 16,
            head_hidden_dim: 16,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("head_hidden_dim", self.head_hidden_dim),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(invalid(format!("model {name} must be at least 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (e, h, ff, hh) = (self.embed_dim, self.hidden_dim, self.ffn_dim, self.head_hidden_dim);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let linear = |push: &mut dyn FnMut(String, Vec<usize>), p: &str, i: usize, o: usize| {
            push(format!("{p}.w"), vec![i, o]);
            push(format!("{p}.b"), vec![1, o]);
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.g"), vec![1, h]);
            push(format!("{p}.b"), vec![1, h]);
        };
        let attn = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for m in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.{m}"), vec![h, h]);
            }
        };

        push("tok_emb".into(), vec![self.vocab_size, e]);
        push("enc_pos_scale".into(), vec![1]);
        linear(&mut push, "enc_in", e, h);
        for l in 0..self.encoder_layers {
            norm(&mut push, &format!("enc{l}.ln1"));
            attn(&mut push, &format!("enc{l}.self"));
            norm(&mut push, &format!("enc{l}.ln2"));
            linear(&mut push, &format!("enc{l}.ff1"), h, ff);
            linear(&mut push, &format!("enc{l}.ff2"), ff, h);
        }
        norm(&mut push, "enc_ln");
        push("dec_pos_scale".into(), vec![1]);
        linear(&mut push, "dec_in", self.feature_dim, h);
        for l in 0..self.decoder_layers {
            norm(&mut push, &format!("dec{l}.ln1"));
            attn(&mut push, &format!("dec{l}.self"));
            norm(&mut push, &format!("dec{l}.ln2"));
            attn(&mut push, &format!("dec{l}.cross"));
            norm(&mut push, &format!("dec{l}.ln3"));
            linear(&mut push, &format!("dec{l}.ff1"), h, ff);
            linear(&mut push, &format!("dec{l}.ff2"), ff, h);
        }
        norm(&mut push, "dec_ln");
        linear(&mut push, "out", h, h);
        linear(&mut push, "head.l1", h, hh);
        linear(&mut push, "head.l2", hh, hh);
        push("head.a".into(), vec![hh, 1]);
        push("head.b".into(), vec![1, 1]);
        push("weight.v".into(), vec![1]);
        out
    }
}

/// Learnable tensors of the energy network, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl LeafValues for ModelParams {
    fn leaf(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

impl ModelParams {
    /// Uniform `±1/sqrt(fan_in)` weights and biases; unit layer-norm gains,
    /// zero layer-norm biases, unit positional scales, zero head bias `b`
    /// and zero weighting scalar `v`.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        let mut fan_in_of_bias = 1usize;
        for (name, shape) in config.parameter_shapes() {
            let numel: usize = shape.iter().product();
            let t = if name.ends_with("_pos_scale") || (name.ends_with(".g") && is_norm(&name)) {
                Tensor::ones(&shape)
            } else if is_norm(&name) || name == "head.b" || name == "weight.v" {
                Tensor::zeros(&shape)
            } else {
                let fan_in = if name == "tok_emb" {
                    1
                } else if name.ends_with(".b") {
                    fan_in_of_bias
                } else {
                    shape[0]
                };
                if name.ends_with(".w") || name == "head.a" {
                    fan_in_of_bias = shape[0];
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape.clone(), data)?
            };
            tensors.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.keys().map(String::as_str).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Zeroes every tensor of the frame-energy head, making `E = 0` everywhere.
    pub fn zero_head(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with("head.") {
                *t = Tensor::zeros(t.shape());
            }
        }
    }
}

fn is_norm(name: &str) -> bool {
    name.contains(".ln") || name.starts_with("enc_ln") || name.starts_with("dec_ln")
}

pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        if j % 2 == 0 {
            (pos / rate).sin()
        } else {
            (pos / rate).cos()
        }
    })
}

fn one_hot(ids: &[u32], vocab: usize) -> Tensor {
    let mut t = Tensor::zeros(&[ids.len(), vocab]);
    for (i, &id) in ids.iter().enumerate() {
        t.data_mut()[i * vocab + id as usize] = 1.0;
    }
    t
}

/// Builds the network's nodes into a graph.
struct NetBuilder<'c> {
    g: Graph,
    cfg: &'c ModelConfig,
    ones: BTreeMap<usize, NodeId>,
}

impl<'c> NetBuilder<'c> {
    fn new(cfg: &'c ModelConfig) -> Self {
        Self {
            g: Graph::new(),
            cfg,
            ones: BTreeMap::new(),
        }
    }

    fn ones_column(&mut self, rows: usize) -> NodeId {
        if let Some(&id) = self.ones.get(&rows) {
            return id;
        }
        let id = self.g.constant(Tensor::ones(&[rows, 1]));
        self.ones.insert(rows, id);
        id
    }

    /// Adds a `1 x n` row vector to each of `rows` rows via an explicit outer product.
    fn add_row(&mut self, x: NodeId, row: NodeId, rows: usize) -> NodeId {
        let ones = self.ones_column(rows);
        let tiled = self.g.matmul(ones, row);
        self.g.add(x, tiled)
    }

    fn linear(&mut self, x: NodeId, rows: usize, prefix: &str) -> NodeId {
        let w = self.g.parameter(&format!("{prefix}.w"));
        let b = self.g.parameter(&format!("{prefix}.b"));
        let xw = self.g.matmul(x, w);
        self.add_row(xw, b, rows)
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let gain = self.g.parameter(&format!("{prefix}.g"));
        let bias = self.g.parameter(&format!("{prefix}.b"));
        self.g.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Unmasked multi-head attention of `queries` over `keys_values`.
    fn attention(&mut self, queries: NodeId, keys_values: NodeId, prefix: &str) -> NodeId {
        let h = self.cfg.hidden_dim;
        let dh = h / self.cfg.heads;
        let wq = self.g.parameter(&format!("{prefix}.wq"));
        let wk = self.g.parameter(&format!("{prefix}.wk"));
        let wv = self.g.parameter(&format!("{prefix}.wv"));
        let wo = self.g.parameter(&format!("{prefix}.wo"));
        let q = self.g.matmul(queries, wq);
        let k = self.g.matmul(keys_values, wk);
        let v = self.g.matmul(keys_values, wv);
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let qh = self.g.slice(q, 1, i * dh, dh);
            let kh = self.g.slice(k, 1, i * dh, dh);
            let vh = self.g.slice(v, 1, i * dh, dh);
            let kt = self.g.transpose(kh);
            let scores = self.g.matmul(qh, kt);
            let scaled = self.g.scale(scores, 1.0 / (dh as f64).sqrt());
            let weights = self.g.softmax(scaled, 1);
            heads.push(self.g.matmul(weights, vh));
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            self.g.concat(heads, 1)
        };
        self.g.matmul(joined, wo)
    }

    fn feed_forward(&mut self, x: NodeId, rows: usize, prefix: &str) -> NodeId {
        let h1 = self.linear(x, rows, &format!("{prefix}.ff1"));
        let a1 = self.g.relu(h1);
        self.linear(a1, rows, &format!("{prefix}.ff2"))
    }

    fn residual(&mut self, x: NodeId, branch: NodeId) -> NodeId {
        self.g.add(x, branch)
    }

    fn encoder(&mut self, text: &TokenSequence) -> NodeId {
        let len = text.len();
        let onehot = self.g.constant(one_hot(text.ids(), self.cfg.vocab_size));
        let table = self.g.parameter("tok_emb");
        let emb = self.g.matmul(onehot, table);
        let pe = self.g.constant(sinusoidal_positions(len, self.cfg.embed_dim));
        let alpha = self.g.parameter("enc_pos_scale");
        let scaled_pe = self.g.mul(alpha, pe);
        let x0 = self.g.add(emb, scaled_pe);
        let mut x = self.linear(x0, len, "enc_in");
        for l in 0..self.cfg.encoder_layers {
            let n1 = self.norm(x, &format!("enc{l}.ln1"));
            let a = self.attention(n1, n1, &format!("enc{l}.self"));
            x = self.residual(x, a);
            let n2 = self.norm(x, &format!("enc{l}.ln2"));
            let f = self.feed_forward(n2, len, &format!("enc{l}"));
            x = self.residual(x, f);
        }
        self.norm(x, "enc_ln")
    }

    fn decoder(&mut self, memory: NodeId, features: NodeId, frames: usize) -> NodeId {
        let proj = self.linear(features, frames, "dec_in");
        let pe = self.g.constant(sinusoidal_positions(frames, self.cfg.hidden_dim));
        let alpha = self.g.parameter("dec_pos_scale");
        let scaled_pe = self.g.mul(alpha, pe);
        let mut x = self.g.add(proj, scaled_pe);
        for l in 0..self.cfg.decoder_layers {
            let n1 = self.norm(x, &format!("dec{l}.ln1"));
            let a = self.attention(n1, n1, &format!("dec{l}.self"));
            x = self.residual(x, a);
            let n2 = self.norm(x, &format!("dec{l}.ln2"));
            let c = self.attention(n2, memory, &format!("dec{l}.cross"));
            x = self.residual(x, c);
            let n3 = self.norm(x, &format!("dec{l}.ln3"));
            let f = self.feed_forward(n3, frames, &format!("dec{l}"));
            x = self.residual(x, f);
        }
        let out = self.norm(x, "dec_ln");
        self.linear(out, frames, "out")
    }

    /// `T x 1` frame energies from the `T x H` enhanced features.
    fn head(&mut self, g: NodeId, frames: usize) -> NodeId {
        let h1 = self.linear(g, frames, "head.l1");
        let a1 = self.g.relu(h1);
        let h2 = self.linear(a1, frames, "head.l2");
        let a2 = self.g.relu(h2);
        let a = self.g.parameter("head.a");
        let b = self.g.parameter("head.b");
        let proj = self.g.matmul(a2, a);
        self.add_row(proj, b, frames)
    }

    /// Attention weights over frames and the weighted utterance energy.
    fn weighting(&mut self, e: NodeId) -> (NodeId, NodeId) {
        let v = self.g.parameter("weight.v");
        let logits = self.g.mul(v, e);
        let alpha = self.g.softmax(logits, 0);
        let weighted = self.g.mul(alpha, e);
        (alpha, self.g.reduce_sum(weighted, None))
    }
}

/// The complete energy graph of one utterance. The feature matrix is the
/// input leaf [`FEATURES_LEAF`]; every other leaf is a model parameter.
#[derive(Clone, Debug)]
pub struct EnergyGraph {
    pub graph: Graph,
    pub memory: NodeId,
    pub decoded: NodeId,
    pub frame_energies: NodeId,
    pub weights: NodeId,
    pub energy: NodeId,
}

pub fn build_energy_graph(config: &ModelConfig, text: &TokenSequence, frames: usize) -> Result<EnergyGraph> {
    check_text(config, text)?;
    let mut b = NetBuilder::new(config);
    let memory = b.encoder(text);
    let features = b.g.input(FEATURES_LEAF);
    let decoded = b.decoder(memory, features, frames);
    let frame_energies = b.head(decoded, frames);
    let (weights, energy) = b.weighting(frame_energies);
    Ok(EnergyGraph {
        graph: b.g,
        memory,
        decoded,
        frame_energies,
        weights,
        energy,
    })
}

/// Leaf name of the `i`-th feature matrix in a [`SharedEnergyGraph`].
pub fn features_leaf(i: usize) -> String {
    format!("{FEATURES_LEAF}{i}")
}

/// One text encoded once and scored against several feature sequences.
#[derive(Clone, Debug)]
pub struct SharedEnergyGraph {
    pub graph: Graph,
    pub energies: Vec<NodeId>,
}

pub fn build_shared_energy_graph(
    config: &ModelConfig,
    text: &TokenSequence,
    frames: &[usize],
) -> Result<SharedEnergyGraph> {
    check_text(config, text)?;
    let mut b = NetBuilder::new(config);
    let memory = b.encoder(text);
    let mut energies = Vec::with_capacity(frames.len());
    for (i, &t) in frames.iter().enumerate() {
        let features = b.g.input(&features_leaf(i));
        let decoded = b.decoder(memory, features, t);
        let e = b.head(decoded, t);
        energies.push(b.weighting(e).1);
    }
    Ok(SharedEnergyGraph { graph: b.g, energies })
}

fn check_text(config: &ModelConfig, text: &TokenSequence) -> Result<()> {
    if let Some(bad) = text.ids().iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(invalid(format!(
            "token id {bad} outside model vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn check_features(config: &ModelConfig, y: &FeatureSequence) -> Result<()> {
    if y.dim() != config.feature_dim {
        return Err(invalid(format!(
            "features have {} channels, model expects {}",
            y.dim(),
            config.feature_dim
        )));
    }
    Ok(())
}

/// Utterance energy with the per-frame quantities it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyBreakdown {
    pub energy: f64,
    pub frame_energies: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Encoder memory, `L x hidden_dim`.
pub fn encode_text(params: &ModelParams, text: &TokenSequence) -> Result<Tensor> {
    check_text(params.config(), text)?;
    let mut b = NetBuilder::new(params.config());
    let memory = b.encoder(text);
    let vals = evaluate(&b.g, params)?;
    Ok(vals.get(memory).clone())
}

/// Enhanced frames `g`, `T x hidden_dim`, for a given encoder memory.
pub fn decode_features(params: &ModelParams, memory: &Tensor, y: &FeatureSequence) -> Result<Tensor> {
    let cfg = params.config();
    check_features(cfg, y)?;
    match memory.dims2() {
        Some((_, h)) if h == cfg.hidden_dim => {}
        _ => {
            return Err(invalid(format!(
                "memory has shape {:?}, expected L x {}",
                memory.shape(),
                cfg.hidden_dim
            )))
        }
    }
    let mut b = NetBuilder::new(cfg);
    let mem = b.g.input(MEMORY_LEAF);
    let feats = b.g.input(FEATURES_LEAF);
    let out = b.decoder(mem, feats, y.frames());
    let y_t = y.to_tensor();
    let leaves = [(MEMORY_LEAF, memory), (FEATURES_LEAF, &y_t)];
    let layered = crate::graph::Layered {
        front: &leaves,
        back: params,
    };
    let vals = evaluate(&b.g, &layered)?;
    Ok(vals.get(out).clone())
}

/// Per-frame energies from enhanced frames `g` (`T x hidden_dim`).
pub fn frame_energies(params: &ModelParams, g: &Tensor) -> Result<Vec<f64>> {
    let cfg = params.config();
    let frames = match g.dims2() {
        Some((t, h)) if h == cfg.hidden_dim => t,
        _ => {
            return Err(invalid(format!(
                "enhanced frames have shape {:?}, expected T x {}",
                g.shape(),
                cfg.hidden_dim
            )))
        }
    };
    let mut b = NetBuilder::new(cfg);
    let input = b.g.input(DECODED_LEAF);
    let e = b.head(input, frames);
    let leaves = [(DECODED_LEAF, g)];
    let layered = crate::graph::Layered {
        front: &leaves,
        back: params,
    };
    let vals = evaluate(&b.g, &layered)?;
    Ok(vals.get(e).data().to_vec())
}

/// Attention-weighted pooling of frame energies.
pub fn utterance_energy(params: &ModelParams, frame_energies: &[f64]) -> Result<EnergyBreakdown> {
    if frame_energies.is_empty() {
        return Err(invalid("need at least one frame energy"));
    }
    let mut b = NetBuilder::new(params.config());
    let e = b.g.input(FRAME_ENERGY_LEAF);
    let (alpha, energy) = b.weighting(e);
    let e_t = Tensor::matrix(frame_energies.len(), 1, frame_energies.to_vec())?;
    let leaves = [(FRAME_ENERGY_LEAF, &e_t)];
    let layered = crate::graph::Layered {
        front: &leaves,
        back: params,
    };
    let vals = evaluate(&b.g, &layered)?;
    Ok(EnergyBreakdown {
        energy: vals.get(energy).item(),
        frame_energies: frame_energies.to_vec(),
        weights: vals.get(alpha).data().to_vec(),
    })
}

/// `E(x, Y)` with its frame energies and weights.
pub fn energy(params: &ModelParams, text: &TokenSequence, y: &FeatureSequence) -> Result<EnergyBreakdown> {
    check_features(params.config(), y)?;
    let eg = build_energy_graph(params.config(), text, y.frames())?;
    let y_t = y.to_tensor();
    let leaves = [(FEATURES_LEAF, &y_t)];
    let layered = crate::graph::Layered {
        front: &leaves,
        back: params,
    };
    let vals = evaluate(&eg.graph, &layered)?;
    Ok(EnergyBreakdown {
        energy: vals.get(eg.energy).item(),
        frame_energies: vals.get(eg.frame_energies).data().to_vec(),
        weights: vals.get(eg.weights).data().to_vec(),
    })
}

/// `E(x, Y)` and `dE/dY`, from one forward and one backward pass.
pub fn energy_and_feature_grad(
    params: &ModelParams,
    text: &TokenSequence,
    y: &FeatureSequence,
) -> Result<(f64, FeatureSequence)> {
    check_features(params.config(), y)?;
    let eg = build_energy_graph(params.config(), text, y.frames())?;
    let y_t = y.to_tensor();
    let leaves = [(FEATURES_LEAF, &y_t)];
    let layered = crate::graph::Layered {
        front: &leaves,
        back: params,
    };
    let vals = evaluate(&eg.graph, &layered)?;
    let e = vals.get(eg.energy).item();
    let mut grads = gradients(&eg.graph, &vals, eg.energy, &[FEATURES_LEAF])?;
    let g = grads.remove(FEATURES_LEAF).expect("requested leaf");
    Ok((e, FeatureSequence::new(y.frames(), y.dim(), g.into_data())?))
}

/// `dE/dY` for every cell of `Y`.
pub fn energy_grad_features(
    params: &ModelParams,
    text: &TokenSequence,
    y: &FeatureSequence,
) -> Result<FeatureSequence> {
    energy_and_feature_grad(params, text, y).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{finite_difference_check, Layered};
    use crate::rng::seeded;

    fn random_features(frames: usize, dim: usize, seed: u64) -> FeatureSequence {
        let mut rng = seeded(seed);
        let v = (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureSequence::new(frames, dim, v).unwrap()
    }

    fn tiny_params(seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig::tiny(5, 4), &mut seeded(seed)).unwrap()
    }

    #[test]
    fn parameter_shapes_are_consistent() {
        let p = ModelParams::init(&ModelConfig::default(), &mut seeded(0)).unwrap();
        assert!(p.all_finite());
        assert_eq!(p.get("weight.v").unwrap().item(), 0.0);
        assert_eq!(p.get("head.b").unwrap().item(), 0.0);
        let rebuilt = ModelParams::from_tensors(p.config().clone(), p.tensors().clone()).unwrap();
        assert_eq!(rebuilt, p);
    }

    #[test]
    fn config_rejects_bad_heads() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_token_encodes() {
        let p = tiny_params(1);
        let m = encode_text(&p, &TokenSequence::new(vec![2], 5).unwrap()).unwrap();
        assert_eq!(m.shape(), &[1, 8]);
        assert!(m.all_finite());
    }

    #[test]
    fn encoder_sees_token_order() {
        let p = tiny_params(2);
        let a = encode_text(&p, &TokenSequence::new(vec![1, 3], 5).unwrap()).unwrap();
        let b = encode_text(&p, &TokenSequence::new(vec![3, 1], 5).unwrap()).unwrap();
        // Row for token 1 at position 0 vs position 1.
        assert_ne!(a.row(0), b.row(1));
        assert_eq!(a, encode_text(&p, &TokenSequence::new(vec![1, 3], 5).unwrap()).unwrap());
    }

    #[test]
    fn out_of_vocab_text_is_rejected() {
        let p = tiny_params(2);
        let bad = TokenSequence::new(vec![7], 8).unwrap();
        assert!(encode_text(&p, &bad).is_err());
    }

    #[test]
    fn decoder_output_shapes() {
        let p = tiny_params(3);
        let x = TokenSequence::new(vec![0, 1, 4], 5).unwrap();
        let m = encode_text(&p, &x).unwrap();
        let g = decode_features(&p, &m, &random_features(1, 4, 0)).unwrap();
        assert_eq!(g.shape(), &[1, 8]);
        let y = random_features(6, 4, 1);
        let mut rows: Vec<Vec<f64>> = y.rows().map(<[f64]>::to_vec).collect();
        rows.insert(2, rows[2].clone());
        let dup = FeatureSequence::from_rows(&rows).unwrap();
        let g = decode_features(&p, &m, &dup).unwrap();
        assert_eq!(g.shape(), &[7, 8]);
        assert!(g.all_finite());
        assert!(decode_features(&p, &m, &random_features(3, 5, 0)).is_err());
    }

    #[test]
    fn first_enhanced_frame_depends_on_last_input_frame() {
        let p = tiny_params(4);
        let x = TokenSequence::new(vec![1, 2], 5).unwrap();
        let y = random_features(6, 4, 2);
        let mut b = NetBuilder::new(p.config());
        let mem = b.encoder(&x);
        let feats = b.g.input(FEATURES_LEAF);
        let g = b.decoder(mem, feats, 6);
        let first_row = b.g.slice(g, 0, 0, 1);
        let first = b.g.slice(first_row, 1, 0, 1);
        let yt = y.to_tensor();
        let front = [(FEATURES_LEAF, &yt)];
        let leaves = Layered {
            front: &front,
            back: &p,
        };
        let vals = evaluate(&b.g, &leaves).unwrap();
        let grad = gradients(&b.g, &vals, first, &[FEATURES_LEAF]).unwrap();
        let last_frame = &grad[FEATURES_LEAF].data()[5 * 4..];
        assert!(last_frame.iter().any(|v| v.abs() > 1e-8), "{last_frame:?}");
    }

    #[test]
    fn zero_head_gives_zero_energies() {
        let mut p = tiny_params(5);
        p.zero_head();
        let x = TokenSequence::new(vec![1, 2, 3], 5).unwrap();
        let y = random_features(7, 4, 3);
        let e = energy(&p, &x, &y).unwrap();
        assert_eq!(e.energy, 0.0);
        assert!(e.frame_energies.iter().all(|&v| v == 0.0));
        let g = energy_grad_features(&p, &x, &y).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_reduces_to_linear_frame_energy() {
        // Identity hidden layers on non-negative g, a = e_0, b = 0: e_t = g_t[0].
        let cfg = ModelConfig::tiny(5, 4);
        let mut p = ModelParams::init(&cfg, &mut seeded(6)).unwrap();
        let eye = Tensor::from_fn(&[8, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
        let eye2 = Tensor::from_fn(&[16, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
        *p.get_mut("head.l1.w").unwrap() = eye;
        *p.get_mut("head.l1.b").unwrap() = Tensor::zeros(&[1, 16]);
        *p.get_mut("head.l2.w").unwrap() = eye2;
        *p.get_mut("head.l2.b").unwrap() = Tensor::zeros(&[1, 16]);
        *p.get_mut("head.a").unwrap() = Tensor::from_fn(&[16, 1], |i| if i == 0 { 1.0 } else { 0.0 });
        let g = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.3).sin().abs());
        let e = frame_energies(&p, &g).unwrap();
        for (t, &et) in e.iter().enumerate() {
            assert_eq!(et, g.at2(t, 0));
        }
    }

    #[test]
    fn head_is_per_frame() {
        let p = tiny_params(7);
        let g = Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.77).cos());
        let e = frame_energies(&p, &g).unwrap();
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<f64> = perm.iter().flat_map(|&r| g.row(r).to_vec()).collect();
        let gp = Tensor::matrix(4, 8, rows).unwrap();
        let ep = frame_energies(&p, &gp).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            assert_eq!(ep[i], e[r]);
        }
    }

    #[test]
    fn uniform_weights_when_v_is_zero() {
        let p = tiny_params(8);
        let b = utterance_energy(&p, &[1.0, 2.0, 6.0]).unwrap();
        assert!((b.energy - 3.0).abs() < 1e-15);
        for w in &b.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_frame_energies_pool_to_constant() {
        let mut p = tiny_params(9);
        *p.get_mut("weight.v").unwrap() = Tensor::scalar(-3.7);
        let b = utterance_energy(&p, &[2.5; 5]).unwrap();
        assert!((b.energy - 2.5).abs() < 1e-15);
    }

    #[test]
    fn sharp_weighting_of_two_frames() {
        let mut p = tiny_params(9);
        *p.get_mut("weight.v").unwrap() = Tensor::scalar(1.0);
        let b = utterance_energy(&p, &[0.0, 10.0]).unwrap();
        let w0 = 1.0 / (1.0 + 10f64.exp());
        assert!((b.weights[0] - w0).abs() < 1e-15);
        assert!((b.weights[0] - 4.54e-5).abs() < 1e-7);
        assert!((b.energy - 9.99955).abs() < 1e-5);
    }

    #[test]
    fn energy_is_finite_at_desk_shape() {
        let cfg = ModelConfig {
            vocab_size: 8,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg, &mut seeded(10)).unwrap();
        let x = TokenSequence::new(vec![0, 3, 5, 7, 1], 8).unwrap();
        let b = energy(&p, &x, &random_features(40, 16, 4)).unwrap();
        assert!(b.energy.is_finite());
        let s: f64 = b.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let pooled: f64 = b.weights.iter().zip(&b.frame_energies).map(|(a, e)| a * e).sum();
        assert!((pooled - b.energy).abs() < 1e-12);
    }

    #[test]
    fn composition_matches_full_graph() {
        let mut p = tiny_params(11);
        *p.get_mut("weight.v").unwrap() = Tensor::scalar(0.7);
        let x = TokenSequence::new(vec![4, 0, 2], 5).unwrap();
        let y = random_features(5, 4, 5);
        let full = energy(&p, &x, &y).unwrap();
        let m = encode_text(&p, &x).unwrap();
        let g = decode_features(&p, &m, &y).unwrap();
        let e = frame_energies(&p, &g).unwrap();
        let staged = utterance_energy(&p, &e).unwrap();
        assert_eq!(staged, full);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let p = tiny_params(12);
        let x = TokenSequence::new(vec![1, 4], 5).unwrap();
        let y = random_features(5, 4, 6);
        let eg = build_energy_graph(p.config(), &x, 5).unwrap();
        let yt = y.to_tensor();
        let front = [(FEATURES_LEAF, &yt)];
        let leaves = Layered {
            front: &front,
            back: &p,
        };
        let err = finite_difference_check(&eg.graph, &leaves, eg.energy, FEATURES_LEAF, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
        let g = energy_grad_features(&p, &x, &y).unwrap();
        assert_eq!((g.frames(), g.dim()), (5, 4));
    }
}
