//! NCE training with Adam, and checkpoints.
//!
//! The loss for one (positive, negative) pair is
//! `softplus(E(x, Y+)) + softplus(-E(x, Y-))`, i.e. the negative log
//! likelihood of classifying the positive as data and the negative as noise
//! with logit `-E`. A batch averages it over every pair.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::io::{put_f64s, put_u32, Reader};
use crate::data::{FeatureSequence, TokenSequence, Utterance};
use crate::error::{invalid, Error, FormatError, Result};
use crate::graph::{evaluate, gradients, Layered};
use crate::model::{build_shared_energy_graph, features_leaf, ModelConfig, ModelParams};
use crate::negatives::{draw_negative, HypothesisSource, NegativeSpec};
use crate::rng::{derive_seed, seeded, Rng, RngState};
use crate::tensor::Tensor;

/// `max(z, 0) + ln(1 + e^{-|z|})`, finite for every finite `z`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn nce_loss(e_pos: f64, e_neg: f64) -> Result<f64> {
    if !e_pos.is_finite() || !e_neg.is_finite() {
        return Err(Error::NonFinite(format!("nce_loss({e_pos}, {e_neg})")));
    }
    Ok(softplus(e_pos) + softplus(-e_neg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub negatives_per_positive: usize,
    pub negatives: NegativeSpec,
    pub seed: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            iterations: 5000,
            negatives_per_positive: 1,
            negatives: NegativeSpec::default(),
            seed: 0,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if self.negatives_per_positive == 0 {
            return Err(invalid("negatives_per_positive must be at least 1"));
        }
        self.negatives.validate()
    }
}

/// One positive with its negatives, all conditioned on the same text.
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub id: &'a str,
    pub text: &'a TokenSequence,
    pub positive: &'a FeatureSequence,
    pub negatives: Vec<FeatureSequence>,
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// Mean pair loss.
    pub loss: f64,
    pub e_pos_mean: f64,
    pub e_neg_mean: f64,
    /// Gradient of `loss` for every parameter.
    pub grads: BTreeMap<String, Tensor>,
}

/// Mean NCE loss over every (positive, negative) pair of the batch and its
/// parameter gradients, summed over items in batch order.
pub fn batch_loss(params: &ModelParams, batch: &[BatchItem<'_>]) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(invalid("batch must not be empty"));
    }
    let pairs: usize = batch.iter().map(|b| b.negatives.len()).sum();
    if batch.iter().any(|b| b.negatives.is_empty()) {
        return Err(invalid("every batch item needs at least one negative"));
    }
    let names: Vec<&str> = params.names();
    let mut total: Option<BTreeMap<String, Tensor>> = None;
    let (mut loss, mut e_pos_sum, mut e_neg_sum) = (0.0, 0.0, 0.0);
    for item in batch {
        let mut frames = vec![item.positive.frames()];
        frames.extend(item.negatives.iter().map(FeatureSequence::frames));
        let mut shared = build_shared_energy_graph(params.config(), item.text, &frames)?;
        let g = &mut shared.graph;
        let e_pos = shared.energies[0];
        let sp_pos = g.softplus(e_pos);
        let mut terms = Vec::new();
        for &e_neg in &shared.energies[1..] {
            let flipped = g.scale(e_neg, -1.0);
            let sp_neg = g.softplus(flipped);
            terms.push(g.add(sp_pos, sp_neg));
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = g.add(sum, t);
        }
        let item_loss = g.scale(sum, 1.0 / pairs as f64);

        let tensors: Vec<Tensor> = std::iter::once(item.positive)
            .chain(&item.negatives)
            .map(FeatureSequence::to_tensor)
            .collect();
        let leaf_names: Vec<String> = (0..tensors.len()).map(features_leaf).collect();
        let front: Vec<(&str, &Tensor)> = leaf_names.iter().map(String::as_str).zip(&tensors).collect();
        let leaves = Layered {
            front: front.as_slice(),
            back: params,
        };
        let vals = evaluate(g, &leaves)?;
        let energies: Vec<f64> = shared.energies.iter().map(|&e| vals.get(e).item()).collect();
        let value = vals.get(item_loss).item();
        if !value.is_finite() || energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss for utterance `{}` (energies {energies:?})",
                item.id
            )));
        }
        loss += value;
        e_pos_sum += energies[0];
        e_neg_sum += energies[1..].iter().sum::<f64>();
        let grads = gradients(g, &vals, item_loss, &names)?;
        match total.as_mut() {
            None => total = Some(grads),
            Some(acc) => {
                for (name, grad) in grads {
                    acc.get_mut(&name).expect("same parameter set").axpy(1.0, &grad);
                }
            }
        }
    }
    Ok(BatchLoss {
        loss,
        e_pos_mean: e_pos_sum / batch.len() as f64,
        e_neg_mean: e_neg_sum / pairs as f64,
        grads: total.expect("non-empty batch"),
    })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update of `x` in place. `step` is the 1-based
/// index of this update.
pub fn adam_update(x: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64) {
    let c1 = 1.0 - ADAM_BETA1.powf(step as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(step as f64);
    for i in 0..x.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        x[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .tensors()
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for name in params.names() {
        let p = params.get(name).unwrap();
        let g = grads
            .get(name)
            .ok_or_else(|| invalid(format!("no gradient for parameter `{name}`")))?;
        let ok = |t: Option<&Tensor>| t.is_some_and(|t| t.shape() == p.shape());
        if g.shape() != p.shape() || !ok(state.m.get(name)) || !ok(state.v.get(name)) {
            return Err(invalid(format!("shape mismatch in Adam update of `{name}`")));
        }
    }
    state.step += 1;
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else {
            return Err(invalid(format!("gradient for unknown parameter `{name}`")));
        };
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), state.step, lr);
    }
    Ok(())
}

/// Everything needed to continue a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub iteration: u64,
    pub rng: Rng,
}

impl TrainState {
    /// Fresh parameters and optimizer state derived from `config.seed`.
    pub fn new(model: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(model, &mut seeded(derive_seed(config.seed, "init", 0)))?;
        Ok(Self {
            adam: AdamState::new(&params),
            params,
            iteration: 0,
            rng: seeded(derive_seed(config.seed, "train", config.negatives.seed)),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let rng = ckpt
            .rng
            .restore()
            .ok_or_else(|| FormatError::Invalid("checkpoint RNG state is malformed".into()))?;
        Ok(Self {
            params: ckpt.params,
            adam: ckpt.adam,
            iteration: ckpt.iteration,
            rng,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub loss: f64,
    pub e_pos_mean: f64,
    pub e_neg_mean: f64,
}

pub const LOSS_TRACE_HEADER: &str = "iteration,loss,E_pos_mean,E_neg_mean";

impl TraceRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.iteration, self.loss, self.e_pos_mean, self.e_neg_mean
        )
    }
}

pub fn write_loss_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from(LOSS_TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_TRACE_HEADER) {
        return Err(FormatError::Invalid(format!("{} is not a loss trace", path.display())).into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::from(FormatError::Invalid(format!("bad loss trace row `{l}`")));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(TraceRow {
                iteration: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                e_pos_mean: f[2].parse().map_err(|_| bad())?,
                e_neg_mean: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Training data plus the resolved negative source and mask fill.
pub struct TrainingSet<'a> {
    pub utterances: &'a [Utterance],
    pub source: HypothesisSource,
    pub fill: f64,
}

impl<'a> TrainingSet<'a> {
    /// Source from the spec's kind; the fill defaults to the corpus minimum.
    /// File sources must be built by the caller.
    pub fn new(utterances: &'a [Utterance], spec: &NegativeSpec) -> Result<Self> {
        use crate::negatives::SourceKind;
        let source = match spec.source {
            SourceKind::Reference => HypothesisSource::Reference,
            SourceKind::DegradedHypothesis => HypothesisSource::Degraded {
                width: spec.smoothing_width,
                noise: spec.hypothesis_noise,
            },
            SourceKind::File => {
                return Err(invalid("file-source negatives need a loaded hypothesis map"));
            }
        };
        Ok(Self::with_source(utterances, spec, source))
    }

    pub fn with_source(utterances: &'a [Utterance], spec: &NegativeSpec, source: HypothesisSource) -> Self {
        let fill = spec
            .fill
            .unwrap_or_else(|| crate::data::corpus_min(utterances.iter().map(|u| &u.features)));
        Self {
            utterances,
            source,
            fill,
        }
    }
}

/// Samples a batch with replacement and draws its negatives.
pub fn sample_batch<'a>(config: &TrainConfig, set: &TrainingSet<'a>, rng: &mut Rng) -> Result<Vec<BatchItem<'a>>> {
    let n = set.utterances.len();
    (0..config.batch_size)
        .map(|_| {
            let u = &set.utterances[rng.random_range(0..n)];
            let negatives = (0..config.negatives_per_positive)
                .map(|_| {
                    draw_negative(&config.negatives, &u.id, &u.features, &set.source, set.fill, rng).map(|d| d.features)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BatchItem {
                id: &u.id,
                text: &u.text,
                positive: &u.features,
                negatives,
            })
        })
        .collect()
}

/// Runs iterations until `state.iteration == config.iterations`, calling
/// `on_iteration` after every update. Returns the rows produced by this call.
pub fn train(
    config: &TrainConfig,
    set: &TrainingSet<'_>,
    state: &mut TrainState,
    mut on_iteration: impl FnMut(&TraceRow, &TrainState) -> Result<()>,
) -> Result<Vec<TraceRow>> {
    config.validate()?;
    if set.utterances.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if state.iteration > config.iterations {
        return Err(invalid(format!(
            "state is at iteration {}, past the configured {}",
            state.iteration, config.iterations
        )));
    }
    let mut rows = Vec::new();
    while state.iteration < config.iterations {
        let batch = sample_batch(config, set, &mut state.rng)?;
        let b = batch_loss(&state.params, &batch)?;
        adam_step(&mut state.params, &b.grads, &mut state.adam, config.learning_rate)?;
        if !state.params.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after iteration {}",
                state.iteration + 1
            )));
        }
        state.iteration += 1;
        let row = TraceRow {
            iteration: state.iteration,
            loss: b.loss,
            e_pos_mean: b.e_pos_mean,
            e_neg_mean: b.e_neg_mean,
        };
        on_iteration(&row, state)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Fraction of held-out utterances with `E(x, Y+) < E(x, Y-)` for one fresh
/// negative each, drawn from `seed`.
pub fn margin_accuracy(params: &ModelParams, spec: &NegativeSpec, set: &TrainingSet<'_>, seed: u64) -> Result<f64> {
    if set.utterances.is_empty() {
        return Err(invalid("no utterances to evaluate"));
    }
    let mut wins = 0usize;
    for (i, u) in set.utterances.iter().enumerate() {
        let mut rng = seeded(derive_seed(seed, "margin", i as u64));
        let neg = draw_negative(spec, &u.id, &u.features, &set.source, set.fill, &mut rng)?.features;
        let e_pos = crate::model::energy(params, &u.text, &u.features)?.energy;
        let e_neg = crate::model::energy(params, &u.text, &neg)?.energy;
        if e_pos < e_neg {
            wins += 1;
        }
    }
    Ok(wins as f64 / set.utterances.len() as f64)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EBMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub iteration: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    iteration: u64,
    adam_step: u64,
    rng: RngState,
    tensors: usize,
}

const PARAM_PREFIX: &str = "param/";
const ADAM_M_PREFIX: &str = "adam_m/";
const ADAM_V_PREFIX: &str = "adam_v/";

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<(), FormatError> {
    let len = |v: usize| u32::try_from(v).map_err(|_| FormatError::DimensionOverflow(format!("{name}: {v}")));
    put_u32(out, len(name.len())?);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, len(t.rank())?);
    for &d in t.shape() {
        put_u32(out, len(d)?);
    }
    put_f64s(out, t.data());
    Ok(())
}

fn get_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let n = r.u32("tensor name length")? as usize;
    let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
        .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?;
    let rank = r.u32("tensor rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(FormatError::Invalid(format!("tensor `{name}` has rank {rank}")).into());
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = r.u32("tensor dims")? as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| FormatError::DimensionOverflow(format!("tensor `{name}`")))?;
        shape.push(d);
    }
    let data = r.f64s(numel, "tensor data")?;
    let t = Tensor::new(shape, data).map_err(|e| FormatError::Invalid(format!("tensor `{name}`: {e}")))?;
    Ok((name, t))
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.params.config().clone(),
            iteration: self.iteration,
            adam_step: self.adam.step,
            rng: self.rng.clone(),
            tensors: 3 * self.params.tensors().len(),
        };
        let json = serde_json::to_vec(&header).map_err(FormatError::from)?;
        let mut out = CHECKPOINT_MAGIC.to_vec();
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(
            &mut out,
            u32::try_from(json.len()).map_err(|_| FormatError::DimensionOverflow("header".into()))?,
        );
        out.extend_from_slice(&json);
        let groups = [
            (PARAM_PREFIX, self.params.tensors()),
            (ADAM_M_PREFIX, &self.adam.m),
            (ADAM_V_PREFIX, &self.adam.v),
        ];
        for (prefix, map) in groups {
            for (name, t) in map {
                put_tensor(&mut out, &format!("{prefix}{name}"), t)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            }
            .into());
        }
        let hlen = r.u32("header length")? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?).map_err(FormatError::from)?;
        let mut groups: [BTreeMap<String, Tensor>; 3] = Default::default();
        for _ in 0..header.tensors {
            let (name, t) = get_tensor(&mut r)?;
            let (slot, key) = if let Some(k) = name.strip_prefix(PARAM_PREFIX) {
                (0, k)
            } else if let Some(k) = name.strip_prefix(ADAM_M_PREFIX) {
                (1, k)
            } else if let Some(k) = name.strip_prefix(ADAM_V_PREFIX) {
                (2, k)
            } else {
                return Err(FormatError::Invalid(format!("unexpected tensor `{name}`")).into());
            };
            if groups[slot].insert(key.to_string(), t).is_some() {
                return Err(FormatError::Invalid(format!("duplicate tensor `{name}`")).into());
            }
        }
        if r.remaining() != 0 {
            return Err(FormatError::Invalid(format!("{} trailing bytes", r.remaining())).into());
        }
        let [params, m, v] = groups;
        let params = ModelParams::from_tensors(header.config, params)
            .map_err(|e| FormatError::Invalid(format!("checkpoint parameters: {e}")))?;
        for (label, map) in [("first", &m), ("second", &v)] {
            let matches = map.len() == params.tensors().len()
                && params
                    .tensors()
                    .iter()
                    .all(|(k, t)| map.get(k).is_some_and(|x| x.shape() == t.shape()));
            if !matches {
                return Err(FormatError::Invalid(format!("Adam {label} moments do not match the parameters")).into());
            }
        }
        Ok(Self {
            params,
            adam: AdamState {
                step: header.adam_step,
                m,
                v,
            },
            iteration: header.iteration,
            rng: header.rng,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
