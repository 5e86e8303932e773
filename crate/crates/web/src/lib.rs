//! WebAssembly bindings for `www/index.html`. The plain functions do the work
//! and are tested natively; the `wasm_bindgen` wrappers only convert errors.

use ebm_core::data::{corpus_min, degrade_hypothesis, pitch_track, FeatureSequence, SyntheticTask, SyntheticTaskSpec};
use ebm_core::metrics::{align_tracks, default_cepstral_order, ffe, mcd};
use ebm_core::negatives::NegativeMethod;
use ebm_core::rng::{derive_seed, seeded};
use ebm_core::samplers::{run_sampler, QuadraticEnergy, SamplerConfig, SamplerVariant};
use wasm_bindgen::prelude::*;

/// A `frames x dim` matrix, row-major.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    frames: usize,
    dim: usize,
    values: Vec<f64>,
}

#[wasm_bindgen]
impl Heatmap {
    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[wasm_bindgen(getter)]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }
}

impl From<&FeatureSequence> for Heatmap {
    fn from(y: &FeatureSequence) -> Self {
        Self {
            frames: y.frames(),
            dim: y.dim(),
            values: y.values().to_vec(),
        }
    }
}

fn utterance(seed: u64) -> ebm_core::Result<FeatureSequence> {
    let task = SyntheticTask::new(SyntheticTaskSpec::default())?;
    let mut rng = seeded(derive_seed(seed, "utterance", 0));
    let text = task.random_text(&mut rng);
    Ok(task.render(&text, &mut rng))
}

/// Reference utterance `seed` and a negative made from it with `method`
/// (`rm:0.25`, `tm:0.1`, `fm:0.1`, `tw:1.2`). Masks fill with the
/// utterance minimum.
pub fn negative_pair(seed: u64, method: &str) -> ebm_core::Result<(Heatmap, Heatmap)> {
    let method: NegativeMethod = method.parse()?;
    let y = utterance(seed)?;
    let fill = corpus_min([&y]);
    let neg = method.apply(&y, fill, &mut seeded(derive_seed(seed, "negative", 0)))?;
    Ok(((&y).into(), (&neg).into()))
}

/// A degraded hypothesis aligned to its reference.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct AlignmentView {
    reference: Heatmap,
    hypothesis: Heatmap,
    path: Vec<u32>,
    mcd: f64,
    ffe: f64,
}

#[wasm_bindgen]
impl AlignmentView {
    #[wasm_bindgen(getter)]
    pub fn reference(&self) -> Heatmap {
        self.reference.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn hypothesis(&self) -> Heatmap {
        self.hypothesis.clone()
    }

    /// Flattened `(i, j)` pairs of the DTW path.
    #[wasm_bindgen(getter)]
    pub fn path(&self) -> Vec<u32> {
        self.path.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn mcd(&self) -> f64 {
        self.mcd
    }

    #[wasm_bindgen(getter)]
    pub fn ffe(&self) -> f64 {
        self.ffe
    }
}

pub fn degrade_and_align(seed: u64, width: usize, noise: f64) -> ebm_core::Result<AlignmentView> {
    let y = utterance(seed)?;
    let hyp = degrade_hypothesis(&y, width, noise, &mut seeded(derive_seed(seed, "degrade", 0)))?;
    let m = mcd(&y, &hyp, default_cepstral_order(y.dim()))?;
    let (r, h) = align_tracks(&pitch_track(&y), &pitch_track(&hyp), &m.alignment.path)?;
    Ok(AlignmentView {
        reference: (&y).into(),
        hypothesis: (&hyp).into(),
        path: m
            .alignment
            .path
            .iter()
            .flat_map(|&(i, j)| [i as u32, j as u32])
            .collect(),
        mcd: m.mcd,
        ffe: ffe(&r, &h)?,
    })
}

/// One sampler run on `E = |Y|^2 / 2` over an 8 x 8 grid started at 3.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct SamplerView {
    energies: Vec<f64>,
    final_state: Heatmap,
    variance: f64,
}

#[wasm_bindgen]
impl SamplerView {
    #[wasm_bindgen(getter)]
    pub fn energies(&self) -> Vec<f64> {
        self.energies.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn final_state(&self) -> Heatmap {
        self.final_state.clone()
    }

    /// Variance of the final cells around zero.
    #[wasm_bindgen(getter)]
    pub fn variance(&self) -> f64 {
        self.variance
    }
}

pub fn sample_quadratic(variant: &str, steps: usize, step_size: f64, seed: u64) -> ebm_core::Result<SamplerView> {
    let variant = match variant {
        "langevin" => SamplerVariant::Langevin,
        "simplified-adam" => SamplerVariant::SimplifiedAdam,
        "annealed-score" => SamplerVariant::AnnealedScore,
        other => return Err(ebm_core::Error::InvalidArgument(format!("unknown sampler `{other}`"))),
    };
    let config = SamplerConfig {
        variant,
        step_size: Some(step_size),
        steps,
        seed,
        ..SamplerConfig::default()
    };
    config.validate()?;
    let y0 = FeatureSequence::filled(8, 8, 3.0);
    let trace = run_sampler(&QuadraticEnergy, &y0, &config, 0)?;
    let v = trace.final_state.values();
    Ok(SamplerView {
        energies: trace.energies.clone(),
        variance: v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64,
        final_state: (&trace.final_state).into(),
    })
}

fn js(e: ebm_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = negativePair)]
pub fn negative_pair_js(seed: u32, method: &str) -> Result<Vec<Heatmap>, JsError> {
    negative_pair(seed.into(), method).map(|(a, b)| vec![a, b]).map_err(js)
}

#[wasm_bindgen(js_name = degradeAndAlign)]
pub fn degrade_and_align_js(seed: u32, width: usize, noise: f64) -> Result<AlignmentView, JsError> {
    degrade_and_align(seed.into(), width, noise).map_err(js)
}

#[wasm_bindgen(js_name = sampleQuadratic)]
pub fn sample_quadratic_js(variant: &str, steps: usize, step_size: f64, seed: u32) -> Result<SamplerView, JsError> {
    sample_quadratic(variant, steps, step_size, seed.into()).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_mask_preview_blanks_frames() {
        let (y, neg) = negative_pair(3, "tm:0.2").unwrap();
        assert_eq!((y.frames, y.dim), (neg.frames, neg.dim));
        let fill = y.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let blank = (0..neg.frames)
            .filter(|t| neg.values[t * neg.dim..(t + 1) * neg.dim].iter().all(|&v| v == fill))
            .count();
        assert_eq!(blank, (0.2 * y.frames as f64).round() as usize);
    }

    #[test]
    fn warp_preview_changes_length() {
        let (y, neg) = negative_pair(1, "tw:2.0").unwrap();
        assert_eq!(neg.frames, y.frames.div_ceil(2));
        assert!(negative_pair(1, "xx:1").is_err());
    }

    #[test]
    fn clean_alignment_is_free() {
        let v = degrade_and_align(5, 1, 0.0).unwrap();
        assert_eq!(v.mcd, 0.0);
        assert_eq!(v.ffe, 0.0);
        assert_eq!(v.path.len(), 2 * v.reference.frames);
        let worse = degrade_and_align(5, 9, 0.3).unwrap();
        assert!(worse.mcd > 0.0);
        assert_eq!(&worse.path[..2], &[0, 0]);
    }

    #[test]
    fn samplers_descend_the_quadratic() {
        let adam = sample_quadratic("simplified-adam", 200, 0.05, 0).unwrap();
        assert_eq!(adam.energies.len(), 201);
        assert!(adam.energies[200] < 0.01 * adam.energies[0]);
        let lang = sample_quadratic("langevin", 2000, 0.01, 0).unwrap();
        assert!(lang.variance > 0.5 && lang.variance < 2.0, "{}", lang.variance);
        assert!(sample_quadratic("euler", 10, 0.1, 0).is_err());
    }
}
