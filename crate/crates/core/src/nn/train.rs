//! Deterministic minibatch SGD for the toy model, loss evaluation and
//! single-pair inference.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::decode_heatmap;
use crate::scalar::Real;

use super::blocks::HEATMAP_SIZE;
use super::loss::LossWeights;
use super::model::{FovSource, PairInput, ToyModel};
use super::prepare::PreparedPair;
use super::tensor::Parameterized;
use super::NnError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Rescale the minibatch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    pub weights: LossWeights,
    pub fov_source: FovSource,
    pub seed: u64,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            learning_rate: 0.1,
            clip_norm: Some(5.0),
            weights: LossWeights::default(),
            fov_source: FovSource::Predicted,
            seed: 0,
            threads: None,
        }
    }
}

/// Mean loss terms over a set of pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub heatmap: f64,
    pub inout: f64,
    pub gaze: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub batch: LossSummary,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: LossSummary,
    pub final_loss: LossSummary,
    pub curve: Vec<StepRecord>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,heatmap,inout,gaze,grad_norm\n");
        for r in &self.curve {
            let b = r.batch;
            s.push_str(&format!("{},{},{},{},{},{}\n", r.step, b.total, b.heatmap, b.inout, b.gaze, r.grad_norm));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool, NnError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| NnError::Config(e.to_string()))
}

fn summarize<'a>(items: impl Iterator<Item = &'a LossSummary>) -> LossSummary {
    let mut acc = LossSummary::default();
    let mut n = 0usize;
    for l in items {
        acc.total += l.total;
        acc.heatmap += l.heatmap;
        acc.inout += l.inout;
        acc.gaze += l.gaze;
        n += 1;
    }
    let k = 1.0 / n.max(1) as f64;
    LossSummary { total: acc.total * k, heatmap: acc.heatmap * k, inout: acc.inout * k, gaze: acc.gaze * k }
}

fn pair_summary<T: Real>(
    model: &ToyModel<T>,
    pair: &PreparedPair<T>,
    weights: &LossWeights,
    source: FovSource,
) -> Result<LossSummary, NnError> {
    let fov = match source {
        FovSource::Predicted => None,
        FovSource::GroundTruth => Some(pair.target.gaze),
    };
    let (out, _) = model.forward(&pair.input, fov)?;
    let (l, _) = model.pair_loss(&out, &pair.target, weights)?;
    Ok(LossSummary { total: l.total.as_f64(), heatmap: l.heatmap.as_f64(), inout: l.inout.as_f64(), gaze: l.gaze.as_f64() })
}

/// Mean loss over `data`.
pub fn evaluate_loss<T: Real>(
    model: &ToyModel<T>,
    data: &[PreparedPair<T>],
    weights: &LossWeights,
    source: FovSource,
    threads: Option<usize>,
) -> Result<LossSummary, NnError> {
    if data.is_empty() {
        return Err(NnError::Data("no training pairs".into()));
    }
    let losses: Vec<LossSummary> = pool(threads)?
        .install(|| data.par_iter().map(|p| pair_summary(model, p, weights, source)).collect::<Result<_, _>>())?;
    Ok(summarize(losses.iter()))
}

/// Trains in place. Results depend only on the seed, not on the thread
/// count: per-pair gradients are computed independently and summed in
/// minibatch order.
pub fn train<T: Real>(model: &mut ToyModel<T>, data: &[PreparedPair<T>], cfg: &TrainConfig) -> Result<TrainReport, NnError> {
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(NnError::Config(format!("batch {} lr {}", cfg.batch_size, cfg.learning_rate)));
    }
    let pool = pool(cfg.threads)?;
    let initial = evaluate_loss(model, data, &cfg.weights, cfg.fov_source, cfg.threads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    let lr = T::lit(cfg.learning_rate);

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("nonempty"));
        }
        let template = &*model;
        let results: Vec<(LossSummary, Vec<T>)> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| {
                    let mut m = template.clone();
                    m.zero_grad();
                    let p = &data[i];
                    let l = m.train_pair(&p.input, &p.target, &cfg.weights, cfg.fov_source)?;
                    let s = LossSummary {
                        total: l.total.as_f64(),
                        heatmap: l.heatmap.as_f64(),
                        inout: l.inout.as_f64(),
                        gaze: l.gaze.as_f64(),
                    };
                    Ok((s, m.grads()))
                })
                .collect::<Result<_, NnError>>()
        })?;
        let mut grad = vec![T::zero(); model.param_count()];
        for (_, g) in &results {
            grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
        let inv = T::one() / T::from_usize_lossy(results.len());
        grad.iter_mut().for_each(|g| *g *= inv);
        let norm = grad.iter().map(|&g| g * g).sum::<T>().sqrt();
        if !norm.is_finite() {
            return Err(NnError::NonFinite(format!("gradient at step {step}")));
        }
        if let Some(c) = cfg.clip_norm {
            let c = T::lit(c);
            if norm > c {
                let k = c / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
        }
        model.apply_update(&grad, lr);
        curve.push(StepRecord { step, batch: summarize(results.iter().map(|(s, _)| s)), grad_norm: norm.as_f64() });
    }
    let final_loss = evaluate_loss(model, data, &cfg.weights, cfg.fov_source, cfg.threads)?;
    Ok(TrainReport { initial, final_loss, curve })
}

/// Primary-view prediction for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    /// Normalized `(x, y)` of the heatmap argmax.
    pub point: [f64; 2],
    pub p_in: f64,
    pub sigma_primary: f64,
    pub sigma_reference: f64,
    /// `"primary"` or `"reference"`: whose gaze drove the FoV priors.
    pub chosen_view: String,
    #[serde(skip)]
    pub heatmap: Vec<f64>,
}

pub fn infer<T: Real>(model: &ToyModel<T>, input: &PairInput<T>) -> Result<Inference, NnError> {
    let (out, _) = model.forward(input, None)?;
    let o = &out.outputs[0];
    let heatmap: Vec<f64> = o.heatmap.iter().map(|v| v.as_f64()).collect();
    let point = decode_heatmap(&heatmap, HEATMAP_SIZE, HEATMAP_SIZE);
    let chosen_view = match &out.selection {
        Some(s) if s.chosen_view == "2" => "reference",
        _ => "primary",
    };
    Ok(Inference {
        point,
        p_in: o.p_in.as_f64(),
        sigma_primary: out.sigma(0).as_f64(),
        sigma_reference: out.sigma(1).as_f64(),
        chosen_view: chosen_view.into(),
        heatmap,
    })
}
