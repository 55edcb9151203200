//! Relevancy-weighted mini-batch training with holdout model selection.

use std::path::Path;

use ndarray::{Array1, ArrayD};

use crate::autodiff::{adam_step, AdamState, Tape, Var};
use crate::data::{relevancy_score, NormalizationParams, SampleSet};
use crate::error::{Error, Result};
use crate::models::{bind_model, forward, Model, ModelContext};
use crate::rng::Stream;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 regularization strength (lambda).
    pub weight_decay: f64,
    /// Fraction of the training samples held out for model selection.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning_rate and weight_decay must be non-negative"));
        }
        if !(0.0 < self.holdout_fraction && self.holdout_fraction < 1.0) {
            return Err(Error::config("holdout_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Per-epoch losses and the holdout-selected epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub holdout_loss: Vec<f64>,
    /// Epoch (0-based) whose parameters were returned; minimizes holdout
    /// loss, earliest epoch on ties.
    pub selected_epoch: usize,
    /// Samples whose relevancy scores were all zero (degenerate weighting).
    pub zero_score_samples: usize,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "holdout_loss", "selected"])?;
        for e in 0..self.train_loss.len() {
            w.write_record([
                e.to_string(),
                format!("{:.17e}", self.train_loss[e]),
                format!("{:.17e}", self.holdout_loss[e]),
                (e == self.selected_epoch).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(1/n) * || score ⊙ (pred - target) ||²`, recorded on the tape.
pub fn weighted_loss_var(
    tape: &mut Tape,
    pred: Var,
    target: &Array1<f64>,
    score: &Array1<f64>,
) -> Result<Var> {
    let n = target.len();
    let t = tape.constant(target.clone().into_dyn());
    let s = tape.constant(score.clone().into_dyn());
    let diff = tape.sub(pred, t)?;
    let weighted = tape.hadamard(s, diff)?;
    let sq = tape.square(weighted)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Eager twin of [`weighted_loss_var`] for completed predictions.
pub fn weighted_loss(pred: &Array1<f64>, target: &Array1<f64>, score: &Array1<f64>) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != score.len() {
        return Err(Error::domain(format!(
            "weighted_loss length mismatch: {} vs {} vs {}",
            pred.len(),
            target.len(),
            score.len()
        )));
    }
    let mut total = 0.0;
    for g in 0..pred.len() {
        let e = score[g] * (pred[g] - target[g]);
        total += e * e;
    }
    Ok(total / pred.len() as f64)
}

/// The random 1/5 holdout split, drawn once per run from the "holdout"
/// stream. Returns (gradient indices, holdout indices) in stable order.
fn split_holdout(indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled: Vec<usize> = indices.to_vec();
    Stream::new(seed, "holdout").shuffle(&mut shuffled);
    let holdout_len = ((indices.len() as f64) * fraction).floor() as usize;
    let holdout_len = holdout_len.min(indices.len().saturating_sub(1));
    let mut holdout: Vec<usize> = shuffled[..holdout_len].to_vec();
    let mut gradient: Vec<usize> = shuffled[holdout_len..].to_vec();
    holdout.sort_unstable();
    gradient.sort_unstable();
    (gradient, holdout)
}

/// Mean weighted loss over the given samples, no gradients.
pub fn mean_loss(
    model: &Model,
    ctx: &ModelContext,
    samples: &SampleSet<'_>,
    indices: &[usize],
    params: &NormalizationParams,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::domain("mean_loss over an empty index set"));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(64) {
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, model, ctx)?;
        for &t in chunk {
            let score = relevancy_score(samples.discharge_window(t).view(), params)?;
            let target = samples.target(t);
            let pred = forward(&mut tape, model, &bound, samples.window_flat(t))?;
            let loss = weighted_loss_var(&mut tape, pred, &target, &score)?;
            total += tape.scalar(loss);
        }
    }
    Ok(total / indices.len() as f64)
}

/// Predictions for the given sample indices, in order.
pub fn batch_predict(
    model: &Model,
    ctx: &ModelContext,
    samples: &SampleSet<'_>,
    indices: &[usize],
) -> Result<Vec<Array1<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, model, ctx)?;
        for &t in chunk {
            let pred = forward(&mut tape, model, &bound, samples.window_flat(t))?;
            out.push(tape.value(pred).iter().copied().collect());
        }
    }
    Ok(out)
}

/// Stochastic mini-batch descent over the training samples with Adam,
/// coupled L2, per-step clipping of learned edge weights, and holdout-based
/// selection of the returned parameters.
pub fn train(
    mut model: Model,
    ctx: &ModelContext,
    samples: &SampleSet<'_>,
    params: &NormalizationParams,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    let (gradient_set, holdout_set) =
        split_holdout(&samples.indices, config.holdout_fraction, config.seed);
    debug_assert!(gradient_set.iter().all(|t| !holdout_set.contains(t)));
    if holdout_set.is_empty() {
        log::warn!("holdout set is empty; selecting the final epoch");
    }

    let mut shuffle_stream = Stream::new(config.seed, "shuffle");
    let mut adam = AdamState::new(model.params());
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(config.epochs),
        holdout_loss: Vec::with_capacity(config.epochs),
        selected_epoch: 0,
        zero_score_samples: 0,
    };
    let mut best: Option<(f64, Vec<ArrayD<f64>>)> = None;

    let mut order = gradient_set.clone();
    for _epoch in 0..config.epochs {
        shuffle_stream.shuffle(&mut order);
        let mut epoch_loss_sum = 0.0;

        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &model, ctx)?;
            let mut losses = Vec::with_capacity(batch.len());
            for &t in batch {
                let score = relevancy_score(samples.discharge_window(t).view(), params)?;
                if score.iter().all(|&s| s == 0.0) {
                    history.zero_score_samples += 1;
                }
                let target = samples.target(t);
                let pred = forward(&mut tape, &model, &bound, samples.window_flat(t))?;
                losses.push(weighted_loss_var(&mut tape, pred, &target, &score)?);
            }
            let batch_loss = tape.mean_of(&losses)?;
            tape.backward(batch_loss)?;

            let grads: Vec<ArrayD<f64>> = bound
                .param_vars()
                .iter()
                .zip(model.params())
                .map(|(&v, p)| {
                    tape.grad(v)
                        .cloned()
                        .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
                })
                .collect();
            adam_step(
                model.params_mut(),
                &grads,
                &mut adam,
                config.learning_rate,
                config.weight_decay,
            )?;
            model.clip_learned_weights();

            epoch_loss_sum += tape.scalar(batch_loss) * batch.len() as f64;
        }

        let train_loss = epoch_loss_sum / gradient_set.len() as f64;
        let holdout_loss = if holdout_set.is_empty() {
            train_loss
        } else {
            mean_loss(&model, ctx, samples, &holdout_set, params)?
        };
        history.train_loss.push(train_loss);
        history.holdout_loss.push(holdout_loss);

        let is_better = match &best {
            Some((best_loss, _)) => holdout_loss < *best_loss,
            None => true,
        };
        if is_better {
            history.selected_epoch = history.holdout_loss.len() - 1;
            best = Some((holdout_loss, model.params().to_vec()));
        }
    }

    if history.zero_score_samples > 0 {
        log::warn!(
            "{} sample evaluations had all-zero relevancy scores",
            history.zero_score_samples
        );
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    for (slot, value) in model.params_mut().iter_mut().zip(best_params) {
        *slot = value;
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjacency::AdjacencyType;
    use crate::data::{extract_samples, zscore_normalize, NodeSignal, CHANNELS};
    use crate::graph::{EdgeAttrs, GaugeId, RiverGraph};
    use crate::models::{build_model, prepare_context, Architecture, ModelConfig};
    use ndarray::{arr1, Array3};

    fn toy_graph() -> RiverGraph {
        RiverGraph::from_edges([(1, 2, EdgeAttrs::new(2.0, 1.0))]).unwrap()
    }

    fn toy_signal(hours: usize) -> NodeSignal {
        let mut values = Array3::zeros((2, hours, CHANNELS));
        for g in 0..2 {
            for t in 0..hours {
                let x = t as f64;
                values[[g, t, 0]] = 4.0
                    + (x * 0.07 + g as f64).sin().abs() * 2.0
                    + (x * 0.011).cos() * 0.5
                    + 0.6;
                values[[g, t, 1]] = (x * 0.13).sin() * 0.5 + 1.0;
                values[[g, t, 2]] = (x * 0.03).cos() * 0.2 + 0.5;
                values[[g, t, 3]] = (x * 0.005).sin() * 8.0 + 10.0;
                values[[g, t, 4]] = (x * 0.001).cos() * 5.0 + 1000.0;
            }
        }
        NodeSignal {
            gauges: vec![GaugeId(1), GaugeId(2)],
            start: chrono::NaiveDate::from_ymd_opt(2000, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            values,
        }
    }

    fn toy_setup(
        arch: Architecture,
        adjacency: AdjacencyType,
        hours: usize,
    ) -> (RiverGraph, NodeSignal, ModelConfig) {
        let cfg = ModelConfig {
            arch,
            depth: 2,
            latent_dim: 6,
            window: 6,
            channels: CHANNELS,
            adjacency,
            orientation: crate::adjacency::EdgeOrientation::Downstream,
            ..ModelConfig::default()
        };
        (toy_graph(), toy_signal(hours), cfg)
    }

    #[test]
    fn weighted_loss_cases() {
        let pred = arr1(&[1.0, 2.0, 3.0]);
        assert_eq!(weighted_loss(&pred, &pred, &arr1(&[1.0, 1.0, 1.0])).unwrap(), 0.0);

        let target = arr1(&[0.0, 2.0, 3.0]);
        let loss = weighted_loss(&pred, &target, &arr1(&[1.0, 1.0, 1.0])).unwrap();
        assert!((loss - 1.0 / 3.0).abs() < 1e-15);

        let zero_scores = arr1(&[0.0, 0.0, 0.0]);
        assert_eq!(weighted_loss(&pred, &target, &zero_scores).unwrap(), 0.0);
    }

    #[test]
    fn loss_scales_quadratically_in_the_scores() {
        let pred = arr1(&[1.0, -0.5, 2.0]);
        let target = arr1(&[0.25, 0.5, -1.0]);
        let score = arr1(&[0.75, 1.25, 0.5]);
        let scaled: Array1<f64> = score.mapv(|s| 2.0 * s);
        let base = weighted_loss(&pred, &target, &score).unwrap();
        let quad = weighted_loss(&pred, &target, &scaled).unwrap();
        assert_eq!((4.0 * base).to_bits(), quad.to_bits());
    }

    #[test]
    fn holdout_split_is_disjoint_and_seeded() {
        let indices: Vec<usize> = (0..100).collect();
        let (g1, h1) = split_holdout(&indices, 0.2, 7);
        let (g2, h2) = split_holdout(&indices, 0.2, 7);
        assert_eq!(g1, g2);
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 20);
        assert_eq!(g1.len(), 80);
        for t in &h1 {
            assert!(!g1.contains(t));
        }
        let (g3, _) = split_holdout(&indices, 0.2, 8);
        assert_ne!(g1, g3);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_flat_history() {
        let (graph, signal, cfg) = toy_setup(Architecture::ResGcn, AdjacencyType::Binary, 200);
        let (normed, params) = zscore_normalize(&signal).unwrap();
        let samples = extract_samples(&normed, cfg.window, 2).unwrap();
        let mut stream = Stream::new(1, "init");
        let model = build_model(&cfg, &graph, &mut stream).unwrap();
        let before: Vec<ArrayD<f64>> = model.params().to_vec();
        let ctx = prepare_context(&cfg, &graph).unwrap();
        let tc = TrainConfig { epochs: 3, learning_rate: 0.0, seed: 5, ..TrainConfig::default() };
        let (trained, history) = train(model, &ctx, &samples, &params, &tc).unwrap();
        for (a, b) in before.iter().zip(trained.params()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for e in 1..history.train_loss.len() {
            // Reshuffling regroups identical per-sample losses into different
            // batch means, so the epoch average may move by rounding only.
            let rel = (history.train_loss[e] - history.train_loss[0]).abs()
                / history.train_loss[0].abs();
            assert!(rel < 1e-12, "train loss drifted: {rel}");
            assert_eq!(history.holdout_loss[e].to_bits(), history.holdout_loss[0].to_bits());
        }
        assert_eq!(history.selected_epoch, 0);
    }

    #[test]
    fn training_reduces_holdout_loss_on_a_toy_problem() {
        let (graph, signal, cfg) = toy_setup(Architecture::Gcnii, AdjacencyType::Binary, 400);
        let (normed, params) = zscore_normalize(&signal).unwrap();
        let samples = extract_samples(&normed, cfg.window, 2).unwrap();
        let mut stream = Stream::new(2, "init");
        let model = build_model(&cfg, &graph, &mut stream).unwrap();
        let ctx = prepare_context(&cfg, &graph).unwrap();
        let tc = TrainConfig {
            epochs: 12,
            learning_rate: 3e-3,
            seed: 6,
            ..TrainConfig::default()
        };
        let (_, history) = train(model, &ctx, &samples, &params, &tc).unwrap();
        let first = history.holdout_loss[0];
        let last_best = history.holdout_loss[history.selected_epoch];
        assert!(
            last_best < first,
            "holdout did not improve: first {first}, best {last_best}"
        );
    }

    #[test]
    fn same_seed_gives_bitwise_identical_history() {
        let run = || {
            let (graph, signal, cfg) =
                toy_setup(Architecture::ResGcn, AdjacencyType::Learned, 150);
            let (normed, params) = zscore_normalize(&signal).unwrap();
            let samples = extract_samples(&normed, cfg.window, 2).unwrap();
            let mut stream = Stream::new(3, "init");
            let model = build_model(&cfg, &graph, &mut stream).unwrap();
            let ctx = prepare_context(&cfg, &graph).unwrap();
            let tc = TrainConfig {
                epochs: 4,
                learning_rate: 1e-3,
                seed: 9,
                ..TrainConfig::default()
            };
            train(model, &ctx, &samples, &params, &tc).unwrap()
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1.selected_epoch, h2.selected_epoch);
        for (a, b) in h1.train_loss.iter().zip(&h2.train_loss) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in h1.holdout_loss.iter().zip(&h2.holdout_loss) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (x, y) in m1.params().iter().zip(m2.params()) {
            for (a, b) in x.iter().zip(y.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn learned_weights_stay_non_negative_through_training() {
        let (graph, signal, cfg) = toy_setup(Architecture::ResGcn, AdjacencyType::Learned, 200);
        let (normed, params) = zscore_normalize(&signal).unwrap();
        let samples = extract_samples(&normed, cfg.window, 2).unwrap();
        let mut stream = Stream::new(4, "init");
        let model = build_model(&cfg, &graph, &mut stream).unwrap();
        let ctx = prepare_context(&cfg, &graph).unwrap();
        let tc = TrainConfig {
            epochs: 8,
            learning_rate: 5e-2,
            seed: 10,
            ..TrainConfig::default()
        };
        let (trained, _) = train(model, &ctx, &samples, &params, &tc).unwrap();
        let omega = trained.learned_edge_weights().unwrap();
        assert!(omega.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn full_batch_gradient_equals_averaged_per_sample_gradients() {
        // The oracle accumulates per-sample gradients seeded with 1/B in the
        // batch tape's reverse recording order; sums must match bitwise.
        let (graph, signal, cfg) = toy_setup(Architecture::ResGcn, AdjacencyType::Binary, 60);
        let (normed, params) = zscore_normalize(&signal).unwrap();
        let samples = extract_samples(&normed, cfg.window, 2).unwrap();
        let mut stream = Stream::new(8, "init");
        let model = build_model(&cfg, &graph, &mut stream).unwrap();
        let ctx = prepare_context(&cfg, &graph).unwrap();
        let batch: Vec<usize> = samples.indices[..8].to_vec();
        let b = batch.len();

        // Full-batch gradients.
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &model, &ctx).unwrap();
        let mut losses = Vec::new();
        for &t in &batch {
            let score = relevancy_score(samples.discharge_window(t).view(), &params).unwrap();
            let target = samples.target(t);
            let pred = forward(&mut tape, &model, &bound, samples.window_flat(t)).unwrap();
            losses.push(weighted_loss_var(&mut tape, pred, &target, &score).unwrap());
        }
        let batch_loss = tape.mean_of(&losses).unwrap();
        tape.backward(batch_loss).unwrap();
        let full: Vec<ArrayD<f64>> = bound
            .param_vars()
            .iter()
            .zip(model.params())
            .map(|(&v, p)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
            })
            .collect();

        // Oracle: isolated per-sample tapes, reverse order, seed 1/B each.
        let seed = 1.0 / b as f64;
        let mut acc: Vec<ArrayD<f64>> =
            model.params().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        for &t in batch.iter().rev() {
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, &model, &ctx).unwrap();
            let score = relevancy_score(samples.discharge_window(t).view(), &params).unwrap();
            let target = samples.target(t);
            let pred = forward(&mut tape, &model, &bound, samples.window_flat(t)).unwrap();
            let loss = weighted_loss_var(&mut tape, pred, &target, &score).unwrap();
            tape.backward_seeded(loss, seed).unwrap();
            for (slot, &v) in acc.iter_mut().zip(bound.param_vars()) {
                if let Some(g) = tape.grad(v) {
                    *slot += g;
                }
            }
        }

        for (pi, (a, b)) in full.iter().zip(&acc).enumerate() {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(
                    x.to_bits(),
                    y.to_bits(),
                    "param {pi}: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn history_csv_round_trips_shape() {
        let history = TrainHistory {
            train_loss: vec![0.5, 0.25],
            holdout_loss: vec![0.6, 0.3],
            selected_epoch: 1,
            zero_score_samples: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        history.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_loss,holdout_loss,selected");
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().ends_with("true"));
    }
}
