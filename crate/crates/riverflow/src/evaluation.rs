//! Weighted Nash-Sutcliffe evaluation, cross-validation over the year-based
//! splits, learned-weight statistics and worst-window diagnostics.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::{
    extract_samples, make_splits, relevancy_score, renormalize_with_mask, unnormalize, NodeSignal,
    NormalizationParams, SampleSet, SplitSpec, DISCHARGE,
};
use crate::error::{Error, Result};
use crate::graph::{GaugeId, RiverGraph};
use crate::models::{build_model, prepare_context, Model, ModelConfig};
use crate::rng::{derive_seed, Stream};
use crate::training::{batch_predict, train, TrainConfig, TrainHistory};

/// Per-gauge weighted NSE for one fold. A gauge whose weighted baseline error
/// is zero has an undefined score and is excluded from the summary.
#[derive(Clone, Debug)]
pub struct NseReport {
    pub gauges: Vec<GaugeId>,
    pub per_gauge: Vec<Option<f64>>,
    /// Arithmetic mean over the defined per-gauge values, in gauge order.
    pub summary: Option<f64>,
    pub excluded: usize,
}

impl NseReport {
    fn from_parts(gauges: Vec<GaugeId>, per_gauge: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = per_gauge.iter().filter_map(|&x| x).collect();
        let excluded = per_gauge.len() - defined.len();
        if excluded > 0 {
            log::warn!("{excluded} gauges had an undefined NSE (zero weighted baseline error)");
        }
        let summary = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        NseReport { gauges, per_gauge, summary, excluded }
    }
}

/// Weighted and unweighted NSE over aligned test predictions.
///
/// Predictions and targets are on the normalized scale and are unnormalized
/// here; the baseline is the per-gauge training mean. Each sample's residuals
/// are weighted by the relevancy score of its input window (the unweighted
/// variant fixes all scores at one).
pub fn weighted_nse(
    preds: &[Array1<f64>],
    samples: &SampleSet<'_>,
    indices: &[usize],
    params: &NormalizationParams,
) -> Result<(NseReport, NseReport)> {
    if preds.len() != indices.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} test samples",
            preds.len(),
            indices.len()
        )));
    }
    let n = samples.signal.gauge_count();
    let mut num_w = vec![0.0; n];
    let mut den_w = vec![0.0; n];
    let mut num_u = vec![0.0; n];
    let mut den_u = vec![0.0; n];

    for (pred, &t) in preds.iter().zip(indices) {
        if pred.len() != n {
            return Err(Error::domain("prediction length does not match gauge count"));
        }
        let score = relevancy_score(samples.discharge_window(t).view(), params)?;
        let target = samples.target(t);
        let pred_star = unnormalize(pred.view(), params);
        let target_star = unnormalize(target.view(), params);
        for g in 0..n {
            let mu = params.mu[[g, DISCHARGE]];
            let err = pred_star[g] - target_star[g];
            let base = mu - target_star[g];
            num_w[g] += score[g] * (err * err);
            den_w[g] += score[g] * (base * base);
            num_u[g] += err * err;
            den_u[g] += base * base;
        }
    }

    let gauges = samples.signal.gauges.clone();
    let nse = |num: &[f64], den: &[f64]| -> Vec<Option<f64>> {
        num.iter()
            .zip(den)
            .map(|(&n, &d)| if d == 0.0 { None } else { Some(1.0 - n / d) })
            .collect()
    };
    Ok((
        NseReport::from_parts(gauges.clone(), nse(&num_w, &den_w)),
        NseReport::from_parts(gauges, nse(&num_u, &den_u)),
    ))
}

/// Whether normalization parameters are estimated on the full series (the
/// default) or on the training hours of each fold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    #[default]
    Full,
    TrainOnly,
}

/// Everything produced by one trained fold.
#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: String,
    pub history: TrainHistory,
    pub report: NseReport,
    pub report_unweighted: NseReport,
    pub model: Model,
    /// Unnormalized predictions aligned with `test_indices`.
    pub predictions: Vec<Array1<f64>>,
    /// Unnormalized observed discharge aligned with `test_indices`.
    pub observations: Vec<Array1<f64>>,
    pub test_indices: Vec<usize>,
    /// True when the canonical train years were empty on this series and the
    /// fold fell back to all pre-test samples.
    pub train_years_fallback: bool,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub mean_summary: f64,
    /// Sample standard deviation across folds (denominator folds - 1).
    pub std_summary: f64,
    pub mean_summary_unweighted: f64,
    pub std_summary_unweighted: f64,
}

pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Trains one model per split and aggregates the summary NSE across folds.
///
/// Fold seeds derive from the root seed and the fold name, so folds are
/// independent and the whole run is reproducible regardless of scheduling.
/// When a canonical split has no train years on a short synthetic series,
/// the fold falls back to every sample preceding the test years (the folds
/// then differ by their random streams only).
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    graph: &RiverGraph,
    signal: &NodeSignal,
    params: &NormalizationParams,
    model_cfg: &ModelConfig,
    lead: usize,
    train_cfg: &TrainConfig,
    splits: &[SplitSpec],
    scope: NormalizationScope,
) -> Result<CrossValidation> {
    if splits.is_empty() {
        return Err(Error::config("cross-validation needs at least one split"));
    }
    let mut folds = Vec::with_capacity(splits.len());
    for spec in splits {
        folds.push(run_fold(graph, signal, params, model_cfg, lead, train_cfg, spec, scope)?);
    }
    let summaries: Vec<f64> = folds
        .iter()
        .map(|f| {
            f.report
                .summary
                .ok_or_else(|| Error::numeric(format!("fold '{}' has no defined NSE", f.fold)))
        })
        .collect::<Result<_>>()?;
    let summaries_u: Vec<f64> = folds
        .iter()
        .filter_map(|f| f.report_unweighted.summary)
        .collect();
    let (mean_summary, std_summary) = mean_and_sample_std(&summaries);
    let (mean_summary_unweighted, std_summary_unweighted) = mean_and_sample_std(&summaries_u);
    Ok(CrossValidation {
        folds,
        mean_summary,
        std_summary,
        mean_summary_unweighted,
        std_summary_unweighted,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    graph: &RiverGraph,
    signal: &NodeSignal,
    params: &NormalizationParams,
    model_cfg: &ModelConfig,
    lead: usize,
    train_cfg: &TrainConfig,
    spec: &SplitSpec,
    scope: NormalizationScope,
) -> Result<FoldResult> {
    use chrono::Datelike;

    let fold_seed = derive_seed(train_cfg.seed, &format!("fold/{}", spec.name));

    // Train-only normalization re-estimates the parameters per fold.
    let owned: Option<(NodeSignal, NormalizationParams)> = match scope {
        NormalizationScope::Full => None,
        NormalizationScope::TrainOnly => {
            let mask: Vec<bool> = (0..signal.hours())
                .map(|t| spec.train_years.contains(&signal.timestamp(t).year()))
                .collect();
            if mask.iter().any(|&m| m) {
                Some(renormalize_with_mask(signal, params, &mask)?)
            } else {
                log::warn!(
                    "fold '{}': no train-year hours for train-only normalization; using full-series parameters",
                    spec.name
                );
                None
            }
        }
    };
    let (signal_f, params_f) = match &owned {
        Some((s, p)) => (s, p),
        None => (signal, params),
    };

    let samples = extract_samples(signal_f, model_cfg.window, lead)?;
    let (mut train_set, test_set, _) = make_splits(&samples, spec)?;
    if test_set.is_empty() {
        return Err(Error::data(format!(
            "fold '{}' has no test samples; the series must cover the test years",
            spec.name
        )));
    }
    let mut fallback = false;
    if train_set.is_empty() {
        // Short series: train on everything strictly before the test years.
        let min_test = *spec.test_years.iter().next().expect("validated non-empty");
        let indices: Vec<usize> = samples
            .indices
            .iter()
            .copied()
            .filter(|&t| samples.target_time(t).year() < min_test)
            .collect();
        if indices.is_empty() {
            return Err(Error::data(format!(
                "fold '{}' has no usable training samples",
                spec.name
            )));
        }
        log::warn!(
            "fold '{}': no samples in the canonical train years; training on all {} pre-test samples",
            spec.name,
            indices.len()
        );
        train_set = SampleSet { indices, ..train_set };
        fallback = true;
    }

    let mut init_stream = Stream::new(fold_seed, "init");
    let model = build_model(model_cfg, graph, &mut init_stream)?;
    let ctx = prepare_context(model_cfg, graph)?;
    let fold_train_cfg = TrainConfig { seed: fold_seed, ..train_cfg.clone() };
    let (model, history) = train(model, &ctx, &train_set, params_f, &fold_train_cfg)?;

    let preds_norm = batch_predict(&model, &ctx, &test_set, &test_set.indices)?;
    let (report, report_unweighted) =
        weighted_nse(&preds_norm, &test_set, &test_set.indices, params_f)?;

    let predictions: Vec<Array1<f64>> = preds_norm
        .iter()
        .map(|p| unnormalize(p.view(), params_f))
        .collect();
    let observations: Vec<Array1<f64>> = test_set
        .indices
        .iter()
        .map(|&t| unnormalize(test_set.target(t).view(), params_f))
        .collect();

    Ok(FoldResult {
        fold: spec.name.clone(),
        history,
        report,
        report_unweighted,
        model,
        predictions,
        observations,
        test_indices: test_set.indices.clone(),
        train_years_fallback: fallback,
    })
}

/// Pearson correlation coefficient; `None` when either side has zero
/// variance (undefined).
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "pearson_corr length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::domain("pearson_corr needs at least two points"));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (var_a.sqrt() * var_b.sqrt())))
}

/// Distribution summary of a learned edge-weight vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Moments and linear-interpolation quantiles; errors on an empty vector.
pub fn weight_stats(omega: &[f64]) -> Result<WeightStats> {
    if omega.is_empty() {
        return Err(Error::domain("weight_stats of an empty vector"));
    }
    let mut sorted = omega.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    let quantile = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        if lo + 1 < sorted.len() {
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        } else {
            sorted[lo]
        }
    };
    let (mean, std) = mean_and_sample_std(omega);
    Ok(WeightStats {
        mean,
        std,
        min: sorted[0],
        q25: quantile(0.25),
        median: quantile(0.5),
        q75: quantile(0.75),
        max: *sorted.last().expect("non-empty"),
    })
}

/// Greedy selection of up to `k` pairwise disjoint horizon-length windows
/// with the largest summed squared deviation, best first.
pub fn worst_windows(
    predictions: &[f64],
    truth: &[f64],
    horizon: usize,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if predictions.len() != truth.len() {
        return Err(Error::domain("worst_windows needs aligned series"));
    }
    let len = predictions.len();
    if horizon == 0 || horizon > len {
        return Err(Error::domain(format!(
            "horizon {horizon} does not fit a series of length {len}"
        )));
    }
    // Deviation per start via a sliding sum.
    let sq: Vec<f64> = predictions
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p - t) * (p - t))
        .collect();
    let starts = len - horizon + 1;
    let mut deviation = Vec::with_capacity(starts);
    let mut acc: f64 = sq[..horizon].iter().sum();
    deviation.push(acc);
    for s in 1..starts {
        acc += sq[s + horizon - 1] - sq[s - 1];
        deviation.push(acc);
    }

    let mut taken: Vec<(usize, f64)> = Vec::new();
    let mut blocked = vec![false; starts];
    while taken.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for (s, &d) in deviation.iter().enumerate() {
            if blocked[s] {
                continue;
            }
            let better = match best {
                Some((_, bd)) => d > bd,
                None => true,
            };
            if better {
                best = Some((s, d));
            }
        }
        let Some((s, d)) = best else { break };
        taken.push((s, d));
        let lo = s.saturating_sub(horizon - 1);
        let hi = (s + horizon).min(starts);
        for b in blocked.iter_mut().take(hi).skip(lo) {
            *b = true;
        }
    }
    Ok(taken)
}
