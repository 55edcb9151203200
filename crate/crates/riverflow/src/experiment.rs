//! Pipeline orchestration: synthesize or ingest data, preprocess into a
//! cached signal plus reduced graph, run the topology-comparison grid, and
//! leave deterministic artifacts on disk.
//!
//! Every unit of work derives its own seed from the root seed and a label,
//! so grid cells can run in any order (or in parallel) and still produce
//! byte-identical outputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjacency::{AdjacencyType, EdgeOrientation};
use crate::data::io::{load_cache, load_gauge_csvs, save_cache};
use crate::data::{interpolate_gaps, zscore_normalize, NodeSignal, NormalizationParams, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    cross_validate, pearson_corr, weight_stats, CrossValidation, NormalizationScope,
};
use crate::graph::{load_graph_csv, save_graph_csv, GaugeId, RiverGraph};
use crate::models::{Architecture, ModelConfig};
use crate::rng::derive_seed;
use crate::synth::{generate_network, generate_signals, write_dataset, NetworkPreset, SynthConfig};
use crate::training::TrainConfig;

pub const CACHE_FILE: &str = "cache.rfsc";
pub const RESULTS_FILE: &str = "results.csv";
pub const CORRELATIONS_FILE: &str = "correlations.csv";
pub const WEIGHT_STATS_FILE: &str = "weight_stats.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A scalar or a list; lets grid axes be written as `architecture = "gcnii"`
/// or `architecture = ["resgcn", "gcnii"]` under the same key.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(xs) => xs.clone(),
        }
    }
}

fn default_jobs() -> usize {
    1
}
fn default_window() -> usize {
    24
}
fn default_lead() -> usize {
    6
}
fn default_arch() -> OneOrMany<String> {
    OneOrMany::One("gcnii".into())
}
fn default_adjacency() -> OneOrMany<String> {
    OneOrMany::One("binary".into())
}
fn default_direction() -> OneOrMany<String> {
    OneOrMany::One("bidirected".into())
}
fn default_depth() -> usize {
    19
}
fn default_latent() -> usize {
    128
}
fn default_alpha() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    0.5
}
fn default_heads() -> usize {
    1
}
fn default_slope() -> f64 {
    0.2
}
fn default_init() -> String {
    "kaiming".into()
}
fn default_optimiser() -> String {
    "adam".into()
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-4
}
fn default_reg() -> f64 {
    1e-5
}
fn default_holdout() -> f64 {
    0.2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Preprocessed directory (cache plus reduced graph).
    pub dir: PathBuf,
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_lead")]
    pub lead_time: usize,
    #[serde(default)]
    pub normalisation_scope: NormalizationScope,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_arch")]
    pub architecture: OneOrMany<String>,
    #[serde(default = "default_adjacency")]
    pub adjacency_type: OneOrMany<String>,
    #[serde(default = "default_direction")]
    pub edge_direction: OneOrMany<String>,
    #[serde(default = "default_depth")]
    pub network_depth: usize,
    #[serde(default = "default_latent")]
    pub latent_space_dim: usize,
    #[serde(default = "default_alpha")]
    pub gcnii_alpha: f64,
    #[serde(default = "default_lambda")]
    pub gcnii_lambda: f64,
    #[serde(default = "default_heads")]
    pub gat_heads: usize,
    #[serde(default = "default_slope")]
    pub gat_leaky_slope: f64,
    /// Fixed to the only supported scheme; present for discoverability.
    #[serde(default = "default_init")]
    pub initialisation: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_optimiser")]
    pub optimiser: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_reg")]
    pub regularisation_strength: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub window_size: Vec<usize>,
    pub lead_time: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("bad config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.window_size < 3 {
            return Err(Error::config("window_size must be at least 3"));
        }
        if self.data.lead_time == 0 {
            return Err(Error::config("lead_time must be positive"));
        }
        if self.model.initialisation != "kaiming" {
            return Err(Error::config(format!(
                "initialisation '{}' is not supported (only 'kaiming')",
                self.model.initialisation
            )));
        }
        if self.training.optimiser != "adam" {
            return Err(Error::config(format!(
                "optimiser '{}' is not supported (only 'adam')",
                self.training.optimiser
            )));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        self.grid_cells()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            weight_decay: self.training.regularisation_strength,
            holdout_fraction: self.training.holdout_fraction,
            seed: self.seed,
        }
    }

    pub fn model_config(
        &self,
        arch: Architecture,
        adjacency: AdjacencyType,
        orientation: EdgeOrientation,
        window: usize,
    ) -> ModelConfig {
        ModelConfig {
            arch,
            depth: self.model.network_depth,
            latent_dim: self.model.latent_space_dim,
            window,
            channels: crate::data::CHANNELS,
            adjacency,
            orientation,
            gcnii_alpha: self.model.gcnii_alpha,
            gcnii_lambda: self.model.gcnii_lambda,
            gat_heads: self.model.gat_heads,
            gat_leaky_slope: self.model.gat_leaky_slope,
        }
    }

    /// Expands the requested grid axes into concrete cells, applying the
    /// attention substitution (learned -> all physical weights jointly) and
    /// rejecting illegal pairs.
    pub fn grid_cells(&self) -> Result<Vec<GridCell>> {
        let archs: Vec<Architecture> = self
            .model
            .architecture
            .to_vec()
            .iter()
            .map(|s| Architecture::parse(s))
            .collect::<Result<_>>()?;
        let adjacencies: Vec<AdjacencyType> = self
            .model
            .adjacency_type
            .to_vec()
            .iter()
            .map(|s| AdjacencyType::parse(s))
            .collect::<Result<_>>()?;
        let orientations: Vec<EdgeOrientation> = self
            .model
            .edge_direction
            .to_vec()
            .iter()
            .map(|s| EdgeOrientation::parse(s))
            .collect::<Result<_>>()?;

        let mut cells = Vec::new();
        for &arch in &archs {
            for &requested in &adjacencies {
                let effective = match (arch, requested) {
                    (Architecture::ResGat, AdjacencyType::Learned) => AdjacencyType::AllPhysical,
                    (a, AdjacencyType::AllPhysical) if a != Architecture::ResGat => {
                        return Err(Error::config(
                            "adjacency type 'all_physical' is only available with resgat",
                        ));
                    }
                    (_, other) => other,
                };
                for &orientation in &orientations {
                    let cell = GridCell { arch, adjacency: effective, orientation };
                    if !cells.contains(&cell) {
                        cells.push(cell);
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// One entry of the topology grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridCell {
    pub arch: Architecture,
    pub adjacency: AdjacencyType,
    pub orientation: EdgeOrientation,
}

impl GridCell {
    pub fn dir_name(&self) -> String {
        format!(
            "{}_{}_{}",
            self.arch.name(),
            self.adjacency.name(),
            self.orientation.name()
        )
    }

    /// The computation behind isolated cells ignores the orientation, so all
    /// three share one training keyed to the downstream name.
    pub fn run_key(&self) -> GridCell {
        if self.adjacency == AdjacencyType::Isolated {
            GridCell { orientation: EdgeOrientation::Downstream, ..*self }
        } else {
            *self
        }
    }
}

/// Writes a synthetic dataset (graph plus per-gauge CSVs) into `out_dir`.
/// Refuses to touch a non-empty directory unless `force` is set.
pub fn cmd_synth(
    config: &SynthConfig,
    preset: Option<NetworkPreset>,
    out_dir: &Path,
    force: bool,
) -> Result<RiverGraph> {
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::data(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out_dir.display()
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    let graph = generate_network(config, preset)?;
    let signal = generate_signals(&graph, config)?;
    write_dataset(out_dir, &graph, &signal)?;
    Ok(graph)
}

/// Counts mirroring the preprocessing narrative.
#[derive(Clone, Debug, Serialize)]
pub struct PreprocessReport {
    pub nodes_before: usize,
    pub nodes_after_dfs: usize,
    pub nodes_after_filter: usize,
    pub interpolated_values: usize,
    pub removed_gauges: Vec<u64>,
}

impl PreprocessReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "nodes_before",
            "nodes_after_dfs",
            "nodes_after_filter",
            "interpolated_values",
            "removed_gauges",
        ])?;
        let removed: Vec<String> = self.removed_gauges.iter().map(|g| g.to_string()).collect();
        w.write_record([
            self.nodes_before.to_string(),
            self.nodes_after_dfs.to_string(),
            self.nodes_after_filter.to_string(),
            self.interpolated_values.to_string(),
            removed.join(" "),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Region selection from the sink, gap interpolation, gauge filtering by
/// data coverage, normalization, and the binary cache write.
pub fn cmd_preprocess(
    data_dir: &Path,
    sink: Option<GaugeId>,
    out_dir: &Path,
) -> Result<PreprocessReport> {
    let graph = load_graph_csv(data_dir)?;
    let violations = graph.validate();
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::integrity(format!(
            "ingested graph is not a valid river network:\n  {}",
            lines.join("\n  ")
        )));
    }

    let sink = match sink {
        Some(s) => {
            if !graph.contains(s) {
                return Err(Error::data(format!("sink gauge {s} is not in the graph")));
            }
            s
        }
        None => {
            let sinks = graph.sinks();
            match sinks.as_slice() {
                [only] => *only,
                _ => {
                    return Err(Error::data(format!(
                        "graph has {} sinks; pass an explicit sink gauge",
                        sinks.len()
                    )))
                }
            }
        }
    };

    let nodes_before = graph.node_count();
    let region = graph.inverse_dfs(sink)?;
    let regional_graph = graph.induced(&region);
    let nodes_after_dfs = regional_graph.node_count();

    let mut signal = load_gauge_csvs(data_dir, &region)?;
    let gap_report = interpolate_gaps(&mut signal)?;
    let incomplete = gap_report.affected_gauges();
    if incomplete.contains(&sink) {
        return Err(Error::data(format!(
            "sink gauge {sink} has incomplete discharge data"
        )));
    }

    let filtered_graph = regional_graph.filter_gauges(|g| !incomplete.contains(&g))?;
    let kept: BTreeSet<GaugeId> = filtered_graph.node_ids().collect();
    let signal = signal.select_gauges(&kept)?;
    let (normalized, params) = zscore_normalize(&signal)?;

    fs::create_dir_all(out_dir)?;
    save_cache(&out_dir.join(CACHE_FILE), &normalized, &params)?;
    save_graph_csv(&filtered_graph, out_dir)?;
    let report = PreprocessReport {
        nodes_before,
        nodes_after_dfs,
        nodes_after_filter: filtered_graph.node_count(),
        interpolated_values: gap_report.filled_values,
        removed_gauges: incomplete.iter().map(|g| g.0).collect(),
    };
    report.write_csv(&out_dir.join("preprocess_report.csv"))?;
    Ok(report)
}

/// A finished grid cell: one cross-validation plus its artifact locations.
pub struct CellOutcome {
    pub cell: GridCell,
    pub cv: CrossValidation,
}

/// Summary of a grid run; failures keep the successful cells intact.
pub struct GridOutcome {
    pub results_path: PathBuf,
    pub failed: Vec<(String, String)>,
}

/// Loads the preprocessed directory referenced by the config.
pub fn load_preprocessed(dir: &Path) -> Result<(RiverGraph, NodeSignal, NormalizationParams)> {
    let graph = load_graph_csv(dir)?;
    let (signal, params) = load_cache(&dir.join(CACHE_FILE))?;
    let graph_nodes: Vec<GaugeId> = graph.node_ids().collect();
    if graph_nodes != signal.gauges {
        return Err(Error::data(
            "cached signal gauges do not match the preprocessed graph",
        ));
    }
    Ok((graph, signal, params))
}

/// Runs the whole grid into `out_dir`. With a sweep section, each
/// (window, lead) combination lands in its own `sweep_W<w>_L<l>` subgroup
/// next to the base run.
pub fn cmd_run(config: &ExperimentConfig, out_dir: &Path) -> Result<GridOutcome> {
    config.validate()?;
    let (graph, signal, params) = load_preprocessed(&config.data.dir)?;
    fs::create_dir_all(out_dir)?;

    write_manifest(config, &graph, out_dir)?;

    let mut groups = vec![(config.data.window_size, config.data.lead_time, out_dir.to_path_buf())];
    if let Some(sweep) = &config.sweep {
        for &w in &sweep.window_size {
            for &l in &sweep.lead_time {
                if (w, l) == (config.data.window_size, config.data.lead_time) {
                    continue;
                }
                groups.push((w, l, out_dir.join(format!("sweep_W{w}_L{l}"))));
            }
        }
    }

    let mut all_failed = Vec::new();
    let mut base_results = out_dir.join(RESULTS_FILE);
    for (window, lead, group_dir) in groups {
        let outcome = run_grid_group(config, &graph, &signal, &params, window, lead, &group_dir)?;
        if group_dir == out_dir {
            base_results = outcome.results_path.clone();
        }
        all_failed.extend(outcome.failed);
    }
    Ok(GridOutcome { results_path: base_results, failed: all_failed })
}

fn write_manifest(config: &ExperimentConfig, graph: &RiverGraph, out_dir: &Path) -> Result<()> {
    let manifest = serde_json::json!({
        "seed": config.seed,
        "graph_sha256": graph.content_hash(),
        "config": config,
    });
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("cannot serialize manifest: {e}")))?;
    fs::write(out_dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

fn run_grid_group(
    config: &ExperimentConfig,
    graph: &RiverGraph,
    signal: &NodeSignal,
    params: &NormalizationParams,
    window: usize,
    lead: usize,
    out_dir: &Path,
) -> Result<GridOutcome> {
    fs::create_dir_all(out_dir)?;
    let cells = config.grid_cells()?;

    // Unique computations: isolated cells share one run across orientations.
    let mut keys: Vec<GridCell> = Vec::new();
    for cell in &cells {
        let key = cell.run_key();
        if !keys.contains(&key) {
            keys.push(key);
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
    let outcomes: Vec<(GridCell, Result<CellOutcome>)> = pool.install(|| {
        keys.par_iter()
            .map(|&key| (key, run_cell(config, graph, signal, params, window, lead, key, out_dir)))
            .collect()
    });

    let mut completed: Vec<&CellOutcome> = Vec::new();
    let mut failed = Vec::new();
    for (key, outcome) in &outcomes {
        match outcome {
            Ok(done) => completed.push(done),
            Err(e) => failed.push((key.dir_name(), e.to_string())),
        }
    }

    write_results_csv(&cells, &completed, &out_dir.join(RESULTS_FILE))?;
    write_correlations_csv(graph, &completed, &out_dir.join(CORRELATIONS_FILE))?;
    write_weight_stats_csv(&completed, &out_dir.join(WEIGHT_STATS_FILE))?;
    if !failed.is_empty() {
        failed.sort();
        let mut w = csv::Writer::from_path(out_dir.join(FAILURES_FILE))?;
        w.write_record(["cell", "error"])?;
        for (cell, error) in &failed {
            w.write_record([cell, error])?;
        }
        w.flush()?;
    }
    Ok(GridOutcome { results_path: out_dir.join(RESULTS_FILE), failed })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    graph: &RiverGraph,
    signal: &NodeSignal,
    params: &NormalizationParams,
    window: usize,
    lead: usize,
    key: GridCell,
    out_dir: &Path,
) -> Result<CellOutcome> {
    let model_cfg = config.model_config(key.arch, key.adjacency, key.orientation, window);
    let cell_seed = derive_seed(config.seed, &format!("cell/W{window}/L{lead}/{}", key.dir_name()));
    let train_cfg = TrainConfig { seed: cell_seed, ..config.train_config() };
    let splits = SplitSpec::canonical_folds();
    let cv = cross_validate(
        graph,
        signal,
        params,
        &model_cfg,
        lead,
        &train_cfg,
        &splits,
        config.data.normalisation_scope,
    )?;

    let cell_dir = out_dir.join("cells").join(key.dir_name());
    for fold in &cv.folds {
        let fold_dir = cell_dir.join(format!("fold_{}", fold.fold));
        fs::create_dir_all(&fold_dir)?;
        fold.history.write_csv(&fold_dir.join("history.csv"))?;
        fold.model.save(&fold_dir.join("model.rftc"))?;

        let mut w = csv::Writer::from_path(fold_dir.join("per_gauge_nse.csv"))?;
        w.write_record(["gauge", "nse", "nse_unweighted"])?;
        for (i, gauge) in fold.report.gauges.iter().enumerate() {
            let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                gauge.to_string(),
                fmt(fold.report.per_gauge[i]),
                fmt(fold.report_unweighted.per_gauge[i]),
            ])?;
        }
        w.flush()?;

        let n = signal.gauge_count();
        let s = fold.predictions.len();
        let mut preds = Array2::<f64>::zeros((s, n));
        let mut obs = Array2::<f64>::zeros((s, n));
        for (row, (p, o)) in fold.predictions.iter().zip(&fold.observations).enumerate() {
            preds.row_mut(row).assign(p);
            obs.row_mut(row).assign(o);
        }
        let gauges: ndarray::Array1<f64> =
            signal.gauges.iter().map(|g| g.0 as f64).collect();
        crate::autodiff::save_tensors(
            &fold_dir.join("predictions.rftc"),
            &[
                ("predictions".into(), preds.into_dyn()),
                ("observations".into(), obs.into_dyn()),
                ("gauges".into(), gauges.into_dyn()),
            ],
        )?;
    }
    Ok(CellOutcome { cell: key, cv })
}

fn write_results_csv(
    cells: &[GridCell],
    completed: &[&CellOutcome],
    path: &Path,
) -> Result<()> {
    let mut rows: Vec<[String; 6]> = Vec::new();
    for cell in cells {
        let key = cell.run_key();
        let Some(outcome) = completed.iter().find(|o| o.cell == key) else {
            continue;
        };
        for fold in &outcome.cv.folds {
            let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            rows.push([
                cell.arch.name().to_string(),
                cell.adjacency.name().to_string(),
                cell.orientation.name().to_string(),
                fold.fold.clone(),
                fmt(fold.report.summary),
                fmt(fold.report_unweighted.summary),
            ]);
        }
    }
    rows.sort();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "arch",
        "adjacency",
        "orientation",
        "fold",
        "summary_nse",
        "summary_nse_unweighted",
    ])?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Pools learned weights across folds and correlates them with each physical
/// weight of the underlying (oriented) edges.
fn write_correlations_csv(
    graph: &RiverGraph,
    completed: &[&CellOutcome],
    path: &Path,
) -> Result<()> {
    let mut rows: Vec<[String; 4]> = Vec::new();
    for outcome in completed {
        if outcome.cell.adjacency != AdjacencyType::Learned {
            continue;
        }
        let edges = crate::adjacency::oriented_edges(graph, outcome.cell.orientation);
        let mut pooled: Vec<f64> = Vec::new();
        let mut physical: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for fold in &outcome.cv.folds {
            let omega = fold
                .model
                .learned_edge_weights()
                .ok_or_else(|| Error::domain("learned cell without edge weights"))?;
            pooled.extend(omega.iter().copied());
            for e in &edges {
                physical[0].push(e.attrs.stream_length);
                physical[1].push(e.attrs.elevation_diff);
                physical[2].push(e.attrs.avg_slope);
            }
        }
        for (name, phys) in ["stream_length", "elevation_difference", "average_slope"]
            .iter()
            .zip(&physical)
        {
            let r = pearson_corr(&pooled, phys)?;
            rows.push([
                outcome.cell.arch.name().to_string(),
                outcome.cell.orientation.name().to_string(),
                name.to_string(),
                r.map(|v| v.to_string()).unwrap_or_default(),
            ]);
        }
    }
    rows.sort();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["arch", "orientation", "physical_weight", "pearson_r"])?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Distribution statistics of the learned weights, pooled across folds.
fn write_weight_stats_csv(completed: &[&CellOutcome], path: &Path) -> Result<()> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    for outcome in completed {
        if outcome.cell.adjacency != AdjacencyType::Learned {
            continue;
        }
        let mut pooled: Vec<f64> = Vec::new();
        for fold in &outcome.cv.folds {
            if let Some(omega) = fold.model.learned_edge_weights() {
                pooled.extend(omega.iter().copied());
            }
        }
        let stats = weight_stats(&pooled)?;
        rows.push(vec![
            outcome.cell.arch.name().to_string(),
            outcome.cell.orientation.name().to_string(),
            stats.mean.to_string(),
            stats.std.to_string(),
            stats.min.to_string(),
            stats.q25.to_string(),
            stats.median.to_string(),
            stats.q75.to_string(),
            stats.max.to_string(),
        ]);
    }
    rows.sort();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["arch", "orientation", "mean", "std", "min", "q25", "median", "q75", "max"])?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains one grid cell (all folds) and writes its artifacts; used by the
/// single-cell CLI command. Optionally dumps the static normalized adjacency.
pub fn cmd_train_cell(
    config: &ExperimentConfig,
    cell: GridCell,
    out_dir: &Path,
    adjacency_dump: Option<&Path>,
) -> Result<CellOutcome> {
    config.validate()?;
    let (graph, signal, params) = load_preprocessed(&config.data.dir)?;
    fs::create_dir_all(out_dir)?;
    if let Some(dump) = adjacency_dump {
        dump_normalized_adjacency(&graph, &cell, config, dump)?;
    }
    let outcome = run_cell(
        config,
        &graph,
        &signal,
        &params,
        config.data.window_size,
        config.data.lead_time,
        cell.run_key(),
        out_dir,
    )?;
    write_results_csv(&[cell], &[&outcome], &out_dir.join(RESULTS_FILE))?;
    write_correlations_csv(&graph, &[&outcome], &out_dir.join(CORRELATIONS_FILE))?;
    write_weight_stats_csv(&[&outcome], &out_dir.join(WEIGHT_STATS_FILE))?;
    Ok(outcome)
}

/// Row-major CSV dump of the normalized augmented adjacency, 17 significant
/// digits. Learned adjacency dumps its freshly initialized state.
fn dump_normalized_adjacency(
    graph: &RiverGraph,
    cell: &GridCell,
    config: &ExperimentConfig,
    path: &Path,
) -> Result<()> {
    let matrix = match cell.adjacency {
        AdjacencyType::Learned => {
            let cell_seed = derive_seed(
                config.seed,
                &format!(
                    "cell/W{}/L{}/{}",
                    config.data.window_size,
                    config.data.lead_time,
                    cell.dir_name()
                ),
            );
            let fold_seed = derive_seed(cell_seed, "fold/even");
            let mut stream = crate::rng::Stream::new(fold_seed, "init");
            let model_cfg = config.model_config(
                cell.arch,
                cell.adjacency,
                cell.orientation,
                config.data.window_size,
            );
            let model = crate::models::build_model(&model_cfg, graph, &mut stream)?;
            let omega: Vec<f64> = model
                .learned_edge_weights()
                .expect("learned model has edge weights")
                .iter()
                .copied()
                .collect();
            let built = crate::adjacency::build_adjacency(
                graph,
                cell.adjacency,
                cell.orientation,
                Some(&omega),
            )?;
            crate::adjacency::normalize_augmented(built.matrix.view(), cell.adjacency)?.0
        }
        AdjacencyType::AllPhysical => {
            return Err(Error::config(
                "all_physical has no single adjacency matrix to dump",
            ));
        }
        ty => {
            crate::adjacency::NormalizedAdjacency::build(graph, ty, cell.orientation, None)?.matrix
        }
    };
    let mut w = csv::Writer::from_path(path)?;
    for i in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols())
            .map(|j| format!("{:.17e}", matrix[[i, j]]))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_to_temp(preset: NetworkPreset, hours: usize, seed: u64) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { hours, seed, ..SynthConfig::default() };
        cmd_synth(&cfg, Some(preset), dir.path(), true).unwrap();
        dir
    }

    #[test]
    fn synth_writes_expected_files_and_is_reproducible() {
        let dir = synth_to_temp(NetworkPreset::Fig4i, 50, 3);
        assert!(dir.path().join("edges.csv").exists());
        assert!(dir.path().join("nodes.csv").exists());
        assert!(dir.path().join("gauge_531.csv").exists());
        assert!(dir.path().join("gauge_532.csv").exists());

        let again = synth_to_temp(NetworkPreset::Fig4i, 50, 3);
        for file in ["edges.csv", "nodes.csv", "gauge_531.csv", "gauge_532.csv"] {
            let a = std::fs::read(dir.path().join(file)).unwrap();
            let b = std::fs::read(again.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
    }

    #[test]
    fn synth_refuses_non_empty_output() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("existing.txt"), "x").unwrap();
        let cfg = SynthConfig { hours: 30, ..SynthConfig::default() };
        let err = cmd_synth(&cfg, Some(NetworkPreset::Fig4i), dir.path(), false);
        assert!(matches!(err, Err(Error::Data(_))));
        assert!(cmd_synth(&cfg, Some(NetworkPreset::Fig4i), dir.path(), true).is_ok());
    }

    #[test]
    fn preprocess_keeps_complete_synthetic_data() {
        let data = synth_to_temp(NetworkPreset::Fig4iii, 80, 5);
        let out = tempfile::tempdir().unwrap();
        let report = cmd_preprocess(data.path(), None, out.path()).unwrap();
        assert_eq!(report.nodes_before, 5);
        assert_eq!(report.nodes_after_dfs, 5);
        assert_eq!(report.nodes_after_filter, 5);
        assert!(report.removed_gauges.is_empty());
        assert!(out.path().join(CACHE_FILE).exists());
        let (graph, signal, _) = load_preprocessed(out.path()).unwrap();
        assert_eq!(graph.node_count(), 5);
        assert_eq!(signal.gauge_count(), 5);
    }

    #[test]
    fn preprocess_filters_gauges_with_long_gaps() {
        let data = synth_to_temp(NetworkPreset::Fig4iv, 120, 6);
        // Inject a 10-hour discharge gap into gauge 206 (an interior node).
        let path = data.path().join("gauge_206.csv");
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        for line in lines.iter_mut().skip(1).take(10) {
            let mut fields: Vec<&str> = line.split(',').collect();
            fields[1] = "";
            *line = fields.join(",");
        }
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();

        let out = tempfile::tempdir().unwrap();
        let report = cmd_preprocess(data.path(), None, out.path()).unwrap();
        assert_eq!(report.nodes_before, 9);
        assert_eq!(report.nodes_after_filter, 8);
        assert_eq!(report.removed_gauges, vec![206]);
        // Rewiring preserved connectivity: 204 now feeds 207 directly.
        let (graph, _, _) = load_preprocessed(out.path()).unwrap();
        assert!(graph.edge_attrs(GaugeId(204), GaugeId(207)).is_some());
    }

    #[test]
    fn preprocess_respects_six_hour_interpolation_boundary() {
        let data = synth_to_temp(NetworkPreset::Fig4i, 100, 7);
        // A 6-hour gap is filled, so nothing is removed.
        let path = data.path().join("gauge_531.csv");
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        for line in lines.iter_mut().skip(20).take(6) {
            let mut fields: Vec<&str> = line.split(',').collect();
            fields[1] = "";
            *line = fields.join(",");
        }
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        let out = tempfile::tempdir().unwrap();
        let report = cmd_preprocess(data.path(), None, out.path()).unwrap();
        assert_eq!(report.interpolated_values, 6);
        assert!(report.removed_gauges.is_empty());
        assert_eq!(report.nodes_after_filter, 2);
    }

    #[test]
    fn grid_expansion_applies_attention_substitution() {
        let toml_text = r#"
            [data]
            dir = "unused"
            [model]
            architecture = ["resgcn", "resgat"]
            adjacency_type = ["isolated", "learned"]
            edge_direction = ["downstream", "upstream"]
        "#;
        let config: ExperimentConfig = toml::from_str(toml_text).unwrap();
        let cells = config.grid_cells().unwrap();
        assert!(cells.contains(&GridCell {
            arch: Architecture::ResGat,
            adjacency: AdjacencyType::AllPhysical,
            orientation: EdgeOrientation::Downstream,
        }));
        assert!(!cells
            .iter()
            .any(|c| c.arch == Architecture::ResGat && c.adjacency == AdjacencyType::Learned));
        // 2 archs x 2 adjacencies x 2 orientations.
        assert_eq!(cells.len(), 8);
    }

    #[test]
    fn grid_expansion_rejects_all_physical_for_non_attention() {
        let toml_text = r#"
            [data]
            dir = "unused"
            [model]
            architecture = "gcnii"
            adjacency_type = "all_physical"
        "#;
        let config: ExperimentConfig = toml::from_str(toml_text).unwrap();
        assert!(matches!(config.grid_cells(), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_fixed_values() {
        let bad_key = r#"
            [data]
            dir = "x"
            window = 24
        "#;
        assert!(toml::from_str::<ExperimentConfig>(bad_key).is_err());

        let bad_init = r#"
            [data]
            dir = "x"
            [model]
            initialisation = "xavier"
        "#;
        let config: ExperimentConfig = toml::from_str(bad_init).unwrap();
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_grid_produces_expected_row_count_and_is_deterministic() {
        let data = synth_to_temp(NetworkPreset::Fig4i, 3 * 8760 + 24, 11);
        let prep = tempfile::tempdir().unwrap();
        cmd_preprocess(data.path(), None, prep.path()).unwrap();

        let toml_text = format!(
            r#"
            seed = 13
            [data]
            dir = "{}"
            window_size = 6
            lead_time = 2
            [model]
            architecture = "resgcn"
            adjacency_type = ["isolated", "binary"]
            edge_direction = "downstream"
            network_depth = 1
            latent_space_dim = 4
            [training]
            epochs = 2
            batch_size = 64
            learning_rate = 1e-3
        "#,
            prep.path().display()
        );
        let config: ExperimentConfig = toml::from_str(&toml_text).unwrap();

        let out1 = tempfile::tempdir().unwrap();
        let outcome = cmd_run(&config, out1.path()).unwrap();
        assert!(outcome.failed.is_empty());
        let text = std::fs::read_to_string(&outcome.results_path).unwrap();
        // Header + 1 arch x 2 adjacencies x 1 orientation x 3 folds.
        assert_eq!(text.lines().count(), 1 + 6);

        let out2 = tempfile::tempdir().unwrap();
        let outcome2 = cmd_run(&config, out2.path()).unwrap();
        let text2 = std::fs::read_to_string(&outcome2.results_path).unwrap();
        assert_eq!(text, text2, "results.csv must be byte-identical across runs");
    }

    #[test]
    fn isolated_rows_share_identical_values_across_orientations() {
        let data = synth_to_temp(NetworkPreset::Fig4i, 3 * 8760 + 24, 17);
        let prep = tempfile::tempdir().unwrap();
        cmd_preprocess(data.path(), None, prep.path()).unwrap();

        let toml_text = format!(
            r#"
            seed = 19
            [data]
            dir = "{}"
            window_size = 6
            lead_time = 2
            [model]
            architecture = "resgcn"
            adjacency_type = "isolated"
            edge_direction = ["downstream", "upstream", "bidirected"]
            network_depth = 1
            latent_space_dim = 4
            [training]
            epochs = 1
        "#,
            prep.path().display()
        );
        let config: ExperimentConfig = toml::from_str(&toml_text).unwrap();
        let out = tempfile::tempdir().unwrap();
        let outcome = cmd_run(&config, out.path()).unwrap();
        assert!(outcome.failed.is_empty());

        let mut reader = csv::Reader::from_path(&outcome.results_path).unwrap();
        let mut by_fold: std::collections::BTreeMap<String, Vec<(String, String)>> =
            Default::default();
        for record in reader.records() {
            let r = record.unwrap();
            by_fold
                .entry(r[3].to_string())
                .or_default()
                .push((r[2].to_string(), r[4].to_string()));
        }
        for (fold, rows) in by_fold {
            assert_eq!(rows.len(), 3, "fold {fold}");
            let first = &rows[0].1;
            for (orientation, value) in &rows {
                assert_eq!(value, first, "fold {fold} orientation {orientation}");
            }
        }
    }
}
