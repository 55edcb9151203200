//! Deterministic synthetic river networks and discharge signals.
//!
//! Generated graphs are single-outflow trees (every gauge drains into at
//! most one downstream neighbor), which makes them anti-transitive DAGs with
//! a unique sink. Discharge is built by routing: every gauge has a local
//! runoff process (base flow, a seasonal cycle and precipitation-driven
//! spike responses) and receives the discharge of its upstream neighbors
//! delayed by a fixed integral lag per edge. Multiplicative noise and a
//! non-negativity clamp are applied last, so with zero noise the routing
//! identities hold exactly.
//!
//! Series time axes always end at 2017-12-31 23:00 so that the canonical
//! year-based splits apply to any series length; an 18-year series starts
//! at 2000-01-01 00:00.

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use ndarray::Array3;

use crate::data::{NodeSignal, CHANNELS};
use crate::error::{Error, Result};
use crate::graph::{EdgeAttrs, GaugeId, RiverGraph};
use crate::rng::{derive_seed, Stream};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_gauges: usize,
    /// Longest allowed directed path in generated random networks.
    pub max_depth: usize,
    /// Largest allowed in-degree in generated random networks.
    pub max_indegree: usize,
    /// Series length in hours.
    pub hours: usize,
    pub seed: u64,
    /// Expected precipitation spikes per 1000 hours.
    pub spike_rate: f64,
    /// Routing delay per edge, integral hours.
    pub lag_per_edge: usize,
    /// Relative standard deviation of the multiplicative noise.
    pub noise_std: f64,
    /// Scale of the local runoff at non-source gauges; 0 gives pure routing.
    pub local_runoff: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_gauges: 10,
            max_depth: 6,
            max_indegree: 3,
            hours: 8760,
            seed: 0,
            spike_rate: 1.5,
            lag_per_edge: 3,
            noise_std: 0.02,
            local_runoff: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gauges == 0 || self.max_depth == 0 || self.max_indegree == 0 || self.hours == 0 {
            return Err(Error::config("synthetic sizes must all be positive"));
        }
        if self.spike_rate < 0.0 || self.noise_std < 0.0 || self.local_runoff < 0.0 {
            return Err(Error::config("synthetic rates must be non-negative"));
        }
        if self.lag_per_edge == 0 {
            return Err(Error::config("lag_per_edge must be at least one hour"));
        }
        Ok(())
    }
}

/// The four small benchmark topologies with varying depth and sink in-degree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkPreset {
    /// 2 gauges: depth 1, in-degree 1.
    Fig4i,
    /// 6 gauges: depth 2, sink in-degree 2.
    Fig4ii,
    /// 5 gauges: star, depth 1, sink in-degree 4.
    Fig4iii,
    /// 9 gauges: depth 4, sink in-degree 3.
    Fig4iv,
}

impl NetworkPreset {
    pub fn name(self) -> &'static str {
        match self {
            NetworkPreset::Fig4i => "fig4_i",
            NetworkPreset::Fig4ii => "fig4_ii",
            NetworkPreset::Fig4iii => "fig4_iii",
            NetworkPreset::Fig4iv => "fig4_iv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fig4_i" => NetworkPreset::Fig4i,
            "fig4_ii" => NetworkPreset::Fig4ii,
            "fig4_iii" => NetworkPreset::Fig4iii,
            "fig4_iv" => NetworkPreset::Fig4iv,
            other => return Err(Error::config(format!("unknown network preset '{other}'"))),
        })
    }

    fn edge_pairs(self) -> &'static [(u64, u64)] {
        match self {
            NetworkPreset::Fig4i => &[(531, 532)],
            NetworkPreset::Fig4ii => {
                &[(382, 386), (383, 385), (384, 385), (385, 387), (386, 387)]
            }
            NetworkPreset::Fig4iii => &[(67, 71), (68, 71), (69, 71), (70, 71)],
            NetworkPreset::Fig4iv => &[
                (200, 204),
                (201, 204),
                (204, 206),
                (206, 207),
                (207, 211),
                (208, 209),
                (209, 211),
                (210, 211),
            ],
        }
    }
}

/// First instant of an `hours`-long series ending at 2017-12-31 23:00.
pub fn series_start(hours: usize) -> NaiveDateTime {
    let end = NaiveDate::from_ymd_opt(2017, 12, 31)
        .expect("valid date")
        .and_hms_opt(23, 0, 0)
        .expect("valid time");
    end - TimeDelta::hours(hours as i64 - 1)
}

fn random_attrs(stream: &mut Stream) -> EdgeAttrs {
    let length = (stream.uniform(500f64.ln(), 20_000f64.ln())).exp();
    let drop = (stream.uniform(1f64.ln(), 200f64.ln())).exp();
    EdgeAttrs::new(length, drop)
}

/// Builds either a preset topology or a random single-outflow tree with a
/// unique sink, respecting the depth and in-degree bounds.
pub fn generate_network(config: &SynthConfig, preset: Option<NetworkPreset>) -> Result<RiverGraph> {
    config.validate()?;
    let mut stream = Stream::new(config.seed, "network");
    let mut graph = RiverGraph::new();

    if let Some(preset) = preset {
        for &(src, dst) in preset.edge_pairs() {
            graph.add_edge(GaugeId(src), GaugeId(dst), random_attrs(&mut stream))?;
        }
        return Ok(graph);
    }

    // Random mode: node 1 is the sink; each further node drains into an
    // eligible existing node.
    let mut depth = vec![0usize; config.n_gauges + 1];
    let mut indegree = vec![0usize; config.n_gauges + 1];
    graph.add_node(GaugeId(1));
    for i in 2..=config.n_gauges as u64 {
        let eligible: Vec<u64> = (1..i)
            .filter(|&j| {
                depth[j as usize] < config.max_depth
                    && indegree[j as usize] < config.max_indegree
            })
            .collect();
        if eligible.is_empty() {
            return Err(Error::config(format!(
                "cannot place gauge {i}: no node admits another upstream neighbor \
                 (max_depth {}, max_indegree {})",
                config.max_depth, config.max_indegree
            )));
        }
        let target = eligible[stream.below(eligible.len())];
        graph.add_edge(GaugeId(i), GaugeId(target), random_attrs(&mut stream))?;
        depth[i as usize] = depth[target as usize] + 1;
        indegree[target as usize] += 1;
    }
    Ok(graph)
}

/// Gamma-shaped unit-hydrograph kernel: smooth rise, slow recession.
fn response_kernel() -> Vec<f64> {
    let raw: Vec<f64> = (0..24)
        .map(|tau| {
            let t = (tau + 1) as f64;
            t * t * (-t / 4.0).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Synthesizes all five channels for every gauge of `graph` and routes
/// discharge downstream. Deterministic in (graph, config); every value is
/// non-negative.
pub fn generate_signals(graph: &RiverGraph, config: &SynthConfig) -> Result<NodeSignal> {
    config.validate()?;
    let order = graph.topo_order()?;
    let gauges: Vec<GaugeId> = graph.node_ids().collect();
    let n = gauges.len();
    let hours = config.hours;
    let index: std::collections::BTreeMap<GaugeId, usize> =
        gauges.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let kernel = response_kernel();
    let spike_prob = (config.spike_rate / 1000.0).min(1.0);

    let mut values = Array3::<f64>::zeros((n, hours, CHANNELS));
    let mut discharge: Vec<Vec<f64>> = vec![Vec::new(); n];

    // Local processes, per gauge, from independent named streams.
    for &gauge in &gauges {
        let gi = index[&gauge];
        let mut stream = Stream::new(derive_seed(config.seed, &format!("signal/{gauge}")), "signal");
        let is_source = graph.predecessors(gauge).next().is_none();
        let local_scale = if is_source { 1.0 } else { config.local_runoff };

        let base = stream.uniform(2.0, 10.0);
        let season_phase = stream.uniform(0.0, std::f64::consts::TAU);
        let diurnal_phase = stream.uniform(0.0, std::f64::consts::TAU);
        let gain = stream.uniform(0.5, 2.0) * base;
        let temp_phase = stream.uniform(0.0, std::f64::consts::TAU);

        // Precipitation: sparse exponential spikes over a faint diurnal mist.
        let mut precip = vec![0.0; hours];
        for (t, p) in precip.iter_mut().enumerate() {
            let mist = 0.02
                * (1.0 + (t as f64 * std::f64::consts::TAU / 24.0 + diurnal_phase).sin());
            let spike = if stream.next_f64() < spike_prob {
                -(1.0 - stream.next_f64()).ln() * 8.0
            } else {
                0.0
            };
            *p = mist + spike;
        }

        // Runoff response of the local catchment.
        let mut response = vec![0.0; hours];
        for t in 0..hours {
            let mut acc = 0.0;
            for (tau, k) in kernel.iter().enumerate() {
                if t >= tau {
                    acc += k * precip[t - tau];
                }
            }
            response[t] = acc;
        }

        let year_hours = 8766.0;
        let mut local = vec![0.0; hours];
        for t in 0..hours {
            let seasonal =
                0.3 * base * (t as f64 * std::f64::consts::TAU / year_hours + season_phase).sin();
            local[t] = local_scale * (base + seasonal + gain * response[t]);
        }
        discharge[gi] = local;

        for t in 0..hours {
            values[[gi, t, 1]] = precip[t];
            let prev = if t == 0 { 0.3 } else { values[[gi, t - 1, 2]] };
            values[[gi, t, 2]] = (0.95 * prev + 0.05 * precip[t].min(2.0)).max(0.0);
            let temp = 12.0
                + 8.0 * (t as f64 * std::f64::consts::TAU / year_hours + temp_phase).sin()
                + 2.0 * (t as f64 * std::f64::consts::TAU / 24.0 + diurnal_phase).cos()
                + 0.2 * stream.normal();
            values[[gi, t, 3]] = temp.max(0.0);
            let pressure = 1000.0
                + 8.0 * (t as f64 * std::f64::consts::TAU / (24.0 * 30.0) + season_phase).cos()
                + 0.3 * stream.normal();
            values[[gi, t, 4]] = pressure.max(0.0);
        }
    }

    // Route downstream in topological order, in ascending-id order over the
    // upstream neighbors of each gauge, then apply noise and the clamp.
    let lag = config.lag_per_edge;
    for &gauge in &order {
        let gi = index[&gauge];
        let preds: Vec<GaugeId> = graph.predecessors(gauge).collect();
        if !preds.is_empty() {
            let mut routed = std::mem::take(&mut discharge[gi]);
            for p in preds {
                let pi = index[&p];
                for t in lag..hours {
                    routed[t] += discharge[pi][t - lag];
                }
            }
            discharge[gi] = routed;
        }
        if config.noise_std > 0.0 {
            let mut noise_stream = Stream::new(
                derive_seed(config.seed, &format!("noise/{gauge}")),
                "noise",
            );
            for t in 0..hours {
                discharge[gi][t] *= 1.0 + config.noise_std * noise_stream.normal();
                discharge[gi][t] = discharge[gi][t].max(0.0);
            }
        }
    }

    for gi in 0..n {
        for t in 0..hours {
            values[[gi, t, 0]] = discharge[gi][t];
        }
    }

    Ok(NodeSignal { gauges, start: series_start(hours), values })
}

/// Writes edges.csv, nodes.csv and one gauge CSV per node into `dir`.
pub fn write_dataset(dir: &std::path::Path, graph: &RiverGraph, signal: &NodeSignal) -> Result<()> {
    crate::graph::save_graph_csv(graph, dir)?;
    crate::data::io::save_gauge_csvs(signal, dir)?;
    Ok(())
}
