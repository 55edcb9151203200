//! Renders a finished grid run into Markdown tables plus worst-window
//! diagnostics with simple SVG line charts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{mean_and_sample_std, worst_windows};
use crate::experiment::{CORRELATIONS_FILE, RESULTS_FILE, WEIGHT_STATS_FILE};

/// Reference baselines from the original full-network study on real data
/// (358 gauges, 18 years). Not reproducible on synthetic data; shown in the
/// report footer for orientation only.
const REFERENCE_NOTES: &[&str] = &[
    "isolated ResGCN summary NSE: 85.07% +/- 0.66%",
    "ResGCN / downstream / stream length weight correlation: -0.375",
];

/// Horizon of the worst-window diagnostics, hours.
pub const WORST_WINDOW_HORIZON: usize = 48;
/// How many disjoint worst windows to report.
pub const WORST_WINDOW_COUNT: usize = 5;

#[derive(Clone, Debug)]
struct ResultRow {
    arch: String,
    adjacency: String,
    orientation: String,
    fold: String,
    summary_nse: Option<f64>,
    summary_nse_unweighted: Option<f64>,
}

fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Err(Error::data(format!(
            "{} not found; run the experiment grid first",
            path.display()
        )));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record?;
        let parse = |s: &str| -> Option<f64> { s.parse().ok() };
        rows.push(ResultRow {
            arch: r[0].to_string(),
            adjacency: r[1].to_string(),
            orientation: r[2].to_string(),
            fold: r[3].to_string(),
            summary_nse: parse(&r[4]),
            summary_nse_unweighted: parse(&r[5]),
        });
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{} holds no result rows", path.display())));
    }
    Ok(rows)
}

const ADJACENCY_ORDER: [&str; 7] = [
    "isolated",
    "binary",
    "all_physical",
    "stream_length",
    "elevation_difference",
    "average_slope",
    "learned",
];
const ORIENTATION_ORDER: [&str; 3] = ["downstream", "upstream", "bidirected"];

fn percent(mean: f64, std: f64) -> String {
    format!("{:.2}% ± {:.2}%", 100.0 * mean, 100.0 * std)
}

/// Per-architecture tables: adjacency rows, orientation columns, cells are
/// mean ± std of the summary NSE across folds, best value per column bold.
fn render_topology_tables(rows: &[ResultRow], weighted: bool, out: &mut String) {
    let archs: BTreeSet<&str> = rows.iter().map(|r| r.arch.as_str()).collect();
    for arch in archs {
        let mut aggregated: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
        let mut adjacencies: BTreeSet<String> = BTreeSet::new();
        let mut orientations: BTreeSet<String> = BTreeSet::new();
        for (adj, orient) in rows
            .iter()
            .filter(|r| r.arch == arch)
            .map(|r| (r.adjacency.clone(), r.orientation.clone()))
            .collect::<BTreeSet<_>>()
        {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.arch == arch && r.adjacency == adj && r.orientation == orient)
                .filter_map(|r| if weighted { r.summary_nse } else { r.summary_nse_unweighted })
                .collect();
            if values.is_empty() {
                continue;
            }
            adjacencies.insert(adj.clone());
            orientations.insert(orient.clone());
            aggregated.insert((adj, orient), mean_and_sample_std(&values));
        }
        if aggregated.is_empty() {
            continue;
        }

        let ordered_adj: Vec<&str> = ADJACENCY_ORDER
            .iter()
            .copied()
            .filter(|a| adjacencies.contains(*a))
            .collect();
        let ordered_orient: Vec<&str> = ORIENTATION_ORDER
            .iter()
            .copied()
            .filter(|o| orientations.contains(*o))
            .collect();

        // Column winners by mean.
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for &o in &ordered_orient {
            let column_best = ordered_adj
                .iter()
                .filter_map(|&a| aggregated.get(&(a.to_string(), o.to_string())))
                .map(|(m, _)| *m)
                .fold(f64::MIN, f64::max);
            best.insert(o, column_best);
        }

        out.push_str(&format!("\n### {arch}\n\n"));
        out.push_str(&format!("| adjacency type | {} |\n", ordered_orient.join(" | ")));
        out.push_str(&format!("|---|{}\n", "---|".repeat(ordered_orient.len())));
        for &a in &ordered_adj {
            let mut cells = Vec::new();
            for &o in &ordered_orient {
                match aggregated.get(&(a.to_string(), o.to_string())) {
                    Some(&(mean, std)) => {
                        let cell = percent(mean, std);
                        if mean == best[o] {
                            cells.push(format!("**{cell}**"));
                        } else {
                            cells.push(cell);
                        }
                    }
                    None => cells.push(String::from("—")),
                }
            }
            out.push_str(&format!("| {} | {} |\n", a.replace('_', " "), cells.join(" | ")));
        }
    }
}

fn render_correlations(dir: &Path, out: &mut String) -> Result<()> {
    let path = dir.join(CORRELATIONS_FILE);
    if !path.exists() {
        return Ok(());
    }
    let mut reader = csv::Reader::from_path(&path)?;
    // (physical weight) -> (orientation, arch) -> r
    let mut table: BTreeMap<String, BTreeMap<(String, String), String>> = BTreeMap::new();
    let mut columns: BTreeSet<(String, String)> = BTreeSet::new();
    for record in reader.records() {
        let r = record?;
        let column = (r[1].to_string(), r[0].to_string());
        columns.insert(column.clone());
        let value = if r[3].is_empty() {
            "undefined".to_string()
        } else {
            format!("{:.3}", r[3].parse::<f64>().unwrap_or(f64::NAN))
        };
        table.entry(r[2].to_string()).or_default().insert(column, value);
    }
    if table.is_empty() {
        return Ok(());
    }
    let ordered_columns: Vec<(String, String)> = ORIENTATION_ORDER
        .iter()
        .flat_map(|o| {
            columns
                .iter()
                .filter(move |(orient, _)| orient == o)
                .cloned()
        })
        .collect();

    out.push_str("\n## Correlation between learned and physical edge weights\n\n");
    let headers: Vec<String> = ordered_columns
        .iter()
        .map(|(o, a)| format!("{a} {o}"))
        .collect();
    out.push_str(&format!("| physical edge weight | {} |\n", headers.join(" | ")));
    out.push_str(&format!("|---|{}\n", "---|".repeat(headers.len())));
    for name in ["stream_length", "elevation_difference", "average_slope"] {
        if let Some(row) = table.get(name) {
            let cells: Vec<String> = ordered_columns
                .iter()
                .map(|c| row.get(c).cloned().unwrap_or_else(|| "—".into()))
                .collect();
            out.push_str(&format!(
                "| {} | {} |\n",
                name.replace('_', " "),
                cells.join(" | ")
            ));
        }
    }
    Ok(())
}

fn render_weight_stats(dir: &Path, out: &mut String) -> Result<()> {
    let path = dir.join(WEIGHT_STATS_FILE);
    if !path.exists() {
        return Ok(());
    }
    let mut reader = csv::Reader::from_path(&path)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let r = record?;
        rows.push(r.iter().map(String::from).collect());
    }
    if rows.is_empty() {
        return Ok(());
    }
    out.push_str("\n## Learned edge weight statistics (pooled across folds)\n\n");
    out.push_str("| arch | orientation | mean | std | min | q25 | median | q75 | max |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for row in rows {
        let formatted: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if i < 2 {
                    v.clone()
                } else {
                    format!("{:.3}", v.parse::<f64>().unwrap_or(f64::NAN))
                }
            })
            .collect();
        out.push_str(&format!("| {} |\n", formatted.join(" | ")));
    }
    Ok(())
}

/// Scans `sweep_W<w>_L<l>` subdirectories and renders one window x lead
/// table of mean ± std per grid cell found.
fn render_sweep(dir: &Path, base_rows: &[ResultRow], out: &mut String) -> Result<()> {
    let mut groups: Vec<(usize, usize, Vec<ResultRow>)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        let Some(rest) = name.strip_prefix("sweep_W") else { continue };
        let Some((w, l)) = rest.split_once("_L") else { continue };
        let (Ok(w), Ok(l)) = (w.parse::<usize>(), l.parse::<usize>()) else { continue };
        let results = entry.path().join(RESULTS_FILE);
        if results.exists() {
            groups.push((w, l, read_results(&results)?));
        }
    }
    if groups.is_empty() {
        return Ok(());
    }

    // The base run belongs to the sweep grid as well; its (W, L) is unknown
    // here, so it is keyed as the configured base group by the manifest.
    let cell_keys: BTreeSet<(String, String, String)> = groups
        .iter()
        .flat_map(|(_, _, rows)| rows.iter())
        .chain(base_rows.iter())
        .map(|r| (r.arch.clone(), r.adjacency.clone(), r.orientation.clone()))
        .collect();

    let windows: BTreeSet<usize> = groups.iter().map(|(w, _, _)| *w).collect();
    let leads: BTreeSet<usize> = groups.iter().map(|(_, l, _)| *l).collect();

    out.push_str("\n## Window size and lead time sweep\n");
    for (arch, adjacency, orientation) in cell_keys {
        out.push_str(&format!(
            "\n### {arch}, {} adjacency, {orientation}\n\n",
            adjacency.replace('_', " ")
        ));
        let lead_headers: Vec<String> = leads.iter().map(|l| format!("L = {l} h")).collect();
        out.push_str(&format!("| window size | {} |\n", lead_headers.join(" | ")));
        out.push_str(&format!("|---|{}\n", "---|".repeat(leads.len())));
        for &w in &windows {
            let mut cells = Vec::new();
            for &l in &leads {
                let values: Vec<f64> = groups
                    .iter()
                    .filter(|(gw, gl, _)| *gw == w && *gl == l)
                    .flat_map(|(_, _, rows)| rows.iter())
                    .filter(|r| {
                        r.arch == arch && r.adjacency == adjacency && r.orientation == orientation
                    })
                    .filter_map(|r| r.summary_nse)
                    .collect();
                if values.is_empty() {
                    cells.push("—".to_string());
                } else {
                    let (m, s) = mean_and_sample_std(&values);
                    cells.push(percent(m, s));
                }
            }
            out.push_str(&format!("| {w} h | {} |\n", cells.join(" | ")));
        }
    }
    Ok(())
}

struct WorstGauge {
    cell: String,
    fold: String,
    gauge: u64,
    nse: f64,
    windows: Vec<(usize, f64)>,
    predictions: Vec<f64>,
    observations: Vec<f64>,
}

/// Best cell by mean weighted NSE, its best fold, that fold's worst gauge.
fn find_worst_gauge(dir: &Path, rows: &[ResultRow]) -> Result<Option<WorstGauge>> {
    let mut cell_means: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = r.summary_nse {
            cell_means
                .entry((r.arch.clone(), r.adjacency.clone(), r.orientation.clone()))
                .or_default()
                .push(v);
        }
    }
    let Some((best_cell, _)) = cell_means
        .iter()
        .map(|(k, v)| (k.clone(), mean_and_sample_std(v).0))
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite means"))
    else {
        return Ok(None);
    };

    let best_fold = rows
        .iter()
        .filter(|r| {
            (r.arch.clone(), r.adjacency.clone(), r.orientation.clone()) == best_cell
                && r.summary_nse.is_some()
        })
        .max_by(|a, b| {
            a.summary_nse
                .partial_cmp(&b.summary_nse)
                .expect("finite summaries")
        })
        .expect("cell has folds")
        .fold
        .clone();

    // Isolated cells store their artifacts under the downstream run key.
    let (arch, adjacency, orientation) = best_cell.clone();
    let dir_orientation = if adjacency == "isolated" { "downstream".to_string() } else { orientation.clone() };
    let fold_dir = dir
        .join("cells")
        .join(format!("{arch}_{adjacency}_{dir_orientation}"))
        .join(format!("fold_{best_fold}"));
    if !fold_dir.join("per_gauge_nse.csv").exists()
        || !fold_dir.join("predictions.rftc").exists()
    {
        log::warn!(
            "cell artifacts missing under {}; skipping worst-gauge diagnostics",
            fold_dir.display()
        );
        return Ok(None);
    }

    // Worst gauge by weighted NSE.
    let mut worst: Option<(u64, f64)> = None;
    let mut reader = csv::Reader::from_path(fold_dir.join("per_gauge_nse.csv"))?;
    for record in reader.records() {
        let r = record?;
        if r[1].is_empty() {
            continue;
        }
        let gauge: u64 = r[0].parse().map_err(|e| Error::data(format!("bad gauge id: {e}")))?;
        let nse: f64 = r[1].parse().map_err(|e| Error::data(format!("bad nse: {e}")))?;
        if worst.map_or(true, |(_, w)| nse < w) {
            worst = Some((gauge, nse));
        }
    }
    let Some((gauge, nse)) = worst else { return Ok(None) };

    let tensors = crate::autodiff::load_tensors(&fold_dir.join("predictions.rftc"))?;
    let find = |name: &str| -> Result<ndarray::ArrayD<f64>> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::data(format!("predictions file misses tensor '{name}'")))
    };
    let preds = find("predictions")?;
    let obs = find("observations")?;
    let gauges = find("gauges")?;
    let gauge_col = gauges
        .iter()
        .position(|&g| g == gauge as f64)
        .ok_or_else(|| Error::data(format!("gauge {gauge} not in predictions file")))?;

    let series_len = preds.shape()[0];
    let pred_series: Vec<f64> = (0..series_len).map(|t| preds[[t, gauge_col]]).collect();
    let obs_series: Vec<f64> = (0..series_len).map(|t| obs[[t, gauge_col]]).collect();
    let horizon = WORST_WINDOW_HORIZON.min(series_len);
    let windows = worst_windows(&pred_series, &obs_series, horizon, WORST_WINDOW_COUNT)?;

    Ok(Some(WorstGauge {
        cell: format!("{arch} / {} / {orientation}", adjacency.replace('_', " ")),
        fold: best_fold,
        gauge,
        nse,
        windows,
        predictions: pred_series,
        observations: obs_series,
    }))
}

/// Minimal two-series line chart.
fn render_window_svg(pred: &[f64], truth: &[f64], path: &Path) -> Result<()> {
    let (width, height, pad) = (640.0, 320.0, 30.0);
    let len = pred.len().max(2);
    let lo = pred
        .iter()
        .chain(truth)
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = pred
        .iter()
        .chain(truth)
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = (hi - lo).max(1e-9);
    let x = |i: usize| pad + (width - 2.0 * pad) * i as f64 / (len - 1) as f64;
    let y = |v: f64| height - pad - (height - 2.0 * pad) * (v - lo) / span;
    let polyline = |series: &[f64]| -> String {
        series
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<polyline points=\"{truth}\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1.5\"/>\n",
            "<polyline points=\"{pred}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" ",
            "stroke-dasharray=\"5,3\"/>\n",
            "<text x=\"{lx}\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#333333\">observed</text>\n",
            "<text x=\"{lx2}\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#1f77b4\">predicted</text>\n",
            "</svg>\n"
        ),
        w = width,
        h = height,
        truth = polyline(truth),
        pred = polyline(pred),
        lx = pad,
        lx2 = pad + 80.0,
    );
    fs::write(path, svg)?;
    Ok(())
}

/// Renders `report.md` (plus `worst_windows.csv` and SVG charts) from a
/// finished results directory. Returns the report path.
pub fn cmd_report(dir: &Path) -> Result<PathBuf> {
    let rows = read_results(&dir.join(RESULTS_FILE))?;
    let mut out = String::new();
    out.push_str("# River discharge forecasting report\n");

    out.push_str("\n## Summary weighted NSE, mean ± std across folds\n");
    render_topology_tables(&rows, true, &mut out);
    out.push_str("\n## Summary unweighted NSE, mean ± std across folds\n");
    render_topology_tables(&rows, false, &mut out);
    render_correlations(dir, &mut out)?;
    render_weight_stats(dir, &mut out)?;
    render_sweep(dir, &rows, &mut out)?;

    if let Some(worst) = find_worst_gauge(dir, &rows)? {
        out.push_str("\n## Worst-gauge diagnostics\n\n");
        out.push_str(&format!(
            "Best cell {} (fold {}): worst gauge is #{} with weighted NSE {:.4}.\n\n",
            worst.cell, worst.fold, worst.gauge, worst.nse
        ));
        out.push_str(&format!(
            "Top {} disjoint {}-hour windows by summed squared deviation:\n\n",
            worst.windows.len(),
            WORST_WINDOW_HORIZON
        ));
        out.push_str("| rank | start (test step) | deviation |\n|---|---|---|\n");

        let mut w = csv::Writer::from_path(dir.join("worst_windows.csv"))?;
        w.write_record(["gauge", "start", "deviation"])?;
        for (rank, &(start, deviation)) in worst.windows.iter().enumerate() {
            out.push_str(&format!("| {} | {} | {:.4} |\n", rank + 1, start, deviation));
            w.write_record([
                worst.gauge.to_string(),
                start.to_string(),
                deviation.to_string(),
            ])?;

            let end = (start + WORST_WINDOW_HORIZON).min(worst.predictions.len());
            let svg_path = dir.join(format!("worst_window_{}.svg", rank + 1));
            render_window_svg(
                &worst.predictions[start..end],
                &worst.observations[start..end],
                &svg_path,
            )?;
        }
        w.flush()?;
        out.push_str(&format!(
            "\nCharts: worst_window_1.svg … worst_window_{}.svg\n",
            worst.windows.len()
        ));
    }

    out.push_str("\n---\n\nReference values from the original full-network study on real data (not reproducible on synthetic inputs):\n");
    for note in REFERENCE_NOTES {
        out.push_str(&format!("- {note}\n"));
    }

    let path = dir.join("report.md");
    fs::write(&path, out)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_errors_without_results() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_report(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn report_errors_on_empty_results() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(RESULTS_FILE),
            "arch,adjacency,orientation,fold,summary_nse,summary_nse_unweighted\n",
        )
        .unwrap();
        assert!(matches!(cmd_report(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn report_renders_mean_std_cells_and_bolds_the_best() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("arch,adjacency,orientation,fold,summary_nse,summary_nse_unweighted\n");
        for (adj, values) in [("isolated", [0.80, 0.82, 0.81]), ("binary", [0.70, 0.72, 0.74])] {
            for (fold, v) in ["even", "odd", "contiguous"].iter().zip(values) {
                text.push_str(&format!("resgcn,{adj},downstream,{fold},{v},{v}\n"));
            }
        }
        fs::write(dir.path().join(RESULTS_FILE), text).unwrap();
        let path = cmd_report(dir.path()).unwrap();
        let report = fs::read_to_string(path).unwrap();
        assert!(report.contains("### resgcn"));
        assert!(report.contains("**81.00% ± 1.00%**"), "{report}");
        assert!(report.contains("| binary | 72.00% ± 2.00% |"), "{report}");
        assert!(report.contains("Reference values"));
    }

    #[test]
    fn svg_renderer_produces_two_polylines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.svg");
        let truth: Vec<f64> = (0..48).map(|t| (t as f64 * 0.3).sin() + 2.0).collect();
        let pred: Vec<f64> = truth.iter().map(|x| x * 1.1).collect();
        render_window_svg(&pred, &truth, &path).unwrap();
        let svg = fs::read_to_string(&path).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg"));
    }
}
