//! SVG figures: accuracy curves, sweep charts, and t-SNE scatters of learned
//! features. t-SNE is the exact O(n^2) variant.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{
    load_splits, read_metrics, read_sweep_summary, ExperimentConfig, CONFIG_TOML, METRICS_CSV, MODEL_DIR, SWEEP_SUMMARY_CSV,
};
use crate::fl::embed;
use crate::nn::load_model;
use crate::rng::{rng_from, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / early_exaggeration / 4, 50)`, which stays stable
    /// for small sample counts where a fixed 200 oscillates.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

fn sq_dists(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i * d..(i + 1) * d].iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

/// Conditional affinities with per-point bandwidth matched to `perplexity`,
/// symmetrized and normalized to sum to 1.
fn joint_probabilities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j != i {
                    let e = (-beta * row[j]).exp();
                    sum += e;
                    weighted += row[j] * e;
                }
            }
            if sum == 0.0 {
                hi = beta;
                beta = (lo + hi) / 2.0;
                continue;
            }
            let h = sum.ln() + beta * weighted / sum;
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = (0..n).filter(|&j| j != i).map(|j| (-beta * row[j]).exp()).sum();
        for j in 0..n {
            if j != i && sum > 0.0 {
                p[i * n + j] = (-beta * row[j]).exp() / sum;
            }
        }
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

/// 2-D embedding of the `n x d` rows of `x`.
pub fn tsne(x: &[f64], n: usize, d: usize, cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    if n < 2 || x.len() != n * d {
        return Err(Error::InvalidInput(format!("t-SNE needs at least two rows of width {d}")));
    }
    if !(cfg.perplexity > 0.0) || cfg.perplexity >= n as f64 {
        return Err(Error::InvalidInput(format!(
            "perplexity {} must be in (0, {n})",
            cfg.perplexity
        )));
    }
    let p = joint_probabilities(&sq_dists(x, n, d), n, cfg.perplexity);
    let mut rng = rng_from(cfg.seed, &[stream::TSNE]);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; 2 * n];
    let lr = cfg
        .learning_rate
        .unwrap_or_else(|| (n as f64 / cfg.early_exaggeration / 4.0).max(50.0));
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                z += 2.0 * v;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i * n + j] / z).max(1e-12);
                let m = 4.0 * (exag * p[i * n + j] - q) * num[i * n + j];
                grad[2 * i] += m * (y[2 * i] - y[2 * j]);
                grad[2 * i + 1] += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) { gains[k] + 0.2 } else { (gains[k] * 0.8f64).max(0.01) };
            update[k] = momentum * update[k] - lr * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= mean);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::State("t-SNE diverged".into()));
    }
    Ok(y.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

/// Mean silhouette coefficient under Euclidean distance; singleton clusters score 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(points[i], points[j]);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::State(format!("plotting failed: {e}"))
}

/// Test accuracy per round, one line per named series.
pub fn accuracy_curves(series: &[(String, Vec<(usize, f64)>)], path: &Path) -> Result<()> {
    let max_round = series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0)).max().unwrap_or(1).max(1);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .caption("Top-1 test accuracy", ("sans-serif", 20))
        .build_cartesian_2d(0usize..max_round, 0f64..1f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("round")
        .y_desc("accuracy")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Mean final accuracy per swept value with one-standard-deviation bars.
pub fn sweep_chart(axis: &str, points: &[(f64, f64, f64)], path: &Path) -> Result<()> {
    let finite: Vec<_> = points.iter().copied().filter(|p| p.1.is_finite()).collect();
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = ((hi - lo) * 0.1).max(1e-3 * hi.abs().max(1.0));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .caption(format!("Final accuracy vs {axis}"), ("sans-serif", 20))
        .build_cartesian_2d((lo - pad)..(hi + pad), 0f64..1f64)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(axis).y_desc("accuracy").draw().map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(finite.iter().map(|p| (p.0, p.1)), BLUE.stroke_width(2)))
        .map_err(plot_err)?;
    chart
        .draw_series(finite.iter().map(|p| Circle::new((p.0, p.1), 4, BLUE.filled())))
        .map_err(plot_err)?;
    chart
        .draw_series(finite.iter().map(|p| PathElement::new(vec![(p.0, p.1 - p.2), (p.0, p.1 + p.2)], BLUE)))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

pub fn tsne_scatter(points: &[[f64; 2]], labels: &[usize], class_names: &[String], path: &Path) -> Result<()> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let (px, py) = (((x1 - x0) * 0.05).max(1e-6), ((y1 - y0) * 0.05).max(1e-6));
    let root = SVGBackend::new(path, (640, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .caption("t-SNE of learned features", ("sans-serif", 20))
        .build_cartesian_2d((x0 - px)..(x1 + px), (y0 - py)..(y1 + py))
        .map_err(plot_err)?;
    for (c, name) in class_names.iter().enumerate() {
        let color = Palette99::pick(c).to_rgba();
        chart
            .draw_series(
                points
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| Circle::new((p[0], p[1]), 3, color.filled())),
            )
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| Circle::new((x, y), 3, color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsneRecord {
    pub config: TsneConfig,
    pub sample_indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
    pub silhouette: f64,
}

/// Writes figures for a run directory (accuracy curve and t-SNE) or a sweep
/// directory (sweep chart). Returns the files written.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let sweep = dir.join(SWEEP_SUMMARY_CSV);
    if sweep.is_file() {
        let (axis, points) = read_sweep_summary(&sweep)?;
        let out = dir.join("sweep.svg");
        let pts: Vec<_> = points.iter().map(|p| (p.value, p.mean_acc, p.std_acc)).collect();
        sweep_chart(&axis.to_string(), &pts, &out)?;
        written.push(out);
        return Ok(written);
    }
    let needed = [dir.join(METRICS_CSV), dir.join(CONFIG_TOML), dir.join(MODEL_DIR).join("model.json")];
    let missing: Vec<String> = needed.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        let mut expected = missing;
        expected.push(format!("or {}", dir.join(SWEEP_SUMMARY_CSV).display()));
        return Err(Error::MissingInputs(expected));
    }
    let metrics = read_metrics(&needed[0])?;
    let cfg = ExperimentConfig::load(&needed[1])?;
    let curve = dir.join("accuracy.svg");
    accuracy_curves(&[(cfg.round.algorithm.to_string(), metrics.iter().map(|r| (r.round, r.test_acc)).collect())], &curve)?;
    written.push(curve);

    let (_, test) = load_splits(&cfg)?;
    let mut model = load_model(&dir.join(MODEL_DIR))?;
    let idx = test.stratified_indices(cfg.plot.tsne_samples, cfg.plot.seed);
    let params = model.params().to_vec();
    let feats = embed(&mut model, &params, &test, &idx)?;
    let tcfg = TsneConfig {
        perplexity: cfg.plot.perplexity.min((idx.len() as f64 - 1.0) / 3.0).max(1.0),
        seed: cfg.plot.seed,
        ..TsneConfig::default()
    };
    let coords = tsne(&feats.data, idx.len(), feats.shape[1], &tcfg)?;
    let labels = test.labels_of(&idx);
    let out = dir.join("tsne.svg");
    tsne_scatter(&coords, &labels, &test.class_names, &out)?;
    written.push(out);
    let record = TsneRecord {
        silhouette: silhouette(&coords, &labels),
        config: tcfg,
        sample_indices: idx,
        labels,
        coords,
    };
    let json = dir.join("tsne.json");
    fs::write(&json, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&json, e))?;
    written.push(json);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_of_separated_pairs() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let s = silhouette(&pts, &[0, 0, 1, 1]);
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        assert!((s - (b - 1.0) / b).abs() < 1e-12);
    }

    #[test]
    fn tsne_rejects_bad_perplexity() {
        let x = vec![0.0, 1.0, 2.0];
        assert!(tsne(&x, 3, 1, &TsneConfig::default()).is_err());
    }
}
