//! Forecasting metrics, naive baselines, context-size ablation, embedding
//! probes and patch search.

use latpfn_autodiff::Graph;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{BinSpec, ContextBatch};
use crate::error::{domain, Error, Result};
use crate::model::Model;
use crate::rng::{stream_rng, EVAL_STREAM};

pub const CRRMSE_EPS: f64 = 1e-8;

/// Forecast of one held-out series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesForecast {
    /// Per-step bin probabilities `[H][bins]`.
    pub probs: Vec<Vec<f64>>,
    /// Distribution mean per step (normalized space).
    pub point: Vec<f64>,
    pub var: Vec<f64>,
    /// `point` mapped back through the window's own statistics.
    pub denorm: Vec<f64>,
    /// Normalized ground truth over the horizon.
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForecastResult {
    pub series: Vec<SeriesForecast>,
}

fn softmax_row(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Builds forecasts from per-step probabilities of every held-out series.
pub fn forecast_from_probs(batch: &ContextBatch, bins: &BinSpec, probs: Vec<Vec<Vec<f64>>>) -> Result<ForecastResult> {
    if probs.len() != batch.n_h() || probs.iter().any(|p| p.len() != batch.h()) {
        return Err(Error::Shape(format!(
            "probabilities for {} series, batch has {} series of horizon {}",
            probs.len(),
            batch.n_h(),
            batch.h()
        )));
    }
    let series = probs
        .into_iter()
        .enumerate()
        .map(|(j, probs)| {
            let point = probs.iter().map(|p| bins.dist_mean(p)).collect::<Result<Vec<_>>>()?;
            let var = probs.iter().map(|p| bins.dist_var(p)).collect::<Result<Vec<_>>>()?;
            let stats = batch.stats.get(j);
            let denorm = match stats {
                Some(s) => point.iter().map(|&v| s.invert(v)).collect(),
                None => point.clone(),
            };
            Ok(SeriesForecast {
                probs,
                point,
                var,
                denorm,
                target: batch.target_values(j),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ForecastResult { series })
}

/// Forecasts a group of equally shaped batches in one forward pass.
fn forecast_group(model: &Model, batches: &[ContextBatch]) -> Result<Vec<ForecastResult>> {
    let x = model.inputs::<f32>(batches)?;
    let mut g = Graph::<f32>::new();
    let p = model.bind_frozen(&mut g);
    let f = model.forward(&mut g, &p, None, &x)?;
    let logits = g.value(f.logits);
    let bins = model.config.bins;
    let row = bins.count;
    let (n_h, h) = (x.n_h, x.h);
    batches
        .iter()
        .enumerate()
        .map(|(b, batch)| {
            let probs = (0..n_h)
                .map(|j| {
                    (0..h)
                        .map(|k| {
                            let r = (b * n_h + j) * h + k;
                            softmax_row(&logits.data()[r * row..(r + 1) * row])
                        })
                        .collect()
                })
                .collect();
            forecast_from_probs(batch, &bins, probs)
        })
        .collect()
}

/// Embed, pool, predict and decode one context.
pub fn forecast(model: &Model, batch: &ContextBatch) -> Result<ForecastResult> {
    Ok(forecast_group(model, std::slice::from_ref(batch))?.remove(0))
}

/// Forecasts many contexts, `chunk` at a time; chunks run in parallel and
/// results come back in input order.
pub fn forecast_all(model: &Model, batches: &[ContextBatch], chunk: usize) -> Result<Vec<ForecastResult>> {
    let chunks: Vec<_> = batches.chunks(chunk.max(1)).collect();
    let out = chunks
        .par_iter()
        .map(|c| forecast_group(model, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().flatten().collect())
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(domain(op, format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Mean squared error per step.
pub fn mse(forecast: &[f64], target: &[f64]) -> Result<f64> {
    check_len("mse", forecast, target)?;
    Ok(forecast.iter().zip(target).map(|(f, y)| (f - y).powi(2)).sum::<f64>() / forecast.len() as f64)
}

/// RMSE between cumulative sums over the horizon, relative to the mean
/// per-step cumulative target `|C_y(H)| / H`.
pub fn crrmse(forecast: &[f64], target: &[f64]) -> Result<f64> {
    check_len("crrmse", forecast, target)?;
    let h = forecast.len() as f64;
    let (mut cf, mut cy, mut sq) = (0.0, 0.0, 0.0);
    for (f, y) in forecast.iter().zip(target) {
        cf += f;
        cy += y;
        sq += (cf - cy) * (cf - cy);
    }
    Ok((sq / h).sqrt() / (cy.abs() / h + CRRMSE_EPS))
}

/// Fraction of steps whose most probable bin holds the target. `scores` is
/// one row of logits or probabilities per step; ties go to the lowest bin.
pub fn bin_accuracy(scores: &[Vec<f64>], target: &[f64], bins: &BinSpec) -> Result<f64> {
    if scores.len() != target.len() || scores.is_empty() {
        return Err(domain(
            "bin_accuracy",
            format!("{} rows for {} targets", scores.len(), target.len()),
        ));
    }
    let mut hits = 0usize;
    for (row, &y) in scores.iter().zip(target) {
        let best = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            )
            .0;
        hits += usize::from(best == bins.index(y)?);
    }
    Ok(hits as f64 / target.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std, values }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Held-out windows scored.
    pub windows: usize,
    pub mse: Summary,
    pub crrmse: Summary,
    pub accuracy: Summary,
}

pub fn report(results: &[ForecastResult], bins: &BinSpec) -> Result<MetricsReport> {
    let (mut m, mut c, mut a) = (Vec::new(), Vec::new(), Vec::new());
    for s in results.iter().flat_map(|r| &r.series) {
        m.push(mse(&s.point, &s.target)?);
        c.push(crrmse(&s.point, &s.target)?);
        a.push(bin_accuracy(&s.probs, &s.target, bins)?);
    }
    Ok(MetricsReport {
        windows: m.len(),
        mse: Summary::new(m),
        crrmse: Summary::new(c),
        accuracy: Summary::new(a),
    })
}

/// Forecasts every batch and scores each held-out window in normalized space.
pub fn evaluate(model: &Model, batches: &[ContextBatch], chunk: usize) -> Result<MetricsReport> {
    report(&forecast_all(model, batches, chunk)?, &model.config.bins)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NaiveForecasts {
    pub last_value: Vec<f64>,
    pub climatology: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub period: usize,
}

pub fn seasonal_naive(history: &[f64], h: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || history.len() < p {
        return Err(domain(
            "seasonal_naive",
            format!("period {p} needs at least {p} history steps, have {}", history.len()),
        ));
    }
    let tail = &history[history.len() - p..];
    Ok((0..h).map(|i| tail[i % p]).collect())
}

/// Lag in `2..=max_p` with the highest sample autocorrelation; 1 when the
/// history is too short or flat.
pub fn autocorr_period(history: &[f64], max_p: usize) -> usize {
    let n = history.len();
    let mean = history.iter().sum::<f64>() / n.max(1) as f64;
    let c: Vec<f64> = history.iter().map(|v| v - mean).collect();
    let denom: f64 = c.iter().map(|v| v * v).sum();
    if denom <= 0.0 {
        return 1;
    }
    let mut best = (1, f64::NEG_INFINITY);
    for p in 2..=max_p.min(n / 2) {
        let r: f64 = (p..n).map(|i| c[i] * c[i - p]).sum::<f64>() / denom;
        if r > best.1 {
            best = (p, r);
        }
    }
    best.0
}

/// Last-value, climatology and seasonal-naive forecasts. Without an
/// explicit period one is picked by autocorrelation over up to half the
/// history.
pub fn naive_baselines(history: &[f64], h: usize, period: Option<usize>) -> Result<NaiveForecasts> {
    let last = *history
        .last()
        .ok_or_else(|| domain("naive_baselines", "empty history"))?;
    let mean = history.iter().sum::<f64>() / history.len() as f64;
    let period = period.unwrap_or_else(|| autocorr_period(history, history.len() / 2));
    Ok(NaiveForecasts {
        last_value: vec![last; h],
        climatology: vec![mean; h],
        seasonal: seasonal_naive(history, h, period)?,
        period,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineReport {
    pub last_value: f64,
    pub climatology: f64,
    pub seasonal: f64,
}

impl BaselineReport {
    /// Lowest mean MSE of the three.
    pub fn best(&self) -> f64 {
        self.last_value.min(self.climatology).min(self.seasonal)
    }
}

/// Mean MSE of each naive baseline over every held-out window.
pub fn baseline_report(batches: &[ContextBatch]) -> Result<BaselineReport> {
    let (mut l, mut c, mut s, mut n) = (0.0, 0.0, 0.0, 0usize);
    for b in batches {
        for j in 0..b.n_h() {
            let y = b.target_values(j);
            let f = naive_baselines(&b.history_values(j), b.h(), None)?;
            l += mse(&f.last_value, &y)?;
            c += mse(&f.climatology, &y)?;
            s += mse(&f.seasonal, &y)?;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok(BaselineReport {
        last_value: l / n,
        climatology: c / n,
        seasonal: s / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationPoint {
    pub size: usize,
    pub mean: f64,
    pub std: f64,
}

/// MSE as a function of context size. Each (batch, trial) draws one
/// permutation of its context pool and every size uses a prefix of it, so
/// the sizes are compared on nested subsets.
pub fn ablate_context_size(
    model: &Model,
    batches: &[ContextBatch],
    sizes: &[usize],
    trials: usize,
    seed: u64,
    chunk: usize,
) -> Result<Vec<AblationPoint>> {
    let pool = batches.iter().map(|b| b.n()).min().unwrap_or(0);
    for &n in sizes {
        if n == 0 || n > pool {
            return Err(domain("ablate_context_size", format!("size {n} outside 1..={pool}")));
        }
    }
    let mut perms = Vec::with_capacity(batches.len() * trials);
    for t in 0..trials {
        for b in batches {
            let mut rng = stream_rng(seed, EVAL_STREAM + t as u64);
            let mut idx: Vec<usize> = (0..b.n()).collect();
            if trials > 1 || sizes.iter().any(|&s| s < b.n()) {
                idx.shuffle(&mut rng);
            }
            perms.push(idx);
        }
    }
    let bins = model.config.bins;
    sizes
        .iter()
        .map(|&n| {
            let sub = perms
                .iter()
                .enumerate()
                .map(|(i, p)| batches[i % batches.len()].select_context(&p[..n]))
                .collect::<Result<Vec<_>>>()?;
            let r = report(&forecast_all(model, &sub, chunk)?, &bins)?;
            // one value per trial: mean over windows
            let per_window = r.mse.values;
            let w = per_window.len() / trials.max(1);
            let trial_means: Vec<f64> = per_window
                .chunks(w.max(1))
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect();
            let s = Summary::new(trial_means);
            Ok(AblationPoint {
                size: n,
                mean: r.mse.mean,
                std: s.std,
            })
        })
        .collect()
}

pub fn ablation_csv(points: &[AblationPoint]) -> String {
    let mut s = String::from("size,mean,std\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.size, p.mean, p.std));
    }
    s
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// Majority label among the `k` nearest training points. Distance ties go
/// to the smaller index, vote ties to the label whose nearest member ranks
/// first.
pub fn knn_predict(train: &[Vec<f32>], labels: &[usize], query: &[f32], k: usize) -> Result<usize> {
    if train.is_empty() || train.len() != labels.len() {
        return Err(domain(
            "knn_probe",
            format!("{} train points, {} labels", train.len(), labels.len()),
        ));
    }
    if k == 0 || k > train.len() {
        return Err(domain(
            "knn_probe",
            format!("k = {k} with {} train points", train.len()),
        ));
    }
    let mut order: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, t)| (sq_dist(t, query), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: Vec<(usize, usize, usize)> = Vec::new(); // (label, count, first rank)
    for (rank, &(_, i)) in order[..k].iter().enumerate() {
        match votes.iter_mut().find(|v| v.0 == labels[i]) {
            Some(v) => v.1 += 1,
            None => votes.push((labels[i], 1, rank)),
        }
    }
    votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    Ok(votes[0].0)
}

/// Classification accuracy of a k-nearest-neighbour vote on fixed embeddings.
pub fn knn_probe(
    train: &[Vec<f32>],
    train_labels: &[usize],
    test: &[Vec<f32>],
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if test.len() != test_labels.len() || test.is_empty() {
        return Err(domain(
            "knn_probe",
            "test points and labels differ in length or are empty",
        ));
    }
    let mut hits = 0usize;
    for (q, &y) in test.iter().zip(test_labels) {
        hits += usize::from(knn_predict(train, train_labels, q, k)? == y);
    }
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Patch {
    pub window: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub mean: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PatchIndex {
    pub patches: Vec<Patch>,
}

pub const PATCH_THRESHOLD: f64 = 2.0;

/// Splits per-step embeddings `[S][d]` into runs. A new patch starts at
/// `i + 1` when `|e[i+1] - e[i]|` exceeds `c` times the median step distance.
/// Returns patch start indices, beginning with 0.
pub fn patch_boundaries(emb: &[Vec<f32>], c: f64) -> Result<Vec<usize>> {
    if emb.len() < 2 {
        return Err(domain(
            "patch_segment",
            format!("window of {} steps, need at least 2", emb.len()),
        ));
    }
    let d: Vec<f64> = emb.windows(2).map(|w| sq_dist(&w[0], &w[1]).sqrt()).collect();
    let mut sorted = d.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    let theta = c * median;
    let mut starts = vec![0];
    starts.extend(d.iter().enumerate().filter(|(_, &v)| v > theta).map(|(i, _)| i + 1));
    Ok(starts)
}

/// Segments one window and appends its patches to `index`.
pub fn patch_segment(index: &mut PatchIndex, window: usize, emb: &[Vec<f32>], c: f64) -> Result<()> {
    let starts = patch_boundaries(emb, c)?;
    let dim = emb[0].len();
    for (k, &start) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(emb.len());
        let mut mean = vec![0f64; dim];
        for e in &emb[start..end] {
            for (m, &v) in mean.iter_mut().zip(e) {
                *m += v as f64;
            }
        }
        let n = (end - start) as f64;
        index.patches.push(Patch {
            window,
            start,
            end,
            mean: mean.into_iter().map(|m| (m / n) as f32).collect(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchMatch {
    /// Position in the index.
    pub patch: usize,
    pub window: usize,
    pub start: usize,
    pub end: usize,
    pub distance: f64,
}

/// Closest patches to `index.patches[query]` by L2 between mean vectors,
/// skipping patches from the query's own window.
pub fn nearest_patches(index: &PatchIndex, query: usize, top_k: usize) -> Result<Vec<PatchMatch>> {
    let q = index
        .patches
        .get(query)
        .ok_or_else(|| domain("nearest_patches", format!("no patch {query}")))?;
    let mut out: Vec<PatchMatch> = index
        .patches
        .iter()
        .enumerate()
        .filter(|(_, p)| p.window != q.window)
        .map(|(i, p)| PatchMatch {
            patch: i,
            window: p.window,
            start: p.start,
            end: p.end,
            distance: sq_dist(&p.mean, &q.mean).sqrt(),
        })
        .collect();
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.patch.cmp(&b.patch)));
    out.truncate(top_k);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Projection {
    /// `[n][dims]`.
    pub coords: Vec<Vec<f64>>,
    /// Principal directions `[dims][D]`.
    pub components: Vec<Vec<f64>>,
    /// Fraction of total variance per component.
    pub explained: Vec<f64>,
    /// All inputs equal; coordinates are zero.
    pub degenerate: bool,
}

/// Projects onto the top principal directions of the centred data using an
/// exact symmetric eigendecomposition of the covariance. Each direction is
/// signed so that its largest-magnitude entry is positive.
pub fn pca_project(vectors: &[Vec<f64>], dims: usize) -> Result<Projection> {
    let n = vectors.len();
    if dims == 0 || n < dims {
        return Err(domain("pca_project", format!("{n} vectors for {dims} components")));
    }
    let dim = vectors[0].len();
    if dims > dim || vectors.iter().any(|v| v.len() != dim) {
        return Err(domain("pca_project", "vectors must share a length of at least dims"));
    }
    let x = DMatrix::from_fn(n, dim, |i, j| vectors[i][j]);
    let mean = x.row_mean();
    let xc = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = xc.transpose() * &xc / n as f64;
    let total = cov.trace();
    if total <= 0.0 {
        return Ok(Projection {
            coords: vec![vec![0.0; dims]; n],
            components: vec![vec![0.0; dim]; dims],
            explained: vec![0.0; dims],
            degenerate: true,
        });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for &k in &order[..dims] {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().fold(0.0f64, |a, &b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained.push(eig.eigenvalues[k].max(0.0) / total);
    }
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| (0..dim).map(|j| xc[(i, j)] * c[j]).sum())
                .collect()
        })
        .collect();
    Ok(Projection {
        coords,
        components,
        explained,
        degenerate: false,
    })
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}
