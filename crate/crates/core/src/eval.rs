//! Frozen-feature quality regression: clip-pooled embeddings, ridge
//! regression with a λ grid search, SROCC and logistic-fitted PLCC, and the
//! content-aware repeated split protocol.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{load_features, FeatureSequence, Scale};
use crate::model::SequenceModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub video_id: String,
    pub content_id: String,
    pub mos: f64,
    /// Full-scale `h` followed by half-scale `h`.
    pub embedding: Vec<f64>,
}

/// Mean `h` over the non-overlapping clips of `clip_len` frames; tail frames
/// that do not fill a clip are dropped.
pub fn scale_embedding(model: &SequenceModel, features: &FeatureSequence, clip_len: usize) -> Result<Vec<f64>> {
    let clips = if clip_len == 0 { 0 } else { features.frames() / clip_len };
    if clips == 0 {
        return Err(Error::TooFewFrames { needed: clip_len.max(1), available: features.frames() });
    }
    let mut acc = vec![0.0; model.dims().hidden_dim];
    for k in 0..clips {
        let h = model.embed(&features.window(k * clip_len, clip_len)?)?.h;
        acc.iter_mut().zip(&h).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= clips as f64);
    Ok(acc)
}

pub fn video_embedding(
    model: &SequenceModel,
    full: &FeatureSequence,
    half: &FeatureSequence,
    clip_len: usize,
) -> Result<Vec<f64>> {
    let mut out = scale_embedding(model, full, clip_len)?;
    out.extend(scale_embedding(model, half, clip_len)?);
    Ok(out)
}

/// Ridge regressor on standardized features with an unregularized intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_mean: Vec<f64>,
    /// Constant columns get std 1 and weight 0.
    pub feature_std: Vec<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + x.iter()
                .zip(&self.weights)
                .zip(self.feature_mean.iter().zip(&self.feature_std))
                .map(|((v, w), (m, s))| w * (v - m) / s)
                .sum::<f64>()
    }

    pub fn predict_all(&self, xs: &[&[f64]]) -> Vec<f64> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

/// Closed-form ridge: `W = (HᵀH + λI)⁻¹ Hᵀ (y − ȳ)` on standardized `H`.
pub fn ridge_fit(xs: &[&[f64]], y: &[f64], lambda: f64) -> Result<RidgeModel> {
    let n = xs.len();
    if n < 2 || y.len() != n {
        return Err(Error::InvalidConfig(format!("ridge needs >= 2 records with targets, got {n} and {}", y.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} must be finite and >= 0")));
    }
    let d = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch(format!("feature dim {} vs {d}", bad.len())));
    }
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
    let mut std: Vec<f64> = (0..d)
        .map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    let active: Vec<bool> = std.iter().zip(&mean).map(|(s, m)| *s > 1e-12 * m.abs().max(1.0)).collect();
    let dropped = active.iter().filter(|a| !**a).count();
    if dropped > 0 {
        log::warn!("ridge: dropping {dropped} constant feature column(s)");
    }
    for (s, a) in std.iter_mut().zip(&active) {
        if !a {
            *s = 1.0;
        }
    }
    let cols: Vec<usize> = (0..d).filter(|&j| active[j]).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let h = DMatrix::from_fn(n, cols.len(), |i, k| {
        let j = cols[k];
        (xs[i][j] - mean[j]) / std[j]
    });
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut gram = h.transpose() * &h;
    for k in 0..cols.len() {
        gram[(k, k)] += lambda;
    }
    let rhs = h.transpose() * yc;
    let scale = gram.diagonal().max().max(1.0);
    let chol = gram.cholesky().ok_or(Error::SingularSystem)?;
    let l_diag = chol.l_dirty().diagonal();
    if l_diag.iter().any(|v| v * v <= 1e-12 * scale) {
        return Err(Error::SingularSystem);
    }
    let w = chol.solve(&rhs);
    let mut weights = vec![0.0; d];
    for (k, &j) in cols.iter().enumerate() {
        weights[j] = w[k];
    }
    Ok(RidgeModel { weights, intercept: y_mean, lambda, feature_mean: mean, feature_std: std })
}

/// `{10^k : k = -3, -2.5, ..., 3}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..13).map(|k| 10f64.powf(-3.0 + 0.5 * k as f64)).collect()
}

fn features_of<'a>(records: &[&'a QualityRecord]) -> Vec<&'a [f64]> {
    records.iter().map(|r| r.embedding.as_slice()).collect()
}

fn targets_of(records: &[&QualityRecord]) -> Vec<f64> {
    records.iter().map(|r| r.mos).collect()
}

/// Grid λ with the highest validation SROCC; ties go to the larger λ.
pub fn select_lambda(train: &[&QualityRecord], val: &[&QualityRecord], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let (xs, y) = (features_of(train), targets_of(train));
    let (vx, vy) = (features_of(val), targets_of(val));
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let model = ridge_fit(&xs, &y, lambda)?;
        let s = srocc(&model.predict_all(&vx), &vy)?;
        best = match best {
            Some((bs, bl)) if bs > s || (bs == s && bl >= lambda) => Some((bs, bl)),
            _ => Some((s, lambda)),
        };
    }
    Ok(best.map(|b| b.1).unwrap_or(grid[0]))
}

fn check_pair(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("need equal lengths >= 3, got {} and {}", pred.len(), gt.len())));
    }
    if pred.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite value".into()));
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn srocc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair(pred, gt)?;
    pearson(&average_ranks(pred), &average_ranks(gt))
}

/// `Q(p) = β₂ + (β₁ − β₂) / (1 + exp(−(p − β₃)/|β₄|))`.
pub fn logistic4(beta: &[f64; 4], p: f64) -> f64 {
    beta[1] + (beta[0] - beta[1]) / (1.0 + (-(p - beta[2]) / beta[3].abs()).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlccFit {
    pub plcc: f64,
    pub raw_plcc: f64,
    pub beta: [f64; 4],
    /// False when the logistic fit did not beat the raw correlation.
    pub used_logistic: bool,
}

/// PLCC after a least-squares four-parameter logistic fit.
pub fn plcc_with_logistic(pred: &[f64], gt: &[f64]) -> Result<PlccFit> {
    let raw = pearson(pred, gt)?;
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let std_pred = (pred.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    let gt_max = gt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gt_min = gt.iter().copied().fold(f64::INFINITY, f64::min);
    let init = [gt_max, gt_min, median(pred), std_pred];
    let scales = [gt_max - gt_min, gt_max - gt_min, std_pred, std_pred];
    let sse = |b: &[f64; 4]| {
        let v: f64 = pred.iter().zip(gt).map(|(p, g)| (logistic4(b, *p) - g).powi(2)).sum();
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let beta = nelder_mead(sse, init, scales);
    let fitted: Vec<f64> = pred.iter().map(|p| logistic4(&beta, *p)).collect();
    match pearson(&fitted, gt) {
        Ok(plcc) if plcc >= raw => Ok(PlccFit { plcc, raw_plcc: raw, beta, used_logistic: true }),
        _ => Ok(PlccFit { plcc: raw, raw_plcc: raw, beta, used_logistic: false }),
    }
}

/// Derivative-free simplex minimization with restarts from the best vertex.
fn nelder_mead(f: impl Fn(&[f64; 4]) -> f64, x0: [f64; 4], scales: [f64; 4]) -> [f64; 4] {
    const N: usize = 4;
    let mut best = x0;
    for _restart in 0..4 {
        let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
        simplex.push((best, f(&best)));
        for i in 0..N {
            let mut x = best;
            let step = 0.1 * x[i].abs().max(scales[i]).max(1e-8);
            x[i] += step;
            simplex.push((x, f(&x)));
        }
        for _ in 0..5000 {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (fb, fw) = (simplex[0].1, simplex[N].1);
            if (fw - fb).abs() <= 1e-30 + 1e-15 * fb.abs() {
                break;
            }
            let mut c = [0.0; N];
            for (x, _) in &simplex[..N] {
                (0..N).for_each(|k| c[k] += x[k] / N as f64);
            }
            let along = |t: f64| -> [f64; N] {
                let mut y = [0.0; N];
                (0..N).for_each(|k| y[k] = c[k] + t * (simplex[N].0[k] - c[k]));
                y
            };
            let xr = along(-1.0);
            let fr = f(&xr);
            if fr < simplex[0].1 {
                let xe = along(-2.0);
                let fe = f(&xe);
                simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[N - 1].1 {
                simplex[N] = (xr, fr);
            } else {
                let (xc, fc) = if fr < fw {
                    let x = along(-0.5);
                    (x, f(&x))
                } else {
                    let x = along(0.5);
                    (x, f(&x))
                };
                if fc < fw.min(fr) {
                    simplex[N] = (xc, fc);
                } else {
                    let x0 = simplex[0].0;
                    for v in simplex.iter_mut().skip(1) {
                        (0..N).for_each(|k| v.0[k] = x0[k] + 0.5 * (v.0[k] - x0[k]));
                        v.1 = f(&v.0);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let improved = simplex[0].1 < f(&best);
        best = simplex[0].0;
        if !improved {
            break;
        }
    }
    best
}

/// Exact median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn validate_ratios(ratios: &[f64]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split ratios {ratios:?} must be non-negative and sum to 1 (sum {sum})")));
    }
    Ok(())
}

/// Distinct content ids in sorted order.
fn contents(records: &[QualityRecord]) -> Vec<&str> {
    let mut c: Vec<&str> = records.iter().map(|r| r.content_id.as_str()).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Random content-level partition of record indices. Each part gets
/// `round(ratio * contents)` contents and the last part takes the rest.
pub fn partition_by_content(records: &[QualityRecord], ratios: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    validate_ratios(ratios)?;
    let mut ids = contents(records);
    let c = ids.len();
    let mut counts: Vec<usize> = ratios[..ratios.len() - 1].iter().map(|r| (r * c as f64).round() as usize).collect();
    let used: usize = counts.iter().sum();
    if used > c {
        return Err(Error::TooFewContents(format!("{c} contents cannot honour ratios {ratios:?}")));
    }
    counts.push(c - used);
    for (count, ratio) in counts.iter().zip(ratios) {
        if *ratio > 0.0 && *count == 0 {
            return Err(Error::TooFewContents(format!("{c} contents leave a partition empty for ratios {ratios:?}")));
        }
    }
    ids.shuffle(rng);
    let mut part_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut start = 0;
    for (p, count) in counts.iter().enumerate() {
        for id in &ids[start..start + count] {
            part_of.insert(id, p);
        }
        start += count;
    }
    let mut parts = vec![Vec::new(); ratios.len()];
    for (i, r) in records.iter().enumerate() {
        parts[part_of[r.content_id.as_str()]].push(i);
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n_splits: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub lambda_grid: Vec<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { n_splits: 100, ratios: [0.7, 0.1, 0.2], seed: 0, lambda_grid: default_lambda_grid() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub index: usize,
    /// ChaCha8 stream of the protocol seed used for this split.
    pub rng_stream: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub lambda: f64,
    pub srocc: f64,
    pub plcc: f64,
    pub logistic_beta: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ProtocolConfig,
    pub num_videos: usize,
    pub num_contents: usize,
    pub splits: Vec<SplitResult>,
    pub median_srocc: f64,
    pub median_plcc: f64,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::from_write(e, dir))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::from_write(e, path))
    }
}

fn check_records(records: &[QualityRecord]) -> Result<usize> {
    let d = records.first().map(|r| r.embedding.len()).ok_or(Error::EmptyBatch)?;
    for r in records {
        if r.embedding.len() != d {
            return Err(Error::DimensionMismatch(format!("video {} has dim {}, expected {d}", r.video_id, r.embedding.len())));
        }
        if !r.mos.is_finite() {
            return Err(Error::InvalidConfig(format!("video {} has non-finite MOS", r.video_id)));
        }
    }
    Ok(d)
}

fn run_split(records: &[QualityRecord], cfg: &ProtocolConfig, index: usize) -> Result<SplitResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let parts = partition_by_content(records, &cfg.ratios, &mut rng)?;
    let pick = |p: &[usize]| p.iter().map(|&i| &records[i]).collect::<Vec<_>>();
    let (train, val, test) = (pick(&parts[0]), pick(&parts[1]), pick(&parts[2]));
    let lambda = select_lambda(&train, &val, &cfg.lambda_grid)?;
    let model = ridge_fit(&features_of(&train), &targets_of(&train), lambda)?;
    let pred = model.predict_all(&features_of(&test));
    let gt = targets_of(&test);
    let fit = plcc_with_logistic(&pred, &gt)?;
    let ids = |v: &[&QualityRecord]| v.iter().map(|r| r.video_id.clone()).collect();
    Ok(SplitResult {
        index,
        rng_stream: index as u64,
        train: ids(&train),
        val: ids(&val),
        test: ids(&test),
        lambda,
        srocc: srocc(&pred, &gt)?,
        plcc: fit.plcc,
        logistic_beta: fit.beta,
    })
}

/// Repeated content-aware train/val/test evaluation with median aggregation.
/// Splits run in parallel with per-split RNG streams, so the report does not
/// depend on the worker count.
pub fn run_protocol(records: &[QualityRecord], cfg: &ProtocolConfig) -> Result<EvalReport> {
    validate_ratios(&cfg.ratios)?;
    if cfg.n_splits == 0 {
        return Err(Error::InvalidConfig("n_splits must be positive".into()));
    }
    check_records(records)?;
    let splits = (0..cfg.n_splits)
        .into_par_iter()
        .map(|k| run_split(records, cfg, k))
        .collect::<Result<Vec<_>>>()?;
    let s: Vec<f64> = splits.iter().map(|r| r.srocc).collect();
    let p: Vec<f64> = splits.iter().map(|r| r.plcc).collect();
    Ok(EvalReport {
        config: cfg.clone(),
        num_videos: records.len(),
        num_contents: contents(records).len(),
        median_srocc: median(&s),
        median_plcc: median(&p),
        splits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossResult {
    pub lambda: f64,
    pub srocc: f64,
    pub plcc: f64,
    pub logistic_beta: [f64; 4],
}

/// Fit on all of `train` (λ from an internal 90/10 content split), test once
/// on all of `test`.
pub fn cross_dataset(train: &[QualityRecord], test: &[QualityRecord], grid: &[f64], seed: u64) -> Result<CrossResult> {
    let (dt, de) = (check_records(train)?, check_records(test)?);
    if dt != de {
        return Err(Error::DimensionMismatch(format!("train embeddings have dim {dt}, test embeddings {de}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = partition_by_content(train, &[0.9, 0.1], &mut rng)?;
    let pick = |p: &[usize]| p.iter().map(|&i| &train[i]).collect::<Vec<_>>();
    let lambda = select_lambda(&pick(&parts[0]), &pick(&parts[1]), grid)?;
    let all: Vec<&QualityRecord> = train.iter().collect();
    let model = ridge_fit(&features_of(&all), &targets_of(&all), lambda)?;
    let test_refs: Vec<&QualityRecord> = test.iter().collect();
    let pred = model.predict_all(&features_of(&test_refs));
    let gt = targets_of(&test_refs);
    let fit = plcc_with_logistic(&pred, &gt)?;
    Ok(CrossResult { lambda, srocc: srocc(&pred, &gt)?, plcc: fit.plcc, logistic_beta: fit.beta })
}

/// One row of the evaluation manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub video_id: String,
    pub content_id: String,
    pub mos: f64,
    pub feature_path_full: PathBuf,
    pub feature_path_half: PathBuf,
}

/// Reads the manifest; relative feature paths resolve against its directory.
pub fn load_eval_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::from_open(e, path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(file).deserialize() {
        let mut row: ManifestRow = row?;
        for p in [&mut row.feature_path_full, &mut row.feature_path_half] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn save_eval_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::from_write(e, path))
}

/// Loads each row's feature files and embeds them with the frozen model.
pub fn build_records(rows: &[ManifestRow], model: &SequenceModel, clip_len: usize) -> Result<Vec<QualityRecord>> {
    rows.par_iter()
        .map(|r| {
            let full = load_features(&r.feature_path_full, Scale::Full)?;
            let half = load_features(&r.feature_path_half, Scale::Half)?;
            if full.dim() != model.dims().input_dim || half.dim() != model.dims().input_dim {
                return Err(Error::DimensionMismatch(format!(
                    "video {}: feature dim {}/{} but the model expects {}",
                    r.video_id,
                    full.dim(),
                    half.dim(),
                    model.dims().input_dim
                )));
            }
            Ok(QualityRecord {
                video_id: r.video_id.clone(),
                content_id: r.content_id.clone(),
                mos: r.mos,
                embedding: video_embedding(model, &full, &half, clip_len)?,
            })
        })
        .collect()
}
