//! Feature selection stack: variance filter on raw values, standardization,
//! ANOVA F K-best, then Lasso by cyclic coordinate descent with the ordinal
//! class codes 0..3 as the regression target. Fitted on training rows only
//! and replayable on held-out data.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major sample-by-feature matrix with ids and integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub feature_names: Vec<String>,
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    /// n_samples * n_features, row-major.
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(
        feature_names: Vec<String>,
        sample_ids: Vec<String>,
        labels: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let n = sample_ids.len();
        let p = feature_names.len();
        if labels.len() != n || values.len() != n * p {
            return Err(Error::DimMismatch(format!(
                "feature matrix: {n} ids, {} labels, {} values for width {p}",
                labels.len(),
                values.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate feature name {name}")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix values".into()));
        }
        Ok(FeatureMatrix { feature_names, sample_ids, labels, values })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_features();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let p = self.n_features();
        (0..self.n_samples()).map(|i| self.values[i * p + j]).collect()
    }

    /// New matrix keeping the given feature columns (indices must be strictly
    /// increasing).
    pub fn select_columns(&self, kept: &[usize]) -> Result<FeatureMatrix> {
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("kept indices must be strictly increasing".into()));
        }
        if let Some(&last) = kept.last() {
            if last >= self.n_features() {
                return Err(Error::InvalidArgument(format!(
                    "kept index {last} out of range for width {}",
                    self.n_features()
                )));
            }
        }
        let p = self.n_features();
        let mut values = Vec::with_capacity(self.n_samples() * kept.len());
        for i in 0..self.n_samples() {
            let row = &self.values[i * p..(i + 1) * p];
            values.extend(kept.iter().map(|&j| row[j]));
        }
        FeatureMatrix::new(
            kept.iter().map(|&j| self.feature_names[j].clone()).collect(),
            self.sample_ids.clone(),
            self.labels.clone(),
            values,
        )
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<FeatureMatrix> {
        let p = self.n_features();
        let mut values = Vec::with_capacity(rows.len() * p);
        let mut ids = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            if i >= self.n_samples() {
                return Err(Error::InvalidArgument(format!("row {i} out of range")));
            }
            values.extend_from_slice(self.row(i));
            ids.push(self.sample_ids[i].clone());
            labels.push(self.labels[i]);
        }
        FeatureMatrix::new(self.feature_names.clone(), ids, labels, values)
    }

    /// CSV layout: header "id,label,<feature names...>", one row per sample.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("id,label");
        for name in &self.feature_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..self.n_samples() {
            out.push_str(&self.sample_ids[i]);
            out.push(',');
            out.push_str(&self.labels[i].to_string());
            for v in self.row(i) {
                out.push(',');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<FeatureMatrix> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let header = match lines.next() {
            Some((_, Ok(h))) => h,
            _ => return Err(Error::Csv { line: 1, msg: "missing header".into() }),
        };
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "id" || cols[1] != "label" {
            return Err(Error::Csv { line: 1, msg: "header must start with id,label".into() });
        }
        let feature_names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
        let p = feature_names.len();
        let mut sample_ids = Vec::new();
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Csv { line: lineno, msg: e.to_string() })?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != p + 2 {
                return Err(Error::Csv {
                    line: lineno,
                    msg: format!("expected {} fields, got {}", p + 2, fields.len()),
                });
            }
            sample_ids.push(fields[0].to_string());
            labels.push(fields[1].parse().map_err(|_| Error::Csv {
                line: lineno,
                msg: format!("bad label {:?}", fields[1]),
            })?);
            for f in &fields[2..] {
                values.push(f.parse().map_err(|_| Error::Csv {
                    line: lineno,
                    msg: format!("bad value {f:?}"),
                })?);
            }
        }
        FeatureMatrix::new(feature_names, sample_ids, labels, values)
    }
}

fn population_variance(col: &[f64]) -> f64 {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFilter {
    pub threshold: f64,
    pub kept: Vec<usize>,
}

/// Keeps feature j iff its population variance over training rows is at
/// least `threshold`. Operates on raw, unstandardized values.
pub fn variance_filter_fit(x: &FeatureMatrix, threshold: f64) -> Result<VarianceFilter> {
    if x.n_samples() < 2 {
        return Err(Error::InvalidArgument("variance filter needs >= 2 samples".into()));
    }
    let kept = (0..x.n_features())
        .filter(|&j| population_variance(&x.column(j)) >= threshold)
        .collect();
    Ok(VarianceFilter { threshold, kept })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn standardize_fit(x: &FeatureMatrix) -> Result<Standardizer> {
    if x.n_samples() == 0 {
        return Err(Error::InvalidArgument("cannot standardize an empty matrix".into()));
    }
    let mut mean = Vec::with_capacity(x.n_features());
    let mut std = Vec::with_capacity(x.n_features());
    for j in 0..x.n_features() {
        let col = x.column(j);
        let m = col.iter().sum::<f64>() / col.len() as f64;
        mean.push(m);
        std.push(population_variance(&col).sqrt());
    }
    Ok(Standardizer { mean, std })
}

/// (x - mean) / std per feature; zero-variance features map to 0.
pub fn standardize_apply(s: &Standardizer, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    if x.n_features() != s.mean.len() {
        return Err(Error::DimMismatch(format!(
            "standardizer width {} vs matrix width {}",
            s.mean.len(),
            x.n_features()
        )));
    }
    let p = x.n_features();
    let values = x
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % p;
            if s.std[j] == 0.0 {
                0.0
            } else {
                (v - s.mean[j]) / s.std[j]
            }
        })
        .collect();
    FeatureMatrix::new(x.feature_names.clone(), x.sample_ids.clone(), x.labels.clone(), values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KBest {
    pub k: usize,
    pub scores: Vec<f64>,
    pub kept: Vec<usize>,
    /// Set when k exceeded the available width and was clamped.
    pub clamped: bool,
}

/// One-way ANOVA F-statistic per feature. Features with zero within-class
/// variance but nonzero between-class variance get +inf and sort first.
pub fn anova_f_scores(x: &FeatureMatrix, labels: &[usize]) -> Result<Vec<f64>> {
    let n = x.n_samples();
    if labels.len() != n {
        return Err(Error::DimMismatch("labels vs samples".into()));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("ANOVA needs at least 2 classes".into()));
    }
    let k = classes.len();
    let class_index: std::collections::BTreeMap<usize, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut scores = Vec::with_capacity(x.n_features());
    for j in 0..x.n_features() {
        let col = x.column(j);
        let grand_mean = col.iter().sum::<f64>() / n as f64;
        let mut group_sum = vec![0.0f64; k];
        let mut group_count = vec![0usize; k];
        for (v, &label) in col.iter().zip(labels) {
            let g = class_index[&label];
            group_sum[g] += v;
            group_count[g] += 1;
        }
        let mut ss_between = 0.0;
        for g in 0..k {
            let m = group_sum[g] / group_count[g] as f64;
            ss_between += group_count[g] as f64 * (m - grand_mean) * (m - grand_mean);
        }
        let mut ss_within = 0.0;
        for (v, &label) in col.iter().zip(labels) {
            let g = class_index[&label];
            let m = group_sum[g] / group_count[g] as f64;
            ss_within += (v - m) * (v - m);
        }
        let df_between = (k - 1) as f64;
        let df_within = (n - k) as f64;
        let ms_between = ss_between / df_between;
        let ms_within = ss_within / df_within;
        scores.push(if ms_within == 0.0 {
            if ms_between == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            ms_between / ms_within
        });
    }
    Ok(scores)
}

/// Top-k features by F-score, ties broken by lower index. k larger than the
/// width is clamped and flagged.
pub fn kbest_fit(x: &FeatureMatrix, labels: &[usize], k: usize) -> Result<KBest> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let scores = anova_f_scores(x, labels)?;
    let clamped = k > scores.len();
    let k_eff = k.min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..k_eff].to_vec();
    kept.sort_unstable();
    Ok(KBest { k: k_eff, scores, kept, clamped })
}

/// sign(z) * max(|z| - gamma, 0).
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lasso {
    pub lambda: f64,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub kept: Vec<usize>,
    pub sweeps: usize,
}

pub const LASSO_TOL: f64 = 1e-8;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

fn lasso_objective(x: &FeatureMatrix, y: &[f64], beta: &[f64], intercept: f64, lambda: f64) -> f64 {
    let n = x.n_samples();
    let p = x.n_features();
    let mut sq = 0.0;
    for i in 0..n {
        let row = &x.values[i * p..(i + 1) * p];
        let pred = intercept + row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
        let r = y[i] - pred;
        sq += r * r;
    }
    sq / (2.0 * n as f64) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Cyclic coordinate descent on (1/2n)|y - Xb - b0|^2 + lambda*|b|_1 with an
/// unpenalized intercept. Stops when the largest coefficient change in a
/// sweep drops below 1e-8, or after 10000 sweeps.
pub fn lasso_fit(x: &FeatureMatrix, y: &[f64], lambda: f64) -> Result<Lasso> {
    let n = x.n_samples();
    let p = x.n_features();
    if y.len() != n {
        return Err(Error::DimMismatch("lasso target length".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("lasso needs samples".into()));
    }
    if !(lambda >= 0.0) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lasso inputs".into()));
    }
    let nf = n as f64;
    // per-column second moments: (1/n) x_j^T x_j
    let col_sq: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| x.values[i * p + j].powi(2)).sum::<f64>() / nf)
        .collect();
    let mut beta = vec![0.0f64; p];
    let mut intercept = y.iter().sum::<f64>() / nf;
    let mut residual: Vec<f64> = y.iter().map(|v| v - intercept).collect();
    let mut objective = lasso_objective(x, y, &beta, intercept, lambda);
    let mut sweeps = 0;
    for sweep in 1..=LASSO_MAX_SWEEPS {
        sweeps = sweep;
        let mut max_change = 0.0f64;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let old = beta[j];
            // rho = (1/n) x_j^T (r + x_j * old)
            let mut rho = 0.0;
            for i in 0..n {
                rho += x.values[i * p + j] * residual[i];
            }
            rho = rho / nf + col_sq[j] * old;
            let new = soft_threshold(rho, lambda) / col_sq[j];
            if new != old {
                let delta = new - old;
                for i in 0..n {
                    residual[i] -= x.values[i * p + j] * delta;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        // re-center the intercept against the current residual
        let shift = residual.iter().sum::<f64>() / nf;
        if shift != 0.0 {
            intercept += shift;
            for r in &mut residual {
                *r -= shift;
            }
            max_change = max_change.max(shift.abs());
        }
        let new_objective = lasso_objective(x, y, &beta, intercept, lambda);
        debug_assert!(
            new_objective <= objective + 1e-10 * objective.abs().max(1.0),
            "objective rose: {objective} -> {new_objective}"
        );
        objective = new_objective;
        if max_change < LASSO_TOL {
            break;
        }
    }
    let kept = (0..p).filter(|&j| beta[j] != 0.0).collect();
    Ok(Lasso { lambda, coefficients: beta, intercept, kept, sweeps })
}

pub fn lasso_predict(model: &Lasso, x: &FeatureMatrix) -> Result<Vec<f64>> {
    if x.n_features() != model.coefficients.len() {
        return Err(Error::DimMismatch("lasso predict width".into()));
    }
    Ok((0..x.n_samples())
        .map(|i| {
            model.intercept
                + x.row(i).iter().zip(&model.coefficients).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect())
}

/// Smallest lambda that zeroes all coefficients: max_j |x_j^T (y - ybar)| / n.
pub fn lasso_lambda_max(x: &FeatureMatrix, y: &[f64]) -> f64 {
    let n = x.n_samples();
    let p = x.n_features();
    let ybar = y.iter().sum::<f64>() / n as f64;
    (0..p)
        .map(|j| {
            (0..n).map(|i| x.values[i * p + j] * (y[i] - ybar)).sum::<f64>().abs() / n as f64
        })
        .fold(0.0, f64::max)
}

/// Log-spaced grid from lambda_max down to lambda_max * 1e-3.
pub fn lasso_lambda_grid(lambda_max: f64, points: usize) -> Vec<f64> {
    if points == 1 || lambda_max == 0.0 {
        return vec![lambda_max];
    }
    let lo = (lambda_max * 1e-3).ln();
    let hi = lambda_max.ln();
    (0..points)
        .map(|i| (hi + (lo - hi) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// 5-fold-CV lambda choice: fold assignment is a seeded shuffle, the score is
/// mean squared error on the held-out fold, and ties take the larger lambda
/// (grids are descending, so the first minimum wins).
pub fn lasso_select_lambda(
    x: &FeatureMatrix,
    y: &[f64],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    let n = x.n_samples();
    if n < folds {
        return Err(Error::InvalidArgument(format!("{n} samples for {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in grid {
        let mut sq_err = 0.0;
        for f in 0..folds {
            let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test_rows: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let xt = x.select_rows(&train_rows)?;
            let yt: Vec<f64> = train_rows.iter().map(|&i| y[i]).collect();
            let model = lasso_fit(&xt, &yt, lambda)?;
            let xv = x.select_rows(&test_rows)?;
            let preds = lasso_predict(&model, &xv)?;
            for (pred, &i) in preds.iter().zip(&test_rows) {
                sq_err += (pred - y[i]) * (pred - y[i]);
            }
        }
        let mse = sq_err / n as f64;
        if mse < best.0 {
            best = (mse, lambda);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub variance_threshold: f64,
    pub k_best: usize,
    /// Fixed lambda; when absent it is chosen by cross-validation.
    pub lambda: Option<f64>,
    pub lambda_grid_points: usize,
    pub cv_folds: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            variance_threshold: 0.8,
            k_best: 200,
            lambda: None,
            lambda_grid_points: 50,
            cv_folds: 5,
            seed: 0,
        }
    }
}

/// Fitted four-stage stack. `feature_trace` records the surviving names
/// after each stage for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPipeline {
    pub input_names: Vec<String>,
    pub variance: VarianceFilter,
    pub standardizer: Standardizer,
    pub kbest: KBest,
    pub lasso: Lasso,
    pub feature_trace: Vec<Vec<String>>,
}

pub fn pipeline_fit(x: &FeatureMatrix, cfg: &SelectionConfig) -> Result<SelectionPipeline> {
    let y: Vec<f64> = x.labels.iter().map(|&l| l as f64).collect();

    let variance = variance_filter_fit(x, cfg.variance_threshold)?;
    let x1 = x.select_columns(&variance.kept)?;

    let standardizer = standardize_fit(&x1)?;
    let x2 = standardize_apply(&standardizer, &x1)?;

    let kbest = kbest_fit(&x2, &x2.labels, cfg.k_best)?;
    let x3 = x2.select_columns(&kbest.kept)?;

    let lambda = match cfg.lambda {
        Some(l) => l,
        None => {
            let grid = lasso_lambda_grid(lasso_lambda_max(&x3, &y), cfg.lambda_grid_points);
            lasso_select_lambda(&x3, &y, &grid, cfg.cv_folds, cfg.seed)?
        }
    };
    let lasso = lasso_fit(&x3, &y, lambda)?;

    let feature_trace = vec![
        x1.feature_names.clone(),
        x2.feature_names.clone(),
        x3.feature_names.clone(),
        lasso.kept.iter().map(|&j| x3.feature_names[j].clone()).collect(),
    ];
    Ok(SelectionPipeline {
        input_names: x.feature_names.clone(),
        variance,
        standardizer,
        kbest,
        lasso,
        feature_trace,
    })
}

/// Replays the fitted stages on new rows: column slices, training-statistics
/// standardization, then the Lasso support slice.
pub fn pipeline_transform(pipeline: &SelectionPipeline, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    if x.feature_names != pipeline.input_names {
        return Err(Error::DimMismatch("transform input names differ from fit input".into()));
    }
    let x1 = x.select_columns(&pipeline.variance.kept)?;
    let x2 = standardize_apply(&pipeline.standardizer, &x1)?;
    let x3 = x2.select_columns(&pipeline.kbest.kept)?;
    x3.select_columns(&pipeline.lasso.kept)
}

pub fn save_pipeline(pipeline: &SelectionPipeline, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(pipeline).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_pipeline(path: &Path) -> Result<SelectionPipeline> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(n: usize, p: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let values = (0..n * p).map(|_| rng.gen_range(-3.0..3.0)).collect();
        FeatureMatrix::new(
            (0..p).map(|j| format!("f{j}")).collect(),
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..n).map(|i| i % 4).collect(),
            values,
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = random_matrix(7, 5, 9);
        m.save_csv(&path).unwrap();
        let back = FeatureMatrix::load_csv(&path).unwrap();
        assert_eq!(m, back);
        let bytes1 = std::fs::read(&path).unwrap();
        back.save_csv(&path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn variance_filter_trivial_cases() {
        // col0 constant (drop), col1 alternating 0/2 (variance 1, keep)
        let m = FeatureMatrix::new(
            vec!["const".into(), "alt".into()],
            (0..4).map(|i| format!("s{i}")).collect(),
            vec![0, 1, 2, 3],
            vec![5.0, 0.0, 5.0, 2.0, 5.0, 0.0, 5.0, 2.0],
        )
        .unwrap();
        let filter = variance_filter_fit(&m, 0.8).unwrap();
        assert_eq!(filter.kept, vec![1]);
    }

    #[test]
    fn variance_filter_matches_two_pass_oracle() {
        let m = random_matrix(30, 20, 4);
        let filter = variance_filter_fit(&m, 0.8).unwrap();
        let oracle: Vec<usize> = (0..20)
            .filter(|&j| {
                let col = m.column(j);
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var: f64 =
                    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
                var >= 0.8
            })
            .collect();
        assert_eq!(filter.kept, oracle);
        assert!(!filter.kept.is_empty());
        assert!(filter.kept.len() < 20 || oracle.len() == 20);
    }

    #[test]
    fn standardize_hand_case() {
        let m = FeatureMatrix::new(
            vec!["a".into()],
            vec!["x".into(), "y".into()],
            vec![0, 1],
            vec![1.0, 3.0],
        )
        .unwrap();
        let s = standardize_fit(&m).unwrap();
        let t = standardize_apply(&s, &m).unwrap();
        assert_eq!(t.values, vec![-1.0, 1.0]);
    }

    #[test]
    fn standardized_training_matrix_has_unit_stats() {
        let m = random_matrix(25, 6, 5);
        let s = standardize_fit(&m).unwrap();
        let t = standardize_apply(&s, &m).unwrap();
        for j in 0..6 {
            let col = t.column(j);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!((var.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_uses_training_statistics_on_test_rows() {
        let train = FeatureMatrix::new(
            vec!["a".into()],
            vec!["x".into(), "y".into()],
            vec![0, 1],
            vec![0.0, 2.0],
        )
        .unwrap();
        let s = standardize_fit(&train).unwrap();
        let test = FeatureMatrix::new(
            vec!["a".into()],
            vec!["z".into()],
            vec![2],
            vec![10.0],
        )
        .unwrap();
        let t = standardize_apply(&s, &test).unwrap();
        // (10 - 1) / 1, not test statistics
        assert_eq!(t.values, vec![9.0]);
    }

    #[test]
    fn kbest_perfect_feature_ranks_first() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let p = 6;
        let mut values = Vec::new();
        for (i, &label) in labels.iter().enumerate().take(n) {
            let _ = i;
            values.push(label as f64);
            for _ in 1..p {
                values.push(rng.gen_range(-1.0..1.0));
            }
        }
        let m = FeatureMatrix::new(
            (0..p).map(|j| format!("f{j}")).collect(),
            (0..n).map(|i| format!("s{i}")).collect(),
            labels.clone(),
            values,
        )
        .unwrap();
        let kb = kbest_fit(&m, &labels, 1).unwrap();
        assert_eq!(kb.kept, vec![0]);
        assert!(kb.scores[0].is_infinite());
    }

    #[test]
    fn kbest_constant_within_class_feature_scores_zero() {
        let labels = vec![0, 0, 1, 1];
        let m = FeatureMatrix::new(
            vec!["same".into()],
            (0..4).map(|i| format!("s{i}")).collect(),
            labels.clone(),
            vec![2.0; 4],
        )
        .unwrap();
        let scores = anova_f_scores(&m, &labels).unwrap();
        assert_eq!(scores, vec![0.0]);
    }

    /// Textbook one-way ANOVA oracle: explicit group means and mean squares.
    fn anova_oracle(col: &[f64], labels: &[usize]) -> f64 {
        let classes: Vec<usize> = {
            let mut c: Vec<usize> = labels.to_vec();
            c.sort_unstable();
            c.dedup();
            c
        };
        let n = col.len() as f64;
        let grand = col.iter().sum::<f64>() / n;
        let mut ssb = 0.0;
        let mut ssw = 0.0;
        for &class in &classes {
            let group: Vec<f64> = col
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == class)
                .map(|(v, _)| *v)
                .collect();
            let gm = group.iter().sum::<f64>() / group.len() as f64;
            ssb += group.len() as f64 * (gm - grand).powi(2);
            ssw += group.iter().map(|v| (v - gm).powi(2)).sum::<f64>();
        }
        (ssb / (classes.len() as f64 - 1.0)) / (ssw / (n - classes.len() as f64))
    }

    #[test]
    fn anova_matches_group_means_oracle() {
        let m = random_matrix(40, 20, 7);
        let scores = anova_f_scores(&m, &m.labels).unwrap();
        for j in 0..20 {
            let expected = anova_oracle(&m.column(j), &m.labels);
            assert!(
                (scores[j] - expected).abs() <= 1e-9 * expected.abs().max(1.0),
                "feature {j}: {} vs {expected}",
                scores[j]
            );
        }
    }

    #[test]
    fn kbest_clamps_oversized_k() {
        let m = random_matrix(20, 5, 8);
        let kb = kbest_fit(&m, &m.labels, 50).unwrap();
        assert!(kb.clamped);
        assert_eq!(kb.kept, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-4.0, 1.5), -2.5);
        assert_eq!(soft_threshold(0.7, 0.0), 0.7);
    }

    fn check_kkt(x: &FeatureMatrix, y: &[f64], model: &Lasso, tol: f64) {
        let n = x.n_samples();
        let p = x.n_features();
        let preds = lasso_predict(model, x).unwrap();
        let residual: Vec<f64> = y.iter().zip(&preds).map(|(a, b)| a - b).collect();
        for j in 0..p {
            let corr =
                (0..n).map(|i| x.values[i * p + j] * residual[i]).sum::<f64>() / n as f64;
            let b = model.coefficients[j];
            if b == 0.0 {
                assert!(corr.abs() <= model.lambda + tol, "inactive {j}: |{corr}| > {}", model.lambda);
            } else {
                assert!(
                    (corr - model.lambda * b.signum()).abs() <= tol,
                    "active {j}: {corr} vs {}",
                    model.lambda * b.signum()
                );
            }
        }
    }

    #[test]
    fn lasso_lambda_max_zeroes_everything() {
        let m = random_matrix(30, 8, 10);
        let y: Vec<f64> = m.labels.iter().map(|&l| l as f64).collect();
        let lmax = lasso_lambda_max(&m, &y);
        for lambda in [lmax, lmax * 1.5] {
            let model = lasso_fit(&m, &y, lambda).unwrap();
            assert!(model.coefficients.iter().all(|&b| b == 0.0));
            assert!(model.kept.is_empty());
        }
    }

    #[test]
    fn lasso_orthonormal_design_soft_thresholds_ols() {
        // columns of an identity-like design scaled so (1/n) X^T X = I
        let n = 8;
        let p = 4;
        let scale = (n as f64).sqrt();
        let mut values = vec![0.0; n * p];
        // orthogonal columns from a 8x8 Hadamard-style construction
        let hadamard = |i: usize, j: usize| -> f64 {
            if (i & j).count_ones() % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        };
        for i in 0..n {
            for j in 0..p {
                values[i * p + j] = hadamard(i, j + 1); // skip constant col 0
            }
        }
        let m = FeatureMatrix::new(
            (0..p).map(|j| format!("f{j}")).collect(),
            (0..n).map(|i| format!("s{i}")).collect(),
            vec![0; n],
            values.clone(),
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ybar = y.iter().sum::<f64>() / n as f64;
        // OLS_j for orthonormal columns: (1/n) x_j^T (y - ybar)
        let ols: Vec<f64> = (0..p)
            .map(|j| (0..n).map(|i| values[i * p + j] * (y[i] - ybar)).sum::<f64>() / n as f64)
            .collect();
        let _ = scale;
        for lambda in [0.05, 0.3, 1.0] {
            let model = lasso_fit(&m, &y, lambda).unwrap();
            for j in 0..p {
                let expected = soft_threshold(ols[j], lambda);
                assert!(
                    (model.coefficients[j] - expected).abs() < 1e-8,
                    "lambda {lambda} coef {j}: {} vs {expected}",
                    model.coefficients[j]
                );
            }
            check_kkt(&m, &y, &model, 1e-6);
        }
    }

    #[test]
    fn lasso_zero_lambda_matches_normal_equations() {
        let n = 30;
        let p = 4;
        let m = random_matrix(n, p, 12);
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let model = lasso_fit(&m, &y, 0.0).unwrap();
        // normal equations on [1 | X] via Gaussian elimination
        let d = p + 1;
        let design = |i: usize, j: usize| if j == 0 { 1.0 } else { m.values[i * p + j - 1] };
        let mut a = vec![0.0f64; d * (d + 1)];
        for r in 0..d {
            for c in 0..d {
                a[r * (d + 1) + c] = (0..n).map(|i| design(i, r) * design(i, c)).sum();
            }
            a[r * (d + 1) + d] = (0..n).map(|i| design(i, r) * y[i]).sum();
        }
        for col in 0..d {
            let pivot = (col..d).max_by(|&r1, &r2| {
                a[r1 * (d + 1) + col].abs().partial_cmp(&a[r2 * (d + 1) + col].abs()).unwrap()
            }).unwrap();
            for c in 0..=d {
                a.swap(col * (d + 1) + c, pivot * (d + 1) + c);
            }
            let pv = a[col * (d + 1) + col];
            for r in 0..d {
                if r == col {
                    continue;
                }
                let factor = a[r * (d + 1) + col] / pv;
                for c in 0..=d {
                    a[r * (d + 1) + c] -= factor * a[col * (d + 1) + c];
                }
            }
        }
        let solution: Vec<f64> =
            (0..d).map(|r| a[r * (d + 1) + d] / a[r * (d + 1) + r]).collect();
        assert!((model.intercept - solution[0]).abs() < 1e-6);
        for j in 0..p {
            assert!(
                (model.coefficients[j] - solution[j + 1]).abs() < 1e-6,
                "coef {j}: {} vs {}",
                model.coefficients[j],
                solution[j + 1]
            );
        }
    }

    #[test]
    fn lasso_kkt_on_random_problems() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        for case in 0..20 {
            let n = rng.gen_range(15..40);
            let p = rng.gen_range(3..12);
            let m = random_matrix(n, p, 100 + case);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lambda = rng.gen_range(0.01..0.5);
            let model = lasso_fit(&m, &y, lambda).unwrap();
            check_kkt(&m, &y, &model, 1e-6);
        }
    }

    #[test]
    fn lambda_grid_spans_three_decades() {
        let grid = lasso_lambda_grid(2.0, 50);
        assert_eq!(grid.len(), 50);
        assert!((grid[0] - 2.0).abs() < 1e-12);
        assert!((grid[49] - 2e-3).abs() < 1e-12);
        assert!(grid.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn cv_lambda_deterministic() {
        let m = random_matrix(25, 6, 15);
        let y: Vec<f64> = m.labels.iter().map(|&l| l as f64).collect();
        let grid = lasso_lambda_grid(lasso_lambda_max(&m, &y), 20);
        let l1 = lasso_select_lambda(&m, &y, &grid, 5, 42).unwrap();
        let l2 = lasso_select_lambda(&m, &y, &grid, 5, 42).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn cv_recovers_linear_support() {
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let n = 60;
        let p = 10;
        let m = random_matrix(n, p, 17);
        // y linear in features 0, 3, 7 plus small noise
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let row = m.row(i);
                2.0 * row[0] - 1.5 * row[3] + row[7] + rng.gen_range(-0.05..0.05)
            })
            .collect();
        let grid = lasso_lambda_grid(lasso_lambda_max(&m, &y), 30);
        let lambda = lasso_select_lambda(&m, &y, &grid, 5, 1).unwrap();
        let model = lasso_fit(&m, &y, lambda).unwrap();
        for j in [0, 3, 7] {
            assert!(model.kept.contains(&j), "feature {j} missing from {:?}", model.kept);
        }
    }

    #[test]
    fn cv_pure_noise_picks_large_lambda() {
        let mut hits = 0;
        for seed in 0..10 {
            let m = random_matrix(200, 3, 400 + seed);
            let mut rng = ChaCha20Rng::seed_from_u64(500 + seed);
            let y: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lmax = lasso_lambda_max(&m, &y);
            let grid = lasso_lambda_grid(lmax, 50);
            let lambda = lasso_select_lambda(&m, &y, &grid, 5, seed).unwrap();
            let idx = grid.iter().position(|&g| g == lambda).unwrap();
            // largest decile of the descending grid = first 5 entries
            if idx < 5 {
                hits += 1;
            }
        }
        assert!(hits >= 8, "only {hits}/10 in the top decile");
    }

    fn phantom_like_matrix(seed: u64) -> FeatureMatrix {
        // informative block linked to the label plus distractors
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = 48;
        let p = 30;
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let mut values = Vec::with_capacity(n * p);
        for &label in &labels {
            for j in 0..p {
                let v = if j < 3 {
                    label as f64 * 2.0 + rng.gen_range(-0.5..0.5)
                } else {
                    rng.gen_range(-2.0..2.0)
                };
                values.push(v);
            }
        }
        FeatureMatrix::new(
            (0..p).map(|j| format!("f{j}")).collect(),
            (0..n).map(|i| format!("s{i}")).collect(),
            labels,
            values,
        )
        .unwrap()
    }

    #[test]
    fn pipeline_fit_transform_and_persistence() {
        let m = phantom_like_matrix(18);
        let cfg = SelectionConfig { k_best: 10, ..SelectionConfig::default() };
        let pipeline = pipeline_fit(&m, &cfg).unwrap();
        let t = pipeline_transform(&pipeline, &m).unwrap();
        assert_eq!(t.n_features(), pipeline.lasso.kept.len());
        assert_eq!(t.feature_names, pipeline.feature_trace[3]);
        // informative features survive
        for name in ["f0", "f1", "f2"] {
            assert!(t.feature_names.iter().any(|f| f == name), "{name} dropped: {:?}", t.feature_names);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.json");
        save_pipeline(&pipeline, &path).unwrap();
        let back = load_pipeline(&path).unwrap();
        assert_eq!(pipeline, back);
        let t2 = pipeline_transform(&back, &m).unwrap();
        assert_eq!(t.values, t2.values);
    }

    #[test]
    fn pipeline_has_no_test_leakage() {
        let m = phantom_like_matrix(19);
        let train_rows: Vec<usize> = (0..40).collect();
        let train = m.select_rows(&train_rows).unwrap();
        let cfg = SelectionConfig { k_best: 10, ..SelectionConfig::default() };
        let p1 = pipeline_fit(&train, &cfg).unwrap();
        let p2 = pipeline_fit(&train, &cfg).unwrap();
        assert_eq!(p1, p2);
        // transforming extra rows never mutates fitted parameters
        let t_all = pipeline_transform(&p1, &m).unwrap();
        assert_eq!(p1, p2);
        let t_again = pipeline_transform(&p1, &m).unwrap();
        assert_eq!(t_all.values, t_again.values);
    }

    #[test]
    fn transform_rejects_mismatched_names() {
        let m = phantom_like_matrix(20);
        let cfg = SelectionConfig { k_best: 10, ..SelectionConfig::default() };
        let pipeline = pipeline_fit(&m, &cfg).unwrap();
        let mut renamed = m.clone();
        renamed.feature_names[0] = "other".into();
        assert!(pipeline_transform(&pipeline, &renamed).is_err());
    }
}
