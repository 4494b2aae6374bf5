//! Evaluation protocols: ordering diagnostics, probes, imitation, steering benchmark, PCA.

use std::fmt::Write as _;

use nalgebra::{DVector, RowDVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cfquad::{rate_experiment, Density, RateReport, RateSettings};
use crate::dataio::{sample_context, Dataset};
use crate::diffnet::Mat;
use crate::env::N_OBJECTIVES;
use crate::error::{Error, Result};
use crate::model::sample_embedding;
use crate::stats::{mean, median, spearman};
use crate::steer::{
    decode_eval, decode_eval_many, primal_dual_run, steer,
    Constraint, ModelValues, Projection, SteerConfig, SteeringQuery, SteeringResult,
};
use crate::trainer::{csv_err, finish_csv, Bundle};
use crate::util::{rng_for, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub n_triplets: usize,
    pub n_queries: usize,
    pub n_paired_runs: usize,
    /// Iterates decoded along each steering path in the projection comparison.
    pub path_points: usize,
    pub probe_ridge: f64,
    pub cf_grid: Vec<usize>,
    pub cf_trials: usize,
    /// 0 selects the median heuristic.
    pub cf_lengthscale: f64,
    pub cf_ridge: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            n_triplets: 20_000,
            n_queries: 50,
            n_paired_runs: 10,
            path_points: 5,
            probe_ridge: 1e-6,
            cf_grid: vec![16, 32, 64, 128, 256, 512],
            cf_trials: 100,
            cf_lengthscale: 0.0,
            cf_ridge: 1e-6,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_triplets == 0 || self.n_queries == 0 || self.path_points < 2 {
            return Err(Error::invalid("evalkit", "counts must be positive (path_points >= 2)"));
        }
        if self.cf_grid.len() < 2 || self.cf_grid.iter().any(|&n| n < 4) || self.cf_trials == 0 {
            return Err(Error::invalid("evalkit", "cf_grid needs >= 2 sizes, each >= 4"));
        }
        if !(self.probe_ridge >= 0.0 && self.cf_ridge >= 0.0 && self.cf_lengthscale >= 0.0) {
            return Err(Error::invalid("evalkit", "ridges and lengthscale must be >= 0"));
        }
        Ok(())
    }
}

const STREAM_TRIPLETS: u64 = 10;
const STREAM_PROBE: u64 = 11;
const STREAM_IMITATION: u64 = 12;
const STREAM_BENCH: u64 = 13;
const STREAM_PATHS: u64 = 14;

fn write_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    finish_csv(w)
}

fn row_dist(z: &Mat, i: usize, j: usize) -> f64 {
    z.row(i)
        .iter()
        .zip(z.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOrdering {
    /// Fraction of label-ordered triplets whose latent distances disagree.
    pub violation_rate: f64,
    /// Mean over anchors of the Spearman correlation between `‖zᵢ − zⱼ‖` and `|yᵢ − yⱼ|`.
    pub spearman: f64,
    pub n_triplets: usize,
    pub n_anchors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingReport {
    pub tasks: Vec<TaskOrdering>,
}

impl OrderingReport {
    pub fn to_csv(&self) -> Result<String> {
        write_csv(
            &["task", "violation_rate", "spearman", "n_triplets", "n_anchors"],
            self.tasks.iter().enumerate().map(|(k, t)| {
                vec![
                    k.to_string(),
                    t.violation_rate.to_string(),
                    t.spearman.to_string(),
                    t.n_triplets.to_string(),
                    t.n_anchors.to_string(),
                ]
            }),
        )
    }
}

/// Triplet violations and per-anchor rank agreement for one task.
///
/// Triplets `(i, j, l)` with tied label distances carry no ordering and are
/// redrawn. A violation is `|yᵢ − yⱼ| < |yᵢ − yₗ|` with `‖zᵢ − zⱼ‖ ≥ ‖zᵢ − zₗ‖`.
pub fn task_ordering(z: &Mat, labels: &[f64], n_triplets: usize, rng: &mut Rng) -> Result<TaskOrdering> {
    let n = z.nrows();
    if n < 3 || labels.len() != n {
        return Err(Error::invalid(
            "evalkit",
            format!("ordering needs >= 3 embeddings with one label each (got {n}, {})", labels.len()),
        ));
    }
    let mut violations = 0usize;
    let mut drawn = 0usize;
    let mut attempts = 0usize;
    while drawn < n_triplets && attempts < 20 * n_triplets {
        attempts += 1;
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut l = rng.gen_range(0..n - 2);
        for skip in [i.min(j), i.max(j)] {
            if l >= skip {
                l += 1;
            }
        }
        let (dj, dl) = ((labels[i] - labels[j]).abs(), (labels[i] - labels[l]).abs());
        if dj == dl {
            continue;
        }
        let (near, far) = if dj < dl { (j, l) } else { (l, j) };
        drawn += 1;
        if row_dist(z, i, near) >= row_dist(z, i, far) {
            violations += 1;
        }
    }
    let mut rhos = Vec::with_capacity(n);
    let mut dz = Vec::with_capacity(n - 1);
    let mut dy = Vec::with_capacity(n - 1);
    for i in 0..n {
        dz.clear();
        dy.clear();
        for j in (0..n).filter(|&j| j != i) {
            dz.push(row_dist(z, i, j));
            dy.push((labels[i] - labels[j]).abs());
        }
        rhos.push(spearman(&dz, &dy));
    }
    Ok(TaskOrdering {
        violation_rate: if drawn == 0 { 0.0 } else { violations as f64 / drawn as f64 },
        spearman: mean(&rhos),
        n_triplets: drawn,
        n_anchors: n,
    })
}

/// One embedding matrix and label vector per task.
pub fn ordering_metrics(
    z: &[Mat],
    labels: &[Vec<f64>],
    n_triplets: usize,
    rng: &mut Rng,
) -> Result<OrderingReport> {
    if z.len() != labels.len() {
        return Err(Error::invalid("evalkit", "one label vector per task embedding required"));
    }
    let tasks = z
        .iter()
        .zip(labels)
        .map(|(zk, yk)| task_ordering(zk, yk, n_triplets, rng))
        .collect::<Result<_>>()?;
    Ok(OrderingReport { tasks })
}

/// Task embeddings of the bank and normalized return labels.
pub fn bank_ordering(bundle: &Bundle, n_triplets: usize, seed: u64) -> Result<OrderingReport> {
    let arch = &bundle.model.arch;
    let mut z = Vec::new();
    let mut labels = Vec::new();
    for k in 0..arch.cfg.n_tasks {
        z.push(arch.project(&bundle.model.store, &bundle.bank.h, k)?);
        labels.push(
            bundle
                .bank
                .returns
                .iter()
                .map(|r| bundle.stats.normalize_return(k, r[k]))
                .collect(),
        );
    }
    ordering_metrics(&z, &labels, n_triplets, &mut rng_for(seed, STREAM_TRIPLETS))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub train_mse: Vec<f64>,
    pub test_mse: Vec<f64>,
}

/// Least squares with intercept and ridge `ridge` (intercept unpenalized),
/// fit on `(x_train, y_train)`; per-column MSE on both splits.
pub fn linear_probe(x_train: &Mat, y_train: &Mat, x_test: &Mat, y_test: &Mat, ridge: f64) -> Result<ProbeReport> {
    let (n, d) = x_train.shape();
    if n <= d + 1 {
        return Err(Error::invalid(
            "evalkit",
            format!("probe needs more than {} train rows, got {n}", d + 1),
        ));
    }
    if y_train.nrows() != n || x_test.ncols() != d || y_test.nrows() != x_test.nrows() || y_test.ncols() != y_train.ncols() {
        return Err(Error::shape("evalkit", "probe inputs disagree in shape"));
    }
    let x_mean = x_train.row_mean();
    let y_mean = y_train.row_mean();
    let mut xc = x_train.clone();
    for mut r in xc.row_iter_mut() {
        r -= &x_mean;
    }
    let mut yc = y_train.clone();
    for mut r in yc.row_iter_mut() {
        r -= &y_mean;
    }
    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let rhs = xc.transpose() * &yc;
    let w = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Linalg { module: "evalkit", msg: e.to_string() })?,
    };
    let mse = |x: &Mat, y: &Mat| -> Vec<f64> {
        let mut pred = x * &w;
        for mut r in pred.row_iter_mut() {
            r -= &(&x_mean * &w);
            r += &y_mean;
        }
        let err = pred - y;
        (0..y.ncols())
            .map(|k| err.column(k).norm_squared() / y.nrows().max(1) as f64)
            .collect()
    };
    Ok(ProbeReport {
        train_mse: mse(x_train, y_train),
        test_mse: mse(x_test, y_test),
    })
}

/// One posterior sample `h̃` per trajectory, each from a fresh context.
pub fn sampled_embeddings(bundle: &Bundle, dataset: &Dataset, indices: &[usize], rng: &mut Rng) -> Result<Mat> {
    let len = bundle.config.train.context_length;
    let deterministic = bundle.config.train.deterministic_ae;
    let contexts = indices
        .iter()
        .map(|&i| sample_context(&dataset.trajectories[i], i, &dataset.stats, len, rng))
        .collect::<Result<Vec<_>>>()?;
    let post = bundle.model.encode(&contexts)?;
    let mut h = Mat::zeros(indices.len(), bundle.model.arch.cfg.latent_dim);
    for r in 0..indices.len() {
        let p = post.row(r);
        let s = if deterministic { p.mu } else { sample_embedding(&p, rng) };
        h.row_mut(r).copy_from(&s.transpose());
    }
    Ok(h)
}

fn normalized_labels(dataset: &Dataset, indices: &[usize]) -> Mat {
    Mat::from_fn(indices.len(), N_OBJECTIVES, |r, k| dataset.normalized_returns(indices[r])[k])
}

/// Ridge probe from sampled embeddings to normalized returns, train vs held-out split.
pub fn probe_bundle(bundle: &Bundle, dataset: &Dataset, ridge: f64, seed: u64) -> Result<ProbeReport> {
    let mut rng = rng_for(seed, STREAM_PROBE);
    let xt = sampled_embeddings(bundle, dataset, &dataset.train, &mut rng)?;
    let xs = sampled_embeddings(bundle, dataset, &dataset.test, &mut rng)?;
    linear_probe(
        &xt,
        &normalized_labels(dataset, &dataset.train),
        &xs,
        &normalized_labels(dataset, &dataset.test),
        ridge,
    )
}

/// Rows `method, task, train_mse, test_mse`.
pub fn probe_csv(reports: &[(String, ProbeReport)]) -> Result<String> {
    let mut rows = Vec::new();
    for (name, r) in reports {
        for k in 0..r.train_mse.len() {
            rows.push(vec![
                name.clone(),
                k.to_string(),
                r.train_mse[k].to_string(),
                r.test_mse[k].to_string(),
            ]);
        }
    }
    write_csv(&["method", "task", "train_mse", "test_mse"], rows)
}

/// `|R̃ − R| / (|R| + 1)`, raw units.
pub fn relative_return_diff(realized: f64, target: f64) -> f64 {
    (realized - target).abs() / (target.abs() + 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationRecord {
    pub trajectory: usize,
    pub knob: f64,
    pub target: [f64; N_OBJECTIVES],
    pub realized: [f64; N_OBJECTIVES],
    pub rel_diff: [f64; N_OBJECTIVES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationReport {
    pub records: Vec<ImitationRecord>,
}

impl ImitationReport {
    pub fn median(&self, task: usize) -> f64 {
        let d: Vec<f64> = self.records.iter().map(|r| r.rel_diff[task]).collect();
        median(&d)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut header = vec!["trajectory".to_string(), "knob".to_string()];
        for k in 0..N_OBJECTIVES {
            header.push(format!("target{k}"));
            header.push(format!("realized{k}"));
            header.push(format!("rel_diff{k}"));
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            &header,
            self.records.iter().map(|r| {
                let mut row = vec![r.trajectory.to_string(), r.knob.to_string()];
                for k in 0..N_OBJECTIVES {
                    row.push(r.target[k].to_string());
                    row.push(r.realized[k].to_string());
                    row.push(r.rel_diff[k].to_string());
                }
                row
            }),
        )
    }
}

/// Encodes one context per trajectory and rolls out the decoder at the posterior mean.
pub fn imitation_eval(
    bundle: &Bundle,
    dataset: &Dataset,
    indices: &[usize],
    n_eval: usize,
    seed: u64,
) -> Result<ImitationReport> {
    if indices.is_empty() {
        return Ok(ImitationReport { records: Vec::new() });
    }
    let mut rng = rng_for(seed, STREAM_IMITATION);
    let len = bundle.config.train.context_length;
    let contexts = indices
        .iter()
        .map(|&i| sample_context(&dataset.trajectories[i], i, &dataset.stats, len, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let post = bundle.model.encode(&contexts)?;
    let realized = decode_eval_many(
        &post.mu,
        &bundle.model,
        &bundle.stats,
        &bundle.config.env,
        n_eval,
        &mut rng,
    )?;
    let records = indices
        .iter()
        .zip(realized)
        .map(|(&i, r)| {
            let t = &dataset.trajectories[i];
            ImitationRecord {
                trajectory: i,
                knob: t.knob,
                target: t.returns,
                realized: r,
                rel_diff: std::array::from_fn(|k| relative_return_diff(r[k], t.returns[k])),
            }
        })
        .collect();
    Ok(ImitationReport { records })
}

/// Draws `n` benchmark queries from the bank.
///
/// The target is uniform over the middle 80% of the bank's task-0 return range.
/// The task-1 lower bound is uniform between the lowest task-1 return in the bank
/// and the median task-1 return of the `n_neighbors` bank members closest to the
/// target, so a nearby training policy already satisfies it.
pub fn sample_queries(bundle: &Bundle, n: usize, n_neighbors: usize, rng: &mut Rng) -> Result<Vec<SteeringQuery>> {
    let bank = &bundle.bank;
    if bank.is_empty() {
        return Err(Error::invalid("evalkit", "empty embedding bank"));
    }
    let r0: Vec<f64> = bank.returns.iter().map(|r| r[0]).collect();
    let r1: Vec<f64> = bank.returns.iter().map(|r| r[1]).collect();
    let lo = r0.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = r0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let r1_min = r1.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = hi - lo;
    let k = n_neighbors.clamp(1, bank.len());
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target = lo + span * rng.gen_range(0.1..=0.9);
        let mut by_gap: Vec<usize> = (0..bank.len()).collect();
        by_gap.sort_by(|&a, &b| (r0[a] - target).abs().total_cmp(&(r0[b] - target).abs()).then(a.cmp(&b)));
        let near: Vec<f64> = by_gap[..k].iter().map(|&i| r1[i]).collect();
        let top = median(&near).max(r1_min);
        let lower = r1_min + (top - r1_min) * rng.gen_range(0.0..=1.0);
        let start = rng.gen_range(0..bank.len());
        out.push(SteeringQuery {
            target,
            constraints: vec![Constraint { task: 1, lower }],
            h0: bank.embedding(start),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub query: SteeringQuery,
    pub result: SteeringResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringBenchReport {
    /// Percent of queries whose predictors met the tolerances.
    pub success: f64,
    /// Mean realized `|R̃⁽⁰⁾ − v_g| / |v_g|`, percent.
    pub target_error: f64,
    /// Mean realized relative constraint breach, percent.
    pub constraint_violation: f64,
    pub records: Vec<BenchRecord>,
}

impl SteeringBenchReport {
    pub fn from_records(records: Vec<BenchRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let success = 100.0 * records.iter().filter(|r| r.result.success).count() as f64 / n;
        let te: Vec<f64> = records.iter().map(|r| r.result.target_error).collect();
        let cv: Vec<f64> = records.iter().map(|r| r.result.constraint_violation).collect();
        SteeringBenchReport {
            success,
            target_error: 100.0 * mean(&te),
            constraint_violation: 100.0 * mean(&cv),
            records,
        }
    }

    /// One row per query followed by a `summary` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut rows: Vec<Vec<String>> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let bound = r.query.constraints.first().map_or(f64::NAN, |c| c.lower);
                vec![
                    i.to_string(),
                    r.query.target.to_string(),
                    bound.to_string(),
                    u8::from(r.result.success).to_string(),
                    r.result.iterations.to_string(),
                    r.result.predicted[0].to_string(),
                    r.result.predicted.get(1).copied().unwrap_or(f64::NAN).to_string(),
                    r.result.realized[0].to_string(),
                    r.result.realized[1].to_string(),
                    (100.0 * r.result.target_error).to_string(),
                    (100.0 * r.result.constraint_violation).to_string(),
                ]
            })
            .collect();
        let mut summary = vec!["summary".to_string(); 1];
        summary.extend(std::iter::repeat_n(String::new(), 2));
        summary.push(self.success.to_string());
        summary.extend(std::iter::repeat_n(String::new(), 5));
        summary.push(self.target_error.to_string());
        summary.push(self.constraint_violation.to_string());
        rows.push(summary);
        write_csv(
            &[
                "query",
                "target",
                "lower_bound1",
                "success",
                "iterations",
                "predicted0",
                "predicted1",
                "realized0",
                "realized1",
                "target_error_pct",
                "constraint_violation_pct",
            ],
            rows,
        )
    }
}

pub fn run_queries(
    bundle: &Bundle,
    queries: &[SteeringQuery],
    cfg: &SteerConfig,
    rng: &mut Rng,
) -> Result<SteeringBenchReport> {
    let records = queries
        .iter()
        .map(|q| {
            let (_, result) = steer(bundle, q, cfg, true, rng)?;
            Ok(BenchRecord { query: q.clone(), result })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SteeringBenchReport::from_records(records))
}

/// Random queries through projected steering and decoding.
pub fn steering_benchmark(bundle: &Bundle, n_queries: usize, cfg: &SteerConfig, seed: u64) -> Result<SteeringBenchReport> {
    let mut rng = rng_for(seed, STREAM_BENCH);
    let queries = sample_queries(bundle, n_queries, cfg.n_neighbors, &mut rng)?;
    run_queries(bundle, &queries, cfg, &mut rng)
}

/// Mean `|predicted − realized|` in normalized units at evenly spaced iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGap {
    pub projected: f64,
    pub naive: f64,
    /// Per-run `(projected, naive)` gaps.
    pub runs: Vec<(f64, f64)>,
}

impl PathGap {
    pub fn ratio(&self) -> f64 {
        self.naive / self.projected
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut rows: Vec<Vec<String>> = self
            .runs
            .iter()
            .enumerate()
            .map(|(i, (p, n))| vec![i.to_string(), p.to_string(), n.to_string()])
            .collect();
        rows.push(vec!["mean".into(), self.projected.to_string(), self.naive.to_string()]);
        write_csv(&["run", "projected_gap", "naive_gap"], rows)
    }
}

/// `points` indices spread evenly over `0..len`, always including the last.
pub fn path_indices(len: usize, points: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let points = points.clamp(1, len);
    if points == 1 {
        return vec![len - 1];
    }
    let mut idx: Vec<usize> = (0..points)
        .map(|i| ((i * (len - 1)) as f64 / (points - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

fn path_gap(
    bundle: &Bundle,
    iterates: &[DVector<f64>],
    predicted: &[Vec<f64>],
    points: usize,
    n_eval: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let stats = &bundle.stats;
    let mut gaps = Vec::new();
    for t in path_indices(iterates.len(), points) {
        let realized = decode_eval(&iterates[t], &bundle.model, stats, &bundle.config.env, n_eval, rng)?;
        for (k, &p) in predicted[t].iter().enumerate() {
            gaps.push((p - stats.normalize_return(k, realized[k])).abs());
        }
    }
    Ok(mean(&gaps))
}

/// Paired projected and naive runs from the same query and start point.
pub fn projection_comparison(
    bundle: &Bundle,
    n_runs: usize,
    points: usize,
    cfg: &SteerConfig,
    seed: u64,
) -> Result<PathGap> {
    let mut rng = rng_for(seed, STREAM_PATHS);
    let queries = sample_queries(bundle, n_runs, cfg.n_neighbors, &mut rng)?;
    let problem = ModelValues(&bundle.model);
    let tangent = Projection::Tangent {
        bank: &bundle.bank.h,
        n_neighbors: cfg.n_neighbors,
        rank: cfg.pca_rank,
    };
    let mut runs = Vec::with_capacity(n_runs);
    for q in &queries {
        let nq = q.normalize(&bundle.stats);
        let mut gap = [0.0; 2];
        for (slot, projection) in [tangent, Projection::Identity].into_iter().enumerate() {
            let trace = primal_dual_run(&problem, &nq, &q.h0, projection, cfg)?;
            gap[slot] = path_gap(bundle, &trace.iterates, &trace.predicted, points, cfg.n_eval, &mut rng)?;
        }
        runs.push((gap[0], gap[1]));
    }
    let p: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let n: Vec<f64> = runs.iter().map(|r| r.1).collect();
    Ok(PathGap {
        projected: mean(&p),
        naive: mean(&n),
        runs,
    })
}

/// Mean-centered projection onto the top two principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    /// `n × 2`
    pub coords: Mat,
    /// `2 × d`, rows are unit directions.
    pub components: Mat,
    pub mean: RowDVector<f64>,
}

/// Each component's sign is fixed so its largest-magnitude loading is positive.
pub fn pca2d(x: &Mat) -> Result<Pca2d> {
    let (n, d) = x.shape();
    if n < 3 || d == 0 {
        return Err(Error::invalid("evalkit", format!("PCA needs >= 3 embeddings, got {n}")));
    }
    let mean = x.row_mean();
    let mut xc = x.clone();
    for mut r in xc.row_iter_mut() {
        r -= &mean;
    }
    let svd = xc.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Linalg { module: "evalkit", msg: "SVD did not converge".into() })?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let mut components = Mat::zeros(2, d);
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut v = v_t.row(k).into_owned();
        let lead = v.iter().cloned().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v = -v;
        }
        components.row_mut(slot).copy_from(&v);
    }
    Ok(Pca2d {
        coords: xc * components.transpose(),
        components,
        mean,
    })
}

/// Rows `x, y, R0, R1, knob`.
pub fn plot_csv(pca: &Pca2d, returns: &[[f64; N_OBJECTIVES]], knobs: &[f64]) -> Result<String> {
    write_csv(
        &["x", "y", "R0", "R1", "knob"],
        (0..pca.coords.nrows()).map(|i| {
            vec![
                pca.coords[(i, 0)].to_string(),
                pca.coords[(i, 1)].to_string(),
                returns[i][0].to_string(),
                returns[i][1].to_string(),
                knobs[i].to_string(),
            ]
        }),
    )
}

/// Scatter plot colored by `values` on a blue-to-red ramp.
pub fn plot_svg(pca: &Pca2d, values: &[f64], title: &str) -> String {
    const W: f64 = 480.0;
    const PAD: f64 = 32.0;
    let xs: Vec<f64> = pca.coords.column(0).iter().cloned().collect();
    let ys: Vec<f64> = pca.coords.column(1).iter().cloned().collect();
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (x0, xs_span) = range(&xs);
    let (y0, ys_span) = range(&ys);
    let (v0, v_span) = range(values);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{W}" viewBox="0 0 {W} {W}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let _ = writeln!(s, r#"<text x="{PAD}" y="20" font-family="sans-serif" font-size="13">{title}</text>"#);
    for i in 0..xs.len() {
        let cx = PAD + (W - 2.0 * PAD) * (xs[i] - x0) / xs_span;
        let cy = W - PAD - (W - 2.0 * PAD) * (ys[i] - y0) / ys_span;
        let t = ((values[i] - v0) / v_span).clamp(0.0, 1.0);
        let (r, b) = ((255.0 * t).round() as u8, (255.0 * (1.0 - t)).round() as u8);
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="rgb({r},64,{b})" fill-opacity="0.8"/>"#
        );
    }
    s.push_str("</svg>\n");
    s
}

/// `|ρ|` between the first principal coordinate and the knob.
pub fn pc1_knob_spearman(pca: &Pca2d, knobs: &[f64]) -> f64 {
    let pc1: Vec<f64> = pca.coords.column(0).iter().cloned().collect();
    spearman(&pc1, knobs).abs()
}

impl EvalConfig {
    pub fn rate_settings(&self) -> RateSettings {
        RateSettings {
            grid: self.cf_grid.clone(),
            trials: self.cf_trials,
            lengthscale: (self.cf_lengthscale > 0.0).then_some(self.cf_lengthscale),
            ridge: self.cf_ridge,
            seed: self.seed,
        }
    }
}

/// `E[x²] = 1` under a standard normal, CF against plain Monte Carlo.
pub fn standard_rate_experiment(cfg: &EvalConfig) -> Result<RateReport> {
    rate_experiment(&Density::StandardNormal { dim: 1 }, |x| x[0] * x[0], 1.0, &cfg.rate_settings())
}
