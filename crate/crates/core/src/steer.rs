//! Constrained latent-space steering with a local tangent projector.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::NormStats;
use crate::diffnet::Mat;
use crate::env::{step, EnvConfig, State, N_OBJECTIVES, STATE_DIM};
use crate::error::{Error, Result};
use crate::model::{row_vector, PolicyModel};
use crate::trainer::{csv_err, finish_csv, Bundle};
use crate::util::{all_finite, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerConfig {
    pub eta_h: f64,
    pub eta_lambda: f64,
    pub max_iters: usize,
    pub n_neighbors: usize,
    pub pca_rank: usize,
    /// Normalized units.
    pub tol_target: f64,
    /// Normalized units.
    pub tol_constraint: f64,
    pub n_eval: usize,
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig {
            eta_h: 0.05,
            eta_lambda: 0.1,
            max_iters: 500,
            n_neighbors: 32,
            pca_rank: 8,
            tol_target: 0.05,
            tol_constraint: 0.0,
            n_eval: 16,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_h > 0.0 && self.eta_lambda > 0.0) {
            return Err(Error::invalid("steer", "step sizes must be positive"));
        }
        if self.pca_rank == 0 || self.pca_rank > self.n_neighbors {
            return Err(Error::invalid("steer", "need 1 <= pca_rank <= n_neighbors"));
        }
        if !(self.tol_target >= 0.0 && self.tol_constraint >= 0.0) || self.n_eval == 0 {
            return Err(Error::invalid("steer", "tolerances must be >= 0 and n_eval >= 1"));
        }
        Ok(())
    }
}

/// Lower bound `v⁽ᵏ⁾ ≥ lower` on a non-target task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constraint {
    pub task: usize,
    pub lower: f64,
}

/// Target on task 0 plus inequality constraints, in raw return units.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringQuery {
    pub target: f64,
    pub constraints: Vec<Constraint>,
    pub h0: DVector<f64>,
}

/// The same query in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedQuery {
    pub target: f64,
    pub constraints: Vec<Constraint>,
}

impl SteeringQuery {
    pub fn normalize(&self, stats: &NormStats) -> NormalizedQuery {
        NormalizedQuery {
            target: stats.normalize_return(0, self.target),
            constraints: self
                .constraints
                .iter()
                .map(|c| Constraint {
                    task: c.task,
                    lower: stats.normalize_return(c.task, c.lower),
                })
                .collect(),
        }
    }
}

/// Differentiable value predictors over the latent space.
pub trait SteeringProblem {
    fn dim(&self) -> usize;
    fn n_tasks(&self) -> usize;
    fn value_and_grad(&self, h: &DVector<f64>, task: usize) -> Result<(f64, DVector<f64>)>;
}

/// Projector × regressor heads of a trained model.
pub struct ModelValues<'a>(pub &'a PolicyModel);

impl SteeringProblem for ModelValues<'_> {
    fn dim(&self) -> usize {
        self.0.arch.cfg.latent_dim
    }

    fn n_tasks(&self) -> usize {
        self.0.arch.cfg.n_tasks
    }

    fn value_and_grad(&self, h: &DVector<f64>, task: usize) -> Result<(f64, DVector<f64>)> {
        self.0.arch.value_and_grad(&self.0.store, h, task)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Projection<'a> {
    /// Plain gradient steps.
    Identity,
    /// Local PCA of the nearest bank embeddings, recomputed at every iterate.
    Tangent {
        bank: &'a Mat,
        n_neighbors: usize,
        rank: usize,
    },
}

impl Projection<'_> {
    fn matrix(&self, h: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        match *self {
            Projection::Identity => Ok(None),
            Projection::Tangent {
                bank,
                n_neighbors,
                rank,
            } => tangent_projector(h, bank, n_neighbors, rank).map(Some),
        }
    }
}

/// `P = VVᵀ` from the top `rank` principal directions of the `n_neighbors`
/// bank rows nearest to `h`. Directions with zero spread are dropped.
pub fn tangent_projector(
    h: &DVector<f64>,
    bank: &Mat,
    n_neighbors: usize,
    rank: usize,
) -> Result<DMatrix<f64>> {
    let d = bank.ncols();
    if h.len() != d {
        return Err(Error::shape(
            "steer",
            format!("latent width {} != bank width {d}", h.len()),
        ));
    }
    if rank == 0 || rank > n_neighbors || n_neighbors > bank.nrows() {
        return Err(Error::invalid(
            "steer",
            format!(
                "need 1 <= rank ({rank}) <= n_neighbors ({n_neighbors}) <= bank size ({})",
                bank.nrows()
            ),
        ));
    }
    let mut dist: Vec<(f64, usize)> = (0..bank.nrows())
        .map(|i| {
            let d2: f64 = bank.row(i).iter().zip(h.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, i)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut e = Mat::zeros(n_neighbors, d);
    for (r, &(_, i)) in dist[..n_neighbors].iter().enumerate() {
        e.row_mut(r).copy_from(&bank.row(i));
    }
    let mean = e.row_mean();
    for mut row in e.row_iter_mut() {
        row -= &mean;
    }
    let svd = e.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Linalg { module: "steer", msg: "SVD did not converge".into() })?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let cutoff = top * 1e-10;
    let mut p = DMatrix::zeros(d, d);
    for &k in order.iter().take(rank) {
        if sv[k] <= cutoff || top == 0.0 {
            break;
        }
        let v = v_t.row(k).transpose();
        p += &v * v.transpose();
    }
    Ok(p)
}

/// `max(|P² − P|, |Pᵀ − P|)` entrywise.
pub fn projector_residual(p: &DMatrix<f64>) -> f64 {
    let idem = (p * p - p).amax();
    let sym = (p.transpose() - p).amax();
    idem.max(sym)
}

/// Lagrangian `L = (v⁽⁰⁾ − g)² + Σ λ_k c_k` with `c_k = v_c⁽ᵏ⁾ − v⁽ᵏ⁾`, all normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianEval {
    pub value: f64,
    pub grad: DVector<f64>,
    /// Predicted value of every task.
    pub predicted: Vec<f64>,
    pub constraints: Vec<f64>,
}

struct PointEval {
    values: Vec<f64>,
    grads: Vec<DVector<f64>>,
}

fn eval_point<P: SteeringProblem>(problem: &P, h: &DVector<f64>) -> Result<PointEval> {
    let mut values = Vec::with_capacity(problem.n_tasks());
    let mut grads = Vec::with_capacity(problem.n_tasks());
    for k in 0..problem.n_tasks() {
        let (v, g) = problem.value_and_grad(h, k)?;
        values.push(v);
        grads.push(g);
    }
    Ok(PointEval { values, grads })
}

fn constraint_values(q: &NormalizedQuery, values: &[f64]) -> Vec<f64> {
    q.constraints.iter().map(|c| c.lower - values[c.task]).collect()
}

fn lagrangian_at(q: &NormalizedQuery, lambda: &[f64], pt: &PointEval) -> LagrangianEval {
    let gap = pt.values[0] - q.target;
    let constraints = constraint_values(q, &pt.values);
    let mut value = gap * gap;
    let mut grad = &pt.grads[0] * (2.0 * gap);
    for ((c, &ck), &l) in q.constraints.iter().zip(&constraints).zip(lambda) {
        value += l * ck;
        grad -= &pt.grads[c.task] * l;
    }
    LagrangianEval {
        value,
        grad,
        predicted: pt.values.clone(),
        constraints,
    }
}

fn check_query<P: SteeringProblem>(problem: &P, q: &NormalizedQuery, lambda: &[f64]) -> Result<()> {
    if problem.n_tasks() == 0 {
        return Err(Error::invalid("steer", "problem has no tasks"));
    }
    if lambda.len() != q.constraints.len() {
        return Err(Error::shape(
            "steer",
            format!("{} multipliers for {} constraints", lambda.len(), q.constraints.len()),
        ));
    }
    for c in &q.constraints {
        if c.task == 0 || c.task >= problem.n_tasks() {
            return Err(Error::invalid(
                "steer",
                format!("constraint task {} must be in 1..{}", c.task, problem.n_tasks()),
            ));
        }
    }
    if !q.target.is_finite() || q.constraints.iter().any(|c| !c.lower.is_finite()) {
        return Err(Error::invalid("steer", "non-finite target or bound"));
    }
    Ok(())
}

pub fn lagrangian_grad<P: SteeringProblem>(
    problem: &P,
    h: &DVector<f64>,
    lambda: &[f64],
    q: &NormalizedQuery,
) -> Result<LagrangianEval> {
    check_query(problem, q, lambda)?;
    let ev = lagrangian_at(q, lambda, &eval_point(problem, h)?);
    if !ev.value.is_finite() || !all_finite(ev.grad.as_slice()) {
        return Err(Error::non_finite("steer", "Lagrangian gradient"));
    }
    Ok(ev)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
    NonFinite,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIters => "max_iters",
            Termination::NonFinite => "non_finite",
        }
    }
}

/// Full history of one primal-dual run; entry `t` describes iterate `h_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringTrace {
    pub iterates: Vec<DVector<f64>>,
    pub duals: Vec<Vec<f64>>,
    /// Normalized predictions of every task.
    pub predicted: Vec<Vec<f64>>,
    pub feasible: Vec<bool>,
    /// Axiom residual of the projector applied in step `t → t+1`.
    pub projector_residuals: Vec<f64>,
    pub termination: Termination,
    pub success: bool,
}

impl SteeringTrace {
    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn last(&self) -> &DVector<f64> {
        self.iterates.last().expect("trace always holds h0")
    }

    pub fn n_steps(&self) -> usize {
        self.iterates.len() - 1
    }

    /// Columns `t, h_norm, v<k>..., lambda<j>..., feasible`; values in raw units.
    pub fn to_csv(&self, stats: &NormStats) -> Result<String> {
        let n_tasks = self.predicted.first().map_or(0, Vec::len);
        let n_dual = self.duals.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string(), "h_norm".to_string()];
        header.extend((0..n_tasks).map(|k| format!("v{k}")));
        header.extend((0..n_dual).map(|j| format!("lambda{j}")));
        header.push("feasible".into());
        w.write_record(&header).map_err(csv_err)?;
        for t in 0..self.len() {
            let mut row = vec![t.to_string(), self.iterates[t].norm().to_string()];
            row.extend(
                self.predicted[t]
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| stats.denormalize_return(k, v).to_string()),
            );
            row.extend(self.duals[t].iter().map(f64::to_string));
            row.push(u8::from(self.feasible[t]).to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn satisfied(q: &NormalizedQuery, ev: &LagrangianEval, cfg: &SteerConfig) -> (bool, bool) {
    let feasible = ev.constraints.iter().all(|&c| c <= cfg.tol_constraint);
    let on_target = (ev.predicted[0] - q.target).abs() <= cfg.tol_target;
    (feasible, on_target && feasible)
}

/// Projected primal-dual iteration
/// `h ← h − η_h P ∇_h L(h, λ)`, then `λ ← [λ + η_λ c(h)]₊`.
///
/// Stops as soon as the predicted target error and every constraint are within
/// tolerance. A non-finite iterate ends the run with `success = false`.
pub fn primal_dual_run<P: SteeringProblem>(
    problem: &P,
    q: &NormalizedQuery,
    h0: &DVector<f64>,
    projection: Projection<'_>,
    cfg: &SteerConfig,
) -> Result<SteeringTrace> {
    cfg.validate()?;
    let mut lambda = vec![0.0; q.constraints.len()];
    check_query(problem, q, &lambda)?;
    if h0.len() != problem.dim() {
        return Err(Error::shape(
            "steer",
            format!("h0 width {} != latent width {}", h0.len(), problem.dim()),
        ));
    }
    if !all_finite(h0.as_slice()) {
        return Err(Error::non_finite("steer", "initial iterate"));
    }
    let mut h = h0.clone();
    let mut ev = lagrangian_at(q, &lambda, &eval_point(problem, &h)?);
    let mut trace = SteeringTrace {
        iterates: Vec::new(),
        duals: Vec::new(),
        predicted: Vec::new(),
        feasible: Vec::new(),
        projector_residuals: Vec::new(),
        termination: Termination::MaxIters,
        success: false,
    };
    let record = |trace: &mut SteeringTrace, h: &DVector<f64>, lambda: &[f64], ev: &LagrangianEval| {
        let (feasible, done) = satisfied(q, ev, cfg);
        trace.iterates.push(h.clone());
        trace.duals.push(lambda.to_vec());
        trace.predicted.push(ev.predicted.clone());
        trace.feasible.push(feasible);
        done
    };
    if !all_finite(&ev.predicted) {
        record(&mut trace, &h, &lambda, &ev);
        trace.termination = Termination::NonFinite;
        return Ok(trace);
    }
    if record(&mut trace, &h, &lambda, &ev) {
        trace.termination = Termination::Converged;
        trace.success = true;
        return Ok(trace);
    }
    for _ in 0..cfg.max_iters {
        let step = match projection.matrix(&h)? {
            Some(p) => {
                trace.projector_residuals.push(projector_residual(&p));
                p * &ev.grad
            }
            None => ev.grad.clone(),
        };
        h.axpy(-cfg.eta_h, &step, 1.0);
        let pt = eval_point(problem, &h)?;
        let c = constraint_values(q, &pt.values);
        for (l, ck) in lambda.iter_mut().zip(&c) {
            *l = (*l + cfg.eta_lambda * ck).max(0.0);
        }
        ev = lagrangian_at(q, &lambda, &pt);
        let finite = all_finite(h.as_slice())
            && all_finite(&ev.predicted)
            && all_finite(ev.grad.as_slice())
            && all_finite(&lambda);
        let done = record(&mut trace, &h, &lambda, &ev);
        if !finite {
            trace.termination = Termination::NonFinite;
            return Ok(trace);
        }
        if done {
            trace.termination = Termination::Converged;
            trace.success = true;
            return Ok(trace);
        }
    }
    Ok(trace)
}

/// Mean raw returns of `n_eval` rollouts per latent row, actions sampled from
/// the decoder. All rollouts advance in lockstep as one batch.
pub fn decode_eval_many(
    hs: &Mat,
    model: &PolicyModel,
    stats: &NormStats,
    env: &EnvConfig,
    n_eval: usize,
    rng: &mut Rng,
) -> Result<Vec<[f64; N_OBJECTIVES]>> {
    env.validate()?;
    if n_eval == 0 {
        return Err(Error::invalid("steer", "n_eval must be at least 1"));
    }
    if hs.ncols() != model.arch.cfg.latent_dim {
        return Err(Error::shape(
            "steer",
            format!("latent width {} != {}", hs.ncols(), model.arch.cfg.latent_dim),
        ));
    }
    let n = hs.nrows() * n_eval;
    let h_rep = Mat::from_fn(n, hs.ncols(), |r, c| hs[(r / n_eval, c)]);
    let mut states = vec![State::REST; n];
    let mut totals = vec![[0.0; N_OBJECTIVES]; n];
    let mut s_mat = Mat::zeros(n, STATE_DIM);
    for _ in 0..env.horizon {
        for (r, s) in states.iter().enumerate() {
            let ns = stats.normalize_state(*s);
            for d in 0..STATE_DIM {
                s_mat[(r, d)] = ns[d];
            }
        }
        let dist = model.arch.decode(&model.store, &s_mat, &h_rep)?;
        for r in 0..n {
            let eps: f64 = StandardNormal.sample(rng);
            let a = dist.mean[(r, 0)] + dist.log_std[(r, 0)].exp() * eps;
            let (next, reward) = step(states[r], stats.denormalize_action(a), env)?;
            states[r] = next;
            for (t, x) in totals[r].iter_mut().zip(reward) {
                *t += x;
            }
        }
    }
    Ok(totals
        .chunks(n_eval)
        .map(|chunk| {
            let mut m = [0.0; N_OBJECTIVES];
            for t in chunk {
                for (a, x) in m.iter_mut().zip(t) {
                    *a += x / n_eval as f64;
                }
            }
            m
        })
        .collect())
}

pub fn decode_eval(
    h: &DVector<f64>,
    model: &PolicyModel,
    stats: &NormStats,
    env: &EnvConfig,
    n_eval: usize,
    rng: &mut Rng,
) -> Result<[f64; N_OBJECTIVES]> {
    Ok(decode_eval_many(&row_vector(h), model, stats, env, n_eval, rng)?[0])
}

/// Relative target miss `|R⁽⁰⁾ − v_g| / |v_g|`.
pub fn target_error(realized: &[f64], target: f64) -> f64 {
    (realized[0] - target).abs() / target.abs().max(f64::MIN_POSITIVE)
}

/// Largest relative breach `max_k max(0, v_c − R⁽ᵏ⁾) / |v_c|`; 0 without constraints.
pub fn constraint_violation(realized: &[f64], constraints: &[Constraint]) -> f64 {
    constraints
        .iter()
        .map(|c| (c.lower - realized[c.task]).max(0.0) / c.lower.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringResult {
    pub h: DVector<f64>,
    /// Raw units.
    pub predicted: Vec<f64>,
    /// Raw mean returns of the decoded policy.
    pub realized: [f64; N_OBJECTIVES],
    pub success: bool,
    pub target_error: f64,
    pub constraint_violation: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl SteeringResult {
    /// `key = value` lines, one field per line.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "success = {}", self.success);
        let _ = writeln!(s, "termination = {}", self.termination.as_str());
        let _ = writeln!(s, "iterations = {}", self.iterations);
        for (k, v) in self.predicted.iter().enumerate() {
            let _ = writeln!(s, "predicted{k} = {v}");
        }
        for (k, v) in self.realized.iter().enumerate() {
            let _ = writeln!(s, "realized{k} = {v}");
        }
        let _ = writeln!(s, "target_error = {}", self.target_error);
        let _ = writeln!(s, "constraint_violation = {}", self.constraint_violation);
        let h: Vec<String> = self.h.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "h = [{}]", h.join(", "));
        s
    }
}

/// Steers a trained bundle and decodes the final iterate.
pub fn steer(
    bundle: &Bundle,
    query: &SteeringQuery,
    cfg: &SteerConfig,
    projected: bool,
    rng: &mut Rng,
) -> Result<(SteeringTrace, SteeringResult)> {
    let nq = query.normalize(&bundle.stats);
    let projection = if projected {
        Projection::Tangent {
            bank: &bundle.bank.h,
            n_neighbors: cfg.n_neighbors,
            rank: cfg.pca_rank,
        }
    } else {
        Projection::Identity
    };
    let trace = primal_dual_run(&ModelValues(&bundle.model), &nq, &query.h0, projection, cfg)?;
    let h = trace.last().clone();
    let predicted: Vec<f64> = trace
        .predicted
        .last()
        .expect("trace always holds h0")
        .iter()
        .enumerate()
        .map(|(k, &v)| bundle.stats.denormalize_return(k, v))
        .collect();
    let realized = if all_finite(h.as_slice()) {
        decode_eval(&h, &bundle.model, &bundle.stats, &bundle.config.env, cfg.n_eval, rng)?
    } else {
        [f64::NAN; N_OBJECTIVES]
    };
    let result = SteeringResult {
        target_error: target_error(&realized, query.target),
        constraint_violation: constraint_violation(&realized, &query.constraints),
        predicted,
        realized,
        success: trace.success,
        iterations: trace.n_steps(),
        termination: trace.termination,
        h,
    };
    Ok((trace, result))
}
