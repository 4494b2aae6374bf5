//! Loss terms for representation learning and value regression.
//!
//! Every term returns its value together with the gradient with respect to its
//! direct inputs; `phase1_forward` / `phase1_backward` chain them through the
//! encoder, decoder and projectors.

use serde::{Deserialize, Serialize};

use crate::dataio::TwoViewBatch;
use crate::diffnet::{Mat, ParamStore};
use crate::env::{ACTION_DIM, N_OBJECTIVES, STATE_DIM};
use crate::error::{Error, Result};
use crate::model::{reparameterize, Arch, ContextBatch, DecoderTape, EncoderTape, Posteriors};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub zeta: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub tau_sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            zeta: 5.0,
            beta_start: 0.0,
            beta_end: 0.05,
            tau_sim: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.zeta, self.beta_start, self.beta_end, self.tau_sim];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("losses", "loss weights must be finite and non-negative"));
        }
        if self.tau_sim <= 0.0 {
            return Err(Error::invalid("losses", "tau_sim must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
    pub rnc: Vec<f64>,
    pub ortho: Vec<f64>,
    pub value_mse: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `(nll + β·kl) + (1/K) Σ_k (α·rnc_k + ζ·ortho_k)`.
    pub fn weighted_total(&self, alpha: f64, zeta: f64) -> f64 {
        let k = self.rnc.len().max(1) as f64;
        let task: f64 = self
            .rnc
            .iter()
            .zip(&self.ortho)
            .map(|(r, o)| alpha * r + zeta * o)
            .sum();
        self.nll + self.beta * self.kl + task / k
    }

    fn assemble(
        nll: f64,
        kl: f64,
        beta: f64,
        rnc: Vec<f64>,
        ortho: Vec<f64>,
        weights: &LossWeights,
    ) -> Result<LossBreakdown> {
        let mut b = LossBreakdown {
            nll,
            kl,
            beta,
            rnc,
            ortho,
            value_mse: Vec::new(),
            total: 0.0,
        };
        b.total = b.weighted_total(weights.alpha, weights.zeta);
        let recomputed = b.nll
            + b.beta * b.kl
            + (0..b.rnc.len())
                .map(|k| weights.alpha * b.rnc[k] + weights.zeta * b.ortho[k])
                .sum::<f64>()
                / b.rnc.len().max(1) as f64;
        if (recomputed - b.total).abs() > 1e-12 * (1.0 + b.total.abs()) {
            return Err(Error::invalid("losses", "loss total disagrees with its parts"));
        }
        if !b.total.is_finite() {
            return Err(Error::non_finite("losses", "phase-1 loss"));
        }
        Ok(b)
    }

    pub fn csv_header(n_tasks: usize) -> Vec<String> {
        let mut h = vec!["epoch".to_string(), "nll".into(), "kl".into()];
        h.extend((0..n_tasks).map(|k| format!("rnc_{k}")));
        h.extend((0..n_tasks).map(|k| format!("ortho_{k}")));
        h.push("total".into());
        h
    }

    pub fn csv_row(&self, epoch: usize) -> Vec<String> {
        let mut r = vec![epoch.to_string(), self.nll.to_string(), self.kl.to_string()];
        r.extend(self.rnc.iter().map(f64::to_string));
        r.extend(self.ortho.iter().map(f64::to_string));
        r.push(self.total.to_string());
        r
    }
}

/// Linear KL annealing from `beta_start` at epoch 0 to `beta_end` at the last epoch.
pub fn beta_schedule(epoch: usize, total_epochs: usize, w: &LossWeights) -> Result<f64> {
    if epoch > total_epochs {
        return Err(Error::invalid(
            "losses",
            format!("epoch {epoch} beyond schedule length {total_epochs}"),
        ));
    }
    if total_epochs == 0 {
        return Ok(w.beta_end);
    }
    let t = epoch as f64 / total_epochs as f64;
    Ok(w.beta_start + (w.beta_end - w.beta_start) * t)
}

/// Mean over rows of `KL(N(μ, σ²) ‖ N(0, I))`, with gradients.
pub fn kl_standard_normal(mu: &Mat, log_sigma: &Mat) -> (f64, Mat, Mat) {
    let n = mu.nrows().max(1) as f64;
    let mut total = 0.0;
    let mut d_ls = Mat::zeros(mu.nrows(), mu.ncols());
    for (i, (&m, &ls)) in mu.iter().zip(log_sigma.iter()).enumerate() {
        let s2 = (2.0 * ls).exp();
        total += 0.5 * (m * m + s2 - 1.0 - 2.0 * ls);
        d_ls[i] = (s2 - 1.0) / n;
    }
    (total / n, mu / n, d_ls)
}

/// Mean Gaussian negative log-likelihood with gradients w.r.t. mean and log-std.
pub fn gaussian_nll(mean: &Mat, log_std: &Mat, target: &Mat) -> (f64, Mat, Mat) {
    let n = mean.nrows().max(1) as f64;
    let mut total = 0.0;
    let mut d_mean = Mat::zeros(mean.nrows(), mean.ncols());
    let mut d_ls = Mat::zeros(mean.nrows(), mean.ncols());
    for i in 0..mean.len() {
        let inv = (-log_std[i]).exp();
        let z = (target[i] - mean[i]) * inv;
        total += HALF_LN_2PI + log_std[i] + 0.5 * z * z;
        d_mean[i] = -z * inv / n;
        d_ls[i] = (1.0 - z * z) / n;
    }
    (total / n, d_mean, d_ls)
}

/// Rank-N-Contrast loss over rows of `z` with scalar labels.
///
/// For anchor `i` and target `j ≠ i`, the denominator runs over every `l ≠ i`
/// whose label distance to the anchor is at least that of `j`. Returns the mean
/// over all ordered pairs and the gradient w.r.t. `z`.
pub fn rnc_loss(z: &Mat, labels: &[f64], tau: f64) -> Result<(f64, Mat)> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::invalid("losses", "contrastive batch needs at least 2 rows"));
    }
    if labels.len() != n {
        return Err(Error::shape("losses", format!("{} labels for {n} rows", labels.len())));
    }
    if tau <= 0.0 {
        return Err(Error::invalid("losses", "tau_sim must be positive"));
    }
    let dim = z.ncols();
    let mut dist = Mat::zeros(n, n);
    for i in 0..n {
        for l in i + 1..n {
            let mut s = 0.0;
            for c in 0..dim {
                let d = z[(i, c)] - z[(l, c)];
                s += d * d;
            }
            dist[(i, l)] = s.sqrt();
            dist[(l, i)] = dist[(i, l)];
        }
    }
    let scale = 1.0 / (n * (n - 1)) as f64;
    let mut loss = 0.0;
    // ∂loss/∂s_il
    let mut ds = Mat::zeros(n, n);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    let mut e = vec![0.0; n];
    let mut prefix = vec![0.0; n - 1];
    let mut group_end = vec![0usize; n - 1];
    let mut group_start = vec![0usize; n - 1];
    let mut inv_suffix = vec![0.0; n];
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&l| l != i));
        let lab = |l: usize| (labels[l] - labels[i]).abs();
        order.sort_by(|&a, &b| lab(b).total_cmp(&lab(a)).then(a.cmp(&b)));
        let smax = order
            .iter()
            .map(|&l| -dist[(i, l)] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        for &l in &order {
            e[l] = (-dist[(i, l)] / tau - smax).exp();
        }
        let m = order.len();
        let mut acc = 0.0;
        for p in 0..m {
            acc += e[order[p]];
            prefix[p] = acc;
        }
        let mut p = 0;
        while p < m {
            let mut q = p + 1;
            while q < m && lab(order[q]) == lab(order[p]) {
                q += 1;
            }
            for r in p..q {
                group_start[r] = p;
                group_end[r] = q - 1;
            }
            p = q;
        }
        inv_suffix[m] = 0.0;
        for p in (0..m).rev() {
            inv_suffix[p] = inv_suffix[p + 1] + 1.0 / prefix[group_end[p]];
        }
        for p in 0..m {
            let j = order[p];
            let s_ij = -dist[(i, j)] / tau - smax;
            loss += prefix[group_end[p]].ln() - s_ij;
            ds[(i, j)] = scale * (e[j] * inv_suffix[group_start[p]] - 1.0);
        }
    }
    let mut dz = Mat::zeros(n, dim);
    for i in 0..n {
        for l in 0..n {
            if l == i || dist[(i, l)] == 0.0 {
                continue;
            }
            // s_il = -‖z_i − z_l‖/τ
            let g = -ds[(i, l)] / (tau * dist[(i, l)]);
            for c in 0..dim {
                let d = g * (z[(i, c)] - z[(l, c)]);
                dz[(i, c)] += d;
                dz[(l, c)] -= d;
            }
        }
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::non_finite("losses", "contrastive loss"));
    }
    Ok((loss, dz))
}

/// `‖UUᵀ − I‖_F²` and its gradient `4(UUᵀ − I)U`.
pub fn ortho_loss(u: &Mat) -> (f64, Mat) {
    let mut m = u * u.transpose();
    for i in 0..m.nrows() {
        m[(i, i)] -= 1.0;
    }
    (m.norm_squared(), (&m * u) * 4.0)
}

/// Mean squared error of a column of predictions, with gradient.
pub fn value_loss(pred: &Mat, labels: &[f64]) -> Result<(f64, Mat)> {
    if pred.nrows() == 0 {
        return Err(Error::invalid("losses", "empty value batch"));
    }
    if pred.ncols() != 1 || pred.nrows() != labels.len() {
        return Err(Error::shape("losses", "value predictions must be one column per label"));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut g = Mat::zeros(pred.nrows(), 1);
    for (i, &y) in labels.iter().enumerate() {
        let r = pred[(i, 0)] - y;
        total += r * r;
        g[(i, 0)] = 2.0 * r / n;
    }
    Ok((total / n, g))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Phase1Options {
    /// Use posterior means as embeddings and drop the KL term.
    pub deterministic: bool,
}

/// Intermediates and partial gradients from `phase1_forward`.
#[derive(Debug)]
pub struct Phase1Tape {
    enc: EncoderTape,
    dec: DecoderTape,
    post: Posteriors,
    eps: Mat,
    h: Mat,
    d_act_mean: Mat,
    d_act_ls: Mat,
    d_kl_mu: Mat,
    d_kl_ls: Mat,
    dz: Vec<Mat>,
    du: Vec<Mat>,
    beta: f64,
    weights: LossWeights,
    opts: Phase1Options,
}

impl Phase1Tape {
    /// Sum over views of the posterior-mean norm.
    pub fn mu_norm_sum(&self) -> f64 {
        self.post.mu.row_iter().map(|r| r.norm()).sum()
    }
}

fn query_matrices(batch: &TwoViewBatch) -> (Mat, Mat) {
    let n = batch.queries.len();
    let states = Mat::from_fn(n, STATE_DIM, |i, j| batch.queries[i][j]);
    let actions = Mat::from_fn(n, ACTION_DIM, |i, j| batch.queries[i][STATE_DIM + j]);
    (states, actions)
}

/// Representation-learning objective on one two-view batch.
///
/// `eps` is the reparameterization noise, one row per view.
pub fn phase1_forward(
    arch: &Arch,
    store: &ParamStore,
    batch: &TwoViewBatch,
    eps: &Mat,
    weights: &LossWeights,
    beta: f64,
    opts: Phase1Options,
) -> Result<(LossBreakdown, Phase1Tape)> {
    if batch.is_empty() {
        return Err(Error::invalid("losses", "empty batch"));
    }
    let n = batch.len();
    if eps.shape() != (n, arch.cfg.latent_dim) {
        return Err(Error::shape("losses", "noise matrix does not match batch"));
    }
    if arch.cfg.n_tasks != N_OBJECTIVES {
        return Err(Error::invalid("losses", "model task count differs from the environment"));
    }
    let cb = ContextBatch::new(&batch.contexts)?;
    let (post, enc) = arch.encode_forward(store, &cb)?;
    let h = if opts.deterministic {
        post.mu.clone()
    } else {
        reparameterize(&post, eps)
    };
    let (states, actions) = query_matrices(batch);
    let (dist, dec) = arch.decode_forward(store, &states, &h)?;
    let (nll, d_act_mean, d_act_ls) = gaussian_nll(&dist.mean, &dist.log_std, &actions);
    let (kl, d_kl_mu, d_kl_ls) = if opts.deterministic {
        let z = Mat::zeros(n, arch.cfg.latent_dim);
        (0.0, z.clone(), z)
    } else {
        kl_standard_normal(&post.mu, &post.log_sigma)
    };
    let mut rnc = Vec::new();
    let mut ortho = Vec::new();
    let mut dz = Vec::new();
    let mut du = Vec::new();
    for k in 0..arch.cfg.n_tasks {
        let z = arch.project(store, &h, k)?;
        let labels: Vec<f64> = batch.returns.iter().map(|r| r[k]).collect();
        let (r, g) = rnc_loss(&z, &labels, weights.tau_sim)?;
        rnc.push(r);
        dz.push(g);
        let (o, gu) = ortho_loss(store.value(arch.projectors[k].u));
        ortho.push(o);
        du.push(gu);
    }
    if !nll.is_finite() || !kl.is_finite() {
        return Err(Error::non_finite("losses", "policy loss"));
    }
    let breakdown = LossBreakdown::assemble(nll, kl, beta, rnc, ortho, weights)?;
    let tape = Phase1Tape {
        enc,
        dec,
        post,
        eps: eps.clone(),
        h,
        d_act_mean,
        d_act_ls,
        d_kl_mu,
        d_kl_ls,
        dz,
        du,
        beta,
        weights: *weights,
        opts,
    };
    Ok((breakdown, tape))
}

/// Accumulates gradients of the phase-1 total into `store`.
pub fn phase1_backward(arch: &Arch, store: &mut ParamStore, mut tape: Phase1Tape) -> Result<()> {
    let k_inv = 1.0 / arch.cfg.n_tasks as f64;
    let mut dh = arch.decode_backward(store, &mut tape.dec, &tape.d_act_mean, &tape.d_act_ls)?;
    for k in 0..arch.cfg.n_tasks {
        let scaled = &tape.dz[k] * (tape.weights.alpha * k_inv);
        dh += arch.project_backward(store, &tape.h, k, &scaled)?;
        store.add_grad(arch.projectors[k].u, &(&tape.du[k] * (tape.weights.zeta * k_inv)))?;
    }
    let (d_mu, d_ls) = if tape.opts.deterministic {
        (dh, Mat::zeros(tape.h.nrows(), tape.h.ncols()))
    } else {
        let sigma = tape.post.log_sigma.map(f64::exp);
        let d_ls = dh.component_mul(&sigma).component_mul(&tape.eps) + &tape.d_kl_ls * tape.beta;
        (dh + &tape.d_kl_mu * tape.beta, d_ls)
    };
    arch.encode_backward(store, &mut tape.enc, &d_mu, &d_ls)
}
