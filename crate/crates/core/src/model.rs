//! Encoder, projectors, value regressors and policy decoder.
//!
//! The encoder is a learned weighted sum over the context set:
//!
//! ```text
//! pooled   = ρ¹( mean_m ρ⁰(x_m) )            permutation-invariant set summary
//! ℓ_n      = ρ²([x_n ; pooled])              per-pair weight logit
//! w_n      = softmax_n(ℓ_n)
//! out      = Σ_n w_n f(x_n)  ∈ ℝ^{2D}        split into (μ, log σ)
//! ```
//!
//! With `mean_pool` the weight network is absent and `w_n = 1/L`.
//!
//! Architecture (`Arch`) and parameter values (`ParamStore`) are kept apart so
//! that a frozen store can be shared by concurrent evaluators and so gradient
//! checks can perturb values while holding the architecture borrowed.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use crate::dataio::{ContextSet, Pair, PAIR_DIM};
use crate::diffnet::{uniform_matrix, Activation, Init, Mat, Mlp, MlpSpec, MlpTape, ParamId, ParamStore};
use crate::env::{ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::util::Rng;

pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub task_dim: usize,
    /// Width of the set summary fed to the weight logits.
    pub pool_dim: usize,
    pub n_tasks: usize,
    pub mean_pool: bool,
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            latent_dim: 32,
            task_dim: 4,
            pool_dim: 32,
            n_tasks: crate::env::N_OBJECTIVES,
            mean_pool: false,
            init_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct WeightNet {
    embed: Mlp,
    pool: Mlp,
    score: Mlp,
}

#[derive(Debug, Clone)]
pub struct Projector {
    /// `task_dim × latent_dim`
    pub u: ParamId,
    /// `1 × task_dim`
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Arch {
    pub cfg: ModelConfig,
    feature: Mlp,
    weight: Option<WeightNet>,
    dec_trunk: Mlp,
    dec_head: Mlp,
    pub projectors: Vec<Projector>,
    pub regressors: Vec<Mlp>,
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub arch: Arch,
    pub store: ParamStore,
}

/// Diagonal Gaussian posteriors, one row per context.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    pub mu: Mat,
    pub log_sigma: Mat,
}

impl Posteriors {
    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    pub fn row(&self, i: usize) -> PolicyPosterior {
        PolicyPosterior {
            mu: self.mu.row(i).transpose(),
            log_sigma: self.log_sigma.row(i).transpose(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPosterior {
    pub mu: DVector<f64>,
    pub log_sigma: DVector<f64>,
}

/// Stacked context pairs with per-context row ranges.
#[derive(Debug, Clone)]
pub struct ContextBatch {
    pub x: Mat,
    pub segments: Vec<(usize, usize)>,
}

impl ContextBatch {
    pub fn new(contexts: &[ContextSet]) -> Result<Self> {
        let sets: Vec<&[Pair]> = contexts.iter().map(|c| c.pairs.as_slice()).collect();
        Self::from_pairs(&sets)
    }

    pub fn from_pairs(sets: &[&[Pair]]) -> Result<Self> {
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let mut x = Mat::zeros(total, PAIR_DIM);
        let mut segments = Vec::with_capacity(sets.len());
        let mut row = 0;
        for s in sets {
            if s.is_empty() {
                return Err(Error::invalid("model", "empty context set"));
            }
            segments.push((row, s.len()));
            for p in s.iter() {
                for d in 0..PAIR_DIM {
                    x[(row, d)] = p[d];
                }
                row += 1;
            }
        }
        Ok(ContextBatch { x, segments })
    }

    pub fn n_contexts(&self) -> usize {
        self.segments.len()
    }
}

#[derive(Debug)]
pub struct EncoderTape {
    segments: Vec<(usize, usize)>,
    feat_tape: MlpTape,
    features: Mat,
    weights: Vec<f64>,
    weight_tapes: Option<(MlpTape, MlpTape, MlpTape)>,
    raw_log_sigma: Mat,
}

#[derive(Debug)]
pub struct DecoderTape {
    trunk_tape: MlpTape,
    head_tape: MlpTape,
    raw_log_std: Mat,
}

/// Output of the conditional action distribution for a batch of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDist {
    pub mean: Mat,
    pub log_std: Mat,
}

impl ActionDist {
    pub fn sigma(&self) -> Mat {
        self.log_std.map(f64::exp)
    }
}

fn clamp_log_std(raw: &Mat) -> Mat {
    raw.map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
}

/// Passes gradient only where the clamp was inactive.
fn clamp_mask(raw: &Mat, g: &mut Mat) {
    g.zip_apply(raw, |gi, r| {
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&r) {
            *gi = 0.0;
        }
    });
}

impl Arch {
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Arch> {
        let h = cfg.hidden;
        let d = cfg.latent_dim;
        let init = Init::UniformFanIn { gain: cfg.init_gain };
        let feature = Mlp::new(store, "enc.feature", MlpSpec::new(&[PAIR_DIM, h, 2 * d]), init, rng)?;
        let weight = if cfg.mean_pool {
            None
        } else {
            let p = cfg.pool_dim;
            Some(WeightNet {
                embed: Mlp::new(
                    store,
                    "enc.weight.embed",
                    MlpSpec::new(&[PAIR_DIM, h, p]).with_output(Activation::Tanh),
                    init,
                    rng,
                )?,
                pool: Mlp::new(store, "enc.weight.pool", MlpSpec::new(&[p, h, p]), init, rng)?,
                score: Mlp::new(
                    store,
                    "enc.weight.score",
                    MlpSpec::new(&[PAIR_DIM + p, h, 1]),
                    init,
                    rng,
                )?,
            })
        };
        let dec_trunk = Mlp::new(
            store,
            "dec.trunk",
            MlpSpec::new(&[STATE_DIM, h, h]).with_output(Activation::Tanh),
            init,
            rng,
        )?;
        let dec_head = Mlp::new(
            store,
            "dec.head",
            MlpSpec::new(&[h + d, h, h, 2 * ACTION_DIM]),
            init,
            rng,
        )?;
        let mut projectors = Vec::new();
        for k in 0..cfg.n_tasks {
            let bound = cfg.init_gain / (d as f64).sqrt();
            let u = store.add(&format!("proj.{k}.u"), uniform_matrix(cfg.task_dim, d, bound, rng))?;
            let b = store.add(&format!("proj.{k}.b"), Mat::zeros(1, cfg.task_dim))?;
            projectors.push(Projector { u, b });
        }
        let mut regressors = Vec::new();
        for k in 0..cfg.n_tasks {
            let mlp = Mlp::new(
                store,
                &format!("value.{k}"),
                MlpSpec::new(&[cfg.task_dim, h, h, 1]),
                init,
                rng,
            )?;
            mlp.zero_output_layer(store);
            regressors.push(mlp);
        }
        Ok(Arch {
            cfg: cfg.clone(),
            feature,
            weight,
            dec_trunk,
            dec_head,
            projectors,
            regressors,
        })
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let mut ids = self.feature.param_ids();
        if let Some(w) = &self.weight {
            ids.extend(w.embed.param_ids());
            ids.extend(w.pool.param_ids());
            ids.extend(w.score.param_ids());
        }
        ids
    }

    pub fn decoder_ids(&self) -> Vec<ParamId> {
        let mut ids = self.dec_trunk.param_ids();
        ids.extend(self.dec_head.param_ids());
        ids
    }

    pub fn projector_ids(&self) -> Vec<ParamId> {
        self.projectors.iter().flat_map(|p| [p.u, p.b]).collect()
    }

    pub fn regressor_ids(&self) -> Vec<ParamId> {
        self.regressors.iter().flat_map(Mlp::param_ids).collect()
    }

    /// Parameters trained in representation learning: encoder, decoder, projectors.
    pub fn phase1_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_ids();
        ids.extend(self.decoder_ids());
        ids.extend(self.projector_ids());
        ids
    }

    fn check_task(&self, k: usize) -> Result<()> {
        if k >= self.cfg.n_tasks {
            return Err(Error::invalid(
                "model",
                format!("task index {k} out of range (K = {})", self.cfg.n_tasks),
            ));
        }
        Ok(())
    }

    /// Per-pair attention weights; each segment sums to one.
    fn pooling_weights(
        &self,
        store: &ParamStore,
        batch: &ContextBatch,
        record: bool,
    ) -> Result<(Vec<f64>, Option<(MlpTape, MlpTape, MlpTape)>)> {
        let Some(net) = &self.weight else {
            let mut w = vec![0.0; batch.x.nrows()];
            for &(start, len) in &batch.segments {
                w[start..start + len].fill(1.0 / len as f64);
            }
            return Ok((w, None));
        };
        let (emb, embed_tape) = net.embed.forward(store, &batch.x)?;
        let p = self.cfg.pool_dim;
        let mut summary = Mat::zeros(batch.n_contexts(), p);
        for (b, &(start, len)) in batch.segments.iter().enumerate() {
            for j in 0..p {
                let mut s = 0.0;
                for n in start..start + len {
                    s += emb[(n, j)];
                }
                summary[(b, j)] = s / len as f64;
            }
        }
        let (pooled, pool_tape) = net.pool.forward(store, &summary)?;
        let total = batch.x.nrows();
        let mut score_in = Mat::zeros(total, PAIR_DIM + p);
        for (b, &(start, len)) in batch.segments.iter().enumerate() {
            for n in start..start + len {
                for d in 0..PAIR_DIM {
                    score_in[(n, d)] = batch.x[(n, d)];
                }
                for j in 0..p {
                    score_in[(n, PAIR_DIM + j)] = pooled[(b, j)];
                }
            }
        }
        let (logits, score_tape) = net.score.forward(store, &score_in)?;
        let mut w = vec![0.0; total];
        for &(start, len) in &batch.segments {
            let seg = &logits.as_slice()[start..start + len];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (i, l) in seg.iter().enumerate() {
                let e = (l - max).exp();
                w[start + i] = e;
                z += e;
            }
            for wi in &mut w[start..start + len] {
                *wi /= z;
            }
        }
        let tapes = record.then_some((embed_tape, pool_tape, score_tape));
        Ok((w, tapes))
    }

    pub fn encode_weights(&self, store: &ParamStore, batch: &ContextBatch) -> Result<Vec<f64>> {
        Ok(self.pooling_weights(store, batch, false)?.0)
    }

    pub fn encode_forward(
        &self,
        store: &ParamStore,
        batch: &ContextBatch,
    ) -> Result<(Posteriors, EncoderTape)> {
        let (features, feat_tape) = self.feature.forward(store, &batch.x)?;
        let (weights, weight_tapes) = self.pooling_weights(store, batch, true)?;
        let d = self.cfg.latent_dim;
        let nb = batch.n_contexts();
        let mut out = Mat::zeros(nb, 2 * d);
        for (b, &(start, len)) in batch.segments.iter().enumerate() {
            for j in 0..2 * d {
                let mut s = 0.0;
                for n in start..start + len {
                    s += weights[n] * features[(n, j)];
                }
                out[(b, j)] = s;
            }
        }
        let mu = out.columns(0, d).into_owned();
        let raw_log_sigma = out.columns(d, d).into_owned();
        let post = Posteriors {
            mu,
            log_sigma: clamp_log_std(&raw_log_sigma),
        };
        let tape = EncoderTape {
            segments: batch.segments.clone(),
            feat_tape,
            features,
            weights,
            weight_tapes,
            raw_log_sigma,
        };
        Ok((post, tape))
    }

    pub fn encode(&self, store: &ParamStore, batch: &ContextBatch) -> Result<Posteriors> {
        Ok(self.encode_forward(store, batch)?.0)
    }

    pub fn encode_one(&self, store: &ParamStore, ctx: &ContextSet) -> Result<PolicyPosterior> {
        let batch = ContextBatch::new(std::slice::from_ref(ctx))?;
        Ok(self.encode(store, &batch)?.row(0))
    }

    /// Backpropagates posterior gradients into the encoder parameters.
    pub fn encode_backward(
        &self,
        store: &mut ParamStore,
        tape: &mut EncoderTape,
        d_mu: &Mat,
        d_log_sigma: &Mat,
    ) -> Result<()> {
        let d = self.cfg.latent_dim;
        let mut d_ls = d_log_sigma.clone();
        clamp_mask(&tape.raw_log_sigma, &mut d_ls);
        let total = tape.features.nrows();
        let mut d_feat = Mat::zeros(total, 2 * d);
        let mut d_w = vec![0.0; total];
        for (b, &(start, len)) in tape.segments.iter().enumerate() {
            for j in 0..2 * d {
                let g = if j < d { d_mu[(b, j)] } else { d_ls[(b, j - d)] };
                for n in start..start + len {
                    d_feat[(n, j)] = tape.weights[n] * g;
                    d_w[n] += tape.features[(n, j)] * g;
                }
            }
        }
        self.feature.backward(store, &mut tape.feat_tape, &d_feat)?;
        let Some(net) = &self.weight else {
            return Ok(());
        };
        let (mut embed_tape, mut pool_tape, mut score_tape) = tape
            .weight_tapes
            .take()
            .ok_or_else(|| Error::invalid("model", "encoder tape already consumed"))?;
        let mut d_logit = Mat::zeros(total, 1);
        for &(start, len) in &tape.segments {
            let mean_dw: f64 = (start..start + len).map(|n| tape.weights[n] * d_w[n]).sum();
            for n in start..start + len {
                d_logit[(n, 0)] = tape.weights[n] * (d_w[n] - mean_dw);
            }
        }
        let d_score_in = net.score.backward(store, &mut score_tape, &d_logit)?;
        let p = self.cfg.pool_dim;
        let nb = tape.segments.len();
        let mut d_pooled = Mat::zeros(nb, p);
        for (b, &(start, len)) in tape.segments.iter().enumerate() {
            for j in 0..p {
                let mut s = 0.0;
                for n in start..start + len {
                    s += d_score_in[(n, PAIR_DIM + j)];
                }
                d_pooled[(b, j)] = s;
            }
        }
        let d_summary = net.pool.backward(store, &mut pool_tape, &d_pooled)?;
        let mut d_emb = Mat::zeros(total, p);
        for (b, &(start, len)) in tape.segments.iter().enumerate() {
            for j in 0..p {
                let g = d_summary[(b, j)] / len as f64;
                for n in start..start + len {
                    d_emb[(n, j)] = g;
                }
            }
        }
        net.embed.backward(store, &mut embed_tape, &d_emb)?;
        Ok(())
    }

    pub fn project(&self, store: &ParamStore, h: &Mat, k: usize) -> Result<Mat> {
        self.check_task(k)?;
        let p = &self.projectors[k];
        if h.ncols() != self.cfg.latent_dim {
            return Err(Error::shape(
                "model",
                format!("latent width {} != {}", h.ncols(), self.cfg.latent_dim),
            ));
        }
        let mut z = h * store.value(p.u).transpose();
        let b = store.value(p.b);
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(b[(0, j)]);
        }
        Ok(z)
    }

    /// Accumulates projector gradients for upstream `dz` and returns `∂L/∂h`.
    pub fn project_backward(
        &self,
        store: &mut ParamStore,
        h: &Mat,
        k: usize,
        dz: &Mat,
    ) -> Result<Mat> {
        let p = &self.projectors[k];
        store.add_grad(p.u, &dz.tr_mul(h))?;
        let db = Mat::from_fn(1, dz.ncols(), |_, j| dz.column(j).sum());
        store.add_grad(p.b, &db)?;
        Ok(dz * store.value(p.u))
    }

    pub fn predict_value(&self, store: &ParamStore, z: &Mat, k: usize) -> Result<Mat> {
        self.check_task(k)?;
        self.regressors[k].eval(store, z)
    }

    pub fn value_forward(&self, store: &ParamStore, z: &Mat, k: usize) -> Result<(Mat, MlpTape)> {
        self.check_task(k)?;
        self.regressors[k].forward(store, z)
    }

    pub fn value_backward(
        &self,
        store: &mut ParamStore,
        k: usize,
        tape: &mut MlpTape,
        dv: &Mat,
    ) -> Result<Mat> {
        self.regressors[k].backward(store, tape, dv)
    }

    /// Predicted normalized value of task `k` at a single latent point, with `∂v/∂h`.
    pub fn value_and_grad(
        &self,
        store: &ParamStore,
        h: &DVector<f64>,
        k: usize,
    ) -> Result<(f64, DVector<f64>)> {
        self.check_task(k)?;
        let hm = Mat::from_row_slice(1, h.len(), h.as_slice());
        let z = self.project(store, &hm, k)?;
        let (v, mut tape) = self.regressors[k].forward(store, &z)?;
        let dz = self.regressors[k].backward_input(store, &mut tape, &Mat::from_element(1, 1, 1.0))?;
        let dh = dz * store.value(self.projectors[k].u);
        Ok((v[(0, 0)], dh.row(0).transpose()))
    }

    fn decoder_input(&self, store: &ParamStore, states: &Mat, h: &Mat) -> Result<(Mat, MlpTape)> {
        if states.nrows() != h.nrows() {
            return Err(Error::shape("model", "state and latent batch sizes differ"));
        }
        let (trunk, tape) = self.dec_trunk.forward(store, states)?;
        let hid = self.cfg.hidden;
        let mut input = Mat::zeros(states.nrows(), hid + self.cfg.latent_dim);
        input.columns_mut(0, hid).copy_from(&trunk);
        input.columns_mut(hid, self.cfg.latent_dim).copy_from(h);
        Ok((input, tape))
    }

    pub fn decode_forward(
        &self,
        store: &ParamStore,
        states: &Mat,
        h: &Mat,
    ) -> Result<(ActionDist, DecoderTape)> {
        let (input, trunk_tape) = self.decoder_input(store, states, h)?;
        let (out, head_tape) = self.dec_head.forward(store, &input)?;
        let mean = out.columns(0, ACTION_DIM).into_owned();
        let raw_log_std = out.columns(ACTION_DIM, ACTION_DIM).into_owned();
        let dist = ActionDist {
            mean,
            log_std: clamp_log_std(&raw_log_std),
        };
        Ok((
            dist,
            DecoderTape {
                trunk_tape,
                head_tape,
                raw_log_std,
            },
        ))
    }

    pub fn decode(&self, store: &ParamStore, states: &Mat, h: &Mat) -> Result<ActionDist> {
        Ok(self.decode_forward(store, states, h)?.0)
    }

    /// Backpropagates action-distribution gradients; returns `∂L/∂h`.
    pub fn decode_backward(
        &self,
        store: &mut ParamStore,
        tape: &mut DecoderTape,
        d_mean: &Mat,
        d_log_std: &Mat,
    ) -> Result<Mat> {
        let mut d_ls = d_log_std.clone();
        clamp_mask(&tape.raw_log_std, &mut d_ls);
        let n = d_mean.nrows();
        let mut d_out = Mat::zeros(n, 2 * ACTION_DIM);
        d_out.columns_mut(0, ACTION_DIM).copy_from(d_mean);
        d_out.columns_mut(ACTION_DIM, ACTION_DIM).copy_from(&d_ls);
        let d_in = self.dec_head.backward(store, &mut tape.head_tape, &d_out)?;
        let hid = self.cfg.hidden;
        let d_trunk = d_in.columns(0, hid).into_owned();
        self.dec_trunk.backward(store, &mut tape.trunk_tape, &d_trunk)?;
        Ok(d_in.columns(hid, self.cfg.latent_dim).into_owned())
    }
}

impl PolicyModel {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Arch::build(cfg, &mut store, rng)?;
        Ok(PolicyModel { arch, store })
    }

    pub fn encode(&self, contexts: &[ContextSet]) -> Result<Posteriors> {
        self.arch.encode(&self.store, &ContextBatch::new(contexts)?)
    }

    pub fn encode_one(&self, ctx: &ContextSet) -> Result<PolicyPosterior> {
        self.arch.encode_one(&self.store, ctx)
    }

    pub fn project(&self, h: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
        let hm = Mat::from_row_slice(1, h.len(), h.as_slice());
        Ok(self.arch.project(&self.store, &hm, k)?.row(0).transpose())
    }

    pub fn predict_value(&self, z: &DVector<f64>, k: usize) -> Result<f64> {
        let zm = Mat::from_row_slice(1, z.len(), z.as_slice());
        Ok(self.arch.predict_value(&self.store, &zm, k)?[(0, 0)])
    }

    /// Normalized value prediction for every task at latent point `h`.
    pub fn predict_values(&self, h: &DVector<f64>) -> Result<Vec<f64>> {
        (0..self.arch.cfg.n_tasks)
            .map(|k| self.predict_value(&self.project(h, k)?, k))
            .collect()
    }

    pub fn decode_action_dist(&self, state: [f64; STATE_DIM], h: &DVector<f64>) -> Result<(f64, f64)> {
        let s = Mat::from_row_slice(1, STATE_DIM, &state);
        let hm = Mat::from_row_slice(1, h.len(), h.as_slice());
        let d = self.arch.decode(&self.store, &s, &hm)?;
        Ok((d.mean[(0, 0)], d.log_std[(0, 0)].exp()))
    }

    pub fn action_logprob(&self, state: [f64; STATE_DIM], action: f64, h: &DVector<f64>) -> Result<f64> {
        let (mu, sigma) = self.decode_action_dist(state, h)?;
        Ok(gaussian_logpdf(action, mu, sigma.ln()))
    }

    pub fn sample_action(&self, state: [f64; STATE_DIM], h: &DVector<f64>, rng: &mut Rng) -> Result<f64> {
        let (mu, sigma) = self.decode_action_dist(state, h)?;
        let eps: f64 = StandardNormal.sample(rng);
        Ok(mu + sigma * eps)
    }
}

pub fn gaussian_logpdf(a: f64, mean: f64, log_std: f64) -> f64 {
    let z = (a - mean) / log_std.exp();
    -HALF_LN_2PI - log_std - 0.5 * z * z
}

/// `h = μ + σ ⊙ ε`.
pub fn reparameterize(post: &Posteriors, eps: &Mat) -> Mat {
    let sigma = post.log_sigma.map(f64::exp);
    &post.mu + sigma.component_mul(eps)
}

pub fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn sample_embedding(post: &PolicyPosterior, rng: &mut Rng) -> DVector<f64> {
    let eps = DVector::from_fn(post.mu.len(), |_, _| StandardNormal.sample(rng));
    &post.mu + post.log_sigma.map(f64::exp).component_mul(&eps)
}

pub fn row_vector(h: &DVector<f64>) -> Mat {
    Mat::from_row_slice(1, h.len(), h.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{fd_check, fd_check_vec, FD_EPS};
    use crate::util::Rng;
    use crate::util::rng_from;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn small_cfg(mean_pool: bool) -> ModelConfig {
        ModelConfig {
            hidden: 8,
            latent_dim: 4,
            task_dim: 2,
            pool_dim: 3,
            n_tasks: 2,
            mean_pool,
            init_gain: 1.0,
        }
    }

    fn random_pairs(n: usize, rng: &mut Rng) -> Vec<Pair> {
        (0..n)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect()
    }

    fn ctx(pairs: Vec<Pair>) -> ContextSet {
        ContextSet { pairs, source: 0 }
    }

    fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn empty_context_rejected() {
        let mut rng = rng_from(0);
        let m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        assert!(m.encode(&[ctx(vec![])]).is_err());
    }

    #[test]
    fn singleton_context_returns_feature() {
        let mut rng = rng_from(1);
        let m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        let pairs = random_pairs(1, &mut rng);
        let batch = ContextBatch::from_pairs(&[&pairs]).unwrap();
        let w = m.arch.encode_weights(&m.store, &batch).unwrap();
        assert_eq!(w, vec![1.0]);
        let post = m.arch.encode(&m.store, &batch).unwrap();
        let f = m.arch.feature.eval(&m.store, &batch.x).unwrap();
        let d = m.arch.cfg.latent_dim;
        assert_eq!(post.mu, f.columns(0, d).into_owned());
        assert_eq!(post.log_sigma, clamp_log_std(&f.columns(d, d).into_owned()));
    }

    #[test]
    fn weights_are_a_distribution_per_context() {
        let mut rng = rng_from(2);
        let m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        let a = random_pairs(7, &mut rng);
        let b = random_pairs(3, &mut rng);
        let batch = ContextBatch::from_pairs(&[&a, &b]).unwrap();
        let w = m.arch.encode_weights(&m.store, &batch).unwrap();
        for &(s, l) in &batch.segments {
            let seg = &w[s..s + l];
            assert!(seg.iter().all(|&x| x > 0.0));
            assert!((seg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_context_matches_original() {
        let mut rng = rng_from(3);
        let m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        let pairs = random_pairs(16, &mut rng);
        let doubled: Vec<Pair> = pairs.iter().chain(pairs.iter()).copied().collect();
        let p1 = m.encode(&[ctx(pairs.clone())]).unwrap();
        let p2 = m.encode(&[ctx(doubled)]).unwrap();
        // Oracle: direct per-pair evaluation of the weighted sum.
        let x = Mat::from_fn(pairs.len(), 3, |i, j| pairs[i][j]);
        let f = m.arch.feature.eval(&m.store, &x).unwrap();
        let w = m
            .arch
            .encode_weights(&m.store, &ContextBatch::from_pairs(&[&pairs]).unwrap())
            .unwrap();
        let d = m.arch.cfg.latent_dim;
        for j in 0..d {
            let direct: f64 = (0..pairs.len()).map(|n| w[n] * f[(n, j)]).sum();
            assert!((direct - p1.mu[(0, j)]).abs() < 1e-12);
        }
        assert!(max_abs_diff(&p1.mu, &p2.mu) < 1e-12);
        assert!(max_abs_diff(&p1.log_sigma, &p2.log_sigma) < 1e-12);
    }

    #[test]
    fn batched_encoding_matches_individual() {
        let mut rng = rng_from(4);
        let m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        let sets: Vec<ContextSet> = (1..5).map(|n| ctx(random_pairs(n * 3, &mut rng))).collect();
        let all = m.encode(&sets).unwrap();
        for (i, c) in sets.iter().enumerate() {
            let one = m.encode_one(c).unwrap();
            assert!((&one.mu - all.row(i).mu).abs().max() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_uses_uniform_weights() {
        let mut rng = rng_from(5);
        let m = PolicyModel::new(&small_cfg(true), &mut rng).unwrap();
        let pairs = random_pairs(4, &mut rng);
        let batch = ContextBatch::from_pairs(&[&pairs]).unwrap();
        assert_eq!(m.arch.encode_weights(&m.store, &batch).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn log_sigma_within_clamp() {
        let mut rng = rng_from(6);
        let mut cfg = ModelConfig::default();
        cfg.init_gain = 40.0;
        let m = PolicyModel::new(&cfg, &mut rng).unwrap();
        let post = m.encode(&[ctx(random_pairs(5, &mut rng))]).unwrap();
        assert!(post.log_sigma.iter().all(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(v)));
    }

    fn encoder_objective(arch: &Arch, store: &ParamStore, batch: &ContextBatch, c: &Mat) -> f64 {
        let p = arch.encode(store, batch).unwrap();
        let d = arch.cfg.latent_dim;
        p.mu.component_mul(&c.columns(0, d)).sum() + p.log_sigma.component_mul(&c.columns(d, d)).sum()
    }

    fn check_encoder_grads(mean_pool: bool) {
        let mut rng = rng_from(7);
        let PolicyModel { arch, mut store } = PolicyModel::new(&small_cfg(mean_pool), &mut rng).unwrap();
        let a = random_pairs(5, &mut rng);
        let b = random_pairs(2, &mut rng);
        let batch = ContextBatch::from_pairs(&[&a, &b]).unwrap();
        let d = arch.cfg.latent_dim;
        let c = standard_normal_matrix(2, 2 * d, &mut rng);
        let (_, mut tape) = arch.encode_forward(&store, &batch).unwrap();
        store.zero_grads();
        arch.encode_backward(
            &mut store,
            &mut tape,
            &c.columns(0, d).into_owned(),
            &c.columns(d, d).into_owned(),
        )
        .unwrap();
        let ids = arch.encoder_ids();
        let rep = fd_check(&mut store, &ids, |s| Ok(encoder_objective(&arch, s, &batch, &c)), FD_EPS, 400, &mut rng).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn encoder_gradients_match_fd() {
        check_encoder_grads(false);
    }

    #[test]
    fn mean_pool_encoder_gradients_match_fd() {
        check_encoder_grads(true);
    }

    #[test]
    fn decoder_gradients_match_fd() {
        let mut rng = rng_from(8);
        let PolicyModel { arch, mut store } = PolicyModel::new(&small_cfg(false), &mut rng).unwrap();
        let n = 6;
        let s = standard_normal_matrix(n, STATE_DIM, &mut rng);
        let h = standard_normal_matrix(n, arch.cfg.latent_dim, &mut rng);
        let cm = standard_normal_matrix(n, 1, &mut rng);
        let cs = standard_normal_matrix(n, 1, &mut rng);
        let obj = |st: &ParamStore, hh: &Mat| {
            let d = arch.decode(st, &s, hh).unwrap();
            d.mean.component_mul(&cm).sum() + d.log_std.component_mul(&cs).sum()
        };
        let (_, mut tape) = arch.decode_forward(&store, &s, &h).unwrap();
        store.zero_grads();
        let dh = arch.decode_backward(&mut store, &mut tape, &cm, &cs).unwrap();
        let ids = arch.decoder_ids();
        let rep = fd_check(&mut store, &ids, |st| Ok(obj(st, &h)), FD_EPS, 400, &mut rng).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
        let hv: Vec<f64> = h.iter().copied().collect();
        let dv: Vec<f64> = dh.iter().copied().collect();
        let rep = fd_check_vec(
            &hv,
            &dv,
            |x| Ok(obj(&store, &Mat::from_column_slice(n, arch.cfg.latent_dim, x))),
            FD_EPS,
            hv.len(),
            &mut rng,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn value_gradient_matches_fd() {
        let mut rng = rng_from(9);
        let PolicyModel { arch, mut store } = PolicyModel::new(&small_cfg(false), &mut rng).unwrap();
        // Give the regressor a non-zero output layer so the gradient is informative.
        for id in arch.regressor_ids() {
            let shape = store.value(id).shape();
            *store.value_mut(id) = uniform_matrix(shape.0, shape.1, 0.5, &mut rng);
        }
        let h = DVector::from_fn(arch.cfg.latent_dim, |_, _| rng.gen_range(-1.0..1.0));
        for k in 0..2 {
            let (_, g) = arch.value_and_grad(&store, &h, k).unwrap();
            let f = |x: &[f64]| {
                let z = arch.project(&store, &Mat::from_row_slice(1, x.len(), x), k)?;
                Ok(arch.predict_value(&store, &z, k)?[(0, 0)])
            };
            let rep = fd_check_vec(h.as_slice(), g.as_slice(), f, FD_EPS, h.len(), &mut rng).unwrap();
            assert!(rep.passes(1e-4), "{rep:?}");
        }
        assert!(arch.value_and_grad(&store, &h, 2).is_err());
    }

    #[test]
    fn zero_initialized_regressor_outputs_zero() {
        let mut rng = rng_from(10);
        let m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        let z = DVector::from_element(4, 0.3);
        assert_eq!(m.predict_value(&z, 0).unwrap(), 0.0);
    }

    #[test]
    fn zero_decoder_gives_standard_normal() {
        let mut rng = rng_from(11);
        let mut m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        for id in m.arch.decoder_ids() {
            m.store.value_mut(id).fill(0.0);
        }
        let h = DVector::from_element(32, 0.7);
        let (mu, sigma) = m.decode_action_dist([0.1, -0.2], &h).unwrap();
        assert_eq!((mu, sigma), (0.0, 1.0));
        let lp = m.action_logprob([0.1, -0.2], 0.0, &h).unwrap();
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn action_density_integrates_to_one() {
        let mut rng = rng_from(12);
        let m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        let h = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
        let (mu, sigma) = m.decode_action_dist([0.5, 0.5], &h).unwrap();
        let (lo, hi, n) = (mu - 12.0 * sigma, mu + 12.0 * sigma, 20_000);
        let dx = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let a = lo + i as f64 * dx;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * m.action_logprob([0.5, 0.5], a, &h).unwrap().exp() * dx;
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn reparameterize_zero_noise_and_floor() {
        let mut rng = rng_from(13);
        let mu = standard_normal_matrix(2, 4, &mut rng);
        let post = Posteriors {
            mu: mu.clone(),
            log_sigma: Mat::from_element(2, 4, LOG_STD_MIN),
        };
        assert_eq!(reparameterize(&post, &Mat::zeros(2, 4)), mu);
        let eps = standard_normal_matrix(2, 4, &mut rng);
        let h = reparameterize(&post, &eps);
        for i in 0..8 {
            assert!((h[i] - mu[i]).abs() <= 0.01 * eps[i].abs());
        }
    }

    #[test]
    fn identity_rows_projector_selects_coordinates() {
        let mut rng = rng_from(14);
        let mut m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        let u = m.arch.projectors[0].u;
        *m.store.value_mut(u) = Mat::identity(32, 32).rows(0, 4).into_owned();
        let h = DVector::from_fn(32, |i, _| i as f64);
        let z = m.project(&h, 0).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 1.0, 2.0, 3.0]);
    }

    /// Largest singular value by power iteration on `UᵀU`.
    fn sigma_max(u: &Mat) -> f64 {
        let g = u.transpose() * u;
        let mut v = DVector::from_element(g.ncols(), 1.0);
        for _ in 0..500 {
            v = &g * &v;
            v /= v.norm();
        }
        (v.dot(&(&g * &v))).sqrt()
    }

    #[test]
    fn projection_is_lipschitz_in_sigma_max() {
        let mut rng = rng_from(15);
        let m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        let s = sigma_max(m.store.value(m.arch.projectors[1].u));
        for _ in 0..50 {
            let a = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
            let dz = (m.project(&a, 1).unwrap() - m.project(&b, 1).unwrap()).norm();
            assert!(dz <= (&a - &b).norm() * s * (1.0 + 1e-9));
        }
    }

    #[test]
    fn semi_orthonormal_projector_is_partial_isometry() {
        let mut rng = rng_from(16);
        let mut m = PolicyModel::new(&ModelConfig::default(), &mut rng).unwrap();
        let q = standard_normal_matrix(32, 4, &mut rng).qr().q();
        let u = m.arch.projectors[0].u;
        *m.store.value_mut(u) = q.transpose();
        let ut = m.store.value(u).clone();
        for _ in 0..20 {
            let a = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(32, |_, _| rng.gen_range(-1.0..1.0));
            let dz = (m.project(&a, 0).unwrap() - m.project(&b, 0).unwrap()).norm();
            let iso = (ut.transpose() * &ut * (&a - &b)).norm();
            assert!((dz - iso).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn encoder_is_permutation_invariant(seed in 0u64..1000, n in 1usize..40) {
            let mut rng = rng_from(seed);
            let m = PolicyModel::new(&small_cfg(false), &mut rng).unwrap();
            let mut pairs = random_pairs(n, &mut rng);
            let base = m.encode(&[ctx(pairs.clone())]).unwrap();
            for _ in 0..100 {
                pairs.shuffle(&mut rng);
                let p = m.encode(&[ctx(pairs.clone())]).unwrap();
                prop_assert!(max_abs_diff(&p.mu, &base.mu) <= 1e-12);
                prop_assert!(max_abs_diff(&p.log_sigma, &base.log_sigma) <= 1e-12);
            }
        }
    }
}
