//! Two-phase training, the embedding bank, and checkpoint bundles.
//!
//! Phase 1 trains encoder, decoder and projectors on two-view batches. Phase 2
//! freezes them and fits the per-task value regressors. Every random draw comes
//! from a stream derived from `(seed, phase, epoch)`, so a dataset, a config and
//! a seed determine every checkpoint byte.
//!
//! # Bundle layout (`PBND`, version 1, little-endian)
//!
//! ```text
//! magic "PBND" | u32 version=1 | u32 n_sections
//! section      4-byte tag | u64 byte_len | payload
//!   PRMS       parameter checkpoint (PCKP format)
//!   CONF       canonical run-config text (UTF-8)
//!   STAT       normalization statistics (10 × f64)
//!   BANK       u32 n | u32 dim | n × (u32 source | f64 knob | f64 returns[K] | f64 h[dim])
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::config::RunConfig;
use crate::dataio::{epoch_batches, sample_context, two_view_batch_for, Dataset, NormStats};
use crate::diffnet::{AdamW, Mat, ParamStore};
use crate::env::N_OBJECTIVES;
use crate::error::{Error, Result};
use crate::losses::{
    beta_schedule, phase1_backward, phase1_forward, value_loss, LossBreakdown, LossWeights,
    Phase1Options,
};
use crate::model::{reparameterize, standard_normal_matrix, ContextBatch, ModelConfig, PolicyModel};
use crate::util::{derive_seed, rng_for};

const STREAM_INIT: u64 = 0;
const STREAM_PHASE1: u64 = 1;
const STREAM_PHASE2: u64 = 2;
const STREAM_BANK: u64 = 3;

/// Upper bound on every layer width and the context length.
pub const MAX_WIDTH: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub context_length: usize,
    pub rep_epochs: usize,
    pub rep_batch: usize,
    pub reg_epochs: usize,
    pub reg_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub zeta: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub tau_sim: f64,
    pub seed: u64,
    pub hidden: usize,
    pub latent_dim: usize,
    pub task_dim: usize,
    pub pool_dim: usize,
    pub init_gain: f64,
    /// Drop the contrastive term.
    pub vae_only: bool,
    /// Drop the semi-orthonormality penalty.
    pub unconstrained_projector: bool,
    pub mean_pool_encoder: bool,
    /// Embed with posterior means and drop the KL term.
    pub deterministic_ae: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            context_length: 32,
            rep_epochs: 200,
            rep_batch: 64,
            reg_epochs: 100,
            reg_batch: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            alpha: w.alpha,
            zeta: w.zeta,
            beta_start: w.beta_start,
            beta_end: w.beta_end,
            tau_sim: w.tau_sim,
            seed: 0,
            hidden: 64,
            latent_dim: 32,
            task_dim: 4,
            pool_dim: 32,
            init_gain: 1.0,
            vae_only: false,
            unconstrained_projector: false,
            mean_pool_encoder: false,
            deterministic_ae: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("context_length", self.context_length),
            ("rep_batch", self.rep_batch),
            ("reg_batch", self.reg_batch),
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("task_dim", self.task_dim),
            ("pool_dim", self.pool_dim),
        ];
        for (name, v) in counts {
            if v == 0 || v > MAX_WIDTH {
                return Err(Error::invalid("trainer", format!("{name} must be in 1..={MAX_WIDTH}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("trainer", "lr must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.init_gain > 0.0) {
            return Err(Error::invalid("trainer", "weight_decay must be >= 0 and init_gain > 0"));
        }
        self.loss_weights().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            task_dim: self.task_dim,
            pool_dim: self.pool_dim,
            n_tasks: N_OBJECTIVES,
            mean_pool: self.mean_pool_encoder,
            init_gain: self.init_gain,
        }
    }

    /// Loss weights after applying the ablation flags.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: if self.vae_only { 0.0 } else { self.alpha },
            zeta: if self.unconstrained_projector { 0.0 } else { self.zeta },
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            tau_sim: self.tau_sim,
        }
    }

    fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    fn phase1_options(&self) -> Phase1Options {
        Phase1Options {
            deterministic: self.deterministic_ae,
        }
    }
}

/// Epoch-mean phase-1 losses plus the mean posterior-mean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Epoch {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub h_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Epoch {
    pub epoch: usize,
    pub value_mse: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub phase1: Vec<Phase1Epoch>,
    pub phase2: Vec<Phase2Epoch>,
}

impl TrainLog {
    /// Phase-1 CSV text: `epoch, nll, kl, rnc_k..., ortho_k..., total`.
    pub fn phase1_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(LossBreakdown::csv_header(N_OBJECTIVES))
            .map_err(csv_err)?;
        for e in &self.phase1 {
            w.write_record(e.loss.csv_row(e.epoch)).map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// Phase-2 CSV text: `epoch, value_mse_k...`.
    pub fn phase2_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_string()];
        header.extend((0..N_OBJECTIVES).map(|k| format!("value_mse_{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.phase2 {
            let mut row = vec![e.epoch.to_string()];
            row.extend(e.value_mse.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid("trainer", e.to_string()))
}

pub fn init_model(cfg: &TrainConfig) -> Result<PolicyModel> {
    cfg.validate()?;
    PolicyModel::new(&cfg.model_config(), &mut rng_for(cfg.seed, STREAM_INIT))
}

fn at_batch(e: Error, phase: u32, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { module, context } => Error::NonFinite {
            module,
            context: format!("{context} (phase {phase}, epoch {epoch}, batch {batch})"),
        },
        other => other,
    }
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    let k = parts[0].rnc.len();
    LossBreakdown {
        nll: avg(&|b| b.nll),
        kl: avg(&|b| b.kl),
        beta: avg(&|b| b.beta),
        rnc: (0..k).map(|i| avg(&|b| b.rnc[i])).collect(),
        ortho: (0..k).map(|i| avg(&|b| b.ortho[i])).collect(),
        value_mse: Vec::new(),
        total: avg(&|b| b.total),
    }
}

/// Representation learning over the train split.
pub fn train_phase1(dataset: &Dataset, cfg: &TrainConfig, model: &mut PolicyModel) -> Result<Vec<Phase1Epoch>> {
    cfg.validate()?;
    if dataset.train.len() < cfg.rep_batch {
        return Err(Error::invalid(
            "trainer",
            format!("train split of {} is smaller than rep_batch {}", dataset.train.len(), cfg.rep_batch),
        ));
    }
    let weights = cfg.loss_weights();
    let opt = cfg.optimizer();
    let opts = cfg.phase1_options();
    let PolicyModel { arch, store } = model;
    let ids = arch.phase1_ids();
    let base = derive_seed(cfg.seed, STREAM_PHASE1);
    let mut log = Vec::with_capacity(cfg.rep_epochs);
    for epoch in 0..cfg.rep_epochs {
        let mut rng = rng_for(base, epoch as u64);
        let beta = beta_schedule(epoch, cfg.rep_epochs - 1, &weights)?;
        let mut parts = Vec::new();
        let mut h_norm = 0.0;
        let mut n_views = 0usize;
        for (b, sources) in epoch_batches(&dataset.train, cfg.rep_batch, &mut rng).iter().enumerate() {
            let batch = two_view_batch_for(dataset, sources, cfg.context_length, &mut rng)?;
            let eps = standard_normal_matrix(batch.len(), arch.cfg.latent_dim, &mut rng);
            store.zero_grads();
            let (loss, tape) = phase1_forward(arch, store, &batch, &eps, &weights, beta, opts)
                .map_err(|e| at_batch(e, 1, epoch, b))?;
            h_norm += tape.mu_norm_sum();
            n_views += batch.len();
            phase1_backward(arch, store, tape).map_err(|e| at_batch(e, 1, epoch, b))?;
            opt.step(store, &ids).map_err(|e| at_batch(e, 1, epoch, b))?;
            parts.push(loss);
        }
        log.push(Phase1Epoch {
            epoch,
            loss: mean_breakdown(&parts),
            h_norm: h_norm / n_views as f64,
        });
    }
    Ok(log)
}

/// Value-regressor training with the encoder and projectors frozen.
pub fn train_phase2(dataset: &Dataset, cfg: &TrainConfig, model: &mut PolicyModel) -> Result<Vec<Phase2Epoch>> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::invalid("trainer", "empty train split"));
    }
    let opt = cfg.optimizer();
    let PolicyModel { arch, store } = model;
    let ids = arch.regressor_ids();
    let base = derive_seed(cfg.seed, STREAM_PHASE2);
    let mut log = Vec::with_capacity(cfg.reg_epochs);
    for epoch in 0..cfg.reg_epochs {
        let mut rng = rng_for(base, epoch as u64);
        let mut sums = [0.0; N_OBJECTIVES];
        let mut count = 0usize;
        for (b, sources) in epoch_batches(&dataset.train, cfg.reg_batch, &mut rng).iter().enumerate() {
            let contexts = sources
                .iter()
                .map(|&i| sample_context(&dataset.trajectories[i], i, &dataset.stats, cfg.context_length, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let post = arch.encode(store, &ContextBatch::new(&contexts)?)?;
            let h = if cfg.deterministic_ae {
                post.mu.clone()
            } else {
                let eps = standard_normal_matrix(post.len(), arch.cfg.latent_dim, &mut rng);
                reparameterize(&post, &eps)
            };
            store.zero_grads();
            for (k, sum) in sums.iter_mut().enumerate() {
                let labels: Vec<f64> = sources.iter().map(|&i| dataset.normalized_returns(i)[k]).collect();
                let z = arch.project(store, &h, k)?;
                let (v, mut tape) = arch.value_forward(store, &z, k)?;
                let (mse, dv) = value_loss(&v, &labels).map_err(|e| at_batch(e, 2, epoch, b))?;
                if !mse.is_finite() {
                    return Err(at_batch(Error::non_finite("trainer", "value loss"), 2, epoch, b));
                }
                arch.value_backward(store, k, &mut tape, &dv)?;
                *sum += mse * sources.len() as f64;
            }
            count += sources.len();
            opt.step(store, &ids).map_err(|e| at_batch(e, 2, epoch, b))?;
        }
        log.push(Phase2Epoch {
            epoch,
            value_mse: sums.iter().map(|s| s / count as f64).collect(),
        });
    }
    Ok(log)
}

/// Posterior means of one fixed-seed context per train trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    /// `n × latent_dim`
    pub h: Mat,
    pub sources: Vec<usize>,
    pub knobs: Vec<f64>,
    /// Raw-unit returns of each source trajectory.
    pub returns: Vec<[f64; N_OBJECTIVES]>,
}

impl EmbeddingBank {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn embedding(&self, i: usize) -> nalgebra::DVector<f64> {
        self.h.row(i).transpose()
    }

    pub fn write(&self, w: &mut Writer) {
        w.len_u32(self.len());
        w.len_u32(self.dim());
        for i in 0..self.len() {
            w.len_u32(self.sources[i]);
            w.f64(self.knobs[i]);
            for r in self.returns[i] {
                w.f64(r);
            }
            for j in 0..self.dim() {
                w.f64(self.h[(i, j)]);
            }
        }
    }

    pub fn read(r: &mut Reader) -> Result<EmbeddingBank> {
        let n = r.u32()? as usize;
        let at = r.offset() as usize;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(r.error_at(at, "zero embedding width"));
        }
        let record = 4 + 8 * (1 + N_OBJECTIVES + dim);
        if r.remaining() / record < n {
            return Err(r.error(format!("bank declares {n} entries but the section is too short")));
        }
        let mut bank = EmbeddingBank {
            h: Mat::zeros(n, dim),
            sources: Vec::with_capacity(n),
            knobs: Vec::with_capacity(n),
            returns: Vec::with_capacity(n),
        };
        for i in 0..n {
            bank.sources.push(r.u32()? as usize);
            bank.knobs.push(r.f64()?);
            let mut ret = [0.0; N_OBJECTIVES];
            for x in ret.iter_mut() {
                *x = r.f64()?;
            }
            bank.returns.push(ret);
            for j in 0..dim {
                let at = r.offset() as usize;
                let v = r.f64()?;
                if !v.is_finite() {
                    return Err(r.error_at(at, "non-finite embedding"));
                }
                bank.h[(i, j)] = v;
            }
        }
        Ok(bank)
    }
}

pub fn build_embedding_bank(dataset: &Dataset, model: &PolicyModel, cfg: &TrainConfig) -> Result<EmbeddingBank> {
    let mut rng = rng_for(cfg.seed, STREAM_BANK);
    let contexts = dataset
        .train
        .iter()
        .map(|&i| sample_context(&dataset.trajectories[i], i, &dataset.stats, cfg.context_length, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let post = model.encode(&contexts)?;
    Ok(EmbeddingBank {
        h: post.mu,
        sources: dataset.train.clone(),
        knobs: dataset.train.iter().map(|&i| dataset.trajectories[i].knob).collect(),
        returns: dataset.train.iter().map(|&i| dataset.trajectories[i].returns).collect(),
    })
}

/// Everything needed to evaluate or steer a trained model.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub config: RunConfig,
    pub model: PolicyModel,
    pub stats: NormStats,
    pub bank: EmbeddingBank,
}

pub const BUNDLE_MAGIC: &[u8; 4] = b"PBND";
pub const BUNDLE_VERSION: u32 = 1;
const SECTIONS: [&[u8; 4]; 4] = [b"PRMS", b"CONF", b"STAT", b"BANK"];

/// Runs both phases and builds the bank.
pub fn train(dataset: &Dataset, config: &RunConfig) -> Result<(Bundle, TrainLog)> {
    let cfg = &config.train;
    let mut model = init_model(cfg)?;
    let phase1 = train_phase1(dataset, cfg, &mut model)?;
    let phase2 = train_phase2(dataset, cfg, &mut model)?;
    let bank = build_embedding_bank(dataset, &model, cfg)?;
    let bundle = Bundle {
        config: config.clone(),
        model,
        stats: dataset.stats.clone(),
        bank,
    };
    Ok((bundle, TrainLog { phase1, phase2 }))
}

impl Bundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(BUNDLE_MAGIC);
        w.u32(BUNDLE_VERSION);
        w.len_u32(SECTIONS.len());
        let mut stats = Writer::new();
        self.stats.write(&mut stats);
        let mut bank = Writer::new();
        self.bank.write(&mut bank);
        let payloads = [
            self.model.store.to_bytes(),
            self.config.to_canonical_string()?.into_bytes(),
            stats.into_inner(),
            bank.into_inner(),
        ];
        for (tag, data) in SECTIONS.iter().zip(payloads) {
            w.bytes(*tag);
            w.u64(data.len() as u64);
            w.bytes(&data);
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Bundle> {
        let mut r = Reader::new(data, "checkpoint bundle");
        r.expect_magic(BUNDLE_MAGIC, "checkpoint bundle")?;
        let at = r.offset() as usize;
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(r.error_at(at, format!("unsupported bundle version {version}")));
        }
        let n = r.u32()? as usize;
        let mut found: [Option<(usize, &[u8])>; 4] = [None; 4];
        for _ in 0..n {
            let at = r.offset() as usize;
            let tag = r.take(4)?;
            let len = r.u64()?;
            if len > r.remaining() as u64 {
                return Err(r.error_at(at, "section length exceeds file size"));
            }
            let body_at = r.offset() as usize;
            let body = r.take(len as usize)?;
            let Some(slot) = SECTIONS.iter().position(|t| &t[..] == tag) else {
                return Err(r.error_at(at, format!("unknown section {:?}", String::from_utf8_lossy(tag))));
            };
            if found[slot].replace((body_at, body)).is_some() {
                return Err(r.error_at(at, format!("duplicate section {}", tag_name(slot))));
            }
        }
        r.finish()?;
        let mut get = |slot: usize| {
            found[slot].take().ok_or_else(|| Error::Format {
                file: "checkpoint bundle",
                offset: data.len() as u64,
                msg: format!("missing section {}", tag_name(slot)),
            })
        };
        let (_, params) = get(0)?;
        let (conf_at, conf) = get(1)?;
        let (_, stats) = get(2)?;
        let (_, bank) = get(3)?;
        let text = std::str::from_utf8(conf).map_err(|_| Error::Format {
            file: "checkpoint bundle",
            offset: conf_at as u64,
            msg: "config section is not UTF-8".into(),
        })?;
        let config = RunConfig::parse(text)?;
        let loaded = ParamStore::from_bytes(params)?;
        let mut model = init_model(&config.train)?;
        model.store.load_values(&loaded)?;
        let mut sr = Reader::new(stats, "checkpoint bundle stats section");
        let stats = NormStats::read(&mut sr)?;
        sr.finish()?;
        let mut br = Reader::new(bank, "checkpoint bundle bank section");
        let bank = EmbeddingBank::read(&mut br)?;
        br.finish()?;
        if bank.dim() != config.train.latent_dim {
            return Err(Error::shape("trainer", "bank width does not match the model"));
        }
        Ok(Bundle {
            config,
            model,
            stats,
            bank,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Bundle> {
        Bundle::from_bytes(&fs::read(path)?)
    }
}

fn tag_name(slot: usize) -> &'static str {
    ["PRMS", "CONF", "STAT", "BANK"][slot]
}
