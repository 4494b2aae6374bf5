//! Datasets, normalization statistics, context sampling and two-view batches.
//!
//! # Dataset file layout (`PREP`, version 1, little-endian)
//!
//! ```text
//! header      magic "PREP" | u32 version=1 | u32 K | u32 T | u32 n_traj
//! trajectory  f64 knob
//!  (n_traj×)  f32 states[T×2]   row-major (x_t, v_t)
//!             f32 actions[T]
//!             f32 rewards[T×K]  row-major
//!             f32 returns[K]
//! stats       f64 state_mean[2] | f64 state_std[2] | f64 action_mean | f64 action_std
//!             f64 return_mean[K] | f64 return_std[K]
//! splits      u32 n_train | u32 train[n_train] | u32 n_test | u32 test[n_test]
//! ```
//!
//! Trajectory fields are stored as `f32`. [`Dataset::build`] rounds every field
//! through `f32` up front, so a dataset in memory is exactly what a save/load
//! round trip produces.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::env::{
    knob_grid, population, EnvConfig, State, Trajectory, Transition, ACTION_DIM, N_OBJECTIVES,
    STATE_DIM,
};
use crate::error::{Error, Result};
use crate::util::{quantize, rng_from, Rng};

pub const MAGIC: &[u8; 4] = b"PREP";
pub const VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-6;
/// Width of a normalized (state, action) pair.
pub const PAIR_DIM: usize = STATE_DIM + ACTION_DIM;

pub type Pair = [f64; PAIR_DIM];

/// Population size and held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_knobs: usize,
    pub traj_per_knob: usize,
    /// Every `holdout_every`-th knob goes to the test split; 0 disables it.
    pub holdout_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_knobs: 40,
            traj_per_knob: 20,
            holdout_every: 5,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_knobs < 2 || self.traj_per_knob == 0 {
            return Err(Error::invalid(
                "dataio",
                "need at least 2 knobs and 1 trajectory per knob",
            ));
        }
        Ok(())
    }
}

/// Rolls out the knob population with `env.seed` and builds the dataset.
pub fn generate_dataset(env: &EnvConfig, data: &DataConfig) -> Result<Dataset> {
    env.validate()?;
    data.validate()?;
    let mut rng = rng_from(env.seed);
    let pop = population(env, &knob_grid(data.n_knobs), data.traj_per_knob, &mut rng)?;
    Dataset::build(&pop, data.holdout_every)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub state_mean: [f64; STATE_DIM],
    pub state_std: [f64; STATE_DIM],
    pub action_mean: f64,
    pub action_std: f64,
    pub return_mean: [f64; N_OBJECTIVES],
    pub return_std: [f64; N_OBJECTIVES],
}

impl NormStats {
    pub fn normalize_state(&self, s: State) -> [f64; STATE_DIM] {
        let raw = s.as_array();
        std::array::from_fn(|d| (raw[d] - self.state_mean[d]) / self.state_std[d])
    }

    pub fn denormalize_state(&self, s: [f64; STATE_DIM]) -> State {
        State {
            x: s[0] * self.state_std[0] + self.state_mean[0],
            v: s[1] * self.state_std[1] + self.state_mean[1],
        }
    }

    pub fn normalize_action(&self, a: f64) -> f64 {
        (a - self.action_mean) / self.action_std
    }

    pub fn denormalize_action(&self, a: f64) -> f64 {
        a * self.action_std + self.action_mean
    }

    pub fn normalize_return(&self, k: usize, r: f64) -> f64 {
        (r - self.return_mean[k]) / self.return_std[k]
    }

    pub fn denormalize_return(&self, k: usize, r: f64) -> f64 {
        r * self.return_std[k] + self.return_mean[k]
    }

    pub fn normalize_returns(&self, r: &[f64; N_OBJECTIVES]) -> [f64; N_OBJECTIVES] {
        std::array::from_fn(|k| self.normalize_return(k, r[k]))
    }

    pub fn normalize_pair(&self, t: &Transition) -> Pair {
        let s = self.normalize_state(t.state);
        [s[0], s[1], self.normalize_action(t.action)]
    }

    /// Ten little-endian `f64`s in field order.
    pub fn write(&self, w: &mut Writer) {
        for x in self
            .state_mean
            .iter()
            .chain(&self.state_std)
            .chain([&self.action_mean, &self.action_std])
            .chain(&self.return_mean)
            .chain(&self.return_std)
        {
            w.f64(*x);
        }
    }

    pub fn read(r: &mut Reader) -> Result<NormStats> {
        let at = r.offset() as usize;
        let mut f = [0.0; 2 * STATE_DIM + 2 + 2 * N_OBJECTIVES];
        for x in f.iter_mut() {
            *x = r.f64()?;
        }
        let stats = NormStats {
            state_mean: [f[0], f[1]],
            state_std: [f[2], f[3]],
            action_mean: f[4],
            action_std: f[5],
            return_mean: [f[6], f[7]],
            return_std: [f[8], f[9]],
        };
        if !stats.all_valid() {
            return Err(r.error_at(at, "invalid normalization statistics"));
        }
        Ok(stats)
    }

    fn all_valid(&self) -> bool {
        let stds = self
            .state_std
            .iter()
            .chain([&self.action_std])
            .chain(self.return_std.iter());
        let means = self
            .state_mean
            .iter()
            .chain([&self.action_mean])
            .chain(self.return_mean.iter());
        stds.clone().all(|s| s.is_finite() && *s > 0.0) && means.clone().all(|m| m.is_finite())
    }
}

struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn new() -> Self {
        Moments {
            n: 0.0,
            sum: 0.0,
            sum_sq: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    /// Population mean and floored standard deviation.
    fn finish(&self) -> (f64, f64) {
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        (mean, var.sqrt().max(STD_FLOOR))
    }
}

/// Per-dimension mean/std over all transitions and over the return vectors.
pub fn compute_norm_stats<'a, I>(trajs: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    let mut states = [Moments::new(), Moments::new()];
    let mut action = Moments::new();
    let mut returns = [Moments::new(), Moments::new()];
    let mut count = 0usize;
    for t in trajs {
        count += 1;
        for tr in &t.transitions {
            let s = tr.state.as_array();
            for d in 0..STATE_DIM {
                states[d].push(s[d]);
            }
            action.push(tr.action);
        }
        for k in 0..N_OBJECTIVES {
            returns[k].push(t.returns[k]);
        }
    }
    if count == 0 {
        return Err(Error::invalid("dataio", "no trajectories for normalization"));
    }
    if count < 2 {
        return Err(Error::invalid(
            "dataio",
            "normalization needs at least 2 trajectories",
        ));
    }
    if action.n == 0.0 {
        return Err(Error::invalid("dataio", "trajectories contain no transitions"));
    }
    let s0 = states[0].finish();
    let s1 = states[1].finish();
    let a = action.finish();
    let r0 = returns[0].finish();
    let r1 = returns[1].finish();
    Ok(NormStats {
        state_mean: [s0.0, s1.0],
        state_std: [s0.1, s1.1],
        action_mean: a.0,
        action_std: a.1,
        return_mean: [r0.0, r1.0],
        return_std: [r0.1, r1.1],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub stats: NormStats,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn quantize_trajectory(t: &Trajectory) -> Trajectory {
    Trajectory {
        knob: t.knob,
        transitions: t
            .transitions
            .iter()
            .map(|tr| Transition {
                state: State {
                    x: quantize(tr.state.x),
                    v: quantize(tr.state.v),
                },
                action: quantize(tr.action),
                reward: tr.reward.map(quantize),
            })
            .collect(),
        returns: t.returns.map(quantize),
    }
}

/// Trajectory indices whose knob is held out: every `holdout_every`-th distinct
/// knob value (sorted), starting from the middle of the first block so both
/// ends of the knob range stay in training.
pub fn holdout_split(trajs: &[Trajectory], holdout_every: usize) -> (Vec<usize>, Vec<usize>) {
    let mut knobs: Vec<f64> = trajs.iter().map(|t| t.knob).collect();
    knobs.sort_by(f64::total_cmp);
    knobs.dedup();
    let held: Vec<f64> = if holdout_every == 0 {
        Vec::new()
    } else {
        knobs
            .iter()
            .enumerate()
            .filter(|(i, _)| i % holdout_every == holdout_every / 2)
            .map(|(_, &k)| k)
            .collect()
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, t) in trajs.iter().enumerate() {
        if held.contains(&t.knob) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

impl Dataset {
    /// Quantizes trajectories to file precision, splits by knob, and computes
    /// normalization statistics on the train split.
    pub fn build(trajectories: &[Trajectory], holdout_every: usize) -> Result<Dataset> {
        let trajectories: Vec<Trajectory> = trajectories.iter().map(quantize_trajectory).collect();
        let horizon = trajectories.first().map(Trajectory::len).unwrap_or(0);
        if trajectories.iter().any(|t| t.len() != horizon || t.is_empty()) {
            return Err(Error::invalid(
                "dataio",
                "trajectories must share a nonzero horizon",
            ));
        }
        let (train, test) = holdout_split(&trajectories, holdout_every);
        let stats = compute_norm_stats(train.iter().map(|&i| &trajectories[i]))?;
        Ok(Dataset {
            trajectories,
            stats,
            train,
            test,
        })
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.first().map(Trajectory::len).unwrap_or(0)
    }

    pub fn normalized_returns(&self, idx: usize) -> [f64; N_OBJECTIVES] {
        self.stats.normalize_returns(&self.trajectories[idx].returns)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.len_u32(N_OBJECTIVES);
        w.len_u32(self.horizon());
        w.len_u32(self.trajectories.len());
        for t in &self.trajectories {
            w.f64(t.knob);
            for tr in &t.transitions {
                w.f32(tr.state.x as f32);
                w.f32(tr.state.v as f32);
            }
            for tr in &t.transitions {
                w.f32(tr.action as f32);
            }
            for tr in &t.transitions {
                for r in tr.reward {
                    w.f32(r as f32);
                }
            }
            for r in t.returns {
                w.f32(r as f32);
            }
        }
        self.stats.write(&mut w);
        for list in [&self.train, &self.test] {
            w.len_u32(list.len());
            for &i in list {
                w.len_u32(i);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(data, "dataset file");
        r.expect_magic(MAGIC, "dataset")?;
        let at = r.offset() as usize;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error_at(at, format!("unsupported dataset version {version}")));
        }
        let at = r.offset() as usize;
        let k = r.u32()? as usize;
        if k != N_OBJECTIVES {
            return Err(r.error_at(at, format!("unsupported objective count {k}")));
        }
        let at = r.offset() as usize;
        let horizon = r.u32()? as usize;
        if horizon == 0 {
            return Err(r.error_at(at, "zero horizon"));
        }
        let block = 8 + 4 * (horizon * (STATE_DIM + ACTION_DIM + k) + k);
        let n = r.count(block)?;
        let mut trajectories = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset() as usize;
            let knob = r.f64()?;
            if !(0.0..=1.0).contains(&knob) {
                return Err(r.error_at(at, format!("knob {knob} outside [0, 1]")));
            }
            let mut states = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let x = r.f32()? as f64;
                let v = r.f32()? as f64;
                states.push(State { x, v });
            }
            let mut actions = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                actions.push(r.f32()? as f64);
            }
            let mut rewards = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                rewards.push([r.f32()? as f64, r.f32()? as f64]);
            }
            let returns = [r.f32()? as f64, r.f32()? as f64];
            let transitions = (0..horizon)
                .map(|t| Transition {
                    state: states[t],
                    action: actions[t],
                    reward: rewards[t],
                })
                .collect();
            trajectories.push(Trajectory {
                knob,
                transitions,
                returns,
            });
        }
        let stats = NormStats::read(&mut r)?;
        let mut seen = vec![false; n];
        let mut lists = [Vec::new(), Vec::new()];
        for list in lists.iter_mut() {
            let len = r.count(4)?;
            for _ in 0..len {
                let at = r.offset() as usize;
                let i = r.u32()? as usize;
                if i >= n {
                    return Err(r.error_at(at, format!("split index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(r.error_at(at, format!("split index {i} listed twice")));
                }
                list.push(i);
            }
        }
        r.finish()?;
        let [train, test] = lists;
        Ok(Dataset {
            trajectories,
            stats,
            train,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pub pairs: Vec<Pair>,
    pub source: usize,
}

impl ContextSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `len` normalized pairs drawn uniformly with replacement from one trajectory.
pub fn sample_context(
    traj: &Trajectory,
    source: usize,
    stats: &NormStats,
    len: usize,
    rng: &mut Rng,
) -> Result<ContextSet> {
    if len == 0 {
        return Err(Error::invalid("dataio", "context length must be positive"));
    }
    if traj.is_empty() {
        return Err(Error::invalid("dataio", "cannot sample from an empty trajectory"));
    }
    let pairs = (0..len)
        .map(|_| stats.normalize_pair(&traj.transitions[rng.gen_range(0..traj.len())]))
        .collect();
    Ok(ContextSet { pairs, source })
}

/// One normalized (state, action) query from a trajectory.
pub fn sample_query(traj: &Trajectory, stats: &NormStats, rng: &mut Rng) -> Pair {
    stats.normalize_pair(&traj.transitions[rng.gen_range(0..traj.len())])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewBatch {
    /// Views `2i` and `2i + 1` (0-based) share a source trajectory.
    pub contexts: Vec<ContextSet>,
    /// Normalized return labels, duplicated per view.
    pub returns: Vec<[f64; N_OBJECTIVES]>,
    pub queries: Vec<Pair>,
}

impl TwoViewBatch {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// Two independent views and queries for each of the given trajectories.
pub fn two_view_batch_for(
    dataset: &Dataset,
    sources: &[usize],
    context_len: usize,
    rng: &mut Rng,
) -> Result<TwoViewBatch> {
    let mut batch = TwoViewBatch {
        contexts: Vec::with_capacity(2 * sources.len()),
        returns: Vec::with_capacity(2 * sources.len()),
        queries: Vec::with_capacity(2 * sources.len()),
    };
    for &src in sources {
        let traj = &dataset.trajectories[src];
        let ret = dataset.normalized_returns(src);
        for _ in 0..2 {
            batch
                .contexts
                .push(sample_context(traj, src, &dataset.stats, context_len, rng)?);
            batch.queries.push(sample_query(traj, &dataset.stats, rng));
            batch.returns.push(ret);
        }
    }
    Ok(batch)
}

/// Samples `n_traj` train trajectories without replacement and builds their two-view batch.
pub fn two_view_batch(
    dataset: &Dataset,
    n_traj: usize,
    context_len: usize,
    rng: &mut Rng,
) -> Result<TwoViewBatch> {
    if n_traj == 0 || n_traj > dataset.train.len() {
        return Err(Error::invalid(
            "dataio",
            format!(
                "batch of {n_traj} trajectories exceeds train split of {}",
                dataset.train.len()
            ),
        ));
    }
    let picks: Vec<usize> = index::sample(rng, dataset.train.len(), n_traj)
        .into_iter()
        .map(|i| dataset.train[i])
        .collect();
    two_view_batch_for(dataset, &picks, context_len, rng)
}

/// Shuffled train indices chunked into batches of `batch` (last chunk may be short).
pub fn epoch_batches(train: &[usize], batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}
