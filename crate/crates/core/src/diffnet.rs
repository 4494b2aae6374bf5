//! Minimal differentiable-network substrate.
//!
//! Parameters live in a [`ParamStore`] as named dense matrices with gradient
//! accumulators and AdamW moments. Networks are compositions of [`Mlp`]s whose
//! forward pass records an [`MlpTape`]; `backward` consumes the tape, adds
//! parameter gradients into the store and returns the input gradient.
//!
//! Batches are row-major in meaning: one sample per matrix row. A layer maps
//! `X (n × in)` to `X·W + 1·b` with `W (in × out)` and `b (1 × out)`.
//!
//! # Checkpoint layout (`PCKP`, version 1, little-endian)
//!
//! ```text
//! magic "PCKP" | u32 version | u32 n_records
//! record: u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f64 data (row-major)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::util::Rng;

pub type Mat = DMatrix<f64>;

pub const CKPT_MAGIC: &[u8; 4] = b"PCKP";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Tensor {
    name: String,
    value: Mat,
    grad: Mat,
    m: Mat,
    v: Mat,
    step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Mat) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(
                "diffnet",
                format!("duplicate parameter name {name:?}"),
            ));
        }
        let (r, c) = value.shape();
        let id = self.tensors.len();
        self.tensors.push(Tensor {
            name: name.to_string(),
            value,
            grad: Mat::zeros(r, c),
            m: Mat::zeros(r, c),
            v: Mat::zeros(r, c),
            step: 0,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.tensors[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0].grad
    }

    pub fn add_grad(&mut self, id: ParamId, g: &Mat) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.grad.shape() != g.shape() {
            return Err(Error::shape(
                "diffnet",
                format!(
                    "gradient for {} has shape {:?}, parameter is {:?}",
                    t.name,
                    g.shape(),
                    t.grad.shape()
                ),
            ));
        }
        t.grad += g;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    pub fn n_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.value(*id).len()).sum()
    }

    /// Total number of stored scalars.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.len_u32(self.tensors.len());
        for t in &self.tensors {
            w.len_u32(t.name.len());
            w.bytes(t.name.as_bytes());
            let (r, c) = t.value.shape();
            w.u32(2);
            w.len_u32(r);
            w.len_u32(c);
            for i in 0..r {
                for j in 0..c {
                    w.f64(t.value[(i, j)]);
                }
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(data: &[u8]) -> Result<ParamStore> {
        let mut r = Reader::new(data, "checkpoint file");
        r.expect_magic(CKPT_MAGIC, "checkpoint")?;
        let at = r.offset() as usize;
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(r.error_at(at, format!("unsupported checkpoint version {version}")));
        }
        let n = r.count(12)?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let at = r.offset() as usize;
            let len = r.count(1)?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error_at(at, "parameter name is not utf-8"))?
                .to_string();
            let at = r.offset() as usize;
            let ndim = r.count(4)?;
            if !(1..=2).contains(&ndim) {
                return Err(r.error_at(at, format!("unsupported tensor rank {ndim}")));
            }
            let mut dims = [1usize; 2];
            for d in dims.iter_mut().take(ndim) {
                *d = r.u32()? as usize;
            }
            let count = dims[0]
                .checked_mul(dims[1])
                .filter(|c| c.saturating_mul(8) <= r.remaining())
                .ok_or_else(|| r.error("truncated: tensor data exceeds file"))?;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f64()?);
            }
            let value = Mat::from_row_slice(dims[0], dims[1], &data);
            store
                .add(&name, value)
                .map_err(|_| r.error_at(at, format!("duplicate parameter {name:?}")))?;
        }
        r.finish()?;
        Ok(store)
    }

    /// Copies values from `other`, which must hold exactly the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape(
                "diffnet",
                format!(
                    "checkpoint has {} tensors, model expects {}",
                    other.len(),
                    self.len()
                ),
            ));
        }
        for t in &other.tensors {
            let id = self.id(&t.name).ok_or_else(|| {
                Error::shape("diffnet", format!("unexpected parameter {:?}", t.name))
            })?;
            let mine = &mut self.tensors[id.0];
            if mine.value.shape() != t.value.shape() {
                return Err(Error::shape(
                    "diffnet",
                    format!(
                        "parameter {:?} has shape {:?}, model expects {:?}",
                        t.name,
                        t.value.shape(),
                        mine.value.shape()
                    ),
                ));
            }
            mine.value.copy_from(&t.value);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        ParamStore::from_bytes(&fs::read(path)?)
    }
}

/// `exp(u)` for `u <= 0` by range reduction and a degree-12 Taylor polynomial.
/// Branch-free; relative error a few ulps. Inputs below -700 return `exp(-700)`.
#[inline(always)]
fn exp_nonpositive(u: f64) -> f64 {
    #[allow(clippy::excessive_precision)]
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    #[allow(clippy::excessive_precision)]
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const INV_LN2: f64 = std::f64::consts::LOG2_E;
    // 1.5·2^52: adding it rounds to an integer held in the low mantissa bits.
    const ROUND: f64 = 6_755_399_441_055_744.0;
    let u = u.max(-700.0);
    let t = u * INV_LN2 + ROUND;
    let k = t - ROUND;
    let r = (u - k * LN2_HI) - k * LN2_LO;
    const C: [f64; 13] = [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ];
    let mut p = C[0];
    for c in &C[1..] {
        p = p * r + c;
    }
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    p * scale
}

/// `tanh` through [`exp_nonpositive`]; within a few ulps of `f64::tanh` at
/// roughly a third of the cost.
#[inline(always)]
pub fn fast_tanh(x: f64) -> f64 {
    let e = exp_nonpositive(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, m: &mut Mat) {
        if self == Activation::Tanh {
            for x in m.as_mut_slice() {
                *x = fast_tanh(*x);
            }
        }
    }

    /// Multiplies `g` in place by the derivative, given the activation output `y`.
    fn backprop(self, g: &mut Mat, y: &Mat) {
        if self == Activation::Tanh {
            g.zip_apply(y, |gi, yi| *gi *= 1.0 - yi * yi);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    /// Tanh hidden layers, identity output.
    pub fn new(widths: &[usize]) -> Self {
        MlpSpec {
            widths: widths.to_vec(),
            hidden: Activation::Tanh,
            output: Activation::Identity,
        }
    }

    pub fn with_output(mut self, act: Activation) -> Self {
        self.output = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::invalid(
                "diffnet",
                format!("MLP needs at least one layer of positive widths, got {:?}", self.widths),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 2 == self.widths.len() {
            self.output
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Weights uniform in `±gain/√fan_in`, zero biases.
    UniformFanIn { gain: f64 },
    Zero,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

/// Intermediates of one MLP forward pass. Consumed by `backward`.
#[derive(Debug, Default)]
pub struct MlpTape {
    inputs: Vec<Mat>,
    outputs: Vec<Mat>,
}

impl MlpTape {
    pub fn is_live(&self) -> bool {
        !self.inputs.is_empty()
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.outputs.clear();
    }
}

pub fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| {
        if bound > 0.0 {
            rng.gen_range(-bound..bound)
        } else {
            0.0
        }
    })
}

fn add_bias(y: &mut Mat, b: &Mat) {
    let rows = y.nrows();
    if rows == 0 {
        return;
    }
    for (col, &bj) in y.as_mut_slice().chunks_mut(rows).zip(b.iter()) {
        for v in col {
            *v += bj;
        }
    }
}

fn column_sums(g: &Mat) -> Mat {
    Mat::from_fn(1, g.ncols(), |_, j| g.column(j).sum())
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Mlp> {
        spec.validate()?;
        let mut layers = Vec::new();
        for (l, w) in spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = match init {
                Init::UniformFanIn { gain } => gain / (fan_in as f64).sqrt(),
                Init::Zero => 0.0,
            };
            let wid = store.add(
                &format!("{prefix}.{l}.w"),
                uniform_matrix(fan_in, fan_out, bound, rng),
            )?;
            let bid = store.add(&format!("{prefix}.{l}.b"), Mat::zeros(1, fan_out))?;
            layers.push((wid, bid));
        }
        Ok(Mlp { spec, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Sets the last affine layer to zero, making the network output identically zero.
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let &(w, b) = self.layers.last().unwrap();
        store.value_mut(w).fill(0.0);
        store.value_mut(b).fill(0.0);
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.spec.input_dim() {
            return Err(Error::shape(
                "diffnet",
                format!(
                    "layer 0 expects {} inputs, got {}",
                    self.spec.input_dim(),
                    x.ncols()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Result<(Mat, MlpTape)> {
        self.check_input(x)?;
        let mut tape = MlpTape::default();
        let mut h = x.clone();
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let mut y = &h * store.value(w);
            add_bias(&mut y, store.value(b));
            self.spec.activation(l).apply(&mut y);
            tape.inputs.push(h);
            tape.outputs.push(y.clone());
            h = y;
        }
        Ok((h, tape))
    }

    /// Forward pass without recording intermediates.
    pub fn eval(&self, store: &ParamStore, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let mut y = &h * store.value(w);
            add_bias(&mut y, store.value(b));
            self.spec.activation(l).apply(&mut y);
            h = y;
        }
        Ok(h)
    }

    /// Accumulates parameter gradients into `store` and returns `∂L/∂input`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        tape: &mut MlpTape,
        upstream: &Mat,
    ) -> Result<Mat> {
        self.check_tape(tape, upstream)?;
        let mut g = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let (w, b) = self.layers[l];
            self.spec.activation(l).backprop(&mut g, &tape.outputs[l]);
            let gw = tape.inputs[l].transpose() * &g;
            store.add_grad(w, &gw)?;
            store.add_grad(b, &column_sums(&g))?;
            g = &g * store.value(w).transpose();
        }
        tape.clear();
        Ok(g)
    }

    /// Input gradient only; parameter gradients are left untouched.
    pub fn backward_input(
        &self,
        store: &ParamStore,
        tape: &mut MlpTape,
        upstream: &Mat,
    ) -> Result<Mat> {
        self.check_tape(tape, upstream)?;
        let mut g = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            self.spec.activation(l).backprop(&mut g, &tape.outputs[l]);
            g = &g * store.value(self.layers[l].0).transpose();
        }
        tape.clear();
        Ok(g)
    }

    fn check_tape(&self, tape: &MlpTape, upstream: &Mat) -> Result<()> {
        if !tape.is_live() {
            return Err(Error::invalid(
                "diffnet",
                "backward on a cleared or already consumed tape",
            ));
        }
        let out = tape.outputs.last().unwrap();
        if upstream.shape() != out.shape() {
            return Err(Error::shape(
                "diffnet",
                format!(
                    "upstream gradient {:?} does not match output {:?}",
                    upstream.shape(),
                    out.shape()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update of `ids` from their accumulated gradients.
    pub fn step(&self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            if !store.grad(id).iter().all(|g| g.is_finite()) {
                return Err(Error::non_finite(
                    "diffnet",
                    format!("gradient of {}", store.name(id)),
                ));
            }
        }
        for &id in ids {
            let t = &mut store.tensors[id.0];
            t.step += 1;
            let bc1 = 1.0 - self.beta1.powi(t.step as i32);
            let bc2 = 1.0 - self.beta2.powi(t.step as i32);
            let decay = 1.0 - self.lr * self.weight_decay;
            for i in 0..t.value.len() {
                let g = t.grad[i];
                t.m[i] = self.beta1 * t.m[i] + (1.0 - self.beta1) * g;
                t.v[i] = self.beta2 * t.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = t.m[i] / bc1;
                let vhat = t.v[i] / bc2;
                t.value[i] = t.value[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Where a gradient check disagreed most.
#[derive(Debug, Clone, PartialEq)]
pub struct FdCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: Option<FdCoord>,
    pub checked: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub const FD_EPS: f64 = 1e-5;
/// Denominator floor so coordinates with vanishing gradient compare absolutely.
pub const FD_REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// Central-difference check of `analytic` (the gradient of `f` at `x`) on up to
/// `n_coords` randomly chosen coordinates (all of them if there are fewer).
pub fn fd_check_vec<F>(
    x: &[f64],
    analytic: &[f64],
    mut f: F,
    eps: f64,
    n_coords: usize,
    rng: &mut Rng,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("diffnet", "fd epsilon must be positive"));
    }
    if x.len() != analytic.len() {
        return Err(Error::shape("diffnet", "gradient length differs from point"));
    }
    let coords = choose_coords(x.len(), n_coords, rng);
    let mut p = x.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for i in coords {
        let orig = p[i];
        p[i] = orig + eps;
        let fp = f(&p)?;
        p[i] = orig - eps;
        let fm = f(&p)?;
        p[i] = orig;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::non_finite("diffnet", "loss during finite differences"));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst = Some(FdCoord {
                    param: "x".into(),
                    index: i,
                    analytic: analytic[i],
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn choose_coords(total: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    if total <= n {
        (0..total).collect()
    } else {
        let mut v = rand::seq::index::sample(rng, total, n).into_vec();
        v.sort_unstable();
        v
    }
}

/// Central-difference check of the gradients currently accumulated in `store`
/// for `ids`, against the scalar loss `f`. Parameter values are restored.
pub fn fd_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut f: F,
    eps: f64,
    n_coords: usize,
    rng: &mut Rng,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("diffnet", "fd epsilon must be positive"));
    }
    let mut flat: Vec<(ParamId, usize)> = Vec::new();
    for &id in ids {
        for i in 0..store.value(id).len() {
            flat.push((id, i));
        }
    }
    let coords = choose_coords(flat.len(), n_coords, rng);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for c in coords {
        let (id, i) = flat[c];
        let orig = store.value(id)[i];
        store.value_mut(id)[i] = orig + eps;
        let fp = f(store);
        store.value_mut(id)[i] = orig - eps;
        let fm = f(store);
        store.value_mut(id)[i] = orig;
        let (fp, fm) = (fp?, fm?);
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::non_finite("diffnet", "loss during finite differences"));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let analytic = store.grad(id)[i];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(FdCoord {
                param: store.name(id).to_string(),
                index: i,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;

    #[test]
    fn fast_tanh_tracks_libm() {
        let mut x = -30.0;
        while x < 30.0 {
            assert!((fast_tanh(x) - x.tanh()).abs() < 1e-15, "{x}");
            x += 0.0137;
        }
        assert_eq!(fast_tanh(800.0), 1.0);
        assert_eq!(fast_tanh(-800.0), -1.0);
        assert_eq!(fast_tanh(0.0), 0.0);
    }

    fn random_net(store: &mut ParamStore, rng: &mut Rng) -> Mlp {
        Mlp::new(
            store,
            "net",
            MlpSpec::new(&[8, 8, 8]),
            Init::UniformFanIn { gain: 1.0 },
            rng,
        )
        .unwrap()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "z",
            MlpSpec::new(&[3, 5, 2]),
            Init::Zero,
            &mut rng_from(0),
        )
        .unwrap();
        let x = Mat::from_element(4, 3, 0.7);
        assert_eq!(mlp.eval(&store, &x).unwrap(), Mat::zeros(4, 2));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "id",
            MlpSpec::new(&[3, 3]),
            Init::Zero,
            &mut rng_from(0),
        )
        .unwrap();
        let w = mlp.param_ids()[0];
        *store.value_mut(w) = Mat::identity(3, 3);
        let x = Mat::from_row_slice(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, -0.25]);
        assert_eq!(mlp.eval(&store, &x).unwrap(), x);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let mut rng = rng_from(1);
        let mut store = ParamStore::new();
        let mlp = random_net(&mut store, &mut rng);
        let x = uniform_matrix(5, 8, 1.0, &mut rng);
        let (y, _) = mlp.forward(&store, &x).unwrap();
        let ids = mlp.param_ids();
        let (w0, b0, w1, b1) = (
            store.value(ids[0]),
            store.value(ids[1]),
            store.value(ids[2]),
            store.value(ids[3]),
        );
        for n in 0..5 {
            let mut hidden = [0.0; 8];
            for (j, hj) in hidden.iter_mut().enumerate() {
                let mut s = b0[(0, j)];
                for i in 0..8 {
                    s += x[(n, i)] * w0[(i, j)];
                }
                *hj = s.tanh();
            }
            for j in 0..8 {
                let mut s = b1[(0, j)];
                for (i, hi) in hidden.iter().enumerate() {
                    s += hi * w1[(i, j)];
                }
                assert!((y[(n, j)] - s).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let mlp = random_net(&mut store, &mut rng_from(0));
        let err = mlp.eval(&store, &Mat::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "lin",
            MlpSpec::new(&[3, 2]),
            Init::UniformFanIn { gain: 1.0 },
            &mut rng_from(2),
        )
        .unwrap();
        let x = Mat::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        let g = Mat::from_row_slice(1, 2, &[0.5, -3.0]);
        let (_, mut tape) = mlp.forward(&store, &x).unwrap();
        mlp.backward(&mut store, &mut tape, &g).unwrap();
        let w = mlp.param_ids()[0];
        assert_eq!(store.grad(w), &(x.transpose() * &g));
    }

    #[test]
    fn gradients_accumulate_and_tapes_are_single_use() {
        let mut rng = rng_from(3);
        let mut store = ParamStore::new();
        let mlp = random_net(&mut store, &mut rng);
        let x = uniform_matrix(4, 8, 1.0, &mut rng);
        let g = uniform_matrix(4, 8, 1.0, &mut rng);
        let (_, mut tape) = mlp.forward(&store, &x).unwrap();
        mlp.backward(&mut store, &mut tape, &g).unwrap();
        let once = store.grad(mlp.param_ids()[0]).clone();
        assert!(mlp.backward(&mut store, &mut tape, &g).is_err());
        let (_, mut tape) = mlp.forward(&store, &x).unwrap();
        mlp.backward(&mut store, &mut tape, &g).unwrap();
        let twice = store.grad(mlp.param_ids()[0]);
        assert!((twice - &once * 2.0).abs().max() < 1e-14);
    }

    #[test]
    fn random_net_gradient_matches_finite_differences() {
        let mut rng = rng_from(4);
        let mut store = ParamStore::new();
        let mlp = random_net(&mut store, &mut rng);
        let x = uniform_matrix(6, 8, 1.0, &mut rng);
        let target = uniform_matrix(6, 8, 1.0, &mut rng);
        let loss = |s: &ParamStore| -> Result<f64> {
            let y = mlp.eval(s, &x)?;
            Ok(0.5 * (y - &target).norm_squared())
        };
        let (y, mut tape) = mlp.forward(&store, &x).unwrap();
        mlp.backward(&mut store, &mut tape, &(y - &target)).unwrap();
        let ids = mlp.param_ids();
        let report = fd_check(&mut store, &ids, loss, FD_EPS, 200, &mut rng).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert_eq!(report.checked, 144);
    }

    #[test]
    fn fd_check_quadratic_is_machine_precise() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 - 25.0) / 7.0).collect();
        let f = |p: &[f64]| Ok(0.5 * p.iter().map(|v| v * v).sum::<f64>());
        let r = fd_check_vec(&x, &x, f, FD_EPS, 200, &mut rng_from(0)).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn fd_check_flags_corrupted_coordinate() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 + 0.1).collect();
        let mut g = x.clone();
        g[13] += 0.5;
        let f = |p: &[f64]| Ok(0.5 * p.iter().map(|v| v * v).sum::<f64>());
        let r = fd_check_vec(&x, &g, f, FD_EPS, 200, &mut rng_from(0)).unwrap();
        assert!(!r.passes(1e-4));
        assert_eq!(r.worst.unwrap().index, 13);
    }

    #[test]
    fn fd_check_rejects_non_finite_loss() {
        let x = vec![1.0, 2.0];
        let f = |_: &[f64]| Ok(f64::NAN);
        assert!(fd_check_vec(&x, &x, f, FD_EPS, 10, &mut rng_from(0)).is_err());
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_noop() {
        let mut store = ParamStore::new();
        let id = store.add("p", Mat::from_element(2, 2, 1.5)).unwrap();
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut store, &[id]).unwrap();
        assert_eq!(store.value(id), &Mat::from_element(2, 2, 1.5));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Mat::from_row_slice(1, 3, &[0.0, 0.0, 0.0])).unwrap();
        *store.grad_mut(id) = Mat::from_row_slice(1, 3, &[2.0, -0.5, 1e-3]);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut store, &[id]).unwrap();
        let v = store.value(id);
        assert!((v[0] + 1e-3).abs() < 1e-9);
        assert!((v[1] - 1e-3).abs() < 1e-9);
        assert!((v[2] + 1e-3).abs() < 1e-7);
    }

    #[test]
    fn adamw_rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Mat::zeros(1, 1)).unwrap();
        store.grad_mut(id)[0] = f64::NAN;
        assert!(AdamW::default().step(&mut store, &[id]).is_err());
    }

    #[test]
    fn adamw_decreases_convex_quadratic() {
        let mut store = ParamStore::new();
        let target = Mat::from_row_slice(1, 4, &[1.0, -2.0, 0.5, 3.0]);
        let id = store.add("p", Mat::zeros(1, 4)).unwrap();
        let opt = AdamW {
            lr: 0.05,
            ..AdamW::default()
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let diff = store.value(id) - &target;
            losses.push(0.5 * diff.norm_squared());
            store.zero_grads();
            *store.grad_mut(id) = diff;
            opt.step(&mut store, &[id]).unwrap();
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let mut rng = rng_from(9);
        let mut store = ParamStore::new();
        random_net(&mut store, &mut rng);
        let bytes = store.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert!(back.values_equal(&store));
        assert_eq!(back.to_bytes(), bytes);

        let mut other = ParamStore::new();
        Mlp::new(
            &mut other,
            "net",
            MlpSpec::new(&[8, 4, 8]),
            Init::Zero,
            &mut rng,
        )
        .unwrap();
        assert!(other.load_values(&store).is_err());
        let mut same = ParamStore::new();
        random_net(&mut same, &mut rng_from(10));
        same.load_values(&back).unwrap();
        assert!(same.values_equal(&store));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Mat::zeros(1, 1)).unwrap();
        assert!(store.add("a", Mat::zeros(1, 1)).is_err());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut store = ParamStore::new();
        random_net(&mut store, &mut rng_from(1));
        let bytes = store.to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(ParamStore::from_bytes(&bad).is_err());
    }
}
