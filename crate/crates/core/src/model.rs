//! GRU temporal model, pooled L2-normalized quality embedding, and MLP
//! projector, with reverse-mode gradients through the whole chain.
//!
//! Cell update, per step:
//!
//! ```text
//! r = sigmoid(W_r y + U_r h + b_r)
//! u = sigmoid(W_z y + U_z h + b_z)
//! n = tanh(W_n y + b_n + r * (U_n h + b_hn))
//! h' = (1 - u) * n + u * h
//! ```
//!
//! Inputs are first standardized, `y = (x - shift) * scale`, with fixed
//! per-dimension statistics. The embedding is the temporal mean of the states
//! divided by its L2 norm; the projector is `W2 relu(W1 h + b1) + b2`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CVQM";
pub const CHECKPOINT_VERSION: u32 = 1;

const DEGENERATE_NORM: f64 = 1e-12;

/// Dense row-major matrix; vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { rows, cols, data }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out += self * x`
    fn gemv_acc(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(i), x);
        }
    }

    /// `out += self^T * v`
    fn gemv_t_acc(&self, v: &[f64], out: &mut [f64]) {
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += vi * m;
            }
        }
    }

    /// `self += v x^T`
    fn outer_acc(&mut self, v: &[f64], x: &[f64]) {
        let cols = self.cols;
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (m, &xj) in self.data[i * cols..(i + 1) * cols].iter_mut().zip(x) {
                *m += vi * xj;
            }
        }
    }

    fn add_vec(&mut self, v: &[f64]) {
        for (m, &x) in self.data.iter_mut().zip(v) {
            *m += x;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_r: Mat,
    pub w_z: Mat,
    pub w_n: Mat,
    pub u_r: Mat,
    pub u_z: Mat,
    pub u_n: Mat,
    pub b_r: Mat,
    pub b_z: Mat,
    pub b_n: Mat,
    pub b_hn: Mat,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Mat::zeros(hidden_dim, input_dim);
        let u = || Mat::zeros(hidden_dim, hidden_dim);
        let b = || Mat::zeros(hidden_dim, 1);
        Self { w_r: w(), w_z: w(), w_n: w(), u_r: u(), u_z: u(), u_n: u(), b_r: b(), b_z: b(), b_n: b(), b_hn: b() }
    }

    pub fn input_dim(&self) -> usize {
        self.w_r.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_r.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl ProjectorParams {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            w1: Mat::zeros(hidden, in_dim),
            b1: Mat::zeros(hidden, 1),
            w2: Mat::zeros(out_dim, hidden),
            b2: Mat::zeros(out_dim, 1),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w2.rows
    }
}

/// Layer sizes of a [`SequenceModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub projector_hidden: usize,
    pub output_dim: usize,
}

/// Fixed per-dimension input standardization; not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self { shift: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Mean and inverse standard deviation over every frame of `seqs`.
    /// Constant dimensions get scale 1.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>, dim: usize) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for seq in seqs {
            if seq.dim() != dim {
                return Err(Error::DimensionMismatch(format!("features have dim {}, expected {dim}", seq.dim())));
            }
            for t in 0..seq.frames() {
                for (j, &v) in seq.row(t).iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
            }
            count += seq.frames();
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = count as f64;
        let shift: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&shift)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-20 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { shift, scale })
    }
}

/// Trainable GRU and projector plus the fixed input standardization.
/// Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    pub input_norm: InputNorm,
    pub gru: GruParams,
    pub projector: ProjectorParams,
}

pub type Gradients = SequenceModel;

/// Quality embedding `h` and projector output `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
}

impl SequenceModel {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            input_norm: InputNorm::identity(dims.input_dim),
            gru: GruParams::zeros(dims.input_dim, dims.hidden_dim),
            projector: ProjectorParams::zeros(dims.hidden_dim, dims.projector_hidden, dims.output_dim),
        }
    }

    /// Matrices uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let mut m = Self::zeros(dims);
        for (name, t) in m.tensors_mut() {
            if !name.starts_with('b') {
                *t = Mat::uniform(t.rows, t.cols, 1.0 / (t.cols as f64).sqrt(), rng);
            }
        }
        m
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.gru.input_dim(),
            hidden_dim: self.gru.hidden_dim(),
            projector_hidden: self.projector.w1.rows,
            output_dim: self.projector.out_dim(),
        }
    }

    /// Trainable tensors, in checkpoint order.
    pub fn tensors(&self) -> [(&'static str, &Mat); 14] {
        let g = &self.gru;
        let p = &self.projector;
        [
            ("gru.w_r", &g.w_r),
            ("gru.w_z", &g.w_z),
            ("gru.w_n", &g.w_n),
            ("gru.u_r", &g.u_r),
            ("gru.u_z", &g.u_z),
            ("gru.u_n", &g.u_n),
            ("gru.b_r", &g.b_r),
            ("gru.b_z", &g.b_z),
            ("gru.b_n", &g.b_n),
            ("gru.b_hn", &g.b_hn),
            ("proj.w1", &p.w1),
            ("proj.b1", &p.b1),
            ("proj.w2", &p.w2),
            ("proj.b2", &p.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Mat); 14] {
        let g = &mut self.gru;
        let p = &mut self.projector;
        [
            ("gru.w_r", &mut g.w_r),
            ("gru.w_z", &mut g.w_z),
            ("gru.w_n", &mut g.w_n),
            ("gru.u_r", &mut g.u_r),
            ("gru.u_z", &mut g.u_z),
            ("gru.u_n", &mut g.u_n),
            ("gru.b_r", &mut g.b_r),
            ("gru.b_z", &mut g.b_z),
            ("gru.b_n", &mut g.b_n),
            ("gru.b_hn", &mut g.b_hn),
            ("proj.w1", &mut p.w1),
            ("proj.b1", &mut p.b1),
            ("proj.w2", &mut p.w2),
            ("proj.b2", &mut p.b2),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.data.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// Rounds every parameter through f32, matching a checkpoint round trip.
    pub fn quantized_f32(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let norm = &mut out.input_norm;
        norm.shift.iter_mut().chain(norm.scale.iter_mut()).for_each(|v| *v = *v as f32 as f64);
        out
    }

    pub fn embed(&self, features: &FeatureSequence) -> Result<Embedding> {
        let mut pass = ForwardPass::new(self);
        pass.forward(features)
    }
}

/// Per-step activations retained for backpropagation through time.
#[derive(Debug, Clone)]
pub struct GruTrace {
    pub inputs: Vec<Vec<f64>>,
    /// `states[0]` is the initial state; `states[t]` follows input `t - 1`.
    pub states: Vec<Vec<f64>>,
    reset: Vec<Vec<f64>>,
    update: Vec<Vec<f64>>,
    candidate: Vec<Vec<f64>>,
    recurrent_candidate: Vec<Vec<f64>>,
}

fn feature_rows(params: &GruParams, norm: &InputNorm, features: &FeatureSequence) -> Result<Vec<Vec<f64>>> {
    if features.dim() != params.input_dim() || norm.shift.len() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "features have dim {}, GRU expects {}",
            features.dim(),
            params.input_dim()
        )));
    }
    Ok((0..features.frames())
        .map(|t| {
            features.row(t).iter().zip(norm.shift.iter().zip(&norm.scale)).map(|(&v, (m, s))| (v as f64 - m) * s).collect()
        })
        .collect())
}

pub fn gru_trace(params: &GruParams, inputs: Vec<Vec<f64>>, h0: Option<&[f64]>) -> Result<GruTrace> {
    let d = params.hidden_dim();
    let h0 = match h0 {
        Some(h) if h.len() != d => {
            return Err(Error::DimensionMismatch(format!("initial state has dim {}, expected {d}", h.len())))
        }
        Some(h) => h.to_vec(),
        None => vec![0.0; d],
    };
    let steps = inputs.len();
    let mut trace = GruTrace {
        inputs,
        states: Vec::with_capacity(steps + 1),
        reset: Vec::with_capacity(steps),
        update: Vec::with_capacity(steps),
        candidate: Vec::with_capacity(steps),
        recurrent_candidate: Vec::with_capacity(steps),
    };
    trace.states.push(h0);
    for t in 0..steps {
        let y = &trace.inputs[t];
        let h = &trace.states[t];
        let mut r = params.b_r.data.clone();
        params.w_r.gemv_acc(y, &mut r);
        params.u_r.gemv_acc(h, &mut r);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut u = params.b_z.data.clone();
        params.w_z.gemv_acc(y, &mut u);
        params.u_z.gemv_acc(h, &mut u);
        u.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut hn = params.b_hn.data.clone();
        params.u_n.gemv_acc(h, &mut hn);
        let mut n = params.b_n.data.clone();
        params.w_n.gemv_acc(y, &mut n);
        for i in 0..d {
            n[i] = (n[i] + r[i] * hn[i]).tanh();
        }
        let next: Vec<f64> = (0..d).map(|i| (1.0 - u[i]) * n[i] + u[i] * h[i]).collect();
        trace.states.push(next);
        trace.reset.push(r);
        trace.update.push(u);
        trace.candidate.push(n);
        trace.recurrent_candidate.push(hn);
    }
    Ok(trace)
}

/// Hidden states `h^(1..T)` for raw (unstandardized) features; `h0`
/// defaults to zero.
pub fn gru_forward(params: &GruParams, features: &FeatureSequence, h0: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
    let inputs = feature_rows(params, &InputNorm::identity(params.input_dim()), features)?;
    let mut trace = gru_trace(params, inputs, h0)?;
    trace.states.remove(0);
    Ok(trace.states)
}

/// Temporal mean followed by L2 normalization; also returns the pre-normalization norm.
pub fn pool_and_normalize(states: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let first = states.first().ok_or(Error::TooFewFrames { needed: 1, available: 0 })?;
    let inv_t = 1.0 / states.len() as f64;
    let mut mean = vec![0.0; first.len()];
    for s in states {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_t);
    let norm = dot(&mean, &mean).sqrt();
    if norm < DEGENERATE_NORM {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((mean.into_iter().map(|m| m / norm).collect(), norm))
}

/// Projector pre-activation and output.
fn project_cached(params: &ProjectorParams, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if h.len() != params.w1.cols {
        return Err(Error::DimensionMismatch(format!("embedding dim {} vs projector input {}", h.len(), params.w1.cols)));
    }
    let mut a1 = params.b1.data.clone();
    params.w1.gemv_acc(h, &mut a1);
    let act: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
    let mut z = params.b2.data.clone();
    params.w2.gemv_acc(&act, &mut z);
    Ok((a1, z))
}

pub fn project(params: &ProjectorParams, h: &[f64]) -> Result<Vec<f64>> {
    project_cached(params, h).map(|(_, z)| z)
}

#[derive(Debug, Clone)]
struct ForwardCache {
    trace: GruTrace,
    norm: f64,
    h: Vec<f64>,
    pre_activation: Vec<f64>,
}

/// A forward evaluation whose activations can be differentiated afterwards.
pub struct ForwardPass<'m> {
    model: &'m SequenceModel,
    cache: Option<ForwardCache>,
}

impl<'m> ForwardPass<'m> {
    pub fn new(model: &'m SequenceModel) -> Self {
        Self { model, cache: None }
    }

    pub fn forward(&mut self, features: &FeatureSequence) -> Result<Embedding> {
        let inputs = feature_rows(&self.model.gru, &self.model.input_norm, features)?;
        if inputs.is_empty() {
            return Err(Error::TooFewFrames { needed: 1, available: 0 });
        }
        let trace = gru_trace(&self.model.gru, inputs, None)?;
        let (h, norm) = pool_and_normalize(&trace.states[1..])?;
        let (pre_activation, z) = project_cached(&self.model.projector, &h)?;
        let out = Embedding { h: h.clone(), z };
        self.cache = Some(ForwardCache { trace, norm, h, pre_activation });
        Ok(out)
    }

    /// Parameter gradients for upstream gradients on `z` and/or `h`.
    pub fn backward(&self, grad_z: Option<&[f64]>, grad_h: Option<&[f64]>) -> Result<Gradients> {
        let cache = self.cache.as_ref().ok_or(Error::MissingForwardCache)?;
        let model = self.model;
        let mut grads = model.zeros_like();
        let d = model.gru.hidden_dim();

        let mut dh = match grad_h {
            Some(g) if g.len() != d => return Err(Error::DimensionMismatch("grad_h has the wrong length".into())),
            Some(g) => g.to_vec(),
            None => vec![0.0; d],
        };
        if let Some(dz) = grad_z {
            let p = &model.projector;
            if dz.len() != p.out_dim() {
                return Err(Error::DimensionMismatch("grad_z has the wrong length".into()));
            }
            let act: Vec<f64> = cache.pre_activation.iter().map(|v| v.max(0.0)).collect();
            grads.projector.w2.outer_acc(dz, &act);
            grads.projector.b2.add_vec(dz);
            let mut da = vec![0.0; p.w1.rows];
            p.w2.gemv_t_acc(dz, &mut da);
            for (g, a) in da.iter_mut().zip(&cache.pre_activation) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            grads.projector.w1.outer_acc(&da, &cache.h);
            grads.projector.b1.add_vec(&da);
            p.w1.gemv_t_acc(&da, &mut dh);
        }

        // through h = m / |m|
        let proj = dot(&cache.h, &dh);
        let steps = cache.trace.inputs.len();
        let scale = 1.0 / (cache.norm * steps as f64);
        let d_state: Vec<f64> = dh.iter().zip(&cache.h).map(|(g, h)| (g - h * proj) * scale).collect();

        let gru = &model.gru;
        let tr = &cache.trace;
        let g = &mut grads.gru;
        let mut carry = vec![0.0; d];
        let mut da_n = vec![0.0; d];
        let mut da_u = vec![0.0; d];
        let mut da_r = vec![0.0; d];
        let mut d_hn = vec![0.0; d];
        for t in (0..steps).rev() {
            let (y, h_prev) = (&tr.inputs[t], &tr.states[t]);
            let (r, u, n, hn) = (&tr.reset[t], &tr.update[t], &tr.candidate[t], &tr.recurrent_candidate[t]);
            let mut next_carry = vec![0.0; d];
            for i in 0..d {
                let dht = d_state[i] + carry[i];
                let dn = dht * (1.0 - u[i]);
                let du = dht * (h_prev[i] - n[i]);
                next_carry[i] = dht * u[i];
                da_n[i] = dn * (1.0 - n[i] * n[i]);
                let dr = da_n[i] * hn[i];
                d_hn[i] = da_n[i] * r[i];
                da_u[i] = du * u[i] * (1.0 - u[i]);
                da_r[i] = dr * r[i] * (1.0 - r[i]);
            }
            g.w_n.outer_acc(&da_n, y);
            g.b_n.add_vec(&da_n);
            g.u_n.outer_acc(&d_hn, h_prev);
            g.b_hn.add_vec(&d_hn);
            g.w_z.outer_acc(&da_u, y);
            g.u_z.outer_acc(&da_u, h_prev);
            g.b_z.add_vec(&da_u);
            g.w_r.outer_acc(&da_r, y);
            g.u_r.outer_acc(&da_r, h_prev);
            g.b_r.add_vec(&da_r);
            gru.u_n.gemv_t_acc(&d_hn, &mut next_carry);
            gru.u_z.gemv_t_acc(&da_u, &mut next_carry);
            gru.u_r.gemv_t_acc(&da_r, &mut next_carry);
            carry = next_carry;
        }
        Ok(grads)
    }
}

/// Serializes parameters: magic, version, tensor count, then per tensor
/// name length, name, rank, dims and row-major f32 payload. The trainable
/// tensors are followed by `input.shift` and `input.scale`.
pub fn checkpoint_bytes(model: &SequenceModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let norm = &model.input_norm;
    let (shift, scale) = (Mat::vector(norm.shift.clone()), Mat::vector(norm.scale.clone()));
    let mut tensors: Vec<(&str, &Mat)> = model.tensors().to_vec();
    tensors.push(("input.shift", &shift));
    tensors.push(("input.scale", &scale));
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims: Vec<usize> = if t.cols == 1 { vec![t.rows] } else { vec![t.rows, t.cols] };
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for dim in dims {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedPayload { expected: (self.pos + n) as u64, actual: self.bytes.len() as u64 });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<SequenceModel> {
    let mut rd = Reader { bytes, pos: 0 };
    let found: [u8; 4] = rd.take(4)?.try_into().expect("4 bytes");
    if found != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found });
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = rd.u32()? as usize;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count.min(64) {
        let name_len = rd.u32()? as usize;
        let name = String::from_utf8(rd.take(name_len)?.to_vec())
            .map_err(|_| Error::DimensionMismatch("tensor name is not UTF-8".into()))?;
        let rank = rd.u32()? as usize;
        if !(1..=2).contains(&rank) {
            return Err(Error::DimensionMismatch(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(rd.u32()? as usize);
        }
        let (rows, cols) = if rank == 1 { (dims[0], 1) } else { (dims[0], dims[1]) };
        let payload = rd.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or(Error::DimensionMismatch("tensor too large".into()))?)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        loaded.push((name, Mat { rows, cols, data }));
    }
    if rd.pos != bytes.len() {
        return Err(Error::TruncatedPayload { expected: rd.pos as u64, actual: bytes.len() as u64 });
    }
    let find = |name: &str| -> Result<&Mat> {
        loaded
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::DimensionMismatch(format!("checkpoint lacks tensor {name}")))
    };
    let w_r = find("gru.w_r")?;
    let w1 = find("proj.w1")?;
    let w2 = find("proj.w2")?;
    let dims = ModelDims { input_dim: w_r.cols, hidden_dim: w_r.rows, projector_hidden: w1.rows, output_dim: w2.rows };
    let mut model = SequenceModel::zeros(dims);
    let trainable = model.tensors().len();
    if loaded.len() != trainable && loaded.len() != trainable + 2 {
        return Err(Error::DimensionMismatch(format!("checkpoint holds {} tensors", loaded.len())));
    }
    if loaded.len() == trainable + 2 {
        let (shift, scale) = (find("input.shift")?, find("input.scale")?);
        if shift.data.len() != dims.input_dim || scale.data.len() != dims.input_dim {
            return Err(Error::DimensionMismatch("input standardization has the wrong length".into()));
        }
        model.input_norm = InputNorm { shift: shift.data.clone(), scale: scale.data.clone() };
    }
    for (name, slot) in model.tensors_mut() {
        let m = find(name)?;
        if (m.rows, m.cols) != (slot.rows, slot.cols) {
            return Err(Error::DimensionMismatch(format!(
                "tensor {name} is {}x{}, expected {}x{}",
                m.rows, m.cols, slot.rows, slot.cols
            )));
        }
        *slot = m.clone();
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SequenceModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::from_write(e, path))?;
    f.write_all(&checkpoint_bytes(model)).map_err(|e| Error::from_write(e, path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SequenceModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from_open(e, path))?;
    checkpoint_from_bytes(&bytes)
}
