//! Decoder-only Transformer with rotary attention, RMSNorm and a gated
//! feed-forward network, plus hand-written reverse-mode gradients.
//!
//! Every matrix is stored `[in, out]` and applied to row vectors, so a dense
//! layer is `y = x W`. The residual stream of a batch is a `[B * 4, d]` row
//! block. Only the final position is read out, so the last block restricts
//! its queries, feed-forward pass and dropout masks to that position; keys
//! and values still span every position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{TokenizedExample, SEQ_LEN};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::tensor::{dot, matmul, matmul_at_acc, matmul_bt, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout_rate: f64,
    pub init_scale: f64,
    pub param_seed: u64,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Central setting: two blocks, one head, 4x FFN, dropout 0.2.
    pub fn new(vocab_size: usize, width: usize) -> Self {
        ModelConfig {
            vocab_size,
            width,
            depth: 2,
            heads: 1,
            ffn_mult: 4,
            dropout_rate: 0.2,
            init_scale: 1.0,
            param_seed: 0,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.ffn_mult * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(invalid_config(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if self.width == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(invalid_config("width, heads and ffn_mult must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(invalid_config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(invalid_config(format!(
                "rotary embeddings need an even head dimension, got {}",
                self.head_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid_config(format!("dropout {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.init_scale > 0.0) {
            return Err(invalid_config(format!("init_scale {} must be > 0", self.init_scale)));
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) {
            return Err(invalid_config("norm_eps and rope_base must be > 0"));
        }
        Ok(())
    }
}

/// Closed-form trainable parameter count.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (v, d, f) = (cfg.vocab_size, cfg.width, cfg.hidden());
    let block = 4 * d * d + 3 * d * f + 2 * d;
    v * d + cfg.depth * block + d + d * v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl BlockWeights {
    fn zeros(d: usize, f: usize) -> Self {
        BlockWeights {
            attn_norm: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ffn_norm: Tensor::zeros(&[d]),
            w_gate: Tensor::zeros(&[d, f]),
            w_up: Tensor::zeros(&[d, f]),
            w_down: Tensor::zeros(&[f, d]),
        }
    }

    const NAMES: [&'static str; 9] =
        ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"];

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// All trainable tensors. Also used as the gradient and optimiser-moment
/// container, since those mirror the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub embedding: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.width, cfg.hidden());
        Weights {
            embedding: Tensor::zeros(&[v, d]),
            blocks: (0..cfg.depth).map(|_| BlockWeights::zeros(d, f)).collect(),
            final_norm: Tensor::zeros(&[d]),
            head: Tensor::zeros(&[d, v]),
        }
    }

    /// Tensors in canonical order: embedding, blocks, final norm, head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        for (i, _) in self.blocks.iter().enumerate() {
            out.extend(BlockWeights::NAMES.iter().map(|n| format!("blocks.{i}.{n}")));
        }
        out.push("final_norm".to_string());
        out.push("head".to_string());
        out
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.weights.numel()
    }

    /// Binary checkpoint: magic, format version, JSON config header, then a
    /// table of named tensors (shape and little-endian values).
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.config).expect("configs always serialise");
        let mut out = Vec::with_capacity(64 + header.len() + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let names = self.weights.names();
        let tensors = self.weights.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in names.iter().zip(tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(invalid_input("not a model checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(invalid_input(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(header_len)?)?;
        config.validate()?;
        let mut weights = Weights::zeros(&config);
        let names = weights.names();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(invalid_input(format!("checkpoint has {count} tensors, config implies {}", names.len())));
        }
        for (name, t) in names.iter().zip(weights.tensors_mut()) {
            let len = r.u32()? as usize;
            let stored = r.take(len)?;
            if stored != name.as_bytes() {
                return Err(invalid_input(format!("checkpoint tensor order mismatch at {name}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != t.shape() {
                return Err(invalid_input(format!("checkpoint shape {shape:?} for {name}, expected {:?}", t.shape())));
            }
            for x in t.data_mut() {
                *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(invalid_input("trailing bytes after checkpoint"));
        }
        Ok(ModelState { config, weights })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GRKSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| invalid_input("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Gaussian init with standard deviation `1/sqrt(fan_in)` per tensor, norm
/// scales at one, then every value multiplied by `init_scale`.
///
/// The embedding is a lookup of one-hot inputs, so its fan-in is 1.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelState> {
    cfg.validate()?;
    let mut weights = Weights::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.param_seed);
    for (i, t) in weights.tensors_mut().into_iter().enumerate() {
        if t.shape().len() == 1 {
            t.fill(1.0);
        } else {
            let fan_in = if i == 0 { 1 } else { t.shape()[0] };
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
            for v in t.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        t.scale(cfg.init_scale);
    }
    Ok(ModelState { config: *cfg, weights })
}

struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    fn new(positions: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for t in 0..positions {
            for i in 0..half {
                let angle = t as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        RopeTable { half, cos, sin }
    }

    /// Rotates one head slice in place; `inverse` applies the transpose.
    fn rotate(&self, x: &mut [f64], pos: usize, inverse: bool) {
        let base = pos * self.half;
        for i in 0..self.half {
            let c = self.cos[base + i];
            let s = if inverse { -self.sin[base + i] } else { self.sin[base + i] };
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Rotary embedding of a `[L, d_head]` tensor: the value pair `(2i, 2i+1)` at
/// position `t` is rotated by `t * base^(-2i/d_head)`.
pub fn rope_apply(x: &Tensor, base: f64) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(invalid_input("rope expects a [L, d_head] tensor"));
    }
    let (len, dh) = (x.shape()[0], x.shape()[1]);
    if dh % 2 != 0 {
        return Err(invalid_config(format!("odd head dimension {dh}")));
    }
    let table = RopeTable::new(len, dh, base);
    let mut out = x.clone();
    for (t, row) in out.data_mut().chunks_mut(dh).enumerate() {
        table.rotate(row, t, false);
    }
    Ok(out)
}

/// `x / sqrt(mean(x^2) + eps) * scale` over the last dimension.
pub fn rms_norm(x: &Tensor, scale: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| invalid_input("empty shape"))?;
    if scale.shape() != [d] {
        return Err(invalid_input(format!("scale shape {:?} != [{d}]", scale.shape())));
    }
    let mut out = x.clone();
    let mut xhat = vec![0.0; x.numel()];
    let mut inv = vec![0.0; x.numel() / d.max(1)];
    rms_forward(x.data(), scale.data(), eps, d, &mut xhat, &mut inv, out.data_mut());
    Ok(out)
}

fn rms_forward(
    x: &[f64],
    scale: &[f64],
    eps: f64,
    d: usize,
    xhat: &mut [f64],
    inv: &mut [f64],
    out: &mut [f64],
) {
    for (r, row) in x.chunks(d).enumerate() {
        let ms = dot(row, row) / d as f64;
        let ir = 1.0 / (ms + eps).sqrt();
        inv[r] = ir;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = row[j] * ir;
            o[j] = xh[j] * scale[j];
        }
    }
}

/// Returns `dx` and accumulates the scale gradient.
fn rms_backward(dy: &[f64], xhat: &[f64], inv: &[f64], scale: &[f64], d: usize, dscale: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let mut dxh = vec![0.0; d];
    for (r, dyr) in dy.chunks(d).enumerate() {
        let xh = &xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dscale[j] += dyr[j] * xh[j];
            dxh[j] = dyr[j] * scale[j];
        }
        let m = dot(&dxh, xh) / d as f64;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] = inv[r] * (dxh[j] - xh[j] * m);
        }
    }
    dx
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct BlockCache {
    positions: Vec<usize>,
    xhat1: Vec<f64>,
    inv1: Vec<f64>,
    h1: Vec<f64>,
    hq: Option<Vec<f64>>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    mask_attn: Option<Vec<f64>>,
    xhat2: Vec<f64>,
    inv2: Vec<f64>,
    h2: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    z: Vec<f64>,
    mask_ffn: Option<Vec<f64>>,
}

struct ForwardCache {
    batch: usize,
    blocks: Vec<BlockCache>,
    xhat_f: Vec<f64>,
    inv_f: Vec<f64>,
    hf: Vec<f64>,
    logits: Vec<f64>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 }).collect()
}

fn gather_rows(x: &[f64], d: usize, batch: usize, positions: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * positions.len() * d);
    for b in 0..batch {
        for &t in positions {
            let r = b * SEQ_LEN + t;
            out.extend_from_slice(&x[r * d..(r + 1) * d]);
        }
    }
    out
}

fn scatter_add_rows(dst: &mut [f64], src: &[f64], d: usize, batch: usize, positions: &[usize]) {
    let nq = positions.len();
    for b in 0..batch {
        for (qi, &t) in positions.iter().enumerate() {
            let r = b * SEQ_LEN + t;
            let s = (b * nq + qi) * d;
            for (a, v) in dst[r * d..(r + 1) * d].iter_mut().zip(&src[s..s + d]) {
                *a += v;
            }
        }
    }
}

fn block_forward(
    w: &BlockWeights,
    cfg: &ModelConfig,
    rope: &RopeTable,
    x: &[f64],
    batch: usize,
    last: bool,
    mask_rng: Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, BlockCache) {
    let d = cfg.width;
    let f = cfg.hidden();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let rows = batch * SEQ_LEN;
    let positions: Vec<usize> = if last { vec![SEQ_LEN - 1] } else { (0..SEQ_LEN).collect() };
    let nq = positions.len();
    let rq = batch * nq;

    let mut xhat1 = vec![0.0; rows * d];
    let mut inv1 = vec![0.0; rows];
    let mut h1 = vec![0.0; rows * d];
    rms_forward(x, w.attn_norm.data(), cfg.norm_eps, d, &mut xhat1, &mut inv1, &mut h1);

    let mut k = vec![0.0; rows * d];
    let mut v = vec![0.0; rows * d];
    matmul(&h1, w.wk.data(), &mut k, rows, d, d);
    matmul(&h1, w.wv.data(), &mut v, rows, d, d);
    for (r, row) in k.chunks_mut(d).enumerate() {
        for head in row.chunks_mut(dh) {
            rope.rotate(head, r % SEQ_LEN, false);
        }
    }

    let hq = if last { Some(gather_rows(&h1, d, batch, &positions)) } else { None };
    let mut q = vec![0.0; rq * d];
    matmul(hq.as_deref().unwrap_or(&h1), w.wq.data(), &mut q, rq, d, d);
    for (r, row) in q.chunks_mut(d).enumerate() {
        for head in row.chunks_mut(dh) {
            rope.rotate(head, positions[r % nq], false);
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; batch * heads * nq * SEQ_LEN];
    let mut o = vec![0.0; rq * d];
    for b in 0..batch {
        for h in 0..heads {
            for (qi, &pos) in positions.iter().enumerate() {
                let qrow = (b * nq + qi) * d + h * dh;
                let qs = &q[qrow..qrow + dh];
                let p = &mut probs[((b * heads + h) * nq + qi) * SEQ_LEN..][..SEQ_LEN];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=pos {
                    let kr = (b * SEQ_LEN + j) * d + h * dh;
                    p[j] = dot(qs, &k[kr..kr + dh]) * scale;
                    mx = mx.max(p[j]);
                }
                let mut sum = 0.0;
                for pj in p.iter_mut().take(pos + 1) {
                    *pj = (*pj - mx).exp();
                    sum += *pj;
                }
                let os = &mut o[qrow..qrow + dh];
                for j in 0..=pos {
                    p[j] /= sum;
                    let vr = (b * SEQ_LEN + j) * d + h * dh;
                    for (oo, vv) in os.iter_mut().zip(&v[vr..vr + dh]) {
                        *oo += p[j] * vv;
                    }
                }
            }
        }
    }

    let mut a = vec![0.0; rq * d];
    matmul(&o, w.wo.data(), &mut a, rq, d, d);
    let (mask_attn, mask_ffn) = match mask_rng {
        Some(rng) => {
            let m1 = dropout_mask(rng, rq * d, cfg.dropout_rate);
            let m2 = dropout_mask(rng, rq * d, cfg.dropout_rate);
            (Some(m1), Some(m2))
        }
        None => (None, None),
    };
    if let Some(m) = &mask_attn {
        a.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
    }
    let mut x2 = if last { gather_rows(x, d, batch, &positions) } else { x.to_vec() };
    x2.iter_mut().zip(&a).for_each(|(x, a)| *x += a);

    let mut xhat2 = vec![0.0; rq * d];
    let mut inv2 = vec![0.0; rq];
    let mut h2 = vec![0.0; rq * d];
    rms_forward(&x2, w.ffn_norm.data(), cfg.norm_eps, d, &mut xhat2, &mut inv2, &mut h2);
    let mut gate = vec![0.0; rq * f];
    let mut up = vec![0.0; rq * f];
    matmul(&h2, w.w_gate.data(), &mut gate, rq, d, f);
    matmul(&h2, w.w_up.data(), &mut up, rq, d, f);
    let z: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| g * sigmoid(g) * u).collect();
    let mut ff = vec![0.0; rq * d];
    matmul(&z, w.w_down.data(), &mut ff, rq, f, d);
    if let Some(m) = &mask_ffn {
        ff.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
    }
    x2.iter_mut().zip(&ff).for_each(|(x, f)| *x += f);

    let cache = BlockCache {
        positions,
        xhat1,
        inv1,
        h1,
        hq,
        q,
        k,
        v,
        probs,
        o,
        mask_attn,
        xhat2,
        inv2,
        h2,
        gate,
        up,
        z,
        mask_ffn,
    };
    (x2, cache)
}

/// Backpropagates `dout` (`[rq, d]`) through one block, returning the
/// gradient with respect to the block input (`[B * 4, d]`).
fn block_backward(
    w: &BlockWeights,
    g: &mut BlockWeights,
    cfg: &ModelConfig,
    rope: &RopeTable,
    c: &BlockCache,
    dout: &[f64],
    batch: usize,
) -> Vec<f64> {
    let d = cfg.width;
    let f = cfg.hidden();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let rows = batch * SEQ_LEN;
    let nq = c.positions.len();
    let rq = batch * nq;
    let last = c.hq.is_some();

    // Feed-forward branch.
    let mut dff = dout.to_vec();
    if let Some(m) = &c.mask_ffn {
        dff.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
    }
    matmul_at_acc(&c.z, &dff, g.w_down.data_mut(), rq, f, d);
    let mut dz = vec![0.0; rq * f];
    matmul_bt(&dff, w.w_down.data(), &mut dz, rq, f, d);
    let mut dgate = vec![0.0; rq * f];
    let mut dup = vec![0.0; rq * f];
    for i in 0..rq * f {
        let gv = c.gate[i];
        let s = sigmoid(gv);
        dup[i] = dz[i] * gv * s;
        dgate[i] = dz[i] * c.up[i] * s * (1.0 + gv * (1.0 - s));
    }
    matmul_at_acc(&c.h2, &dgate, g.w_gate.data_mut(), rq, d, f);
    matmul_at_acc(&c.h2, &dup, g.w_up.data_mut(), rq, d, f);
    let mut dh2 = vec![0.0; rq * d];
    matmul_bt(&dgate, w.w_gate.data(), &mut dh2, rq, d, f);
    let mut tmp = vec![0.0; rq * d];
    matmul_bt(&dup, w.w_up.data(), &mut tmp, rq, d, f);
    dh2.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
    let mut dx2 = rms_backward(&dh2, &c.xhat2, &c.inv2, w.ffn_norm.data(), d, g.ffn_norm.data_mut());
    dx2.iter_mut().zip(dout).for_each(|(a, b)| *a += b);

    // Attention branch.
    let mut da = dx2.clone();
    if let Some(m) = &c.mask_attn {
        da.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
    }
    matmul_at_acc(&c.o, &da, g.wo.data_mut(), rq, d, d);
    let mut dout_attn = vec![0.0; rq * d];
    matmul_bt(&da, w.wo.data(), &mut dout_attn, rq, d, d);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; rq * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dp = [0.0f64; SEQ_LEN];
    for b in 0..batch {
        for h in 0..heads {
            for (qi, &pos) in c.positions.iter().enumerate() {
                let qrow = (b * nq + qi) * d + h * dh;
                let p = &c.probs[((b * heads + h) * nq + qi) * SEQ_LEN..][..SEQ_LEN];
                let dos = &dout_attn[qrow..qrow + dh];
                let mut inner = 0.0;
                for j in 0..=pos {
                    let vr = (b * SEQ_LEN + j) * d + h * dh;
                    dp[j] = dot(dos, &c.v[vr..vr + dh]);
                    inner += p[j] * dp[j];
                    for (dvv, doo) in dv[vr..vr + dh].iter_mut().zip(dos) {
                        *dvv += p[j] * doo;
                    }
                }
                for j in 0..=pos {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    let kr = (b * SEQ_LEN + j) * d + h * dh;
                    for t in 0..dh {
                        dq[qrow + t] += ds * c.k[kr + t];
                        dk[kr + t] += ds * c.q[qrow + t];
                    }
                }
            }
        }
    }
    for (r, row) in dq.chunks_mut(d).enumerate() {
        for head in row.chunks_mut(dh) {
            rope.rotate(head, c.positions[r % nq], true);
        }
    }
    for (r, row) in dk.chunks_mut(d).enumerate() {
        for head in row.chunks_mut(dh) {
            rope.rotate(head, r % SEQ_LEN, true);
        }
    }

    matmul_at_acc(&c.h1, &dk, g.wk.data_mut(), rows, d, d);
    matmul_at_acc(&c.h1, &dv, g.wv.data_mut(), rows, d, d);
    let mut dh1 = vec![0.0; rows * d];
    matmul_bt(&dk, w.wk.data(), &mut dh1, rows, d, d);
    let mut tmp = vec![0.0; rows * d];
    matmul_bt(&dv, w.wv.data(), &mut tmp, rows, d, d);
    dh1.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
    let mut dhq = vec![0.0; rq * d];
    matmul_at_acc(c.hq.as_deref().unwrap_or(&c.h1), &dq, g.wq.data_mut(), rq, d, d);
    matmul_bt(&dq, w.wq.data(), &mut dhq, rq, d, d);
    if last {
        scatter_add_rows(&mut dh1, &dhq, d, batch, &c.positions);
    } else {
        dh1.iter_mut().zip(&dhq).for_each(|(a, b)| *a += b);
    }

    let mut dx = rms_backward(&dh1, &c.xhat1, &c.inv1, w.attn_norm.data(), d, g.attn_norm.data_mut());
    if last {
        scatter_add_rows(&mut dx, &dx2, d, batch, &c.positions);
    } else {
        dx.iter_mut().zip(&dx2).for_each(|(a, b)| *a += b);
    }
    dx
}

fn validate_tokens(state: &ModelState, tokens: &[[u32; SEQ_LEN]]) -> Result<()> {
    let v = state.config.vocab_size as u32;
    if let Some(bad) = tokens.iter().flatten().find(|&&t| t >= v) {
        return Err(invalid_input(format!("token id {bad} >= vocabulary size {v}")));
    }
    Ok(())
}

fn forward_cached(state: &ModelState, tokens: &[[u32; SEQ_LEN]], mask_seed: Option<u64>) -> Result<ForwardCache> {
    validate_tokens(state, tokens)?;
    let cfg = &state.config;
    let w = &state.weights;
    let d = cfg.width;
    let v = cfg.vocab_size;
    let batch = tokens.len();
    let rope = RopeTable::new(SEQ_LEN, cfg.head_dim(), cfg.rope_base);
    let mut rng = match mask_seed {
        Some(seed) if cfg.dropout_rate > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };

    let mut x = Vec::with_capacity(batch * SEQ_LEN * d);
    for seq in tokens {
        for &t in seq {
            x.extend_from_slice(w.embedding.row(t as usize));
        }
    }
    let mut blocks = Vec::with_capacity(cfg.depth);
    for (i, bw) in w.blocks.iter().enumerate() {
        let last = i + 1 == cfg.depth;
        let (out, cache) = block_forward(bw, cfg, &rope, &x, batch, last, rng.as_mut());
        x = out;
        blocks.push(cache);
    }
    if cfg.depth == 0 {
        x = gather_rows(&x, d, batch, &[SEQ_LEN - 1]);
    }

    let mut xhat_f = vec![0.0; batch * d];
    let mut inv_f = vec![0.0; batch];
    let mut hf = vec![0.0; batch * d];
    rms_forward(&x, w.final_norm.data(), cfg.norm_eps, d, &mut xhat_f, &mut inv_f, &mut hf);
    let mut logits = vec![0.0; batch * v];
    matmul(&hf, w.head.data(), &mut logits, batch, d, v);
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(Error::NumericFailure { context: "forward logits".into() });
    }
    Ok(ForwardCache { batch, blocks, xhat_f, inv_f, hf, logits })
}

/// Final-position logits `[B, V]`. Dropout is active only when the config
/// rate is positive and a mask seed is supplied.
pub fn forward(state: &ModelState, tokens: &[[u32; SEQ_LEN]], mask_seed: Option<u64>) -> Result<Tensor> {
    let cache = forward_cached(state, tokens, mask_seed)?;
    Tensor::from_vec(&[tokens.len(), state.config.vocab_size], cache.logits)
}

/// Attention probabilities per block, shaped `[B, H, queries, 4]`. The last
/// block reports only its final-position query.
pub fn attention_probabilities(state: &ModelState, tokens: &[[u32; SEQ_LEN]]) -> Result<Vec<Tensor>> {
    let cache = forward_cached(state, tokens, None)?;
    cache
        .blocks
        .into_iter()
        .map(|b| {
            let nq = b.positions.len();
            Tensor::from_vec(&[tokens.len(), state.config.heads, nq, SEQ_LEN], b.probs)
        })
        .collect()
}

/// Mean natural-log cross-entropy at the final position and the exact
/// gradient of every trainable tensor.
pub fn loss_and_grads(
    state: &ModelState,
    tokens: &[[u32; SEQ_LEN]],
    labels: &[u32],
    mask_seed: Option<u64>,
) -> Result<(f64, Weights)> {
    if tokens.is_empty() {
        return Err(invalid_input("empty batch"));
    }
    if tokens.len() != labels.len() {
        return Err(invalid_input("tokens and labels differ in length"));
    }
    let cfg = &state.config;
    let w = &state.weights;
    let (d, v) = (cfg.width, cfg.vocab_size);
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= v) {
        return Err(invalid_input(format!("label {bad} >= vocabulary size {v}")));
    }
    let cache = forward_cached(state, tokens, mask_seed)?;
    let batch = cache.batch;

    let mut loss = 0.0;
    let mut dlogits = vec![0.0; batch * v];
    for (b, &y) in labels.iter().enumerate() {
        let row = &cache.logits[b * v..(b + 1) * v];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|l| (l - mx).exp()).sum();
        let lse = mx + sum.ln();
        loss += lse - row[y as usize];
        let dl = &mut dlogits[b * v..(b + 1) * v];
        for (j, l) in row.iter().enumerate() {
            dl[j] = (l - lse).exp() / batch as f64;
        }
        dl[y as usize] -= 1.0 / batch as f64;
    }
    loss /= batch as f64;
    if !loss.is_finite() {
        return Err(Error::NumericFailure { context: "loss".into() });
    }

    let mut g = Weights::zeros(cfg);
    matmul_at_acc(&cache.hf, &dlogits, g.head.data_mut(), batch, d, v);
    let mut dhf = vec![0.0; batch * d];
    matmul_bt(&dlogits, w.head.data(), &mut dhf, batch, d, v);
    let mut dx = rms_backward(&dhf, &cache.xhat_f, &cache.inv_f, w.final_norm.data(), d, g.final_norm.data_mut());

    let rope = RopeTable::new(SEQ_LEN, cfg.head_dim(), cfg.rope_base);
    if cfg.depth == 0 {
        let mut full = vec![0.0; batch * SEQ_LEN * d];
        scatter_add_rows(&mut full, &dx, d, batch, &[SEQ_LEN - 1]);
        dx = full;
    } else {
        for i in (0..cfg.depth).rev() {
            dx = block_backward(&w.blocks[i], &mut g.blocks[i], cfg, &rope, &cache.blocks[i], &dx, batch);
        }
    }
    let emb = g.embedding.data_mut();
    for (r, row) in dx.chunks(d).enumerate() {
        let t = tokens[r / SEQ_LEN][r % SEQ_LEN] as usize;
        for (e, x) in emb[t * d..(t + 1) * d].iter_mut().zip(row) {
            *e += x;
        }
    }
    if !g.is_finite() {
        return Err(Error::NumericFailure { context: "gradients".into() });
    }
    Ok((loss, g))
}

/// Logits for every example, evaluated without dropout in fixed-size chunks.
pub fn predict_logits(state: &ModelState, examples: &[TokenizedExample]) -> Result<Vec<f64>> {
    const CHUNK: usize = 1024;
    let mut out = Vec::with_capacity(examples.len() * state.config.vocab_size);
    for chunk in examples.chunks(CHUNK) {
        let tokens: Vec<[u32; SEQ_LEN]> = chunk.iter().map(|e| e.tokens).collect();
        out.extend(forward_cached(state, &tokens, None)?.logits);
    }
    Ok(out)
}
