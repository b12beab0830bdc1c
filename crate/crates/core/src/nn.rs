//! Parameter storage, layer building blocks and the Adam optimizer.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{AttnMask, Mat, Tape, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Mat,
}

/// Named parameter tensors in insertion order.
///
/// Values are kept representable in `f32` (see [`ParamStore::snap_f32`]) so
/// checkpoints, which store `f32`, reload bit-exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, usize>,
}

pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Identity,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut Rng) -> ParamId {
        let mut value = Mat::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => value.data.iter_mut().for_each(|x| *x = 1.0),
            Init::Normal(std) => value.data.iter_mut().for_each(|x| *x = rng.normal() * std),
            Init::Identity => {
                for i in 0..rows.min(cols) {
                    value.data[i * cols + i] = 1.0;
                }
            }
        }
        value.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        self.insert(name, value)
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        self.tensors.push(Tensor {
            name: name.to_string(),
            value,
        });
        self.by_name.insert(name.to_string(), self.tensors.len() - 1);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.data.len()).sum()
    }

    pub fn snap_f32(&mut self) {
        for t in &mut self.tensors {
            t.value.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// SHA-256 over names, shapes and little-endian `f64` values.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update((t.name.len() as u64).to_le_bytes());
            h.update(t.name.as_bytes());
            h.update((t.value.rows as u64).to_le_bytes());
            h.update((t.value.cols as u64).to_le_bytes());
            for v in &t.value.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Binds parameters of one store onto a tape, once per tensor.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: bool,
    bound: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Binder {
            store,
            trainable: true,
            bound: vec![None; store.len()],
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Binder {
            store,
            trainable: false,
            bound: vec![None; store.len()],
        }
    }

    pub fn get(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            tape.param(value, id.0)
        } else {
            tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        LinearIds {
            w: store.add(&format!("{name}.w"), fan_in, fan_out, Init::Normal(std), rng),
            b: store.add(&format!("{name}.b"), 1, fan_out, Init::Zeros, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &mut Binder, x: Var) -> Var {
        let w = bind.get(tape, self.w);
        let b = bind.get(tape, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        LayerNormIds {
            gamma: store.add(&format!("{name}.gamma"), 1, d, Init::Ones, rng),
            beta: store.add(&format!("{name}.beta"), 1, d, Init::Zeros, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &mut Binder, x: Var) -> Var {
        let g = bind.get(tape, self.gamma);
        let b = bind.get(tape, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// sources.
#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub heads: usize,
}

impl AttentionIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads > 0 && d % heads == 0, "d={d} not divisible by heads={heads}");
        AttentionIds {
            q: LinearIds::new(store, &format!("{name}.q"), d, d, rng),
            k: LinearIds::new(store, &format!("{name}.k"), d, d, rng),
            v: LinearIds::new(store, &format!("{name}.v"), d, d, rng),
            o: LinearIds::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &mut Binder, xq: Var, xkv: Var, mask: Option<&AttnMask>) -> Var {
        let q = self.q.apply(tape, bind, xq);
        let k = self.k.apply(tape, bind, xkv);
        let v = self.v.apply(tape, bind, xkv);
        let d = tape.value(q).cols;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh),
                    tape.slice_cols(k, h * dh, dh),
                    tape.slice_cols(v, h * dh, dh),
                )
            };
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, scale);
            let p = tape.softmax(s, mask);
            outs.push(tape.matmul(p, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.o.apply(tape, bind, o)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

impl FeedForwardIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        FeedForwardIds {
            up: LinearIds::new(store, &format!("{name}.up"), d, hidden, rng),
            down: LinearIds::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &mut Binder, x: Var) -> Var {
        let h = self.up.apply(tape, bind, x);
        let h = tape.gelu(h);
        self.down.apply(tape, bind, h)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub ln_attn: LayerNormIds,
    pub attn: AttentionIds,
    pub ln_ffn: LayerNormIds,
    pub ffn: FeedForwardIds,
}

impl BlockIds {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        BlockIds {
            ln_attn: LayerNormIds::new(store, &format!("{name}.ln_attn"), d, rng),
            attn: AttentionIds::new(store, &format!("{name}.attn"), d, heads, rng),
            ln_ffn: LayerNormIds::new(store, &format!("{name}.ln_ffn"), d, rng),
            ffn: FeedForwardIds::new(store, &format!("{name}.ffn"), d, 4 * d, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &mut Binder, x: Var, mask: Option<&AttnMask>) -> Var {
        let h = self.ln_attn.apply(tape, bind, x);
        let a = self.attn.apply(tape, bind, h, h, mask);
        let x = tape.add(x, a);
        let h = self.ln_ffn.apply(tape, bind, x);
        let f = self.ffn.apply(tape, bind, h);
        tape.add(x, f)
    }
}

/// Adam with bias correction. Parameters are re-snapped to `f32` after each
/// step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.value.data.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, tensor) in store.tensors_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in tensor.value.data.iter_mut().enumerate() {
                let gk = g.data[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p = (*p - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32 as f64;
            }
        }
    }
}

/// Causal visibility for a sequence of length `n`: row `i` sees `j <= i`.
pub fn causal_mask(n: usize) -> AttnMask {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    AttnMask::new(m)
}
