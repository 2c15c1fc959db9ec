//! Minimal reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass on a tape, keeping the
//! intermediate values needed by the backward pass. Trainable weights and the
//! batch-norm running statistics live in a [`ParamStore`] that the graph borrows
//! immutably; batch statistics gathered in training mode are handed back to the
//! caller through [`Graph::take_bn_updates`].

use std::collections::HashMap;

use crate::tensor::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, Tensor};

pub type ParamId = usize;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    /// Running statistics are stored here too but are not optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; names are generated by the model builder.
    pub fn insert(&mut self, name: String, shape: Vec<usize>, value: Vec<f32>, trainable: bool) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param {name} shape/len mismatch");
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Param { name, shape, value, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| &self.entries[id])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(move |id| &mut self.entries[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Folds batch statistics into the running mean/variance buffers.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>) {
        for u in updates {
            self.entries[u.batches_tracked].value[0] += 1.0;
            for (r, b) in self.entries[u.running_mean].value.iter_mut().zip(&u.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in self.entries[u.running_var].value.iter_mut().zip(&u.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Batch statistics observed by one training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub batches_tracked: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f32>,
    /// Unbiased estimate.
    pub var: Vec<f32>,
}

/// Parameters and buffers of one batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// One-element counter of folded training batches.
    pub batches_tracked: ParamId,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: ParamId, b: Option<ParamId>, k: usize, pad: usize },
    ConvTranspose2 { x: Var, w: ParamId, b: Option<ParamId> },
    BatchNorm { x: Var, gamma: ParamId, beta: ParamId, xhat: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u8> },
    Upsample2 { x: Var },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Sigmoid { x: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Input,
            Op::Conv { k, .. } => OpKind::Conv { kernel: *k },
            Op::ConvTranspose2 { .. } => OpKind::ConvTranspose2,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2 { .. } => OpKind::Upsample2,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add { .. } => OpKind::Add,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
        }
    }
}

/// Operation kind as exposed by [`Graph::trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Conv { kernel: usize },
    ConvTranspose2,
    BatchNorm,
    Relu,
    MaxPool2,
    Upsample2,
    Concat,
    Add,
    Sigmoid,
}

/// One recorded node: its operation and output shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub op: OpKind,
    pub shape: [usize; 4],
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed like the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Vec<f32>>>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    #[cfg(test)]
    pub(crate) fn from_params(params: Vec<Option<Vec<f32>>>) -> Self {
        Self { params, leaves: HashMap::new() }
    }

    pub fn param(&self, id: ParamId) -> Option<&[f32]> {
        self.params.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    training: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Graph<'a> {
    /// `training` selects batch statistics (and records them) in batch norm.
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Self { store, nodes: Vec::new(), training, bn_updates: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes.iter().map(|n| TraceEntry { op: n.op.kind(), shape: n.value.shape() }).collect()
    }

    /// Stride-1 `k×k` convolution with `pad` zero padding. Weight layout `[co, ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, k: usize, pad: usize) -> Var {
        let xt = &self.nodes[x.0].value;
        let [n, c, h, wd] = xt.shape();
        assert_eq!(2 * pad + 1, k, "only 'same' convolutions are supported");
        let wp = self.store.get(w);
        let co = wp.shape[0];
        assert_eq!(wp.shape, vec![co, c, k, k], "conv weight {} does not fit input channels {c}", wp.name);
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = Tensor::zeros([n, co, h, wd]);
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
        for i in 0..n {
            let xs = xt.sample(i);
            let src: &[f32] = if k == 1 {
                xs
            } else {
                im2col(xs, c, h, wd, k, pad, &mut cols);
                &cols
            };
            gemm_nn(co, ckk, hw, &wp.value, src, out.sample_mut(i), 0.0);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, &self.store.get(b).value);
        }
        self.push(out, Op::Conv { x, w, b, k, pad })
    }

    /// 2×2 stride-2 transposed convolution. Weight layout `[ci, co, 2, 2]`.
    pub fn conv_transpose2(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let xt = &self.nodes[x.0].value;
        let [n, c, h, wd] = xt.shape();
        let wp = self.store.get(w);
        let co = wp.shape[1];
        assert_eq!(wp.shape, vec![c, co, 2, 2], "transposed conv weight {} does not fit input", wp.name);
        let hw = h * wd;
        let mut grouped = vec![0.0; co * 4 * hw];
        let mut out = Tensor::zeros([n, co, 2 * h, 2 * wd]);
        for i in 0..n {
            gemm_tn(co * 4, c, hw, &wp.value, xt.sample(i), &mut grouped, 0.0);
            scatter_2x2(&grouped, co, h, wd, out.sample_mut(i));
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, &self.store.get(b).value);
        }
        self.push(out, Op::ConvTranspose2 { x, w, b })
    }

    /// Batch statistics in training mode; running statistics in inference
    /// mode once at least one training batch has been folded into them.
    pub fn batch_norm(&mut self, x: Var, p: BnParams) -> Var {
        let BnParams { gamma, beta, running_mean, running_var, batches_tracked } = p;
        let xt = &self.nodes[x.0].value;
        let [n, c, h, w] = xt.shape();
        let hw = h * w;
        let count = (n * hw) as f64;
        let batch_stats = self.training || self.store.get(batches_tracked).value[0] == 0.0;
        let (mean, var): (Vec<f32>, Vec<f32>) = if batch_stats {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for i in 0..n {
                    s += xt.sample(i)[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
                }
                let m = s / count;
                let mut ss = 0.0f64;
                for i in 0..n {
                    ss += xt.sample(i)[ch * hw..(ch + 1) * hw].iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
                }
                mean[ch] = m as f32;
                var[ch] = (ss / count) as f32;
            }
            let unbiased = var
                .iter()
                .map(|&v| if count > 1.0 { (v as f64 * count / (count - 1.0)) as f32 } else { v })
                .collect();
            if self.training {
                self.bn_updates.push(BnUpdate { batches_tracked, running_mean, running_var, mean: mean.clone(), var: unbiased });
            }
            (mean, var)
        } else {
            (self.store.get(running_mean).value.clone(), self.store.get(running_var).value.clone())
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = &self.store.get(gamma).value;
        let bt = &self.store.get(beta).value;
        let mut xhat = vec![0.0f32; xt.len()];
        let mut out = Tensor::zeros(xt.shape());
        for i in 0..n {
            let xs = xt.sample(i);
            let base = i * c * hw;
            let os = out.sample_mut(i);
            for ch in 0..c {
                for p in ch * hw..(ch + 1) * hw {
                    let xh = (xs[p] - mean[ch]) * inv_std[ch];
                    xhat[base + p] = xh;
                    os[p] = g[ch] * xh + bt[ch];
                }
            }
        }
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid { x })
    }

    /// 2×2 max pooling; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xt = &self.nodes[x.0].value;
        let [n, c, h, w] = xt.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial dims, got {h}×{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u8; n * c * oh * ow];
        let od = out.data_mut();
        let xd = xt.data();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = 0u8;
                    for (o, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = src[(2 * y + dy) * w + 2 * xx + dx];
                        if v > best {
                            best = v;
                            arg = o as u8;
                        }
                    }
                    let idx = plane * oh * ow + y * ow + xx;
                    od[idx] = best;
                    argmax[idx] = arg;
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xt = &self.nodes[x.0].value;
        let [n, c, h, w] = xt.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        let od = out.data_mut();
        for plane in 0..n * c {
            let src = &xt.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut od[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2 { x })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let out = Tensor::concat_channels(&tensors);
        self.push(out, Op::Concat { parts: parts.to_vec() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let at = &self.nodes[a.0].value;
        let bt = &self.nodes[b.0].value;
        assert_eq!(at.shape(), bt.shape(), "add needs equal shapes");
        let mut out = at.clone();
        out.data_mut().iter_mut().zip(bt.data()).for_each(|(o, v)| *o += v);
        self.push(out, Op::Add { a, b })
    }

    /// Reverse pass seeded with `seed_grad` at `output`.
    pub fn backward(&self, output: Var, seed_grad: Tensor) -> Gradients {
        assert_eq!(seed_grad.shape(), self.nodes[output.0].value.shape(), "seed gradient shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Vec<f32>>> = vec![None; self.store.len()];
        let mut leaves = HashMap::new();
        grads[output.0] = Some(seed_grad);

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    leaves.insert(idx, dy);
                }
                Op::Conv { x, w, b, k, pad } => {
                    let xt = &self.nodes[x.0].value;
                    let [n, c, h, wd] = xt.shape();
                    let wp = self.store.get(*w);
                    let co = wp.shape[0];
                    let hw = h * wd;
                    let ckk = c * k * k;
                    let dw = param_grad(&mut params, *w, wp.value.len());
                    let mut dx = Tensor::zeros(xt.shape());
                    let mut cols = vec![0.0; ckk * hw];
                    let mut dcols = vec![0.0; ckk * hw];
                    for i in 0..n {
                        let dys = dy.sample(i);
                        if *k == 1 {
                            gemm_nt(co, hw, ckk, dys, xt.sample(i), dw, 1.0);
                            gemm_tn(ckk, co, hw, &wp.value, dys, dx.sample_mut(i), 0.0);
                        } else {
                            im2col(xt.sample(i), c, h, wd, *k, *pad, &mut cols);
                            gemm_nt(co, hw, ckk, dys, &cols, dw, 1.0);
                            gemm_tn(ckk, co, hw, &wp.value, dys, &mut dcols, 0.0);
                            col2im(&dcols, c, h, wd, *k, *pad, dx.sample_mut(i));
                        }
                    }
                    if let Some(b) = b {
                        accumulate_bias_grad(&dy, param_grad(&mut params, *b, co));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConvTranspose2 { x, w, b } => {
                    let xt = &self.nodes[x.0].value;
                    let [n, c, h, wd] = xt.shape();
                    let wp = self.store.get(*w);
                    let co = wp.shape[1];
                    let hw = h * wd;
                    let dw = param_grad(&mut params, *w, wp.value.len());
                    let mut dx = Tensor::zeros(xt.shape());
                    let mut grouped = vec![0.0; co * 4 * hw];
                    for i in 0..n {
                        gather_2x2(dy.sample(i), co, h, wd, &mut grouped);
                        gemm_nn(c, co * 4, hw, &wp.value, &grouped, dx.sample_mut(i), 0.0);
                        gemm_nt(c, hw, co * 4, xt.sample(i), &grouped, dw, 1.0);
                    }
                    if let Some(b) = b {
                        accumulate_bias_grad(&dy, param_grad(&mut params, *b, co));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let [n, c, h, w] = dy.shape();
                    let hw = h * w;
                    let m = (n * hw) as f32;
                    let g = &self.store.get(*gamma).value;
                    let mut dgamma = vec![0.0f32; c];
                    let mut dbeta = vec![0.0f32; c];
                    for i in 0..n {
                        let dys = dy.sample(i);
                        let base = i * c * hw;
                        for ch in 0..c {
                            for p in ch * hw..(ch + 1) * hw {
                                dgamma[ch] += dys[p] * xhat[base + p];
                                dbeta[ch] += dys[p];
                            }
                        }
                    }
                    let mut dx = Tensor::zeros(dy.shape());
                    for i in 0..n {
                        let dys = dy.sample(i);
                        let base = i * c * hw;
                        let dxs = dx.sample_mut(i);
                        for ch in 0..c {
                            let scale = g[ch] * inv_std[ch];
                            for p in ch * hw..(ch + 1) * hw {
                                dxs[p] = if *batch_stats {
                                    scale * (dys[p] - dbeta[ch] / m - xhat[base + p] * dgamma[ch] / m)
                                } else {
                                    scale * dys[p]
                                };
                            }
                        }
                    }
                    add_into(param_grad(&mut params, *gamma, c), &dgamma);
                    add_into(param_grad(&mut params, *beta, c), &dbeta);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu { x } => {
                    let mut dx = dy;
                    for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let mut dx = dy;
                    for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let [n, c, h, w] = self.nodes[x.0].value.shape();
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    let dxd = dx.data_mut();
                    for plane in 0..n * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let idx = plane * oh * ow + y * ow + xx;
                                let a = argmax[idx] as usize;
                                let (dy_off, dx_off) = (a / 2, a % 2);
                                dxd[plane * h * w + (2 * y + dy_off) * w + 2 * xx + dx_off] += dy.data()[idx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2 { x } => {
                    let [n, c, h, w] = self.nodes[x.0].value.shape();
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    let dxd = dx.data_mut();
                    for plane in 0..n * c {
                        let src = &dy.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dxd[plane * h * w + (y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { parts } => {
                    let [n, _, h, w] = dy.shape();
                    let hw = h * w;
                    let mut offset = 0;
                    for p in parts {
                        let cp = self.nodes[p.0].value.channels();
                        let mut dp = Tensor::zeros([n, cp, h, w]);
                        for i in 0..n {
                            let src = &dy.sample(i)[offset * hw..(offset + cp) * hw];
                            dp.sample_mut(i).copy_from_slice(src);
                        }
                        offset += cp;
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, dy.clone());
                    accumulate(&mut grads, *a, dy);
                }
            }
        }
        Gradients { params, leaves }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn param_grad(params: &mut [Option<Vec<f32>>], id: ParamId, len: usize) -> &mut Vec<f32> {
    params[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing.data_mut(), g.data()),
        slot => *slot = Some(g),
    }
}

fn add_channel_bias(t: &mut Tensor, bias: &[f32]) {
    let [n, c, h, w] = t.shape();
    let hw = h * w;
    for i in 0..n {
        let s = t.sample_mut(i);
        for ch in 0..c {
            s[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += bias[ch]);
        }
    }
}

fn accumulate_bias_grad(dy: &Tensor, db: &mut [f32]) {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    for i in 0..n {
        let s = dy.sample(i);
        for ch in 0..c {
            db[ch] += s[ch * hw..(ch + 1) * hw].iter().sum::<f32>();
        }
    }
}

/// `grouped[(co·4 + a·2 + b), y·w + x]` → `out[co, 2y + a, 2x + b]`.
fn scatter_2x2(grouped: &[f32], co: usize, h: usize, w: usize, out: &mut [f32]) {
    let hw = h * w;
    let ow = 2 * w;
    for o in 0..co {
        for a in 0..2 {
            for b in 0..2 {
                let row = &grouped[(o * 4 + a * 2 + b) * hw..(o * 4 + a * 2 + b + 1) * hw];
                let plane = &mut out[o * 4 * hw..(o + 1) * 4 * hw];
                for y in 0..h {
                    for x in 0..w {
                        plane[(2 * y + a) * ow + 2 * x + b] = row[y * w + x];
                    }
                }
            }
        }
    }
}

fn gather_2x2(dout: &[f32], co: usize, h: usize, w: usize, grouped: &mut [f32]) {
    let hw = h * w;
    let ow = 2 * w;
    for o in 0..co {
        for a in 0..2 {
            for b in 0..2 {
                let row = &mut grouped[(o * 4 + a * 2 + b) * hw..(o * 4 + a * 2 + b + 1) * hw];
                let plane = &dout[o * 4 * hw..(o + 1) * 4 * hw];
                for y in 0..h {
                    for x in 0..w {
                        row[y * w + x] = plane[(2 * y + a) * ow + 2 * x + b];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Loss = <out, probe> for a fixed random probe; compares analytic input and
    /// parameter gradients against central differences in f64-accumulated f32.
    fn check_gradients(store: &mut ParamStore, input: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (probe, grads, input_var) = {
            let mut g = Graph::new(store, true);
            let x = g.input(input.clone());
            let out = build(&mut g, x);
            let shape = g.value(out).shape();
            let probe = Tensor::from_vec(shape, random_vec(&mut rng, shape.iter().product()));
            let grads = g.backward(out, probe.clone());
            (probe, grads, x)
        };
        let loss = |store: &ParamStore, input: &Tensor| -> f64 {
            let mut g = Graph::new(store, true);
            let x = g.input(input.clone());
            let out = build(&mut g, x);
            g.value(out).data().iter().zip(probe.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let h = 1e-2f32;
        let tol = |a: f64, n: f64| (a - n).abs() <= 2e-2 * a.abs().max(n.abs()).max(1e-1);
        let dx = grads.leaf(input_var).expect("input grad");
        for idx in (0..input.len()).step_by(7) {
            let mut plus = input.clone();
            plus.data_mut()[idx] += h;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= h;
            let num = (loss(store, &plus) - loss(store, &minus)) / (2.0 * h as f64);
            let ana = dx.data()[idx] as f64;
            assert!(tol(ana, num), "input grad {idx}: analytic {ana} numeric {num}");
        }
        for id in 0..store.len() {
            if !store.get(id).trainable {
                continue;
            }
            let ana_all = grads.param(id).expect("param grad").to_vec();
            for j in (0..store.get(id).value.len()).step_by(5) {
                let orig = store.get(id).value[j];
                store.get_mut(id).value[j] = orig + h;
                let lp = loss(store, &input);
                store.get_mut(id).value[j] = orig - h;
                let lm = loss(store, &input);
                store.get_mut(id).value[j] = orig;
                let num = (lp - lm) / (2.0 * h as f64);
                let ana = ana_all[j] as f64;
                assert!(tol(ana, num), "param {} [{j}]: analytic {ana} numeric {num}", store.get(id).name);
            }
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        Tensor::from_vec(shape, random_vec(rng, shape.iter().product()))
    }

    #[test]
    fn conv3x3_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.insert("w".into(), vec![4, 2, 3, 3], random_vec(&mut rng, 72), true);
        let b = store.insert("b".into(), vec![4], random_vec(&mut rng, 4), true);
        let x = rand_tensor(&mut rng, [2, 2, 5, 4]);
        check_gradients(&mut store, x, |g, x| g.conv2d(x, w, Some(b), 3, 1));
    }

    #[test]
    fn conv1x1_and_transpose_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w1 = store.insert("w1".into(), vec![3, 2, 1, 1], random_vec(&mut rng, 6), true);
        let wt = store.insert("wt".into(), vec![3, 2, 2, 2], random_vec(&mut rng, 24), true);
        let bt = store.insert("bt".into(), vec![2], random_vec(&mut rng, 2), true);
        let x = rand_tensor(&mut rng, [2, 2, 3, 3]);
        check_gradients(&mut store, x, |g, x| {
            let y = g.conv2d(x, w1, None, 1, 0);
            g.conv_transpose2(y, wt, Some(bt))
        });
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gamma = store.insert("g".into(), vec![3], random_vec(&mut rng, 3), true);
        let beta = store.insert("b".into(), vec![3], random_vec(&mut rng, 3), true);
        let running_mean = store.insert("rm".into(), vec![3], vec![0.0; 3], false);
        let running_var = store.insert("rv".into(), vec![3], vec![1.0; 3], false);
        let batches_tracked = store.insert("n".into(), vec![1], vec![0.0], false);
        let p = BnParams { gamma, beta, running_mean, running_var, batches_tracked };
        let x = rand_tensor(&mut rng, [2, 3, 3, 3]);
        check_gradients(&mut store, x, |g, x| g.batch_norm(x, p));
    }

    #[test]
    fn pooling_upsampling_concat_add_sigmoid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let w = store.insert("w".into(), vec![2, 4, 1, 1], random_vec(&mut rng, 8), true);
        let x = rand_tensor(&mut rng, [1, 2, 4, 4]);
        check_gradients(&mut store, x, |g, x| {
            let p = g.max_pool2(x);
            let u = g.upsample2(p);
            let c = g.concat(&[u, x]);
            let y = g.conv2d(c, w, None, 1, 0);
            let s = g.add(y, x);
            let r = g.relu(s);
            g.sigmoid(r)
        });
    }

    #[test]
    fn batch_norm_eval_mode_uses_running_stats() {
        let mut store = ParamStore::new();
        let gamma = store.insert("g".into(), vec![1], vec![2.0], true);
        let beta = store.insert("b".into(), vec![1], vec![0.5], true);
        let running_mean = store.insert("rm".into(), vec![1], vec![1.0], false);
        let running_var = store.insert("rv".into(), vec![1], vec![4.0 - BN_EPS], false);
        let batches_tracked = store.insert("n".into(), vec![1], vec![1.0], false);
        let p = BnParams { gamma, beta, running_mean, running_var, batches_tracked };
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::from_vec([1, 1, 1, 2], vec![3.0, -1.0]));
        let y = g.batch_norm(x, p);
        assert_eq!(g.value(y).data(), &[2.5, -1.5]);
        assert!(g.take_bn_updates().is_empty());
    }

    #[test]
    fn batch_norm_eval_mode_without_tracked_batches_uses_batch_stats() {
        let mut store = ParamStore::new();
        let gamma = store.insert("g".into(), vec![1], vec![1.0], true);
        let beta = store.insert("b".into(), vec![1], vec![0.0], true);
        let running_mean = store.insert("rm".into(), vec![1], vec![0.0], false);
        let running_var = store.insert("rv".into(), vec![1], vec![1.0], false);
        let batches_tracked = store.insert("n".into(), vec![1], vec![0.0], false);
        let p = BnParams { gamma, beta, running_mean, running_var, batches_tracked };
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::from_vec([1, 1, 1, 2], vec![101.0, 99.0]));
        let y = g.batch_norm(x, p);
        let out = g.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-4 && (out[1] + 1.0).abs() < 1e-4, "{out:?}");
        assert!(g.take_bn_updates().is_empty());
    }

    #[test]
    fn training_batch_norm_reports_unbiased_running_update() {
        let mut store = ParamStore::new();
        let gamma = store.insert("g".into(), vec![1], vec![1.0], true);
        let beta = store.insert("b".into(), vec![1], vec![0.0], true);
        let rm = store.insert("rm".into(), vec![1], vec![0.0], false);
        let rv = store.insert("rv".into(), vec![1], vec![1.0], false);
        let n = store.insert("n".into(), vec![1], vec![0.0], false);
        let p = BnParams { gamma, beta, running_mean: rm, running_var: rv, batches_tracked: n };
        let updates = {
            let mut g = Graph::new(&store, true);
            let x = g.input(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]));
            g.batch_norm(x, p);
            g.take_bn_updates()
        };
        assert_eq!(updates[0].mean, vec![2.0]);
        assert_eq!(updates[0].var, vec![2.0]);
        store.apply_bn_updates(updates);
        assert!((store.get(rm).value[0] - 0.2).abs() < 1e-6);
        assert!((store.get(rv).value[0] - 1.1).abs() < 1e-6);
        assert_eq!(store.get(n).value[0], 1.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-200.0) >= 0.0 && sigmoid(-200.0).is_finite());
        assert!(sigmoid(200.0) <= 1.0);
    }
}
