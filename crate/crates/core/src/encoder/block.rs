//! One post-layer-norm transformer block: forward with cache and the
//! hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::lora::{LoraAdapter, LoraSet, Projection};
use crate::numerics::ops::{
    gelu, gelu_grad, gemm, gemm_nn, gemm_nt, gemm_tn, layer_norm_row, layer_norm_row_backward,
    softmax_backward_in_place, softmax_in_place, transpose_into, View,
};
use crate::numerics::{Parameter, Tensor};

/// Weights are stored `out×in` and applied as `X·Wᵀ + b` on token rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderLayer {
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    pub ln1_gain: Parameter,
    pub ln1_bias: Parameter,
    pub ln2_gain: Parameter,
    pub ln2_bias: Parameter,
}

pub(crate) const LAYER_PARAM_NAMES: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias", "ln2_gain",
    "ln2_bias",
];

impl EncoderLayer {
    pub(crate) fn params(&self) -> [&Parameter; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Parameter; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// Adapter pair (query, value) for one layer together with multipliers.
#[derive(Clone, Copy)]
pub(crate) struct LayerAdapters<'a> {
    pub query: Option<(&'a LoraAdapter, f64)>,
    pub value: Option<(&'a LoraAdapter, f64)>,
}

impl<'a> LayerAdapters<'a> {
    pub fn from_set(set: Option<&'a LoraSet>, layer: usize) -> Self {
        let pick = |p| set.and_then(|s| s.layer(layer, p).map(|a| (a, s.multiplier(a))));
        Self {
            query: pick(Projection::Query),
            value: pick(Projection::Value),
        }
    }
}

pub(crate) struct BlockCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    lora_q: Option<Vec<f64>>,
    lora_v: Option<Vec<f64>>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    xhat1: Vec<f64>,
    inv1: Vec<f64>,
    y1: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
    xhat2: Vec<f64>,
    inv2: Vec<f64>,
}

impl BlockCache {
    pub(crate) fn input_rows(&self, d: usize) -> usize {
        self.x.len() / d
    }
}

/// Gradients for one layer's base weights, same order as `LAYER_PARAM_NAMES`.
pub(crate) struct LayerGrads(pub [Vec<f64>; 16]);

pub(crate) struct AdapterGrads {
    pub query: Option<(Vec<f64>, Vec<f64>)>,
    pub value: Option<(Vec<f64>, Vec<f64>)>,
}

pub(crate) struct Dims {
    pub len: usize,
    /// Output rows: queries, feed-forward and norms run on the first `rows`
    /// tokens only, while keys and values cover all `len`.
    pub rows: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub eps: f64,
}

fn linear(x: &[f64], w: &Tensor, b: &Tensor, len: usize, out: &mut [f64]) {
    let (dout, din) = (w.rows(), w.cols());
    gemm_nt(x, w.data(), len, din, dout, out, false);
    let bias = b.data();
    for row in out.chunks_mut(dout) {
        for (o, bv) in row.iter_mut().zip(bias) {
            *o += bv;
        }
    }
}

/// Adds `s·(X·Bᵀ)·Aᵀ` to `out`, returning the scaled `s·X·Bᵀ` for backward.
fn lora_forward(x: &[f64], adapter: &LoraAdapter, s: f64, len: usize, out: &mut [f64]) -> Vec<f64> {
    let (d_out, r) = (adapter.a.shape()[0], adapter.rank);
    let d_in = adapter.b.shape()[1];
    let mut t = vec![0.0; len * r];
    gemm_nt(x, adapter.b.value.data(), len, d_in, r, &mut t, false);
    t.iter_mut().for_each(|v| *v *= s);
    gemm_nt(&t, adapter.a.value.data(), len, r, d_out, out, true);
    t
}

fn col_sum(dy: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in dy.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub(crate) fn forward(
    layer: &EncoderLayer,
    adapters: LayerAdapters<'_>,
    x: &[f64],
    dims: &Dims,
    keep_cache: bool,
) -> (Vec<f64>, Option<BlockCache>) {
    let Dims {
        len,
        rows,
        d,
        heads,
        d_ff,
        eps,
    } = *dims;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let xq = &x[..rows * d];

    let mut q = vec![0.0; rows * d];
    let mut k = vec![0.0; len * d];
    let mut v = vec![0.0; len * d];
    linear(xq, &layer.wq.value, &layer.bq.value, rows, &mut q);
    linear(x, &layer.wk.value, &layer.bk.value, len, &mut k);
    linear(x, &layer.wv.value, &layer.bv.value, len, &mut v);
    let lora_q = adapters.query.map(|(a, s)| lora_forward(xq, a, s, rows, &mut q));
    let lora_v = adapters.value.map(|(a, s)| lora_forward(x, a, s, len, &mut v));

    let mut probs = vec![0.0; heads * rows * len];
    let mut ctx = vec![0.0; rows * d];
    let mut kt = Vec::new();
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * rows * len..(h + 1) * rows * len];
        transpose_into(&k[off..], d, len, dh, &mut kt);
        gemm(View::rows(&q[off..], d), &kt, len, rows, dh, len, p, len, false);
        for prow in p.chunks_mut(len) {
            prow.iter_mut().for_each(|v| *v *= scale);
            softmax_in_place(prow);
        }
        gemm(View::rows(p, len), &v[off..], d, rows, len, dh, &mut ctx[off..], d, false);
    }

    let mut u = vec![0.0; rows * d];
    linear(&ctx, &layer.wo.value, &layer.bo.value, rows, &mut u);
    for (ui, xi) in u.iter_mut().zip(xq) {
        *ui += xi;
    }
    let len = rows;
    let mut y1 = vec![0.0; len * d];
    let mut xhat1 = vec![0.0; len * d];
    let mut inv1 = vec![0.0; len];
    let (g1, b1) = (layer.ln1_gain.value.data(), layer.ln1_bias.value.data());
    for t in 0..len {
        let r = t * d..(t + 1) * d;
        inv1[t] = layer_norm_row(&u[r.clone()], g1, b1, eps, &mut y1[r.clone()], &mut xhat1[r]);
    }

    let mut f1 = vec![0.0; len * d_ff];
    linear(&y1, &layer.w1.value, &layer.b1.value, len, &mut f1);
    let g: Vec<f64> = f1.iter().map(|&v| gelu(v)).collect();
    let mut u2 = vec![0.0; len * d];
    linear(&g, &layer.w2.value, &layer.b2.value, len, &mut u2);
    for (ui, yi) in u2.iter_mut().zip(&y1) {
        *ui += yi;
    }
    let mut out = vec![0.0; len * d];
    let mut xhat2 = vec![0.0; len * d];
    let mut inv2 = vec![0.0; len];
    let (g2, b2) = (layer.ln2_gain.value.data(), layer.ln2_bias.value.data());
    for t in 0..len {
        let r = t * d..(t + 1) * d;
        inv2[t] = layer_norm_row(&u2[r.clone()], g2, b2, eps, &mut out[r.clone()], &mut xhat2[r]);
    }

    let cache = keep_cache.then(|| BlockCache {
        x: x.to_vec(),
        q,
        k,
        v,
        lora_q,
        lora_v,
        probs,
        ctx,
        xhat1,
        inv1,
        y1,
        f1,
        g,
        xhat2,
        inv2,
    });
    (out, cache)
}

/// Attention probabilities of head `h` as a `rows×len` row-major slice.
#[cfg(test)]
pub(crate) fn attention_probs(cache: &BlockCache, h: usize, rows: usize, len: usize) -> &[f64] {
    &cache.probs[h * rows * len..(h + 1) * rows * len]
}

/// Backward through a linear map. Accumulates `dX` and returns `(dW, db)`
/// when `want_weights`.
fn linear_backward(
    dy: &[f64],
    x: &[f64],
    w: &Tensor,
    len: usize,
    dx: &mut [f64],
    want_weights: bool,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (dout, din) = (w.rows(), w.cols());
    gemm_nn(dy, w.data(), len, dout, din, dx, true);
    want_weights.then(|| {
        let mut dw = vec![0.0; dout * din];
        gemm_tn(dy, x, len, dout, din, &mut dw, false);
        (dw, col_sum(dy, dout))
    })
}

/// Backward through the adapter path; accumulates into `dx` and returns
/// `(dA, dB)` when requested.
fn lora_backward(
    dy: &[f64],
    x: &[f64],
    t_scaled: &[f64],
    adapter: &LoraAdapter,
    s: f64,
    len: usize,
    dx: &mut [f64],
    want_grads: bool,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (d_out, r) = (adapter.a.shape()[0], adapter.rank);
    let d_in = adapter.b.shape()[1];
    // dT = s · dY · A   (len×r)
    let mut dt = vec![0.0; len * r];
    gemm_nn(dy, adapter.a.value.data(), len, d_out, r, &mut dt, false);
    dt.iter_mut().for_each(|v| *v *= s);
    gemm_nn(&dt, adapter.b.value.data(), len, r, d_in, dx, true);
    want_grads.then(|| {
        let mut da = vec![0.0; d_out * r];
        gemm_tn(dy, t_scaled, len, d_out, r, &mut da, false);
        let mut db = vec![0.0; r * d_in];
        gemm_tn(&dt, x, len, r, d_in, &mut db, false);
        (da, db)
    })
}

pub(crate) fn backward(
    layer: &EncoderLayer,
    adapters: LayerAdapters<'_>,
    cache: &BlockCache,
    dy: &[f64],
    dims: &Dims,
    want_weights: bool,
    want_adapters: bool,
) -> (Vec<f64>, Option<LayerGrads>, Option<AdapterGrads>) {
    let Dims {
        len: full,
        rows: len,
        d,
        heads,
        d_ff,
        ..
    } = *dims;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Second add & norm.
    let mut du2 = vec![0.0; len * d];
    let mut dln2_g = want_weights.then(|| vec![0.0; d]);
    let mut dln2_b = want_weights.then(|| vec![0.0; d]);
    let g2 = layer.ln2_gain.value.data();
    for t in 0..len {
        let r = t * d..(t + 1) * d;
        layer_norm_row_backward(
            &dy[r.clone()],
            &cache.xhat2[r.clone()],
            cache.inv2[t],
            g2,
            &mut du2[r],
            dln2_g.as_deref_mut(),
            dln2_b.as_deref_mut(),
        );
    }

    // Feed-forward.
    let mut dg = vec![0.0; len * d_ff];
    let w2_grads = linear_backward(&du2, &cache.g, &layer.w2.value, len, &mut dg, want_weights);
    for (dgi, &fi) in dg.iter_mut().zip(&cache.f1) {
        *dgi *= gelu_grad(fi);
    }
    let mut dy1 = du2;
    let w1_grads = linear_backward(&dg, &cache.y1, &layer.w1.value, len, &mut dy1, want_weights);

    // First add & norm.
    let mut du = vec![0.0; len * d];
    let mut dln1_g = want_weights.then(|| vec![0.0; d]);
    let mut dln1_b = want_weights.then(|| vec![0.0; d]);
    let g1 = layer.ln1_gain.value.data();
    for t in 0..len {
        let r = t * d..(t + 1) * d;
        layer_norm_row_backward(
            &dy1[r.clone()],
            &cache.xhat1[r.clone()],
            cache.inv1[t],
            g1,
            &mut du[r],
            dln1_g.as_deref_mut(),
            dln1_b.as_deref_mut(),
        );
    }

    // Output projection; the residual passes `du` straight to `dx`.
    let mut dctx = vec![0.0; len * d];
    let wo_grads = linear_backward(&du, &cache.ctx, &layer.wo.value, len, &mut dctx, want_weights);
    let rows = len;
    let len = full;
    let mut dx = du;
    dx.resize(len * d, 0.0);

    // Attention.
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; len * d];
    let mut dv = vec![0.0; len * d];
    let mut ds = vec![0.0; rows * len];
    let mut vt = Vec::new();
    for h in 0..heads {
        let off = h * dh;
        let p = &cache.probs[h * rows * len..(h + 1) * rows * len];
        // dP = dC·Vᵀ, dV += Pᵀ·dC
        transpose_into(&cache.v[off..], d, len, dh, &mut vt);
        gemm(View::rows(&dctx[off..], d), &vt, len, rows, dh, len, &mut ds, len, false);
        gemm(View::transposed(p, len), &dctx[off..], d, len, rows, dh, &mut dv[off..], d, true);
        for (prow, drow) in p.chunks(len).zip(ds.chunks_mut(len)) {
            softmax_backward_in_place(prow, drow);
            drow.iter_mut().for_each(|v| *v *= scale);
        }
        // dQ += dS·K, dK += dSᵀ·Q
        gemm(View::rows(&ds, len), &cache.k[off..], d, rows, len, dh, &mut dq[off..], d, true);
        gemm(View::transposed(&ds, len), &cache.q[off..], d, len, rows, dh, &mut dk[off..], d, true);
    }

    let x = &cache.x;
    let xq = &x[..rows * d];
    let wq_grads = linear_backward(&dq, xq, &layer.wq.value, rows, &mut dx[..rows * d], want_weights);
    let wk_grads = linear_backward(&dk, x, &layer.wk.value, len, &mut dx, want_weights);
    let wv_grads = linear_backward(&dv, x, &layer.wv.value, len, &mut dx, want_weights);

    let mut adapter_grads = AdapterGrads {
        query: None,
        value: None,
    };
    if let (Some((a, s)), Some(t)) = (adapters.query, cache.lora_q.as_deref()) {
        adapter_grads.query = lora_backward(&dq, xq, t, a, s, rows, &mut dx[..rows * d], want_adapters);
    }
    if let (Some((a, s)), Some(t)) = (adapters.value, cache.lora_v.as_deref()) {
        adapter_grads.value = lora_backward(&dv, x, t, a, s, len, &mut dx, want_adapters);
    }

    let layer_grads = if want_weights {
        let (wq, bq) = wq_grads.unwrap_or_default();
        let (wk, bk) = wk_grads.unwrap_or_default();
        let (wv, bv) = wv_grads.unwrap_or_default();
        let (wo, bo) = wo_grads.unwrap_or_default();
        let (w1, b1) = w1_grads.unwrap_or_default();
        let (w2, b2) = w2_grads.unwrap_or_default();
        Some(LayerGrads([
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            w1,
            b1,
            w2,
            b2,
            dln1_g.unwrap_or_default(),
            dln1_b.unwrap_or_default(),
            dln2_g.unwrap_or_default(),
            dln2_b.unwrap_or_default(),
        ]))
    } else {
        None
    };
    let adapter_grads = (want_adapters && (adapter_grads.query.is_some() || adapter_grads.value.is_some()))
        .then_some(adapter_grads);
    (dx, layer_grads, adapter_grads)
}
