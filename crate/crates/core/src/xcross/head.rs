use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::dot;
use crate::numerics::{gelu, gelu_grad, Parameter, Tensor};

const HEAD_INIT_STD: f64 = 0.02;

/// `[CLS]` pooler followed by a linear scoring head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolerScorer {
    pub w_p: Parameter,
    pub b_p: Parameter,
    pub v_c: Parameter,
    pub b_c: Parameter,
}

pub struct HeadCache {
    h0: Vec<f64>,
    pre: Vec<f64>,
    pooled: Vec<f64>,
}

impl PoolerScorer {
    pub fn new(d: usize, seed: u64) -> Self {
        let mut rng = super::head_rng(seed);
        Self {
            w_p: Parameter::trainable(Tensor::randn(&[d, d], HEAD_INIT_STD, &mut rng)),
            b_p: Parameter::trainable(Tensor::zeros(&[d])),
            v_c: Parameter::trainable(Tensor::randn(&[d], HEAD_INIT_STD, &mut rng)),
            b_c: Parameter::trainable(Tensor::zeros(&[1])),
        }
    }

    pub fn width(&self) -> usize {
        self.b_p.numel()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let ok = self.w_p.shape() == [d, d]
            && self.b_p.shape() == [d]
            && self.v_c.shape() == [d]
            && self.b_c.shape() == [1];
        if ok {
            Ok(())
        } else {
            Err(Error::shape("pooler/scorer", self.w_p.shape(), &[d, d]))
        }
    }

    pub fn params(&self) -> [(&'static str, &Parameter); 4] {
        [("w_p", &self.w_p), ("b_p", &self.b_p), ("v_c", &self.v_c), ("b_c", &self.b_c)]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Parameter); 4] {
        [
            ("w_p", &mut self.w_p),
            ("b_p", &mut self.b_p),
            ("v_c", &mut self.v_c),
            ("b_c", &mut self.b_c),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Score from the `[CLS]` row.
    pub fn forward(&self, h0: &[f64]) -> (f64, HeadCache) {
        let w = &self.w_p.value;
        let pre: Vec<f64> = (0..w.rows())
            .map(|i| dot(w.row(i), h0) + self.b_p.value.data()[i])
            .collect();
        let pooled: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let s = dot(self.v_c.value.data(), &pooled) + self.b_c.value.data()[0];
        (
            s,
            HeadCache {
                h0: h0.to_vec(),
                pre,
                pooled,
            },
        )
    }

    /// Accumulates head gradients for `dscore` and returns `∂/∂h0`.
    pub fn backward(&mut self, cache: &HeadCache, dscore: f64) -> Result<Vec<f64>> {
        let d = self.width();
        let dpre: Vec<f64> = self
            .v_c
            .value
            .data()
            .iter()
            .zip(&cache.pre)
            .map(|(v, &u)| dscore * v * gelu_grad(u))
            .collect();
        let mut dh0 = vec![0.0; d];
        let w = self.w_p.value.data();
        for (i, &g) in dpre.iter().enumerate() {
            if g != 0.0 {
                crate::numerics::ops::axpy_slice(&mut dh0, g, &w[i * d..(i + 1) * d]);
            }
        }
        if self.w_p.trainable {
            let gw = self.w_p.grad.data_mut();
            for (i, &g) in dpre.iter().enumerate() {
                crate::numerics::ops::axpy_slice(&mut gw[i * d..(i + 1) * d], g, &cache.h0);
            }
        }
        self.b_p.accumulate_slice(&dpre)?;
        let dv: Vec<f64> = cache.pooled.iter().map(|p| dscore * p).collect();
        self.v_c.accumulate_slice(&dv)?;
        self.b_c.accumulate_slice(&[dscore])?;
        Ok(dh0)
    }
}

/// `GELU(W_p · h_final[0] + b_p)`.
pub fn pool(head: &PoolerScorer, h_final: &Tensor) -> Result<Vec<f64>> {
    if h_final.is_empty() || !h_final.is_matrix() {
        return Err(Error::Input("cannot pool an empty sequence".into()));
    }
    if h_final.cols() != head.width() {
        return Err(Error::shape("pool", h_final.shape(), &[h_final.rows(), head.width()]));
    }
    Ok(head.forward(h_final.row(0)).1.pooled)
}

/// `V_cᵀ · pooled + b_c`.
pub fn score(head: &PoolerScorer, pooled: &[f64]) -> Result<f64> {
    if pooled.len() != head.width() {
        return Err(Error::shape("score", &[pooled.len()], &[head.width()]));
    }
    Ok(dot(head.v_c.value.data(), pooled) + head.b_c.value.data()[0])
}
