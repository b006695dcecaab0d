//! Sequence encoder standing in for a pretrained language model: token plus
//! positional embeddings, single-head self-attention blocks with residual
//! feed-forward layers, and mean pooling over non-PAD positions.

use rand::Rng;

use super::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, Tensor};
use crate::error::{Error, Result};
use crate::graph::EncoderHandle;
use crate::tokenizer::{TokenId, TokenSequence, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl EncoderLayer {
    fn init<R: Rng>(d: usize, f: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            wq: Tensor::uniform(&[d, d], scale, rng),
            wk: Tensor::uniform(&[d, d], scale, rng),
            wv: Tensor::uniform(&[d, d], scale, rng),
            wo: Tensor::uniform(&[d, d], scale, rng),
            w1: Tensor::uniform(&[d, f], scale, rng),
            b1: Tensor::uniform(&[f], scale, rng),
            w2: Tensor::uniform(&[f, d], scale, rng),
            b2: Tensor::uniform(&[d], scale, rng),
        }
    }

    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub frozen: bool,
}

struct LayerCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    x1: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

pub struct EncoderCache {
    ids: Vec<TokenId>,
    valid: Vec<bool>,
    n_valid: usize,
    layers: Vec<LayerCache>,
}

impl EncoderParams {
    pub fn init<R: Rng>(cfg: &EncoderConfig, scale: f64, rng: &mut R) -> Self {
        Self {
            token_emb: Tensor::uniform(&[cfg.vocab_size, cfg.d_model], scale, rng),
            pos_emb: Tensor::uniform(&[cfg.max_seq_len, cfg.d_model], scale, rng),
            layers: (0..cfg.n_layers)
                .map(|_| EncoderLayer::init(cfg.d_model, cfg.d_ff, scale, rng))
                .collect(),
            frozen: false,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            token_emb: self.token_emb.zeros_like(),
            pos_emb: self.pos_emb.zeros_like(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    wq: l.wq.zeros_like(),
                    wk: l.wk.zeros_like(),
                    wv: l.wv.zeros_like(),
                    wo: l.wo.zeros_like(),
                    w1: l.w1.zeros_like(),
                    b1: l.b1.zeros_like(),
                    w2: l.w2.zeros_like(),
                    b2: l.b2.zeros_like(),
                })
                .collect(),
            frozen: self.frozen,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn d_model(&self) -> usize {
        self.token_emb.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_emb.rows()
    }

    pub fn max_len(&self) -> usize {
        self.pos_emb.rows()
    }

    fn d_ff(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w1.cols())
    }

    pub fn forward(&self, ids: &[TokenId]) -> Result<(Vec<f64>, EncoderCache)> {
        let d = self.d_model();
        let t = ids.len();
        if t > self.max_len() {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.max_len(),
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.vocab_size(),
            });
        }
        let valid: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
        let n_valid = valid.iter().filter(|&&v| v).count();

        let mut x = vec![0.0; t * d];
        for (i, &id) in ids.iter().enumerate() {
            let e = self.token_emb.row(id as usize);
            let p = self.pos_emb.row(i);
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }

        let f = self.d_ff();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = matmul(&x, layer.wq.data(), t, d, d);
            let k = matmul(&x, layer.wk.data(), t, d, d);
            let v = matmul(&x, layer.wv.data(), t, d, d);
            let mut attn = matmul_a_bt(&q, &k, t, d, t);
            for i in 0..t {
                let row = &mut attn[i * t..(i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for j in 0..t {
                    if valid[j] {
                        row[j] *= inv_sqrt_d;
                        max = max.max(row[j]);
                    }
                }
                let mut sum = 0.0;
                for j in 0..t {
                    if valid[j] {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                if sum > 0.0 {
                    row.iter_mut().for_each(|a| *a /= sum);
                }
            }
            let ctx = matmul(&attn, &v, t, t, d);
            let proj = matmul(&ctx, layer.wo.data(), t, d, d);
            let x1: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
            let mut pre = matmul(&x1, layer.w1.data(), t, d, f);
            for i in 0..t {
                for (p, b) in pre[i * f..(i + 1) * f].iter_mut().zip(layer.b1.data()) {
                    *p += b;
                }
            }
            let hidden: Vec<f64> = pre.iter().map(|&u| u.max(0.0)).collect();
            let ff = matmul(&hidden, layer.w2.data(), t, f, d);
            let mut x2 = x1.clone();
            for i in 0..t {
                for j in 0..d {
                    x2[i * d + j] += ff[i * d + j] + layer.b2.data()[j];
                }
            }
            caches.push(LayerCache {
                x: std::mem::replace(&mut x, x2),
                q,
                k,
                v,
                attn,
                ctx,
                x1,
                pre,
                hidden,
            });
        }

        let mut out = vec![0.0; d];
        if n_valid > 0 {
            for i in (0..t).filter(|&i| valid[i]) {
                for j in 0..d {
                    out[j] += x[i * d + j];
                }
            }
            let inv = 1.0 / n_valid as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        Ok((
            out,
            EncoderCache {
                ids: ids.to_vec(),
                valid,
                n_valid,
                layers: caches,
            },
        ))
    }

    pub fn encode_ids(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        self.forward(ids).map(|(out, _)| out)
    }

    /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output).
    pub fn backward(&self, cache: &EncoderCache, grad_out: &[f64], grads: &mut EncoderParams) {
        let d = self.d_model();
        let f = self.d_ff();
        let t = cache.ids.len();
        if cache.n_valid == 0 {
            return;
        }
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let inv_n = 1.0 / cache.n_valid as f64;
        let mut dx = vec![0.0; t * d];
        for i in (0..t).filter(|&i| cache.valid[i]) {
            for j in 0..d {
                dx[i * d + j] = grad_out[j] * inv_n;
            }
        }

        for (layer, (lc, lg)) in self
            .layers
            .iter()
            .zip(cache.layers.iter().zip(grads.layers.iter_mut()))
            .rev()
        {
            // feed-forward: x2 = x1 + relu(x1 W1 + b1) W2 + b2
            let dx2 = dx;
            for i in 0..t {
                for j in 0..d {
                    lg.b2.data_mut()[j] += dx2[i * d + j];
                }
            }
            matmul_at_b_acc(lg.w2.data_mut(), &lc.hidden, &dx2, t, f, d);
            let mut dpre = matmul_a_bt(&dx2, layer.w2.data(), t, d, f);
            for (g, &u) in dpre.iter_mut().zip(&lc.pre) {
                if u <= 0.0 {
                    *g = 0.0;
                }
            }
            for i in 0..t {
                for j in 0..f {
                    lg.b1.data_mut()[j] += dpre[i * f + j];
                }
            }
            matmul_at_b_acc(lg.w1.data_mut(), &lc.x1, &dpre, t, d, f);
            let mut dx1 = matmul_a_bt(&dpre, layer.w1.data(), t, f, d);
            for (a, b) in dx1.iter_mut().zip(&dx2) {
                *a += b;
            }

            // attention: x1 = x + (softmax(q kᵀ / √d) v) Wo
            matmul_at_b_acc(lg.wo.data_mut(), &lc.ctx, &dx1, t, d, d);
            let dctx = matmul_a_bt(&dx1, layer.wo.data(), t, d, d);
            let dattn = matmul_a_bt(&dctx, &lc.v, t, d, t);
            let mut dv = vec![0.0; t * d];
            matmul_at_b_acc(&mut dv, &lc.attn, &dctx, t, t, d);
            let mut dscore = vec![0.0; t * t];
            for i in 0..t {
                let a = &lc.attn[i * t..(i + 1) * t];
                let da = &dattn[i * t..(i + 1) * t];
                let dot: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
                for j in 0..t {
                    dscore[i * t + j] = a[j] * (da[j] - dot) * inv_sqrt_d;
                }
            }
            let dq = matmul(&dscore, &lc.k, t, t, d);
            let mut dk = vec![0.0; t * d];
            matmul_at_b_acc(&mut dk, &dscore, &lc.q, t, t, d);

            matmul_at_b_acc(lg.wq.data_mut(), &lc.x, &dq, t, d, d);
            matmul_at_b_acc(lg.wk.data_mut(), &lc.x, &dk, t, d, d);
            matmul_at_b_acc(lg.wv.data_mut(), &lc.x, &dv, t, d, d);
            let mut dxin = dx1;
            for (w, dy) in [(&layer.wq, &dq), (&layer.wk, &dk), (&layer.wv, &dv)] {
                let contrib = matmul_a_bt(dy, w.data(), t, d, d);
                for (a, b) in dxin.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            dx = dxin;
        }

        for (i, &id) in cache.ids.iter().enumerate() {
            let g = &dx[i * d..(i + 1) * d];
            for (e, gv) in grads.token_emb.row_mut(id as usize).iter_mut().zip(g) {
                *e += gv;
            }
            for (p, gv) in grads.pos_emb.row_mut(i).iter_mut().zip(g) {
                *p += gv;
            }
        }
    }
}

impl EncoderHandle for EncoderParams {
    fn dim(&self) -> usize {
        self.d_model()
    }

    fn max_seq_len(&self) -> usize {
        self.max_len()
    }

    fn encode(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        self.encode_ids(&seq.ids)
    }
}
