use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::decoder::{cross_entropy_loss, greedy_tokens, padded_target, DecoderParams};
use super::encoder::{EncoderConfig, EncoderParams};
use super::gcn::{Activation, GcnParams};
use super::tensor::{softmax, Tensor};
use crate::error::{Error, Result};
use crate::graph::Propagation;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub max_seq_len: usize,
    pub gcn_layers: usize,
    pub residual: bool,
    pub activation: Activation,
    pub max_decode_len: usize,
    pub stats_enabled: bool,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_ff: 64,
            n_enc_layers: 1,
            max_seq_len: 64,
            gcn_layers: 2,
            residual: true,
            activation: Activation::Relu,
            max_decode_len: 4,
            stats_enabled: false,
            init_scale: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.max_seq_len < crate::tokenizer::MIN_SEQ_LEN {
            return Err(Error::Config("max_seq_len must be at least 8".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Gcn,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: EncoderParams,
    pub gcn: GcnParams,
    pub decoder: DecoderParams,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            gcn: self.gcn.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Every parameter tensor in declared order: encoder, GCN, decoder.
    pub fn tensors(&self) -> Vec<(ParamGroup, &Tensor)> {
        let mut out: Vec<(ParamGroup, &Tensor)> = Vec::new();
        out.extend(self.encoder.tensors().into_iter().map(|t| (ParamGroup::Encoder, t)));
        out.extend(self.gcn.tensors().into_iter().map(|t| (ParamGroup::Gcn, t)));
        out.extend(self.decoder.tensors().into_iter().map(|t| (ParamGroup::Decoder, t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out: Vec<(ParamGroup, &mut Tensor)> = Vec::new();
        out.extend(self.encoder.tensors_mut().into_iter().map(|t| (ParamGroup::Encoder, t)));
        out.extend(self.gcn.tensors_mut().into_iter().map(|t| (ParamGroup::Gcn, t)));
        out.extend(self.decoder.tensors_mut().into_iter().map(|t| (ParamGroup::Decoder, t)));
        out
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    fn frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => self.encoder.frozen,
            ParamGroup::Gcn => false,
            ParamGroup::Decoder => self.decoder.frozen,
        }
    }

    /// SHA-256 over the little-endian bytes of one group's tensors.
    pub fn fingerprint(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for (g, t) in self.tensors() {
            if g == group {
                for x in t.data() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Summed per-sample gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Params,
    pub samples: usize,
    pub loss_sum: f64,
}

impl Gradients {
    pub fn zeros(like: &Params) -> Self {
        Self {
            params: like.zeros_like(),
            samples: 0,
            loss_sum: 0.0,
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        self.params.add_assign(&other.params);
        self.samples += other.samples;
        self.loss_sum += other.loss_sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: Params,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub step: u64,
    pub seed: u64,
}

impl ModelState {
    /// Fresh parameters drawn uniformly from `±init_scale`.
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.init_scale;
        let encoder = EncoderParams::init(
            &EncoderConfig {
                vocab_size,
                d_model: config.d_model,
                d_ff: config.d_ff,
                n_layers: config.n_enc_layers,
                max_seq_len: config.max_seq_len,
            },
            s,
            &mut rng,
        );
        let gcn = GcnParams::init(
            config.d_model,
            config.gcn_layers,
            config.stats_enabled,
            config.residual,
            config.activation,
            s,
            &mut rng,
        );
        let decoder = DecoderParams::init(config.d_model, vocab_size, config.max_decode_len, s, &mut rng);
        let params = Params { encoder, gcn, decoder };
        let zeros: Vec<Tensor> = params.tensors().iter().map(|(_, t)| t.zeros_like()).collect();
        Ok(Self {
            config,
            vocab_size,
            params,
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
            seed,
        })
    }

    pub fn reset_optimizer(&mut self) {
        for t in self.adam_m.iter_mut().chain(self.adam_v.iter_mut()) {
            t.fill(0.0);
        }
        self.step = 0;
    }

    pub fn new_gradients(&self) -> Gradients {
        Gradients::zeros(&self.params)
    }

    /// One Adam update of every unfrozen tensor from summed gradients,
    /// averaged over `grads.samples`.
    pub fn adam_step(&mut self, grads: &Gradients, hp: &AdamConfig) -> Result<()> {
        if grads.samples == 0 {
            return Err(Error::MissingGradients);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        let scale = 1.0 / grads.samples as f64;
        let frozen: Vec<bool> = self
            .params
            .tensors()
            .iter()
            .map(|(g, _)| self.params.frozen(*g))
            .collect();
        let params = self.params.tensors_mut();
        for (i, ((_, p), (_, g))) in params.into_iter().zip(grads.params.tensors()).enumerate() {
            if frozen[i] {
                continue;
            }
            let m = self.adam_m[i].data_mut();
            let v = self.adam_v[i].data_mut();
            for (k, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv * scale;
                m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * gv;
                v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * gv * gv;
                let m_hat = if bc1 > 0.0 { m[k] / bc1 } else { m[k] };
                let v_hat = if bc2 > 0.0 { v[k] / bc2 } else { v[k] };
                if m_hat != 0.0 {
                    *pv -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
                }
            }
        }
        Ok(())
    }

    fn decode_len(&self) -> usize {
        self.config.max_decode_len
    }

    /// Row-only path: encode the sequence, decode from its pooled embedding.
    /// Adds gradients for unfrozen parts when `grads` is given.
    pub fn row_loss(&self, ids: &[TokenId], target: &[TokenId], grads: Option<&mut Gradients>) -> Result<f64> {
        let (h, enc_cache) = self.params.encoder.forward(ids)?;
        let target = padded_target(target, self.decode_len());
        let (logits, dec_cache) = self.params.decoder.logits(&h, target.len())?;
        let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
        let ce = cross_entropy_loss(&probs, &target)?;
        if let Some(g) = grads {
            let dh = self
                .params
                .decoder
                .backward(&dec_cache, &ce.dlogits, &mut g.params.decoder);
            if !self.params.encoder.frozen {
                self.params.encoder.backward(&enc_cache, &dh, &mut g.params.encoder);
            }
            g.samples += 1;
            g.loss_sum += ce.loss;
        }
        Ok(ce.loss)
    }

    pub fn predict_row(&self, ids: &[TokenId]) -> Result<Vec<TokenId>> {
        let h = self.params.encoder.encode_ids(ids)?;
        Ok(greedy_tokens(
            &self.params.decoder.decode_tokens(&h, self.decode_len())?,
        ))
    }

    /// Graph path over precomputed node features: GCN, then decode the
    /// target node. Returns the loss and d(loss)/d(features) when gradients
    /// are requested.
    pub fn graph_loss(
        &self,
        prop: &Propagation,
        features: &Tensor,
        stats: Option<&Tensor>,
        target_node: usize,
        target: &[TokenId],
        grads: Option<&mut Gradients>,
    ) -> Result<(f64, Option<Tensor>)> {
        let (h, gcn_cache) = self.params.gcn.forward(prop, features, stats)?;
        let target = padded_target(target, self.decode_len());
        let (logits, dec_cache) = self.params.decoder.logits(h.row(target_node), target.len())?;
        let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
        let ce = cross_entropy_loss(&probs, &target)?;
        let mut dfeatures = None;
        if let Some(g) = grads {
            let dh_node = self
                .params
                .decoder
                .backward(&dec_cache, &ce.dlogits, &mut g.params.decoder);
            let mut dh = h.zeros_like();
            dh.row_mut(target_node).copy_from_slice(&dh_node);
            dfeatures = Some(self.params.gcn.backward(&gcn_cache, prop, &dh, &mut g.params.gcn));
            g.samples += 1;
            g.loss_sum += ce.loss;
        }
        Ok((ce.loss, dfeatures))
    }

    pub fn predict_graph(
        &self,
        prop: &Propagation,
        features: &Tensor,
        stats: Option<&Tensor>,
        target_node: usize,
    ) -> Result<Vec<TokenId>> {
        let (h, _) = self.params.gcn.forward(prop, features, stats)?;
        Ok(greedy_tokens(
            &self
                .params
                .decoder
                .decode_tokens(h.row(target_node), self.decode_len())?,
        ))
    }

    /// Encoder → GCN → decoder with gradients flowing back into the encoder
    /// through every node's sequence.
    pub fn end_to_end_loss(
        &self,
        node_sequences: &[Vec<TokenId>],
        prop: &Propagation,
        stats: Option<&Tensor>,
        target_node: usize,
        target: &[TokenId],
        grads: Option<&mut Gradients>,
    ) -> Result<f64> {
        let d = self.config.d_model;
        let mut features = Tensor::zeros(&[node_sequences.len(), d]);
        let mut caches = Vec::with_capacity(node_sequences.len());
        for (i, ids) in node_sequences.iter().enumerate() {
            let (h, cache) = self.params.encoder.forward(ids)?;
            features.row_mut(i).copy_from_slice(&h);
            caches.push(cache);
        }
        match grads {
            None => Ok(self.graph_loss(prop, &features, stats, target_node, target, None)?.0),
            Some(g) => {
                let (loss, dfeat) = self.graph_loss(prop, &features, stats, target_node, target, Some(g))?;
                if !self.params.encoder.frozen {
                    let dfeat = dfeat.expect("gradients requested");
                    for (i, cache) in caches.iter().enumerate() {
                        self.params.encoder.backward(cache, dfeat.row(i), &mut g.params.encoder);
                    }
                }
                Ok(loss)
            }
        }
    }
}
