//! Closed-vocabulary step decoder: step `s` predicts
//! `softmax((h + step_emb[s]) · W_out + b_out)` from a single node
//! representation `h`.

use rand::Rng;

use super::tensor::{softmax, vec_mat, Tensor};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, PAD};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub out_proj: Tensor,
    pub out_bias: Tensor,
    pub step_emb: Tensor,
    pub frozen: bool,
}

pub struct DecoderCache {
    inputs: Vec<Vec<f64>>,
}

impl DecoderParams {
    pub fn init<R: Rng>(d: usize, vocab: usize, max_decode_len: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            out_proj: Tensor::uniform(&[d, vocab], scale, rng),
            out_bias: Tensor::uniform(&[vocab], scale, rng),
            step_emb: Tensor::uniform(&[max_decode_len, d], scale, rng),
            frozen: false,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            out_proj: self.out_proj.zeros_like(),
            out_bias: self.out_bias.zeros_like(),
            step_emb: self.step_emb.zeros_like(),
            frozen: self.frozen,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.out_proj, &self.out_bias, &self.step_emb]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.out_proj, &mut self.out_bias, &mut self.step_emb]
    }

    pub fn vocab_size(&self) -> usize {
        self.out_proj.cols()
    }

    pub fn max_decode_len(&self) -> usize {
        self.step_emb.rows()
    }

    /// Per-step logits for `target_len` steps.
    pub fn logits(&self, node_repr: &[f64], target_len: usize) -> Result<(Vec<Vec<f64>>, DecoderCache)> {
        if target_len > self.max_decode_len() {
            return Err(Error::TargetTooLong {
                len: target_len,
                max: self.max_decode_len(),
            });
        }
        let d = self.out_proj.rows();
        if node_repr.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: node_repr.len(),
            });
        }
        let v = self.vocab_size();
        let mut inputs = Vec::with_capacity(target_len);
        let mut out = Vec::with_capacity(target_len);
        for s in 0..target_len {
            let z: Vec<f64> = node_repr.iter().zip(self.step_emb.row(s)).map(|(a, b)| a + b).collect();
            out.push(vec_mat(&z, self.out_proj.data(), Some(self.out_bias.data()), v));
            inputs.push(z);
        }
        Ok((out, DecoderCache { inputs }))
    }

    pub fn decode_tokens(&self, node_repr: &[f64], target_len: usize) -> Result<Vec<Vec<f64>>> {
        let (logits, _) = self.logits(node_repr, target_len)?;
        Ok(logits.iter().map(|l| softmax(l)).collect())
    }

    /// Accumulates gradients given d(loss)/d(logits); returns d(loss)/d(h).
    pub fn backward(&self, cache: &DecoderCache, dlogits: &[Vec<f64>], grads: &mut DecoderParams) -> Vec<f64> {
        let d = self.out_proj.rows();
        let v = self.vocab_size();
        let mut dh = vec![0.0; d];
        for (s, (z, dl)) in cache.inputs.iter().zip(dlogits).enumerate() {
            for (b, g) in grads.out_bias.data_mut().iter_mut().zip(dl) {
                *b += g;
            }
            let w = self.out_proj.data();
            let gw = grads.out_proj.data_mut();
            let mut dz = vec![0.0; d];
            for p in 0..d {
                let row = &w[p * v..(p + 1) * v];
                dz[p] = row.iter().zip(dl).map(|(a, b)| a * b).sum();
                let zp = z[p];
                if zp != 0.0 {
                    for (g, dlv) in gw[p * v..(p + 1) * v].iter_mut().zip(dl) {
                        *g += zp * dlv;
                    }
                }
            }
            for ((st, h), g) in grads.step_emb.row_mut(s).iter_mut().zip(dh.iter_mut()).zip(&dz) {
                *st += g;
                *h += g;
            }
        }
        dh
    }
}

/// Greedy argmax per step (lowest id on ties), cut at the first PAD.
pub fn greedy_tokens(dists: &[Vec<f64>]) -> Vec<TokenId> {
    let mut out = Vec::new();
    for dist in dists {
        let mut best = 0;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = i;
            }
        }
        if best as TokenId == PAD {
            break;
        }
        out.push(best as TokenId);
    }
    out
}

/// Target tokens cut to `len` and right-padded with PAD.
pub fn padded_target(tokens: &[TokenId], len: usize) -> Vec<TokenId> {
    let mut t: Vec<TokenId> = tokens.iter().copied().take(len).collect();
    t.resize(len, PAD);
    t
}

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    /// d(loss)/d(logits) per step.
    pub dlogits: Vec<Vec<f64>>,
}

/// Mean over steps of `-ln p(target)`, with the gradient with respect to the
/// logits that produced `pred` through a softmax.
pub fn cross_entropy_loss(pred: &[Vec<f64>], target: &[TokenId]) -> Result<CrossEntropy> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.is_empty() {
        return Ok(CrossEntropy {
            loss: 0.0,
            dlogits: Vec::new(),
        });
    }
    let inv = 1.0 / pred.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(pred.len());
    for (p, &y) in pred.iter().zip(target) {
        let py = p[y as usize];
        loss -= py.max(f64::MIN_POSITIVE).ln();
        let mut g: Vec<f64> = p.iter().map(|x| x * inv).collect();
        g[y as usize] -= inv;
        dlogits.push(g);
    }
    Ok(CrossEntropy {
        loss: loss * inv,
        dlogits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn steps_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = DecoderParams::init(5, 17, 4, 2.0, &mut rng);
        let h = Tensor::uniform(&[5], 3.0, &mut rng);
        for dist in dec.decode_tokens(h.data(), 4).unwrap() {
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            dec.decode_tokens(h.data(), 5),
            Err(Error::TargetTooLong { .. })
        ));
    }

    #[test]
    fn zero_weights_give_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dec = DecoderParams::init(3, 8, 2, 1.0, &mut rng);
        dec.out_proj.fill(0.0);
        dec.out_bias.fill(0.0);
        for dist in dec.decode_tokens(&[1.0, -2.0, 0.5], 2).unwrap() {
            for p in dist {
                assert!((p - 0.125).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn analytic_loss_values() {
        let uniform4 = vec![vec![0.25; 4]];
        let ce = cross_entropy_loss(&uniform4, &[2]).unwrap();
        assert!((ce.loss - 4f64.ln()).abs() < 1e-15);
        assert!((ce.loss - 1.3863).abs() < 1e-4);
        let uniform10 = vec![vec![0.1; 10]];
        let ce = cross_entropy_loss(&uniform10, &[7]).unwrap();
        assert!((ce.loss - 2.3026).abs() < 1e-4);
        let sure = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(cross_entropy_loss(&sure, &[1, 0]).unwrap().loss, 0.0);
        assert!(matches!(
            cross_entropy_loss(&sure, &[1]),
            Err(Error::LengthMismatch { pred: 2, target: 1 })
        ));
    }

    #[test]
    fn greedy_stops_at_pad_and_breaks_ties_low() {
        let dists = vec![
            vec![0.1, 0.2, 0.35, 0.35],
            vec![0.5, 0.1, 0.2, 0.2],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        assert_eq!(greedy_tokens(&dists), vec![2]);
        assert_eq!(padded_target(&[5, 6, 7], 2), vec![5, 6]);
        assert_eq!(padded_target(&[5], 3), vec![5, PAD, PAD]);
    }
}
