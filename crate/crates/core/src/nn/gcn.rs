//! Graph convolution with self-loops and symmetric normalisation:
//! `H' = σ(D̂^{-1/2} (A + I) D̂^{-1/2} H W + b) + H`.
//!
//! Propagation is accumulated per edge; no dense adjacency is ever formed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Propagation, STATS_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub layers: Vec<GcnLayer>,
    /// Projects the column-statistics channel into the feature space.
    pub stats_proj: Option<Tensor>,
    pub residual: bool,
    /// Applied after every layer except the last.
    pub activation: Activation,
}

pub struct GcnCache {
    /// Propagated inputs `Â H_l`.
    propagated: Vec<Tensor>,
    /// Pre-activations `Â H_l W_l + b_l`.
    pre: Vec<Tensor>,
    stats: Option<Tensor>,
}

impl GcnParams {
    pub fn init<R: Rng>(
        d: usize,
        n_layers: usize,
        stats: bool,
        residual: bool,
        activation: Activation,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|_| GcnLayer {
                    weight: Tensor::uniform(&[d, d], scale, rng),
                    bias: Tensor::uniform(&[d], scale, rng),
                })
                .collect(),
            stats_proj: stats.then(|| Tensor::uniform(&[STATS_DIM, d], scale, rng)),
            residual,
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| GcnLayer {
                    weight: l.weight.zeros_like(),
                    bias: l.bias.zeros_like(),
                })
                .collect(),
            stats_proj: self.stats_proj.as_ref().map(Tensor::zeros_like),
            residual: self.residual,
            activation: self.activation,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        out.extend(self.stats_proj.as_ref());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        out.extend(self.stats_proj.as_mut());
        out
    }

    fn dim(&self) -> Option<usize> {
        self.layers.first().map(|l| l.weight.rows())
    }

    fn activates(&self, layer: usize) -> bool {
        self.activation == Activation::Relu && layer + 1 < self.layers.len()
    }

    pub fn forward(&self, prop: &Propagation, features: &Tensor, stats: Option<&Tensor>) -> Result<(Tensor, GcnCache)> {
        let n = prop.num_nodes();
        if n == 0 {
            return Err(Error::Config("graph has no nodes".into()));
        }
        if features.rows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: features.rows(),
            });
        }
        let d = features.cols();
        if let Some(wd) = self.dim() {
            if wd != d {
                return Err(Error::DimensionMismatch { expected: wd, got: d });
            }
        }
        let mut h = features.clone();
        let stats = match (stats, &self.stats_proj) {
            (Some(s), Some(w)) => {
                if s.rows() != n || s.cols() != STATS_DIM {
                    return Err(Error::DimensionMismatch {
                        expected: n * STATS_DIM,
                        got: s.len(),
                    });
                }
                let extra = matmul(s.data(), w.data(), n, STATS_DIM, d);
                for (a, b) in h.data_mut().iter_mut().zip(&extra) {
                    *a += b;
                }
                Some(s.clone())
            }
            _ => None,
        };

        let mut cache = GcnCache {
            propagated: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            stats,
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let p = propagate(prop, &h);
            let mut z = Tensor::from_vec(&[n, d], matmul(p.data(), layer.weight.data(), n, d, d))?;
            for i in 0..n {
                for (zv, b) in z.row_mut(i).iter_mut().zip(layer.bias.data()) {
                    *zv += b;
                }
            }
            let mut out = z.clone();
            if self.activates(l) {
                out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
            }
            if self.residual {
                out.add_assign(&h);
            }
            h = out;
            cache.propagated.push(p);
            cache.pre.push(z);
        }
        Ok((h, cache))
    }

    /// Accumulates parameter gradients; returns d(loss)/d(input features).
    pub fn backward(&self, cache: &GcnCache, prop: &Propagation, grad_out: &Tensor, grads: &mut GcnParams) -> Tensor {
        let mut dh = grad_out.clone();
        let n = dh.rows();
        let d = dh.cols();
        for (l, (layer, lg)) in self.layers.iter().zip(grads.layers.iter_mut()).enumerate().rev() {
            let mut dz = dh.clone();
            if self.activates(l) {
                for (g, &z) in dz.data_mut().iter_mut().zip(cache.pre[l].data()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            for i in 0..n {
                for (b, g) in lg.bias.data_mut().iter_mut().zip(dz.row(i)) {
                    *b += g;
                }
            }
            matmul_at_b_acc(lg.weight.data_mut(), cache.propagated[l].data(), dz.data(), n, d, d);
            let dp = Tensor::from_vec(&[n, d], matmul_a_bt(dz.data(), layer.weight.data(), n, d, d)).expect("shape");
            // Â is symmetric, so its transpose is itself.
            let mut dprev = propagate(prop, &dp);
            if self.residual {
                dprev.add_assign(&dh);
            }
            dh = dprev;
        }
        if let (Some(s), Some(gw)) = (&cache.stats, grads.stats_proj.as_mut()) {
            matmul_at_b_acc(gw.data_mut(), s.data(), dh.data(), n, STATS_DIM, d);
        }
        dh
    }
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2} H`, accumulated edge by edge.
pub fn propagate(prop: &Propagation, h: &Tensor) -> Tensor {
    let mut out = h.zeros_like();
    let inv_sqrt: Vec<f64> = prop.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    for i in 0..prop.num_nodes() {
        let self_w = inv_sqrt[i] * inv_sqrt[i];
        let row: Vec<f64> = {
            let mut acc: Vec<f64> = h.row(i).iter().map(|x| x * self_w).collect();
            for &j in &prop.neighbors[i] {
                let w = inv_sqrt[i] * inv_sqrt[j];
                for (a, x) in acc.iter_mut().zip(h.row(j)) {
                    *a += w * x;
                }
            }
            acc
        };
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain_identity(d: usize) -> GcnParams {
        GcnParams {
            layers: vec![GcnLayer {
                weight: Tensor::identity(d),
                bias: Tensor::zeros(&[d]),
            }],
            stats_proj: None,
            residual: false,
            activation: Activation::Identity,
        }
    }

    #[test]
    fn two_node_example() {
        let prop = Propagation::from_edges(2, &[(0, 1)]);
        let h = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (out, _) = plain_identity(2).forward(&prop, &h, None).unwrap();
        for x in out.data() {
            assert!((x - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_node_is_fixed_point() {
        let prop = Propagation::from_edges(3, &[(0, 1)]);
        let h = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        let (out, _) = plain_identity(2).forward(&prop, &h, None).unwrap();
        assert_eq!(out.row(2), h.row(2));
    }

    #[test]
    fn dimension_mismatch() {
        let prop = Propagation::from_edges(2, &[(0, 1)]);
        let h = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            plain_identity(2).forward(&prop, &h, None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prop = Propagation::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]);
        let h = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let stats = Tensor::uniform(&[5, STATS_DIM], 1.0, &mut rng);
        let params = GcnParams::init(3, 2, true, true, Activation::Relu, 0.8, &mut rng);
        let readout = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let loss = |p: &GcnParams| -> f64 {
            let (out, _) = p.forward(&prop, &h, Some(&stats)).unwrap();
            out.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = params.forward(&prop, &h, Some(&stats)).unwrap();
        let mut g = params.zeros_like();
        params.backward(&cache, &prop, &readout, &mut g);
        let eps = 1e-5;
        let n_tensors = params.tensors().len();
        for ti in 0..n_tensors {
            for k in 0..params.tensors()[ti].len() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[k] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[k] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = g.tensors()[ti].data()[k];
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                    "tensor {ti}[{k}]: {fd} vs {an}"
                );
            }
        }
    }
}
