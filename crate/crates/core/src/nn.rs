//! Named parameter collections, initialisers and optimisers.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered, named tensors. Order is part of the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// `name:shape` lines; feeds the architecture hash.
    pub fn layout(&self) -> String {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| format!("{n}:{:?}\n", t.shape()))
            .collect()
    }

    /// Registers every tensor in `g`, as trainable parameters or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Collects gradients for bound variables, in slot order.
    pub fn grads_of(&self, grads: &mut Gradients, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| grads.take(v)).collect()
    }

    /// Replaces the contents, keeping names; shapes must match.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Gaussian init with standard deviation `std`.
pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and nonnegative");
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// He-style init for a weight whose fan-in is the product of all but the first axis.
pub fn he_init(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    normal_init(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Global L2 norm over a gradient list.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescales the whole gradient when its norm exceeds this; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        self.step += 1;
        let c = &self.cfg;
        let norm = grad_norm(grads);
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g.data()[k] * clip;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                p[k] -= c.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// SGD with classical momentum: `v = mu v + g; p -= lr v`.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let vel = &mut self.velocity[i];
            for k in 0..p.len() {
                vel[k] = self.momentum * vel[k] + g.data()[k];
                p[k] -= self.lr * vel[k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quadratic_grad(p: &ParamSet) -> Vec<Tensor> {
        // d/dp of sum (p - 3)^2
        p.tensors().iter().map(|t| t.map(|x| 2.0 * (x - 3.0))).collect()
    }

    #[test]
    fn adam_and_sgd_minimise_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        p.push("w", normal_init(&mut rng, &[4], 1.0));
        let mut q = p.clone();
        let mut adam = Adam::new(
            &p,
            AdamConfig {
                lr: 0.05,
                clip_norm: 0.0,
                ..Default::default()
            },
        );
        let mut sgd = Sgd::new(&q, 0.05, 0.9);
        for _ in 0..500 {
            let g = quadratic_grad(&p);
            adam.step(&mut p, &g);
            let g = quadratic_grad(&q);
            sgd.step(&mut q, &g);
        }
        assert!(p.get(0).data().iter().all(|x| (x - 3.0).abs() < 1e-3));
        assert!(q.get(0).data().iter().all(|x| (x - 3.0).abs() < 1e-6));
    }

    #[test]
    fn load_tensors_checks_shapes() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::zeros(&[2, 3]));
        assert!(p.load_tensors(vec![Tensor::zeros(&[3, 2])]).is_err());
        assert!(p.load_tensors(vec![Tensor::full(&[2, 3], 1.0)]).is_ok());
        assert_eq!(p.layout(), "a:[2, 3]\n");
    }
}
