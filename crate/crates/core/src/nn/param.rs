//! Trainable parameters, parameter traversal, and the AdamW optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    /// Uniform fan-in scaled initialization, `U(-sqrt(gain/fan_in), +sqrt(gain/fan_in))`.
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(shape);
        let bound = (gain / fan_in.max(1) as f32).sqrt();
        for v in &mut p.value {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything owning named parameters. Traversal order is fixed and defines
/// the optimizer-state layout and the serialized weight order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, p| {
            h.update(name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(learning_rate: f32, weight_decay: f32) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update to every parameter of `model` using its current
    /// gradients. Additional parameter owners (e.g. a loss adapter) may be
    /// updated through [`AdamW::step_many`].
    pub fn step(&mut self, model: &mut dyn Parameterized) {
        self.step_many(&mut [model]);
    }

    pub fn step_many(&mut self, owners: &mut [&mut dyn Parameterized]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        );
        let mut slot = 0usize;
        let moments = &mut self.moments;
        for owner in owners.iter_mut() {
            owner.visit_mut("", &mut |_, p| {
                if moments.len() <= slot {
                    moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
                }
                let (m, v) = &mut moments[slot];
                assert_eq!(m.len(), p.len(), "optimizer state does not match parameter");
                for i in 0..p.len() {
                    let g = p.grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p.value[i] -= lr * wd * p.value[i];
                    p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
                slot += 1;
            });
        }
    }
}
