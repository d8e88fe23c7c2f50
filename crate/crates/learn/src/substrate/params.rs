use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use graphrl_core::Real;

use super::tape::{Gradients, Tape};
use super::{SubstrateError, Tensor2D};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot<T> {
    name: String,
    value: Tensor2D<T>,
    grad: Tensor2D<T>,
    m: Tensor2D<T>,
    v: Tensor2D<T>,
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
    seed: u64,
    rng: ChaCha8Rng,
    adam_step: u64,
}

/// Initialiser stream state is not part of equality.
impl<T: PartialEq> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.slots == other.slots && self.seed == other.seed && self.adam_step == other.adam_step
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    seed: u64,
    adam_step: u64,
    params: Vec<ParamRecord>,
}

fn to_f64<T: Real>(t: &Tensor2D<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.to_f64_lossy()).collect()
}

fn from_f64<T: Real>(rows: usize, cols: usize, data: &[f64]) -> Result<Tensor2D<T>, SubstrateError> {
    Tensor2D::from_vec(rows, cols, data.iter().map(|&x| T::lit(x)).collect())
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            slots: Vec::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            adam_step: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, value: Tensor2D<T>) -> ParamId {
        let (r, c) = value.shape();
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            grad: Tensor2D::zeros(r, c),
            m: Tensor2D::zeros(r, c),
            v: Tensor2D::zeros(r, c),
        });
        ParamId(self.slots.len() - 1)
    }

    /// Uniform in `±sqrt(6 / (rows + cols))`.
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::lit(self.rng.random_range(-a..a)))
            .collect();
        self.insert(name, Tensor2D::from_vec(rows, cols, data).expect("shape"))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Tensor2D::zeros(rows, cols))
    }

    pub fn add_value(&mut self, name: &str, value: Tensor2D<T>) -> ParamId {
        self.insert(name, value)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor2D<T> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2D<T> {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2D<T> {
        &self.slots[id.0].grad
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.data().len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the gradients of every parameter leaf on `tape`.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (id, g) in tape.param_grads(grads) {
            self.slots[id.0].grad.add_assign(g);
        }
    }

    pub fn grad_norm(&self) -> T {
        self.slots
            .iter()
            .flat_map(|s| s.grad.data())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm {
            let k = max_norm / norm;
            for s in &mut self.slots {
                s.grad.data_mut().iter_mut().for_each(|g| *g = *g * k);
            }
        }
        norm
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.adam_step += 1;
        let t = self.adam_step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for s in &mut self.slots {
            let n = s.value.data().len();
            for k in 0..n {
                let g = s.grad.data()[k];
                let m = b1 * s.m.data()[k] + (T::one() - b1) * g;
                let v = b2 * s.v.data()[k] + (T::one() - b2) * g * g;
                s.m.data_mut()[k] = m;
                s.v.data_mut()[k] = v;
                let m_hat = m / c1;
                let v_hat = v / c2;
                let p = &mut s.value.data_mut()[k];
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn to_checkpoint(&self) -> String {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            adam_step: self.adam_step,
            params: self
                .slots
                .iter()
                .map(|s| ParamRecord {
                    name: s.name.clone(),
                    rows: s.value.rows(),
                    cols: s.value.cols(),
                    value: to_f64(&s.value),
                    adam_m: to_f64(&s.m),
                    adam_v: to_f64(&s.v),
                })
                .collect(),
        };
        serde_json::to_string(&ck).expect("checkpoint serialises")
    }

    pub fn from_checkpoint(doc: &str) -> Result<Self, SubstrateError> {
        let ck: Checkpoint =
            serde_json::from_str(doc).map_err(|e| SubstrateError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(SubstrateError::CheckpointVersionMismatch {
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut store = ParamStore::new(ck.seed);
        store.adam_step = ck.adam_step;
        for p in ck.params {
            let id = store.insert(&p.name, from_f64(p.rows, p.cols, &p.value)?);
            store.slots[id.0].m = from_f64(p.rows, p.cols, &p.adam_m)?;
            store.slots[id.0].v = from_f64(p.rows, p.cols, &p.adam_v)?;
        }
        Ok(store)
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<(), SubstrateError> {
        if self.slots.len() != other.slots.len() {
            return Err(SubstrateError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.slots.len(),
                other.slots.len()
            )));
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(SubstrateError::Checkpoint(format!(
                    "parameter {} ({:?}) does not match {} ({:?})",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
            a.m = b.m.clone();
            a.v = b.v.clone();
        }
        self.adam_step = other.adam_step;
        Ok(())
    }
}
