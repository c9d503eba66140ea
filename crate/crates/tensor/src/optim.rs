use crate::checkpoint::Checkpoint;
use crate::error::{Result, TensorError};
use crate::param::{ParamGrads, ParamStore};
use crate::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: None,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// position in the store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

const M_PREFIX: &str = "__adam_m/";
const V_PREFIX: &str = "__adam_v/";
const STEP_KEY: &str = "adam_step";

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn ensure(&mut self, store: &ParamStore<T>) {
        while self.m.len() < store.len() {
            let n = store.value(crate::ParamId(self.m.len())).len();
            self.m.push(vec![T::zero(); n]);
            self.v.push(vec![T::zero(); n]);
        }
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> f64 {
        self.ensure(store);
        self.step += 1;
        let norm = grads.norm().as_f64();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::of(self.cfg.lr);
        let decay = T::of(1.0 - self.cfg.lr * self.cfg.weight_decay);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (tbc1, tbc2) = (T::of(bc1), T::of(bc2));
        let eps = T::of(self.cfg.eps);
        let clip = T::of(clip);
        for (id, g) in &grads.grads {
            if !store.get(*id).requires_grad {
                continue;
            }
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.value_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = tb1 * m[i] + one_b1 * gi;
                v[i] = tb2 * v[i] + one_b2 * gi * gi;
                let mh = m[i] / tbc1;
                let vh = v[i] / tbc2;
                p[i] = p[i] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        norm
    }

    /// Stores moment buffers and the step count alongside the weights.
    pub fn save_into(&self, store: &ParamStore<T>, ck: &mut Checkpoint<T>) {
        ck.meta.insert(STEP_KEY.into(), self.step.to_string());
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            let id = crate::ParamId(i);
            let shape = store.value(id).shape();
            let name = store.name(id);
            ck.insert(format!("{M_PREFIX}{name}"), Tensor::new(shape, m.clone()).expect("moment shape"));
            ck.insert(format!("{V_PREFIX}{name}"), Tensor::new(shape, v.clone()).expect("moment shape"));
        }
    }

    pub fn load_from(&mut self, store: &ParamStore<T>, ck: &Checkpoint<T>) -> Result<()> {
        let step = ck
            .meta
            .get(STEP_KEY)
            .ok_or_else(|| TensorError::Checkpoint("no optimizer state".into()))?;
        self.step = step
            .parse()
            .map_err(|_| TensorError::Checkpoint(format!("bad {STEP_KEY} {step}")))?;
        self.m.clear();
        self.v.clear();
        for (id, p) in store.iter() {
            let fetch = |prefix: &str| -> Result<Vec<T>> {
                match ck.get(&format!("{prefix}{}", p.name)) {
                    Some(t) if t.shape() == p.value.shape() => Ok(t.data().to_vec()),
                    _ => Err(TensorError::Checkpoint(format!("optimizer state for {} missing", p.name))),
                }
            };
            let _ = id;
            self.m.push(fetch(M_PREFIX)?);
            self.v.push(fetch(V_PREFIX)?);
        }
        Ok(())
    }

    /// Prefix shared by all optimizer arrays in a checkpoint.
    pub const STATE_PREFIX: &'static str = "__adam_";
}
