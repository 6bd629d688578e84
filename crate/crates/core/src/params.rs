//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
}

/// Owns every array of a model. Modules hold [`ParamId`] handles into it, so
/// two modules that hold the same id share storage.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; parameter names are fixed by the model layout.
    pub fn add(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        id
    }

    /// Glorot-uniform weight matrix.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        trainable: bool,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Mat::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-limit..limit));
        self.add(name, value, trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Rounds every value to `f32` precision so that a checkpoint written in
    /// 32-bit floats reproduces the in-memory model exactly.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.round_to_f32();
        }
    }

    /// FNV-1a over names, shapes and the `f32` bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        checksum_params(self.params.iter())
    }

    /// Checksum restricted to parameters whose name starts with `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        checksum_params(self.params.iter().filter(|p| p.name.starts_with(prefix)))
    }
}

fn checksum_params<'a>(params: impl Iterator<Item = &'a Param>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for p in params {
        feed(p.name.as_bytes());
        feed(&(p.value.rows() as u64).to_le_bytes());
        feed(&(p.value.cols() as u64).to_le_bytes());
        for v in p.value.data() {
            feed(&v.to_bits().to_le_bytes());
        }
    }
    h
}

/// Per-parameter gradients, indexed like the store that produced them.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn new(len: usize) -> Self {
        Self { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::all_finite)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that received a gradient.
    /// Values are rounded to `f32` afterwards.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.grads.get(i).and_then(Option::as_ref) else { continue };
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((w, &gi), mi), vi) in
                p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                *w = *w as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_skips_frozen_parameters() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::filled(1, 2, 1.0), true);
        let b = store.add("b", Mat::filled(1, 2, 1.0), false);
        let mut grads = Gradients::new(store.len());
        grads.accumulate(a, &Mat::filled(1, 2, 1.0));
        grads.accumulate(b, &Mat::filled(1, 2, 1.0));
        let before = store.checksum_prefix("b");
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &grads);
        assert_eq!(store.checksum_prefix("b"), before);
        // First Adam step moves by lr in the sign direction.
        assert!((store.get(a).get(0, 0) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::zeros(2, 2), true);
        let c0 = store.checksum();
        store.get_mut(a).set(1, 1, 1e-3);
        assert_ne!(c0, store.checksum());
    }
}
