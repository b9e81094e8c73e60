use crate::error::{Error, Result};
use crate::ndtensor::{ParamStore, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First and second moment estimates for every tensor of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Tensor4>,
    v: Vec<Tensor4>,
    t: u64,
}

impl AdamState {
    /// Zero moments shaped like `store`, step counter 0.
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor4::zeros(p.value().shape())).collect();
        AdamState {
            names: store.names().map(str::to_string).collect(),
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Reassembles a state from saved parts; all three lists run parallel.
    pub fn from_parts(names: Vec<String>, m: Vec<Tensor4>, v: Vec<Tensor4>, t: u64) -> Result<Self> {
        if names.len() != m.len() || names.len() != v.len() {
            return Err(Error::InvalidArgument(format!(
                "{} names, {} first moments, {} second moments",
                names.len(),
                m.len(),
                v.len()
            )));
        }
        if let Some(i) = (0..m.len()).find(|&i| m[i].shape() != v[i].shape()) {
            return Err(Error::InvalidArgument(format!(
                "moment shapes differ for `{}`",
                names[i]
            )));
        }
        Ok(AdamState { names, m, v, t })
    }

    /// Number of updates applied so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn first_moments(&self) -> &[Tensor4] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor4] {
        &self.v
    }

    /// Whether this state tracks exactly the tensors of `store`, in order.
    pub fn matches(&self, store: &ParamStore) -> bool {
        self.names.len() == store.len()
            && store
                .iter()
                .zip(self.names.iter().zip(&self.m))
                .all(|(p, (n, m))| p.name() == n && p.value().shape() == m.shape())
    }
}

/// One bias-corrected Adam update of every tensor in `store` from its
/// accumulated gradient, after which the gradients are zeroed:
///
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `p ← p − lr · m̂ / (√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
///
/// A non-finite gradient aborts before anything is modified.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::InvalidArgument(
            "optimizer state does not match parameter store".into(),
        ));
    }
    let t = state.t + 1;
    if let Some(p) = store.iter().find(|p| !p.grad().all_finite()) {
        return Err(Error::NonFinite {
            step: t,
            what: format!("gradient of {}", p.name()),
        });
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..store.len() {
        let (value, grad) = store.value_and_grad_mut(i);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, (p, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g as f64;
            let mk = b1 * m[k] as f64 + (1.0 - b1) * g;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * g * g;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let step = cfg.lr * (mk / c1) / ((vk / c2).sqrt() + cfg.epsilon);
            *p = (*p as f64 - step) as f32;
        }
    }
    state.t = t;
    store.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Shape;

    fn scalar_store(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor4::scalar(p)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let mut state = AdamState::new(&store);
        store.grad_mut(0).data_mut()[0] = 1.0;
        let cfg = AdamConfig::default();
        adam_step(&mut store, &mut state, &cfg).unwrap();
        // m̂ = v̂ = 1 after bias correction, so the step is lr / (1 + ε).
        let moved = -store.get("p").unwrap().data()[0] as f64;
        assert!((moved - cfg.lr).abs() <= cfg.lr * 1e-6, "{moved}");
        assert_eq!(state.t(), 1);
        assert_eq!(store.entry(0).grad().data(), &[0.0]);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor4::filled(Shape::new(1, 2, 2, 1), 0.3)).unwrap();
        let before = store.clone();
        let mut state = AdamState::new(&store);
        for _ in 0..3 {
            adam_step(&mut store, &mut state, &AdamConfig::default()).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn descends_a_parabola_monotonically() {
        let mut store = scalar_store(1.0);
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig {
            lr: 0.006,
            ..AdamConfig::default()
        };
        let mut last = 1.0f64;
        for _ in 0..100 {
            let p = store.get("p").unwrap().data()[0] as f64;
            store.grad_mut(0).data_mut()[0] = (2.0 * p) as f32;
            adam_step(&mut store, &mut state, &cfg).unwrap();
            let now = (store.get("p").unwrap().data()[0] as f64).abs();
            assert!(now < last);
            last = now;
        }
        assert!(last < 0.5, "{last}");
    }

    #[test]
    fn nan_gradient_aborts_with_step() {
        let mut store = scalar_store(1.0);
        let mut state = AdamState::new(&store);
        store.grad_mut(0).data_mut()[0] = 1.0;
        adam_step(&mut store, &mut state, &AdamConfig::default()).unwrap();
        let before = store.clone();
        store.grad_mut(0).data_mut()[0] = f32::NAN;
        match adam_step(&mut store, &mut state, &AdamConfig::default()) {
            Err(Error::NonFinite { step, what }) => {
                assert_eq!(step, 2);
                assert!(what.contains('p'));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(store, before);
        assert_eq!(state.t(), 1);
    }
}
