//! Named trainable tensors and their gradients.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name, which is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Glorot-uniform matrix.
pub fn xavier<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect(),
    )
}

/// He-normal matrix for a layer with `fan_in` inputs.
pub fn he_normal<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| T::lit(normal.sample(rng)))
            .collect(),
    )
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn new(n_params: usize) -> Self {
        Grads {
            slots: vec![None; n_params],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn merge(&mut self, other: &Grads<T>) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.data.iter_mut().for_each(|x| *x = *x * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor::all_finite)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_lookup_and_cast() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor::zeros(2, 2));
        let b = s.add("b", Tensor::row_vector(vec![1.5, 2.5]));
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.name(a), "a");
        assert_eq!(s.num_scalars(), 6);
        let d: ParamStore<f64> = s.cast();
        assert_eq!(d.get(b).data, vec![1.5, 2.5]);
    }

    #[test]
    #[should_panic]
    fn duplicate_name_panics() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(1, 1));
        s.add("a", Tensor::zeros(1, 1));
    }

    #[test]
    fn grads_accumulate_and_merge() {
        let mut g = Grads::<f64>::new(2);
        g.accumulate(ParamId(1), &Tensor::row_vector(vec![1.0, 2.0]));
        g.accumulate(ParamId(1), &Tensor::row_vector(vec![1.0, 2.0]));
        let mut h = Grads::<f64>::new(2);
        h.merge(&g);
        assert_eq!(h.get(ParamId(1)).unwrap().data, vec![2.0, 4.0]);
        assert!(h.get(ParamId(0)).is_none());
        assert!((h.global_norm() - 20f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn init_is_seeded() {
        let a: Tensor<f32> = xavier(4, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let b: Tensor<f32> = xavier(4, 4, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }
}
