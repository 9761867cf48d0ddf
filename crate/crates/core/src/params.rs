//! Named, shaped parameter arrays with paired gradient buffers.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Running statistics and other buffers are stored but not optimized.
    pub trainable: bool,
}

impl Param {
    /// Shape as a matrix: trailing dim is columns, the rest fold into rows;
    /// vectors become a single row.
    pub fn matrix_dim(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&cols, rest)) => (rest.iter().product(), cols),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>, trainable: bool) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::shape(format!("{name}: shape {shape:?} holds {n} values, got {}", value.len())));
        }
        if self.entries.contains_key(name) {
            return Err(Error::config(format!("parameter {name} registered twice")));
        }
        let grad = vec![0.0; n];
        self.entries.insert(name.to_string(), Param { shape, value, grad, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries.get_mut(name).ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let p = self.get(name)?;
        Ok(Array2::from_shape_vec(p.matrix_dim(), p.value.clone()).expect("size checked on insert"))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        Ok(Array1::from_vec(self.get(name)?.value.clone()))
    }

    pub fn set(&mut self, name: &str, value: &[f64]) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.len() != value.len() {
            return Err(Error::shape(format!("{name}: {} values expected", p.value.len())));
        }
        p.value.copy_from_slice(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: ArrayView2<f64>) -> Result<()> {
        let p = self.get_mut(name)?;
        if grad.len() != p.grad.len() {
            return Err(Error::shape(format!("{name}: gradient of {} values for {}", grad.len(), p.grad.len())));
        }
        for (g, d) in p.grad.iter_mut().zip(grad.iter()) {
            *g += d;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Exponential moving update of `{prefix}.running_mean/var`.
    pub fn update_running_stats(&mut self, prefix: &str, mean: &Array1<f64>, var: &Array1<f64>, momentum: f64) -> Result<()> {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let p = self.get_mut(&format!("{prefix}.{suffix}"))?;
            if p.value.len() != batch.len() {
                return Err(Error::shape(format!("{prefix}.{suffix}: channel mismatch")));
            }
            for (r, b) in p.value.iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Registers `{prefix}.w` with fan-in scaled uniform values and a zero
    /// `{prefix}.b`. `kernel_volume` > 1 adds a leading kernel axis.
    pub fn init_linear(
        &mut self,
        prefix: &str,
        kernel_volume: usize,
        cin: usize,
        cout: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) {
        let bound = init_bound(kernel_volume * cin, slope);
        let shape = if kernel_volume == 1 { vec![cin, cout] } else { vec![kernel_volume, cin, cout] };
        let n: usize = shape.iter().product();
        let w = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(&format!("{prefix}.w"), shape, w, true).expect("fresh name");
        self.insert(&format!("{prefix}.b"), vec![cout], vec![0.0; cout], true).expect("fresh name");
    }

    /// Registers batch-norm scale/shift and running statistics.
    pub fn init_norm(&mut self, prefix: &str, channels: usize) {
        let c = channels;
        self.insert(&format!("{prefix}.gamma"), vec![c], vec![1.0; c], true).expect("fresh name");
        self.insert(&format!("{prefix}.beta"), vec![c], vec![0.0; c], true).expect("fresh name");
        self.insert(&format!("{prefix}.running_mean"), vec![c], vec![0.0; c], false).expect("fresh name");
        self.insert(&format!("{prefix}.running_var"), vec![c], vec![1.0; c], false).expect("fresh name");
    }
}

/// Uniform init half-width with Kaiming gain for a leaky slope:
/// `sqrt(2 / (1 + slope²)) · sqrt(3 / fan_in)`.
pub fn init_bound(fan_in: usize, slope: f64) -> f64 {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    gain * (3.0 / fan_in.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insert_and_views() {
        let mut s = ParameterStore::new();
        s.insert("w", vec![2, 2, 3], (0..12).map(|v| v as f64).collect(), true).unwrap();
        s.insert("b", vec![3], vec![1.0, 2.0, 3.0], true).unwrap();
        assert_eq!(s.matrix("w").unwrap().dim(), (4, 3));
        assert_eq!(s.matrix("b").unwrap(), array![[1.0, 2.0, 3.0]]);
        assert!(s.insert("b", vec![1], vec![0.0], true).is_err());
        assert!(s.insert("c", vec![2], vec![0.0], true).is_err());
        assert!(s.matrix("nope").is_err());
        assert_eq!(s.num_trainable(), 15);
    }

    #[test]
    fn grads_accumulate_and_reset() {
        let mut s = ParameterStore::new();
        s.insert("b", vec![2], vec![0.0; 2], true).unwrap();
        s.accumulate_grad("b", array![[1.0, 2.0]].view()).unwrap();
        s.accumulate_grad("b", array![[1.0, 2.0]].view()).unwrap();
        assert_eq!(s.get("b").unwrap().grad, vec![2.0, 4.0]);
        s.zero_grads();
        assert_eq!(s.get("b").unwrap().grad, vec![0.0, 0.0]);
    }

    #[test]
    fn init_within_bounds() {
        let mut s = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.init_linear("l", 27, 4, 8, 0.01, &mut rng);
        let bound = init_bound(108, 0.01);
        assert_eq!(s.get("l.w").unwrap().shape, vec![27, 4, 8]);
        assert!(s.get("l.w").unwrap().value.iter().all(|v| v.abs() <= bound));
        assert!(s.get("l.b").unwrap().value.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_momentum() {
        let mut s = ParameterStore::new();
        s.init_norm("bn", 2);
        s.update_running_stats("bn", &array![1.0, 2.0], &array![3.0, 5.0], 0.1).unwrap();
        assert_eq!(s.get("bn.running_mean").unwrap().value, vec![0.1, 0.2]);
        let v = &s.get("bn.running_var").unwrap().value;
        assert!((v[0] - 1.2).abs() < 1e-15 && (v[1] - 1.4).abs() < 1e-15);
        assert!(!s.get("bn.running_var").unwrap().trainable);
    }
}
