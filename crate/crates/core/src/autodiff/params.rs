//! Named parameter storage and the Adam update rule.

use std::collections::BTreeMap;

use rand::Rng;

use super::graph::GraphError;
use super::tensor::Tensor;

/// First/second-moment state for one parameter tensor.
#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam hyperparameters; defaults are the standard (0.9, 0.999, 1e-8).
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Ordered collection of named parameter tensors plus optimizer state.
/// Name order (BTreeMap) fixes binding order, update order, and checkpoint
/// record order, which keeps whole-pipeline runs bit-reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    values: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), GraphError> {
        if self.values.contains_key(name) {
            return Err(GraphError::DuplicateParam { name: name.to_string() });
        }
        self.values.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, GraphError> {
        self.values
            .get(name)
            .ok_or_else(|| GraphError::UnboundParam { name: name.to_string() })
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), GraphError> {
        match self.values.get_mut(name) {
            Some(slot) => {
                *slot = tensor;
                Ok(())
            }
            None => Err(GraphError::UnboundParam { name: name.to_string() }),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|k| k.as_str())
    }

    /// Copies every entry whose name starts with `prefix` into a new set
    /// (optimizer state is not carried over).
    pub fn subset(&self, prefix: &str) -> Self {
        let values: BTreeMap<String, Tensor> = self
            .values
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self { values, moments: BTreeMap::new(), step: 0 }
    }

    /// Merges `other` into self; duplicate names are an error.
    pub fn absorb(&mut self, other: ParamSet) -> Result<(), GraphError> {
        for (name, tensor) in other.values {
            if self.values.contains_key(&name) {
                return Err(GraphError::DuplicateParam { name });
            }
            self.values.insert(name, tensor);
        }
        Ok(())
    }

    /// Number of scalar coefficients across all tensors.
    pub fn coefficient_count(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// One Adam step over the entries named in `grads` that satisfy `keep`
    /// (use `|_| true` to train everything). Rejects non-finite gradients by
    /// name before touching any state, so a failed step leaves the
    /// parameters exactly as they were.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        cfg: &AdamConfig,
        keep: impl Fn(&str) -> bool,
    ) -> Result<(), GraphError> {
        for (name, g) in grads {
            if !keep(name) {
                continue;
            }
            if !self.values.contains_key(name) {
                return Err(GraphError::UnboundParam { name: name.clone() });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(GraphError::NonFiniteGradient { name: name.clone() });
            }
        }
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (name, g) in grads {
            if !keep(name) {
                continue;
            }
            let tensor = self.values.get_mut(name).expect("validated above");
            debug_assert_eq!(tensor.len(), g.len());
            let mom = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            let w = tensor.data_mut();
            for i in 0..g.len() {
                mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g[i];
                mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                w[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

/// Glorot-uniform matrix: entries i.i.d. uniform on ±sqrt(6/(fan_in+fan_out))
/// with fan_in = rows and fan_out = cols.
pub fn glorot_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| crate::seeds::uniform(rng, -limit, limit))
        .collect();
    Tensor::matrix(rows, cols, data).expect("length matches by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;

    #[test]
    fn insert_rejects_duplicates() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            p.insert("w", Tensor::scalar(2.0)),
            Err(GraphError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn iteration_is_name_ordered() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::scalar(2.0)).unwrap();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        p.insert("c", Tensor::scalar(3.0)).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // With m = (1-b1)g, v = (1-b2)g^2 and bias correction, the first
        // update is lr * g/(|g| + eps') ~= lr * sign(g) for any g != 0.
        let mut p = ParamSet::new();
        p.insert("w", Tensor::row(vec![1.0, -2.0])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.3, -0.7]);
        let cfg = AdamConfig::with_learning_rate(0.01);
        p.adam_step(&grads, &cfg, |_| true).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-6, "w0={}", w[0]);
        assert!((w[1] - (-2.0 + 0.01)).abs() < 1e-6, "w1={}", w[1]);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize 0.5*||w - target||^2; gradient w - target.
        let mut p = ParamSet::new();
        p.insert("w", Tensor::row(vec![5.0, -3.0, 0.5])).unwrap();
        let target = [1.0, 2.0, -0.25];
        let cfg = AdamConfig::with_learning_rate(0.05);
        for _ in 0..2000 {
            let w = p.get("w").unwrap().data().to_vec();
            let g: Vec<f64> = w.iter().zip(&target).map(|(wi, ti)| wi - ti).collect();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), g);
            p.adam_step(&grads, &cfg, |_| true).unwrap();
        }
        let w = p.get("w").unwrap().data();
        for (wi, ti) in w.iter().zip(&target) {
            assert!((wi - ti).abs() < 1e-3, "{wi} vs {ti}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        p.insert("z", Tensor::scalar(2.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![0.5]);
        grads.insert("z".to_string(), vec![f64::NAN]);
        let cfg = AdamConfig::with_learning_rate(0.1);
        match p.adam_step(&grads, &cfg, |_| true) {
            Err(GraphError::NonFiniteGradient { name }) => assert_eq!(name, "z"),
            other => panic!("expected rejection, got {other:?}"),
        }
        // "a" must not have moved even though it precedes "z" alphabetically.
        assert_eq!(p.get("a").unwrap().data()[0], 1.0);
        assert_eq!(p.step, 0);
    }

    #[test]
    fn filter_freezes_parameters() {
        let mut p = ParamSet::new();
        p.insert("enc.w", Tensor::scalar(1.0)).unwrap();
        p.insert("cu.w", Tensor::scalar(1.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("enc.w".to_string(), vec![1.0]);
        grads.insert("cu.w".to_string(), vec![1.0]);
        let cfg = AdamConfig::with_learning_rate(0.1);
        p.adam_step(&grads, &cfg, |n| n.starts_with("cu.")).unwrap();
        assert_eq!(p.get("enc.w").unwrap().data()[0], 1.0);
        assert!(p.get("cu.w").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn glorot_respects_limit_and_varies() {
        let mut rng = rng_from(5);
        let t = glorot_uniform(&mut rng, 30, 20);
        let limit = (6.0f64 / 50.0).sqrt();
        assert!(t.data().iter().all(|x| x.abs() < limit));
        let distinct: std::collections::BTreeSet<u64> =
            t.data().iter().map(|x| x.to_bits()).collect();
        assert!(distinct.len() > 500);
    }
}
