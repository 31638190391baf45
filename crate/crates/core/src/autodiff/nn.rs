use rand::Rng;

use super::params::{Binding, ParamId, ParamStore};
use super::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let (weight, bias) = store.add_linear(prefix, fan_in, fan_out, rng);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: NodeId) -> NodeId {
        let y = tape.matmul(x, b.node(self.weight));
        tape.add_bias(y, b.node(self.bias))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data.iter_mut().for_each(|w| *w = 0.0);
        store.get_mut(self.bias).data.iter_mut().for_each(|w| *w = 0.0);
    }
}

/// Fully connected layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; layer `i` is named `{prefix}.{i}`.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, b, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().unwrap()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::SgdConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new(SgdConfig::default());
        let l = Linear::new(&mut s, "fc", 6, 10, &mut rng);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(s.get(l.weight).data.iter().all(|w| w.abs() <= bound));
        assert!(s.get(l.bias).data.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn mlp_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new(SgdConfig::default());
        let m = Mlp::new(&mut s, "m", &[4, 8, 3], &mut rng);
        let mut t = Tape::new();
        let b = s.bind(&mut t);
        let x = t.matrix(5, 4, vec![0.1; 20]);
        let y = m.forward(&mut t, &b, x);
        assert_eq!(t.shape(y), &[5, 3]);
        assert_eq!(s.len(), 4);
    }
}
