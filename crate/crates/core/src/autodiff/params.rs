use rand::Rng;

use super::tape::{NodeId, Tape};
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    velocity: Vec<f64>,
}

impl Param {
    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// Named trainable parameters with momentum buffers, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    pub hyper: SgdConfig,
}

/// Tape nodes holding one step's copy of every parameter.
#[derive(Debug, Clone)]
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

impl ParamStore {
    pub fn new(hyper: SgdConfig) -> Self {
        Self {
            params: Vec::new(),
            hyper,
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        assert!(self.id(name).is_none(), "duplicate parameter {name}");
        assert_eq!(data.len(), shape.iter().product::<usize>());
        let velocity = vec![0.0; data.len()];
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            velocity,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform weight `[fan_in, fan_out]` and zero bias.
    pub fn add_linear<R: Rng>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> (ParamId, ParamId) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        let w = self.add(&format!("{prefix}.weight"), &[fan_in, fan_out], w);
        let b = self.add(&format!("{prefix}.bias"), &[fan_out], vec![0.0; fan_out]);
        (w, b)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let nodes = self
            .params
            .iter()
            .map(|p| tape.leaf(&p.shape, p.data.clone()))
            .collect();
        Binding { nodes }
    }

    /// `v <- m*v + g + wd*p; p <- p - lr*v`, reading gradients from the tape.
    ///
    /// All gradients are checked before any parameter moves.
    pub fn sgd_step(&mut self, tape: &Tape, binding: &Binding, lr: f64) -> Result<(), AutodiffError> {
        if !(lr > 0.0) {
            return Err(AutodiffError::InvalidLearningRate(lr));
        }
        for (p, node) in self.params.iter().zip(&binding.nodes) {
            if tape.grad(*node).iter().any(|g| !g.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient(p.name.clone()));
            }
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.hyper;
        for (p, node) in self.params.iter_mut().zip(&binding.nodes) {
            let g = tape.grad(*node);
            for ((x, v), gi) in p.data.iter_mut().zip(p.velocity.iter_mut()).zip(g) {
                *v = momentum * *v + gi + weight_decay * *x;
                *x -= lr * *v;
            }
        }
        Ok(())
    }

    pub fn reset_momentum(&mut self) {
        for p in &mut self.params {
            p.velocity.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copies values of every `from.*` parameter into the matching `to.*` one.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let pairs: Vec<(usize, usize)> = self
            .params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let rest = p.name.strip_prefix(from)?;
                let j = self.id(&format!("{to}{rest}"))?;
                Some((i, j.0))
            })
            .collect();
        for (i, j) in pairs {
            assert_eq!(self.params[i].shape, self.params[j].shape);
            let data = self.params[i].data.clone();
            self.params[j].data = data;
        }
    }

    /// Replaces values from `(name, shape, values)` records; names must match exactly.
    pub fn load_values<'a>(
        &mut self,
        records: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
    ) -> Result<(), AutodiffError> {
        let mut seen = 0;
        for (name, shape, values) in records {
            let id = self
                .id(name)
                .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
            let p = &mut self.params[id.0];
            if p.shape != shape || values.len() != p.data.len() {
                return Err(AutodiffError::ShapeMismatch {
                    name: name.to_string(),
                    expected: p.shape.clone(),
                    got: shape.to_vec(),
                });
            }
            p.data.copy_from_slice(values);
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(AutodiffError::MissingParameters {
                expected: self.params.len(),
                got: seen,
            });
        }
        self.reset_momentum();
        Ok(())
    }
}
