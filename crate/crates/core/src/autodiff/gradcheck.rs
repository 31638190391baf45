//! Central finite-difference checks of tape gradients with respect to the
//! entries of a [`ParamStore`].

use rand::Rng;

use super::params::{Binding, ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::AutodiffError;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    /// Finite-difference slope times the expected multiplier.
    pub expected: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.coords.is_empty() && self.max_rel_err() < tol
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Relative error with an absolute floor, so two values that are both
/// numerically zero compare equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs() / 1e-8
    } else {
        (a - b).abs() / scale
    }
}

/// Compares backprop against `multiplier(name) * (f(p + h) - f(p - h)) / 2h` on
/// `coords` random entries of the parameters for which `multiplier` is `Some`.
/// A multiplier of `0.0` asserts that no gradient reaches the parameter.
pub fn check_param_gradients<F, M>(
    store: &mut ParamStore,
    build: F,
    multiplier: M,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&ParamStore, &mut Tape, &Binding) -> Result<NodeId, AutodiffError>,
    M: Fn(&str) -> Option<f64>,
{
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let root = build(store, &mut tape, &b)?;
    tape.backward(root)?;

    let mut pool: Vec<(ParamId, usize, f64)> = Vec::new();
    for (i, p) in store.params().iter().enumerate() {
        if let Some(m) = multiplier(&p.name) {
            pool.extend((0..p.data.len()).map(|k| (ParamId(i), k, m)));
        }
    }
    let mut rng = rng_for(seed, "gradcheck", &[]);
    let mut report = GradCheckReport::default();
    if pool.is_empty() {
        return Ok(report);
    }
    let eval = |store: &ParamStore| -> Result<f64, AutodiffError> {
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let r = build(store, &mut t, &b)?;
        Ok(t.scalar(r))
    };
    for _ in 0..coords {
        let (id, k, m) = pool[rng.random_range(0..pool.len())];
        let analytic = tape.grad(b.node(id))[k];
        let orig = store.get(id).data[k];
        store.get_mut(id).data[k] = orig + h;
        let up = eval(store)?;
        store.get_mut(id).data[k] = orig - h;
        let down = eval(store)?;
        store.get_mut(id).data[k] = orig;
        let expected = m * (up - down) / (2.0 * h);
        report.coords.push(CoordCheck {
            param: store.get(id).name.clone(),
            index: k,
            analytic,
            expected,
            rel_err: relative_error(analytic, expected),
        });
    }
    Ok(report)
}
