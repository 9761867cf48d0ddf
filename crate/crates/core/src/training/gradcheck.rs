//! Central finite-difference check of tape adjoints.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Ctx, NodeId, Op, Tape};
use crate::error::{Error, Result};
use crate::params::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Lower bound on the relative-error denominator, in units of
    /// `max(1, |f|)` for the checked scalar `f`, so that entries with
    /// near-zero gradients are compared absolutely. Central differences at
    /// `h = 1e-5` carry about `1e-11·|f|` of rounding noise, which a much
    /// smaller floor would report as error on exactly-zero gradients.
    pub floor: f64,
    /// Estimates at `h` and `h/2` that disagree by more than this (relative)
    /// are treated as straddling a kink and skipped.
    pub kink_tol: f64,
    /// Batch-norm mode of the checked graph.
    pub training: bool,
    /// Per-tensor cap on checked entries; evenly spaced when hit.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, floor: 1e-5, kink_tol: 1e-4, training: true, max_entries: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryReport {
    /// Parameter name or `input{k}`.
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<EntryReport>,
    pub checked: usize,
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    fn record(&mut self, e: EntryReport) {
        self.checked += 1;
        if e.rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e.rel_err);
            self.worst = Some(e);
        }
    }
}

fn eval<F>(store: &ParameterStore, inputs: &[Array2<f64>], training: bool, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new(store).train_mode(training);
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let v = tape.value(&root);
    if v.dim() != (1, 1) {
        return Err(Error::shape("checked function must return a 1x1 value"));
    }
    Ok(v[[0, 0]])
}

fn entries(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences, for every trainable parameter and every input.
pub fn grad_check<F>(
    store: &ParameterStore,
    inputs: &[Array2<f64>],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new(store).train_mode(cfg.training);
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let floor = cfg.floor * tape.value(&root)[[0, 0]].abs().max(1.0);
    let grads = tape.backward(root)?;
    drop(tape);

    let mut report = GradCheckReport::default();
    let compare = |analytic: f64, value: f64, probe: &mut dyn FnMut(f64) -> Result<f64>| -> Result<Option<(f64, f64)>> {
        let step = cfg.h * value.abs().max(1.0);
        let d1 = (probe(value + step)? - probe(value - step)?) / (2.0 * step);
        let half = step / 2.0;
        let d2 = (probe(value + half)? - probe(value - half)?) / (2.0 * half);
        if (d1 - d2).abs() > cfg.kink_tol * d1.abs().max(d2.abs()).max(floor) {
            return Ok(None);
        }
        let rel = (analytic - d1).abs() / analytic.abs().max(d1.abs()).max(floor);
        Ok(Some((d1, rel)))
    };

    for (name, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let analytic: Option<Vec<f64>> = grads.params.get(name).map(|g| g.iter().copied().collect());
        let mut perturbed = store.clone();
        for i in entries(p.value.len(), cfg.max_entries) {
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let original = p.value[i];
            let mut probe = |v: f64| {
                perturbed.get_mut(name)?.value[i] = v;
                let out = eval(&perturbed, inputs, cfg.training, &f);
                perturbed.get_mut(name)?.value[i] = original;
                out
            };
            match compare(a, original, &mut probe)? {
                None => report.kinks += 1,
                Some((numeric, rel_err)) => {
                    report.record(EntryReport { tensor: name.to_string(), index: i, analytic: a, numeric, rel_err })
                }
            }
        }
    }

    for (k, (x, id)) in inputs.iter().zip(&ids).enumerate() {
        let analytic = grads.inputs.get(id);
        let mut xs = inputs.to_vec();
        for i in entries(x.len(), cfg.max_entries) {
            let (r, c) = (i / x.ncols(), i % x.ncols());
            let a = analytic.map_or(0.0, |g| g[[r, c]]);
            let original = x[[r, c]];
            let mut probe = |v: f64| {
                xs[k][[r, c]] = v;
                let out = eval(store, &xs, cfg.training, &f);
                xs[k][[r, c]] = original;
                out
            };
            match compare(a, original, &mut probe)? {
                None => report.kinks += 1,
                Some((numeric, rel_err)) => {
                    report.record(EntryReport { tensor: format!("input{k}"), index: i, analytic: a, numeric, rel_err })
                }
            }
        }
    }
    Ok(report)
}

/// Moves a freshly initialized store to a generic point: norm scales in
/// `[0.5, 1.5]`, norm shifts and biases in `[-0.2, 0.2]`. Zero biases put
/// many activations exactly on a ReLU kink, where the gradient is undefined.
pub fn perturb_params(store: &mut ParameterStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        if name.ends_with(".gamma") {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if name.ends_with(".beta") || name.ends_with(".b") {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

/// `Σ R ⊙ y` for a fixed random `R` in `[-1, 1]`: a scalar that exercises
/// every output entry of `y`.
pub fn projection_loss<C: Ctx>(cx: &mut C, y: &C::Var, seed: u64) -> Result<C::Var> {
    let (n, m) = cx.value(y).dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Array2::from_shape_simple_fn((n, m), || rng.random_range(-1.0..1.0));
    let r = cx.constant(r);
    let prod = cx.apply(Op::Mul, &[y, &r])?;
    cx.apply(Op::SumAll, &[&prod])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_conv::{leaky, linear};
    use ndarray::array;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("l.w", vec![3, 2], vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4], true).unwrap();
        s.insert("l.b", vec![2], vec![0.05, -0.1], true).unwrap();
        s
    }

    #[test]
    fn affine_is_tight() {
        let x = array![[0.2, -1.0, 0.4], [1.5, 0.3, -0.6]];
        let r = grad_check(&store(), &[x], &GradCheckConfig::default(), |t, ids| {
            let y = linear(t, &ids[0], "l")?;
            projection_loss(t, &y, 1)
        })
        .unwrap();
        assert!(r.passes(1e-8), "{r:?}");
        assert_eq!(r.checked, 6 + 2 + 6);
    }

    #[test]
    fn leaky_away_from_zero() {
        let x = array![[0.5, -0.8], [-1.2, 2.0]];
        // piecewise linear, so a wide step has no truncation error
        let cfg = GradCheckConfig { h: 1e-3, ..Default::default() };
        let r = grad_check(&ParameterStore::new(), &[x], &cfg, |t, ids| {
            let y = leaky(t, &ids[0], 0.1)?;
            projection_loss(t, &y, 2)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-10, "{r:?}");
        assert_eq!(r.kinks, 0);
    }

    #[test]
    fn wrong_adjoint_is_caught() {
        // a value that ignores its input looks like a zero gradient
        let x = array![[1.0]];
        let r = grad_check(&ParameterStore::new(), &[x], &GradCheckConfig::default(), |t, ids| {
            let v = t.value(&ids[0]).clone();
            let c = t.constant(v * 3.0);
            t.apply(Op::SumAll, &[&c])
        })
        .unwrap();
        assert!(!r.passes(1e-3));
    }

    #[test]
    fn kink_detection() {
        // the kink sits between h/2 and h from the probe point
        let x = array![[-7e-6]];
        let r = grad_check(&ParameterStore::new(), &[x], &GradCheckConfig::default(), |t, ids| {
            let y = leaky(t, &ids[0], 0.1)?;
            let y2 = t.apply(Op::Mul, &[&y, &y])?;
            let s = t.apply(Op::WeightedSum { weights: vec![1.0, 1.0] }, &[&y, &y2])?;
            t.apply(Op::SumAll, &[&s])
        })
        .unwrap();
        assert_eq!(r.kinks, 1);
        assert_eq!(r.checked, 0);
        assert!(!r.passes(1.0));
    }
}
