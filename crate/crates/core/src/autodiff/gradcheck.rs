//! Central finite-difference verification of tape gradients.
//!
//! Each coordinate is perturbed by `+h` and `-h`. If either evaluation takes
//! a different discrete branch (ReLU sign, max-pool winner, nearest
//! neighbour) than the unperturbed one, the function is not smooth across
//! the step and the coordinate is skipped rather than compared.

use ndarray::Array2;
use serde::Serialize;

use super::{Gradients, ParamSet};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Worst {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: Option<Worst>,
}

impl GroupReport {
    fn new(group: &str) -> Self {
        Self {
            group: group.to_string(),
            ..Self::default()
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some(Worst {
                name: name.to_string(),
                index,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }

    fn absorb(&mut self, other: GroupReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if let Some(w) = other.worst {
            if self.worst.as_ref().is_none_or(|mine| w.rel_error > mine.rel_error) {
                self.max_rel_error = self.max_rel_error.max(w.rel_error);
                self.worst = Some(w);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.groups.iter().map(|g| g.skipped).sum()
    }

    pub fn worst(&self) -> Option<&Worst> {
        self.groups
            .iter()
            .filter_map(|g| g.worst.as_ref())
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Folds `report` into the group of the same name (or appends it).
    pub fn add(&mut self, report: GroupReport) {
        match self.groups.iter_mut().find(|g| g.group == report.group) {
            Some(g) => g.absorb(report),
            None => self.groups.push(report),
        }
    }
}

fn central_difference<F>(values: &mut [f64], i: usize, h: f64, base_sig: u64, f: &mut F) -> Option<f64>
where
    F: FnMut(&[f64]) -> (f64, u64),
{
    let orig = values[i];
    values[i] = orig + h;
    let (plus, sig_plus) = f(values);
    values[i] = orig - h;
    let (minus, sig_minus) = f(values);
    values[i] = orig;
    (sig_plus == base_sig && sig_minus == base_sig).then(|| (plus - minus) / (2.0 * h))
}

/// Checks `analytic` against finite differences of `f` over a flat vector.
/// `f` returns the loss and the decision signature of its forward pass.
pub fn check_slice<F>(group: &str, name: &str, values: &[f64], analytic: &[f64], h: f64, mut f: F) -> GroupReport
where
    F: FnMut(&[f64]) -> (f64, u64),
{
    assert_eq!(values.len(), analytic.len());
    let mut report = GroupReport::new(group);
    let mut work = values.to_vec();
    let (_, base_sig) = f(&work);
    for i in 0..work.len() {
        match central_difference(&mut work, i, h, base_sig, &mut f) {
            Some(numeric) => report.record(name, i, analytic[i], numeric),
            None => report.skipped += 1,
        }
    }
    report
}

/// As [`check_slice`] for a matrix input.
pub fn check_array<F>(group: &str, name: &str, x: &Array2<f64>, analytic: &Array2<f64>, h: f64, mut f: F) -> GroupReport
where
    F: FnMut(&Array2<f64>) -> (f64, u64),
{
    let shape = x.dim();
    let flat: Vec<f64> = x.iter().copied().collect();
    let grad: Vec<f64> = analytic.iter().copied().collect();
    check_slice(group, name, &flat, &grad, h, |v| {
        f(&Array2::from_shape_vec(shape, v.to_vec()).expect("shape preserved"))
    })
}

/// Checks every parameter gradient. `group_of` maps a parameter name to its
/// report group; parameters absent from `analytic` are treated as having a
/// zero gradient.
pub fn check_params<F, G>(params: &ParamSet, analytic: &Gradients, h: f64, group_of: G, f: F) -> GradCheckReport
where
    F: FnMut(&ParamSet) -> (f64, u64),
    G: Fn(&str) -> String,
{
    check_params_sampled(params, analytic, h, group_of, None, f)
}

/// Evenly spaced coordinates of a tensor with `len` entries, at most `limit`.
pub fn strided_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < len => (0..m).map(|i| (2 * i + 1) * len / (2 * m)).collect(),
        _ => (0..len).collect(),
    }
}

/// As [`check_params`], visiting at most `max_per_tensor` coordinates of
/// each tensor (evenly spaced) when given.
pub fn check_params_sampled<F, G>(
    params: &ParamSet,
    analytic: &Gradients,
    h: f64,
    group_of: G,
    max_per_tensor: Option<usize>,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&ParamSet) -> (f64, u64),
    G: Fn(&str) -> String,
{
    let mut work = params.clone();
    let (_, base_sig) = f(&work);
    let mut report = GradCheckReport::default();
    for (id, name, value) in params.iter() {
        let mut group = GroupReport::new(&group_of(name));
        let zeros;
        let grad = match analytic.param(id) {
            Some(g) => g,
            None => {
                zeros = Array2::zeros(value.dim());
                &zeros
            }
        };
        for i in strided_indices(value.len(), max_per_tensor) {
            let orig = value.as_slice().unwrap()[i];
            let mut eval = |delta: f64| {
                work.get_mut(id).as_slice_mut().unwrap()[i] = orig + delta;
                f(&work)
            };
            let (plus, sp) = eval(h);
            let (minus, sm) = eval(-h);
            work.get_mut(id).as_slice_mut().unwrap()[i] = orig;
            if sp == base_sig && sm == base_sig {
                group.record(name, i, grad.as_slice().unwrap()[i], (plus - minus) / (2.0 * h));
            } else {
                group.skipped += 1;
            }
        }
        report.add(group);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::nn::{forward_stack, DenseLayer};
    use crate::autodiff::Tape;
    use crate::seed;
    use rand::Rng;

    fn mlp(widths: &[usize], s: u64) -> (ParamSet, Vec<DenseLayer>) {
        let mut params = ParamSet::default();
        let mut rng = seed::stream(s, "gc-mlp");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::init(&mut params, &format!("l{i}"), w[0], w[1], &mut rng))
            .collect();
        (params, layers)
    }

    #[test]
    fn linear_network_quadratic_loss() {
        // no ReLU anywhere: one linear layer, squared-norm loss
        let (params, layers) = mlp(&[4, 3], 1);
        let mut rng = seed::stream(1, "gc-in");
        let x = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-1.0..1.0));
        fn loss<'p>(p: &'p ParamSet, layer: &DenseLayer, x: &Array2<f64>) -> (Tape<'p>, crate::autodiff::Var) {
            let mut t = Tape::new(p);
            let xi = t.constant(x.clone());
            let y = layer.forward(&mut t, xi, crate::autodiff::nn::Activation::None).unwrap();
            let sq = t.square(y);
            let l = t.sum(sq);
            (t, l)
        }
        let (t, l) = loss(&params, &layers[0], &x);
        let g = t.backward(l).unwrap();
        let report = check_params(&params, &g, DEFAULT_STEP, |n| n.to_string(), |p| {
            let (t, l) = loss(p, &layers[0], &x);
            (t.scalar(l), t.decision_signature())
        });
        assert_eq!(report.skipped(), 0);
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn relu_network_away_from_kinks() {
        let (params, layers) = mlp(&[3, 16, 16, 2], 2);
        let mut rng = seed::stream(2, "gc-in");
        let x = Array2::from_shape_simple_fn((8, 3), || rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((8, 2), || rng.random_range(-1.0..1.0));
        fn loss<'p>(
            p: &'p ParamSet,
            layers: &[DenseLayer],
            x: &Array2<f64>,
            target: &Array2<f64>,
        ) -> (Tape<'p>, crate::autodiff::Var) {
            let mut t = Tape::new(p);
            let xi = t.constant(x.clone());
            let y = forward_stack(&mut t, layers, xi, true).unwrap();
            let c = t.constant(target.clone());
            let d = t.sub(y, c).unwrap();
            let sq = t.square(d);
            let l = t.sum(sq);
            (t, l)
        }
        let (t, l) = loss(&params, &layers, &x, &target);
        let g = t.backward(l).unwrap();
        let report = check_params(&params, &g, DEFAULT_STEP, |n| n.to_string(), |p| {
            let (t, l) = loss(p, &layers, &x, &target);
            (t.scalar(l), t.decision_signature())
        });
        assert!(report.checked() > 0);
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let values = [1.0, 2.0];
        let wrong = [2.0, 4.4];
        let r = check_slice("q", "x", &values, &wrong, DEFAULT_STEP, |v| (v[0] * v[0] + v[1] * v[1], 0));
        assert!(r.max_rel_error > 0.05);
        assert_eq!(r.worst.unwrap().index, 1);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        // |x| at x = 0 changes branch under any perturbation
        let r = check_slice("abs", "x", &[0.0], &[0.0], DEFAULT_STEP, |v| (v[0].abs(), (v[0] > 0.0) as u64));
        assert_eq!((r.checked, r.skipped), (0, 1));
    }
}
