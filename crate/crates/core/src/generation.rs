//! Sampling completions from the prior, latent adaptation under scene
//! constraints, part stitching and representation export.

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::AdamState;
use crate::autodiff::{Tape, Var};
use crate::cloud::{sample_ball_interior, PartitionedCloud, PointCloud};
use crate::distances::chamfer_indexed;
use crate::error::{Error, Result};
use crate::model::{target_forward, HyperPocket, Variant};
use crate::seed;

/// Prior scale used when none is given.
pub const DEFAULT_SIGMA: f64 = 0.05;

fn noise(model: &HyperPocket, n: usize, rng: &mut dyn RngCore) -> Result<PointCloud> {
    sample_ball_interior(n, model.noise_alpha, rng)
}

fn require_full(model: &HyperPocket, what: &str) -> Result<()> {
    match model.variant() {
        Variant::Full => Ok(()),
        Variant::Rec => Err(Error::invalid(format!("{what} needs the full variant (rec has no missing-part code)"))),
    }
}

/// `k` completions of `existing`, each decoded from `z_e ++ r_j` with
/// `r_j ~ N(0, sigma^2 I)`. All completions are sampled at one shared noise
/// draw `u`, so any difference between them comes from `r` alone. The rec
/// variant has no `r`; it returns `k` copies of its reconstruction and
/// ignores `sigma`.
pub fn complete(
    model: &HyperPocket,
    existing: &PointCloud,
    k: usize,
    sigma: f64,
    n_points: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<PointCloud>> {
    if existing.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive and finite, got {sigma}")));
    }
    let u = noise(model, n_points, rng)?;
    let z_e = model.encode_existing(existing)?;
    match model.variant() {
        Variant::Rec => {
            let out = target_forward(&model.decode_weights(&z_e, None)?, &u)?;
            Ok(vec![out; k])
        }
        Variant::Full => {
            let d = model.latent_dim();
            let prior = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let mut codes = Array2::zeros((k, 2 * d));
            for mut row in codes.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if j < d { z_e[j] } else { prior.sample(rng) };
                }
            }
            model
                .decode_batch(codes)?
                .par_iter()
                .map(|w| target_forward(w, &u))
                .collect()
        }
    }
}

/// A differentiable scene term added to the adaptation objective.
#[derive(Clone, Debug, PartialEq)]
pub enum Constraint {
    /// Contributes nothing.
    None,
    /// `weight * CD(X, floor)` with sum reduction.
    Floor { floor: PointCloud, weight: f64 },
}

pub fn floor_constraint(floor: PointCloud) -> Result<Constraint> {
    if floor.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(Constraint::Floor { floor, weight: 1.0 })
}

impl Constraint {
    pub fn with_weight(self, w: f64) -> Self {
        match self {
            Constraint::Floor { floor, .. } => Constraint::Floor { floor, weight: w },
            other => other,
        }
    }

    /// Unweighted term value on a produced cloud.
    pub fn raw_value(&self, x: &PointCloud) -> f64 {
        match self {
            Constraint::None => 0.0,
            Constraint::Floor { floor, .. } => chamfer_indexed(x, floor),
        }
    }

    pub fn weight(&self) -> f64 {
        match self {
            Constraint::None => 0.0,
            Constraint::Floor { weight, .. } => *weight,
        }
    }

    fn on(&self, tape: &mut Tape<'_>, x: Var) -> Result<Option<Var>> {
        match self {
            Constraint::None => Ok(None),
            Constraint::Floor { floor, weight } => {
                let f = tape.constant(floor.to_array());
                let cd = tape.chamfer(x, f)?;
                Ok(Some(tape.scale(cd, *weight)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    pub restarts: usize,
    /// Prior scale for restart initialisations.
    pub init_sigma: f64,
    /// Weight of `CD(X, P_e)`.
    pub consistency_weight: f64,
    /// Noise points per evaluation.
    pub n_points: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.01,
            restarts: 5,
            init_sigma: DEFAULT_SIGMA,
            consistency_weight: 1.0,
            n_points: 2048,
        }
    }
}

/// Objective terms at one iterate. `constraint` is unweighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdaptStep {
    pub step: usize,
    pub objective: f64,
    pub consistency: f64,
    pub constraint: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptResult {
    /// Starting code of the returned run.
    pub init: Vec<f64>,
    pub r: Vec<f64>,
    /// `steps + 1` entries: the initial point and every update.
    pub trajectory: Vec<AdaptStep>,
    pub restart: usize,
}

impl AdaptResult {
    pub fn initial(&self) -> &AdaptStep {
        &self.trajectory[0]
    }

    pub fn last(&self) -> &AdaptStep {
        self.trajectory.last().expect("trajectory is never empty")
    }
}

/// Fixed pieces of one adaptation problem.
struct Problem<'a> {
    model: &'a HyperPocket,
    existing: &'a PointCloud,
    constraint: &'a Constraint,
    cfg: &'a AdaptConfig,
    z_e: Vec<f64>,
}

impl Problem<'_> {
    fn evaluate(&self, r: &[f64], u: &PointCloud, step: usize) -> Result<(AdaptStep, PointCloud)> {
        let x = target_forward(&self.model.decode_weights(&self.z_e, Some(r))?, u)?;
        let consistency = chamfer_indexed(&x, self.existing);
        let constraint = self.constraint.raw_value(&x);
        let objective = self.cfg.consistency_weight * consistency + self.constraint.weight() * constraint;
        Ok((
            AdaptStep {
                step,
                objective,
                consistency,
                constraint,
            },
            x,
        ))
    }

    fn gradient(&self, r: &[f64], u: &PointCloud) -> Result<Vec<f64>> {
        let d = r.len();
        let mut tape = Tape::frozen(self.model.params());
        let ze = tape.constant(Array2::from_shape_vec((1, d), self.z_e.clone()).expect("1 x d"));
        let rv = tape.variable(Array2::from_shape_vec((1, d), r.to_vec()).expect("1 x d"));
        let z = tape.concat_cols(ze, rv)?;
        let theta = self.model.decode_on(&mut tape, z)?;
        let x = self.model.target_on(&mut tape, theta, 0, u)?;
        let pe = tape.constant(self.existing.to_array());
        let cd = tape.chamfer(x, pe)?;
        let mut total = tape.scale(cd, self.cfg.consistency_weight);
        if let Some(c) = self.constraint.on(&mut tape, x)? {
            total = tape.add(total, c)?;
        }
        if !tape.scalar(total).is_finite() {
            return Err(Error::Diverged("adaptation objective is not finite".into()));
        }
        let grads = tape.backward(total)?;
        Ok(grads.wrt(rv).map(|g| g.iter().copied().collect()).unwrap_or_else(|| vec![0.0; d]))
    }

    /// Adam on `r` alone. Each update draws fresh noise from `rng`; the
    /// trajectory is measured on the fixed `u_eval`.
    fn run(&self, init: &[f64], u_eval: &PointCloud, rng: &mut dyn RngCore) -> Result<(Vec<f64>, Vec<AdaptStep>)> {
        let mut r = init.to_vec();
        let mut adam = AdamState::new(self.cfg.lr, &[r.len()]);
        let mut trajectory = Vec::with_capacity(self.cfg.steps + 1);
        trajectory.push(self.evaluate(&r, u_eval, 0)?.0);
        for step in 1..=self.cfg.steps {
            let u = noise(self.model, self.cfg.n_points, rng)?;
            let g = self.gradient(&r, &u)?;
            adam.step_slices(&mut [&mut r[..]], &[Some(&g[..])])?;
            trajectory.push(self.evaluate(&r, u_eval, step)?.0);
        }
        Ok((r, trajectory))
    }
}

fn problem<'a>(
    model: &'a HyperPocket,
    existing: &'a PointCloud,
    constraint: &'a Constraint,
    cfg: &'a AdaptConfig,
) -> Result<Problem<'a>> {
    require_full(model, "adaptation")?;
    if existing.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if cfg.n_points == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("adaptation needs n_points > 0 and lr > 0"));
    }
    Ok(Problem {
        model,
        existing,
        constraint,
        cfg,
        z_e: model.encode_existing(existing)?,
    })
}

/// Optimises the missing-part code `r` from `init` with the model frozen.
/// `u_eval` is drawn from `rng` first; the per-step noise follows.
pub fn adapt(
    model: &HyperPocket,
    existing: &PointCloud,
    constraint: &Constraint,
    init: &[f64],
    cfg: &AdaptConfig,
    rng: &mut dyn RngCore,
) -> Result<AdaptResult> {
    let p = problem(model, existing, constraint, cfg)?;
    if init.len() != model.latent_dim() {
        return Err(Error::shape(format!("r must have length {}, got {}", model.latent_dim(), init.len())));
    }
    let u_eval = noise(model, cfg.n_points, rng)?;
    let (r, trajectory) = p.run(init, &u_eval, rng)?;
    Ok(AdaptResult {
        init: init.to_vec(),
        r,
        trajectory,
        restart: 0,
    })
}

/// Runs `cfg.restarts` adaptations from prior draws (`r = 0` when
/// `init_sigma` is zero) against one shared `u_eval` and keeps the run with
/// the lowest final objective.
pub fn adapt_best_of_restarts(
    model: &HyperPocket,
    existing: &PointCloud,
    constraint: &Constraint,
    cfg: &AdaptConfig,
    rng: &mut dyn RngCore,
) -> Result<AdaptResult> {
    let p = problem(model, existing, constraint, cfg)?;
    if cfg.restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let d = model.latent_dim();
    let u_eval = noise(model, cfg.n_points, rng)?;
    let starts: Vec<(Vec<f64>, u64)> = (0..cfg.restarts)
        .map(|_| {
            let init = (0..d)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut *rng);
                    cfg.init_sigma * e
                })
                .collect();
            (init, rng.next_u64())
        })
        .collect();
    let runs: Vec<(Vec<f64>, Vec<AdaptStep>)> = starts
        .par_iter()
        .map(|(init, s)| p.run(init, &u_eval, &mut seed::Rng::seed_from_u64(*s)))
        .collect::<Result<_>>()?;
    let (restart, (r, trajectory)) = runs
        .into_iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.last().unwrap().objective.total_cmp(&b.1 .1.last().unwrap().objective))
        .expect("at least one restart");
    Ok(AdaptResult {
        init: starts[restart].0.clone(),
        r,
        trajectory,
        restart,
    })
}

/// The cloud produced by code `r` for `existing`, at fresh noise.
pub fn render(model: &HyperPocket, existing: &PointCloud, r: &[f64], n_points: usize, rng: &mut dyn RngCore) -> Result<PointCloud> {
    require_full(model, "render")?;
    let u = noise(model, n_points, rng)?;
    target_forward(&model.decode_weights(&model.encode_existing(existing)?, Some(r))?, &u)
}

/// Reconstructs an object from the existing part of one object and the
/// missing part of another, encoding the latter deterministically.
pub fn stitch(
    model: &HyperPocket,
    existing: &PointCloud,
    missing: &PointCloud,
    n_points: usize,
    rng: &mut dyn RngCore,
) -> Result<PointCloud> {
    if existing.is_empty() || missing.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let u = noise(model, n_points, rng)?;
    Ok(model.hyper_forward(existing, Some(missing), &u, None)?.reconstruction)
}

/// One partitioned view of an object.
#[derive(Clone, Debug)]
pub struct View {
    pub sample_id: String,
    pub split_id: usize,
    pub cloud: PartitionedCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepresentationRow {
    pub sample_id: String,
    pub split_id: usize,
    /// `z_e ++ mu_m` (full) or `z_e` (rec).
    pub latent: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairDistance {
    pub a: String,
    pub b: String,
    pub latent: f64,
    pub theta: f64,
}

/// Distances between views. `same_object` pairs the first two splits of
/// every object with at least two; `different_object` pairs the first split
/// of every two distinct objects.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepresentationSummary {
    pub same_object: Vec<PairDistance>,
    pub different_object: Vec<PairDistance>,
    pub median_latent_same: f64,
    pub median_latent_different: f64,
    pub median_theta_same: f64,
    pub median_theta_different: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Deterministic encodings of every view, in input order.
pub fn export_representations(model: &HyperPocket, views: &[View]) -> Result<Vec<RepresentationRow>> {
    views
        .par_iter()
        .map(|v| {
            let z_e = model.encode_existing(&v.cloud.existing)?;
            let latent = match model.variant() {
                Variant::Full => model.decoder_input(&z_e, Some(&model.encode_missing(&v.cloud.missing, None)?.z))?,
                Variant::Rec => z_e,
            };
            let d = model.latent_dim();
            let z_m = (latent.len() > d).then(|| &latent[d..]);
            let theta = model.decode_weights(&latent[..d], z_m)?.into_vec();
            Ok(RepresentationRow {
                sample_id: v.sample_id.clone(),
                split_id: v.split_id,
                latent,
                theta,
            })
        })
        .collect()
}

pub fn summarize_representations(rows: &[RepresentationRow]) -> RepresentationSummary {
    let mut objects: Vec<(&str, Vec<&RepresentationRow>)> = Vec::new();
    for row in rows {
        match objects.iter_mut().find(|(id, _)| *id == row.sample_id) {
            Some((_, v)) => v.push(row),
            None => objects.push((&row.sample_id, vec![row])),
        }
    }
    let pair = |a: &RepresentationRow, b: &RepresentationRow| PairDistance {
        a: format!("{}#{}", a.sample_id, a.split_id),
        b: format!("{}#{}", b.sample_id, b.split_id),
        latent: euclid(&a.latent, &b.latent),
        theta: euclid(&a.theta, &b.theta),
    };
    let same_object: Vec<PairDistance> = objects
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(_, v)| pair(v[0], v[1]))
        .collect();
    let firsts: Vec<&RepresentationRow> = objects.iter().map(|(_, v)| v[0]).collect();
    let different_object: Vec<PairDistance> = (0..firsts.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let firsts = &firsts;
            (i + 1..firsts.len()).map(move |j| pair(firsts[i], firsts[j]))
        })
        .collect();
    let med = |v: &[PairDistance], f: fn(&PairDistance) -> f64| median(&v.iter().map(f).collect::<Vec<_>>());
    RepresentationSummary {
        median_latent_same: med(&same_object, |p| p.latent),
        median_latent_different: med(&different_object, |p| p.latent),
        median_theta_same: med(&same_object, |p| p.theta),
        median_theta_different: med(&different_object, |p| p.theta),
        same_object,
        different_object,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{sample_sphere_surface, split_by_normal};
    use crate::distances::chamfer;
    use crate::model::Architecture;

    fn tiny(v: Variant) -> HyperPocket {
        HyperPocket::new(Architecture::tiny(v), 3).unwrap()
    }

    fn sphere(n: usize, s: u64) -> PointCloud {
        sample_sphere_surface(n, &mut seed::stream(s, "gen-test")).unwrap()
    }

    #[test]
    fn complete_counts_and_determinism() {
        let m = tiny(Variant::Full);
        let pe = sphere(32, 1);
        let a = complete(&m, &pe, 4, 0.5, 20, &mut seed::stream(9, "c")).unwrap();
        let b = complete(&m, &pe, 4, 0.5, 20, &mut seed::stream(9, "c")).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|c| c.len() == 20));
        assert_eq!(a, b);
        assert!(chamfer(&a[0], &a[1]) > 0.0);
    }

    #[test]
    fn complete_rejects_bad_arguments() {
        let m = tiny(Variant::Full);
        let pe = sphere(8, 1);
        let mut rng = seed::stream(0, "c");
        assert!(complete(&m, &pe, 0, 0.1, 8, &mut rng).is_err());
        assert!(complete(&m, &pe, 2, 0.0, 8, &mut rng).is_err());
        assert!(complete(&m, &pe, 2, f64::NAN, 8, &mut rng).is_err());
    }

    #[test]
    fn collapsed_prior_gives_identical_completions() {
        let m = tiny(Variant::Full);
        let pe = sphere(32, 2);
        let c = complete(&m, &pe, 10, 1e-12, 64, &mut seed::stream(1, "c")).unwrap();
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                assert!(chamfer(&c[i], &c[j]) < 1e-6);
            }
        }
    }

    #[test]
    fn rec_completions_are_identical() {
        let m = tiny(Variant::Rec);
        let c = complete(&m, &sphere(16, 3), 3, 0.3, 16, &mut seed::stream(1, "c")).unwrap();
        assert_eq!(c[0], c[1]);
        assert_eq!(c[1], c[2]);
    }

    #[test]
    fn floor_constraint_values() {
        let floor = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let c = floor_constraint(floor.clone()).unwrap();
        assert_eq!(c.raw_value(&floor), 0.0);
        let near = c.raw_value(&floor.translated([0.0, 0.5, 0.0]));
        let far = c.raw_value(&floor.translated([0.0, 2.0, 0.0]));
        assert!(far > near && near > 0.0);
    }

    #[test]
    fn zero_steps_returns_the_initial_code() {
        let m = tiny(Variant::Full);
        let pe = sphere(16, 4);
        let init: Vec<f64> = (0..m.latent_dim()).map(|i| i as f64 * 0.1).collect();
        let cfg = AdaptConfig {
            steps: 0,
            n_points: 16,
            ..AdaptConfig::default()
        };
        let out = adapt(&m, &pe, &Constraint::None, &init, &cfg, &mut seed::stream(0, "a")).unwrap();
        assert_eq!(out.r, init);
        assert_eq!(out.trajectory.len(), 1);
    }

    #[test]
    fn adaptation_leaves_the_model_untouched() {
        let m = tiny(Variant::Full);
        let before = m.params().clone();
        let pe = sphere(16, 5);
        let floor = sphere(16, 6).translated([0.0, -2.0, 0.0]);
        let cfg = AdaptConfig {
            steps: 5,
            restarts: 2,
            n_points: 16,
            ..AdaptConfig::default()
        };
        let out =
            adapt_best_of_restarts(&m, &pe, &floor_constraint(floor).unwrap(), &cfg, &mut seed::stream(0, "a")).unwrap();
        assert_eq!(m.params(), &before);
        assert_eq!(out.trajectory.len(), 6);
        assert!(out.restart < 2);
    }

    #[test]
    fn adaptation_rejects_rec() {
        let m = tiny(Variant::Rec);
        let pe = sphere(8, 1);
        let cfg = AdaptConfig::default();
        assert!(adapt(&m, &pe, &Constraint::None, &[0.0; 4], &cfg, &mut seed::stream(0, "a")).is_err());
    }

    #[test]
    fn adapt_gradient_matches_finite_differences() {
        let m = tiny(Variant::Full);
        let pe = sphere(12, 7);
        let floor = sphere(10, 8).translated([0.0, -1.5, 0.0]);
        let constraint = floor_constraint(floor).unwrap().with_weight(0.7);
        let cfg = AdaptConfig {
            n_points: 12,
            ..AdaptConfig::default()
        };
        let p = problem(&m, &pe, &constraint, &cfg).unwrap();
        let u = noise(&m, 12, &mut seed::stream(1, "u")).unwrap();
        let r: Vec<f64> = (0..m.latent_dim()).map(|i| 0.2 * i as f64 - 0.3).collect();
        let g = p.gradient(&r, &u).unwrap();
        let h = 1e-6;
        for i in 0..r.len() {
            let (mut a, mut b) = (r.clone(), r.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (p.evaluate(&a, &u, 0).unwrap().0.objective - p.evaluate(&b, &u, 0).unwrap().0.objective) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1.0), "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn stitch_of_one_object_is_its_reconstruction() {
        let m = tiny(Variant::Full);
        let parts = split_by_normal(&sphere(40, 9), [0.0, 1.0, 0.0], "s").unwrap();
        let s = stitch(&m, &parts.existing, &parts.missing, 25, &mut seed::stream(2, "s")).unwrap();
        let u = noise(&m, 25, &mut seed::stream(2, "s")).unwrap();
        let r = m.hyper_forward(&parts.existing, Some(&parts.missing), &u, None).unwrap();
        assert_eq!(s.len(), 25);
        assert_eq!(s, r.reconstruction);
    }

    #[test]
    fn representation_rows_and_distances() {
        let m = tiny(Variant::Full);
        let mut views = Vec::new();
        for obj in 0..3u64 {
            let c = sphere(30, 20 + obj);
            for (s, n) in [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]].into_iter().enumerate() {
                views.push(View {
                    sample_id: format!("o{obj}"),
                    split_id: s,
                    cloud: split_by_normal(&c, n, "v").unwrap(),
                });
            }
        }
        let rows = export_representations(&m, &views).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].latent.len(), 8);
        assert_eq!(rows[0].theta.len(), m.layout().param_count());
        let dup = export_representations(&m, &views[..1]).unwrap();
        assert_eq!(euclid(&dup[0].theta, &rows[0].theta), 0.0);
        let s = summarize_representations(&rows);
        assert_eq!(s.same_object.len(), 3);
        assert_eq!(s.different_object.len(), 3);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
