//! End-to-end gradient verification of the training objective.
//!
//! The parameter check runs the same batch objective that training uses
//! (encoders, reparameterised code, decoder, target network, Chamfer and KL)
//! with a fixed random stream, so every evaluation sees the same noise.
//! Separate checks isolate the target network, the Chamfer term and the KL
//! term on their own inputs.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{self, GradCheckReport, GroupReport, DEFAULT_STEP};
use crate::autodiff::{ParamSet, Tape};
use crate::cloud::{normalize_unit_sphere, sample_ball_interior, split_by_normal, PartitionedCloud, PointCloud};
use crate::error::{Error, Result};
use crate::model::{kl_on, Architecture, HyperPocket, Variant};
use crate::seed;
use crate::training::objective;

/// Threshold for a passing check.
pub const TOLERANCE: f64 = 1e-4;
/// Points per cloud in the verification batch.
pub const CHECK_POINTS: usize = 16;
/// KL weight used during verification, large enough for the KL path to
/// carry a visible share of every encoder-missing gradient.
pub const CHECK_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Shrunken widths; every coordinate is checked.
    Tiny,
    /// Production widths; a strided subset of each tensor is checked.
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "full" => Ok(Scale::Full),
            other => Err(Error::invalid(format!("unknown scale {other:?}"))),
        }
    }
}

impl Scale {
    fn architecture(self, variant: Variant) -> Architecture {
        match self {
            Scale::Tiny => Architecture::tiny(variant),
            Scale::Full => Architecture::with_variant(variant),
        }
    }

    /// Finite-difference step. At production width the loss is large enough
    /// that roundoff in `(f(x+h) - f(x-h)) / 2h` reaches 1e-10 at `h = 1e-5`,
    /// which is 1e-4 of the smallest target-weight gradients.
    pub fn step(self) -> f64 {
        match self {
            Scale::Tiny => DEFAULT_STEP,
            Scale::Full => 1e-4,
        }
    }

    fn per_tensor(self) -> Option<usize> {
        match self {
            Scale::Tiny => None,
            Scale::Full => Some(6),
        }
    }
}

/// Deliberate corruption of one analytic gradient, used to confirm that the
/// harness notices a wrong gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Fault {
    /// Parameter whose gradient is scaled.
    pub param: String,
    pub factor: f64,
}

impl Fault {
    /// Scales the first decoder weight gradient by 1.5.
    pub fn default_for(model: &HyperPocket) -> Self {
        let name = model
            .params()
            .iter()
            .map(|(_, n, _)| n.to_string())
            .find(|n| n.starts_with("decoder"))
            .expect("every model has a decoder");
        Fault { param: name, factor: 1.5 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub scale: Scale,
    pub variant: Variant,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub checked: usize,
    pub skipped: usize,
    pub groups: Vec<GroupReport>,
    /// Parameter or input holding the worst error.
    pub worst: Option<String>,
}

impl VerifyReport {
    fn from_report(scale: Scale, variant: Variant, r: GradCheckReport) -> Self {
        let max = r.max_rel_error();
        Self {
            scale,
            variant,
            tolerance: TOLERANCE,
            max_rel_error: max,
            passed: max < TOLERANCE && r.checked() > 0,
            checked: r.checked(),
            skipped: r.skipped(),
            worst: r.worst().map(|w| format!("{}[{}]", w.name, w.index)),
            groups: r.groups,
        }
    }
}

fn module_of(name: &str) -> String {
    name.split('.').next().unwrap_or(name).to_string()
}

/// Two random objects squashed into ellipsoids, split in half.
fn batch(n: usize, rng: &mut seed::Rng) -> Result<Vec<PartitionedCloud>> {
    (0..2)
        .map(|i| {
            let scale = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
            let pts = sample_ball_interior(n, 0.3, rng)?
                .points()
                .iter()
                .map(|p| [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]])
                .collect();
            let cloud = normalize_unit_sphere(&PointCloud::new(pts)?)?;
            split_by_normal(&cloud, [0.0, 1.0, 0.0], &format!("check-{i}"))
        })
        .collect()
}

fn model_params(model: &HyperPocket, scale: Scale, seed: u64, fault: Option<&Fault>) -> Result<GradCheckReport> {
    let data = batch(CHECK_POINTS, &mut seed::stream(seed, "verify-data"))?;
    let draws = seed::stream(seed, "verify-draws");
    // layers read their weights through the tape, so a perturbed copy of
    // the parameters can stand in for the model's own
    let eval = |params: &ParamSet| -> Result<(f64, u64)> {
        let mut tape = Tape::frozen(params);
        let obj = objective(&mut tape, model, &data, 0.5, CHECK_LAMBDA, CHECK_POINTS, &mut draws.clone())?;
        Ok((obj.breakdown.total, tape.decision_signature()))
    };
    let mut tape = Tape::new(model.params());
    let obj = objective(&mut tape, model, &data, 0.5, CHECK_LAMBDA, CHECK_POINTS, &mut draws.clone())?;
    let mut grads = tape.backward(obj.total)?;
    if let Some(f) = fault {
        let id = model
            .params()
            .find(&f.param)
            .ok_or_else(|| Error::invalid(format!("no parameter named {}", f.param)))?;
        if let Some(g) = grads.param_grads_mut()[id.index()].as_mut() {
            g.mapv_inplace(|v| v * f.factor);
        }
    }
    let mut failure = None;
    let report = gradcheck::check_params_sampled(
        model.params(),
        &grads,
        scale.step(),
        module_of,
        scale.per_tensor(),
        |p| match eval(p) {
            Ok(r) => r,
            Err(e) => {
                failure.get_or_insert(e);
                (f64::NAN, 0)
            }
        },
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// `d theta` through the target network and Chamfer term alone.
fn target_network(model: &HyperPocket, h: f64, seed: u64) -> Result<GroupReport> {
    let mut rng = seed::stream(seed, "verify-target");
    let target = sample_ball_interior(CHECK_POINTS, 0.5, &mut rng)?;
    let u = sample_ball_interior(CHECK_POINTS, 0.5, &mut rng)?;
    let n = model.layout().param_count();
    let limit = 1.0 / (model.layout().widths().iter().max().copied().unwrap_or(1) as f64).sqrt();
    let theta = Array2::from_shape_simple_fn((1, n), || rng.random_range(-limit..limit) * 2.0);
    let empty = ParamSet::default();
    let run = |t: &Array2<f64>| -> Result<(f64, u64, Option<Array2<f64>>)> {
        let mut tape = Tape::frozen(&empty);
        let th = tape.variable(t.clone());
        let ui = tape.constant(u.to_array());
        let y = model.layout().forward_on(&mut tape, th, 0, ui)?;
        let c = tape.constant(target.to_array());
        let l = tape.chamfer(y, c)?;
        let g = tape.backward(l)?.wrt(th).cloned();
        Ok((tape.scalar(l), tape.decision_signature(), g))
    };
    let (_, _, g) = run(&theta)?;
    let g = g.ok_or_else(|| Error::invalid("no gradient for theta"))?;
    Ok(gradcheck::check_array("target", "theta", &theta, &g, h, |t| {
        run(t).map(|(v, s, _)| (v, s)).unwrap_or((f64::NAN, 0))
    }))
}

fn chamfer_term(seed: u64) -> Result<GroupReport> {
    let mut rng = seed::stream(seed, "verify-chamfer");
    let x = sample_ball_interior(CHECK_POINTS, 1.0, &mut rng)?.to_array();
    let y = sample_ball_interior(CHECK_POINTS + 5, 1.0, &mut rng)?.to_array();
    let empty = ParamSet::default();
    let run = |a: &Array2<f64>| -> (f64, u64, Array2<f64>) {
        let mut tape = Tape::frozen(&empty);
        let av = tape.variable(a.clone());
        let bv = tape.constant(y.clone());
        let l = tape.chamfer(av, bv).expect("n x 3 inputs");
        let g = tape.backward(l).expect("scalar loss").wrt(av).cloned().expect("variable");
        (tape.scalar(l), tape.decision_signature(), g)
    };
    let (_, _, g) = run(&x);
    Ok(gradcheck::check_array("chamfer", "points", &x, &g, DEFAULT_STEP, |a| {
        let (v, s, _) = run(a);
        (v, s)
    }))
}

fn kl_term(dim: usize, seed: u64) -> Result<GroupReport> {
    let mut rng = seed::stream(seed, "verify-kl");
    let x = Array2::from_shape_simple_fn((2, dim), || rng.random_range(-1.5..1.5));
    let empty = ParamSet::default();
    let run = |v: &Array2<f64>| -> Result<(f64, Array2<f64>)> {
        let mut tape = Tape::frozen(&empty);
        let mu = tape.variable(v.row(0).to_owned().insert_axis(ndarray::Axis(0)));
        let lv = tape.variable(v.row(1).to_owned().insert_axis(ndarray::Axis(0)));
        let l = kl_on(&mut tape, mu, lv)?;
        let g = tape.backward(l)?;
        let mut out = Array2::zeros((2, dim));
        out.row_mut(0).assign(&g.wrt(mu).expect("mu").row(0));
        out.row_mut(1).assign(&g.wrt(lv).expect("logvar").row(0));
        Ok((tape.scalar(l), out))
    };
    let (_, g) = run(&x)?;
    Ok(gradcheck::check_array("kl", "mu|logvar", &x, &g, DEFAULT_STEP, |v| {
        run(v).map(|(l, _)| (l, 0)).unwrap_or((f64::NAN, 0))
    }))
}

/// Runs every check on a freshly initialised model of the given scale.
pub fn gradient_check(scale: Scale, variant: Variant, seed: u64, fault: Option<&Fault>) -> Result<VerifyReport> {
    let model = HyperPocket::new(scale.architecture(variant), seed)?;
    let mut report = model_params(&model, scale, seed, fault)?;
    report.add(target_network(&model, scale.step(), seed)?);
    report.add(chamfer_term(seed)?);
    if variant == Variant::Full {
        report.add(kl_term(model.latent_dim(), seed)?);
    }
    Ok(VerifyReport::from_report(scale, variant, report))
}
