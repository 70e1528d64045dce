//! The completion network: two point-set encoders, a Gaussian head on the
//! missing-part latent, and a hypernetwork decoder that emits the weights of
//! a small per-object target MLP mapping noise points to surface points.
//!
//! The reconstruction-only variant ([`Variant::Rec`]) keeps a single encoder
//! on the existing part and feeds its code straight to the decoder.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint;
use crate::autodiff::nn::{forward_stack, Activation, DenseLayer};
use crate::autodiff::{ParamSet, Tape, Var};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Two encoders, Gaussian prior on the missing-part latent.
    #[default]
    Full,
    /// One encoder on the existing part, reconstruction loss only.
    Rec,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "rec" => Ok(Variant::Rec),
            other => Err(Error::invalid(format!("unknown variant {other:?}"))),
        }
    }
}

/// Layer widths of every sub-network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub variant: Variant,
    /// Length of `z_e` and of `z_m`.
    pub latent_dim: usize,
    /// Per-point MLP widths before max pooling (input width 3 is implied).
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of the decoder.
    pub decoder_widths: Vec<usize>,
    /// Target network widths, input and output included.
    pub target_widths: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            latent_dim: 128,
            encoder_widths: vec![64, 128, 256],
            decoder_widths: vec![512, 1024],
            target_widths: vec![3, 32, 64, 128, 64, 3],
        }
    }
}

impl Architecture {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    /// Shrunken widths for gradient checks and fast tests.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            latent_dim: 4,
            encoder_widths: vec![6, 8],
            decoder_widths: vec![10],
            target_widths: vec![3, 5, 6, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.target_widths;
        if t.len() < 2 || t[0] != 3 || t[t.len() - 1] != 3 {
            return Err(Error::invalid("target widths must start and end with 3"));
        }
        if self.latent_dim == 0
            || self.encoder_widths.is_empty()
            || self.encoder_widths.iter().chain(&self.decoder_widths).chain(t).any(|&w| w == 0)
        {
            return Err(Error::invalid("all widths must be positive and the encoder non-empty"));
        }
        Ok(())
    }

    pub fn decoder_input_dim(&self) -> usize {
        match self.variant {
            Variant::Full => 2 * self.latent_dim,
            Variant::Rec => self.latent_dim,
        }
    }

    pub fn target_layout(&self) -> TargetLayout {
        TargetLayout::new(self.target_widths.clone())
    }
}

/// Placement of one target layer inside the flat weight vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub offset: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Layer-major layout of target-network weights: for each layer the
/// row-major `out x in` weight matrix followed by the bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetLayout {
    widths: Vec<usize>,
}

impl TargetLayout {
    pub fn new(widths: Vec<usize>) -> Self {
        Self { widths }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn slots(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    offset,
                    in_dim: w[0],
                    out_dim: w[1],
                };
                offset += w[0] * w[1] + w[1];
                slot
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Runs the target network stored in row `row` of `theta` on the
    /// `n x 3` points `u`: ReLU on hidden layers, linear output.
    pub fn forward_on(&self, tape: &mut Tape<'_>, theta: Var, row: usize, u: Var) -> Result<Var> {
        let slots = self.slots();
        let mut x = u;
        for (i, s) in slots.iter().enumerate() {
            x = tape.target_layer(x, theta, row, s.offset, s.in_dim, s.out_dim)?;
            if i + 1 < slots.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

/// The flat parameter vector of one target network.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetWeights {
    layout: TargetLayout,
    theta: Vec<f64>,
}

impl TargetWeights {
    pub fn new(layout: TargetLayout, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != layout.param_count() {
            return Err(Error::shape(format!(
                "target weights: expected {} values, got {}",
                layout.param_count(),
                theta.len()
            )));
        }
        Ok(Self { layout, theta })
    }

    pub fn layout(&self) -> &TargetLayout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.theta
    }
}

/// Applies the target network pointwise to `u`.
pub fn target_forward(weights: &TargetWeights, u: &PointCloud) -> Result<PointCloud> {
    let empty = ParamSet::default();
    let mut tape = Tape::frozen(&empty);
    let theta = tape.constant(
        Array2::from_shape_vec((1, weights.theta.len()), weights.theta.clone()).expect("1 x n"),
    );
    let ui = tape.constant(u.to_array());
    let out = weights.layout.forward_on(&mut tape, theta, 0, ui)?;
    PointCloud::from_array(tape.value(out))
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::shape(format!("mu has {} entries, logvar {}", mu.len(), logvar.len())));
    }
    Ok(-0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
            .sum::<f64>())
}

/// KL term on the tape, summed over all rows.
pub fn kl_on(tape: &mut Tape<'_>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let a = tape.sub(logvar, mu2)?;
    let b = tape.sub(a, var)?;
    let c = tape.add_scalar(b, 1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, -0.5))
}

/// `mu + exp(logvar / 2) * eps` on the tape.
pub fn reparameterize_on(tape: &mut Tape<'_>, mu: Var, logvar: Var, eps: Array2<f64>) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps);
    let noise = tape.mul(std, e)?;
    tape.add(mu, noise)
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Encoder {
    backbone: Vec<DenseLayer>,
    heads: Vec<DenseLayer>,
}

impl Encoder {
    fn init(params: &mut ParamSet, name: &str, arch: &Architecture, heads: &[&str], rng: &mut seed::Rng) -> Self {
        let mut backbone = Vec::new();
        let mut in_dim = 3;
        for (i, &w) in arch.encoder_widths.iter().enumerate() {
            backbone.push(DenseLayer::init(params, &format!("{name}.backbone.{i}"), in_dim, w, rng));
            in_dim = w;
        }
        let heads = heads
            .iter()
            .map(|h| DenseLayer::init(params, &format!("{name}.{h}"), in_dim, arch.latent_dim, rng))
            .collect();
        Self { backbone, heads }
    }

    fn bind(params: &ParamSet, name: &str, arch: &Architecture, heads: &[&str]) -> Option<Self> {
        let mut backbone = Vec::new();
        let mut in_dim = 3;
        for (i, &w) in arch.encoder_widths.iter().enumerate() {
            backbone.push(DenseLayer::bind(params, &format!("{name}.backbone.{i}"), in_dim, w)?);
            in_dim = w;
        }
        let heads = heads
            .iter()
            .map(|h| DenseLayer::bind(params, &format!("{name}.{h}"), in_dim, arch.latent_dim))
            .collect::<Option<_>>()?;
        Some(Self { backbone, heads })
    }

    /// Per-point MLP, max pool, then each head: one `1 x latent` var per head.
    fn forward(&self, tape: &mut Tape<'_>, cloud: &PointCloud) -> Result<Vec<Var>> {
        let x = tape.constant(cloud.to_array());
        let features = forward_stack(tape, &self.backbone, x, false)?;
        let pooled = tape.max_rows(features)?;
        self.heads
            .iter()
            .map(|h| h.forward(tape, pooled, Activation::None))
            .collect()
    }
}

/// Output of a full forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperOutput {
    pub reconstruction: PointCloud,
    pub mu: Option<Vec<f64>>,
    pub logvar: Option<Vec<f64>>,
}

/// Missing-part code: `z = mu` in deterministic mode, a reparameterized
/// draw otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct MissingCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

/// Self-describing metadata stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub architecture: Architecture,
    /// Radius-interpolation parameter of the noise the model was trained on.
    pub noise_alpha: f64,
    pub target_param_count: usize,
    #[serde(default)]
    pub training: serde_json::Value,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CARD_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq)]
pub struct HyperPocket {
    arch: Architecture,
    params: ParamSet,
    existing: Encoder,
    missing: Option<Encoder>,
    decoder: Vec<DenseLayer>,
    layout: TargetLayout,
    /// See [`ModelCard::noise_alpha`].
    pub noise_alpha: f64,
    /// Free-form training provenance, persisted in the card.
    pub training_info: serde_json::Value,
}

const EXISTING: &str = "encoder_existing";
const MISSING: &str = "encoder_missing";

impl HyperPocket {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::stream(seed, "model-init");
        let mut params = ParamSet::default();
        let existing = Encoder::init(&mut params, EXISTING, &arch, &["head"], &mut rng);
        let missing = (arch.variant == Variant::Full)
            .then(|| Encoder::init(&mut params, MISSING, &arch, &["mu", "logvar"], &mut rng));
        let layout = arch.target_layout();
        let mut decoder = Vec::new();
        let mut in_dim = arch.decoder_input_dim();
        for (i, &w) in arch.decoder_widths.iter().chain([layout.param_count()].iter()).enumerate() {
            decoder.push(DenseLayer::init(&mut params, &format!("decoder.{i}"), in_dim, w, &mut rng));
            in_dim = w;
        }
        Ok(Self {
            arch,
            params,
            existing,
            missing,
            decoder,
            layout,
            noise_alpha: 0.0,
            training_info: serde_json::Value::Null,
        })
    }

    /// Rebuilds a model around an existing parameter set.
    pub fn from_params(arch: Architecture, params: ParamSet, noise_alpha: f64) -> Result<Self> {
        arch.validate()?;
        let mismatch = || Error::shape("parameters do not match the architecture");
        let existing = Encoder::bind(&params, EXISTING, &arch, &["head"]).ok_or_else(mismatch)?;
        let missing = match arch.variant {
            Variant::Full => Some(Encoder::bind(&params, MISSING, &arch, &["mu", "logvar"]).ok_or_else(mismatch)?),
            Variant::Rec => None,
        };
        let layout = arch.target_layout();
        let mut decoder = Vec::new();
        let mut in_dim = arch.decoder_input_dim();
        for (i, &w) in arch.decoder_widths.iter().chain([layout.param_count()].iter()).enumerate() {
            decoder.push(DenseLayer::bind(&params, &format!("decoder.{i}"), in_dim, w).ok_or_else(mismatch)?);
            in_dim = w;
        }
        let expected = existing.backbone.len() * 2
            + existing.heads.len() * 2
            + missing.as_ref().map_or(0, |m| m.backbone.len() * 2 + m.heads.len() * 2)
            + decoder.len() * 2;
        if expected != params.len() {
            return Err(mismatch());
        }
        Ok(Self {
            arch,
            params,
            existing,
            missing,
            decoder,
            layout,
            noise_alpha,
            training_info: serde_json::Value::Null,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layout(&self) -> &TargetLayout {
        &self.layout
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn card(&self) -> ModelCard {
        ModelCard {
            architecture: self.arch.clone(),
            noise_alpha: self.noise_alpha,
            target_param_count: self.layout.param_count(),
            training: self.training_info.clone(),
        }
    }

    // ---- tape-level building blocks ------------------------------------

    pub fn encode_existing_on(&self, tape: &mut Tape<'_>, cloud: &PointCloud) -> Result<Var> {
        Ok(self.existing.forward(tape, cloud)?[0])
    }

    /// `(mu, logvar)` rows for the missing part.
    pub fn encode_missing_on(&self, tape: &mut Tape<'_>, cloud: &PointCloud) -> Result<(Var, Var)> {
        let enc = self
            .missing
            .as_ref()
            .ok_or_else(|| Error::invalid("the rec variant has no missing-part encoder"))?;
        let out = enc.forward(tape, cloud)?;
        Ok((out[0], out[1]))
    }

    /// Decoder on a `B x in` batch of codes, giving `B x |theta|`.
    pub fn decode_on(&self, tape: &mut Tape<'_>, z: Var) -> Result<Var> {
        let width = tape.value(z).ncols();
        if width != self.arch.decoder_input_dim() {
            return Err(Error::shape(format!(
                "decoder expects codes of length {}, got {width}",
                self.arch.decoder_input_dim()
            )));
        }
        forward_stack(tape, &self.decoder, z, true)
    }

    pub fn target_on(&self, tape: &mut Tape<'_>, theta: Var, row: usize, u: &PointCloud) -> Result<Var> {
        let ui = tape.constant(u.to_array());
        self.layout.forward_on(tape, theta, row, ui)
    }

    // ---- value-level API -----------------------------------------------

    pub fn encode_existing(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let mut tape = Tape::frozen(&self.params);
        let z = self.encode_existing_on(&mut tape, cloud)?;
        Ok(tape.value(z).iter().copied().collect())
    }

    /// With `rng = None` the code is deterministic (`z = mu`).
    pub fn encode_missing(&self, cloud: &PointCloud, rng: Option<&mut dyn RngCore>) -> Result<MissingCode> {
        let mut tape = Tape::frozen(&self.params);
        let (mu, logvar) = self.encode_missing_on(&mut tape, cloud)?;
        let mu: Vec<f64> = tape.value(mu).iter().copied().collect();
        let logvar: Vec<f64> = tape.value(logvar).iter().copied().collect();
        let z = match rng {
            None => mu.clone(),
            Some(rng) => mu
                .iter()
                .zip(&logvar)
                .map(|(m, lv)| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + (0.5 * lv).exp() * e
                })
                .collect(),
        };
        Ok(MissingCode { mu, logvar, z })
    }

    /// Decoder input for one object: `z_e ++ z_m` (full) or `z_e` (rec).
    pub fn decoder_input(&self, z_e: &[f64], z_m: Option<&[f64]>) -> Result<Vec<f64>> {
        let d = self.arch.latent_dim;
        if z_e.len() != d {
            return Err(Error::shape(format!("z_e must have length {d}, got {}", z_e.len())));
        }
        match (self.arch.variant, z_m) {
            (Variant::Full, Some(zm)) if zm.len() == d => Ok(z_e.iter().chain(zm).copied().collect()),
            (Variant::Full, Some(zm)) => Err(Error::shape(format!("z_m must have length {d}, got {}", zm.len()))),
            (Variant::Full, None) => Err(Error::invalid("the full variant needs a missing-part code")),
            (Variant::Rec, None) => Ok(z_e.to_vec()),
            (Variant::Rec, Some(_)) => Err(Error::invalid("the rec variant takes no missing-part code")),
        }
    }

    pub fn decode_weights(&self, z_e: &[f64], z_m: Option<&[f64]>) -> Result<TargetWeights> {
        let input = self.decoder_input(z_e, z_m)?;
        Ok(self.decode_batch(Array2::from_shape_vec((1, input.len()), input).expect("1 x n"))?.remove(0))
    }

    /// Decodes each row of `codes` (already concatenated decoder inputs).
    pub fn decode_batch(&self, codes: Array2<f64>) -> Result<Vec<TargetWeights>> {
        let mut tape = Tape::frozen(&self.params);
        let z = tape.constant(codes);
        let theta = self.decode_on(&mut tape, z)?;
        tape.value(theta)
            .axis_iter(Axis(0))
            .map(|row| TargetWeights::new(self.layout.clone(), row.to_vec()))
            .collect()
    }

    /// Reconstruction of the object whose parts are `existing`/`missing`,
    /// sampled at the noise points `u`. The rec variant ignores `missing`.
    pub fn hyper_forward(
        &self,
        existing: &PointCloud,
        missing: Option<&PointCloud>,
        u: &PointCloud,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<HyperOutput> {
        let z_e = self.encode_existing(existing)?;
        let (weights, mu, logvar) = match self.arch.variant {
            Variant::Full => {
                let missing = missing.ok_or_else(|| Error::invalid("the full variant needs the missing part"))?;
                let code = self.encode_missing(missing, rng)?;
                (self.decode_weights(&z_e, Some(&code.z))?, Some(code.mu), Some(code.logvar))
            }
            Variant::Rec => (self.decode_weights(&z_e, None)?, None, None),
        };
        Ok(HyperOutput {
            reconstruction: target_forward(&weights, u)?,
            mu,
            logvar,
        })
    }

    // ---- persistence ----------------------------------------------------

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let card = serde_json::to_value(self.card())?;
        checkpoint::save_params(dir.join(CHECKPOINT_FILE), &self.params, card.clone())?;
        let path = dir.join(CARD_FILE);
        fs::write(&path, serde_json::to_string_pretty(&card)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let card_path = dir.join(CARD_FILE);
        let text = fs::read_to_string(&card_path).map_err(|e| Error::io(&card_path, e))?;
        let card: ModelCard = serde_json::from_str(&text)?;
        let (params, _) = checkpoint::load_params(dir.join(CHECKPOINT_FILE))?;
        let mut model = Self::from_params(card.architecture, params, card.noise_alpha)?;
        if model.layout.param_count() != card.target_param_count {
            return Err(Error::shape("card and architecture disagree on the target size"));
        }
        model.training_info = card.training;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{sample_ball_interior, sample_sphere_surface};
    use rand::seq::SliceRandom;

    /// Independent count: every layer has `in * out` weights and `out` biases.
    fn count_params(widths: &[usize]) -> usize {
        let mut total = 0;
        for i in 1..widths.len() {
            total += widths[i - 1] * widths[i];
            total += widths[i];
        }
        total
    }

    fn tiny(variant: Variant) -> HyperPocket {
        HyperPocket::new(Architecture::tiny(variant), 3).unwrap()
    }

    fn cloud(n: usize, s: u64) -> PointCloud {
        sample_ball_interior(n, 1.0, &mut seed::stream(s, "model-test")).unwrap()
    }

    #[test]
    fn default_target_has_19011_weights() {
        let arch = Architecture::default();
        assert_eq!(arch.target_layout().param_count(), 19011);
        assert_eq!(count_params(&arch.target_widths), 19011);
        let slots = arch.target_layout().slots();
        assert_eq!(slots[1].offset, 3 * 32 + 32);
        assert_eq!(slots.last().unwrap().out_dim, 3);
    }

    #[test]
    fn encoders_are_permutation_invariant() {
        let model = tiny(Variant::Full);
        let c = cloud(40, 1);
        let mut pts = c.points().to_vec();
        pts.shuffle(&mut seed::stream(0, "shuffle"));
        let shuffled = PointCloud::new(pts).unwrap();
        assert_eq!(model.encode_existing(&c).unwrap(), model.encode_existing(&shuffled).unwrap());
        assert_eq!(
            model.encode_missing(&c, None).unwrap(),
            model.encode_missing(&shuffled, None).unwrap()
        );
        let doubled = c.concat(&c);
        assert_eq!(model.encode_existing(&c).unwrap(), model.encode_existing(&doubled).unwrap());
    }

    #[test]
    fn latent_lengths_match_default_config() {
        let model = HyperPocket::new(Architecture::default(), 0).unwrap();
        let c = cloud(64, 2);
        assert_eq!(model.encode_existing(&c).unwrap().len(), 128);
        let code = model.encode_missing(&c, None).unwrap();
        assert_eq!((code.mu.len(), code.logvar.len()), (128, 128));
        let theta = model.decode_weights(&code.mu, Some(&code.mu)).unwrap();
        assert_eq!(theta.as_slice().len(), 19011);
    }

    #[test]
    fn missing_code_modes() {
        let model = tiny(Variant::Full);
        let c = cloud(20, 3);
        let det = model.encode_missing(&c, None).unwrap();
        assert_eq!(det.z, det.mu);
        let a = model.encode_missing(&c, Some(&mut seed::stream(5, "eps"))).unwrap();
        let b = model.encode_missing(&c, Some(&mut seed::stream(5, "eps"))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.z, a.mu);
    }

    #[test]
    fn decoder_input_validation() {
        let model = tiny(Variant::Full);
        assert!(model.decode_weights(&[0.0; 4], Some(&[0.0; 3])).is_err());
        assert!(model.decode_weights(&[0.0; 4], None).is_err());
        let a = model.decode_weights(&[0.1; 4], Some(&[0.2; 4])).unwrap();
        let b = model.decode_weights(&[0.1; 4], Some(&[0.2; 4])).unwrap();
        assert_eq!(a, b);
        let rec = tiny(Variant::Rec);
        assert!(rec.decode_weights(&[0.0; 4], Some(&[0.0; 4])).is_err());
        assert_eq!(rec.decode_weights(&[0.0; 4], None).unwrap().as_slice().len(), rec.layout().param_count());
    }

    #[test]
    fn target_forward_is_pointwise() {
        let model = tiny(Variant::Full);
        let w = model.decode_weights(&[0.3; 4], Some(&[-0.1; 4])).unwrap();
        let u = cloud(30, 4);
        let out = target_forward(&w, &u).unwrap();
        assert_eq!(out.len(), 30);
        let reversed = PointCloud::new(u.points().iter().rev().copied().collect()).unwrap();
        let out_rev = target_forward(&w, &reversed).unwrap();
        let back: Vec<_> = out_rev.points().iter().rev().copied().collect();
        assert_eq!(back, out.points());

        let zero = TargetWeights::new(w.layout().clone(), vec![0.0; w.as_slice().len()]).unwrap();
        assert!(target_forward(&zero, &u).unwrap().points().iter().all(|p| *p == [0.0; 3]));
        assert!(TargetWeights::new(w.layout().clone(), vec![0.0; 5]).is_err());
    }

    #[test]
    fn hyper_forward_smoke() {
        let model = HyperPocket::new(Architecture::default(), 9).unwrap();
        let u = sample_sphere_surface(2048, &mut seed::stream(1, "u")).unwrap();
        let out = model.hyper_forward(&cloud(256, 5), Some(&cloud(256, 6)), &u, None).unwrap();
        assert_eq!(out.reconstruction.len(), 2048);
        let again = model.hyper_forward(&cloud(256, 5), Some(&cloud(256, 6)), &u, None).unwrap();
        assert_eq!(out, again);
        assert!(tiny(Variant::Full).hyper_forward(&cloud(8, 1), None, &u, None).is_err());
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_divergence(&[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(kl_divergence(&[1.0], &[0.0]).unwrap(), 0.5);
        assert!(kl_divergence(&[0.0], &[0.0, 1.0]).is_err());
        let mut rng = seed::stream(3, "kl");
        for _ in 0..100 {
            let mu: Vec<f64> = (0..5).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
            let lv: Vec<f64> = (0..5).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
            assert!(kl_divergence(&mu, &lv).unwrap() >= 0.0);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny(Variant::Full);
        model.noise_alpha = 0.5;
        model.save(dir.path()).unwrap();
        let back = HyperPocket::load(dir.path()).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.noise_alpha, 0.5);
        let rec = tiny(Variant::Rec);
        assert!(HyperPocket::from_params(Architecture::tiny(Variant::Full), rec.params().clone(), 0.0).is_err());
    }
}
