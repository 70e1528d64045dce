//! Dense layers on top of the tape.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamSet, Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Weights (`out x in`) and bias (`1 x out`) of a fully connected layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    /// Registers a layer with parameters drawn from U(-1/sqrt(in), 1/sqrt(in)).
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || rng.random_range(-bound..bound));
        let bias = Array2::from_shape_simple_fn((1, out_dim), || rng.random_range(-bound..bound));
        Self {
            weight: params.add(format!("{name}.weight"), weight),
            bias: params.add(format!("{name}.bias"), bias),
            in_dim,
            out_dim,
        }
    }

    /// Binds to parameters already present in `params` (e.g. after loading).
    pub fn bind(params: &ParamSet, name: &str, in_dim: usize, out_dim: usize) -> Option<Self> {
        let weight = params.find(&format!("{name}.weight"))?;
        let bias = params.find(&format!("{name}.bias"))?;
        (params.get(weight).dim() == (out_dim, in_dim) && params.get(bias).dim() == (1, out_dim)).then_some(
            Self {
                weight,
                bias,
                in_dim,
                out_dim,
            },
        )
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, activation: Activation) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.linear(x, w, b)?;
        Ok(match activation {
            Activation::Relu => tape.relu(y),
            Activation::None => y,
        })
    }
}

/// Runs `layers` in sequence with ReLU after every layer except (when
/// `linear_output`) the last.
pub fn forward_stack(tape: &mut Tape<'_>, layers: &[DenseLayer], mut x: Var, linear_output: bool) -> Result<Var> {
    for (i, layer) in layers.iter().enumerate() {
        let act = if linear_output && i + 1 == layers.len() {
            Activation::None
        } else {
            Activation::Relu
        };
        x = layer.forward(tape, x, act)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut params = ParamSet::default();
        let layer = DenseLayer::init(&mut params, "l", 2, 2, &mut seed::stream(0, "nn"));
        *params.get_mut(layer.weight) = Array2::eye(2);
        *params.get_mut(layer.bias) = Array2::zeros((1, 2));
        let mut tape = Tape::new(&params);
        let x = tape.constant(array![[-1.0, 2.0]]);
        let y = layer.forward(&mut tape, x, Activation::None).unwrap();
        assert_eq!(tape.value(y), array![[-1.0, 2.0]]);
        let r = layer.forward(&mut tape, x, Activation::Relu).unwrap();
        assert_eq!(tape.value(r), array![[0.0, 2.0]]);
    }

    #[test]
    fn output_width_and_shape_errors() {
        let mut params = ParamSet::default();
        let layer = DenseLayer::init(&mut params, "l", 3, 7, &mut seed::stream(1, "nn"));
        let mut tape = Tape::new(&params);
        let x = tape.constant(Array2::ones((4, 3)));
        assert_eq!(layer.forward(&mut tape, x, Activation::Relu).unwrap(), Var(tape.len() - 1));
        assert_eq!(tape.value(Var(tape.len() - 1)).dim(), (4, 7));
        let bad = tape.constant(Array2::ones((4, 2)));
        assert!(layer.forward(&mut tape, bad, Activation::None).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut params = ParamSet::default();
        let layer = DenseLayer::init(&mut params, "l", 16, 8, &mut seed::stream(2, "nn"));
        assert!(params.get(layer.weight).iter().all(|w| w.abs() <= 0.25));
        assert!(DenseLayer::bind(&params, "l", 16, 8).is_some());
        assert!(DenseLayer::bind(&params, "l", 8, 16).is_none());
    }
}
