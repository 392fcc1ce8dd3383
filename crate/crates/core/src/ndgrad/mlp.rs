use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

/// Layer widths including the input width: `[d_in, h_1, ..., d_out]`.
/// The hidden activation follows every layer except the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: &[usize]) -> Result<Self> {
        let spec = MlpSpec { widths: widths.to_vec(), hidden_activation: Activation::Relu };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear(d_in: usize, d_out: usize) -> Self {
        MlpSpec { widths: vec![d_in, d_out], hidden_activation: Activation::Relu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::invalid(format!("mlp needs >= 1 layer of positive widths, got {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.weight")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.bias")
    }

    /// He-normal weights `[d_in, d_out]`, zero biases.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, seed: u64) {
        for (i, w) in self.widths.windows(2).enumerate() {
            store.init_he(&Self::weight_name(prefix, i), &[w[0], w[1]], w[0], seed);
            store.init_zeros(&Self::bias_name(prefix, i), &[w[1]]);
        }
    }
}

/// Applies the MLP stored under `prefix` to `x` of shape `[..., d_in]`.
pub fn apply_mlp<'g>(store: &ParamStore, prefix: &str, spec: &MlpSpec, x: Tensor<'g>) -> Result<Tensor<'g>> {
    spec.validate()?;
    let g = x.graph();
    let shape = x.shape();
    let d_in = *shape.last().unwrap_or(&1);
    if d_in != spec.d_in() || shape.is_empty() {
        return Err(Error::shape("apply_mlp", &[spec.d_in()], &shape));
    }
    let rows = x.numel() / d_in;
    let mut h = x.reshape(&[rows, d_in])?;
    for i in 0..spec.layers() {
        let w = g.param(store, &MlpSpec::weight_name(prefix, i))?;
        let b = g.param(store, &MlpSpec::bias_name(prefix, i))?;
        h = h.matmul(w)?.add_row(b)?;
        if i + 1 < spec.layers() && spec.hidden_activation == Activation::Relu {
            h = h.relu();
        }
    }
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.push(spec.d_out());
    h.reshape(&out_shape)
}
