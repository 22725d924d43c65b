//! Fully connected building blocks whose weights live in a [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GroupId, ParamId, ParamStore, Tape, Tensor, Var};

/// Layer widths and activation of a fully connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

pub(crate) fn default_slope() -> f64 {
    0.01
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            leaky_slope: default_slope(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("all layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)` weights, zero bias.
    FanIn,
    Zero,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: GroupId,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::FanIn => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(vec![fan_in, fan_out], data).expect("sized")
            }
            Init::Zero => Tensor::zeros(vec![fan_in, fan_out]),
        };
        let weight = store.add_param(group, format!("{name}.weight"), w);
        let bias = store.add_param(group, format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(x.matmul(w)?.add(b)?)
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[1]
    }
}

/// Stack of leaky-ReLU hidden layers. `hidden_out` exposes the last hidden
/// activation so heads can branch from it.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

impl Trunk {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        group: GroupId,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(
                store,
                group,
                &format!("{prefix}.{i}"),
                fan_in,
                h,
                Init::FanIn,
                rng,
            ));
            fan_in = h;
        }
        Self { layers, slope }
    }

    /// Width of the trunk output.
    pub fn out_dim(&self, store: &ParamStore, input: usize) -> usize {
        self.layers.last().map_or(input, |l| l.fan_out(store))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, store, h)?.leaky_relu(self.slope);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fan_in_bounds() {
        let mut store = ParamStore::new();
        let g = store.add_group("g").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, g, "l", 16, 4, Init::FanIn, &mut rng);
        assert!(store.value(l.weight).data().iter().all(|w| w.abs() < 0.25));
        assert!(store.value(l.bias).data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_width_is_rejected() {
        assert!(MlpSpec::new(3, vec![4, 0], 1).validate().is_err());
        assert!(MlpSpec::new(3, vec![4], 1).validate().is_ok());
    }
}
