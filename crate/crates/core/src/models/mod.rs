//! Encoder components, decoders, bounded ε-regressors and the recursive
//! mixture that ties them together.
//!
//! Every network owns exactly one parameter group: `phi_m` for encoder
//! component `m`, `eta_m` for the ε-regressor of component `m ≥ 1`, and
//! `theta` for the decoder.

pub mod checkpoint;
mod nn;

pub use nn::{Init, Linear, MlpSpec, Trunk};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{DiagGaussian, MixturePosterior, LN_2PI};
use crate::error::{Error, Result};
use crate::tensor::{GroupId, ParamStore, Tape, Tensor, Var};

/// Bounds on the decoder's per-dimension output log-variance.
pub const DECODER_LOGVAR_MIN: f64 = -7.0;
pub const DECODER_LOGVAR_MAX: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian,
    Bernoulli,
}

/// Architecture of a [`RecursiveMixtureModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_x: usize,
    pub d_z: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub eps_hidden: usize,
    pub eps_min: f64,
    pub eps_max: f64,
    pub likelihood: Likelihood,
    #[serde(default = "nn::default_slope")]
    pub leaky_slope: f64,
}

impl ModelSpec {
    pub fn new(d_x: usize, d_z: usize, likelihood: Likelihood) -> Self {
        Self {
            d_x,
            d_z,
            encoder_hidden: vec![256, 256],
            decoder_hidden: vec![256, 256],
            eps_hidden: 10,
            eps_min: 0.001,
            eps_max: 0.1,
            likelihood,
            leaky_slope: nn::default_slope(),
        }
    }

    pub fn encoder_mlp(&self) -> MlpSpec {
        MlpSpec {
            input: self.d_x,
            hidden: self.encoder_hidden.clone(),
            output: 2 * self.d_z,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn decoder_mlp(&self) -> MlpSpec {
        let heads = match self.likelihood {
            Likelihood::Gaussian => 2 * self.d_x,
            Likelihood::Bernoulli => self.d_x,
        };
        MlpSpec {
            input: self.d_z,
            hidden: self.decoder_hidden.clone(),
            output: heads,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn eps_mlp(&self) -> MlpSpec {
        MlpSpec {
            input: self.d_x,
            hidden: vec![self.eps_hidden],
            output: 1,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_mlp().validate()?;
        self.decoder_mlp().validate()?;
        self.eps_mlp().validate()?;
        if !(0.0 < self.eps_min && self.eps_min < self.eps_max && self.eps_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < eps_min < eps_max < 1, got {} and {}",
                self.eps_min, self.eps_max
            )));
        }
        Ok(())
    }
}

/// Amortized Gaussian encoder `q_m(z|x)`.
#[derive(Debug, Clone)]
pub struct EncoderComponent {
    pub group: GroupId,
    pub trunk: Trunk,
    pub mu_head: Linear,
    pub logvar_head: Linear,
}

impl EncoderComponent {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let group = store.add_group(name)?;
        let trunk = Trunk::new(
            store,
            group,
            "trunk",
            spec.d_x,
            &spec.encoder_hidden,
            spec.leaky_slope,
            rng,
        );
        let width = trunk.out_dim(store, spec.d_x);
        let mu_head = Linear::new(store, group, "mu", width, spec.d_z, Init::FanIn, rng);
        let logvar_head = Linear::new(store, group, "logvar", width, spec.d_z, Init::FanIn, rng);
        Ok(Self {
            group,
            trunk,
            mu_head,
            logvar_head,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<DiagGaussian<'t>> {
        let h = self.trunk.forward(tape, store, x)?;
        let mu = self.mu_head.forward(tape, store, h)?;
        let logvar = self.logvar_head.forward(tape, store, h)?;
        DiagGaussian::new(mu, logvar)
    }

    /// Deep copy of the parameters into a new, independent group `name`.
    pub fn clone_component(&self, store: &mut ParamStore, name: &str) -> Result<Self> {
        let group = store.add_group(name)?;
        let src = store.group(self.group).params.clone();
        let mut remap = |id: crate::tensor::ParamId| {
            let p = &src[id.index];
            store.add_param(group, p.name.clone(), p.value.clone())
        };
        let mut relinear = |l: &Linear| Linear {
            weight: remap(l.weight),
            bias: remap(l.bias),
        };
        let trunk = Trunk {
            layers: self.trunk.layers.iter().map(&mut relinear).collect(),
            slope: self.trunk.slope,
        };
        let mu_head = relinear(&self.mu_head);
        let logvar_head = relinear(&self.logvar_head);
        Ok(Self {
            group,
            trunk,
            mu_head,
            logvar_head,
        })
    }
}

/// Bounded regressor `ε(x) = eps_min + (eps_max − eps_min)·σ(net(x))`.
#[derive(Debug, Clone)]
pub struct EpsilonRegressor {
    pub group: GroupId,
    pub hidden: Linear,
    pub out: Linear,
    pub slope: f64,
    pub eps_min: f64,
    pub eps_max: f64,
}

impl EpsilonRegressor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let group = store.add_group(name)?;
        let hidden = Linear::new(store, group, "hidden", spec.d_x, spec.eps_hidden, Init::FanIn, rng);
        // zero output layer: every new component starts at the midpoint of the bounds
        let out = Linear::new(store, group, "out", spec.eps_hidden, 1, Init::Zero, rng);
        Ok(Self {
            group,
            hidden,
            out,
            slope: spec.leaky_slope,
            eps_min: spec.eps_min,
            eps_max: spec.eps_max,
        })
    }

    /// Pre-sigmoid network output, `[batch × 1]`.
    pub fn logits<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(tape, store, x)?.leaky_relu(self.slope);
        self.out.forward(tape, store, h)
    }

    fn affine<'t>(&self, s: Var<'t>) -> Var<'t> {
        s.scale(self.eps_max - self.eps_min).add_scalar(self.eps_min)
    }

    /// `ε(x)` per row, `[batch]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let b = x.shape()[0];
        let s = self.logits(tape, store, x)?.sigmoid();
        Ok(self.affine(s).reshape(vec![b])?)
    }

    /// `(log ε, log(1 − ε))` per row.
    pub fn log_eps_pair<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let eps = self.forward(tape, store, x)?;
        Ok((eps.ln(), eps.neg().add_scalar(1.0).ln()))
    }
}

/// Decoder `p_θ(x|z)`.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub group: GroupId,
    pub likelihood: Likelihood,
    pub trunk: Trunk,
    /// Gaussian: mean. Bernoulli: logits.
    pub out_head: Linear,
    /// Gaussian only.
    pub logvar_head: Option<Linear>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let group = store.add_group("theta")?;
        let trunk = Trunk::new(
            store,
            group,
            "trunk",
            spec.d_z,
            &spec.decoder_hidden,
            spec.leaky_slope,
            rng,
        );
        let width = trunk.out_dim(store, spec.d_z);
        let out_head = Linear::new(store, group, "out", width, spec.d_x, Init::FanIn, rng);
        let logvar_head = match spec.likelihood {
            Likelihood::Gaussian => Some(Linear::new(store, group, "logvar", width, spec.d_x, Init::FanIn, rng)),
            Likelihood::Bernoulli => None,
        };
        Ok(Self {
            group,
            likelihood: spec.likelihood,
            trunk,
            out_head,
            logvar_head,
        })
    }

    /// Output parameters for `z`: the mean (or logits) and, for Gaussian
    /// decoders, the clamped log-variance.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, z: Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let h = self.trunk.forward(tape, store, z)?;
        let out = self.out_head.forward(tape, store, h)?;
        let logvar = match &self.logvar_head {
            Some(head) => Some(
                head.forward(tape, store, h)?
                    .clamp(DECODER_LOGVAR_MIN, DECODER_LOGVAR_MAX),
            ),
            None => None,
        };
        Ok((out, logvar))
    }

    /// `log p_θ(x|z)` per row. `x` and `z` must have the same number of rows.
    pub fn log_lik<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let (out, logvar) = self.forward(tape, store, z)?;
        match (self.likelihood, logvar) {
            (Likelihood::Gaussian, Some(lv)) => {
                let sq = x.sub(out)?.square().mul(lv.neg().exp())?;
                Ok(sq.add(lv)?.add_scalar(LN_2PI).sum(1)?.scale(-0.5))
            }
            (Likelihood::Bernoulli, _) => {
                if x.value().data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidArgument("Bernoulli decoder needs data in [0, 1]".into()));
                }
                // x·ℓ − softplus(ℓ) = x log σ(ℓ) + (1 − x) log(1 − σ(ℓ))
                Ok(x.mul(out)?.sub(out.softplus())?.sum(1)?)
            }
            (Likelihood::Gaussian, None) => unreachable!("gaussian decoder always has a variance head"),
        }
    }
}

/// Anything that scores `log p(x|z)` row by row.
pub trait ObservationModel {
    fn log_lik<'t>(&self, tape: &'t Tape, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>>;
    fn d_z(&self) -> usize;
}

impl ObservationModel for RecursiveMixtureModel {
    fn log_lik<'t>(&self, tape: &'t Tape, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.decode_log_lik(tape, x, z)
    }

    fn d_z(&self) -> usize {
        self.spec.d_z
    }
}

/// Mixture inference model: `M + 1` encoder components, `M` ε-regressors and
/// one decoder.
#[derive(Debug, Clone)]
pub struct RecursiveMixtureModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub decoder: Decoder,
    pub components: Vec<EncoderComponent>,
    /// `eps[j - 1]` belongs to component `j`; component 0 has `ε₀ ≡ 1`.
    pub eps: Vec<EpsilonRegressor>,
}

impl RecursiveMixtureModel {
    /// Fresh model with `m + 1` independently initialized components.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, m: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let decoder = Decoder::new(&mut store, &spec, rng)?;
        let mut model = Self {
            components: vec![EncoderComponent::new(&mut store, "phi_0", &spec, rng)?],
            spec,
            store,
            decoder,
            eps: Vec::new(),
        };
        for _ in 0..m {
            model.push_random_component(rng)?;
        }
        Ok(model)
    }

    /// Mixture order `M` (number of components minus one).
    pub fn order(&self) -> usize {
        self.components.len() - 1
    }

    fn push_eps<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let j = self.components.len() - 1;
        let e = EpsilonRegressor::new(&mut self.store, &format!("eta_{j}"), &self.spec, rng)?;
        self.eps.push(e);
        Ok(())
    }

    /// Appends a freshly initialized component and its ε-regressor.
    pub fn push_random_component<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize> {
        let m = self.components.len();
        let c = EncoderComponent::new(&mut self.store, &format!("phi_{m}"), &self.spec, rng)?;
        self.components.push(c);
        self.push_eps(rng)?;
        Ok(m)
    }

    /// Appends a copy of component `src` and a fresh ε-regressor.
    pub fn push_cloned_component<R: Rng + ?Sized>(&mut self, src: usize, rng: &mut R) -> Result<usize> {
        let m = self.components.len();
        let source = self
            .components
            .get(src)
            .ok_or_else(|| Error::InvalidArgument(format!("no component {src}")))?
            .clone();
        let c = source.clone_component(&mut self.store, &format!("phi_{m}"))?;
        self.components.push(c);
        self.push_eps(rng)?;
        Ok(m)
    }

    pub fn component_group(&self, m: usize) -> GroupId {
        self.components[m].group
    }

    /// Group of the ε-regressor of component `m ≥ 1`.
    pub fn eps_group(&self, m: usize) -> GroupId {
        self.eps[m - 1].group
    }

    pub fn decoder_group(&self) -> GroupId {
        self.decoder.group
    }

    fn check_index(&self, m: usize) -> Result<()> {
        if m > self.order() {
            return Err(Error::InvalidArgument(format!(
                "component index {m} out of range 0..={}",
                self.order()
            )));
        }
        Ok(())
    }

    pub fn encode_component<'t>(&self, tape: &'t Tape, m: usize, x: Var<'t>) -> Result<DiagGaussian<'t>> {
        self.check_index(m)?;
        self.components[m].forward(tape, &self.store, x)
    }

    /// `ε_m(x)` for `m ≥ 1`, `[batch]`.
    pub fn eps_forward<'t>(&self, tape: &'t Tape, m: usize, x: Var<'t>) -> Result<Var<'t>> {
        self.check_index(m)?;
        if m == 0 {
            return Err(Error::InvalidArgument("component 0 has no ε-regressor".into()));
        }
        self.eps[m - 1].forward(tape, &self.store, x)
    }

    /// `log α_m(x)` for `m = 0..=k`, as `[batch × (k + 1)]`, with
    /// `α_m = ε_m Π_{j=m+1..k} (1 − ε_j)` and `ε₀ = 1`.
    pub fn mixing_log_weights<'t>(&self, tape: &'t Tape, x: Var<'t>, k: usize) -> Result<Var<'t>> {
        self.check_index(k)?;
        let b = x.shape()[0];
        let mut log_eps = Vec::with_capacity(k + 1);
        let mut log_keep = Vec::with_capacity(k + 1);
        log_eps.push(tape.constant(Tensor::zeros(vec![b])));
        log_keep.push(None);
        for j in 1..=k {
            let (le, lk) = self.eps[j - 1].log_eps_pair(tape, &self.store, x)?;
            log_eps.push(le);
            log_keep.push(Some(lk));
        }
        // suffix sums of log(1 − ε_j), walking down from k
        let mut cols = vec![None; k + 1];
        let mut suffix: Option<Var<'t>> = None;
        for m in (0..=k).rev() {
            let col = match suffix {
                Some(s) => log_eps[m].add(s)?,
                None => log_eps[m],
            };
            cols[m] = Some(col.reshape(vec![b, 1])?);
            if let Some(lk) = log_keep[m] {
                suffix = Some(match suffix {
                    Some(s) => s.add(lk)?,
                    None => lk,
                });
            }
        }
        let cols: Vec<Var<'t>> = cols.into_iter().map(|c| c.expect("filled")).collect();
        Ok(tape.concat(&cols, 1)?)
    }

    /// Mixture `Q_k` of components `0..=k`.
    pub fn encode_mixture<'t>(&self, tape: &'t Tape, x: Var<'t>, k: usize) -> Result<MixturePosterior<'t>> {
        self.check_index(k)?;
        let comps = (0..=k)
            .map(|m| self.encode_component(tape, m, x))
            .collect::<Result<Vec<_>>>()?;
        let w = self.mixing_log_weights(tape, x, k)?;
        MixturePosterior::new(comps, w)
    }

    pub fn decode_log_lik<'t>(&self, tape: &'t Tape, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.decoder.log_lik(tape, &self.store, x, z)
    }

    /// Euclidean distance between the parameter vectors of components `a`
    /// and `b`.
    pub fn component_distance(&self, a: usize, b: usize) -> Result<f64> {
        self.check_index(a)?;
        self.check_index(b)?;
        let va = self.store.group(self.component_group(a)).flat_values();
        let vb = self.store.group(self.component_group(b)).flat_values();
        Ok(va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
    }

    /// Every parameter value of the model, group by group.
    pub fn flat_values(&self) -> Vec<f64> {
        self.store.groups().iter().flat_map(|g| g.flat_values()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            encoder_hidden: vec![16],
            decoder_hidden: vec![16],
            ..ModelSpec::new(5, 2, Likelihood::Gaussian)
        }
    }

    fn input(tape: &Tape, rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let _ = tape;
        let data = (0..rows * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(vec![rows, d], data).unwrap()
    }

    #[test]
    fn component_shapes_and_clone_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = RecursiveMixtureModel::new(small_spec(), 0, &mut rng).unwrap();
        model.push_cloned_component(0, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(input(&tape, 4, 5, &mut rng));
        let q0 = model.encode_component(&tape, 0, x).unwrap();
        let q1 = model.encode_component(&tape, 1, x).unwrap();
        assert_eq!(q0.mu().shape(), vec![4, 2]);
        assert_eq!(q0.logvar().shape(), vec![4, 2]);
        assert_eq!(q0.mu().value().data(), q1.mu().value().data());
        assert_eq!(q0.logvar().value().data(), q1.logvar().value().data());
        assert!(model.encode_component(&tape, 2, x).is_err());
    }

    #[test]
    fn training_a_clone_leaves_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = RecursiveMixtureModel::new(small_spec(), 0, &mut rng).unwrap();
        model.push_cloned_component(0, &mut rng).unwrap();
        let before = model.store.group(model.component_group(0)).flat_values();
        let g1 = model.component_group(1);
        for p in &mut model.store.group_mut(g1).params {
            p.value.data_mut()[0] += 1.0;
        }
        assert_eq!(model.store.group(model.component_group(0)).flat_values(), before);
        assert_ne!(model.store.group(g1).flat_values(), before);
    }

    #[test]
    fn logvar_clamped_for_huge_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = RecursiveMixtureModel::new(small_spec(), 1, &mut rng).unwrap();
        let tape = Tape::new();
        for trial in 0..50 {
            let x = input(&tape, 8, 5, &mut rng).map(|v| v * 1e6 * if trial % 2 == 0 { 1.0 } else { -1.0 });
            let q = model.encode_component(&tape, 1, tape.constant(x)).unwrap();
            assert!(q.logvar().value().data().iter().all(|v| (-10.0..=10.0).contains(v)));
        }
    }

    #[test]
    fn eps_starts_at_midpoint_and_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = RecursiveMixtureModel::new(small_spec(), 1, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(input(&tape, 10, 5, &mut rng));
        let eps = model.eps_forward(&tape, 1, x).unwrap();
        for &e in eps.value().data() {
            assert!((e - 0.0505).abs() < 1e-15);
        }
        // saturate the output layer
        let out = model.eps[0].out.bias;
        model.store.param_mut(out).value.data_mut()[0] = 1e4;
        let tape = Tape::new();
        let x = tape.constant(input(&tape, 3, 5, &mut rng));
        let eps = model.eps_forward(&tape, 1, x).unwrap();
        assert!(eps.value().data().iter().all(|&e| (e - 0.1).abs() < 1e-12));
        assert!(model.eps_forward(&tape, 0, x).is_err());
    }

    #[test]
    fn mixing_weights_hand_case() {
        // ε₁ = ε₂ = 0.1 → α = (0.81, 0.09, 0.10)
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = RecursiveMixtureModel::new(small_spec(), 2, &mut rng).unwrap();
        for e in &model.eps.clone() {
            model.store.param_mut(e.out.bias).value.data_mut()[0] = 1e3;
        }
        let tape = Tape::new();
        let x = tape.constant(input(&tape, 2, 5, &mut rng));
        let w = model.mixing_log_weights(&tape, x, 2).unwrap();
        let w = w.value();
        for i in 0..2 {
            let a: Vec<f64> = w.row(i).iter().map(|v| v.exp()).collect();
            assert!((a[0] - 0.81).abs() < 1e-12);
            assert!((a[1] - 0.09).abs() < 1e-12);
            assert!((a[2] - 0.10).abs() < 1e-12);
        }
        let k0 = model.mixing_log_weights(&tape, x, 0).unwrap();
        assert_eq!(k0.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn mixture_prefix_leaves_components_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = RecursiveMixtureModel::new(small_spec(), 2, &mut rng).unwrap();
        let before = model.flat_values();
        let tape = Tape::new();
        let x = tape.constant(input(&tape, 3, 5, &mut rng));
        let q1 = model.encode_mixture(&tape, x, 1).unwrap();
        let q2 = model.encode_mixture(&tape, x, 2).unwrap();
        assert_eq!(q1.num_components(), 2);
        assert_eq!(q2.num_components(), 3);
        assert_eq!(model.flat_values(), before);
        let single = model.encode_mixture(&tape, x, 0).unwrap();
        assert_eq!(single.num_components(), 1);
        assert_eq!(single.log_alphas().value().data(), &[0.0; 3]);
    }

    #[test]
    fn groups_partition_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = RecursiveMixtureModel::new(small_spec(), 3, &mut rng).unwrap();
        let names: Vec<&str> = model.store.groups().iter().map(|g| g.name.as_str()).collect();
        assert_eq!(
            names,
            ["theta", "phi_0", "phi_1", "eta_1", "phi_2", "eta_2", "phi_3", "eta_3"]
        );
        let mut seen = std::collections::HashSet::new();
        for c in &model.components {
            assert!(seen.insert(c.group));
        }
        for e in &model.eps {
            assert!(seen.insert(e.group));
        }
        assert!(seen.insert(model.decoder_group()));
        assert_eq!(seen.len(), model.store.groups().len());
    }

    #[test]
    fn decoder_log_likelihood_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Bernoulli with zero logits
        let spec = ModelSpec {
            encoder_hidden: vec![4],
            decoder_hidden: vec![4],
            ..ModelSpec::new(4, 2, Likelihood::Bernoulli)
        };
        let mut model = RecursiveMixtureModel::new(spec, 0, &mut rng).unwrap();
        let head = model.decoder.out_head.clone();
        for id in [head.weight, head.bias] {
            model.store.param_mut(id).value.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap());
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 1.0]]).unwrap());
        let ll = model.decode_log_lik(&tape, x, z).unwrap().value().item();
        assert!((ll - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        let bad = tape.constant(Tensor::from_rows(&[vec![1.5, 0.0, 0.0, 1.0]]).unwrap());
        assert!(model.decode_log_lik(&tape, bad, z).is_err());

        // Gaussian at its own mean with unit variance
        let spec = ModelSpec {
            encoder_hidden: vec![4],
            decoder_hidden: vec![4],
            ..ModelSpec::new(3, 2, Likelihood::Gaussian)
        };
        let mut model = RecursiveMixtureModel::new(spec, 0, &mut rng).unwrap();
        let lv = model.decoder.logvar_head.clone().unwrap();
        for id in [lv.weight, lv.bias] {
            model.store.param_mut(id).value.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![0.5, 0.1]]).unwrap());
        let (mean, _) = model.decoder.forward(&tape, &model.store, z).unwrap();
        let x = tape.constant(Tensor::clone(&mean.value()));
        let ll = model.decode_log_lik(&tape, x, z).unwrap().value().item();
        assert!((ll + 1.5 * LN_2PI).abs() < 1e-12);
    }
}
