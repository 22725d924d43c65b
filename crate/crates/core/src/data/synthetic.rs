//! Synthetic generators whose true posteriors are known.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, Source, Splits};
use crate::distributions::LN_2PI;
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{Likelihood, ObservationModel, RecursiveMixtureModel};
use crate::tensor::{Tape, Tensor, Var};

/// Share of generated examples assigned to the test split.
pub const TEST_FRACTION: f64 = 0.2;

fn assign_splits(n: usize) -> Splits {
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    Splits {
        train: (0..n - n_test).collect(),
        val: Vec::new(),
        test: (n - n_test..n).collect(),
    }
}

/// `x = |W z*| + b + σ·noise` with `z*` uniform on the corners `{−c, +c}^d_z`.
///
/// The observation map is sign-symmetric, so `p(z|x)` under the model
/// `z ~ N(0, I)`, `x | z ~ N(|Wz| + b, σ²I)` has two mirrored modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimodalToy {
    pub d_x: usize,
    pub d_z: usize,
    /// Row-major `[d_x × d_z]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimodalToyConfig {
    pub d_x: usize,
    pub d_z: usize,
    pub c: f64,
    pub noise_std: f64,
    pub weight_scale: f64,
}

impl Default for BimodalToyConfig {
    fn default() -> Self {
        Self {
            d_x: 8,
            d_z: 2,
            c: 1.5,
            noise_std: 1.0,
            weight_scale: 0.6,
        }
    }
}

impl BimodalToyConfig {
    pub fn generator(&self, seed: u64) -> BimodalToy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..self.d_x * self.d_z)
            .map(|_| self.weight_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b = (0..self.d_x)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        BimodalToy {
            d_x: self.d_x,
            d_z: self.d_z,
            w,
            b,
            c: self.c,
            noise_std: self.noise_std,
        }
    }

    /// `n` examples from the generator drawn with `seed`; the last
    /// [`TEST_FRACTION`] of them form the test split.
    pub fn generate(&self, n: usize, seed: u64) -> Dataset {
        let generator = self.generator(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut data = Vec::with_capacity(n * self.d_x);
        for _ in 0..n {
            let z: Vec<f64> = (0..self.d_z)
                .map(|_| if rng.random::<bool>() { self.c } else { -self.c })
                .collect();
            let mean = generator.mean(&z);
            data.extend(
                mean.iter()
                    .map(|m| m + self.noise_std * rng.sample::<f64, _>(StandardNormal)),
            );
        }
        Dataset {
            x: Tensor::new(vec![n, self.d_x], data).expect("sized"),
            domain: Domain::Real,
            splits: assign_splits(n),
            labels: None,
            source: Source::Bimodal(generator),
        }
    }
}

/// Bimodal toy set with default geometry.
pub fn gen_bimodal_toy(n: usize, seed: u64) -> Dataset {
    BimodalToyConfig::default().generate(n, seed)
}

impl BimodalToy {
    /// `|W z| + b`.
    pub fn mean(&self, z: &[f64]) -> Vec<f64> {
        (0..self.d_x)
            .map(|i| {
                let dot: f64 = (0..self.d_z).map(|k| self.w[i * self.d_z + k] * z[k]).sum();
                dot.abs() + self.b[i]
            })
            .collect()
    }

    /// Unnormalized `log p(x, z)` for one example.
    pub fn log_joint(&self, x: &[f64], z: &[f64]) -> f64 {
        let var = self.noise_std * self.noise_std;
        let mean = self.mean(z);
        let ll: f64 = x
            .iter()
            .zip(&mean)
            .map(|(xi, mi)| -0.5 * (LN_2PI + var.ln() + (xi - mi).powi(2) / var))
            .sum();
        let lp: f64 = z.iter().map(|v| -0.5 * (LN_2PI + v * v)).sum();
        ll + lp
    }

    /// Writes the generator into a Gaussian decoder with two hidden layers of
    /// widths at least `2·d_x` and `d_x`, using `|a| = (lrelu(a) + lrelu(−a)) / (1 − slope)`.
    pub fn install_decoder(&self, model: &mut RecursiveMixtureModel) -> Result<()> {
        let spec = &model.spec;
        let (dx, dz) = (self.d_x, self.d_z);
        if spec.likelihood != Likelihood::Gaussian
            || spec.d_x != dx
            || spec.d_z != dz
            || spec.decoder_hidden.len() != 2
            || spec.decoder_hidden[0] < 2 * dx
            || spec.decoder_hidden[1] < dx
        {
            return Err(Error::Config(format!(
                "decoder cannot represent the generator: needs gaussian likelihood, d_x={dx}, \
                 d_z={dz} and hidden widths >= [{}, {dx}]",
                2 * dx
            )));
        }
        let (h0, h1) = (spec.decoder_hidden[0], spec.decoder_hidden[1]);
        let slope = model.decoder.trunk.slope;
        let dec = model.decoder.clone();
        let store = &mut model.store;
        let mut set = |id, data: Vec<f64>| {
            let p = store.param_mut(id);
            p.value.data_mut().copy_from_slice(&data);
        };
        let mut w0 = vec![0.0; dz * h0];
        for i in 0..dx {
            for k in 0..dz {
                w0[k * h0 + i] = self.w[i * dz + k];
                w0[k * h0 + dx + i] = -self.w[i * dz + k];
            }
        }
        set(dec.trunk.layers[0].weight, w0);
        set(dec.trunk.layers[0].bias, vec![0.0; h0]);
        let mut w1 = vec![0.0; h0 * h1];
        for i in 0..dx {
            w1[i * h1 + i] = 1.0 / (1.0 - slope);
            w1[(dx + i) * h1 + i] = 1.0 / (1.0 - slope);
        }
        set(dec.trunk.layers[1].weight, w1);
        set(dec.trunk.layers[1].bias, vec![0.0; h1]);
        let mut wo = vec![0.0; h1 * dx];
        for i in 0..dx {
            wo[i * dx + i] = 1.0;
        }
        set(dec.out_head.weight, wo);
        set(dec.out_head.bias, self.b.clone());
        let lv = dec.logvar_head.expect("gaussian decoder");
        set(lv.weight, vec![0.0; h1 * dx]);
        set(lv.bias, vec![(self.noise_std * self.noise_std).ln(); dx]);
        Ok(())
    }
}

impl ObservationModel for BimodalToy {
    fn log_lik<'t>(&self, tape: &'t Tape, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let wt = transpose(&self.w, self.d_x, self.d_z);
        let a = z.matmul(tape.constant(Tensor::new(vec![self.d_z, self.d_x], wt)?))?;
        let abs = a.relu().add(a.neg().relu())?;
        let mean = abs.add(tape.constant(Tensor::vector(self.b.clone())))?;
        let var = self.noise_std * self.noise_std;
        let sq = x.sub(mean)?.square().scale(1.0 / var);
        Ok(sq.add_scalar(LN_2PI + var.ln()).sum(1)?.scale(-0.5))
    }

    fn d_z(&self) -> usize {
        self.d_z
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Conjugate model `z ~ N(0, I)`, `x = W z + b + N(0, noise_var·I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub d_x: usize,
    pub d_z: usize,
    /// Row-major `[d_x × d_z]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub noise_var: f64,
}

impl LinearGaussian {
    pub fn new(d_x: usize, d_z: usize, w: Vec<f64>, b: Vec<f64>, noise_var: f64) -> Result<Self> {
        if w.len() != d_x * d_z || b.len() != d_x || !(noise_var > 0.0) {
            return Err(Error::InvalidArgument(
                "linear-Gaussian model needs W [d_x × d_z], b [d_x] and noise_var > 0".into(),
            ));
        }
        Ok(Self {
            d_x,
            d_z,
            w,
            b,
            noise_var,
        })
    }

    /// Posterior precision `I + WᵀW / σ²` (row-major `[d_z × d_z]`).
    fn posterior_precision(&self) -> Vec<f64> {
        let (dx, dz) = (self.d_x, self.d_z);
        let mut p = vec![0.0; dz * dz];
        for a in 0..dz {
            for c in 0..dz {
                let s: f64 = (0..dx).map(|i| self.w[i * dz + a] * self.w[i * dz + c]).sum();
                p[a * dz + c] = s / self.noise_var + if a == c { 1.0 } else { 0.0 };
            }
        }
        p
    }

    /// Posterior covariance; the same for every `x`.
    pub fn posterior_cov(&self) -> Vec<f64> {
        linalg::spd_inverse(&self.posterior_precision(), self.d_z).expect("precision is SPD")
    }

    pub fn posterior_mean(&self, x: &[f64]) -> Vec<f64> {
        let (dx, dz) = (self.d_x, self.d_z);
        let rhs: Vec<f64> = (0..dz)
            .map(|a| (0..dx).map(|i| self.w[i * dz + a] * (x[i] - self.b[i])).sum::<f64>() / self.noise_var)
            .collect();
        let l = linalg::cholesky(&self.posterior_precision(), dz).expect("precision is SPD");
        linalg::cholesky_solve(&l, dz, &rhs)
    }

    /// `log p(z | x)` under the exact Gaussian posterior.
    pub fn log_posterior(&self, x: &[f64], z: &[f64]) -> f64 {
        let dz = self.d_z;
        let mean = self.posterior_mean(x);
        let prec = self.posterior_precision();
        let l = linalg::cholesky(&prec, dz).expect("precision is SPD");
        let d: Vec<f64> = z.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let mut quad = 0.0;
        for a in 0..dz {
            for c in 0..dz {
                quad += d[a] * prec[a * dz + c] * d[c];
            }
        }
        -0.5 * (dz as f64 * LN_2PI - linalg::cholesky_logdet(&l, dz) + quad)
    }

    fn log_joint(&self, x: &[f64], z: &[f64]) -> f64 {
        let (dx, dz) = (self.d_x, self.d_z);
        let ll: f64 = (0..dx)
            .map(|i| {
                let m: f64 = (0..dz).map(|k| self.w[i * dz + k] * z[k]).sum::<f64>() + self.b[i];
                -0.5 * (LN_2PI + self.noise_var.ln() + (x[i] - m).powi(2) / self.noise_var)
            })
            .sum();
        let lp: f64 = z.iter().map(|v| -0.5 * (LN_2PI + v * v)).sum();
        ll + lp
    }

    /// Exact `log p(x)` via `log p(x, z) − log p(z|x)` at the posterior mean.
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let z = self.posterior_mean(x);
        self.log_joint(x, &z) - self.log_posterior(x, &z)
    }

    pub fn generate(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dx, dz) = (self.d_x, self.d_z);
        let sd = self.noise_var.sqrt();
        let mut data = Vec::with_capacity(n * dx);
        for _ in 0..n {
            let z: Vec<f64> = (0..dz).map(|_| rng.sample(StandardNormal)).collect();
            for i in 0..dx {
                let m: f64 = (0..dz).map(|k| self.w[i * dz + k] * z[k]).sum::<f64>() + self.b[i];
                data.push(m + sd * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Dataset {
            x: Tensor::new(vec![n, dx], data).expect("sized"),
            domain: Domain::Real,
            splits: assign_splits(n),
            labels: None,
            source: Source::LinearGaussian(self.clone()),
        }
    }
}

pub fn gen_linear_gaussian(n: usize, w: Vec<f64>, b: Vec<f64>, noise_var: f64, seed: u64) -> Result<Dataset> {
    let d_x = b.len();
    let d_z = w.len().checked_div(d_x).unwrap_or(0);
    Ok(LinearGaussian::new(d_x, d_z, w, b, noise_var)?.generate(n, seed))
}

impl ObservationModel for LinearGaussian {
    fn log_lik<'t>(&self, tape: &'t Tape, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let wt = transpose(&self.w, self.d_x, self.d_z);
        let mean = z
            .matmul(tape.constant(Tensor::new(vec![self.d_z, self.d_x], wt)?))?
            .add(tape.constant(Tensor::vector(self.b.clone())))?;
        let sq = x.sub(mean)?.square().scale(1.0 / self.noise_var);
        Ok(sq.add_scalar(LN_2PI + self.noise_var.ln()).sum(1)?.scale(-0.5))
    }

    fn d_z(&self) -> usize {
        self.d_z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;

    fn fixture() -> LinearGaussian {
        LinearGaussian::new(3, 2, vec![1.0, 0.5, -0.3, 0.8, 0.2, -1.1], vec![0.1, -0.2, 0.3], 0.5).unwrap()
    }

    #[test]
    fn bimodal_is_deterministic() {
        let a = gen_bimodal_toy(50, 3);
        let b = gen_bimodal_toy(50, 3);
        let bytes = |d: &Dataset| -> Vec<u8> { d.x.data().iter().flat_map(|v| v.to_le_bytes()).collect() };
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(bytes(&a), bytes(&gen_bimodal_toy(50, 4)));
        assert_eq!(a.splits.test.len(), 10);
    }

    #[test]
    fn empty_toy_set() {
        let d = gen_bimodal_toy(0, 1);
        assert_eq!(d.len(), 0);
        assert!(d.splits.train.is_empty());
    }

    #[test]
    fn bimodal_likelihood_is_sign_symmetric() {
        let g = BimodalToyConfig::default().generator(1);
        let x = g.mean(&[1.5, -1.5]);
        let a = g.log_joint(&x, &[0.7, -0.2]);
        let b = g.log_joint(&x, &[-0.7, 0.2]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn installed_decoder_matches_generator() {
        let g = BimodalToyConfig::default().generator(5);
        let spec = ModelSpec {
            encoder_hidden: vec![8],
            decoder_hidden: vec![24, 10],
            ..ModelSpec::new(8, 2, Likelihood::Gaussian)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = RecursiveMixtureModel::new(spec, 0, &mut rng).unwrap();
        g.install_decoder(&mut model).unwrap();
        let tape = Tape::new();
        let z = Tensor::from_rows(&[vec![0.3, -1.2], vec![-2.0, 0.1], vec![0.0, 0.0]]).unwrap();
        let x = Tensor::from_rows(&[g.mean(&[1.5, 1.5]), g.mean(&[1.5, -1.5]), g.mean(&[-1.5, 1.5])]).unwrap();
        let (zv, xv) = (tape.constant(z.clone()), tape.constant(x.clone()));
        let a = model.decode_log_lik(&tape, xv, zv).unwrap();
        let b = g.log_lik(&tape, xv, zv).unwrap();
        for (p, q) in a.value().data().iter().zip(b.value().data()) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
        let too_small = ModelSpec {
            decoder_hidden: vec![10, 10],
            ..model.spec.clone()
        };
        let mut small = RecursiveMixtureModel::new(too_small, 0, &mut rng).unwrap();
        assert!(g.install_decoder(&mut small).is_err());
    }

    #[test]
    fn zero_weights_give_prior_posterior() {
        let m = LinearGaussian::new(2, 2, vec![0.0; 4], vec![1.0, -1.0], 0.3).unwrap();
        assert_eq!(m.posterior_cov(), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.posterior_mean(&[5.0, 5.0]), vec![0.0, 0.0]);
        // marginal is N(b, noise_var I)
        let x = [1.2, -0.4];
        let expected: f64 = x
            .iter()
            .zip([1.0f64, -1.0])
            .map(|(xi, bi)| -0.5 * (LN_2PI + 0.3f64.ln() + (xi - bi).powi(2) / 0.3))
            .sum();
        assert!((m.log_marginal(&x) - expected).abs() < 1e-12);
    }

    #[test]
    fn log_marginal_is_point_independent() {
        // log p(x,z) − log p(z|x) must not depend on z
        let m = fixture();
        let x = [0.4, -1.0, 2.0];
        let direct = m.log_marginal(&x);
        for z in [[0.0, 0.0], [1.0, -2.0], [-0.3, 0.7]] {
            let v = m.log_joint(&x, &z) - m.log_posterior(&x, &z);
            assert!((v - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn log_marginal_matches_dense_formula() {
        // N(x; b, W Wᵀ + σ² I) for d_z = 1, d_x = 1
        let m = LinearGaussian::new(1, 1, vec![2.0], vec![0.5], 0.25).unwrap();
        let var = 4.0 + 0.25;
        let x = 1.7;
        let expected = -0.5 * (LN_2PI + f64::ln(var) + (x - 0.5f64).powi(2) / var);
        assert!((m.log_marginal(&[x]) - expected).abs() < 1e-12);
    }
}
