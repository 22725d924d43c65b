//! Diagonal Gaussians and input-dependent finite mixtures of them.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Bounds applied to every encoder log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-example diagonal Gaussian `N(mu, diag(exp(logvar)))` over `[batch × d]`.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian<'t> {
    mu: Var<'t>,
    logvar: Var<'t>,
}

impl<'t> DiagGaussian<'t> {
    /// Builds the distribution, clamping `logvar` into `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(mu: Var<'t>, logvar: Var<'t>) -> Result<Self> {
        let (ms, ls) = (mu.shape(), logvar.shape());
        if ms != ls || ms.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "DiagGaussian",
                lhs: ms,
                rhs: ls,
            }
            .into());
        }
        Ok(Self {
            mu,
            logvar: logvar.clamp(LOGVAR_MIN, LOGVAR_MAX),
        })
    }

    /// `N(0, I)` for each of `batch` rows.
    pub fn standard_normal(tape: &'t Tape, batch: usize, dim: usize) -> Self {
        Self {
            mu: tape.constant(Tensor::zeros(vec![batch, dim])),
            logvar: tape.constant(Tensor::zeros(vec![batch, dim])),
        }
    }

    pub fn mu(&self) -> Var<'t> {
        self.mu
    }

    pub fn logvar(&self) -> Var<'t> {
        self.logvar
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn tape(&self) -> &'t Tape {
        self.mu.tape()
    }

    /// Both parameters cut from the tape.
    pub fn detach(&self) -> Self {
        Self {
            mu: self.mu.detach(),
            logvar: self.logvar.detach(),
        }
    }

    /// Reparameterized draw `mu + exp(logvar / 2) ⊙ noise` for given noise.
    pub fn rsample_with(&self, noise: Tensor) -> Result<Var<'t>> {
        let u = self.tape().constant(noise);
        let std = self.logvar.scale(0.5).exp();
        Ok(self.mu.add(std.mul(u)?)?)
    }

    /// Reparameterized draw with fresh standard-normal noise.
    pub fn rsample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Var<'t>> {
        let shape = vec![self.batch(), self.dim()];
        self.rsample_with(standard_normal_tensor(shape, rng))
    }

    /// `log N(z; mu, diag(exp(logvar)))` per row.
    pub fn log_prob(&self, z: Var<'t>) -> Result<Var<'t>> {
        let diff = z.sub(self.mu)?;
        let scaled = diff.square().mul(self.logvar.neg().exp())?;
        let per_dim = scaled.add(self.logvar)?.add_scalar(LN_2PI);
        Ok(per_dim.sum(1)?.scale(-0.5))
    }

    /// Closed-form differential entropy per row.
    pub fn entropy(&self) -> Result<Var<'t>> {
        let d = self.dim() as f64;
        Ok(self.logvar.sum(1)?.add_scalar(d * (LN_2PI + 1.0)).scale(0.5))
    }
}

pub(crate) fn standard_normal_tensor<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// `KL(q ‖ p)` between diagonal Gaussians, per row.
pub fn kl_diag_closed<'t>(q: &DiagGaussian<'t>, p: &DiagGaussian<'t>) -> Result<Var<'t>> {
    let var_ratio = q.logvar.sub(p.logvar)?.exp();
    let mean_term = q.mu.sub(p.mu)?.square().mul(p.logvar.neg().exp())?;
    let per_dim = var_ratio.add(mean_term)?.add(p.logvar)?.sub(q.logvar)?.add_scalar(-1.0);
    Ok(per_dim.sum(1)?.scale(0.5))
}

/// Finite mixture `Σ_k α_k(x) q_k(z|x)` with per-example log weights.
#[derive(Debug, Clone)]
pub struct MixturePosterior<'t> {
    components: Vec<DiagGaussian<'t>>,
    log_alphas: Var<'t>,
}

/// Tolerance on `logsumexp(log_alphas) = 0` per example.
pub const WEIGHT_NORMALIZATION_TOL: f64 = 1e-9;

impl<'t> MixturePosterior<'t> {
    pub fn new(components: Vec<DiagGaussian<'t>>, log_alphas: Var<'t>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture needs at least one component".into()))?;
        let (b, d) = (first.batch(), first.dim());
        for c in &components {
            if c.batch() != b || c.dim() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "MixturePosterior",
                    lhs: vec![b, d],
                    rhs: vec![c.batch(), c.dim()],
                }
                .into());
            }
        }
        let ws = log_alphas.shape();
        if ws != [b, components.len()] {
            return Err(TensorError::ShapeMismatch {
                op: "MixturePosterior weights",
                lhs: vec![b, components.len()],
                rhs: ws,
            }
            .into());
        }
        {
            let w = log_alphas.value();
            for i in 0..b {
                let total = crate::tensor::logsumexp(w.row(i));
                if !(total.abs() <= WEIGHT_NORMALIZATION_TOL) {
                    return Err(Error::InvalidArgument(format!(
                        "mixture weights of example {i} have log-sum {total}"
                    )));
                }
            }
        }
        Ok(Self { components, log_alphas })
    }

    /// One-component mixture with weight 1.
    pub fn single(q: DiagGaussian<'t>) -> Self {
        let b = q.batch();
        let log_alphas = q.tape().constant(Tensor::zeros(vec![b, 1]));
        Self {
            components: vec![q],
            log_alphas,
        }
    }

    pub fn components(&self) -> &[DiagGaussian<'t>] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// `[batch × K]` log mixing weights.
    pub fn log_alphas(&self) -> Var<'t> {
        self.log_alphas
    }

    pub fn batch(&self) -> usize {
        self.components[0].batch()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn tape(&self) -> &'t Tape {
        self.log_alphas.tape()
    }

    /// Same mixture with weights cut from the tape.
    pub fn with_detached_weights(&self) -> Self {
        Self {
            components: self.components.clone(),
            log_alphas: self.log_alphas.detach(),
        }
    }

    /// Per-component log densities stacked as `[batch × K]`.
    pub fn component_log_probs(&self, z: Var<'t>) -> Result<Var<'t>> {
        let b = self.batch();
        let cols = self
            .components
            .iter()
            .map(|c| Ok(c.log_prob(z)?.reshape(vec![b, 1])?))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.tape().concat(&cols, 1)?)
    }

    /// `log Σ_k α_k q_k(z)` per row.
    pub fn log_prob(&self, z: Var<'t>) -> Result<Var<'t>> {
        let joint = self.component_log_probs(z)?.add(self.log_alphas)?;
        Ok(joint.logsumexp(1)?)
    }
}

/// Monte-Carlo `KL(q ‖ Q)` per row from `n_samples` reparameterized draws of `q`.
pub fn kl_monte_carlo<'t, R: Rng + ?Sized>(
    q: &DiagGaussian<'t>,
    mixture: &MixturePosterior<'t>,
    n_samples: usize,
    rng: &mut R,
) -> Result<Var<'t>> {
    if n_samples < 1 {
        return Err(Error::InvalidArgument("kl_monte_carlo needs n_samples >= 1".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for _ in 0..n_samples {
        let z = q.rsample(rng)?;
        let term = q.log_prob(z)?.sub(mixture.log_prob(z)?)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("n_samples >= 1").scale(1.0 / n_samples as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian<'t>(tape: &'t Tape, mu: &[f64], logvar: &[f64]) -> DiagGaussian<'t> {
        let d = mu.len();
        DiagGaussian::new(
            tape.constant(Tensor::new(vec![1, d], mu.to_vec()).unwrap()),
            tape.constant(Tensor::new(vec![1, d], logvar.to_vec()).unwrap()),
        )
        .unwrap()
    }

    fn trapezoid(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = 0.5 * (f(a) + f(b));
        for i in 1..n {
            s += f(a + i as f64 * h);
        }
        s * h
    }

    fn normal_pdf(x: f64, mu: f64) -> f64 {
        (-0.5 * (x - mu).powi(2)).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn log_prob_standard_values() {
        let tape = Tape::new();
        let g = gaussian(&tape, &[0.0], &[0.0]);
        let at = |z: f64| {
            g.log_prob(tape.constant(Tensor::new(vec![1, 1], vec![z]).unwrap()))
                .unwrap()
                .value()
                .item()
        };
        assert!((at(0.0) + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((at(1.0) + 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_prob_integrates_to_one() {
        let tape = Tape::new();
        let g = gaussian(&tape, &[0.7], &[0.4]);
        let mass = trapezoid(-15.0, 15.0, 3000, |z| {
            let zv = tape.constant(Tensor::new(vec![1, 1], vec![z]).unwrap());
            g.log_prob(zv).unwrap().value().item().exp()
        });
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }

    #[test]
    fn logvar_is_clamped() {
        let tape = Tape::new();
        let g = gaussian(&tape, &[2.0], &[-1e6]);
        assert_eq!(g.logvar().value().item(), LOGVAR_MIN);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = g.rsample(&mut rng).unwrap().value().item();
        // std at the floor is exp(-5) ≈ 0.0067
        assert!((z - 2.0).abs() < 0.05);
    }

    #[test]
    fn rsample_moments_and_gradient() {
        let tape = Tape::new();
        let n = 100_000;
        let mu = tape.leaf(Tensor::full(vec![n, 1], 3.0));
        let lv = tape.constant(Tensor::zeros(vec![n, 1]));
        let g = DiagGaussian::new(mu, lv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = g.rsample(&mut rng).unwrap();
        let mean = z.value().mean();
        // SE = 1/sqrt(1e5) ≈ 0.0032
        assert!((mean - 3.0).abs() < 0.02, "{mean}");
        let grads = z.mean_all().backward().unwrap();
        let gm = grads.wrt(mu).unwrap();
        assert!((gm.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_closed_examples() {
        let tape = Tape::new();
        let p = gaussian(&tape, &[0.0], &[0.0]);
        let q = gaussian(&tape, &[1.0], &[0.0]);
        assert_eq!(kl_diag_closed(&p, &p).unwrap().value().item(), 0.0);
        assert!((kl_diag_closed(&q, &p).unwrap().value().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_component_mixture_matches_component() {
        let tape = Tape::new();
        let q = gaussian(&tape, &[0.3, -0.2], &[0.1, -0.5]);
        let mix = MixturePosterior::single(q);
        let z = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let a = q.log_prob(z).unwrap().value().item();
        let b = mix.log_prob(z).unwrap().value().item();
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_two_component_mixture() {
        let tape = Tape::new();
        let a = 1.3;
        let half = tape.constant(Tensor::full(vec![1, 2], 0.5f64.ln()));
        let z0 = tape.constant(Tensor::zeros(vec![1, 1]));
        let lp = |shift: f64| {
            let m = MixturePosterior::new(
                vec![gaussian(&tape, &[-shift], &[0.0]), gaussian(&tape, &[shift], &[0.0])],
                half,
            )
            .unwrap();
            m.log_prob(z0).unwrap().value().item()
        };
        let single = -0.5 * LN_2PI - 0.5 * a * a;
        let expected = (2.0 * single.exp()).ln() - 2f64.ln();
        assert!((lp(a) - expected).abs() < 1e-12);
        assert!((lp(a) - lp(-a)).abs() < 1e-15);
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![1, 2], vec![0.3f64.ln(), 0.7f64.ln()]).unwrap());
        let m = MixturePosterior::new(
            vec![gaussian(&tape, &[-2.0], &[-1.0]), gaussian(&tape, &[1.5], &[0.5])],
            w,
        )
        .unwrap();
        let mass = trapezoid(-20.0, 20.0, 4000, |z| {
            let zv = tape.constant(Tensor::new(vec![1, 1], vec![z]).unwrap());
            m.log_prob(zv).unwrap().value().item().exp()
        });
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    }

    #[test]
    fn unnormalized_weights_are_rejected() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let err = MixturePosterior::new(
            vec![gaussian(&tape, &[0.0], &[0.0]), gaussian(&tape, &[1.0], &[0.0])],
            w,
        );
        assert!(err.is_err());
    }

    #[test]
    fn kl_monte_carlo_requires_a_sample() {
        let tape = Tape::new();
        let q = gaussian(&tape, &[0.0], &[0.0]);
        let mix = MixturePosterior::single(q);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(kl_monte_carlo(&q, &mix, 0, &mut rng).is_err());
        // identical single component: every sample gives exactly zero
        let kl = kl_monte_carlo(&q, &mix, 5, &mut rng).unwrap().value().item();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn kl_monte_carlo_against_quadrature() {
        // q = N(0,1), Q = ½N(-2,1) + ½N(2,1); quadrature oracle first
        let exact = trapezoid(-20.0, 20.0, 20_000, |z| {
            let q = normal_pdf(z, 0.0);
            let mix = 0.5 * normal_pdf(z, -2.0) + 0.5 * normal_pdf(z, 2.0);
            if q > 0.0 {
                q * (q.ln() - mix.ln())
            } else {
                0.0
            }
        });
        let n = 10_000;
        let tape = Tape::new();
        let q = DiagGaussian::new(
            tape.constant(Tensor::zeros(vec![n, 1])),
            tape.constant(Tensor::zeros(vec![n, 1])),
        )
        .unwrap();
        let comp = |m: f64| {
            DiagGaussian::new(
                tape.constant(Tensor::full(vec![n, 1], m)),
                tape.constant(Tensor::zeros(vec![n, 1])),
            )
            .unwrap()
        };
        let w = tape.constant(Tensor::full(vec![n, 2], 0.5f64.ln()));
        let mix = MixturePosterior::new(vec![comp(-2.0), comp(2.0)], w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let per_row = kl_monte_carlo(&q, &mix, 1, &mut rng).unwrap().value().clone();
        let mean = per_row.mean();
        let var = per_row.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn entropy_closed_form() {
        let tape = Tape::new();
        let g = gaussian(&tape, &[0.0, 0.0], &[0.0, 0.0]);
        let h = g.entropy().unwrap().value().item();
        assert!((h - (LN_2PI + 1.0)).abs() < 1e-12);
    }
}
