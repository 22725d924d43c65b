//! Training objectives: single-encoder and mixture ELBOs, the bounded-KL
//! component objective and the entropy regularizers of the BVI baselines.
//!
//! All functions return per-example or batch-mean values on the tape; the
//! trainers negate them into losses.
//!
//! The bounded-KL term follows the hinge form `max(0, C − KL)` added to the
//! negated ELBO: KL below the barrier `C` is rewarded one-for-one and KL at or
//! beyond `C` earns nothing.

use rand::Rng;

use crate::distributions::{kl_diag_closed, kl_monte_carlo, DiagGaussian, MixturePosterior};
use crate::error::{Error, Result};
use crate::models::{ObservationModel, RecursiveMixtureModel};
use crate::tensor::{Tape, Var};

/// Default KL barrier.
pub const DEFAULT_KL_BARRIER: f64 = 500.0;

/// Per-example ELBO with its reconstruction and KL parts.
#[derive(Debug, Clone, Copy)]
pub struct ElboEstimate<'t> {
    pub elbo: Var<'t>,
    pub recon_term: Var<'t>,
    pub kl_term: Var<'t>,
}

/// One-sample ELBO of a single Gaussian encoder, closed-form KL to `N(0, I)`.
pub fn elbo_single<'t, O, R>(q: &DiagGaussian<'t>, obs: &O, x: Var<'t>, rng: &mut R) -> Result<ElboEstimate<'t>>
where
    O: ObservationModel + ?Sized,
    R: Rng + ?Sized,
{
    let tape = q.tape();
    let z = q.rsample(rng)?;
    let recon_term = obs.log_lik(tape, x, z)?;
    let prior = DiagGaussian::standard_normal(tape, q.batch(), q.dim());
    let kl_term = kl_diag_closed(q, &prior)?;
    Ok(ElboEstimate {
        elbo: recon_term.sub(kl_term)?,
        recon_term,
        kl_term,
    })
}

/// Stratified mixture ELBO: `samples` reparameterized draws per component,
/// weighted by `α_m(x)`, with `log Q` evaluated under the full mixture.
pub fn elbo_mixture<'t, O, R>(
    mixture: &MixturePosterior<'t>,
    obs: &O,
    x: Var<'t>,
    samples: usize,
    rng: &mut R,
) -> Result<ElboEstimate<'t>>
where
    O: ObservationModel + ?Sized,
    R: Rng + ?Sized,
{
    elbo_mixture_impl(mixture, obs, x, samples, rng, false)
}

/// [`elbo_mixture`] with one noise draw shared by every component, so
/// identical components produce identical samples.
pub fn elbo_mixture_shared_noise<'t, O, R>(
    mixture: &MixturePosterior<'t>,
    obs: &O,
    x: Var<'t>,
    samples: usize,
    rng: &mut R,
) -> Result<ElboEstimate<'t>>
where
    O: ObservationModel + ?Sized,
    R: Rng + ?Sized,
{
    elbo_mixture_impl(mixture, obs, x, samples, rng, true)
}

fn elbo_mixture_impl<'t, O, R>(
    mixture: &MixturePosterior<'t>,
    obs: &O,
    x: Var<'t>,
    samples: usize,
    rng: &mut R,
    shared_noise: bool,
) -> Result<ElboEstimate<'t>>
where
    O: ObservationModel + ?Sized,
    R: Rng + ?Sized,
{
    if samples < 1 {
        return Err(Error::InvalidArgument("elbo_mixture needs at least one sample".into()));
    }
    let tape = mixture.tape();
    let (b, d) = (mixture.batch(), mixture.dim());
    let prior = DiagGaussian::standard_normal(tape, b, d);
    let weights = mixture.log_alphas().exp();
    let mut recon_cols = Vec::with_capacity(mixture.num_components());
    let mut kl_cols = Vec::with_capacity(mixture.num_components());
    for _ in 0..samples {
        let shared = shared_noise.then(|| crate::distributions::standard_normal_tensor(vec![b, d], rng));
        for comp in mixture.components() {
            let z = match &shared {
                Some(u) => comp.rsample_with(u.clone())?,
                None => comp.rsample(rng)?,
            };
            let recon = obs.log_lik(tape, x, z)?;
            let log_ratio = mixture.log_prob(z)?.sub(prior.log_prob(z)?)?;
            recon_cols.push(recon.reshape(vec![b, 1])?);
            kl_cols.push(log_ratio.reshape(vec![b, 1])?);
        }
    }
    let weighted = |cols: &[Var<'t>]| -> Result<Var<'t>> {
        let stacked = tape.concat(cols, 1)?;
        // [b × S·K], weights repeat per sample round
        let k = mixture.num_components();
        let mut total: Option<Var<'t>> = None;
        for s in 0..samples {
            let block = stacked.slice(1, s * k, (s + 1) * k)?;
            let term = block.mul(weights)?.sum(1)?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
        Ok(total.expect("samples >= 1").scale(1.0 / samples as f64))
    };
    let recon_term = weighted(&recon_cols)?;
    let kl_term = weighted(&kl_cols)?;
    Ok(ElboEstimate {
        elbo: recon_term.sub(kl_term)?,
        recon_term,
        kl_term,
    })
}

/// `max(0, C − KL)` per example; its gradient in `kl` is −1 below `C`, 0 at
/// and above.
pub fn bounded_kl_penalty<'t>(kl: Var<'t>, barrier: f64) -> Result<Var<'t>> {
    if !(barrier > 0.0) {
        return Err(Error::Config(format!("KL barrier must be positive, got {barrier}")));
    }
    Ok(kl.neg().add_scalar(barrier).relu())
}

/// Scalar loss of the component update with its diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct ComponentLoss<'t> {
    pub loss: Var<'t>,
    /// Batch-mean ELBO of `q_m`.
    pub elbo: Var<'t>,
    /// Batch-mean Monte-Carlo `KL(q_m ‖ Q_{m−1})`.
    pub kl: Var<'t>,
}

/// `mean(−ELBO(q_m) + max(0, C − KL(q_m ‖ Q_{m−1})))` for `m ≥ 1`.
pub fn new_component_loss<'t, R: Rng + ?Sized>(
    model: &RecursiveMixtureModel,
    tape: &'t Tape,
    m: usize,
    x: Var<'t>,
    barrier: f64,
    kl_samples: usize,
    rng: &mut R,
) -> Result<ComponentLoss<'t>> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "component 0 is trained on the plain ELBO".into(),
        ));
    }
    let q = model.encode_component(tape, m, x)?;
    let prev = model.encode_mixture(tape, x, m - 1)?;
    let est = elbo_single(&q, model, x, rng)?;
    let kl = kl_monte_carlo(&q, &prev, kl_samples, rng)?;
    let per_example = est.elbo.neg().add(bounded_kl_penalty(kl, barrier)?)?;
    Ok(ComponentLoss {
        loss: per_example.mean_all(),
        elbo: est.elbo.mean_all(),
        kl: kl.mean_all(),
    })
}

/// Entropy-regularizer weight `ν(t) = 1/√(t + 1)`.
pub fn entropy_weight(step: u64) -> f64 {
    1.0 / ((step as f64) + 1.0).sqrt()
}

/// `ν(t) · mean(−log q(z|x))` from one reparameterized draw per example.
pub fn bvi_entropy_reg_mc<'t, R: Rng + ?Sized>(q: &DiagGaussian<'t>, step: u64, rng: &mut R) -> Result<Var<'t>> {
    let z = q.rsample(rng)?;
    Ok(q.log_prob(z)?.neg().mean_all().scale(entropy_weight(step)))
}

/// `ν(t) · mean(Σ_i logvar_i)`, the log-determinant of the diagonal covariance.
pub fn bvi_entropy_reg_closed<'t>(q: &DiagGaussian<'t>, step: u64) -> Result<Var<'t>> {
    Ok(q.logvar().sum(1)?.mean_all().scale(entropy_weight(step)))
}
