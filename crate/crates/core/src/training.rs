//! Training loops: VAE pretraining, the recursive-mixture schedule and the
//! blind-mixture and entropy-regularized baselines.
//!
//! Every optimizer step trains an explicit set of parameter groups; all other
//! groups are frozen for that step and stay bit-identical.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_and_batch, BimodalToyConfig, Dataset, DatasetSpec, Domain, Source, SplitView};
use crate::distributions::kl_monte_carlo;
use crate::error::{Error, Result};
use crate::evaluation::mean_iwae;
use crate::models::{checkpoint, Likelihood, ModelSpec, RecursiveMixtureModel};
use crate::objectives::{
    bvi_entropy_reg_closed, bvi_entropy_reg_mc, elbo_mixture, elbo_mixture_shared_noise, elbo_single,
    new_component_loss, DEFAULT_KL_BARRIER,
};
use crate::tensor::{Adam, AdamConfig, GroupId, ParamStore, Tape, Tensor, Var};

/// Rows used for α and KL diagnostics when there is no validation split.
const DIAGNOSTIC_ROWS: usize = 512;
/// Monte-Carlo samples for the per-epoch KL diagnostic.
const DIAGNOSTIC_KL_SAMPLES: usize = 16;
/// Stream offset that keeps evaluation draws apart from training draws.
const EVAL_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rme,
    Vae,
    Me,
    BviEr1,
    BviEr2,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rme => "rme",
            Self::Vae => "vae",
            Self::Me => "me",
            Self::BviEr1 => "bvi_er1",
            Self::BviEr2 => "bvi_er2",
        }
    }
}

/// Initialization of mixture components `1..=M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentInit {
    /// Copies of the pretrained encoder.
    Clone,
    /// Fresh fan-in-scaled weights.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInit {
    #[default]
    Random,
    /// Exact generator of a bimodal-toy dataset.
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Mixture order `M`; the mixture has `M + 1` components.
    pub m: usize,
    pub d_z: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Bounded-KL barrier `C`.
    pub kl_barrier: f64,
    pub eps_min: f64,
    pub eps_max: f64,
    pub n_epochs: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    /// Samples per example for the component-vs-mixture KL.
    pub kl_samples: usize,
    /// Samples per component for the mixture ELBO.
    pub elbo_samples: usize,
    /// Importance samples for validation IWAE.
    pub iwae_samples: usize,
    pub val_fraction: f64,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub eps_hidden: usize,
    /// Defaults to Bernoulli for binary data and Gaussian otherwise.
    pub likelihood: Option<Likelihood>,
    pub leaky_slope: f64,
    pub train_decoder: bool,
    pub decoder_init: DecoderInit,
    /// Blind-mixture initialization of components `1..=M`.
    pub me_init: ComponentInit,
    /// Blind mixture only: one noise draw shared by all components.
    pub shared_noise: bool,
    pub dataset: DatasetSpec,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let spec = ModelSpec::new(0, 2, Likelihood::Gaussian);
        Self {
            method: Method::Rme,
            m: 1,
            d_z: spec.d_z,
            batch_size: 128,
            lr: AdamConfig::default().lr,
            kl_barrier: DEFAULT_KL_BARRIER,
            eps_min: spec.eps_min,
            eps_max: spec.eps_max,
            n_epochs: 20,
            pretrain_epochs: 30,
            seed: 0,
            kl_samples: 1,
            elbo_samples: 1,
            iwae_samples: crate::evaluation::DEFAULT_IWAE_SAMPLES,
            val_fraction: 0.1,
            encoder_hidden: spec.encoder_hidden,
            decoder_hidden: spec.decoder_hidden,
            eps_hidden: spec.eps_hidden,
            likelihood: None,
            leaky_slope: spec.leaky_slope,
            train_decoder: true,
            decoder_init: DecoderInit::Random,
            me_init: ComponentInit::Random,
            shared_noise: false,
            dataset: DatasetSpec::default(),
            metrics_path: None,
            checkpoint_path: None,
        }
    }
}

/// Barrier used on the bimodal toy, whose total ELBO is only about a dozen
/// nats.
pub const TOY_KL_BARRIER: f64 = 5.0;

impl TrainConfig {
    /// Bimodal-toy run with the toy's generator frozen in as the decoder;
    /// data and training share `seed`.
    pub fn bimodal_toy(method: Method, m: usize, seed: u64) -> Self {
        Self {
            method,
            m,
            lr: 2e-3,
            kl_barrier: TOY_KL_BARRIER,
            eps_max: 0.5,
            seed,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![16, 8],
            train_decoder: false,
            decoder_init: DecoderInit::Generator,
            dataset: DatasetSpec::BimodalToy {
                n: 2000,
                seed,
                geometry: BimodalToyConfig::default(),
            },
            ..Self::default()
        }
    }

    /// Checks the configuration and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.kl_barrier > 0.0) {
            return fail(format!("kl_barrier must be positive, got {}", self.kl_barrier));
        }
        if self.kl_samples == 0 || self.elbo_samples == 0 || self.iwae_samples == 0 {
            return fail("sample counts must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if self.d_z == 0 {
            return fail("d_z must be >= 1".into());
        }
        let mut warnings = Vec::new();
        if self.method == Method::Vae && self.m > 0 {
            warnings.push(format!("method vae ignores m = {}", self.m));
        }
        if matches!(self.method, Method::Rme | Method::BviEr1 | Method::BviEr2) && self.m == 0 {
            warnings.push(format!("{} with m = 0 reduces to a plain VAE", self.method.name()));
        }
        if self.shared_noise && self.method != Method::Me {
            warnings.push("shared_noise only affects method me".into());
        }
        Ok(warnings)
    }

    /// Mixture order actually trained.
    pub fn order(&self) -> usize {
        match self.method {
            Method::Vae => 0,
            _ => self.m,
        }
    }

    pub fn model_spec(&self, data: &Dataset) -> ModelSpec {
        let likelihood = self.likelihood.unwrap_or(match data.domain {
            Domain::Binary => Likelihood::Bernoulli,
            Domain::Real => Likelihood::Gaussian,
        });
        ModelSpec {
            d_x: data.d_x(),
            d_z: self.d_z,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            eps_hidden: self.eps_hidden,
            eps_min: self.eps_min,
            eps_max: self.eps_max,
            likelihood,
            leaky_slope: self.leaky_slope,
        }
    }
}

/// Per-epoch diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub method: Method,
    /// Batch-mean training objective before each update, averaged over the
    /// epoch (mixture ELBO for mixtures, ELBO for the VAE).
    pub train_elbo: f64,
    pub val_iwae: Option<f64>,
    pub val_iwae_se: Option<f64>,
    /// Mean `α_m(x)`, `m = 0..=M`.
    pub alpha: Vec<f64>,
    /// Mean `KL(q_m ‖ Q_{m−1})`, `m = 1..=M`.
    pub kl: Vec<f64>,
    pub seconds: f64,
}

pub fn metrics_header(order: usize) -> String {
    let mut h = String::from("epoch,method,train_elbo,val_iwae");
    for m in 0..=order {
        write!(h, ",alpha_{m}").expect("string write");
    }
    for m in 1..=order {
        write!(h, ",kl_{m}").expect("string write");
    }
    h.push_str(",seconds");
    h
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let mut r = format!("{},{},{}", self.epoch, self.method.name(), self.train_elbo);
        match self.val_iwae {
            Some(v) => write!(r, ",{v}"),
            None => write!(r, ","),
        }
        .expect("string write");
        for v in self.alpha.iter().chain(&self.kl) {
            write!(r, ",{v}").expect("string write");
        }
        write!(r, ",{}", self.seconds).expect("string write");
        r
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model at the epoch with the best validation IWAE (final epoch when
    /// there is no validation split).
    pub model: RecursiveMixtureModel,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<EpochMetrics>,
    /// Mean training ELBO of each pretraining epoch.
    pub pretrain_elbo: Vec<f64>,
    pub warnings: Vec<String>,
}

impl TrainOutcome {
    pub fn best_metrics(&self) -> Option<&EpochMetrics> {
        self.best_epoch.and_then(|e| self.metrics.get(e))
    }
}

fn gate(store: &mut ParamStore, groups: &[GroupId]) {
    for g in 0..store.groups().len() {
        store.set_trainable(GroupId(g), groups.contains(&GroupId(g)));
    }
}

fn trainable_names(store: &ParamStore) -> String {
    store
        .groups()
        .iter()
        .filter(|g| g.trainable)
        .map(|g| g.name.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

/// Backpropagates `loss` into the trainable groups and applies one Adam step.
fn apply(tape: &Tape, loss: Var<'_>, store: &mut ParamStore, adam: &mut Adam, step: &str) -> Result<f64> {
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step: step.into(),
            group: trainable_names(store),
        });
    }
    tape.backward_into(loss, store)?;
    adam.step(store)?;
    if store.has_non_finite() {
        return Err(Error::NonFinite {
            step: format!("{step} (parameters)"),
            group: trainable_names(store),
        });
    }
    Ok(value)
}

/// Random model of order 0 with the configured decoder initialization.
pub fn build_model(config: &TrainConfig, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<RecursiveMixtureModel> {
    let mut model = RecursiveMixtureModel::new(config.model_spec(data), 0, rng)?;
    if config.decoder_init == DecoderInit::Generator {
        match &data.source {
            Source::Bimodal(g) => g.install_decoder(&mut model)?,
            _ => {
                return Err(Error::Config(
                    "decoder_init = generator needs a bimodal_toy dataset".into(),
                ))
            }
        }
    }
    Ok(model)
}

fn vae_groups(model: &RecursiveMixtureModel, config: &TrainConfig) -> Vec<GroupId> {
    let mut g = vec![model.component_group(0)];
    if config.train_decoder {
        g.push(model.decoder_group());
    }
    g
}

fn vae_step(
    model: &mut RecursiveMixtureModel,
    config: &TrainConfig,
    adam: &mut Adam,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
    label: &str,
) -> Result<f64> {
    let groups = vae_groups(model, config);
    gate(&mut model.store, &groups);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let q = model.encode_component(&tape, 0, xv)?;
    let loss = elbo_single(&q, &*model, xv, rng)?.elbo.mean_all().neg();
    Ok(-apply(&tape, loss, &mut model.store, adam, label)?)
}

fn check_nonempty(view: &SplitView) -> Result<()> {
    if view.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok(())
}

/// Trains encoder 0 and the decoder as a standard VAE for
/// `pretrain_epochs`; returns each epoch's mean training ELBO.
pub fn pretrain_vae(
    config: &TrainConfig,
    model: &mut RecursiveMixtureModel,
    data: &Dataset,
    view: &SplitView,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    check_nonempty(view)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut history = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        let batches = view.epoch_batches(epoch);
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let x = data.rows(idx);
            total += vae_step(
                model,
                config,
                &mut adam,
                &x,
                rng,
                &format!("pretrain epoch {epoch} batch {bi}"),
            )?;
        }
        history.push(total / batches.len() as f64);
    }
    model.store.enable_all();
    Ok(history)
}

/// Per-batch update schedule of the main phase.
trait Schedule {
    fn batch(
        &mut self,
        model: &mut RecursiveMixtureModel,
        x: &Tensor,
        rng: &mut ChaCha8Rng,
        label: &str,
    ) -> Result<f64>;
}

struct VaeSchedule<'c> {
    config: &'c TrainConfig,
    adam: Adam,
}

impl Schedule for VaeSchedule<'_> {
    fn batch(
        &mut self,
        model: &mut RecursiveMixtureModel,
        x: &Tensor,
        rng: &mut ChaCha8Rng,
        label: &str,
    ) -> Result<f64> {
        vae_step(model, self.config, &mut self.adam, x, rng, label)
    }
}

#[derive(Clone, Copy)]
enum ComponentObjective {
    BoundedKl,
    EntropyMc,
    EntropyClosed,
}

struct RecursiveSchedule<'c> {
    config: &'c TrainConfig,
    adam: Adam,
    objective: ComponentObjective,
    /// Batches processed so far; drives the entropy weight schedule.
    t: u64,
}

impl Schedule for RecursiveSchedule<'_> {
    fn batch(
        &mut self,
        model: &mut RecursiveMixtureModel,
        x: &Tensor,
        rng: &mut ChaCha8Rng,
        label: &str,
    ) -> Result<f64> {
        let order = model.order();
        let adam = &mut self.adam;

        // q₀ on its own ELBO
        model.store.enable_only(model.component_group(0));
        {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let q = model.encode_component(&tape, 0, xv)?;
            let loss = elbo_single(&q, &*model, xv, rng)?.elbo.mean_all().neg();
            apply(&tape, loss, &mut model.store, adam, &format!("{label} phi_0"))?;
        }

        let mut mixture_elbo = f64::NAN;
        for m in 1..=order {
            model.store.enable_only(model.component_group(m));
            {
                let tape = Tape::new();
                let xv = tape.constant(x.clone());
                let loss = match self.objective {
                    ComponentObjective::BoundedKl => {
                        new_component_loss(model, &tape, m, xv, self.config.kl_barrier, self.config.kl_samples, rng)?
                            .loss
                    }
                    ComponentObjective::EntropyMc | ComponentObjective::EntropyClosed => {
                        let q = model.encode_component(&tape, m, xv)?;
                        let elbo = elbo_single(&q, &*model, xv, rng)?.elbo.mean_all();
                        let reg = match self.objective {
                            ComponentObjective::EntropyMc => bvi_entropy_reg_mc(&q, self.t, rng)?,
                            _ => bvi_entropy_reg_closed(&q, self.t)?,
                        };
                        elbo.add(reg)?.neg()
                    }
                };
                apply(&tape, loss, &mut model.store, adam, &format!("{label} phi_{m}"))?;
            }

            model.store.enable_only(model.eps_group(m));
            {
                let tape = Tape::new();
                let xv = tape.constant(x.clone());
                let q = model.encode_mixture(&tape, xv, m)?;
                let loss = elbo_mixture(&q, &*model, xv, self.config.elbo_samples, rng)?
                    .elbo
                    .mean_all()
                    .neg();
                let v = apply(&tape, loss, &mut model.store, adam, &format!("{label} eta_{m}"))?;
                if m == order {
                    mixture_elbo = -v;
                }
            }
        }

        if self.config.train_decoder {
            model.store.enable_only(model.decoder_group());
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let q = model.encode_mixture(&tape, xv, order)?;
            let loss = elbo_mixture(&q, &*model, xv, self.config.elbo_samples, rng)?
                .elbo
                .mean_all()
                .neg();
            apply(&tape, loss, &mut model.store, adam, &format!("{label} theta"))?;
        }
        self.t += 1;
        Ok(mixture_elbo)
    }
}

struct BlindSchedule<'c> {
    config: &'c TrainConfig,
    adam: Adam,
}

impl Schedule for BlindSchedule<'_> {
    fn batch(
        &mut self,
        model: &mut RecursiveMixtureModel,
        x: &Tensor,
        rng: &mut ChaCha8Rng,
        label: &str,
    ) -> Result<f64> {
        let order = model.order();
        if order == 0 {
            return vae_step(model, self.config, &mut self.adam, x, rng, label);
        }
        model.store.enable_all();
        if !self.config.train_decoder {
            model.store.set_trainable(model.decoder_group(), false);
        }
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let q = model.encode_mixture(&tape, xv, order)?;
        let est = if self.config.shared_noise {
            elbo_mixture_shared_noise(&q, &*model, xv, self.config.elbo_samples, rng)?
        } else {
            elbo_mixture(&q, &*model, xv, self.config.elbo_samples, rng)?
        };
        let loss = est.elbo.mean_all().neg();
        Ok(-apply(
            &tape,
            loss,
            &mut model.store,
            &mut self.adam,
            &format!("{label} joint"),
        )?)
    }
}

/// Mean mixing weights and component-vs-mixture KLs over `x`.
pub fn mixture_diagnostics(
    model: &RecursiveMixtureModel,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let order = model.order();
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = model.mixing_log_weights(&tape, xv, order)?.exp().value();
    let b = x.shape()[0] as f64;
    let alpha = (0..=order)
        .map(|m| (0..x.shape()[0]).map(|i| w.at2(i, m)).sum::<f64>() / b)
        .collect();
    let mut kl = Vec::with_capacity(order);
    for m in 1..=order {
        let q = model.encode_component(&tape, m, xv)?;
        let prev = model.encode_mixture(&tape, xv, m - 1)?;
        kl.push(kl_monte_carlo(&q, &prev, DIAGNOSTIC_KL_SAMPLES, rng)?.value().mean());
    }
    Ok((alpha, kl))
}

fn eval_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM + epoch as u64);
    rng
}

struct MetricsFile {
    file: Option<File>,
    path: PathBuf,
}

impl MetricsFile {
    fn create(path: Option<&Path>, order: usize) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                file: None,
                path: PathBuf::new(),
            });
        };
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", metrics_header(order)).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some(file),
            path: path.to_path_buf(),
        })
    }

    fn append(&mut self, row: &EpochMetrics) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(&self.path, e))?;
            f.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

fn run(config: &TrainConfig, data: &Dataset, method: Method) -> Result<TrainOutcome> {
    let warnings = config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let view = split_and_batch(data, config.val_fraction, config.batch_size, config.seed)?;
    check_nonempty(&view)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = build_model(config, data, &mut rng)?;
    let pretrain_elbo = pretrain_vae(config, &mut model, data, &view, &mut rng)?;

    let order = match method {
        Method::Vae => 0,
        _ => config.m,
    };
    for _ in 0..order {
        match method {
            Method::Me if config.me_init == ComponentInit::Random => model.push_random_component(&mut rng)?,
            _ => model.push_cloned_component(0, &mut rng)?,
        };
    }

    let main_lr = match method {
        Method::BviEr1 | Method::BviEr2 => config.lr / 10.0,
        _ => config.lr,
    };
    let adam = Adam::new(AdamConfig::with_lr(main_lr));
    let recursive = |objective| RecursiveSchedule {
        config,
        adam: adam.clone(),
        objective,
        t: 0,
    };
    let mut schedule: Box<dyn Schedule + '_> = match method {
        _ if order == 0 => Box::new(VaeSchedule {
            config,
            adam: adam.clone(),
        }),
        Method::Rme => Box::new(recursive(ComponentObjective::BoundedKl)),
        Method::BviEr1 => Box::new(recursive(ComponentObjective::EntropyMc)),
        Method::BviEr2 => Box::new(recursive(ComponentObjective::EntropyClosed)),
        Method::Me => Box::new(BlindSchedule {
            config,
            adam: adam.clone(),
        }),
        Method::Vae => unreachable!("order is 0"),
    };

    let val_x = data.rows(&view.val);
    let diag_x = if view.val.is_empty() {
        data.rows(&view.train[..view.train.len().min(DIAGNOSTIC_ROWS)])
    } else {
        val_x.clone()
    };
    let mut metrics_file = MetricsFile::create(config.metrics_path.as_deref(), order)?;
    let mut metrics = Vec::with_capacity(config.n_epochs);
    let mut best: Option<(f64, usize, RecursiveMixtureModel)> = None;
    for epoch in 0..config.n_epochs {
        let start = Instant::now();
        let batches = view.epoch_batches(config.pretrain_epochs + epoch);
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let x = data.rows(idx);
            total += schedule.batch(&mut model, &x, &mut rng, &format!("epoch {epoch} batch {bi}"))?;
        }
        model.store.enable_all();
        let train_secs = start.elapsed().as_secs_f64();

        let mut erng = eval_rng(config.seed, epoch);
        let (val_iwae, val_iwae_se) = if view.val.is_empty() {
            (None, None)
        } else {
            let (m, se) = mean_iwae(&model, &val_x, config.iwae_samples, config.batch_size, &mut erng)?;
            (Some(m), Some(se))
        };
        let (alpha, kl) = mixture_diagnostics(&model, &diag_x, &mut erng)?;
        let row = EpochMetrics {
            epoch,
            method,
            train_elbo: total / batches.len() as f64,
            val_iwae,
            val_iwae_se,
            alpha,
            kl,
            seconds: train_secs,
        };
        metrics_file.append(&row)?;
        if let Some(v) = val_iwae {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, model.clone()));
            }
        }
        metrics.push(row);
    }

    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => {
            let last = config.n_epochs.checked_sub(1);
            (model, last)
        }
    };
    if let Some(path) = &config.checkpoint_path {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        checkpoint::save(&model, path)?;
    }
    Ok(TrainOutcome {
        model,
        best_epoch,
        metrics,
        pretrain_elbo,
        warnings,
    })
}

/// Trains according to `config.method`.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    run(config, data, config.method)
}

/// Recursive mixture: clones of the pretrained encoder refined per batch by
/// the q₀, φ_m, η_m and θ steps in order.
pub fn train_rme(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    run(config, data, Method::Rme)
}

/// Plain VAE for `pretrain_epochs + n_epochs` epochs.
pub fn train_vae(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    run(config, data, Method::Vae)
}

/// Blind mixture trained jointly on the mixture ELBO.
pub fn train_me(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    run(config, data, Method::Me)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BviVariant {
    Er1,
    Er2,
}

/// Recursive schedule with the bounded-KL term replaced by an entropy
/// regularizer, at a tenth of the learning rate.
pub fn train_bvi_variant(config: &TrainConfig, data: &Dataset, variant: BviVariant) -> Result<TrainOutcome> {
    let method = match variant {
        BviVariant::Er1 => Method::BviEr1,
        BviVariant::Er2 => Method::BviEr2,
    };
    run(config, data, method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BimodalToyConfig;

    fn tiny(method: Method) -> (TrainConfig, Dataset) {
        let config = TrainConfig {
            method,
            m: 1,
            batch_size: 32,
            n_epochs: 2,
            pretrain_epochs: 2,
            iwae_samples: 4,
            encoder_hidden: vec![8],
            decoder_hidden: vec![8],
            ..TrainConfig::default()
        };
        let data = BimodalToyConfig::default().generate(120, 3);
        (config, data)
    }

    #[test]
    fn config_round_trips_through_json() {
        let (config, _) = tiny(Method::BviEr2);
        let json = serde_json::to_string(&config).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), config);
        let partial: TrainConfig = serde_json::from_str(r#"{"method": "me", "m": 3}"#).unwrap();
        assert_eq!((partial.method, partial.m, partial.batch_size), (Method::Me, 3, 128));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"mm": 3}"#).is_err());
    }

    #[test]
    fn validation_rules() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let warn = TrainConfig {
            method: Method::Vae,
            m: 2,
            ..TrainConfig::default()
        };
        assert_eq!(warn.validate().unwrap().len(), 1);
        assert_eq!(warn.order(), 0);
    }

    #[test]
    fn every_method_runs_and_reports() {
        for method in [Method::Rme, Method::Vae, Method::Me, Method::BviEr1, Method::BviEr2] {
            let (config, data) = tiny(method);
            let out = train(&config, &data).unwrap();
            assert_eq!(out.metrics.len(), 2);
            assert_eq!(out.pretrain_elbo.len(), 2);
            for row in &out.metrics {
                let s: f64 = row.alpha.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "{method:?}: {s}");
                assert!(row.train_elbo.is_finite() && row.val_iwae.unwrap().is_finite());
                assert_eq!(row.kl.len(), config.order());
            }
            assert!(!out.model.store.has_non_finite());
            assert_eq!(out.model.order(), config.order());
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (config, _) = tiny(Method::Rme);
        let data = BimodalToyConfig::default().generate(0, 1);
        assert!(matches!(train(&config, &data), Err(Error::Data(_))));
    }

    #[test]
    fn blind_mixture_of_order_zero_matches_vae() {
        let (mut config, data) = tiny(Method::Me);
        config.m = 0;
        let me = train(&config, &data).unwrap();
        config.method = Method::Vae;
        let vae = train(&config, &data).unwrap();
        assert_eq!(me.model.flat_values(), vae.model.flat_values());
    }

    #[test]
    fn csv_layout() {
        assert_eq!(
            metrics_header(2),
            "epoch,method,train_elbo,val_iwae,alpha_0,alpha_1,alpha_2,kl_1,kl_2,seconds"
        );
        let row = EpochMetrics {
            epoch: 3,
            method: Method::Rme,
            train_elbo: -1.5,
            val_iwae: None,
            val_iwae_se: None,
            alpha: vec![0.9, 0.1],
            kl: vec![2.0],
            seconds: 0.25,
        };
        assert_eq!(row.csv_row(), "3,rme,-1.5,,0.9,0.1,2,0.25");
    }

    #[test]
    fn generator_decoder_requires_toy_data() {
        let (mut config, _) = tiny(Method::Rme);
        config.decoder_init = DecoderInit::Generator;
        config.decoder_hidden = vec![16, 8];
        let lg = crate::data::gen_linear_gaussian(50, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 0.5, 0).unwrap();
        assert!(matches!(train(&config, &lg), Err(Error::Config(_))));
    }
}
