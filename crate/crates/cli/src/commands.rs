use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Utc;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use remix_core::data::{split_and_batch, Dataset};
use remix_core::evaluation::{
    grid_kl, mean_iwae, time_inference, true_posterior_grid, variational_grid, MixtureSnapshot, PosteriorGrid,
};
use remix_core::models::{checkpoint, RecursiveMixtureModel};
use remix_core::tensor::Tape;
use remix_core::training::{train, TrainConfig};

use crate::config::{read_data_source, DataSource};
use crate::exit::{code, CliError};
use crate::run::{
    code_version, write_atomic, DirLock, RunManifest, RunSummary, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Val,
    Test,
}

pub fn cmd_train(mut config: TrainConfig, out_dir: &Path) -> Result<(), CliError> {
    for w in config.validate()? {
        warn!("{w}");
    }
    let data = config.dataset.load().map_err(CliError::data)?;
    let _lock = DirLock::acquire(out_dir)?;
    config.metrics_path = Some(out_dir.join(METRICS_FILE));
    config.checkpoint_path = Some(out_dir.join(CHECKPOINT_FILE));
    let json = serde_json::to_string_pretty(&config).map_err(|e| CliError::config(e.to_string()))?;
    write_atomic(&out_dir.join(CONFIG_FILE), json.as_bytes())?;

    let started_at = Utc::now();
    info!(
        "training {} (M = {}) on {} rows, seed {}",
        config.method.name(),
        config.order(),
        data.len(),
        config.seed
    );
    let outcome = train(&config, &data)?;
    let best = outcome.best_metrics();
    let summary = RunSummary {
        epochs: outcome.metrics.len(),
        best_epoch: outcome.best_epoch,
        best_val_iwae: best.and_then(|m| m.val_iwae),
        best_val_iwae_se: best.and_then(|m| m.val_iwae_se),
        final_train_elbo: outcome.metrics.last().map(|m| m.train_elbo),
        final_alpha: outcome.metrics.last().map(|m| m.alpha.clone()).unwrap_or_default(),
    };
    let blob = Path::new(CHECKPOINT_FILE).with_extension("bin");
    let manifest = RunManifest {
        seed: config.seed,
        config,
        code_version: code_version(),
        output_dir: out_dir.to_path_buf(),
        started_at,
        finished_at: Utc::now(),
        summary,
        files: vec![
            CONFIG_FILE.into(),
            METRICS_FILE.into(),
            CHECKPOINT_FILE.into(),
            blob.display().to_string(),
        ],
        warnings: outcome.warnings.clone(),
    };
    let path = manifest.write()?;
    match (manifest.summary.best_epoch, manifest.summary.best_val_iwae) {
        (Some(e), Some(v)) => println!(
            "best validation IWAE {v:.4} ± {:.4} at epoch {e}",
            manifest.summary.best_val_iwae_se.unwrap_or(f64::NAN)
        ),
        _ => println!("no validation split; kept the final model"),
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Model, dataset and run config (when known) for the evaluation commands.
pub struct Loaded {
    pub model: RecursiveMixtureModel,
    pub data: Dataset,
    pub run: Option<TrainConfig>,
}

pub fn load_model(checkpoint_path: &Path) -> Result<RecursiveMixtureModel, CliError> {
    checkpoint::load(checkpoint_path).map_err(CliError::checkpoint)
}

/// The `--data` file, or the run config saved next to the checkpoint.
fn data_source(checkpoint_path: &Path, data: Option<&Path>) -> Result<DataSource, CliError> {
    let path = match data {
        Some(p) => p.to_path_buf(),
        None => {
            let beside = checkpoint_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(CONFIG_FILE);
            if !beside.is_file() {
                return Err(CliError::config(format!(
                    "no --data given and no {} next to the checkpoint",
                    CONFIG_FILE
                )));
            }
            beside
        }
    };
    read_data_source(&path)
}

pub fn load_all(checkpoint_path: &Path, data: Option<&Path>) -> Result<Loaded, CliError> {
    let model = load_model(checkpoint_path)?;
    let source = data_source(checkpoint_path, data)?;
    let dataset = source.spec().load().map_err(CliError::data)?;
    if dataset.d_x() != model.spec.d_x {
        return Err(CliError::new(
            code::DATA,
            format!(
                "dataset rows have {} features but the model expects {}",
                dataset.d_x(),
                model.spec.d_x
            ),
        ));
    }
    let run = match source {
        DataSource::Run(c) => Some(*c),
        DataSource::Dataset(_) => None,
    };
    Ok(Loaded {
        model,
        data: dataset,
        run,
    })
}

fn split_rows(loaded: &Loaded, split: Split) -> Result<Vec<usize>, CliError> {
    let rows = match split {
        Split::Test => loaded.data.splits.test.clone(),
        Split::Val => {
            let run = loaded.run.as_ref().ok_or_else(|| {
                CliError::config("the validation split needs a run config or manifest as --data".into())
            })?;
            split_and_batch(&loaded.data, run.val_fraction, run.batch_size, run.seed)?.val
        }
    };
    if rows.is_empty() {
        return Err(CliError::new(
            code::DATA,
            format!("the {split:?} split is empty").to_lowercase(),
        ));
    }
    Ok(rows)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub k: usize,
    pub batch_size: usize,
    pub split: Split,
    pub seed: u64,
    pub append: Option<PathBuf>,
}

pub fn cmd_eval(args: EvalArgs<'_>) -> Result<(), CliError> {
    let loaded = load_all(args.checkpoint, args.data)?;
    let rows = split_rows(&loaded, args.split)?;
    let x = loaded.data.rows(&rows);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (mean, se) = mean_iwae(&loaded.model, &x, args.k, args.batch_size, &mut rng)?;
    let split = format!("{:?}", args.split).to_lowercase();
    println!("{split} IWAE (K = {}, n = {}): {mean:.6} ± {se:.6}", args.k, rows.len());

    let out = args.append.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("eval.csv")
    });
    let fresh = !out.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&out)
        .map_err(|e| CliError::config(format!("cannot open {}: {e}", out.display())))?;
    let mut text = String::new();
    if fresh {
        text.push_str("checkpoint,split,k,n,seed,iwae,se\n");
    }
    text.push_str(&format!(
        "{},{split},{},{},{},{mean},{se}\n",
        args.checkpoint.display(),
        args.k,
        rows.len(),
        args.seed
    ));
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", out.display())))?;
    Ok(())
}

pub struct VizArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub index: usize,
    pub out_prefix: &'a Path,
    pub split: Split,
    pub bound: f64,
    pub resolution: usize,
}

fn components_csv(grids: &[PosteriorGrid]) -> String {
    let mut s = String::from("z1,z2,component,log_density\n");
    for (m, g) in grids.iter().enumerate() {
        for (p, v) in g.points().iter().zip(&g.log_density) {
            s.push_str(&format!("{},{},{m},{v}\n", p[0], p[1]));
        }
    }
    s
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    prefix.with_file_name(name)
}

pub fn cmd_viz_posterior(args: VizArgs<'_>) -> Result<(), CliError> {
    let model = load_model(args.checkpoint)?;
    if model.spec.d_z != 2 {
        return Err(CliError::new(
            code::LATENT_DIM,
            format!("posterior grids need d_z = 2, this model has d_z = {}", model.spec.d_z),
        ));
    }
    if args.resolution == 0 || !(args.bound > 0.0) {
        return Err(CliError::config("grid needs resolution >= 1 and bound > 0".into()));
    }
    let source = data_source(args.checkpoint, args.data)?;
    let data = source.spec().load().map_err(CliError::data)?;
    let loaded = Loaded {
        model,
        data,
        run: match source {
            DataSource::Run(c) => Some(*c),
            DataSource::Dataset(_) => None,
        },
    };
    let rows = split_rows(&loaded, args.split)?;
    let row = *rows.get(args.index).ok_or_else(|| {
        CliError::config(format!(
            "example {} is out of range for {} rows",
            args.index,
            rows.len()
        ))
    })?;
    let x = loaded.data.rows(&[row]);

    let (lo, hi) = (-args.bound, args.bound);
    let truth = true_posterior_grid(&loaded.model, x.row(0), lo, hi, args.resolution)?;
    let tape = Tape::new();
    let q = loaded
        .model
        .encode_mixture(&tape, tape.constant(x.clone()), loaded.model.order())?;
    let snap = MixtureSnapshot::of(&q);
    let mixture = variational_grid(&snap, 0, None, &truth)?;
    let components = (0..snap.num_components())
        .map(|m| variational_grid(&snap, 0, Some(m), &truth))
        .collect::<Result<Vec<_>, _>>()?;

    if let Some(dir) = args.out_prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    }
    let outputs = [
        (prefixed(args.out_prefix, "_true.csv"), truth.to_csv()),
        (prefixed(args.out_prefix, "_mixture.csv"), mixture.to_csv()),
        (
            prefixed(args.out_prefix, "_components.csv"),
            components_csv(&components),
        ),
    ];
    for (path, text) in &outputs {
        write_atomic(path, text.as_bytes())?;
        println!("wrote {}", path.display());
    }
    for m in 0..snap.num_components() {
        let mu = snap.mu[m].row(0);
        println!(
            "component {m}: alpha {:.4}, mean ({:.4}, {:.4})",
            snap.log_alphas.at2(0, m).exp(),
            mu[0],
            mu[1]
        );
    }
    println!("grid KL(Q || p(z|x)) = {:.6}", grid_kl(&snap, 0, &truth)?);
    Ok(())
}

pub fn cmd_bench_inference(
    checkpoint_path: &Path,
    data: Option<&Path>,
    batch_size: usize,
    repeats: usize,
) -> Result<(), CliError> {
    let loaded = load_all(checkpoint_path, data)?;
    let rows = split_rows(&loaded, Split::Test)?;
    let x = loaded.data.rows(&rows);
    let ms = time_inference(&loaded.model, &x, batch_size, repeats)?;
    println!(
        "mixture order {}: {ms:.4} ms per batch of {batch_size} ({} rows, {repeats} repeats)",
        loaded.model.order(),
        rows.len()
    );
    Ok(())
}
