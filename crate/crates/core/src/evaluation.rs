//! IWAE estimation, the 2-D posterior grid oracle, divergence-to-truth and
//! inference timing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::distributions::{MixturePosterior, LN_2PI};
use crate::error::{Error, Result};
use crate::models::{ObservationModel, RecursiveMixtureModel};
use crate::tensor::{logsumexp, Tape, Tensor};

/// Importance samples per example.
pub const DEFAULT_IWAE_SAMPLES: usize = 100;
pub const DEFAULT_GRID_BOUND: f64 = 5.0;
pub const DEFAULT_GRID_RESOLUTION: usize = 200;
pub const DEFAULT_TIMING_REPEATS: usize = 5;
pub const DEFAULT_TIMING_BATCH: usize = 128;

/// Plain-value copy of a mixture posterior for sampling and density queries
/// outside the tape.
#[derive(Debug, Clone)]
pub struct MixtureSnapshot {
    /// `[batch × K]`.
    pub log_alphas: Tensor,
    /// One `[batch × d_z]` tensor per component.
    pub mu: Vec<Tensor>,
    pub logvar: Vec<Tensor>,
}

impl MixtureSnapshot {
    pub fn of(q: &MixturePosterior<'_>) -> Self {
        Self {
            log_alphas: Tensor::clone(&q.log_alphas().value()),
            mu: q.components().iter().map(|c| Tensor::clone(&c.mu().value())).collect(),
            logvar: q
                .components()
                .iter()
                .map(|c| Tensor::clone(&c.logvar().value()))
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.log_alphas.shape()[0]
    }

    pub fn num_components(&self) -> usize {
        self.mu.len()
    }

    pub fn dim(&self) -> usize {
        self.mu[0].shape()[1]
    }

    pub fn component_log_density(&self, example: usize, m: usize, z: &[f64]) -> f64 {
        let mu = self.mu[m].row(example);
        let lv = self.logvar[m].row(example);
        -0.5 * z
            .iter()
            .zip(mu)
            .zip(lv)
            .map(|((z, mu), lv)| LN_2PI + lv + (z - mu).powi(2) * (-lv).exp())
            .sum::<f64>()
    }

    pub fn log_density(&self, example: usize, z: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.num_components())
            .map(|m| self.log_alphas.at2(example, m) + self.component_log_density(example, m, z))
            .collect();
        logsumexp(&terms)
    }

    pub fn sample<R: Rng + ?Sized>(&self, example: usize, m: usize, rng: &mut R) -> Vec<f64> {
        self.mu[m]
            .row(example)
            .iter()
            .zip(self.logvar[m].row(example))
            .map(|(mu, lv)| mu + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

fn log_std_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| LN_2PI + v * v).sum::<f64>()
}

/// Integer counts summing to `total`, proportional to `weights` by largest
/// remainder, with at least one per entry.
pub fn stratified_counts(weights: &[f64], total: usize) -> Vec<usize> {
    let k = weights.len();
    assert!(total >= k, "need at least one sample per stratum");
    let free = (total - k) as f64;
    let ideal: Vec<f64> = weights.iter().map(|w| w * free).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| 1 + v.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Per-example IWAE estimate of `log p(x)` with `k` importance samples.
///
/// With `k` at least the number of components, samples are allocated to
/// components by [`stratified_counts`] and weighted by `α_m / n_m`; otherwise
/// they are drawn from the mixture directly. Both are unbiased for `p(x)`.
pub fn iwae<'t, O, R>(q: &MixturePosterior<'t>, obs: &O, x: &Tensor, k: usize, rng: &mut R) -> Result<Tensor>
where
    O: ObservationModel + ?Sized,
    R: Rng + ?Sized,
{
    if k < 1 {
        return Err(Error::InvalidArgument("IWAE needs K >= 1".into()));
    }
    let snap = MixtureSnapshot::of(q);
    let (b, d, n_comp) = (snap.batch(), snap.dim(), snap.num_components());
    if x.shape()[0] != b {
        return Err(Error::InvalidArgument(format!(
            "posterior batch {b} does not match {} inputs",
            x.shape()[0]
        )));
    }
    // (example, log proposal correction) per drawn sample
    let mut zs = Vec::with_capacity(b * k * d);
    let mut corr = Vec::with_capacity(b * k);
    for e in 0..b {
        let alphas: Vec<f64> = (0..n_comp).map(|m| snap.log_alphas.at2(e, m).exp()).collect();
        if k >= n_comp {
            let counts = stratified_counts(&alphas, k);
            for (m, &n_m) in counts.iter().enumerate() {
                let log_w = snap.log_alphas.at2(e, m) - (n_m as f64).ln() + (k as f64).ln();
                for _ in 0..n_m {
                    let z = snap.sample(e, m, rng);
                    corr.push(log_w + log_std_normal(&z) - snap.log_density(e, &z));
                    zs.extend(z);
                }
            }
        } else {
            for _ in 0..k {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut m = n_comp - 1;
                for (i, a) in alphas.iter().enumerate() {
                    acc += a;
                    if u < acc {
                        m = i;
                        break;
                    }
                }
                let z = snap.sample(e, m, rng);
                corr.push(log_std_normal(&z) - snap.log_density(e, &z));
                zs.extend(z);
            }
        }
    }
    let ll = repeated_log_lik(obs, x, k, Tensor::new(vec![b * k, d], zs)?)?;
    let out = (0..b)
        .map(|e| {
            let lw: Vec<f64> = (e * k..(e + 1) * k).map(|i| ll[i] + corr[i]).collect();
            logsumexp(&lw) - (k as f64).ln()
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// `log p(x_e | z_i)` where row `i` of `z` belongs to example `i / k`.
fn repeated_log_lik<O: ObservationModel + ?Sized>(obs: &O, x: &Tensor, k: usize, z: Tensor) -> Result<Vec<f64>> {
    let d_x = x.shape()[1];
    let mut x_rep = Vec::with_capacity(z.shape()[0] * d_x);
    for e in 0..x.shape()[0] {
        for _ in 0..k {
            x_rep.extend_from_slice(x.row(e));
        }
    }
    let tape = Tape::new();
    let xv = tape.constant(Tensor::new(vec![z.shape()[0], d_x], x_rep)?);
    let zv = tape.constant(z);
    Ok(obs.log_lik(&tape, xv, zv)?.value().data().to_vec())
}

/// Mean IWAE of `model`'s full mixture over `rows`, evaluated in chunks.
/// Returns the mean and its standard error across examples.
pub fn mean_iwae<R: Rng + ?Sized>(
    model: &RecursiveMixtureModel,
    x: &Tensor,
    k: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::Data("IWAE over an empty split".into()));
    }
    let mut values = Vec::with_capacity(n);
    for chunk in (0..n).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let xb = x.select_rows(chunk);
        let tape = Tape::new();
        let xv = tape.constant(xb.clone());
        let q = model.encode_mixture(&tape, xv, model.order())?;
        values.extend_from_slice(iwae(&q, model, &xb, k, rng)?.data());
    }
    Ok(mean_and_se(&values))
}

/// Sample mean and standard error.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Normalized log-density on a square grid over a 2-D latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
    /// Row-major over `(z1, z2)` cell centers, `z1` outer.
    pub log_density: Vec<f64>,
}

impl PosteriorGrid {
    pub fn cell_width(&self) -> f64 {
        (self.hi - self.lo) / self.resolution as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_width().powi(2)
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.cell_width()
    }

    /// Grid cell centers in storage order.
    pub fn points(&self) -> Vec<[f64; 2]> {
        grid_points(self.lo, self.hi, self.resolution)
    }

    /// Riemann sum of the density; 1 by construction.
    pub fn total_mass(&self) -> f64 {
        self.log_density.iter().map(|v| v.exp()).sum::<f64>() * self.cell_area()
    }

    /// Builds a grid by normalizing unnormalized log-density values.
    pub fn from_unnormalized(lo: f64, hi: f64, resolution: usize, mut values: Vec<f64>) -> Result<Self> {
        if resolution == 0 || !(hi > lo) {
            return Err(Error::InvalidArgument(format!(
                "bad grid [{lo}, {hi}] at resolution {resolution}"
            )));
        }
        if values.len() != resolution * resolution {
            return Err(Error::InvalidArgument("grid value count mismatch".into()));
        }
        let area = ((hi - lo) / resolution as f64).powi(2);
        let log_z = logsumexp(&values) + area.ln();
        if !log_z.is_finite() {
            return Err(Error::InvalidArgument("grid density has no finite mass".into()));
        }
        values.iter_mut().for_each(|v| *v -= log_z);
        Ok(Self {
            lo,
            hi,
            resolution,
            log_density: values,
        })
    }

    /// Number of strict local maxima (8-neighbourhood) whose density exceeds
    /// `fraction` of the global maximum.
    pub fn count_modes(&self, fraction: f64) -> usize {
        let r = self.resolution;
        let max = self.log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let floor = max + fraction.ln();
        let at = |i: usize, j: usize| self.log_density[i * r + j];
        let mut count = 0;
        for i in 0..r {
            for j in 0..r {
                let v = at(i, j);
                if v < floor {
                    continue;
                }
                let is_peak = (-1i64..=1).all(|di| {
                    (-1i64..=1).all(|dj| {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        (di == 0 && dj == 0)
                            || ni < 0
                            || nj < 0
                            || ni >= r as i64
                            || nj >= r as i64
                            || at(ni as usize, nj as usize) < v
                    })
                });
                count += usize::from(is_peak);
            }
        }
        count
    }

    /// `z1,z2,log_density` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("z1,z2,log_density\n");
        for (p, v) in self.points().iter().zip(&self.log_density) {
            writeln!(s, "{},{},{}", p[0], p[1], v).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn grid_points(lo: f64, hi: f64, resolution: usize) -> Vec<[f64; 2]> {
    let h = (hi - lo) / resolution as f64;
    let c = |i: usize| lo + (i as f64 + 0.5) * h;
    (0..resolution)
        .flat_map(|i| (0..resolution).map(move |j| [c(i), c(j)]))
        .collect()
}

/// `p(z|x) ∝ p(x|z) p(z)` on `[lo, hi]²` for a single example `x`.
pub fn true_posterior_grid<O: ObservationModel + ?Sized>(
    obs: &O,
    x: &[f64],
    lo: f64,
    hi: f64,
    resolution: usize,
) -> Result<PosteriorGrid> {
    if obs.d_z() != 2 {
        return Err(Error::InvalidArgument(format!(
            "posterior grids need a 2-D latent space, model has d_z = {}",
            obs.d_z()
        )));
    }
    let points = grid_points(lo, hi, resolution);
    let z = Tensor::new(
        vec![points.len(), 2],
        points.iter().flat_map(|p| p.iter().copied()).collect(),
    )?;
    let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let ll = repeated_log_lik(obs, &xt, points.len(), z)?;
    let values = ll.iter().zip(&points).map(|(l, p)| l + log_std_normal(p)).collect();
    PosteriorGrid::from_unnormalized(lo, hi, resolution, values)
}

/// A variational density evaluated on the cells of `like`, renormalized
/// over the grid. `component` selects one mixture component.
pub fn variational_grid(
    q: &MixtureSnapshot,
    example: usize,
    component: Option<usize>,
    like: &PosteriorGrid,
) -> Result<PosteriorGrid> {
    if q.dim() != 2 {
        return Err(Error::InvalidArgument("variational grids need d_z = 2".into()));
    }
    let values = like
        .points()
        .iter()
        .map(|p| match component {
            Some(m) => q.component_log_density(example, m, p),
            None => q.log_density(example, p),
        })
        .collect();
    PosteriorGrid::from_unnormalized(like.lo, like.hi, like.resolution, values)
}

/// Riemann-sum `KL(q ‖ p(·|x))` over the grid with `q`'s exact density.
pub fn grid_kl(q: &MixtureSnapshot, example: usize, grid: &PosteriorGrid) -> Result<f64> {
    if q.dim() != 2 {
        return Err(Error::InvalidArgument("grid KL needs d_z = 2".into()));
    }
    let area = grid.cell_area();
    Ok(grid
        .points()
        .iter()
        .zip(&grid.log_density)
        .map(|(p, lp)| {
            let lq = q.log_density(example, p);
            let w = lq.exp() * area;
            if w == 0.0 {
                0.0
            } else {
                w * (lq - lp)
            }
        })
        .sum())
}

/// Mean wall-clock milliseconds per batch of a full-mixture forward pass over
/// `x`, averaged over `repeats` sweeps.
pub fn time_inference(model: &RecursiveMixtureModel, x: &Tensor, batch_size: usize, repeats: usize) -> Result<f64> {
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::Data("timing over an empty split".into()));
    }
    if batch_size == 0 || repeats == 0 {
        return Err(Error::InvalidArgument("batch_size and repeats must be >= 1".into()));
    }
    let batches: Vec<Tensor> = (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(|c| x.select_rows(c))
        .collect();
    let mut total = 0.0;
    for _ in 0..repeats {
        let start = Instant::now();
        for xb in &batches {
            let tape = Tape::new();
            let q = model.encode_mixture(&tape, tape.constant(xb.clone()), model.order())?;
            std::hint::black_box(q.log_alphas().value());
        }
        total += start.elapsed().as_secs_f64() * 1e3 / batches.len() as f64;
    }
    Ok(total / repeats as f64)
}
