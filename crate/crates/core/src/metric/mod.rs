//! FLD+ from per-set log-likelihood summaries, the closed-form Fréchet
//! distance baseline and the sample-efficiency curve.

pub mod frechet;
pub mod report;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::flow::FlowModel;
use crate::real::Real;

pub use frechet::{frechet_distance, gaussian_moments, GaussianMoments};
pub use report::{MetricReport, CSV_HEADER};

/// Below this magnitude the real-set mean cannot serve as a divisor.
pub const MEAN_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihoodSummary {
    pub count: usize,
    pub mean: f64,
    /// Standard error of the mean, `s / √n` with the `n − 1` sample std.
    pub stderr: f64,
    pub min: f64,
    pub max: f64,
}

/// Summary of per-sample log-likelihoods, accumulated in index order.
pub fn summarize(values: &[f64]) -> Result<LogLikelihoodSummary> {
    if values.is_empty() {
        return Err(Error::InsufficientSamples("cannot summarize an empty set".into()));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSample { index });
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(LogLikelihoodSummary {
        count: n,
        // keep min ≤ mean ≤ max despite rounding in the sum
        mean: mean.clamp(min, max),
        stderr,
        min,
        max,
    })
}

/// Per-sample log-likelihoods of every row of `set` under `model`.
pub fn log_likelihoods<T: Real>(model: &FlowModel<T>, set: &FeatureSet) -> Result<Vec<f64>> {
    if set.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: set.dim(),
            context: "feature set vs flow",
        });
    }
    let rows = set.rows::<T>();
    match model.log_prob_rows(&rows, set.count()) {
        Ok(ll) => Ok(ll),
        Err(Error::NonFiniteLayer { .. }) => {
            // locate the first offending sample for the report
            let d = model.dim();
            for (index, row) in rows.chunks_exact(d).enumerate() {
                if !model.log_prob(row).map(f64::is_finite).unwrap_or(false) {
                    return Err(Error::NonFiniteSample { index });
                }
            }
            Err(Error::NonFinite("log-likelihood batch".into()))
        }
        Err(e) => Err(e),
    }
}

pub fn summarize_ll<T: Real>(model: &FlowModel<T>, set: &FeatureSet) -> Result<LogLikelihoodSummary> {
    if set.is_empty() {
        return Err(Error::InsufficientSamples("cannot score an empty feature set".into()));
    }
    summarize(&log_likelihoods(model, set)?)
}

fn check_real_mean(real_mean: f64) -> Result<()> {
    if !real_mean.is_finite() {
        return Err(Error::MetricUndefined(format!("real mean log-likelihood is {real_mean}")));
    }
    if real_mean.abs() < MEAN_GUARD {
        return Err(Error::MetricUndefined(format!(
            "real mean log-likelihood {real_mean:e} is too close to zero to divide by"
        )));
    }
    if real_mean > 0.0 {
        return Err(Error::MetricUndefined(format!(
            "real mean log-likelihood {real_mean} is positive; FLD+ assumes negative log-likelihoods, \
             with generated samples scoring lower (more negative) than real ones. \
             Rescale the features or use a different backbone"
        )));
    }
    Ok(())
}

/// `exp(gen_mean / real_mean)`.
pub fn fld_plus_from_means(real_mean: f64, gen_mean: f64) -> Result<f64> {
    check_real_mean(real_mean)?;
    if !gen_mean.is_finite() {
        return Err(Error::MetricUndefined(format!("generated mean log-likelihood is {gen_mean}")));
    }
    Ok((gen_mean / real_mean).exp())
}

pub fn fld_plus(real: &LogLikelihoodSummary, gen: &LogLikelihoodSummary) -> Result<f64> {
    fld_plus_from_means(real.mean, gen.mean)
}

/// `±(stderr_gen / |real_mean|)·FLD+`: the generated-set standard error
/// pushed through the exponential to first order.
pub fn fld_plus_stderr(real: &LogLikelihoodSummary, gen: &LogLikelihoodSummary) -> Result<f64> {
    Ok(gen.stderr / real.mean.abs() * fld_plus(real, gen)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub size: usize,
    pub repeats: usize,
    pub mean: f64,
    /// Sample std (`n − 1`) across repeats; 0 for one repeat.
    pub std: f64,
    /// Whether the repeats used disjoint subsamples.
    pub disjoint: bool,
}

/// FLD+ of `repeats` seeded subsamples per size, from precomputed
/// per-sample log-likelihoods of the generated set. Repeats use disjoint
/// blocks of one permutation whenever `size·repeats` fits.
pub fn sample_efficiency_curve(
    real_mean: f64,
    gen_ll: &[f64],
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    check_real_mean(real_mean)?;
    if repeats == 0 {
        return Err(Error::InvalidParameter("repeats must be positive".into()));
    }
    if let Some(index) = gen_ll.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSample { index });
    }
    let n = gen_ll.len();
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 {
            return Err(Error::InvalidParameter("subsample size 0".into()));
        }
        if size > n {
            return Err(Error::InsufficientSamples(format!("subsample size {size} exceeds {n} generated samples")));
        }
        let disjoint = size * repeats <= n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(size as u64);
        let mut order: Vec<usize> = (0..n).collect();
        let mut scores = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let pick: &[usize] = if disjoint {
                if r == 0 {
                    order.shuffle(&mut rng);
                }
                &order[r * size..(r + 1) * size]
            } else {
                let (head, _) = order.partial_shuffle(&mut rng, size);
                head
            };
            let mean = pick.iter().map(|&i| gen_ll[i]).sum::<f64>() / size as f64;
            scores.push(fld_plus_from_means(real_mean, mean)?);
        }
        let mean = scores.iter().sum::<f64>() / repeats as f64;
        let std = if repeats > 1 {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(CurveRow {
            size,
            repeats,
            mean,
            std,
            disjoint,
        });
    }
    Ok(rows)
}

/// `size,repeats,mean,std,disjoint` with a header row.
pub fn curve_to_csv(rows: &[CurveRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::InvalidParameter(format!("csv encoding: {e}"));
    w.write_record(["size", "repeats", "mean", "std", "disjoint"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.repeats.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.disjoint.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv encoding: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
