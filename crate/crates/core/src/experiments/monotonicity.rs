//! Distortion sweeps scored with a trained flow: one FLD+ per level and
//! seed, averaged over seeds.
//!
//! Distortions are applied to the decoded float images and fed straight
//! to the feature pipeline, without re-encoding to 8-bit PNG.

use log::info;
use serde::{Deserialize, Serialize};

use crate::distortions::{image_seed, DistortionKind, DistortionSpec};
use crate::error::{Error, Result};
use crate::features::{FeaturePipeline, ImageTensor};
use crate::flow::FlowModel;
use crate::metric::{fld_plus_from_means, summarize_ll};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityRow {
    pub level: f64,
    /// Mean over seeds.
    pub fld_plus: f64,
    /// Sample std over seeds; 0 for one seed.
    pub fld_plus_std: f64,
    pub per_seed: Vec<f64>,
    /// Mean generated log-likelihood, averaged over seeds.
    pub gen_mean_ll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityTable {
    pub kind: DistortionKind,
    pub seeds: Vec<u64>,
    pub real_mean_ll: f64,
    pub image_count: usize,
    pub rows: Vec<MonotonicityRow>,
}

impl MonotonicityTable {
    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.fld_plus).collect()
    }

    pub fn strictly_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].fld_plus > w[0].fld_plus)
    }

    /// Differences between consecutive levels.
    pub fn increments(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[1].fld_plus - w[0].fld_plus).collect()
    }

    pub fn mean_increment(&self) -> f64 {
        let inc = self.increments();
        if inc.is_empty() {
            0.0
        } else {
            inc.iter().sum::<f64>() / inc.len() as f64
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::InvalidParameter(format!("csv encoding: {e}"));
        let mut header = vec!["level".to_string(), "fld_plus".into(), "fld_plus_std".into(), "gen_mean_ll".into()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.level.to_string(), r.fld_plus.to_string(), r.fld_plus_std.to_string(), r.gen_mean_ll.to_string()];
            rec.extend(r.per_seed.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Whether `level` leaves every image unchanged, so one seed suffices.
pub fn is_identity(kind: DistortionKind, level: f64) -> bool {
    match kind {
        DistortionKind::GaussianNoise | DistortionKind::SaltPepper => level == 0.0,
        DistortionKind::GaussianBlur => level == 1.0,
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Scores `images` (named, so per-image seeds do not depend on order) at
/// every level and seed against `real_mean_ll`.
pub fn monotonicity<T: Real>(
    model: &FlowModel<T>,
    pipeline: &FeaturePipeline,
    real_mean_ll: f64,
    images: &[(String, ImageTensor)],
    kind: DistortionKind,
    levels: &[f64],
    seeds: &[u64],
) -> Result<MonotonicityTable> {
    if images.is_empty() {
        return Err(Error::InsufficientSamples("no images to distort".into()));
    }
    if levels.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidParameter("at least one level and one seed are required".into()));
    }
    for &l in levels {
        kind.validate_level(l)?;
    }
    fld_plus_from_means(real_mean_ll, real_mean_ll)?;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let identity = is_identity(kind, level);
        let mut lls = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            if identity && i > 0 {
                lls.push(lls[0]);
                continue;
            }
            let distorted: Vec<ImageTensor> = images
                .iter()
                .map(|(name, img)| DistortionSpec::new(kind, level, image_seed(seed, name))?.apply(img))
                .collect::<Result<_>>()?;
            let feats = pipeline.extract_images(&distorted)?;
            lls.push(summarize_ll(model, &feats)?.mean);
        }
        let per_seed: Vec<f64> = lls.iter().map(|&m| fld_plus_from_means(real_mean_ll, m)).collect::<Result<_>>()?;
        let row = MonotonicityRow {
            level,
            fld_plus: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
            fld_plus_std: std_dev(&per_seed),
            gen_mean_ll: lls.iter().sum::<f64>() / lls.len() as f64,
            per_seed,
        };
        info!("{} level {}: FLD+ {:.4}", kind.name(), level, row.fld_plus);
        rows.push(row);
    }
    Ok(MonotonicityTable {
        kind,
        seeds: seeds.to_vec(),
        real_mean_ll,
        image_count: images.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(scores: &[f64]) -> MonotonicityTable {
        MonotonicityTable {
            kind: DistortionKind::GaussianNoise,
            seeds: vec![0],
            real_mean_ll: -1.0,
            image_count: 1,
            rows: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| MonotonicityRow {
                    level: i as f64,
                    fld_plus: s,
                    fld_plus_std: 0.0,
                    per_seed: vec![s],
                    gen_mean_ll: -s.ln(),
                })
                .collect(),
        }
    }

    #[test]
    fn ordering_and_increments() {
        let t = table(&[2.7, 3.0, 3.5]);
        assert!(t.strictly_increasing());
        assert!((t.mean_increment() - 0.4).abs() < 1e-12);
        assert!(!table(&[2.7, 2.7]).strictly_increasing());
        assert_eq!(table(&[1.0]).mean_increment(), 0.0);
    }

    #[test]
    fn csv_layout() {
        let csv = table(&[2.7, 3.0]).to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "level,fld_plus,fld_plus_std,gen_mean_ll,seed_0");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn identity_levels() {
        assert!(is_identity(DistortionKind::GaussianBlur, 1.0));
        assert!(!is_identity(DistortionKind::GaussianBlur, 3.0));
        assert!(is_identity(DistortionKind::SaltPepper, 0.0));
        assert!(!is_identity(DistortionKind::GaussianNoise, 0.001));
    }
}
