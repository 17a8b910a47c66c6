//! Serialized score reports. Field names are stable: JSON keys match the
//! struct fields and the CSV header is [`CSV_HEADER`].

use serde::{Deserialize, Serialize};

use super::{fld_plus, fld_plus_stderr, LogLikelihoodSummary};
use crate::error::{Error, Result};
use crate::features::Provenance;
use crate::provenance::ArtifactProvenance;

pub const CSV_HEADER: [&str; 21] = [
    "fld_plus",
    "fld_plus_stderr",
    "real_count",
    "real_mean",
    "real_stderr",
    "real_min",
    "real_max",
    "gen_count",
    "gen_mean",
    "gen_stderr",
    "gen_min",
    "gen_max",
    "fd_baseline",
    "model_id",
    "real_backbone",
    "real_pool",
    "real_image_list_sha256",
    "gen_image_list_sha256",
    "seed",
    "config_sha256",
    "timestamp",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tool_version: String,
    pub fld_plus: f64,
    /// `(stderr_gen / |real_mean|)·fld_plus`; not a resampling interval.
    pub fld_plus_stderr: f64,
    pub real_summary: LogLikelihoodSummary,
    pub gen_summary: LogLikelihoodSummary,
    pub fd_baseline: Option<f64>,
    /// sha256 of the checkpoint file.
    pub model_id: String,
    pub real_provenance: Provenance,
    pub gen_provenance: Provenance,
    /// Seed the model was trained with.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub artifact: Option<ArtifactProvenance>,
    /// Left empty unless requested, so reruns are byte-identical.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamp: Option<String>,
}

impl MetricReport {
    pub fn new(
        real: LogLikelihoodSummary,
        gen: LogLikelihoodSummary,
        fd_baseline: Option<f64>,
        model_id: String,
        real_provenance: Provenance,
        gen_provenance: Provenance,
        seed: u64,
    ) -> Result<Self> {
        let report = Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            fld_plus: fld_plus(&real, &gen)?,
            fld_plus_stderr: fld_plus_stderr(&real, &gen)?,
            real_summary: real,
            gen_summary: gen,
            fd_baseline,
            model_id,
            real_provenance,
            gen_provenance,
            seed,
            artifact: None,
            timestamp: None,
        };
        let values = [report.fld_plus, report.fld_plus_stderr, real.mean, real.stderr, gen.mean, gen.stderr];
        if values.iter().chain(fd_baseline.as_ref()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric report".into()));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn csv_row(&self) -> Vec<String> {
        let summary = |s: &LogLikelihoodSummary| {
            vec![
                s.count.to_string(),
                s.mean.to_string(),
                s.stderr.to_string(),
                s.min.to_string(),
                s.max.to_string(),
            ]
        };
        let mut row = vec![self.fld_plus.to_string(), self.fld_plus_stderr.to_string()];
        row.extend(summary(&self.real_summary));
        row.extend(summary(&self.gen_summary));
        row.push(self.fd_baseline.map(|v| v.to_string()).unwrap_or_default());
        row.push(self.model_id.clone());
        row.push(self.real_provenance.backbone.clone());
        row.push(self.real_provenance.pool.clone());
        row.push(self.real_provenance.image_list_sha256.clone());
        row.push(self.gen_provenance.image_list_sha256.clone());
        row.push(self.seed.to_string());
        row.push(self.artifact.as_ref().map(|a| a.config_sha256.clone()).unwrap_or_default());
        row.push(self.timestamp.clone().unwrap_or_default());
        row
    }

    /// Header plus one row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::InvalidParameter(format!("csv encoding: {e}"));
        w.write_record(CSV_HEADER).map_err(io)?;
        w.write_record(self.csv_row()).map_err(io)?;
        let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
