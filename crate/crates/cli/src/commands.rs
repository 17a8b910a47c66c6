use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fldplus::distortions::{distort_sweep, DistortionKind};
use fldplus::experiments::monotonicity::{monotonicity, MonotonicityTable};
use fldplus::experiments::plot::{LinePlot, Series};
use fldplus::experiments::synthetic::{synthetic_study, SyntheticSpec, SyntheticTable};
use fldplus::features::{list_images, load_image, AdapterSpec, Backbone, FeaturePipeline, FeatureSet, PoolKind};
use fldplus::flow::{
    checkpoint_precision, load_flow, save_flow, train_flow, FlowConfig, FlowModel, SplineShape, TrainConfig, TrainLog,
};
use fldplus::metric::{
    curve_to_csv, fld_plus_from_means, frechet_distance, gaussian_moments, log_likelihoods, sample_efficiency_curve,
    summarize_ll, CurveRow, LogLikelihoodSummary, MetricReport,
};
use fldplus::nn::Activation;
use fldplus::provenance::{sha256_file, ArtifactProvenance};
use fldplus::{Precision, Real};
use serde::Serialize;

use crate::*;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Distort(a) => distort(a),
        Command::Monotonicity(a) => monotonicity_cmd(a),
        Command::Synthetic(a) => synthetic(a),
        Command::Curve(a) => curve(a),
    }
}

impl From<Pool> for PoolKind {
    fn from(p: Pool) -> Self {
        match p {
            Pool::Avg => PoolKind::Avg,
            Pool::Max => PoolKind::Max,
        }
    }
}

impl From<Kind> for DistortionKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::GaussianNoise => DistortionKind::GaussianNoise,
            Kind::GaussianBlur => DistortionKind::GaussianBlur,
            Kind::SaltPepper => DistortionKind::SaltPepper,
        }
    }
}

enum AnyFlow {
    F32(FlowModel<f32>),
    F64(FlowModel<f64>),
}

macro_rules! with_flow {
    ($flow:expr, $m:ident => $body:expr) => {
        match $flow {
            AnyFlow::F32($m) => $body,
            AnyFlow::F64($m) => $body,
        }
    };
}

fn load_any_flow(path: &Path) -> Result<AnyFlow> {
    Ok(match checkpoint_precision(path)? {
        Precision::F32 => AnyFlow::F32(load_flow(path)?),
        Precision::F64 => AnyFlow::F64(load_flow(path)?),
    })
}

impl AnyFlow {
    fn config(&self) -> &FlowConfig {
        with_flow!(self, m => m.config())
    }

    fn summarize(&self, set: &FeatureSet) -> Result<LogLikelihoodSummary> {
        Ok(with_flow!(self, m => summarize_ll(m, set))?)
    }

    fn log_likelihoods(&self, set: &FeatureSet) -> Result<Vec<f64>> {
        Ok(with_flow!(self, m => log_likelihoods(m, set))?)
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist or is not a file", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} {} does not exist or is not a directory", path.display());
    }
    Ok(())
}

fn write_out(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// A cache file, or a CSV of feature rows when the magic does not match.
fn load_features(path: &Path) -> Result<FeatureSet> {
    require_file(path, "feature file")?;
    match FeatureSet::load(path) {
        Err(fldplus::Error::BadMagic { .. }) => Ok(FeatureSet::load_csv(path)?),
        other => Ok(other?),
    }
}

#[derive(Serialize)]
struct ExtractConfig<'a> {
    adapter: &'a AdapterSpec,
    pool: PoolKind,
}

fn extract(a: ExtractArgs) -> Result<()> {
    let start = Instant::now();
    let spec = AdapterSpec::parse(&a.adapter)?;
    let pool = PoolKind::from(a.pool);
    let seed = match &spec {
        AdapterSpec::Toy(t) | AdapterSpec::ToyMobile(t) => t.seed,
        _ => 0,
    };
    let mut prov = ArtifactProvenance::new("extract", &ExtractConfig { adapter: &spec, pool }, seed)?;
    let mut set = match &spec {
        AdapterSpec::Precomputed { path } => {
            let set = load_features(path)?;
            prov.input_file("features", path)?;
            set
        }
        _ => {
            require_dir(&a.images, "image directory")?;
            let pipeline = FeaturePipeline::new(Backbone::from_spec(&spec)?, pool)?;
            let set = pipeline.extract_dir(&a.images)?;
            prov.input_hash("images", set.provenance.image_list_sha256.clone());
            set
        }
    };
    set.provenance.artifact = Some(prov);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    set.save(&a.out)?;
    println!("count {} dim {} elapsed {:.2}s", set.count(), set.dim(), start.elapsed().as_secs_f64());
    Ok(())
}

#[derive(Serialize)]
struct TrainSidecar<'a> {
    artifact: ArtifactProvenance,
    flow: &'a FlowConfig,
    train: &'a TrainConfig,
    precision: &'static str,
    best_epoch: usize,
    best_val_nll: f64,
    stopped_early: bool,
    diverged: &'a Option<String>,
    train_count: usize,
    val_count: usize,
}

fn train_log_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,train_nll,val_nll\n");
    for r in &log.records {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_nll, r.val_nll));
    }
    s
}

fn train_in<T: Real>(flow: FlowConfig, set: &FeatureSet, tc: &TrainConfig, out: &Path) -> Result<TrainLog> {
    let outcome = train_flow::<T>(flow, &set.rows::<T>(), set.count(), tc)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_flow(&outcome.model, out)?;
    Ok(outcome.log)
}

fn flow_config(dim: usize, f: &FlowArgs, seed: u64) -> FlowConfig {
    FlowConfig {
        dim,
        coupling_layers: f.layers,
        spline: SplineShape {
            bins: f.bins,
            tail_bound: f.tail_bound,
            ..SplineShape::default()
        },
        hidden: f.hidden.clone(),
        activation: match f.activation {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        },
        seed,
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let set = load_features(&a.real)?;
    let flow = flow_config(set.dim(), &a.flow, a.seed);
    let tc = TrainConfig {
        epochs: a.flow.epochs,
        batch_size: a.flow.batch,
        lr: a.flow.lr,
        seed: a.seed,
        validation_fraction: a.flow.val_fraction,
        patience: a.flow.patience,
        ..TrainConfig::default()
    };
    let (log, precision) = match a.precision {
        PrecisionArg::F32 => (train_in::<f32>(flow.clone(), &set, &tc, &a.out)?, Precision::F32),
        PrecisionArg::F64 => (train_in::<f64>(flow.clone(), &set, &tc, &a.out)?, Precision::F64),
    };
    let mut artifact = ArtifactProvenance::new("train", &(&flow, &tc, precision.name()), a.seed)?;
    artifact.input_file("real", &a.real)?;
    let sidecar = TrainSidecar {
        artifact,
        flow: &flow,
        train: &tc,
        precision: precision.name(),
        best_epoch: log.best_epoch,
        best_val_nll: log.best_val_nll,
        stopped_early: log.stopped_early,
        diverged: &log.diverged,
        train_count: log.train_count,
        val_count: log.val_count,
    };
    write_out(&with_suffix(&a.out, ".json"), pretty(&sidecar)?)?;
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
    write_out(&log_path, train_log_csv(&log))?;
    if let Some(reason) = &log.diverged {
        log::warn!("training stopped early: {reason}");
    }
    println!("best epoch {} val nll {:.4}", log.best_epoch, log.best_val_nll);
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    require_file(&a.model, "checkpoint")?;
    let model = load_any_flow(&a.model)?;
    let real = load_features(&a.real)?;
    let gen = load_features(&a.gen)?;
    let rs = model.summarize(&real).context("scoring the real set")?;
    let gs = model.summarize(&gen).context("scoring the generated set")?;
    let fd = if a.fd {
        Some(frechet_distance(&gaussian_moments(&real)?, &gaussian_moments(&gen)?)?)
    } else {
        None
    };
    let model_id = sha256_file(&a.model)?;
    let seed = model.config().seed;
    let mut report = MetricReport::new(rs, gs, fd, model_id.clone(), real.provenance.clone(), gen.provenance.clone(), seed)?;
    let mut artifact = ArtifactProvenance::new("score", &a.fd, seed)?;
    artifact.input_hash("model", model_id);
    artifact.input_file("real", &a.real)?;
    artifact.input_file("gen", &a.gen)?;
    report.artifact = Some(artifact);
    if a.timestamp {
        let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH)?.as_secs();
        report.timestamp = Some(format!("unix:{secs}"));
    }
    let text = match a.format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv()?,
    };
    match &a.out {
        Some(path) => write_out(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct DistortConfig<'a> {
    kind: DistortionKind,
    levels: &'a [f64],
}

fn distort(a: DistortArgs) -> Result<()> {
    require_dir(&a.images, "image directory")?;
    let kind = DistortionKind::from(a.kind);
    let levels = a.levels.unwrap_or_else(|| kind.default_levels());
    let manifest = distort_sweep(&a.images, kind, &levels, a.seed, &a.out)?;
    let mut artifact = ArtifactProvenance::new("distort", &DistortConfig { kind, levels: &levels }, a.seed)?;
    for path in list_images(&a.images)? {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        artifact.input_file(&name, &path)?;
    }
    write_out(&a.out.join("provenance.json"), pretty(&artifact)?)?;
    let files = manifest.outputs.first().map(|l| l.files.len()).unwrap_or(0);
    println!("{} levels × {} files, {} failures", manifest.outputs.len(), files, manifest.failures());
    Ok(())
}

#[derive(Serialize)]
struct MonotonicityConfig<'a> {
    adapter: &'a AdapterSpec,
    pool: PoolKind,
    kind: DistortionKind,
    levels: &'a [f64],
    seeds: &'a [u64],
}

#[derive(Serialize)]
struct MonotonicityOutput<'a> {
    artifact: ArtifactProvenance,
    strictly_increasing: bool,
    table: &'a MonotonicityTable,
}

fn monotonicity_cmd(a: MonotonicityArgs) -> Result<()> {
    require_file(&a.model, "checkpoint")?;
    require_dir(&a.images, "image directory")?;
    let kind = DistortionKind::from(a.kind);
    let levels = a.levels.clone().unwrap_or_else(|| kind.default_levels());
    for &l in &levels {
        kind.validate_level(l)?;
    }
    let spec = AdapterSpec::parse(&a.adapter)?;
    let pipeline = FeaturePipeline::new(Backbone::from_spec(&spec)?, a.pool.into())?;
    let model = load_any_flow(&a.model)?;
    if pipeline.dim() != model.config().dim {
        bail!("adapter produces {}-dimensional features, the flow expects {}", pipeline.dim(), model.config().dim);
    }
    let real = load_features(&a.real)?;
    if !real.provenance.backbone.is_empty()
        && (real.provenance.backbone != pipeline.backbone.id() || real.provenance.pool != pipeline.pool.name())
    {
        log::warn!(
            "real features came from {} / {}, distorted images use {} / {}",
            real.provenance.backbone,
            real.provenance.pool,
            pipeline.backbone.id(),
            pipeline.pool.name()
        );
    }
    let real_mean = model.summarize(&real)?.mean;
    let images = list_images(&a.images)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, load_image(&p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = with_flow!(&model, m => monotonicity(m, &pipeline, real_mean, &images, kind, &levels, &a.seeds))?;

    let config = MonotonicityConfig {
        adapter: &spec,
        pool: pipeline.pool,
        kind,
        levels: &levels,
        seeds: &a.seeds,
    };
    let mut artifact = ArtifactProvenance::new("monotonicity", &config, a.seeds[0])?;
    artifact.input_file("model", &a.model)?;
    artifact.input_file("real", &a.real)?;
    for path in list_images(&a.images)? {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        artifact.input_file(&format!("images/{name}"), &path)?;
    }
    write_out(&with_suffix(&a.out, ".csv"), table.to_csv()?)?;
    let plot = LinePlot {
        title: format!("FLD+ under {}", kind.name()),
        x_label: "level".into(),
        y_label: "FLD+".into(),
        series: vec![Series {
            name: format!("{} ({})", pipeline.backbone.id(), pipeline.pool.name()),
            points: table.rows.iter().map(|r| (r.level, r.fld_plus)).collect(),
            errors: Some(table.rows.iter().map(|r| r.fld_plus_std).collect()),
        }],
    };
    write_out(&with_suffix(&a.out, ".svg"), plot.to_svg())?;
    let output = MonotonicityOutput {
        artifact,
        strictly_increasing: table.strictly_increasing(),
        table: &table,
    };
    write_out(&with_suffix(&a.out, ".json"), pretty(&output)?)?;
    for r in &table.rows {
        println!("{}\t{:.6}\t±{:.6}", r.level, r.fld_plus, r.fld_plus_std);
    }
    println!("strictly increasing: {}", table.strictly_increasing());
    Ok(())
}

#[derive(Serialize)]
struct SyntheticOutput<'a> {
    artifact: ArtifactProvenance,
    flow: &'a FlowConfig,
    train: &'a TrainConfig,
    tables: &'a [SyntheticTable],
}

fn synthetic(a: SyntheticArgs) -> Result<()> {
    if a.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let spec = SyntheticSpec {
        separation: a.separation,
        levels: a.levels.clone(),
        samples: a.samples,
    };
    spec.validate()?;
    let flow = FlowConfig {
        coupling_layers: a.layers,
        spline: SplineShape {
            bins: a.bins,
            ..SplineShape::default()
        },
        hidden: a.hidden.clone(),
        ..FlowConfig::new(2)
    };
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
        ..TrainConfig::default()
    };
    let tables = a
        .seeds
        .iter()
        .map(|&s| synthetic_study(&spec, &flow, &tc, s))
        .collect::<fldplus::Result<Vec<_>>>()?;

    let mut csv = String::from("seed,level,analytic_fd,sample_fd,fld_plus,gen_mean_ll\n");
    for t in &tables {
        for r in &t.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.seed, r.level, r.analytic_fd, r.sample_fd, r.fld_plus, r.gen_mean_ll
            ));
        }
    }
    write_out(&with_suffix(&a.out, ".csv"), csv)?;
    let plot = LinePlot {
        title: "Moment-matched mixtures".into(),
        x_label: "rotation (degrees)".into(),
        y_label: "FLD+".into(),
        series: tables
            .iter()
            .map(|t| Series {
                name: format!("seed {}", t.seed),
                points: t.rows.iter().map(|r| (r.level, r.fld_plus)).collect(),
                errors: None,
            })
            .collect(),
    };
    write_out(&with_suffix(&a.out, ".svg"), plot.to_svg())?;
    let artifact = ArtifactProvenance::new("synthetic", &(&spec, &flow, &tc, &a.seeds), a.seeds[0])?;
    let output = SyntheticOutput {
        artifact,
        flow: &flow,
        train: &tc,
        tables: &tables,
    };
    write_out(&with_suffix(&a.out, ".json"), pretty(&output)?)?;
    for t in &tables {
        let scores: Vec<String> = t.rows.iter().map(|r| format!("{:.4}", r.fld_plus)).collect();
        println!("seed {}: FLD+ {} increasing {}", t.seed, scores.join(" "), t.strictly_increasing());
    }
    Ok(())
}

#[derive(Serialize)]
struct CurveOutput<'a> {
    artifact: ArtifactProvenance,
    real_mean_ll: f64,
    full_count: usize,
    full_fld_plus: f64,
    rows: &'a [CurveRow],
}

#[derive(Serialize)]
struct CurveConfig<'a> {
    sizes: &'a [usize],
    repeats: usize,
}

fn curve(a: CurveArgs) -> Result<()> {
    require_file(&a.model, "checkpoint")?;
    let model = load_any_flow(&a.model)?;
    let real = load_features(&a.real)?;
    let gen = load_features(&a.gen)?;
    let real_mean = model.summarize(&real)?.mean;
    let ll = model.log_likelihoods(&gen)?;
    let full = fld_plus_from_means(real_mean, ll.iter().sum::<f64>() / ll.len().max(1) as f64)?;
    let rows = sample_efficiency_curve(real_mean, &ll, &a.sizes, a.repeats, a.seed)?;

    write_out(&with_suffix(&a.out, ".csv"), curve_to_csv(&rows)?)?;
    let plot = LinePlot {
        title: "FLD+ against sample size".into(),
        x_label: "subsample size".into(),
        y_label: "FLD+ (mean ± std)".into(),
        series: vec![Series {
            name: format!("{} repeats", a.repeats),
            points: rows.iter().map(|r| (r.size as f64, r.mean)).collect(),
            errors: Some(rows.iter().map(|r| r.std).collect()),
        }],
    };
    write_out(&with_suffix(&a.out, ".svg"), plot.to_svg())?;
    let mut artifact = ArtifactProvenance::new("curve", &CurveConfig { sizes: &a.sizes, repeats: a.repeats }, a.seed)?;
    artifact.input_file("model", &a.model)?;
    artifact.input_file("real", &a.real)?;
    artifact.input_file("gen", &a.gen)?;
    let output = CurveOutput {
        artifact,
        real_mean_ll: real_mean,
        full_count: ll.len(),
        full_fld_plus: full,
        rows: &rows,
    };
    write_out(&with_suffix(&a.out, ".json"), pretty(&output)?)?;
    for r in &rows {
        println!("{}\t{:.6}\t{:.6}", r.size, r.mean, r.std);
    }
    println!("full set ({}): {:.6}", ll.len(), full);
    Ok(())
}
