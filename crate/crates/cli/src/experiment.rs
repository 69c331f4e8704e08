use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pcp_core::backbones::{Backbone, BridgeBackbone, GmmBackbone, KnnResampler};
use pcp_core::baseline::{BoxKind, BoxPredictor, IntervalBox};
use pcp_core::eval::{coverage_report, evaluate_sets, REPORT_HEADER};
use pcp_core::geometry::{self, Measure};
use pcp_core::predict::{hdpcp_calibrate, pcp_calibrate};
use pcp_core::rng;
use pcp_core::synth::{generate, truth_backbone};
use pcp_core::{BallUnionSet, CoverageReport, Fold, LabeledDataset, LabeledPoint, PcpError, Result, WscConfig};

use crate::config::{BackboneConfig, ExperimentConfig, Method};
use crate::plot::{self, PlotOptions};

/// A predictive set as written to `sets/*.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SavedSet {
    Balls(BallUnionSet),
    Box(IntervalBox),
}

impl SavedSet {
    pub fn is_unbounded(&self) -> bool {
        match self {
            SavedSet::Balls(b) => b.radius().is_infinite(),
            SavedSet::Box(b) => b.unbounded,
        }
    }

    /// Disjoint intervals of a scalar set; `None` for the whole line.
    pub fn intervals(&self) -> Result<Option<Vec<(f64, f64)>>> {
        if self.is_unbounded() {
            return Ok(None);
        }
        match self {
            SavedSet::Balls(b) => geometry::merged_intervals(b).map(Some),
            SavedSet::Box(b) if b.lo.len() == 1 => Ok(Some(vec![(b.lo[0], b.hi[0])])),
            SavedSet::Box(b) => Err(PcpError::Dimension { expected: 1, got: b.lo.len() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub covered: bool,
    pub measure: Measure,
    pub set: SavedSet,
}

/// All test-point sets of one method in one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetsFile {
    pub method: Method,
    pub repetition: usize,
    pub p: usize,
    pub d: usize,
    pub points: Vec<SetRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub method: Method,
    /// Ball radius or box margin; `None` when the set is the whole space.
    pub threshold: Option<f64>,
    pub beta: Option<f64>,
    pub report: CoverageReport,
    pub sets: Option<SetsFile>,
}

pub const AGGREGATE_FIELDS: [&str; 4] = ["marginal_coverage", "conditional_coverage", "mean_set_size", "set_size_stderr"];

/// Mean and standard error over repetitions of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub repetitions: usize,
    pub mean: [f64; 4],
    pub stderr: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub results: Vec<RepetitionResult>,
    pub aggregate: Vec<AggregateRow>,
}

/// Fitted once per repetition, or one model shared by all of them.
pub enum BackboneSource {
    PerRepetition(BackboneConfig),
    Shared(Arc<dyn Backbone>),
}

pub fn repetition_seed(seed: u64, repetition: usize) -> u64 {
    rng::mix(seed, repetition as u64)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let data = match (&cfg.data.synth, &cfg.data.csv) {
        (Some(spec), _) => generate(spec)?,
        (None, Some(path)) => LabeledDataset::read_csv_path(path)?,
        (None, None) => return Err(PcpError::Config("no data source".into())),
    };
    match &cfg.data.targets {
        Some(t) => data.select_targets(t),
        None => Ok(data),
    }
}

fn fit_backbone(kind: &BackboneConfig, ds: &LabeledDataset, seed: u64) -> Result<Arc<dyn Backbone>> {
    match kind {
        BackboneConfig::Gmm(opts) => {
            let mut opts = opts.clone();
            opts.em.seed = rng::mix(seed, opts.em.seed);
            Ok(Arc::new(GmmBackbone::fit(&ds.fold(Fold::Train), &ds.fold(Fold::Val), &opts)?))
        }
        BackboneConfig::Knn(opts) => Ok(Arc::new(KnnResampler::new(ds.fold(Fold::Train), opts)?)),
        BackboneConfig::Truth | BackboneConfig::Bridge { .. } => {
            Err(PcpError::Config("this backbone is not fitted per repetition".into()))
        }
    }
}

/// Loads the data, builds the backbone and runs every repetition. A
/// bridge child is started once and shut down afterwards.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    match &cfg.backbone {
        BackboneConfig::Truth => {
            let spec = cfg.data.synth.as_ref().expect("validated");
            if cfg.data.targets.is_some() {
                return Err(PcpError::Config("the truth backbone does not support target selection".into()));
            }
            let bb: Arc<dyn Backbone> = Arc::new(truth_backbone(spec)?);
            run_on(cfg, &data, &BackboneSource::Shared(bb))
        }
        BackboneConfig::Bridge { command } => {
            let bridge = Arc::new(BridgeBackbone::spawn(command)?);
            let out = run_on(cfg, &data, &BackboneSource::Shared(bridge.clone()));
            let closed = bridge.close();
            let out = out?;
            closed?;
            Ok(out)
        }
        other => run_on(cfg, &data, &BackboneSource::PerRepetition(other.clone())),
    }
}

/// Runs all repetitions on `data` in parallel; results come back in
/// repetition order and any failure aborts the run.
pub fn run_on(cfg: &ExperimentConfig, data: &LabeledDataset, source: &BackboneSource) -> Result<RunOutput> {
    cfg.validate()?;
    let per_rep = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| run_repetition(cfg, data, source, r))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<RepetitionResult> = per_rep.into_iter().flatten().collect();
    let aggregate = aggregate(&cfg.method, &results);
    Ok(RunOutput { config: cfg.clone(), results, aggregate })
}

fn run_repetition(cfg: &ExperimentConfig, data: &LabeledDataset, source: &BackboneSource, r: usize) -> Result<Vec<RepetitionResult>> {
    let seed = repetition_seed(cfg.seed, r);
    let ds = data.clone().split(&cfg.split, seed)?;
    let backbone = match source {
        BackboneSource::Shared(b) => Arc::clone(b),
        BackboneSource::PerRepetition(kind) => fit_backbone(kind, &ds, seed)?,
    };
    let wsc = WscConfig { seed: rng::mix(seed, cfg.wsc.seed), ..cfg.wsc.clone() };
    let test = ds.fold(Fold::Test);
    cfg.method
        .iter()
        .map(|&method| run_method(cfg, &ds, &backbone, &test, &wsc, method, r, seed))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    cfg: &ExperimentConfig,
    ds: &LabeledDataset,
    backbone: &Arc<dyn Backbone>,
    test: &[LabeledPoint],
    wsc: &WscConfig,
    method: Method,
    repetition: usize,
    seed: u64,
) -> Result<RepetitionResult> {
    let (_, d) = ds.dims();
    let pcp = cfg.pcp.resolve(method, d, seed)?;
    let xs: Vec<&[f64]> = test.iter().map(LabeledPoint::x).collect();

    let (sets, flags, measures, threshold, beta) = match method {
        Method::Pcp | Method::Hdpcp => {
            let pred = if method == Method::Pcp {
                pcp_calibrate(Arc::clone(backbone), ds, &pcp)?
            } else {
                hdpcp_calibrate(Arc::clone(backbone), ds, &pcp)?
            };
            let balls = pred.predict_all(&xs)?;
            let (flags, measures) = evaluate_sets(test, &balls, &cfg.measure, seed)?;
            let sets: Vec<SavedSet> = balls.into_iter().map(SavedSet::Balls).collect();
            (sets, flags, measures, pred.radius().value(), pred.selected_beta())
        }
        Method::NaiveInterval | Method::BonferroniNaive => {
            let kind = if method == Method::NaiveInterval { BoxKind::Naive } else { BoxKind::Bonferroni };
            let pred = BoxPredictor::calibrate(backbone.as_ref(), &ds.fold(Fold::Cal), &pcp, kind)?;
            let boxes = test
                .par_iter()
                .enumerate()
                .map(|(i, pt)| pred.predict(backbone.as_ref(), pt.x(), i))
                .collect::<Result<Vec<_>>>()?;
            let flags: Vec<bool> = boxes.iter().zip(test).map(|(b, pt)| b.contains(pt.y())).collect();
            let measures = boxes
                .iter()
                .map(|b| b.measure().map_or(Measure::Infinite, Measure::Finite))
                .collect::<Vec<_>>();
            let sets = boxes.into_iter().map(SavedSet::Box).collect();
            (sets, flags, measures, pred.margin(), None)
        }
    };
    let report = coverage_report(&xs, &flags, &measures, wsc)?;
    let sets = cfg.save_sets.then(|| SetsFile {
        method,
        repetition,
        p: ds.dims().0,
        d,
        points: test
            .iter()
            .zip(sets)
            .zip(flags.iter().zip(&measures))
            .map(|((pt, set), (&covered, &measure))| SetRecord {
                x: pt.x().to_vec(),
                y: pt.y().to_vec(),
                covered,
                measure,
                set,
            })
            .collect(),
    });
    Ok(RepetitionResult { repetition, method, threshold, beta, report, sets })
}

/// Mean and standard error (sample standard deviation over `√n`; 0 for one value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn aggregate_fields(r: &CoverageReport) -> [f64; 4] {
    [r.marginal_coverage, r.conditional_coverage, r.mean_set_size, r.set_size_stderr]
}

pub fn aggregate(methods: &[Method], results: &[RepetitionResult]) -> Vec<AggregateRow> {
    methods
        .iter()
        .map(|&method| {
            let rows: Vec<[f64; 4]> = results
                .iter()
                .filter(|r| r.method == method)
                .map(|r| aggregate_fields(&r.report))
                .collect();
            let mut mean = [0.0; 4];
            let mut stderr = [0.0; 4];
            for j in 0..4 {
                let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                (mean[j], stderr[j]) = mean_stderr(&col);
            }
            AggregateRow { method, repetitions: rows.len(), mean, stderr }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>, none: &str) -> String {
    v.map_or_else(|| none.to_owned(), |v| v.to_string())
}

pub fn reports_csv(results: &[RepetitionResult]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["repetition", "method", "threshold", "beta"];
    header.extend(REPORT_HEADER);
    wtr.write_record(&header)?;
    for r in results {
        let mut row = vec![
            r.repetition.to_string(),
            r.method.to_string(),
            fmt_opt(r.threshold, "inf"),
            fmt_opt(r.beta, ""),
        ];
        row.extend(r.report.csv_fields());
        wtr.write_record(&row)?;
    }
    wtr.into_inner().map_err(|e| PcpError::Io(e.into_error()))
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_owned(), "repetitions".to_owned()];
    for f in AGGREGATE_FIELDS {
        header.push(format!("{f}_mean"));
        header.push(format!("{f}_stderr"));
    }
    wtr.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.method.to_string(), row.repetitions.to_string()];
        for j in 0..4 {
            rec.push(row.mean[j].to_string());
            rec.push(row.stderr[j].to_string());
        }
        wtr.write_record(&rec)?;
    }
    wtr.into_inner().map_err(|e| PcpError::Io(e.into_error()))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| PcpError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sets_file_name(method: Method, repetition: usize) -> String {
    format!("{method}_rep{repetition}.json")
}

/// Writes the run directory: config echo, result tables, per-point sets
/// and plots of the first repetition when the targets are 1- or 2-D.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: &[u8]| -> Result<()> {
        write_atomic(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put(dir.join("config_echo.json"), out.config.to_json().as_bytes())?;
    put(dir.join("reports.csv"), &reports_csv(&out.results)?)?;
    put(dir.join("aggregate.csv"), &aggregate_csv(&out.aggregate)?)?;
    if out.config.save_sets {
        fs::create_dir_all(dir.join("sets"))?;
        fs::create_dir_all(dir.join("plots"))?;
        for r in &out.results {
            let Some(sets) = &r.sets else { continue };
            let json = serde_json::to_vec(sets).map_err(|e| PcpError::Data(e.to_string()))?;
            put(dir.join("sets").join(sets_file_name(r.method, r.repetition)), &json)?;
            if r.repetition == 0 && sets.d <= 2 && !sets.points.is_empty() {
                let svg = plot::plot_sets(sets, &PlotOptions::default())?;
                put(dir.join("plots").join(format!("{}_rep0.svg", r.method)), svg.as_bytes())?;
            }
        }
    }
    Ok(written)
}

/// [`run_experiment`] followed by [`write_outputs`] into the configured directory.
pub fn run_and_write(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let out = run_experiment(cfg)?;
    write_outputs(&out, &cfg.output_dir)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, PcpSection};
    use pcp_core::backbones::PointMass;
    use pcp_core::{Family, MeasureEstimator, SplitFractions, SynthSpec};

    fn config(method: Vec<Method>, reps: usize) -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig { synth: Some(SynthSpec::new(Family::TwoModes, 400, 3)), csv: None, targets: None },
            split: SplitFractions::default(),
            backbone: BackboneConfig::default(),
            pcp: PcpSection::default(),
            method,
            repetitions: reps,
            seed: 11,
            wsc: WscConfig::default(),
            measure: MeasureEstimator::Auto,
            output_dir: PathBuf::from("unused"),
            save_sets: true,
        }
    }

    fn line_data(n: usize) -> LabeledDataset {
        let pts = (0..n)
            .map(|i| {
                let x = i as f64 / n as f64;
                LabeledPoint::new(vec![x], vec![3.0 * x - 1.0]).unwrap()
            })
            .collect();
        LabeledDataset::new(pts).unwrap()
    }

    #[test]
    fn point_mass_backbone_is_exact() {
        let data = line_data(200);
        for alpha in [0.05, 0.1, 0.5] {
            let mut cfg = config(vec![Method::Pcp, Method::NaiveInterval], 2);
            cfg.pcp.alpha = alpha;
            let bb: Arc<dyn Backbone> = Arc::new(PointMass::new(1, 1, |x| vec![3.0 * x[0] - 1.0]));
            let out = run_on(&cfg, &data, &BackboneSource::Shared(bb)).unwrap();
            assert_eq!(out.results.len(), 4);
            for r in &out.results {
                assert_eq!(r.report.marginal_coverage, 1.0);
                assert_eq!(r.report.mean_set_size, 0.0);
                assert_eq!(r.threshold, Some(0.0));
            }
        }
    }

    #[test]
    fn aggregate_matches_recomputation() {
        let cfg = config(vec![Method::Pcp, Method::Hdpcp], 3);
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.results.len(), 6);
        assert_eq!(out.results.iter().map(|r| r.repetition).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
        for row in &out.aggregate {
            let sizes: Vec<f64> = out.results.iter().filter(|r| r.method == row.method).map(|r| r.report.mean_set_size).collect();
            assert_eq!(sizes.len(), 3);
            let mean = sizes.iter().sum::<f64>() / 3.0;
            let sd = (sizes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
            assert!((row.mean[2] - mean).abs() < 1e-12);
            assert!((row.stderr[2] - sd / 3f64.sqrt()).abs() < 1e-12);
        }
        let hd = out.results.iter().find(|r| r.method == Method::Hdpcp).unwrap();
        assert!(hd.beta.is_some());
        assert!(out.results.iter().find(|r| r.method == Method::Pcp).unwrap().beta.is_none());
    }

    #[test]
    fn mean_stderr_examples() {
        assert_eq!(mean_stderr(&[2.0]), (2.0, 0.0));
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, over n = 4
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn reports_csv_layout() {
        let cfg = config(vec![Method::Pcp], 1);
        let data = line_data(100);
        let bb: Arc<dyn Backbone> = Arc::new(PointMass::new(1, 1, |x| vec![3.0 * x[0] - 1.0]));
        let out = run_on(&cfg, &data, &BackboneSource::Shared(bb)).unwrap();
        let text = String::from_utf8(reports_csv(&out.results).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "repetition,method,threshold,beta,marginal_coverage,conditional_coverage,mean_set_size,set_size_stderr,n_test,n_infinite"
        );
        assert!(lines.next().unwrap().starts_with("0,pcp,0,,1,1,0,0,20,0"));
    }

    #[test]
    fn infinite_threshold_is_reported_as_inf() {
        // 4 calibration points cannot support α = 0.1 with the inflated rank.
        let mut cfg = config(vec![Method::Pcp], 1);
        cfg.split = SplitFractions { train: 0.0, val: 0.0, cal: 0.2, test: 0.8 };
        cfg.pcp.quantile_mode = Some(pcp_core::QuantileMode::Inflated);
        let data = line_data(20);
        let bb: Arc<dyn Backbone> = Arc::new(PointMass::new(1, 1, |_| vec![0.0]));
        let out = run_on(&cfg, &data, &BackboneSource::Shared(bb)).unwrap();
        let r = &out.results[0];
        assert_eq!(r.threshold, None);
        assert_eq!(r.report.n_infinite, 16);
        assert!(String::from_utf8(reports_csv(&out.results).unwrap()).unwrap().contains("0,pcp,inf,"));
        let rec = &r.sets.as_ref().unwrap().points[0];
        assert!(rec.set.is_unbounded());
        assert_eq!(rec.set.intervals().unwrap(), None);
    }

    #[test]
    fn saved_sets_round_trip() {
        let cfg = config(vec![Method::Pcp, Method::BonferroniNaive], 1);
        let out = run_experiment(&cfg).unwrap();
        for r in &out.results {
            let sets = r.sets.as_ref().unwrap();
            let back: SetsFile = serde_json::from_slice(&serde_json::to_vec(sets).unwrap()).unwrap();
            assert_eq!(&back, sets);
            assert_eq!(back.points.len(), r.report.n_test);
        }
    }

    #[test]
    fn truth_backbone_rejects_target_selection() {
        let mut cfg = config(vec![Method::Pcp], 1);
        cfg.backbone = BackboneConfig::Truth;
        cfg.data.targets = Some(vec![0]);
        assert!(matches!(run_experiment(&cfg), Err(PcpError::Config(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_atomic(&path, b"1").unwrap();
        write_atomic(&path, b"2").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"2");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
