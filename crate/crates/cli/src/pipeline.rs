//! Staged pipeline over a run directory.
//!
//! Run directory layout:
//!
//! ```text
//! config.json            resolved config
//! run.json               code version and seeds
//! pretrained.snap        trained model
//! offline.snap           model after the offline phase
//! remembrance.json       pool rows of the offline and online remembrance sets
//! clusters.json
//! condensed.{bin,json}
//! split.json  reduced.json  eta.json
//! models/<M>.snap        unlearned model per method
//! timing/<M>.json        wall-clock unlearning time per method
//! reports/<M>.json       full report per method, including UT
//! metrics.json           timing-free metrics of every method
//! rbe.json  rbe.csv      relative best error table
//! logs/*.jsonl           phase logs and the data-lineage log
//! plots/*.png + *.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use unforge::applications::{
    between_within_ratio, class_means, condensed_model_unlearn, distance_to_class_means, image_grid,
    invert_unlearned, mia_defense, CondensedModel, CondensedModelData, CondensedModelReport, DefenseData,
    DefenseReport,
};
use unforge::baselines::{retrain_to_accuracy, unlearn_baseline, Method};
use unforge::clustering::{cluster_per_class, ClusterIndex};
use unforge::collect::{collect_reduced_retain, eta_analytic, eta_monte_carlo, EtaEstimate, ReducedRetainSet};
use unforge::condense::{condense_fdm_model, condense_inversion, CondenseMethod, CondensedSet};
use unforge::data::{
    load_dataset_with, split_forget_retain, synthetic_gaussians, DatasetBundle, DatasetName, ForgetMode, ForgetSpec,
    LoadOptions, SplitView,
};
use unforge::metrics::{
    accuracy, build_report, capped, overfitting_metrics, rbe, restrict_to_classes, ForgetKind,
    Histogram, OmStats, RbeRow, RbeTable, ReportData, ReportOptions, UnlearnReport,
};
use unforge::modular::{
    intermediate_gradient_profile, offline_phase, online_phase, write_log, ModularSchedule,
    RemembranceSet,
};
use unforge::nnkit::{build_model, train_segments, CrossEntropy, Snapshot};
use unforge::{ArchId, Error, PartitionedModel, Samples, SegmentMask};

use crate::config::{ExperimentConfig, RunMethod};
use crate::error::{CliError, StageExt};
use crate::plot;

const ETA_TRIALS: usize = 200;

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> unforge::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> unforge::Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn missing(path: &Path, producer: &str) -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("missing artifact {}; run `unforge {producer}` first", path.display()),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub code_version: String,
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemembranceRecord {
    pub m: usize,
    pub offline_classes: Vec<usize>,
    pub offline_pool_rows: Vec<usize>,
    pub online_classes: Vec<usize>,
    pub online_pool_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub method: String,
    pub ut_seconds: f64,
    /// Epochs of matched-accuracy retraining and whether the target was met.
    pub matched_epochs: Option<usize>,
    pub matched_target_reached: Option<bool>,
}

/// Timing-free part of an [`UnlearnReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub ra: f64,
    pub fa: f64,
    pub mia: f64,
    pub test_accuracy: Option<f64>,
    pub um: Option<f64>,
    pub um_note: Option<String>,
    pub om: Option<OmStats>,
    pub eta: Option<EtaEstimate>,
}

impl From<&UnlearnReport> for MethodMetrics {
    fn from(r: &UnlearnReport) -> Self {
        Self {
            ra: r.ra,
            fa: r.fa,
            mia: r.mia,
            test_accuracy: r.test_accuracy,
            um: r.um,
            um_note: r.um_note.clone(),
            om: r.om.clone(),
            eta: r.eta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub stage: String,
    /// Data streams read: `train`, `retain`, `forget`, `reduced`,
    /// `remembrance`, `eval`, `population`.
    pub reads: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CollectOutcome {
    pub split: SplitView,
    pub reduced: ReducedRetainSet,
    pub eta: EtaEstimate,
}

/// A run directory bound to its config and dataset.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub data: DatasetBundle,
}

impl Run {
    /// Validate the config, load the dataset and write `config.json`.
    pub fn open(cfg: ExperimentConfig) -> Result<Self, CliError> {
        let dir = cfg.run_dir();
        Self::open_at(cfg, dir)
    }

    pub fn open_at(cfg: ExperimentConfig, dir: PathBuf) -> Result<Self, CliError> {
        cfg.validate()?;
        let opts = LoadOptions {
            synthetic: cfg.dataset.synthetic,
            split_seed: cfg.dataset.split_seed,
        };
        let data = load_dataset_with(cfg.dataset.name.as_str(), &cfg.cache_dir(), &opts).stage("data")?;
        make_layout(&dir).stage("data")?;
        let run = Self { cfg, dir, data };
        write_json(&run.path("config.json"), &run.cfg).stage("data")?;
        let info = RunInfo {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            schema_version: run.cfg.schema_version,
            seed: run.cfg.seed,
            dataset: run.cfg.dataset.name.as_str().to_string(),
        };
        write_json(&run.path("run.json"), &info).stage("data")?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn lineage(&self, stage: &str, reads: &[&str]) -> unforge::Result<()> {
        use std::io::Write;
        let p = self.path("logs/lineage.jsonl");
        fs::create_dir_all(p.parent().expect("logs dir"))?;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(p)?;
        let rec = LineageRecord {
            stage: stage.to_string(),
            reads: reads.iter().map(|s| s.to_string()).collect(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        Ok(())
    }

    pub fn read_lineage(&self) -> unforge::Result<Vec<LineageRecord>> {
        let text = fs::read_to_string(self.path("logs/lineage.jsonl"))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    fn image_shape(&self) -> Vec<usize> {
        self.data.train.image_shape()
    }

    fn fresh_model(&self) -> unforge::Result<PartitionedModel> {
        Ok(build_model(
            &self.cfg.arch,
            &self.image_shape(),
            self.data.train.class_count,
            self.cfg.cuts,
            self.cfg.seed,
        )?)
    }

    /// Rebuild the architecture and load `rel` into it.
    pub fn load_model(&self, rel: &str, producer: &str) -> unforge::Result<PartitionedModel> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(missing(&p, producer));
        }
        let snap = Snapshot::load(&p)?;
        let mut m = self.fresh_model()?;
        snap.restore(&mut m)?;
        Ok(m)
    }

    fn load<T: DeserializeOwned>(&self, rel: &str, producer: &str) -> unforge::Result<T> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(missing(&p, producer));
        }
        read_json(&p)
    }

    fn forgotten_classes(&self) -> Vec<usize> {
        match self.cfg.forget.mode {
            ForgetMode::WholeClass { class_id } => vec![class_id],
            ForgetMode::RandomFraction { .. } => Vec::new(),
        }
    }

    fn remembrance(&self, exclude: &[usize]) -> unforge::Result<RemembranceSet> {
        RemembranceSet::draw(&self.data.remembrance_pool, self.cfg.remembrance_m, exclude, self.cfg.seed)
    }

    /// Train from scratch, then run the offline phase.
    pub fn pretrain(&self) -> Result<PartitionedModel, CliError> {
        const S: &str = "pretrain";
        let train = self.data.train.samples();
        let mut model = self.fresh_model().stage(S)?;
        let log = train_segments(&mut model, &train, &self.cfg.pretrain, SegmentMask::ALL, &CrossEntropy).stage(S)?;
        let snap = Snapshot::take(&model);
        snap.save(self.path("pretrained.snap")).stage(S)?;
        write_json(&self.path("logs/pretrain.json"), &log).stage(S)?;
        let offline = self.remembrance(&[]).stage(S)?;
        let online = self.remembrance(&self.forgotten_classes()).stage(S)?;
        write_json(
            &self.path("remembrance.json"),
            &RemembranceRecord {
                m: self.cfg.remembrance_m,
                offline_classes: offline.classes.clone(),
                offline_pool_rows: offline.pool_indices.clone(),
                online_classes: online.classes,
                online_pool_rows: online.pool_indices,
            },
        )
        .stage(S)?;
        let records = offline_phase(&mut model, &snap, &train, &offline, &self.cfg.schedule).stage(S)?;
        write_log(self.path("logs/offline.jsonl"), &records).stage(S)?;
        Snapshot::take(&model).save(self.path("offline.snap")).stage(S)?;
        self.lineage(S, &["train", "remembrance"]).stage(S)?;
        Ok(model)
    }

    pub fn cluster(&self) -> Result<ClusterIndex, CliError> {
        const S: &str = "cluster";
        let mut model = self.load_model("offline.snap", "pretrain").stage(S)?;
        let idx = cluster_per_class(&self.data.train, &mut model, self.cfg.k, self.cfg.seed).stage(S)?;
        idx.save(self.path("clusters.json")).stage(S)?;
        self.lineage(S, &["train"]).stage(S)?;
        Ok(idx)
    }

    pub fn condense(&self) -> Result<CondensedSet, CliError> {
        const S: &str = "condense";
        let mut model = self.load_model("offline.snap", "pretrain").stage(S)?;
        let clusters: ClusterIndex = self.load("clusters.json", "cluster").stage(S)?;
        let set = match self.cfg.condenser.method {
            CondenseMethod::Fdm => {
                condense_fdm_model(&clusters, &self.data.train, &mut model, &self.cfg.condenser.fdm)
                    .stage(S)?
                    .set
            }
            CondenseMethod::Inversion => {
                condense_inversion(&clusters, &self.data.train, &mut model, &self.cfg.condenser.inversion)
                    .stage(S)?
                    .set
            }
        };
        set.save(self.path("condensed")).stage(S)?;
        self.lineage(S, &["train"]).stage(S)?;
        Ok(set)
    }

    fn condensed(&self) -> unforge::Result<CondensedSet> {
        let p = self.path("condensed.json");
        if !p.exists() {
            return Err(missing(&p, "condense"));
        }
        CondensedSet::load(self.path("condensed"))
    }

    /// Apply the forget request: split, reduced retain set and η.
    pub fn collect(&self) -> Result<CollectOutcome, CliError> {
        const S: &str = "collect";
        let split = split_forget_retain(&self.data.train, &self.cfg.forget).stage(S)?;
        let out = self.collect_for(&split.forget).stage(S)?;
        write_json(&self.path("split.json"), &out.split).stage(S)?;
        write_json(&self.path("reduced.json"), &out.reduced).stage(S)?;
        write_json(&self.path("eta.json"), &out.eta).stage(S)?;
        self.lineage(S, &["train"]).stage(S)?;
        Ok(out)
    }

    fn collect_for(&self, forget: &[usize]) -> unforge::Result<CollectOutcome> {
        let split = SplitView::from_forget(self.data.train.len(), forget)?;
        let clusters: ClusterIndex = self.load("clusters.json", "cluster")?;
        let cond = self.condensed()?;
        let reduced = collect_reduced_retain(&clusters, &cond, &split.forget, &self.data.train)?;
        let eta = eta_estimate(
            self.data.train.class_count,
            self.cfg.k,
            self.data.train.len(),
            split.forget.len(),
            reduced.n_r(),
            self.cfg.seed,
        )?;
        Ok(CollectOutcome { split, reduced, eta })
    }

    fn online_remembrance(&self) -> unforge::Result<RemembranceSet> {
        let rec: RemembranceRecord = self.load("remembrance.json", "pretrain")?;
        Ok(RemembranceSet {
            m: rec.m,
            samples: self.data.remembrance_pool.subset(&rec.online_pool_rows),
            classes: rec.online_classes,
            pool_indices: rec.online_pool_rows,
        })
    }

    fn schedule_for(&self, eta: &EtaEstimate) -> unforge::Result<ModularSchedule> {
        if self.cfg.eta_schedule {
            self.cfg.schedule.for_eta(eta.empirical.unwrap_or(eta.mc_mean))
        } else {
            Ok(self.cfg.schedule)
        }
    }

    /// Online phase of the modular scheme on the reduced retain set.
    pub fn unlearn(&self) -> Result<Timing, CliError> {
        const S: &str = "unlearn";
        let mut model = self.load_model("offline.snap", "pretrain").stage(S)?;
        let reduced: ReducedRetainSet = self.load("reduced.json", "collect").stage(S)?;
        let eta: EtaEstimate = self.load("eta.json", "collect").stage(S)?;
        let cond = self.condensed().stage(S)?;
        let samples = reduced.samples(&self.data.train, &cond).stage(S)?;
        let rem = self.online_remembrance().stage(S)?;
        let sched = self.schedule_for(&eta).stage(S)?;
        let out = online_phase(&mut model, &samples, &rem, &sched).stage(S)?;
        write_log(self.path("logs/online.jsonl"), &out.records).stage(S)?;
        Snapshot::take(&model).save(self.path("models/MU.snap")).stage(S)?;
        let t = Timing {
            method: "MU".into(),
            ut_seconds: out.ut_seconds,
            matched_epochs: None,
            matched_target_reached: None,
        };
        write_json(&self.path("timing/MU.json"), &t).stage(S)?;
        self.lineage(S, &["reduced", "remembrance"]).stage(S)?;
        Ok(t)
    }

    fn split(&self) -> unforge::Result<SplitView> {
        self.load("split.json", "collect")
    }

    /// One baseline starting from the pretrained model.
    pub fn baseline(&self, method: Method) -> Result<Timing, CliError> {
        const S: &str = "baseline";
        let model = self.load_model("pretrained.snap", "pretrain").stage(S)?;
        let split = self.split().stage(S)?;
        let bc = self.cfg.baseline_config(method);
        let mu_path = self.path("models/MU.snap");
        let (out, matched) = if method == Method::R && self.cfg.r_matched_ra && mu_path.exists() {
            let retain = self.data.train.subset(&split.retain);
            let mut mu = self.load_model("models/MU.snap", "unlearn").stage(S)?;
            let target = accuracy(&mut mu, &retain).stage(S)?;
            let (out, reached) = retrain_to_accuracy(&bc, &model, &retain, target).stage(S)?;
            let epochs = out.log.epochs.len();
            (out, Some((epochs, reached)))
        } else {
            (unlearn_baseline(&bc, &model, &self.data.train, &split).stage(S)?, None)
        };
        let name = method.as_str();
        Snapshot::take(&out.model)
            .save(self.path(&format!("models/{name}.snap")))
            .stage(S)?;
        write_json(&self.path(&format!("logs/baseline-{name}.json")), &out.log).stage(S)?;
        let t = Timing {
            method: name.into(),
            ut_seconds: out.ut_seconds,
            matched_epochs: matched.map(|m| m.0),
            matched_target_reached: matched.map(|m| m.1),
        };
        write_json(&self.path(&format!("timing/{name}.json")), &t).stage(S)?;
        let reads: &[&str] = if method == Method::Bd { &["retain", "forget"] } else { &["retain"] };
        self.lineage(S, reads).stage(S)?;
        Ok(t)
    }

    fn mia_reference(&self) -> Samples {
        let eval = self.data.eval.samples();
        let classes = self.forgotten_classes();
        if classes.is_empty() {
            eval
        } else {
            restrict_to_classes(&eval, &classes)
        }
    }

    fn report_options(&self) -> ReportOptions {
        ReportOptions {
            unlearning_metric: self.cfg.report.unlearning_metric,
            overfitting_metric: self.cfg.report.overfitting_metric,
            gradient_cap: self.cfg.report.gradient_cap,
        }
    }

    /// Measure every method that has a model in the run directory.
    pub fn evaluate(&self) -> Result<Vec<UnlearnReport>, CliError> {
        const S: &str = "evaluate";
        let split = self.split().stage(S)?;
        let retain = self.data.train.subset(&split.retain);
        let forget = self.data.train.subset(&split.forget);
        let eval = self.data.eval.samples();
        let reference = self.mia_reference();
        let data = ReportData {
            retain: &retain,
            forget: &forget,
            mia_reference: &reference,
            eval: Some(&eval),
        };
        let opts = self.report_options();
        let mut reports = Vec::new();
        let mut metrics = BTreeMap::new();
        let mut om_series: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        for m in &self.cfg.methods {
            let name = m.as_str();
            let rel = format!("models/{name}.snap");
            if !self.path(&rel).exists() {
                continue;
            }
            let mut model = self.load_model(&rel, "unlearn").stage(S)?;
            let timing: Timing = self.load(&format!("timing/{name}.json"), "unlearn").stage(S)?;
            let mut r = build_report(name, &mut model, &data, timing.ut_seconds, &opts).stage(S)?;
            if *m == RunMethod::Mu {
                r.eta = Some(self.load("eta.json", "collect").stage(S)?);
            }
            if opts.overfitting_metric {
                let of = overfitting_metrics(&mut model, &capped(&forget, opts.gradient_cap)).stage(S)?;
                let or = overfitting_metrics(&mut model, &capped(&retain, opts.gradient_cap)).stage(S)?;
                om_series.push((name.to_string(), of, or));
            }
            write_json(&self.path(&format!("reports/{name}.json")), &r).stage(S)?;
            metrics.insert(name.to_string(), MethodMetrics::from(&r));
            reports.push(r);
        }
        if reports.is_empty() {
            return Err(CliError::Stage {
                stage: S,
                source: Error::Empty("unlearned models; run `unforge unlearn` or `unforge baseline`".into()),
            });
        }
        write_json(&self.path("metrics.json"), &metrics).stage(S)?;
        let bins = self.cfg.report.histogram_bins;
        for (name, of, or) in &om_series {
            let hi = of.iter().chain(or).fold(0.0f64, |a, &b| a.max(b));
            let hi = if hi > 0.0 { hi } else { 1.0 };
            let hf = Histogram::new(of, bins, 0.0, hi);
            let hr = Histogram::new(or, bins, 0.0, hi);
            fs::create_dir_all(self.path("plots")).stage(S)?;
            plot::histograms(&self.path(&format!("plots/om-{name}.png")), &[("forget", &hf), ("retain", &hr)])
                .stage(S)?;
        }
        if self.path("models/MU.snap").exists() && self.path("models/CF.snap").exists() {
            let mut mu = self.load_model("models/MU.snap", "unlearn").stage(S)?;
            let mut cf = self.load_model("models/CF.snap", "baseline").stage(S)?;
            let g = intermediate_gradient_profile(&mut mu, &mut cf, &capped(&retain, opts.gradient_cap), bins)
                .stage(S)?;
            write_json(&self.path("intermediate_gradients.json"), &g).stage(S)?;
            fs::create_dir_all(self.path("plots")).stage(S)?;
            plot::histograms(
                &self.path("plots/intermediate-gradients.png"),
                &[("MU", &g.mu), ("CF", &g.cf)],
            )
            .stage(S)?;
        }
        self.lineage(S, &["retain", "forget", "eval"]).stage(S)?;
        Ok(reports)
    }

    /// Relative best error over the evaluated methods.
    pub fn report(&self) -> Result<Option<RbeTable>, CliError> {
        const S: &str = "report";
        let mut reports: Vec<UnlearnReport> = Vec::new();
        for m in &self.cfg.methods {
            let p = self.path(&format!("reports/{}.json", m.as_str()));
            if p.exists() {
                reports.push(read_json(&p).stage(S)?);
            }
        }
        if reports.is_empty() {
            return Err(CliError::Stage {
                stage: S,
                source: missing(&self.path("reports"), "evaluate"),
            });
        }
        let rows: Vec<Vec<String>> = reports
            .iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    r.ra.to_string(),
                    r.fa.to_string(),
                    r.mia.to_string(),
                    r.ut_seconds.to_string(),
                    r.test_accuracy.map_or(String::new(), |v| v.to_string()),
                    r.um.map_or(String::new(), |v| v.to_string()),
                ]
            })
            .collect();
        plot::write_csv(&self.path("reports.csv"), &["method", "ra", "fa", "mia", "ut_seconds", "test_accuracy", "um"], &rows)
            .stage(S)?;
        let kind = if self.cfg.forget.is_class() { ForgetKind::Class } else { ForgetKind::Random };
        let has_r = reports.iter().any(|r| r.method == "R");
        if reports.len() < 2 || (kind == ForgetKind::Random && !has_r) {
            return Ok(None);
        }
        let arch = self.cfg.arch.arch.as_str();
        let rbe_rows: Vec<RbeRow> = reports
            .iter()
            .map(|r| RbeRow {
                method: r.method.clone(),
                arch: arch.to_string(),
                ra: r.ra,
                fa: r.fa,
                mia: r.mia,
                ut: r.ut_seconds,
            })
            .collect();
        let table = rbe(&rbe_rows, kind, "R", self.cfg.report.rbe_normalization).stage(S)?;
        write_json(&self.path("rbe.json"), &table).stage(S)?;
        let rows: Vec<Vec<String>> = table.ranking().into_iter().map(|(m, v)| vec![m, v.to_string()]).collect();
        plot::write_csv(&self.path("rbe.csv"), &["method", "rbe"], &rows).stage(S)?;
        Ok(Some(table))
    }

    /// Otsu-partitioned online phase as a membership-inference defense,
    /// applied to the pretrained model.
    pub fn defend(&self) -> Result<DefenseReport, CliError> {
        const S: &str = "defend";
        let mut model = self.load_model("pretrained.snap", "pretrain").stage(S)?;
        let train = self.data.train.samples();
        let (eval, population) = self.defense_population().stage(S)?;
        let rem = self.remembrance(&[]).stage(S)?;
        let data = DefenseData {
            train: &train,
            eval: &eval,
            population: &population,
            remembrance: &rem,
        };
        let report = mia_defense(&mut model, &data, &self.cfg.defense_config()).stage(S)?;
        write_json(&self.path("defense.json"), &report).stage(S)?;
        if let Some(p) = &report.partition {
            fs::create_dir_all(self.path("plots")).stage(S)?;
            let h = Histogram::of(&p.om_values, self.cfg.report.histogram_bins);
            plot::histograms(&self.path("plots/defense-om.png"), &[("train", &h)]).stage(S)?;
        }
        Snapshot::take(&model).save(self.path("models/defended.snap")).stage(S)?;
        self.lineage(S, &["train", "eval", "population", "remembrance"]).stage(S)?;
        Ok(report)
    }

    /// Evaluation split and a disjoint shadow population. The toy set draws
    /// a fresh population; other datasets split the evaluation split in half.
    fn defense_population(&self) -> unforge::Result<(Samples, Samples)> {
        let eval = self.data.eval.samples();
        if self.cfg.dataset.name == DatasetName::SyntheticGaussians {
            let mut c = self.cfg.dataset.synthetic;
            c.seed = c.seed.wrapping_add(self.cfg.defense.population_seed_offset);
            c.per_class = self.cfg.defense.population_per_class;
            let pop = synthetic_gaussians(&c)?.0.dataset.samples();
            return Ok((eval, pop));
        }
        let n = eval.len();
        let first: Vec<usize> = (0..n / 2).collect();
        let second: Vec<usize> = (n / 2..n).collect();
        Ok((eval.select(&first), eval.select(&second)))
    }

    /// Inversion audit of an unlearned model with `k` pseudo-clusters per
    /// class.
    pub fn invert(&self, method: RunMethod, k: usize) -> Result<InversionSummary, CliError> {
        const S: &str = "invert";
        let name = method.as_str();
        let mut model = self.load_model(&format!("models/{name}.snap"), "unlearn").stage(S)?;
        let audit = invert_unlearned(&mut model, k, &self.cfg.condenser.inversion).stage(S)?;
        let means = class_means(&self.data.eval.samples(), self.data.train.class_count);
        let summary = InversionSummary {
            method: name.to_string(),
            k,
            distance_to_class_means: distance_to_class_means(&audit, &means),
            between_within_ratio: between_within_ratio(&audit),
            epoch_loss: audit.epoch_loss.clone(),
        };
        write_json(&self.path(&format!("invert/{name}.json")), &summary).stage(S)?;
        let grid = image_grid(&audit.images, k).stage(S)?;
        plot::image(&self.path(&format!("invert/{name}.png")), &grid, 8).stage(S)?;
        self.lineage(S, &["eval"]).stage(S)?;
        Ok(summary)
    }

    /// Modular unlearning of an autoencoder-bodied model followed by a head
    /// swap trained on remembrance samples only.
    pub fn condense_model(&self) -> Result<CondensedModelReport, CliError> {
        const S: &str = "condense-model";
        if self.cfg.arch.arch != ArchId::AutoencoderAe {
            return Err(CliError::Config("condense-model needs the autoencoder_ae architecture".into()));
        }
        let model = self.load_model("pretrained.snap", "pretrain").stage(S)?;
        let pretrained = Snapshot::take(&model);
        let reduced: ReducedRetainSet = self.load("reduced.json", "collect").stage(S)?;
        let cond = self.condensed().stage(S)?;
        let reduced = reduced.samples(&self.data.train, &cond).stage(S)?;
        let split = self.split().stage(S)?;
        let train = self.data.train.samples();
        let retain = self.data.train.subset(&split.retain);
        let forget = self.data.train.subset(&split.forget);
        let eval = self.data.eval.samples();
        let reference = self.mia_reference();
        let mut cm = CondensedModel::new(model, self.online_remembrance().stage(S)?).stage(S)?;
        let data = CondensedModelData {
            train: &train,
            retain: &retain,
            forget: &forget,
            reduced: &reduced,
            eval: &eval,
            mia_reference: &reference,
        };
        let cms = &self.cfg.condensed_model;
        let report =
            condensed_model_unlearn(&mut cm, &pretrained, &data, &self.cfg.schedule, &cms.head, &cms.head_train)
                .stage(S)?;
        write_json(&self.path("condensed_model.json"), &report).stage(S)?;
        write_json(&self.path("condensed_model_manifest.json"), &cm.manifest).stage(S)?;
        Snapshot::take(&cm.model)
            .save(self.path("models/condensed-model.snap"))
            .stage(S)?;
        self.lineage(S, &["train", "reduced", "remembrance", "retain", "forget", "eval"])
            .stage(S)?;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub method: String,
    pub k: usize,
    pub distance_to_class_means: Vec<Option<f64>>,
    pub between_within_ratio: Option<f64>,
    pub epoch_loss: Vec<f64>,
}

/// η of an actual collection plus its Monte-Carlo and analytic estimates.
/// The Monte-Carlo part needs `N_D` divisible by `c·K`; otherwise it
/// reports the empirical value with zero trials.
pub fn eta_estimate(c: usize, k: usize, n_d: usize, n_f: usize, n_r: usize, seed: u64) -> unforge::Result<EtaEstimate> {
    let n_ret = n_d - n_f;
    let empirical = if n_ret == 0 { 0.0 } else { n_r as f64 / n_ret as f64 };
    let mut est = match eta_monte_carlo(c, k, n_d, n_f, ETA_TRIALS, seed) {
        Ok(e) => e,
        Err(Error::InvalidArgument(_)) => EtaEstimate {
            empirical: None,
            analytic_main: if n_ret > 0 { eta_analytic(c, k, n_d, n_ret)? } else { 0.0 },
            mc_mean: empirical,
            mc_std: 0.0,
            trials: 0,
            threshold: unforge::collect::min_retain_threshold(c, k, n_d).ok(),
        },
        Err(e) => return Err(e),
    };
    est.empirical = Some(empirical);
    Ok(est)
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub dir: PathBuf,
    pub reports: Vec<UnlearnReport>,
    pub rbe: Option<RbeTable>,
}

fn make_layout(dir: &Path) -> std::io::Result<()> {
    for sub in ["logs", "models", "timing", "reports", "plots"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    Ok(())
}

/// Every stage in order: pretrain, cluster, condense, collect, MU, the
/// baselines, evaluate and report.
pub fn run_pipeline(cfg: ExperimentConfig) -> Result<PipelineSummary, CliError> {
    let run = Run::open(cfg)?;
    run_stages(&run, true)
}

fn run_stages(run: &Run, pretrain: bool) -> Result<PipelineSummary, CliError> {
    if pretrain {
        run.pretrain()?;
    }
    run.cluster()?;
    run.condense()?;
    run.collect()?;
    if run.cfg.has(RunMethod::Mu) {
        run.unlearn()?;
    }
    for m in &run.cfg.methods {
        if let RunMethod::Baseline(b) = m {
            run.baseline(*b)?;
        }
    }
    let reports = run.evaluate()?;
    let rbe = run.report()?;
    Ok(PipelineSummary {
        dir: run.dir.clone(),
        reports,
        rbe,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub cumulative_forget: usize,
    pub n_r: usize,
    pub eta: EtaEstimate,
    pub steps: usize,
    pub ra: f64,
    pub fa: f64,
    /// Test accuracy.
    pub tra: f64,
    pub ut_seconds: f64,
    pub r_ut_seconds: f64,
    pub r_ra: f64,
}

/// Repeated random deletion: each cycle forgets another `fraction` of the
/// training set, rebuilds the reduced retain set against the cumulative
/// forget set and continues the online phase from the previous cycle's
/// model. Retraining from scratch on the same retain set is timed alongside.
pub fn run_cycles(cfg: ExperimentConfig, cycles: usize, fraction: f64) -> Result<Vec<CycleReport>, CliError> {
    const S: &str = "cycles";
    if cycles == 0 || !(fraction > 0.0) || cycles as f64 * fraction >= 1.0 {
        return Err(CliError::Config(format!(
            "need cycles ≥ 1 and 0 < cycles·fraction < 1, got {cycles}·{fraction}"
        )));
    }
    let mut cfg = cfg;
    cfg.forget = ForgetSpec::random(fraction, cfg.forget.seed);
    let run = Run::open(cfg)?;
    run.pretrain()?;
    run.cluster()?;
    run.condense()?;
    let mut model = run.load_model("offline.snap", "pretrain").stage(S)?;
    let pretrained = run.load_model("pretrained.snap", "pretrain").stage(S)?;
    let rem = run.online_remembrance().stage(S)?;
    let cond = run.condensed().stage(S)?;
    let eval = run.data.eval.samples();
    let mut out = Vec::with_capacity(cycles);
    for c in 1..=cycles {
        // one seeded shuffle, so each cycle's forget set extends the last
        let spec = ForgetSpec::random(c as f64 * fraction, run.cfg.forget.seed);
        let forget = split_forget_retain(&run.data.train, &spec).stage(S)?.forget;
        let col = run.collect_for(&forget).stage(S)?;
        if col.split.retain.is_empty() {
            return Err(CliError::Stage {
                stage: S,
                source: Error::Empty("retain set".into()),
            });
        }
        let samples = col.reduced.samples(&run.data.train, &cond).stage(S)?;
        let sched = run.schedule_for(&col.eta).stage(S)?;
        let online = online_phase(&mut model, &samples, &rem, &sched).stage(S)?;
        write_log(run.path(&format!("logs/cycle-{c}.jsonl")), &online.records).stage(S)?;
        let retain = run.data.train.subset(&col.split.retain);
        let forget_s = run.data.train.subset(&col.split.forget);
        let ra = accuracy(&mut model, &retain).stage(S)?;
        let bc = run.cfg.baseline_config(Method::R);
        let r = if run.cfg.r_matched_ra {
            retrain_to_accuracy(&bc, &pretrained, &retain, ra).stage(S)?.0
        } else {
            unlearn_baseline(&bc, &pretrained, &run.data.train, &col.split).stage(S)?
        };
        let mut r_model = r.model;
        out.push(CycleReport {
            cycle: c,
            cumulative_forget: col.split.forget.len(),
            n_r: col.reduced.n_r(),
            eta: col.eta,
            steps: sched.online.steps,
            ra,
            fa: accuracy(&mut model, &forget_s).stage(S)?,
            tra: accuracy(&mut model, &eval).stage(S)?,
            ut_seconds: online.ut_seconds,
            r_ut_seconds: r.ut_seconds,
            r_ra: accuracy(&mut r_model, &retain).stage(S)?,
        });
        run.lineage(&format!("cycle-{c}"), &["reduced", "remembrance", "retain"]).stage(S)?;
    }
    write_json(&run.path("cycles.json"), &out).stage(S)?;
    fs::create_dir_all(run.path("plots")).stage(S)?;
    let x: Vec<f64> = out.iter().map(|c| c.cycle as f64).collect();
    plot::lines(
        &run.path("plots/cycles-ut.png"),
        "cycle",
        &x,
        &[
            ("MU", out.iter().map(|c| c.ut_seconds).collect()),
            ("R", out.iter().map(|c| c.r_ut_seconds).collect()),
        ],
    )
    .stage(S)?;
    plot::lines(
        &run.path("plots/cycles-eta.png"),
        "cycle",
        &x,
        &[("eta", out.iter().map(|c| c.eta.empirical.unwrap_or(0.0)).collect())],
    )
    .stage(S)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub eta: f64,
    pub steps: usize,
    pub ra: f64,
    pub fa: f64,
    pub mia: f64,
    pub test_accuracy: Option<f64>,
    pub ut_seconds: f64,
}

/// MU at each K from one shared pretrained model, with the online step
/// count taken from η. Each K runs in its own `k<K>` subdirectory.
pub fn sweep_k(cfg: ExperimentConfig, ks: &[usize]) -> Result<Vec<SweepPoint>, CliError> {
    const S: &str = "sweep-k";
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Config("k list must be non-empty with every K ≥ 1".into()));
    }
    let base = Run::open(cfg.clone())?;
    let min_class = base.data.train.class_counts().into_iter().min().unwrap_or(0);
    if let Some(k) = ks.iter().find(|&&k| k > min_class) {
        return Err(CliError::Config(format!("K={k} exceeds the smallest class ({min_class})")));
    }
    base.pretrain()?;
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c = cfg.clone();
        c.k = k;
        c.eta_schedule = true;
        c.methods = vec![RunMethod::Mu];
        let dir = base.dir.join(format!("k{k}"));
        make_layout(&dir).stage(S)?;
        for f in ["pretrained.snap", "offline.snap", "remembrance.json"] {
            fs::copy(base.path(f), dir.join(f)).stage(S)?;
        }
        let run = Run {
            cfg: c,
            dir,
            data: base.data.clone(),
        };
        write_json(&run.path("config.json"), &run.cfg).stage(S)?;
        let summary = run_stages(&run, false)?;
        let r = &summary.reports[0];
        let eta = r.eta.as_ref().and_then(|e| e.empirical).unwrap_or(0.0);
        points.push(SweepPoint {
            k,
            eta,
            steps: run.cfg.schedule.for_eta(eta).stage(S)?.online.steps,
            ra: r.ra,
            fa: r.fa,
            mia: r.mia,
            test_accuracy: r.test_accuracy,
            ut_seconds: r.ut_seconds,
        });
    }
    write_json(&base.path("sweep.json"), &points).stage(S)?;
    fs::create_dir_all(base.path("plots")).stage(S)?;
    let x: Vec<f64> = points.iter().map(|p| p.k as f64).collect();
    plot::lines(
        &base.path("plots/sweep-ut.png"),
        "k",
        &x,
        &[("ut_seconds", points.iter().map(|p| p.ut_seconds).collect())],
    )
    .stage(S)?;
    plot::lines(
        &base.path("plots/sweep-ra.png"),
        "k",
        &x,
        &[
            ("ra", points.iter().map(|p| p.ra).collect()),
            ("fa", points.iter().map(|p| p.fa).collect()),
        ],
    )
    .stage(S)?;
    Ok(points)
}
