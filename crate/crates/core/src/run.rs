//! Batch stages shared by the command-line tool: synth, ingest, features,
//! train, evaluate, explain and compare.
//!
//! Every stage reads and writes files under the configured directories. The
//! resolved configuration is snapshotted as `config.cfg` in the output
//! directory, and its SHA-256 (paths excluded) stamps every artifact: a
//! `# config_hash=...` first line in text files and a `config_hash` field in
//! JSON files. Artifacts stamped with another hash are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ExclusionAudit, HospitalLevel};
use crate::error::{Error, Result};
use crate::explain::{
    explain_instance, global_importance, local_report, Attribution, BackgroundMode, BackgroundSet, ClassifierModel,
    GlobalImportance, LocalReport, Method, OutputScale, DEFAULT_EXACT_LIMIT,
};
use crate::features::{
    build_feature_table, fit_scaler, read_feature_csv, scale_vector, write_feature_csv, ScalerParams,
    VisitFeatureVector, FEATURE_COUNT,
};
use crate::ingest::{load_dataset, write_file, DataPaths};
use crate::kv::KeyValues;
use crate::metrics::{comparison_table, evaluate as evaluate_metrics, MetricReport, Variant};
use crate::neuralnet::io::SavedModel;
use crate::neuralnet::{
    argmax, train_autoencoder, train_classifier, AeConfig, AeFeed, Autoencoder, Classifier, MlpConfig, TrainConfig,
};
use crate::pipeline::{make_kfolds, split_by_group, split_train_test, undersample_majority, SplitManifest, SplitSpec};
use crate::synthgen::{generate_cohort, write_cohort, CohortSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitBy {
    #[default]
    Visit,
    Patient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExplainMethod {
    Exact,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainSettings {
    pub method: ExplainMethod,
    pub permutations: usize,
    /// Background rows drawn from the balanced training pool.
    pub background: usize,
    pub background_mode: BackgroundMode,
    /// Test rows averaged into the global importance.
    pub rows: usize,
    pub exact_limit: usize,
    pub output: OutputScale,
    /// Test rows given a local report.
    pub local: usize,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        ExplainSettings {
            method: ExplainMethod::Sampled,
            permutations: 64,
            background: 100,
            background_mode: BackgroundMode::MeanVector,
            rows: 200,
            exact_limit: DEFAULT_EXACT_LIMIT,
            output: OutputScale::Probability,
            local: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub train_fraction: f64,
    pub folds: usize,
    pub split_by: SplitBy,
    pub clf_hidden: Vec<usize>,
    pub clf: TrainConfig,
    pub ae_encoder: Vec<usize>,
    pub ae: TrainConfig,
    pub ae_feed: AeFeed,
    pub explain: ExplainSettings,
    /// `synth.*` settings, passed to the cohort generator without the prefix.
    pub synth: KeyValues,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            seed: 0,
            train_fraction: 0.8,
            folds: 5,
            split_by: SplitBy::Visit,
            clf_hidden: vec![100, 100, 100],
            clf: TrainConfig::default(),
            ae_encoder: vec![500, 250, 100],
            ae: TrainConfig::default(),
            ae_feed: AeFeed::Latent,
            explain: ExplainSettings::default(),
            synth: KeyValues::default(),
        }
    }
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .ok()
        .filter(|v| !v.is_empty() && !v.contains(&0))
        .ok_or_else(|| {
            Error::Config(format!(
                "{key} must be a comma-separated list of positive widths, got {raw:?}"
            ))
        })
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_choice<T: Copy>(key: &str, raw: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == raw)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("{key} must be one of {names:?}, got {raw:?}"))
        })
}

fn choice_name<T: PartialEq>(value: T, options: &[(&'static str, T)]) -> &'static str {
    options
        .iter()
        .find(|(_, v)| *v == value)
        .map(|(n, _)| *n)
        .expect("every variant is listed")
}

const SPLIT_BY: &[(&str, SplitBy)] = &[("visit", SplitBy::Visit), ("patient", SplitBy::Patient)];
const FEEDS: &[(&str, AeFeed)] = &[("latent", AeFeed::Latent), ("reconstruction", AeFeed::Reconstruction)];
const METHODS: &[(&str, ExplainMethod)] = &[("exact", ExplainMethod::Exact), ("sampled", ExplainMethod::Sampled)];
const MODES: &[(&str, BackgroundMode)] = &[
    ("mean", BackgroundMode::MeanVector),
    ("sample", BackgroundMode::SampleSet),
];
const SCALES: &[(&str, OutputScale)] = &[("probability", OutputScale::Probability), ("logit", OutputScale::Logit)];

const PATH_KEYS: [&str; 2] = ["data_dir", "out_dir"];

impl RunConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = RunConfig::default();
        let defaults = c.to_kv();
        for key in kv.entries.keys() {
            if !defaults.entries.contains_key(key) && !key.starts_with("synth.") {
                return Err(Error::Config(format!("unknown key {key}")));
            }
        }
        let text = |k: &str| kv.entries.get(k).map(String::as_str);
        if let Some(v) = text("data_dir") {
            c.data_dir = PathBuf::from(v);
        }
        if let Some(v) = text("out_dir") {
            c.out_dir = PathBuf::from(v);
        }
        kv.set("seed", &mut c.seed)?;
        kv.set("train_fraction", &mut c.train_fraction)?;
        kv.set("folds", &mut c.folds)?;
        if let Some(v) = text("split_by") {
            c.split_by = parse_choice("split_by", v, SPLIT_BY)?;
        }
        if let Some(v) = text("clf.hidden") {
            c.clf_hidden = parse_list("clf.hidden", v)?;
        }
        kv.set("clf.learning_rate", &mut c.clf.learning_rate)?;
        kv.set("clf.batch_size", &mut c.clf.batch_size)?;
        kv.set("clf.epochs", &mut c.clf.epochs)?;
        if let Some(v) = text("ae.encoder") {
            c.ae_encoder = parse_list("ae.encoder", v)?;
        }
        kv.set("ae.learning_rate", &mut c.ae.learning_rate)?;
        kv.set("ae.batch_size", &mut c.ae.batch_size)?;
        kv.set("ae.epochs", &mut c.ae.epochs)?;
        if let Some(v) = text("ae.feed") {
            c.ae_feed = parse_choice("ae.feed", v, FEEDS)?;
        }
        let e = &mut c.explain;
        if let Some(v) = text("explain.method") {
            e.method = parse_choice("explain.method", v, METHODS)?;
        }
        kv.set("explain.permutations", &mut e.permutations)?;
        kv.set("explain.background", &mut e.background)?;
        if let Some(v) = text("explain.background_mode") {
            e.background_mode = parse_choice("explain.background_mode", v, MODES)?;
        }
        kv.set("explain.rows", &mut e.rows)?;
        kv.set("explain.exact_limit", &mut e.exact_limit)?;
        if let Some(v) = text("explain.output") {
            e.output = parse_choice("explain.output", v, SCALES)?;
        }
        kv.set("explain.local", &mut e.local)?;
        for (k, v) in &kv.entries {
            if let Some(rest) = k.strip_prefix("synth.") {
                c.synth.entries.insert(rest.to_string(), v.clone());
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let mut put = |k: &str, v: String| {
            kv.entries.insert(k.to_string(), v);
        };
        put("data_dir", self.data_dir.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("seed", self.seed.to_string());
        put("train_fraction", self.train_fraction.to_string());
        put("folds", self.folds.to_string());
        put("split_by", choice_name(self.split_by, SPLIT_BY).into());
        put("clf.hidden", list(&self.clf_hidden));
        put("clf.learning_rate", self.clf.learning_rate.to_string());
        put("clf.batch_size", self.clf.batch_size.to_string());
        put("clf.epochs", self.clf.epochs.to_string());
        put("ae.encoder", list(&self.ae_encoder));
        put("ae.learning_rate", self.ae.learning_rate.to_string());
        put("ae.batch_size", self.ae.batch_size.to_string());
        put("ae.epochs", self.ae.epochs.to_string());
        put("ae.feed", choice_name(self.ae_feed, FEEDS).into());
        let e = &self.explain;
        put("explain.method", choice_name(e.method, METHODS).into());
        put("explain.permutations", e.permutations.to_string());
        put("explain.background", e.background.to_string());
        put("explain.background_mode", choice_name(e.background_mode, MODES).into());
        put("explain.rows", e.rows.to_string());
        put("explain.exact_limit", e.exact_limit.to_string());
        put("explain.output", choice_name(e.output, SCALES).into());
        put("explain.local", e.local.to_string());
        for (k, v) in &self.synth.entries {
            put(&format!("synth.{k}"), v.clone());
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        for (name, t) in [("clf", &self.clf), ("ae", &self.ae)] {
            if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) || t.batch_size == 0 {
                return Err(Error::Config(format!(
                    "{name}.learning_rate must be positive and {name}.batch_size at least 1"
                )));
            }
        }
        let e = &self.explain;
        if e.permutations == 0 || e.background == 0 || e.rows == 0 {
            return Err(Error::Config(
                "explain.permutations, explain.background and explain.rows must be positive".into(),
            ));
        }
        self.cohort_spec().map(|_| ())
    }

    /// Canonical snapshot text.
    pub fn render(&self) -> String {
        self.to_kv().render()
    }

    /// SHA-256 over the snapshot without the directory settings.
    pub fn config_hash(&self) -> String {
        let mut kv = self.to_kv();
        for k in PATH_KEYS {
            kv.entries.remove(k);
        }
        let digest = Sha256::digest(kv.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-stage seed derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let digest = Sha256::digest(format!("{}:{stage}", self.seed).as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.stage_seed("split"),
            train_fraction: self.train_fraction,
            folds: self.folds,
        }
    }

    pub fn cohort_spec(&self) -> Result<CohortSpec> {
        let mut kv = self.synth.clone();
        if !kv.entries.contains_key("seed") {
            kv.entries.insert("seed".into(), self.stage_seed("synth").to_string());
        }
        CohortSpec::from_kv(&kv)
    }

    pub fn mlp_config(&self, input: usize) -> MlpConfig {
        let mut layer_sizes = vec![input];
        layer_sizes.extend(&self.clf_hidden);
        layer_sizes.push(HospitalLevel::COUNT);
        MlpConfig { layer_sizes }
    }

    pub fn ae_config(&self) -> AeConfig {
        let mut encoder_sizes = vec![FEATURE_COUNT];
        encoder_sizes.extend(&self.ae_encoder);
        let mut decoder_sizes: Vec<usize> = encoder_sizes.clone();
        decoder_sizes.reverse();
        AeConfig {
            encoder_sizes,
            decoder_sizes,
        }
    }
}

/// Artifact body stamped with the producing configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub content: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub counts: ExclusionAudit,
    pub patients: usize,
    pub visits: usize,
    pub providers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<MetricReport<f64>>,
    pub mean_macro_auc: Option<f64>,
    pub mean_macro_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalEntry {
    pub row: usize,
    pub label: HospitalLevel,
    pub predicted: HospitalLevel,
    pub attribution: Attribution<f64>,
    pub report: LocalReport<f64>,
}

pub const CLASSIFIER_KIND: &str = "classifier";
pub const AUTOENCODER_KIND: &str = "autoencoder";

/// One configured run rooted at its data and output directories.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    hash: String,
}

struct Prepared {
    rows: Vec<VisitFeatureVector>,
    manifest: SplitManifest,
    scaler: ScalerParams,
    x: Array2<f64>,
}

impl Prepared {
    fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.rows[i].label.index()).collect()
    }
}

fn select(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.config_hash();
        Ok(Run { config, hash })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn header(&self) -> String {
        format!("config_hash={}", self.hash)
    }

    fn snapshot(&self) -> Result<()> {
        write_file(
            &self.artifact("config.cfg"),
            &format!("# {}\n{}", self.header(), self.config.render()),
        )
    }

    fn save_json<T: Serialize>(&self, name: &str, content: &T) -> Result<()> {
        let stamped = Stamped {
            config_hash: self.hash.clone(),
            content,
        };
        let text = serde_json::to_string_pretty(&stamped).map_err(|e| Error::json(name.to_string(), e))?;
        write_file(&self.artifact(name), &text)
    }

    fn check_hash(&self, path: &Path, found: &str) -> Result<()> {
        if found != self.hash {
            return Err(Error::Config(format!(
                "{} was produced under config {found}, current config is {}; rerun the earlier stages",
                path.display(),
                self.hash
            )));
        }
        Ok(())
    }

    fn read_artifact(&self, name: &str) -> Result<(PathBuf, String)> {
        let path = self.artifact(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, text))
    }

    fn load_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let (path, text) = self.read_artifact(name)?;
        let stamped: Stamped<T> = serde_json::from_str(&text).map_err(|e| Error::json(name.to_string(), e))?;
        self.check_hash(&path, &stamped.config_hash)?;
        Ok(stamped.content)
    }

    fn save_model<M: Serialize + DeserializeOwned>(
        &self,
        name: &str,
        kind: &str,
        model: M,
        train: TrainConfig,
        initial: f64,
        trace: Vec<f64>,
    ) -> Result<()> {
        let mut saved = SavedModel::new(kind, &self.hash, model);
        saved.train_config = Some(train);
        saved.initial_loss = Some(initial);
        saved.loss_trace = trace;
        saved.save(&self.artifact(name))
    }

    fn load_model<M: Serialize + DeserializeOwned>(&self, name: &str, kind: &str) -> Result<M> {
        let path = self.artifact(name);
        let saved: SavedModel<M> = SavedModel::load(&path, kind)?;
        self.check_hash(&path, &saved.config_hash)?;
        Ok(saved.model)
    }

    /// Reads a text artifact whose first line carries the config hash.
    fn read_stamped_text(&self, name: &str) -> Result<(PathBuf, String)> {
        let (path, text) = self.read_artifact(name)?;
        let first = text.lines().next().unwrap_or("");
        let found = first.strip_prefix("# config_hash=").unwrap_or("<none>");
        self.check_hash(&path, found)?;
        Ok((path, text))
    }

    /// Generates the synthetic cohort into the data directory.
    pub fn synth(&self) -> Result<CohortSpec> {
        let spec = self.config.cohort_spec()?;
        let cohort = generate_cohort(&spec)?;
        write_cohort(&cohort, &spec, &self.config.data_dir, Some(&self.hash))?;
        Ok(spec)
    }

    pub fn ingest(&self) -> Result<IngestSummary> {
        self.snapshot()?;
        let (data, audit) = load_dataset(&DataPaths::in_dir(&self.config.data_dir))?;
        let summary = IngestSummary {
            counts: audit,
            patients: data.patients.len(),
            visits: data.visits.len(),
            providers: data.providers.len(),
        };
        self.save_json("audit.json", &summary)?;
        Ok(summary)
    }

    /// Writes `features.csv` and the row-aligned `row_patients.csv`.
    pub fn features(&self) -> Result<usize> {
        self.snapshot()?;
        let (data, _) = load_dataset(&DataPaths::in_dir(&self.config.data_dir))?;
        let table = build_feature_table(&data)?;
        write_feature_csv(&table, &self.artifact("features.csv"), Some(&self.header()))?;
        let mut ids = format!("# {}\npatient_id\n", self.header());
        for id in &table.patient_ids {
            ids.push_str(id);
            ids.push('\n');
        }
        write_file(&self.artifact("row_patients.csv"), &ids)?;
        Ok(table.rows.len())
    }

    fn load_features(&self) -> Result<(Vec<VisitFeatureVector>, Vec<String>)> {
        let (path, _) = self.read_stamped_text("features.csv")?;
        let rows = read_feature_csv(&path)?;
        let (_, ids) = self.read_stamped_text("row_patients.csv")?;
        let patients: Vec<String> = ids.lines().skip(2).map(str::to_string).collect();
        if patients.len() != rows.len() {
            return Err(Error::LengthMismatch {
                labels: rows.len(),
                predictions: patients.len(),
            });
        }
        Ok((rows, patients))
    }

    fn scaled(rows: &[VisitFeatureVector], scaler: &ScalerParams) -> Array2<f64> {
        let mut x = Array2::zeros((rows.len(), FEATURE_COUNT));
        for (mut out, r) in x.rows_mut().into_iter().zip(rows) {
            out.assign(&ndarray::ArrayView1::from(&scale_vector(r, scaler)[..]));
        }
        x
    }

    /// Split, balanced pool, folds and scaler, computed from the features.
    fn prepare(&self) -> Result<Prepared> {
        let (rows, patients) = self.load_features()?;
        let spec = self.config.split_spec();
        let split = match self.config.split_by {
            SplitBy::Visit => split_train_test(rows.len(), &spec)?,
            SplitBy::Patient => split_by_group(&patients, &spec)?,
        };
        let labels: Vec<HospitalLevel> = rows.iter().map(|r| r.label).collect();
        let pool = undersample_majority(&split.train, &labels, self.config.stage_seed("undersample"))?;
        let folds = make_kfolds(&pool, self.config.folds, self.config.stage_seed("folds"))?;
        let train_rows: Vec<&VisitFeatureVector> = split.train.iter().map(|&i| &rows[i]).collect();
        let scaler = fit_scaler(&train_rows)?;
        let x = Self::scaled(&rows, &scaler);
        let manifest = SplitManifest {
            config_hash: self.hash.clone(),
            split,
            balanced_pool: pool,
            folds,
        };
        Ok(Prepared {
            rows,
            manifest,
            scaler,
            x,
        })
    }

    fn train_config(&self, base: &TrainConfig, seed: u64, rows: usize) -> TrainConfig {
        TrainConfig {
            seed,
            batch_size: base.batch_size.min(rows.max(1)),
            ..*base
        }
    }

    fn model_name(variant: Variant) -> String {
        format!("model_{}.json", variant.tag())
    }

    /// Cross-validates on the balanced pool, then fits the final model on the
    /// whole pool. With the autoencoder, it is trained once on the pool and
    /// only the classifier is cross-validated.
    pub fn train(&self, variant: Variant) -> Result<CvSummary> {
        self.snapshot()?;
        let p = self.prepare()?;
        self.save_json("split.json", &p.manifest)?;
        self.save_json("scaler.json", &p.scaler)?;
        let pool = &p.manifest.balanced_pool;

        let inputs = match variant {
            Variant::WithoutAe => p.x.clone(),
            Variant::WithAe => {
                let tc = self.train_config(&self.config.ae, self.config.stage_seed("ae"), pool.len());
                let trained = train_autoencoder(select(p.x.view(), pool).view(), &self.config.ae_config(), &tc)?;
                let z = trained.model.represent_batch(p.x.view(), self.config.ae_feed)?;
                let r = trained.report;
                self.save_model(
                    "ae.json",
                    AUTOENCODER_KIND,
                    trained.model,
                    tc,
                    r.initial_loss,
                    r.loss_trace,
                )?;
                z
            }
        };
        let mlp = self.config.mlp_config(inputs.ncols());

        let mut folds = Vec::with_capacity(p.manifest.folds.len());
        for (k, fold) in p.manifest.folds.iter().enumerate() {
            let tc = self.train_config(
                &self.config.clf,
                self.config.stage_seed(&format!("cv.{k}")),
                fold.fit.len(),
            );
            let trained = train_classifier(select(inputs.view(), &fold.fit).view(), &p.labels(&fold.fit), &mlp, &tc)?;
            let probs = trained
                .model
                .predict_proba_batch(select(inputs.view(), &fold.validation).view())?;
            folds.push(evaluate_metrics(&p.labels(&fold.validation), probs.view(), variant)?);
        }
        let n = folds.len() as f64;
        let aucs: Vec<f64> = folds.iter().filter_map(|f| f.macro_avg.auc).collect();
        let summary = CvSummary {
            mean_macro_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            mean_macro_accuracy: folds.iter().map(|f| f.macro_avg.accuracy).sum::<f64>() / n,
            folds,
        };
        self.save_json(&format!("cv_{}.json", variant.tag()), &summary)?;

        let tc = self.train_config(&self.config.clf, self.config.stage_seed("clf"), pool.len());
        let trained = train_classifier(select(inputs.view(), pool).view(), &p.labels(pool), &mlp, &tc)?;
        let r = trained.report;
        self.save_model(
            &Self::model_name(variant),
            CLASSIFIER_KIND,
            trained.model,
            tc,
            r.initial_loss,
            r.loss_trace,
        )?;
        Ok(summary)
    }

    fn load_trained(&self, variant: Variant) -> Result<(Classifier<f64>, Option<Autoencoder<f64>>)> {
        let clf = self.load_model(&Self::model_name(variant), CLASSIFIER_KIND)?;
        let ae = match variant {
            Variant::WithoutAe => None,
            Variant::WithAe => Some(self.load_model("ae.json", AUTOENCODER_KIND)?),
        };
        Ok((clf, ae))
    }

    /// Features, split and scaler as saved by `train`.
    fn load_prepared(&self) -> Result<Prepared> {
        let manifest: SplitManifest = self.load_json("split.json")?;
        let scaler: ScalerParams = self.load_json("scaler.json")?;
        let (rows, _) = self.load_features()?;
        let x = Self::scaled(&rows, &scaler);
        Ok(Prepared {
            rows,
            manifest,
            scaler,
            x,
        })
    }

    fn value_model<'a>(
        &self,
        clf: &'a Classifier<f64>,
        ae: Option<&'a Autoencoder<f64>>,
        scale: OutputScale,
    ) -> ClassifierModel<'a, f64> {
        let model = ClassifierModel::new(clf).with_scale(scale);
        match ae {
            Some(ae) => model.with_autoencoder(ae, self.config.ae_feed),
            None => model,
        }
    }

    /// Test-set metrics; also writes per-row predictions.
    pub fn evaluate(&self, variant: Variant) -> Result<MetricReport<f64>> {
        let (clf, ae) = self.load_trained(variant)?;
        let p = self.load_prepared()?;
        let test = &p.manifest.split.test;
        let model = self.value_model(&clf, ae.as_ref(), OutputScale::Probability);
        let probs = crate::explain::ValueModel::evaluate(&model, select(p.x.view(), test).view())?;
        let labels = p.labels(test);
        let report = evaluate_metrics(&labels, probs.view(), variant)?;
        self.save_json(&format!("metrics_{}.json", variant.tag()), &report)?;

        let mut csv = format!("# {}\nrow,label", self.header());
        for level in HospitalLevel::ALL {
            csv.push_str(&format!(",p_{}", level.name()));
        }
        csv.push_str(",predicted\n");
        for ((row, label), pr) in test.iter().zip(&labels).zip(probs.rows()) {
            csv.push_str(&format!("{row},{}", HospitalLevel::ALL[*label].name()));
            for v in pr {
                csv.push_str(&format!(",{v:.10e}"));
            }
            csv.push_str(&format!(",{}\n", HospitalLevel::ALL[argmax(&pr.to_vec())].name()));
        }
        write_file(&self.artifact(&format!("predictions_{}.csv", variant.tag())), &csv)?;
        Ok(report)
    }

    fn sample_rows(&self, from: &[usize], n: usize, stage: &str) -> Vec<usize> {
        let mut rows = from.to_vec();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.stage_seed(stage)));
        rows.truncate(n);
        rows.sort_unstable();
        rows
    }

    /// Global importance over sampled test rows plus local reports.
    pub fn explain(&self, variant: Variant) -> Result<GlobalImportance<f64>> {
        let (clf, ae) = self.load_trained(variant)?;
        let p = self.load_prepared()?;
        let e = &self.config.explain;
        let bg_rows = self.sample_rows(&p.manifest.balanced_pool, e.background, "explain.background");
        let background = BackgroundSet::new(select(p.x.view(), &bg_rows), e.background_mode)?;
        let eval_rows = self.sample_rows(&p.manifest.split.test, e.rows, "explain.rows");
        let method = match e.method {
            ExplainMethod::Exact => Method::Exact { limit: e.exact_limit },
            ExplainMethod::Sampled => Method::Sampled {
                permutations: e.permutations,
                seed: self.config.stage_seed("explain"),
            },
        };
        let model = self.value_model(&clf, ae.as_ref(), e.output);
        let global = global_importance(&model, select(p.x.view(), &eval_rows).view(), method, &background)?;
        let class_names: Vec<String> = HospitalLevel::ALL.iter().map(|l| l.name().to_string()).collect();
        write_file(
            &self.artifact(&format!("importance_{}.csv", variant.tag())),
            &format!("# {}\n{}", self.header(), global.to_csv(&class_names)),
        )?;

        let mut locals = Vec::new();
        for &row in eval_rows.iter().take(e.local) {
            let x = p.x.row(row).to_vec();
            let probs = self.value_model(&clf, ae.as_ref(), OutputScale::Probability);
            let predicted = argmax(
                &crate::explain::ValueModel::evaluate(&probs, select(p.x.view(), &[row]).view())?
                    .row(0)
                    .to_vec(),
            );
            let attribution = explain_instance(&model, &x, &background, predicted, method)?;
            locals.push(LocalEntry {
                row,
                label: p.rows[row].label,
                predicted: HospitalLevel::ALL[predicted],
                report: local_report(&attribution),
                attribution,
            });
        }
        self.save_json(&format!("local_{}.json", variant.tag()), &locals)?;
        Ok(global)
    }

    /// Side-by-side macro metrics of both variants.
    pub fn compare(&self) -> Result<String> {
        let without: MetricReport<f64> = self.load_json("metrics_noae.json")?;
        let with: MetricReport<f64> = self.load_json("metrics_ae.json")?;
        let table = comparison_table(&without, &with);
        write_file(
            &self.artifact("table4_report.csv"),
            &format!("# {}\n{table}", self.header()),
        )?;
        Ok(table)
    }
}
