//! Artifact-level orchestration of a whole experiment.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! corpus/scene_NNNNN/{rgb.png, gt.png, depth.f32, scene.json}
//! corpus/dataset_manifest.jsonl
//! round_K/{checkpoint.bin, loss_manifest.jsonl, metrics.json,
//!          evaluation.json, evaluation.csv, bootstrap_manifest.json (K > 0)}
//! reports/{break_even.csv, pr_curves.csv, cohorts.csv, rounds.csv}
//! ```
//!
//! Every stage directory holds a `stamp.json` naming the config hash it was
//! built under. A stage whose stamp matches is skipped unless forced.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{
    build_subset, read_loss_manifest, round_epochs, round_seed, score_samples, track_cohorts, write_loss_manifest,
    BootstrapManifest, LossManifestHeader,
};
use crate::config::ExperimentConfig;
use crate::dataset::{
    generate_scene, read_manifest, read_scene, sample_id, split_dataset, write_manifest, write_scene,
    DatasetManifest, SampleRef, SceneSource, Split,
};
use crate::error::{Error, Result};
use crate::eval::{scene_maps, BreakEven, EvaluationReport};
use crate::io;
use crate::loss::{histogram, BinHistogram};
use crate::model::{train, Checkpoint, ModelParams};
use crate::seed::derive_seed;

pub const CORPUS_DIR: &str = "corpus";
pub const REPORTS_DIR: &str = "reports";
pub const DATASET_MANIFEST: &str = "dataset_manifest.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOSS_MANIFEST: &str = "loss_manifest.jsonl";
pub const BOOTSTRAP_MANIFEST: &str = "bootstrap_manifest.json";
pub const METRICS: &str = "metrics.json";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const EVALUATION_CSV: &str = "evaluation.csv";
const STAMP: &str = "stamp.json";
const LOCK: &str = ".lock";

/// Overlap whose break-even the cohort and round tables carry.
pub const REPORT_OVERLAP: f64 = 0.5;

pub fn round_dir(root: &Path, round: usize) -> PathBuf {
    root.join(format!("round_{round}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    config_hash: String,
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        io::create_dir_all(root)?;
        let path = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(root.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub config_hash: String,
    pub seed: u64,
    /// Size of the full training split.
    pub training_size: usize,
    /// Samples this round was trained on.
    pub trained_on: usize,
    pub epochs: usize,
    /// `(|hard| + |easy|) / training_size`; 1 for round 0.
    pub subset_fraction: f64,
    pub hard: usize,
    pub easy: usize,
    pub easy_pool: usize,
    pub selected_epoch: Option<usize>,
    pub val_loss: Option<f64>,
    /// Histogram of the training split's losses under this round's model.
    pub losses: BinHistogram,
    pub break_even: Vec<BreakEven>,
}

/// Loaded scenes plus their split.
pub struct Corpus {
    pub source: SceneSource,
    pub manifest: DatasetManifest,
}

pub struct Pipeline {
    config: ExperimentConfig,
    hash: String,
    force: bool,
}

fn with_hash_comment(hash: &str, body: &str) -> String {
    format!("# config_hash={hash}\n{body}")
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Pipeline { config, hash, force })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn root(&self) -> &Path {
        &self.config.output_dir
    }

    fn locked<R>(&self, f: impl FnOnce() -> Result<R> + Send) -> Result<R>
    where
        R: Send,
    {
        let _lock = OutputLock::acquire(self.root())?;
        match self.config.workers {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?
                .install(f),
            None => f(),
        }
    }

    fn stamped(&self, dir: &Path, stage: &str) -> bool {
        io::read_json::<Stamp>(&dir.join(STAMP), "stamp")
            .map(|s| s.stage == stage && s.config_hash == self.hash)
            .unwrap_or(false)
    }

    fn fresh(&self, dir: &Path, stage: &str, files: &[&str]) -> bool {
        !self.force && self.stamped(dir, stage) && files.iter().all(|f| dir.join(f).is_file())
    }

    fn stamp(&self, dir: &Path, stage: &str) -> Result<()> {
        io::write_json(
            &dir.join(STAMP),
            &Stamp {
                stage: stage.into(),
                config_hash: self.hash.clone(),
            },
        )
    }

    fn require_stage(&self, dir: &Path, stage: &str, command: &str) -> Result<()> {
        if self.stamped(dir, stage) {
            Ok(())
        } else {
            Err(Error::MissingArtifacts(vec![format!(
                "{} for this config (run `bootseg {command}`)",
                dir.display()
            )]))
        }
    }

    pub fn synth(&self) -> Result<Outcome> {
        self.locked(|| self.synth_inner())
    }

    pub fn train(&self) -> Result<Outcome> {
        self.locked(|| {
            let corpus = self.load_corpus()?;
            self.run_round(0, &corpus)
        })
    }

    /// Runs rounds 1..=R in order.
    pub fn bootstrap(&self) -> Result<Vec<Outcome>> {
        self.locked(|| {
            let corpus = self.load_corpus()?;
            self.require_stage(&round_dir(self.root(), 0), "round", "train")?;
            (1..=self.config.bootstrap.rounds)
                .map(|k| self.run_round(k, &corpus))
                .collect()
        })
    }

    /// Re-evaluates round `round` from its checkpoint.
    pub fn eval(&self, round: usize) -> Result<Outcome> {
        self.locked(|| {
            let dir = round_dir(self.root(), round);
            let ck_path = dir.join(CHECKPOINT);
            if !ck_path.is_file() {
                return Err(Error::MissingArtifacts(vec![ck_path.display().to_string()]));
            }
            if !self.force {
                if let Ok(r) = io::read_json::<EvaluationReport>(&dir.join(EVALUATION_JSON), "evaluation") {
                    if r.config_hash == self.hash && dir.join(EVALUATION_CSV).is_file() {
                        return Ok(Outcome::Skipped);
                    }
                }
            }
            let corpus = self.load_corpus()?;
            let ck = Checkpoint::<f32>::load(&ck_path)?;
            self.evaluate(&ck.params, &corpus, round, &dir)?;
            Ok(Outcome::Ran)
        })
    }

    pub fn report(&self) -> Result<Outcome> {
        self.locked(|| self.report_inner())
    }

    /// synth, train, bootstrap and report in sequence.
    pub fn run_all(&self) -> Result<()> {
        self.synth()?;
        self.train()?;
        self.bootstrap()?;
        self.report()?;
        Ok(())
    }

    fn synth_inner(&self) -> Result<Outcome> {
        let dir = self.root().join(CORPUS_DIR);
        if self.fresh(&dir, "corpus", &[DATASET_MANIFEST]) {
            return Ok(Outcome::Skipped);
        }
        let c = &self.config.corpus;
        io::create_dir_all(&dir)?;
        let refs: Vec<Vec<SampleRef>> = (0..c.scenes as u32)
            .into_par_iter()
            .map(|id| {
                let scene = generate_scene(id, derive_seed(c.seed, "scene", u64::from(id)), c.height, c.width, &c.scene)?;
                write_scene(&dir, &scene, &self.hash)?;
                let grid = self.config.tiling.grid(c.height, c.width)?;
                Ok((0..grid.len())
                    .map(|i| {
                        let (y, x) = grid.position(i);
                        SampleRef {
                            id: sample_id(id, i),
                            scene_id: id,
                            y,
                            x,
                        }
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<SampleRef> = refs.into_iter().flatten().collect();
        let manifest = split_dataset(&refs, &self.config.split, derive_seed(c.seed, "split", 0))?;
        write_manifest(&dir.join(DATASET_MANIFEST), &manifest, &self.hash)?;
        self.stamp(&dir, "corpus")?;
        Ok(Outcome::Ran)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let dir = self.root().join(CORPUS_DIR);
        self.require_stage(&dir, "corpus", "synth")?;
        let (manifest, header) = read_manifest(&dir.join(DATASET_MANIFEST))?;
        let scenes = header
            .scenes
            .par_iter()
            .map(|&id| {
                let (scene, hash) = read_scene(&dir, id)?;
                if hash != self.hash {
                    return Err(Error::MissingArtifacts(vec![format!(
                        "{} was built under another config (run `bootseg synth --force`)",
                        crate::dataset::scene_dir(&dir, id).display()
                    )]));
                }
                Ok(scene)
            })
            .collect::<Result<Vec<_>>>()?;
        let source = SceneSource::new(scenes, self.config.tiling.clone())?;
        Ok(Corpus { source, manifest })
    }

    fn run_round(&self, round: usize, corpus: &Corpus) -> Result<Outcome> {
        self.round_inner(round, corpus).map_err(|e| match e {
            e @ (Error::Round { .. } | Error::Locked(_)) => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        })
    }

    fn round_inner(&self, round: usize, corpus: &Corpus) -> Result<Outcome> {
        let dir = round_dir(self.root(), round);
        let mut files = vec![CHECKPOINT, LOSS_MANIFEST, METRICS, EVALUATION_JSON, EVALUATION_CSV];
        if round > 0 {
            files.push(BOOTSTRAP_MANIFEST);
        }
        if self.fresh(&dir, "round", &files) {
            return Ok(Outcome::Skipped);
        }
        let seed = round_seed(self.config.seed, round);
        let full = corpus.manifest.ids(Split::Train);
        let val = corpus.manifest.ids(Split::Val);
        io::create_dir_all(&dir)?;

        let subset = if round == 0 {
            None
        } else {
            let prev = round_dir(self.root(), round - 1);
            self.require_stage(&prev, "round", if round == 1 { "train" } else { "bootstrap" })?;
            let prev_manifest = prev.join(LOSS_MANIFEST);
            let (_, records) = read_loss_manifest(&prev_manifest)?;
            let mut m = build_subset(&records, seed, self.config.bootstrap.easy_includes_zero, round)?;
            m.source_sha256 = io::sha256_file(&prev_manifest)?;
            m.config_hash = self.hash.clone();
            io::write_json(&dir.join(BOOTSTRAP_MANIFEST), &m)?;
            Some(m)
        };
        let ids = match &subset {
            Some(m) if !self.config.bootstrap.full_subset => m.ids(),
            _ => full.clone(),
        };

        let mut train_config = self.config.train.clone();
        train_config.epochs = round_epochs(train_config.epochs, full.len(), ids.len(), self.config.bootstrap.matched_steps);
        let (params, history) = train(&self.config.model, None, &corpus.source, &ids, &val, &train_config, seed)?;
        let ck = Checkpoint {
            params,
            history,
            config_hash: self.hash.clone(),
        };
        let ck_path = dir.join(CHECKPOINT);
        ck.save(&ck_path)?;

        let records = score_samples(&ck.params, &corpus.source, &full, round, self.config.train.eval_chunk)?;
        let header = LossManifestHeader {
            kind: "loss_manifest".into(),
            round,
            checkpoint_sha256: io::sha256_file(&ck_path)?,
            config_hash: self.hash.clone(),
        };
        write_loss_manifest(&dir.join(LOSS_MANIFEST), &header, &records)?;
        let report = self.evaluate(&ck.params, corpus, round, &dir)?;

        let h = &ck.history;
        let metrics = RoundMetrics {
            round,
            config_hash: self.hash.clone(),
            seed,
            training_size: full.len(),
            trained_on: ids.len(),
            epochs: train_config.epochs,
            subset_fraction: subset.as_ref().map_or(1.0, BootstrapManifest::subset_fraction),
            hard: subset.as_ref().map_or(0, |m| m.hard.len()),
            easy: subset.as_ref().map_or(0, |m| m.easy.len()),
            easy_pool: subset.as_ref().map_or(0, |m| m.easy_pool),
            selected_epoch: h.selected_epoch,
            val_loss: h.selected_epoch.map(|e| h.epochs[e].val_loss),
            losses: histogram(&records)?,
            break_even: report.break_even.clone(),
        };
        io::write_json(&dir.join(METRICS), &metrics)?;
        self.stamp(&dir, "round")?;
        Ok(Outcome::Ran)
    }

    fn evaluate(&self, params: &ModelParams<f32>, corpus: &Corpus, round: usize, dir: &Path) -> Result<EvaluationReport> {
        let scenes = corpus.manifest.scenes(Split::Test);
        let maps = scene_maps(params, &corpus.source, &scenes, self.config.train.eval_chunk)?;
        let report = EvaluationReport::build(&maps, scenes, &self.config.eval, round, &self.hash)?;
        io::write_json(&dir.join(EVALUATION_JSON), &report)?;
        io::write_atomic(
            &dir.join(EVALUATION_CSV),
            with_hash_comment(&self.hash, &report.curves_csv()).as_bytes(),
        )?;
        Ok(report)
    }

    fn report_inner(&self) -> Result<Outcome> {
        let dir = self.root().join(REPORTS_DIR);
        let files = ["break_even.csv", "pr_curves.csv", "cohorts.csv", "rounds.csv"];
        if self.fresh(&dir, "report", &files) {
            return Ok(Outcome::Skipped);
        }
        let rounds = self.config.bootstrap.rounds;
        let missing: Vec<String> = (0..=rounds)
            .map(|k| round_dir(self.root(), k))
            .filter(|d| !self.stamped(d, "round"))
            .map(|d| d.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingArtifacts(missing));
        }
        let mut evals = Vec::new();
        let mut manifests = Vec::new();
        let mut metrics = Vec::new();
        for k in 0..=rounds {
            let d = round_dir(self.root(), k);
            evals.push(io::read_json::<EvaluationReport>(&d.join(EVALUATION_JSON), "evaluation")?);
            manifests.push(read_loss_manifest(&d.join(LOSS_MANIFEST))?.1);
            metrics.push(io::read_json::<RoundMetrics>(&d.join(METRICS), "round metrics")?);
        }
        io::create_dir_all(&dir)?;
        let csv = |name: &str, body: String| -> Result<()> {
            io::write_atomic(&dir.join(name), with_hash_comment(&self.hash, &body).as_bytes())
        };

        let mut be = String::from("overlap,baseline");
        for k in 1..=rounds {
            write!(be, ",round_{k}").unwrap();
        }
        be.push('\n');
        for &o in &self.config.eval.overlaps {
            write!(be, "{o}").unwrap();
            for e in &evals {
                let v = e.break_even_at(o).map(|v| v.to_string()).unwrap_or_default();
                write!(be, ",{v}").unwrap();
            }
            be.push('\n');
        }
        csv("break_even.csv", be)?;

        let mut curves = String::from("round,overlap,threshold,precision,recall,detected,total_gt,correct,total_pred\n");
        for e in &evals {
            for line in e.curves_csv().lines().skip(1) {
                writeln!(curves, "{},{line}", e.round).unwrap();
            }
        }
        csv("pr_curves.csv", curves)?;

        let mut cohorts = track_cohorts(&manifests)?;
        cohorts.break_even = evals.iter().map(|e| e.break_even_at(REPORT_OVERLAP)).collect();
        csv("cohorts.csv", cohorts.to_csv())?;

        let mut table = String::from(
            "round,seed,training_size,trained_on,subset_fraction,hard,easy,easy_pool,selected_epoch,val_loss,break_even_0.5\n",
        );
        for (m, e) in metrics.iter().zip(&evals) {
            let opt = |v: Option<String>| v.unwrap_or_default();
            writeln!(
                table,
                "{},{},{},{},{},{},{},{},{},{},{}",
                m.round,
                m.seed,
                m.training_size,
                m.trained_on,
                m.subset_fraction,
                m.hard,
                m.easy,
                m.easy_pool,
                opt(m.selected_epoch.map(|v| v.to_string())),
                opt(m.val_loss.map(|v| v.to_string())),
                opt(e.break_even_at(REPORT_OVERLAP).map(|v| v.to_string())),
            )
            .unwrap();
        }
        csv("rounds.csv", table)?;
        self.stamp(&dir, "report")?;
        Ok(Outcome::Ran)
    }
}
