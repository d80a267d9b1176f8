//! Loss-binned bootstrapping: score the training split, keep every hard
//! sample plus an equal-size random draw of easy ones, and follow the
//! original loss cohorts across rounds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PatchSource;
use crate::error::{Error, Result};
use crate::io;
use crate::loss::{LossBin, LossRecord};
use crate::model::{sample_losses, ModelParams};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub rounds: usize,
    /// Whether perfectly predicted samples belong to the easy pool.
    pub easy_includes_zero: bool,
    /// Train every round on the whole training split instead of the subset.
    /// Turns a round into plain retraining, for A/B comparison.
    pub full_subset: bool,
    /// Scale a round's epoch count by `training size / subset size` so it
    /// takes as many optimizer steps as round 0.
    pub matched_steps: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            rounds: 3,
            easy_includes_zero: true,
            full_subset: false,
            matched_steps: false,
        }
    }
}

/// Epochs for a round trained on `subset` of `full` samples.
pub fn round_epochs(base: usize, full: usize, subset: usize, matched_steps: bool) -> usize {
    if matched_steps && subset > 0 {
        (base * full).div_ceil(subset)
    } else {
        base
    }
}

pub fn round_seed(base: u64, round: usize) -> u64 {
    derive_seed(base, "round", round as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossManifestHeader {
    pub kind: String,
    pub round: usize,
    pub checkpoint_sha256: String,
    pub config_hash: String,
}

/// One record per id, in id order. Inference only, so the result does not
/// depend on how the work is split across threads.
pub fn score_samples(
    params: &ModelParams<f32>,
    source: &dyn PatchSource,
    ids: &[u64],
    round: usize,
    chunk: usize,
) -> Result<Vec<LossRecord>> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let losses = sample_losses(params, source, &sorted, chunk)?;
    sorted
        .iter()
        .zip(losses)
        .map(|(&id, l)| LossRecord::new(id, l, round))
        .collect()
}

pub fn write_loss_manifest(path: &Path, header: &LossManifestHeader, records: &[LossRecord]) -> Result<()> {
    io::write_jsonl(path, header, records)
}

pub fn read_loss_manifest(path: &Path) -> Result<(LossManifestHeader, Vec<LossRecord>)> {
    let (header, records): (LossManifestHeader, Vec<LossRecord>) = io::read_jsonl(path, "loss manifest")?;
    if header.kind != "loss_manifest" {
        return Err(Error::Format {
            what: "loss manifest",
            path: path.to_path_buf(),
            msg: format!("unexpected kind {:?}", header.kind),
        });
    }
    Ok((header, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapManifest {
    /// The round whose training set this subset is.
    pub round: usize,
    pub seed: u64,
    /// Hash of the loss manifest the subset was drawn from.
    pub source_sha256: String,
    pub config_hash: String,
    /// Size of the scored training split.
    pub training_size: usize,
    pub hard: Vec<u64>,
    pub easy: Vec<u64>,
    /// Size of the easy pool the draw was taken from.
    pub easy_pool: usize,
}

impl BootstrapManifest {
    pub fn subset_len(&self) -> usize {
        self.hard.len() + self.easy.len()
    }

    pub fn subset_fraction(&self) -> f64 {
        self.subset_len() as f64 / self.training_size as f64
    }

    /// Hard and easy ids merged in ascending order.
    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.hard.iter().chain(&self.easy).copied().collect();
        ids.sort_unstable();
        ids
    }
}

/// Every record with clipped loss above 0.2 plus a uniform draw without
/// replacement of `min(|hard|, |pool|)` easy ones. The pool is B1, plus ZERO
/// when `easy_includes_zero`. Ids come out sorted.
pub fn build_subset(records: &[LossRecord], seed: u64, easy_includes_zero: bool, round: usize) -> Result<BootstrapManifest> {
    let mut sorted: Vec<&LossRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.id);
    if sorted.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::contract("build_subset", "duplicate sample ids in loss manifest"));
    }
    let hard: Vec<u64> = sorted.iter().filter(|r| r.is_hard()).map(|r| r.id).collect();
    if hard.is_empty() {
        return Err(Error::NoHardExamples { round });
    }
    let pool: Vec<u64> = sorted
        .iter()
        .filter(|r| r.bin == LossBin::B1 || (easy_includes_zero && r.bin == LossBin::Zero))
        .map(|r| r.id)
        .collect();
    let take = hard.len().min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut easy: Vec<u64> = sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
    easy.sort_unstable();
    Ok(BootstrapManifest {
        round,
        seed,
        source_sha256: String::new(),
        config_hash: String::new(),
        training_size: records.len(),
        hard,
        easy,
        easy_pool: pool.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    /// Bin at round 0.
    pub cohort: LossBin,
    pub size: usize,
    /// Mean clipped loss of the cohort at each round; `None` for an empty
    /// cohort.
    pub means: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub rounds: usize,
    pub rows: Vec<CohortRow>,
    /// Test break-even at the report overlap per round, when known.
    pub break_even: Vec<Option<f64>>,
}

/// Groups samples by their round-0 bin and averages each group's clipped loss
/// in every later round. Sums run in ascending id order.
pub fn track_cohorts(manifests: &[Vec<LossRecord>]) -> Result<CohortReport> {
    let base = manifests
        .first()
        .ok_or_else(|| Error::contract("track_cohorts", "no loss manifests"))?;
    let by_id = |records: &[LossRecord]| -> BTreeMap<u64, f64> {
        records.iter().map(|r| (r.id, r.clipped_loss)).collect()
    };
    let cohort_of: BTreeMap<u64, LossBin> = base.iter().map(|r| (r.id, r.bin)).collect();
    if cohort_of.len() != base.len() {
        return Err(Error::contract("track_cohorts", "duplicate ids in round-0 manifest"));
    }
    let mut rows: Vec<CohortRow> = LossBin::ALL
        .iter()
        .map(|&bin| CohortRow {
            cohort: bin,
            size: cohort_of.values().filter(|&&b| b == bin).count(),
            means: Vec::with_capacity(manifests.len()),
        })
        .collect();
    for (round, records) in manifests.iter().enumerate() {
        let losses = by_id(records);
        if losses.len() != records.len() || !losses.keys().eq(cohort_of.keys()) {
            return Err(Error::contract(
                "track_cohorts",
                format!("round {round} manifest covers a different id set than round 0"),
            ));
        }
        let mut sums = [0.0f64; 6];
        for (id, &l) in &losses {
            sums[cohort_of[id].index()] += l;
        }
        for row in &mut rows {
            let i = row.cohort.index();
            row.means.push((row.size > 0).then(|| sums[i] / row.size as f64));
        }
    }
    Ok(CohortReport {
        rounds: manifests.len(),
        rows,
        break_even: vec![None; manifests.len()],
    })
}

impl CohortReport {
    /// Rows are cohorts, columns rounds; a final row carries the break-even.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cohort,size");
        for r in 0..self.rounds {
            write!(out, ",round_{r}").unwrap();
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            write!(out, "{},{}", row.cohort, row.size).unwrap();
            for &m in &row.means {
                write!(out, ",{}", cell(m)).unwrap();
            }
            out.push('\n');
        }
        out.push_str("break_even,");
        for &b in &self.break_even {
            write!(out, ",{}", cell(b)).unwrap();
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(losses: &[f64]) -> Vec<LossRecord> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| LossRecord::new(i as u64, l, 0).unwrap())
            .collect()
    }

    #[test]
    fn no_hard_samples_is_an_error() {
        let err = build_subset(&recs(&[0.0, 0.1, 0.2]), 1, true, 1).unwrap_err();
        assert!(matches!(err, Error::NoHardExamples { round: 1 }));
    }

    #[test]
    fn zero_bin_can_be_left_out_of_the_pool() {
        let r = recs(&[0.0, 0.0, 0.1, 0.5, 0.7]);
        let with = build_subset(&r, 3, true, 1).unwrap();
        assert_eq!((with.easy_pool, with.easy.len()), (3, 2));
        let without = build_subset(&r, 3, false, 1).unwrap();
        assert_eq!((without.easy_pool, without.easy), (1, vec![2]));
    }

    #[test]
    fn single_round_report_equals_histogram_means() {
        let r = recs(&[0.0, 0.1, 0.15, 0.3, 0.9, 3.0]);
        let report = track_cohorts(&[r.clone()]).unwrap();
        let h = crate::loss::histogram(&r).unwrap();
        for row in &report.rows {
            assert_eq!(row.means[0], h.mean(row.cohort));
            assert_eq!(row.size, h.count(row.cohort));
        }
        assert!(report.to_csv().starts_with("cohort,size,round_0\nZERO,1,0\n"));
    }

    #[test]
    fn mismatched_id_sets_are_rejected() {
        let a = recs(&[0.1, 0.3]);
        let b = recs(&[0.1]);
        assert!(track_cohorts(&[a, b]).is_err());
    }
}
