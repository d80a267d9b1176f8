//! Per-sample cross-entropy, clipping and the six loss bins.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;
/// Clipped losses at or below this value land in the ZERO bin. A perfect
/// prediction still pays the clamp, `-ln(1 - 1e-7) ≈ 1.00000005e-7`, so the
/// cut sits just above that floor.
pub const ZERO_EPS: f64 = 1.0000001e-7;
/// Samples whose clipped loss exceeds this are hard examples.
pub const HARD_THRESHOLD: f64 = 0.2;

/// Mean binary cross-entropy in nats over all pixels of one sample.
pub fn bce_loss(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::contract(
            "bce_loss",
            format!("prediction has {} pixels, target {}", pred.len(), target.len()),
        ));
    }
    let mut acc = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let p = f64::from(p).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let t = f64::from(t);
        acc += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok((-acc / pred.len() as f64).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossBin {
    Zero,
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl LossBin {
    pub const ALL: [LossBin; 6] = [
        LossBin::Zero,
        LossBin::B1,
        LossBin::B2,
        LossBin::B3,
        LossBin::B4,
        LossBin::B5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            LossBin::Zero => "ZERO",
            LossBin::B1 => "B1",
            LossBin::B2 => "B2",
            LossBin::B3 => "B3",
            LossBin::B4 => "B4",
            LossBin::B5 => "B5",
        }
    }

    /// Closed upper edge of the bin's interval.
    pub fn upper(self) -> f64 {
        match self {
            LossBin::Zero => ZERO_EPS,
            other => 0.2 * other.index() as f64,
        }
    }

    /// Bin of an already clipped loss. Intervals are `(lo, hi]`.
    pub fn of_clipped(clipped: f64) -> LossBin {
        if clipped <= ZERO_EPS {
            LossBin::Zero
        } else if clipped <= 0.2 {
            LossBin::B1
        } else if clipped <= 0.4 {
            LossBin::B2
        } else if clipped <= 0.6 {
            LossBin::B3
        } else if clipped <= 0.8 {
            LossBin::B4
        } else {
            LossBin::B5
        }
    }
}

impl fmt::Display for LossBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for LossBin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossBin::ALL
            .into_iter()
            .find(|b| b.label() == s)
            .ok_or_else(|| Error::contract("loss bin", format!("unknown bin label {s:?}")))
    }
}

impl Serialize for LossBin {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for LossBin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn clip(raw: f64) -> f64 {
    raw.min(1.0)
}

/// Clips `raw` to 1 and returns its bin.
pub fn assign_bin(raw: f64) -> Result<LossBin> {
    if raw.is_nan() || raw < 0.0 {
        return Err(Error::contract(
            "assign_bin",
            format!("loss must be nonnegative, got {raw}"),
        ));
    }
    Ok(LossBin::of_clipped(clip(raw)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub id: u64,
    pub raw_loss: f64,
    pub clipped_loss: f64,
    pub bin: LossBin,
    pub round: usize,
}

impl LossRecord {
    pub fn new(id: u64, raw_loss: f64, round: usize) -> Result<Self> {
        let bin = assign_bin(raw_loss)?;
        Ok(LossRecord {
            id,
            raw_loss,
            clipped_loss: clip(raw_loss),
            bin,
            round,
        })
    }

    pub fn is_hard(&self) -> bool {
        self.clipped_loss > HARD_THRESHOLD
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bin: LossBin,
    pub count: usize,
    /// Mean clipped loss, `None` for an empty bin.
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinHistogram {
    pub round: usize,
    pub total: usize,
    pub bins: Vec<BinStats>,
}

impl BinHistogram {
    pub fn count(&self, bin: LossBin) -> usize {
        self.bins[bin.index()].count
    }

    pub fn mean(&self, bin: LossBin) -> Option<f64> {
        self.bins[bin.index()].mean
    }

    /// Fraction of samples in ZERO or B1.
    pub fn easy_fraction(&self) -> f64 {
        (self.count(LossBin::Zero) + self.count(LossBin::B1)) as f64 / self.total as f64
    }
}

pub fn histogram(records: &[LossRecord]) -> Result<BinHistogram> {
    let Some(first) = records.first() else {
        return Err(Error::contract("histogram", "no loss records"));
    };
    let mut counts = [0usize; 6];
    let mut sums = [0.0f64; 6];
    for r in records {
        counts[r.bin.index()] += 1;
        sums[r.bin.index()] += r.clipped_loss;
    }
    let bins = LossBin::ALL
        .iter()
        .map(|&bin| {
            let c = counts[bin.index()];
            BinStats {
                bin,
                count: c,
                mean: (c > 0).then(|| sums[bin.index()] / c as f64),
            }
        })
        .collect();
    Ok(BinHistogram {
        round: first.round,
        total: records.len(),
        bins,
    })
}
