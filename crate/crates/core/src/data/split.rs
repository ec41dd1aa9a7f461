use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("split fractions must be non-negative, got {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions must sum to 1, got {f:?}")));
        }
        Ok(())
    }

    /// Part sizes for `n` samples: floors first, then the leftover samples
    /// go to the largest fractional remainders (earlier split on ties).
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let exact = self.as_array().map(|f| f * n as f64);
        let mut sizes = exact.map(|e| e.floor() as usize);
        let mut left = n - sizes.iter().sum::<usize>();
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        sizes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub fractions: SplitFractions,
    /// One entry per manifest entry.
    pub assignments: Vec<Split>,
}

impl SplitAssignment {
    /// Manifest indices in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.assignments.iter().enumerate().filter(|(_, s)| **s == split).map(|(i, _)| i).collect()
    }

    pub fn write_csv(&self, manifest: &DatasetManifest, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), message: e.to_string() };
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err)?;
        w.write_record(["path", "split"]).map_err(csv_err)?;
        for (e, s) in manifest.entries.iter().zip(&self.assignments) {
            w.write_record([e.path.as_str(), s.as_str()]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a `path,split` CSV and orders it by `manifest`.
    pub fn read_csv(manifest: &DatasetManifest, path: &Path, seed: u64, fractions: SplitFractions) -> Result<Self> {
        let csv_err = |m: String| Error::Csv { path: path.to_path_buf(), message: m };
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
        let mut by_path = std::collections::HashMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(e.to_string()))?;
            by_path.insert(rec[0].to_string(), rec[1].parse::<Split>()?);
        }
        let assignments = manifest
            .entries
            .iter()
            .map(|e| by_path.get(&e.path).copied().ok_or_else(|| csv_err(format!("no split for {}", e.path))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, fractions, assignments })
    }
}

/// Stratified split: each class is shuffled with its own seeded stream and
/// cut into contiguous train/val/test runs.
pub fn split_dataset(manifest: &DatasetManifest, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    fractions.validate()?;
    let mut assignments = vec![Split::Train; manifest.len()];
    let mut too_small = Vec::new();
    for class in 0..manifest.num_classes() {
        let mut members: Vec<usize> =
            manifest.entries.iter().enumerate().filter(|(_, e)| e.label == class).map(|(i, _)| i).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        let sizes = fractions.allocate(members.len());
        if sizes.iter().zip(fractions.as_array()).any(|(&s, f)| f > 0.0 && s == 0) {
            too_small.push(format!("{} ({} samples)", manifest.class_names[class], members.len()));
        }
        let mut start = 0;
        for (split, size) in Split::ALL.into_iter().zip(sizes) {
            for &i in &members[start..start + size] {
                assignments[i] = split;
            }
            start += size;
        }
    }
    if !too_small.is_empty() {
        return Err(Error::config(format!(
            "classes too small for every split to be non-empty: {}",
            too_small.join(", ")
        )));
    }
    Ok(SplitAssignment { seed, fractions, assignments })
}
