use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GctError, Result};

/// A positive fraction such as `1/8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(GctError::config("ratio", format!("{num}/{den} is not in (0, 1]")));
        }
        Ok(Self { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(ratio * total)`, halves rounded up.
    pub fn of(self, total: usize) -> usize {
        let (n, d) = (self.num as u128, self.den as u128);
        ((2 * n * total as u128 + d) / (2 * d)) as usize
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = GctError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || GctError::config("ratio", format!("cannot parse `{s}`, expected e.g. 1/8"));
        match s.trim().split_once('/') {
            Some((a, b)) => Ratio::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None if s.trim() == "1" => Ratio::new(1, 1),
            None => Err(bad()),
        }
    }
}

impl TryFrom<String> for Ratio {
    type Error = GctError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

/// Which training ids are labeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub dataset: String,
    pub ratio: Ratio,
    pub seed: u64,
    pub total: usize,
    /// Ascending.
    pub labeled_ids: Vec<u64>,
    /// Ascending.
    pub unlabeled_ids: Vec<u64>,
}

/// Draws `round(ratio * total)` labeled ids out of `0..total`.
pub fn make_split(dataset: &str, total: usize, ratio: Ratio, seed: u64) -> Result<SplitManifest> {
    let n = ratio.of(total);
    if n == 0 {
        return Err(GctError::config(
            "ratio",
            format!("{ratio} of {total} samples leaves no labeled data"),
        ));
    }
    let mut ids: Vec<u64> = (0..total as u64).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled = ids[..n].to_vec();
    let mut unlabeled = ids[n..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(SplitManifest {
        dataset: dataset.to_string(),
        ratio,
        seed,
        total,
        labeled_ids: labeled,
        unlabeled_ids: unlabeled,
    })
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| GctError::format(path, e.to_string()))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| GctError::io(dir, e))?;
        }
        std::fs::write(path, text + "\n").map_err(|e| GctError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GctError::io(path, e))?;
        let m: SplitManifest = serde_json::from_str(&text).map_err(|e| GctError::format(path, e.to_string()))?;
        m.check().map_err(|e| GctError::format(path, e.to_string()))?;
        Ok(m)
    }

    /// Disjoint, exhaustive and of the advertised size.
    pub fn check(&self) -> Result<()> {
        let mut all: Vec<u64> = self.labeled_ids.iter().chain(&self.unlabeled_ids).copied().collect();
        all.sort_unstable();
        if all != (0..self.total as u64).collect::<Vec<_>>() {
            return Err(GctError::input("labeled and unlabeled ids must partition 0..total"));
        }
        if self.labeled_ids.len() != self.ratio.of(self.total) {
            return Err(GctError::input("labeled count does not match ratio"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_ratio_labels_everything() {
        let m = make_split("d", 10, Ratio::new(1, 1).unwrap(), 3).unwrap();
        assert_eq!(m.labeled_ids, (0..10).collect::<Vec<_>>());
        assert!(m.unlabeled_ids.is_empty());
    }

    #[test]
    fn eighth_of_sixteen() {
        let m = make_split("d", 16, "1/8".parse().unwrap(), 3).unwrap();
        assert_eq!(m.labeled_ids.len(), 2);
        assert_eq!(m.unlabeled_ids.len(), 14);
    }

    #[test]
    fn zero_labeled_rejected() {
        assert!(matches!(
            make_split("d", 4, "1/16".parse().unwrap(), 0),
            Err(GctError::InvalidConfig { .. })
        ));
        assert!("0/4".parse::<Ratio>().is_err());
        assert!("3/2".parse::<Ratio>().is_err());
        assert!("x".parse::<Ratio>().is_err());
    }

    #[test]
    fn manifest_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        let m = make_split("seg", 64, "1/4".parse().unwrap(), 9).unwrap();
        m.save(&p).unwrap();
        assert_eq!(SplitManifest::load(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"ratio\": \"1/4\""));
    }

    proptest! {
        #[test]
        fn splits_partition_and_repeat(total in 1usize..300, den in 1u32..20, seed in any::<u64>()) {
            let ratio = Ratio::new(1, den).unwrap();
            prop_assume!(ratio.of(total) > 0);
            let a = make_split("d", total, ratio, seed).unwrap();
            let b = make_split("d", total, ratio, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.check().is_ok());
            let want = (total as f64 / den as f64 + 0.5).floor() as usize;
            prop_assert_eq!(a.labeled_ids.len(), want);
        }
    }
}
