//! Disjoint train/val/test partitions of the class and domain axes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
        }
    }
}

impl fmt::Display for SplitPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Config(format!("unknown split part `{other}`"))),
        }
    }
}

/// Sorted index sets of one axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    /// Disjoint, exhaustive over `0..n`, no empty part.
    pub fn validate(&self, n: usize, axis: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for part in [SplitPart::Train, SplitPart::Val, SplitPart::Test] {
            let ids = self.part(part);
            if ids.is_empty() {
                return Err(Error::Config(format!("{axis} part `{part}` is empty")));
            }
            for &i in ids {
                if i >= n {
                    return Err(Error::Config(format!("{axis} index {i} out of range 0..{n}")));
                }
                if !seen.insert(i) {
                    return Err(Error::Config(format!("{axis} index {i} appears in two parts")));
                }
            }
        }
        if seen.len() != n {
            return Err(Error::Config(format!(
                "{axis} partition covers {} of {n} indices",
                seen.len()
            )));
        }
        Ok(())
    }
}

/// Train/val/test fractions per axis; each triple sums to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub classes: [f64; 3],
    pub domains: [f64; 3],
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            classes: [0.5, 0.25, 0.25],
            domains: [0.5, 0.25, 0.25],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub classes: Partition,
    pub domains: Partition,
}

impl SplitSpec {
    pub fn validate(&self, class_count: usize, domain_count: usize) -> Result<()> {
        self.classes.validate(class_count, "class")?;
        self.domains.validate(domain_count, "domain")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Largest-remainder apportionment of `n` items.
fn part_sizes(n: usize, fractions: [f64; 3], axis: &str) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(Error::Config(format!("{axis} fractions must be positive: {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{axis} fractions sum to {total}, not 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    // stable: equal remainders favor the earlier part
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(n - assigned) {
        sizes[i] += 1;
    }
    for (part, s) in [SplitPart::Train, SplitPart::Val, SplitPart::Test].iter().zip(&sizes) {
        if *s == 0 {
            return Err(Error::Config(format!(
                "{axis} part `{part}` would be empty ({n} {axis} indices, fractions {fractions:?})"
            )));
        }
    }
    Ok(sizes)
}

fn partition(n: usize, fractions: [f64; 3], rng: &mut ChaCha8Rng, axis: &str) -> Result<Partition> {
    let sizes = part_sizes(n, fractions, axis)?;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let take = |from: usize, len: usize| {
        let mut v = ids[from..from + len].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Partition {
        train: take(0, sizes[0]),
        val: take(sizes[0], sizes[1]),
        test: take(sizes[0] + sizes[1], sizes[2]),
    })
}

/// Seeded random partition of both axes.
pub fn make_split(
    class_count: usize,
    domain_count: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = partition(class_count, fractions.classes, &mut rng, "class")?;
    let domains = partition(domain_count, fractions.domains, &mut rng, "domain")?;
    Ok(SplitSpec {
        seed,
        fractions,
        classes,
        domains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uneven_fractions_cover_both_axes() {
        let fr = SplitFractions {
            classes: [0.6, 0.1, 0.3],
            domains: [0.5, 0.17, 0.33],
        };
        let s = make_split(10, 6, fr, 1).unwrap();
        s.validate(10, 6).unwrap();
        assert_eq!(
            (s.classes.train.len(), s.classes.val.len(), s.classes.test.len()),
            (6, 1, 3)
        );
        assert_eq!(
            (s.domains.train.len(), s.domains.val.len(), s.domains.test.len()),
            (3, 1, 2)
        );
        let train: BTreeSet<_> = s.classes.train.iter().collect();
        let test: BTreeSet<_> = s.classes.test.iter().collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(make_split(10, 6, fr, 1).unwrap(), s);
        assert_ne!(make_split(10, 6, fr, 2).unwrap(), s);
    }

    #[test]
    fn empty_part_is_an_error() {
        assert!(make_split(2, 8, SplitFractions::default(), 0).is_err());
        let fr = SplitFractions {
            classes: [0.5, 0.5, 0.0],
            ..SplitFractions::default()
        };
        assert!(make_split(10, 8, fr, 0).is_err());
        let fr = SplitFractions {
            classes: [0.5, 0.3, 0.3],
            ..SplitFractions::default()
        };
        assert!(make_split(10, 8, fr, 0).is_err());
    }

    #[test]
    fn default_split_of_default_grid() {
        let s = make_split(20, 8, SplitFractions::default(), 0).unwrap();
        assert_eq!(s.classes.test.len(), 5);
        assert_eq!(s.domains.test.len(), 2);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_split(12, 6, SplitFractions::default(), 9).unwrap();
        let path = dir.path().join("split.json");
        s.save(&path).unwrap();
        assert_eq!(SplitSpec::load(&path).unwrap(), s);
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_exhaustive(classes in 3usize..60, domains in 3usize..20, seed in any::<u64>()) {
            let fr = SplitFractions {
                classes: [0.4, 0.3, 0.3],
                domains: [0.4, 0.3, 0.3],
            };
            let s = make_split(classes, domains, fr, seed).unwrap();
            prop_assert!(s.validate(classes, domains).is_ok());
        }
    }
}
