//! Labeled/unlabeled dataset partitions at a given labeled fraction.

use crate::error::{Error, Result};
use crate::mathutil;
use crate::rng::{self, salt};
use serde::{Deserialize, Serialize};

/// Exact rational labeled fraction, e.g. 1/128.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub numerator: u32,
    pub denominator: u32,
}

impl Fraction {
    pub fn new(numerator: u32, denominator: u32) -> Result<Self> {
        if denominator == 0 {
            return Err(Error::config("fraction denominator must be nonzero"));
        }
        if numerator == 0 {
            return Err(Error::config("fraction must be positive"));
        }
        if numerator > denominator {
            return Err(Error::config("labeled fraction cannot exceed 1"));
        }
        Ok(Fraction { numerator, denominator })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split('/').collect();
        let err = || Error::config(format!("cannot parse fraction '{text}'"));
        match parts.as_slice() {
            [num] => {
                let n: u32 = num.trim().parse().map_err(|_| err())?;
                Fraction::new(n, 1)
            }
            [num, den] => {
                let n: u32 = num.trim().parse().map_err(|_| err())?;
                let d: u32 = den.trim().parse().map_err(|_| err())?;
                Fraction::new(n, d)
            }
            _ => Err(err()),
        }
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl std::fmt::Display for Fraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.denominator == 1 {
            write!(f, "{}", self.numerator)
        } else {
            write!(f, "{}_{}", self.numerator, self.denominator)
        }
    }
}

/// Disjoint, exhaustive split of scene indices into labeled and unlabeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub fraction: Fraction,
    pub seed: u64,
}

/// Number of labeled scenes at a given fraction: `max(1, round(f * total))`.
pub fn labeled_count(total: usize, fraction: Fraction) -> usize {
    let exact = fraction.value() * total as f64;
    (exact.round() as usize).clamp(1, total)
}

/// Deterministically splits `total` scene indices into labeled/unlabeled.
pub fn partition(total: usize, fraction: Fraction, seed: u64) -> Result<Partition> {
    if total == 0 {
        return Err(Error::config("cannot partition an empty dataset"));
    }
    let count = labeled_count(total, fraction);
    let mut indices: Vec<usize> = (0..total).collect();
    let mut r = rng::stream(&[seed, salt::PARTITION]);
    mathutil::shuffle(&mut indices, &mut r);
    let mut labeled: Vec<usize> = indices[..count].to_vec();
    let mut unlabeled: Vec<usize> = indices[count..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(Partition { labeled, unlabeled, fraction, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn published_partition_sizes() {
        // 20210-scene corpus at 1/128 has 158 labeled scenes
        assert_eq!(labeled_count(20210, Fraction::new(1, 128).unwrap()), 158);
        // ~118k-scene corpus at 1/512 has 232
        assert_eq!(labeled_count(118_784, Fraction::new(1, 512).unwrap()), 232);
    }

    #[test]
    fn full_supervision() {
        let p = partition(10, Fraction::new(1, 1).unwrap(), 0).unwrap();
        assert_eq!(p.labeled.len(), 10);
        assert!(p.unlabeled.is_empty());
    }

    #[test]
    fn fraction_above_one_rejected() {
        assert!(Fraction::new(3, 2).is_err());
        assert!(Fraction::parse("3/2").is_err());
        assert_eq!(Fraction::parse("1/16").unwrap(), Fraction::new(1, 16).unwrap());
    }

    #[test]
    fn deterministic() {
        let f = Fraction::new(1, 16).unwrap();
        assert_eq!(partition(512, f, 7).unwrap(), partition(512, f, 7).unwrap());
        assert_ne!(partition(512, f, 7).unwrap(), partition(512, f, 8).unwrap());
    }

    #[test]
    fn at_least_one_labeled() {
        let p = partition(5, Fraction::new(1, 128).unwrap(), 0).unwrap();
        assert_eq!(p.labeled.len(), 1);
    }

    proptest! {
        #[test]
        fn disjoint_and_exhaustive(total in 1usize..300, den in 1u32..200, seed in 0u64..50) {
            let f = Fraction::new(1, den).unwrap();
            let p = partition(total, f, seed).unwrap();
            let mut all: Vec<usize> = p.labeled.iter().chain(p.unlabeled.iter()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..total).collect::<Vec<_>>());
            prop_assert_eq!(p.labeled.len(), labeled_count(total, f));
        }
    }
}
