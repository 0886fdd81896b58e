//! Accumulation orders standing in for different accelerator architectures.

use std::fmt;
use std::num::NonZeroUsize;
use std::ops::Add;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;

/// Order in which a reduction adds its terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Left to right.
    Sequential,
    /// Right to left.
    Reversed,
    /// Recursive halving, left half first.
    PairwiseTree,
    /// Left to right within chunks, then left to right over chunk sums.
    Chunked(NonZeroUsize),
}

/// A named, deterministic accumulation order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DeviceProfile {
    pub name: String,
    pub strategy: Strategy,
}

impl DeviceProfile {
    pub fn new(strategy: Strategy) -> Self {
        let name = match strategy {
            Strategy::Sequential => "sequential".to_owned(),
            Strategy::Reversed => "reversed".to_owned(),
            Strategy::PairwiseTree => "pairwise".to_owned(),
            Strategy::Chunked(c) => format!("chunked:{c}"),
        };
        Self { name, strategy }
    }

    pub fn sequential() -> Self {
        Self::new(Strategy::Sequential)
    }

    pub fn reversed() -> Self {
        Self::new(Strategy::Reversed)
    }

    pub fn pairwise() -> Self {
        Self::new(Strategy::PairwiseTree)
    }

    pub fn chunked(chunk: usize) -> Result<Self, SimError> {
        NonZeroUsize::new(chunk)
            .map(|c| Self::new(Strategy::Chunked(c)))
            .ok_or_else(|| SimError::InvalidProfile("chunk size must be at least 1".into()))
    }

    /// The four profiles exercised by the replication tests.
    pub fn standard_set() -> [DeviceProfile; 4] {
        [
            Self::sequential(),
            Self::reversed(),
            Self::pairwise(),
            Self::chunked(7).expect("nonzero"),
        ]
    }

    pub fn reduce<T: Copy + Add<Output = T> + Default>(&self, values: &[T]) -> T {
        reduce(values, self.strategy)
    }
}

impl fmt::Display for DeviceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl FromStr for DeviceProfile {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sequential" => Ok(Self::sequential()),
            "reversed" => Ok(Self::reversed()),
            "pairwise" | "pairwise_tree" | "pairwisetree" => Ok(Self::pairwise()),
            other => {
                let chunk = other
                    .strip_prefix("chunked:")
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| SimError::InvalidProfile(format!("unknown profile {s:?}")))?;
                Self::chunked(chunk)
            }
        }
    }
}

impl TryFrom<String> for DeviceProfile {
    type Error = SimError;

    fn try_from(s: String) -> Result<Self, SimError> {
        s.parse()
    }
}

impl From<DeviceProfile> for String {
    fn from(p: DeviceProfile) -> String {
        p.name
    }
}

fn sequential<T: Copy + Add<Output = T> + Default>(values: &[T]) -> T {
    values.iter().fold(T::default(), |acc, &v| acc + v)
}

fn pairwise<T: Copy + Add<Output = T> + Default>(values: &[T]) -> T {
    match values {
        [] => T::default(),
        [x] => *x,
        _ => {
            let (left, right) = values.split_at(values.len() / 2);
            pairwise(left) + pairwise(right)
        }
    }
}

/// Sums `values` in the order prescribed by `strategy`.
pub fn reduce<T: Copy + Add<Output = T> + Default>(values: &[T], strategy: Strategy) -> T {
    match values {
        [] => T::default(),
        [x] => *x,
        _ => match strategy {
            Strategy::Sequential => sequential(values),
            Strategy::Reversed => values.iter().rev().fold(T::default(), |acc, &v| acc + v),
            Strategy::PairwiseTree => pairwise(values),
            Strategy::Chunked(c) => values
                .chunks(c.get())
                .map(sequential)
                .fold(T::default(), |acc, v| acc + v),
        },
    }
}
