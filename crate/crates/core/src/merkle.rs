//! SHA-256 Merkle trees over checkpoint digests.
//!
//! Level 0 holds the leaves; each level above pairs neighbours as
//! `SHA-256(left || right)`. An unpaired last node is carried up unchanged.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::simnet::ModelWeights;

pub const SIDECAR_MAGIC: [u8; 4] = *b"VTMT";
pub const SIDECAR_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum MerkleError {
    #[error("cannot build a Merkle tree without leaves")]
    Empty,
    #[error("node ({level}, {index}) is outside the tree")]
    OutOfRange { level: usize, index: usize },
    #[error("checkpoint schedule mismatch: {0} vs {1} leaves")]
    ScheduleMismatch(usize, usize),
    #[error("non-finite weight in layer {layer} at index {index}")]
    NonFiniteWeight { layer: usize, index: usize },
    #[error("unsupported model precision b_m = {0}, only 32 is supported")]
    UnsupportedPrecision(u32),
    #[error("invalid digest: {0}")]
    InvalidDigest(String),
    #[error("not a checkpoint tree file")]
    NotASidecar,
    #[error("unsupported checkpoint tree version {0}")]
    UnsupportedVersion(u8),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A SHA-256 digest, printed as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn combine(left: &Digest, right: &Digest) -> Self {
        let mut h = Sha256::new();
        h.update(left.0);
        h.update(right.0);
        Self(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = MerkleError;

    fn from_str(s: &str) -> Result<Self, MerkleError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| MerkleError::InvalidDigest(format!("{s:?}: {e}")))?;
        Ok(Self(out))
    }
}

impl TryFrom<String> for Digest {
    type Error = MerkleError;

    fn try_from(s: String) -> Result<Self, MerkleError> {
        s.parse()
    }
}

impl From<Digest> for String {
    fn from(d: Digest) -> String {
        d.to_hex()
    }
}

/// Canonical byte form of model weights: layers in order, each weight matrix
/// row-major then its bias, every element as a little-endian FP32.
pub fn canonical_weight_bytes(weights: &ModelWeights, b_m: u32) -> Result<Vec<u8>, MerkleError> {
    if b_m != 32 {
        return Err(MerkleError::UnsupportedPrecision(b_m));
    }
    let mut out = Vec::with_capacity(weights.parameter_count() * 4);
    for (layer, params) in weights.layers.iter().enumerate() {
        let elements = params.weight.data().iter().chain(params.bias.data());
        for (index, &v) in elements.enumerate() {
            let single = v as f32;
            if !v.is_finite() || !single.is_finite() {
                return Err(MerkleError::NonFiniteWeight { layer, index });
            }
            out.extend_from_slice(&single.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn hash_weights(weights: &ModelWeights, b_m: u32) -> Result<Digest, MerkleError> {
    Ok(Digest::of(&canonical_weight_bytes(weights, b_m)?))
}

/// Which side of the running hash a sibling sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub digest: Digest,
    pub side: Side,
}

/// Authentication path from a leaf to the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerklePath {
    pub leaf_index: usize,
    pub leaf_count: usize,
    pub leaf: Digest,
    pub siblings: Vec<PathStep>,
}

/// Sibling sides a well-formed path for `leaf_index` must have; `None` if the
/// index is out of range.
fn expected_sides(leaf_index: usize, leaf_count: usize) -> Option<Vec<Side>> {
    if leaf_index >= leaf_count {
        return None;
    }
    let (mut index, mut width) = (leaf_index, leaf_count);
    let mut sides = Vec::new();
    while width > 1 {
        if index % 2 == 1 {
            sides.push(Side::Left);
        } else if index + 1 < width {
            sides.push(Side::Right);
        }
        index /= 2;
        width = width.div_ceil(2);
    }
    Some(sides)
}

impl MerklePath {
    /// Root implied by the path.
    pub fn implied_root(&self) -> Digest {
        self.siblings
            .iter()
            .fold(self.leaf, |acc, step| match step.side {
                Side::Left => Digest::combine(&step.digest, &acc),
                Side::Right => Digest::combine(&acc, &step.digest),
            })
    }

    /// Checks the path's shape against its claimed position and that it
    /// hashes up to `root`.
    pub fn verify(&self, root: &Digest) -> bool {
        let Some(sides) = expected_sides(self.leaf_index, self.leaf_count) else {
            return false;
        };
        sides.len() == self.siblings.len()
            && sides
                .iter()
                .zip(&self.siblings)
                .all(|(s, step)| *s == step.side)
            && self.implied_root() == *root
    }
}

/// Outcome of a binary descent between two trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descent {
    pub first_divergent_leaf: Option<usize>,
    /// Node comparisons made below the root.
    pub comparisons: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    levels: Vec<Vec<Digest>>,
}

impl MerkleTree {
    pub fn build(leaves: Vec<Digest>) -> Result<Self, MerkleError> {
        if leaves.is_empty() {
            return Err(MerkleError::Empty);
        }
        let mut levels = vec![leaves];
        while levels.last().map_or(0, Vec::len) > 1 {
            let below = levels.last().expect("nonempty");
            let next = below
                .chunks(2)
                .map(|pair| match pair {
                    [l, r] => Digest::combine(l, r),
                    [single] => *single,
                    _ => unreachable!(),
                })
                .collect();
            levels.push(next);
        }
        Ok(Self { levels })
    }

    pub fn root(&self) -> Digest {
        self.levels.last().expect("nonempty")[0]
    }

    pub fn leaves(&self) -> &[Digest] {
        &self.levels[0]
    }

    pub fn leaf_count(&self) -> usize {
        self.levels[0].len()
    }

    /// Number of levels including leaves and root.
    pub fn height(&self) -> usize {
        self.levels.len()
    }

    pub fn level_width(&self, level: usize) -> Option<usize> {
        self.levels.get(level).map(Vec::len)
    }

    pub fn node(&self, level: usize, index: usize) -> Result<Digest, MerkleError> {
        self.levels
            .get(level)
            .and_then(|l| l.get(index))
            .copied()
            .ok_or(MerkleError::OutOfRange { level, index })
    }

    pub fn path(&self, leaf_index: usize) -> Result<MerklePath, MerkleError> {
        if leaf_index >= self.leaf_count() {
            return Err(MerkleError::OutOfRange {
                level: 0,
                index: leaf_index,
            });
        }
        let mut siblings = Vec::new();
        let mut index = leaf_index;
        for level in &self.levels[..self.levels.len() - 1] {
            if index % 2 == 1 {
                siblings.push(PathStep {
                    digest: level[index - 1],
                    side: Side::Left,
                });
            } else if let Some(right) = level.get(index + 1) {
                siblings.push(PathStep {
                    digest: *right,
                    side: Side::Right,
                });
            }
            index /= 2;
        }
        Ok(MerklePath {
            leaf_index,
            leaf_count: self.leaf_count(),
            leaf: self.levels[0][leaf_index],
            siblings,
        })
    }

    /// Finds the first differing leaf by descending only into mismatching
    /// children, leftmost first.
    pub fn descend(&self, other: &MerkleTree) -> Result<Descent, MerkleError> {
        if self.leaf_count() != other.leaf_count() {
            return Err(MerkleError::ScheduleMismatch(
                self.leaf_count(),
                other.leaf_count(),
            ));
        }
        let mut comparisons = 0;
        if self.root() == other.root() {
            return Ok(Descent {
                first_divergent_leaf: None,
                comparisons,
            });
        }
        let mut index = 0;
        for level in (0..self.height() - 1).rev() {
            let (left, right) = (2 * index, 2 * index + 1);
            if right >= self.levels[level].len() {
                // Promoted node: identical digest one level down.
                index = left;
                continue;
            }
            comparisons += 1;
            index = if self.levels[level][left] != other.levels[level][left] {
                left
            } else {
                comparisons += 1;
                right
            };
        }
        Ok(Descent {
            first_divergent_leaf: Some(index),
            comparisons,
        })
    }

    pub fn first_divergence(&self, other: &MerkleTree) -> Result<Option<usize>, MerkleError> {
        Ok(self.descend(other)?.first_divergent_leaf)
    }

    pub fn write_sidecar<W: Write>(&self, mut w: W) -> Result<(), MerkleError> {
        w.write_all(&SIDECAR_MAGIC)?;
        w.write_all(&[SIDECAR_VERSION])?;
        w.write_all(&(self.leaf_count() as u64).to_le_bytes())?;
        for leaf in self.leaves() {
            w.write_all(&leaf.0)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_sidecar<R: Read>(mut r: R) -> Result<Self, MerkleError> {
        let mut head = [0u8; 13];
        r.read_exact(&mut head)
            .map_err(|_| MerkleError::NotASidecar)?;
        if head[..4] != SIDECAR_MAGIC {
            return Err(MerkleError::NotASidecar);
        }
        if head[4] != SIDECAR_VERSION {
            return Err(MerkleError::UnsupportedVersion(head[4]));
        }
        let count = u64::from_le_bytes(head[5..].try_into().expect("8 bytes"));
        let mut leaves = Vec::new();
        for _ in 0..count {
            let mut d = [0u8; 32];
            r.read_exact(&mut d)?;
            leaves.push(Digest(d));
        }
        Self::build(leaves)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MerkleError> {
        self.write_sidecar(io::BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MerkleError> {
        Self::read_sidecar(io::BufReader::new(fs::File::open(path)?))
    }
}
