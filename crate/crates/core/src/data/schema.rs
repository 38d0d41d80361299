use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub name: String,
    /// Number of scalar features.
    pub feature_dim: usize,
    /// Number of tokens the organ contributes to the sequence.
    pub token_count: usize,
}

impl OrganSpec {
    pub fn new(name: &str, feature_dim: usize, token_count: usize) -> Self {
        Self {
            name: name.to_string(),
            feature_dim,
            token_count,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    organs: Vec<OrganSpec>,
}

/// Ordered organ list fixing the token layout: organ `o` owns the half-open
/// patch-token range `span(o)`, and spans tile `[0, n_tokens)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct OrganSchema {
    organs: Vec<OrganSpec>,
    spans: Vec<Range<usize>>,
}

impl TryFrom<SchemaFile> for OrganSchema {
    type Error = DataError;
    fn try_from(f: SchemaFile) -> Result<Self, DataError> {
        OrganSchema::new(f.organs)
    }
}

impl From<OrganSchema> for SchemaFile {
    fn from(s: OrganSchema) -> Self {
        SchemaFile { organs: s.organs }
    }
}

pub const ORGAN_NAMES: [&str; 7] = ["Brain", "Heart", "Adipose", "Liver", "Kidney", "Spleen", "Pancreas"];

impl OrganSchema {
    pub fn new(organs: Vec<OrganSpec>) -> Result<Self, DataError> {
        if organs.is_empty() {
            return Err(DataError::Schema("no organs".into()));
        }
        if organs.len() > 64 {
            return Err(DataError::Schema("more than 64 organs".into()));
        }
        let mut seen = BTreeSet::new();
        let mut spans = Vec::with_capacity(organs.len());
        let mut start = 0;
        for o in &organs {
            if o.name.is_empty() {
                return Err(DataError::Schema("organ with empty name".into()));
            }
            if !seen.insert(o.name.as_str()) {
                return Err(DataError::Schema(format!("duplicate organ name {}", o.name)));
            }
            if o.feature_dim == 0 {
                return Err(DataError::Schema(format!(
                    "organ {}: feature_dim must be positive",
                    o.name
                )));
            }
            if o.token_count == 0 {
                return Err(DataError::Schema(format!(
                    "organ {}: token_count must be positive",
                    o.name
                )));
            }
            spans.push(start..start + o.token_count);
            start += o.token_count;
        }
        Ok(Self { organs, spans })
    }

    fn seven(dims: [usize; 7], tokens: [usize; 7]) -> Self {
        let organs = ORGAN_NAMES
            .iter()
            .zip(dims)
            .zip(tokens)
            .map(|((n, d), k)| OrganSpec::new(n, d, k))
            .collect();
        Self::new(organs).expect("built-in schema is valid")
    }

    /// Full-size seven-organ layout (128 tokens, 228 features).
    pub fn reference() -> Self {
        Self::seven([119, 80, 16, 4, 3, 3, 3], [64, 32, 16, 4, 4, 4, 4])
    }

    /// Desk-scale seven-organ layout (18 tokens).
    pub fn desk() -> Self {
        Self::seven([12, 8, 4, 2, 2, 2, 2], [8, 4, 2, 1, 1, 1, 1])
    }

    pub fn organs(&self) -> &[OrganSpec] {
        &self.organs
    }

    pub fn organ(&self, o: usize) -> &OrganSpec {
        &self.organs[o]
    }

    pub fn len(&self) -> usize {
        self.organs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.organs.is_empty()
    }

    /// Total patch tokens N.
    pub fn n_tokens(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }

    pub fn total_features(&self) -> usize {
        self.organs.iter().map(|o| o.feature_dim).sum()
    }

    pub fn span(&self, o: usize) -> Range<usize> {
        self.spans[o].clone()
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.organs.iter().position(|o| o.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.organs.iter().map(|o| o.name.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_layout() {
        let s = OrganSchema::reference();
        assert_eq!(s.n_tokens(), 128);
        assert_eq!(s.span(0), 0..64);
        assert_eq!(s.total_features(), 228);
        assert_eq!(s.span(6), 124..128);
    }

    #[test]
    fn desk_layout() {
        let s = OrganSchema::desk();
        assert_eq!(s.n_tokens(), 18);
        assert_eq!(s.span(2), 12..14);
    }

    #[test]
    fn single_organ() {
        let s = OrganSchema::new(alloc::vec![OrganSpec::new("X", 2, 1)]).unwrap();
        assert_eq!(s.n_tokens(), 1);
        assert_eq!(s.span(0), 0..1);
    }

    #[test]
    fn rejects_bad_entries() {
        let dup = OrganSchema::new(alloc::vec![OrganSpec::new("A", 1, 1), OrganSpec::new("A", 2, 1)]);
        assert!(matches!(dup, Err(DataError::Schema(m)) if m.contains("duplicate organ name A")));
        let zero = OrganSchema::new(alloc::vec![OrganSpec::new("B", 0, 1)]);
        assert!(matches!(zero, Err(DataError::Schema(m)) if m.contains("organ B")));
        let zero_k = OrganSchema::new(alloc::vec![OrganSpec::new("C", 1, 0)]);
        assert!(matches!(zero_k, Err(DataError::Schema(m)) if m.contains("organ C")));
    }

    #[test]
    fn spans_partition_tokens() {
        for s in [OrganSchema::reference(), OrganSchema::desk()] {
            let mut next = 0;
            for (o, span) in s.spans().iter().enumerate() {
                assert_eq!(span.start, next);
                assert_eq!(span.len(), s.organ(o).token_count);
                next = span.end;
            }
            assert_eq!(next, s.n_tokens());
        }
    }
}
