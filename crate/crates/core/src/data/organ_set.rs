use core::fmt;

use serde::{Deserialize, Serialize};

/// A set of organ indices (schema order), at most 64 organs.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OrganSet(u64);

impl OrganSet {
    pub const EMPTY: OrganSet = OrganSet(0);

    /// `{0, .., n-1}`.
    pub fn all(n: usize) -> Self {
        assert!(n <= 64);
        if n == 64 {
            OrganSet(u64::MAX)
        } else {
            OrganSet((1u64 << n) - 1)
        }
    }

    pub fn from_bits(bits: u64) -> Self {
        OrganSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn single(o: usize) -> Self {
        OrganSet(1 << o)
    }

    pub fn from_indices(ix: impl IntoIterator<Item = usize>) -> Self {
        let mut s = OrganSet::EMPTY;
        for i in ix {
            s.insert(i);
        }
        s
    }

    pub fn contains(self, o: usize) -> bool {
        o < 64 && self.0 & (1 << o) != 0
    }

    pub fn insert(&mut self, o: usize) {
        self.0 |= 1 << o;
    }

    pub fn remove(&mut self, o: usize) {
        self.0 &= !(1 << o);
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: Self) -> Self {
        OrganSet(self.0 | other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        OrganSet(self.0 & other.0)
    }

    pub fn difference(self, other: Self) -> Self {
        OrganSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    /// Members in increasing order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&o| self.contains(o))
    }
}

impl fmt::Debug for OrganSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}
