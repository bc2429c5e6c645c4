use fixedbitset::FixedBitSet;

/// Set of class indices over a fixed global universe.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClassSet(FixedBitSet);

impl ClassSet {
    pub fn empty(universe: usize) -> Self {
        Self(FixedBitSet::with_capacity(universe))
    }

    pub fn from_indices(universe: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(universe);
        for i in indices {
            s.insert(i);
        }
        s
    }

    pub fn universe(&self) -> usize {
        self.0.len()
    }

    /// Panics if `class` is outside the universe.
    pub fn insert(&mut self, class: usize) {
        self.0.insert(class);
    }

    pub fn remove(&mut self, class: usize) {
        self.0.set(class, false);
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.contains(class)
    }

    pub fn len(&self) -> usize {
        self.0.count_ones(..)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_clear()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.ones()
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.0.union_with(&other.0);
        out
    }

    pub fn intersection(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.0.intersect_with(&other.0);
        out
    }

    pub fn difference(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.0.difference_with(&other.0);
        out
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.0.is_disjoint(&other.0)
    }

    /// LSB-first packed bytes, `ceil(universe / 8)` long.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.universe().div_ceil(8)];
        for i in self.iter() {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    /// Inverse of [`ClassSet::to_bytes`]; `None` if a bit beyond the universe is set.
    pub fn from_bytes(universe: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != universe.div_ceil(8) {
            return None;
        }
        let mut s = Self::empty(universe);
        for (bi, &b) in bytes.iter().enumerate() {
            for bit in 0..8 {
                if b & (1 << bit) != 0 {
                    let i = bi * 8 + bit;
                    if i >= universe {
                        return None;
                    }
                    s.insert(i);
                }
            }
        }
        Some(s)
    }
}

/// Labels of one training image with provenance: stored/true labels and
/// pseudo labels restored from a previous model. The sets are disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    pub truth: ClassSet,
    pub pseudo: ClassSet,
}

impl Annotation {
    pub fn from_truth(truth: ClassSet) -> Self {
        let pseudo = ClassSet::empty(truth.universe());
        Self { truth, pseudo }
    }

    pub fn merged(&self) -> ClassSet {
        self.truth.union(&self.pseudo)
    }
}
