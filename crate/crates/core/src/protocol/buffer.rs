use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::labels::ClassSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    #[default]
    None,
    PerClass(usize),
    Total(usize),
}

impl BufferPolicy {
    pub fn is_none(&self) -> bool {
        matches!(self, Self::None | Self::PerClass(0) | Self::Total(0))
    }
}

/// Exemplar store. Each stored image is kept once with the true labels known
/// for it and referenced from every class it was selected for.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RehearsalBuffer {
    policy: BufferPolicy,
    per_class: BTreeMap<usize, Vec<u64>>,
    items: BTreeMap<u64, ClassSet>,
}

/// A training image offered to the buffer: id and its known true labels.
#[derive(Clone, Debug)]
pub struct Candidate<'a> {
    pub id: u64,
    pub labels: &'a ClassSet,
}

impl RehearsalBuffer {
    pub fn new(policy: BufferPolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn policy(&self) -> BufferPolicy {
        self.policy
    }

    /// Distinct stored images.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stored ids in ascending order with their known labels.
    pub fn items(&self) -> impl Iterator<Item = (u64, &ClassSet)> {
        self.items.iter().map(|(&id, l)| (id, l))
    }

    pub fn exemplars(&self, class: usize) -> &[u64] {
        self.per_class.get(&class).map_or(&[], Vec::as_slice)
    }

    fn quota(&self, new_classes: usize) -> usize {
        match self.policy {
            BufferPolicy::None => 0,
            BufferPolicy::PerClass(k) => k,
            BufferPolicy::Total(m) => {
                let seen = self.per_class.len() + new_classes;
                (m / seen.max(1)).max(1)
            }
        }
    }

    /// Adds up to the policy quota of uniformly drawn exemplars for each of
    /// `new_classes` among `candidates` truly labeled with it.
    pub fn update<R: Rng + ?Sized>(&mut self, new_classes: &[usize], candidates: &[Candidate], rng: &mut R) {
        if self.policy.is_none() {
            return;
        }
        let quota = self.quota(new_classes.len());
        if let BufferPolicy::Total(_) = self.policy {
            for ids in self.per_class.values_mut() {
                if ids.len() > quota {
                    ids.shuffle(rng);
                    ids.truncate(quota);
                    ids.sort_unstable();
                }
            }
        }
        let mut classes = new_classes.to_vec();
        classes.sort_unstable();
        for class in classes {
            let mut pool: Vec<&Candidate> = candidates.iter().filter(|c| c.labels.contains(class)).collect();
            pool.sort_by_key(|c| c.id);
            pool.dedup_by_key(|c| c.id);
            let chosen: Vec<&Candidate> = pool.choose_multiple(rng, quota.min(pool.len())).copied().collect();
            let mut ids = Vec::with_capacity(chosen.len());
            for c in chosen {
                ids.push(c.id);
                self.items
                    .entry(c.id)
                    .and_modify(|l| *l = l.union(c.labels))
                    .or_insert_with(|| c.labels.clone());
            }
            ids.sort_unstable();
            self.per_class.insert(class, ids);
        }
        self.prune();
        if let BufferPolicy::Total(m) = self.policy {
            while self.items.len() > m {
                let ids: Vec<u64> = self.items.keys().copied().collect();
                let victim = ids[rng.gen_range(0..ids.len())];
                self.items.remove(&victim);
                for list in self.per_class.values_mut() {
                    list.retain(|&i| i != victim);
                }
            }
        }
    }

    fn prune(&mut self) {
        let referenced: std::collections::BTreeSet<u64> = self.per_class.values().flatten().copied().collect();
        self.items.retain(|id, _| referenced.contains(id));
    }
}
