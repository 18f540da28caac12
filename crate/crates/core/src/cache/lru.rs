use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use thiserror::Error;

use crate::model::ObjectPath;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub path: ObjectPath,
    pub size_bytes: u64,
    pub last_access_ms: u64,
    pub disk_file: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("object of {size} bytes exceeds cache capacity {capacity}")]
pub struct AdmitError {
    pub size: u64,
    pub capacity: u64,
}

/// Capacity-bounded index ordered by recency of access.
///
/// Recency is `(last_access_ms, sequence)`, so entries touched in the same
/// millisecond keep their touch order.
#[derive(Debug)]
pub struct LruIndex {
    capacity: u64,
    used: u64,
    next_seq: u64,
    entries: HashMap<ObjectPath, (CacheEntry, u64)>,
    order: BTreeMap<(u64, u64), ObjectPath>,
}

impl LruIndex {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            used: 0,
            next_seq: 0,
            entries: HashMap::new(),
            order: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, path: &ObjectPath) -> bool {
        self.entries.contains_key(path)
    }

    pub fn get(&self, path: &ObjectPath) -> Option<&CacheEntry> {
        self.entries.get(path).map(|(e, _)| e)
    }

    fn bump(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    /// Marks `path` as accessed at `now_ms`.
    pub fn touch(&mut self, path: &ObjectPath, now_ms: u64) -> Option<&CacheEntry> {
        let seq = self.bump();
        let (entry, old_seq) = self.entries.get_mut(path)?;
        self.order.remove(&(entry.last_access_ms, *old_seq));
        entry.last_access_ms = now_ms;
        *old_seq = seq;
        self.order.insert((now_ms, seq), path.clone());
        Some(entry)
    }

    pub fn remove(&mut self, path: &ObjectPath) -> Option<CacheEntry> {
        let (entry, seq) = self.entries.remove(path)?;
        self.order.remove(&(entry.last_access_ms, seq));
        self.used -= entry.size_bytes;
        Some(entry)
    }

    /// Inserts an entry, evicting least-recently-accessed entries (oldest
    /// first) until it fits. A previous entry for the same path is replaced
    /// without being reported as an eviction.
    pub fn admit(
        &mut self,
        path: ObjectPath,
        size_bytes: u64,
        now_ms: u64,
        disk_file: PathBuf,
    ) -> Result<Vec<CacheEntry>, AdmitError> {
        if size_bytes > self.capacity {
            return Err(AdmitError {
                size: size_bytes,
                capacity: self.capacity,
            });
        }
        self.remove(&path);
        let mut evicted = Vec::new();
        while self.used + size_bytes > self.capacity {
            let (_, victim) = self.order.pop_first().expect("used > 0 implies entries");
            let (entry, _) = self.entries.remove(&victim).expect("order and entries agree");
            self.used -= entry.size_bytes;
            evicted.push(entry);
        }
        let seq = self.bump();
        self.order.insert((now_ms, seq), path.clone());
        self.used += size_bytes;
        self.entries.insert(
            path.clone(),
            (
                CacheEntry {
                    path,
                    size_bytes,
                    last_access_ms: now_ms,
                    disk_file,
                },
                seq,
            ),
        );
        Ok(evicted)
    }

    /// Entries from least to most recently accessed.
    pub fn entries_by_recency(&self) -> Vec<&CacheEntry> {
        self.order.values().map(|p| &self.entries[p].0).collect()
    }
}


#[cfg(test)]
mod oracle {
    //! Independent list-based LRU: a vector ordered from least to most
    //! recently used; touches move an element to the back.
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct ListLru {
        capacity: u64,
        items: Vec<(String, u64)>,
    }

    impl ListLru {
        fn touch(&mut self, path: &str) {
            if let Some(i) = self.items.iter().position(|(p, _)| p == path) {
                let item = self.items.remove(i);
                self.items.push(item);
            }
        }

        fn admit(&mut self, path: &str, size: u64) -> Vec<String> {
            self.items.retain(|(p, _)| p != path);
            let mut evicted = Vec::new();
            while self.items.iter().map(|(_, s)| s).sum::<u64>() + size > self.capacity {
                evicted.push(self.items.remove(0).0);
            }
            self.items.push((path.to_owned(), size));
            evicted
        }
    }

    #[test]
    fn matches_list_oracle_over_random_workload() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let capacity = 1_000;
            let mut index = LruIndex::new(capacity);
            let mut oracle = ListLru { capacity, items: Vec::new() };
            let mut now = 0u64;
            for _ in 0..1_000 {
                now += rng.gen_range(0..3);
                let path = format!("/ns/obj{}", rng.gen_range(0..40));
                if rng.gen_bool(0.3) {
                    index.touch(&ObjectPath::parse(&path).unwrap(), now);
                    oracle.touch(&path);
                } else {
                    let size = rng.gen_range(1..=300);
                    let got: Vec<String> = index
                        .admit(ObjectPath::parse(&path).unwrap(), size, now, PathBuf::new())
                        .unwrap()
                        .into_iter()
                        .map(|e| e.path.to_string())
                        .collect();
                    assert_eq!(got, oracle.admit(&path, size));
                }
                assert!(index.used() <= capacity);
                let listed: u64 = index.entries_by_recency().iter().map(|e| e.size_bytes).sum();
                assert_eq!(listed, index.used());
            }
        }
    }
}
