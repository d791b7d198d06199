//! Online cross-vocabulary n-gram cache: drafter sub-token sequences mapped
//! to single target tokens, with frequency/recency metadata, LRU/LFU
//! eviction, statistics, and JSON-lines persistence.
//!
//! Entries are keyed by draft sequence alone (context-free). Length-1
//! mappings live in the direct map, never here.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer};

const CACHE_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionPolicy {
    Lru,
    Lfu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramEntry {
    pub target_token: TokenId,
    pub draft_seq: Vec<TokenId>,
    pub hit_count: u64,
    pub last_used: u64,
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheOpStats {
    pub inserts: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub size: usize,
    pub memory_estimate: usize,
    pub growth_rate: f64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone)]
pub struct NGramCache {
    entries: BTreeMap<Vec<TokenId>, NGramEntry>,
    by_target: BTreeMap<TokenId, Vec<Vec<TokenId>>>,
    capacity: Option<usize>,
    policy: EvictionPolicy,
    max_seq_len: usize,
    pub stats: CacheOpStats,
}

impl NGramCache {
    pub fn new(policy: EvictionPolicy, capacity: Option<usize>) -> NGramCache {
        NGramCache {
            entries: BTreeMap::new(),
            by_target: BTreeMap::new(),
            capacity,
            policy,
            max_seq_len: 0,
            stats: CacheOpStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn entries(&self) -> impl Iterator<Item = &NGramEntry> {
        self.entries.values()
    }

    pub fn get(&self, draft_seq: &[TokenId]) -> Option<&NGramEntry> {
        self.entries.get(draft_seq)
    }

    pub fn entries_for_target(&self, target: TokenId) -> impl Iterator<Item = &NGramEntry> {
        self.by_target
            .get(&target)
            .into_iter()
            .flatten()
            .filter_map(move |k| self.entries.get(k))
    }

    /// Insert a new mapping. Returns false (untouched) when the entry
    /// already exists. The draft sequence must detokenize to the target
    /// token's surface string.
    pub fn insert(
        &mut self,
        tok_q: &Tokenizer,
        tok_p: &Tokenizer,
        target_token: TokenId,
        draft_seq: Vec<TokenId>,
        step: u64,
    ) -> Result<bool> {
        if draft_seq.len() < 2 {
            return Err(Error::NGramTooShort(draft_seq.len()));
        }
        let draft_surface = tok_q.detokenize(&draft_seq)?;
        let target_surface = tok_p.surface(target_token)?;
        if draft_surface != target_surface {
            return Err(Error::SurfaceMismatch {
                draft: draft_surface,
                target: target_surface.to_string(),
            });
        }
        if self.entries.contains_key(&draft_seq) {
            return Ok(false);
        }
        // Make room among existing entries before the insert completes.
        if let Some(cap) = self.capacity {
            while self.entries.len() >= cap && !self.entries.is_empty() {
                self.evict_one();
            }
        }
        self.max_seq_len = self.max_seq_len.max(draft_seq.len());
        self.by_target
            .entry(target_token)
            .or_default()
            .push(draft_seq.clone());
        self.entries.insert(
            draft_seq.clone(),
            NGramEntry {
                target_token,
                draft_seq,
                hit_count: 0,
                last_used: step,
                created_at: step,
            },
        );
        self.stats.inserts += 1;
        Ok(true)
    }

    /// Longest entry whose draft sequence is a prefix of
    /// `draft_tokens[start..]`. A hit bumps hit_count and last_used.
    pub fn lookup_longest(
        &mut self,
        draft_tokens: &[TokenId],
        start: usize,
        now: u64,
    ) -> Option<(NGramEntry, usize)> {
        let remaining = draft_tokens.len().saturating_sub(start);
        let max_len = self.max_seq_len.min(remaining);
        for len in (2..=max_len).rev() {
            let key = &draft_tokens[start..start + len];
            if let Some(entry) = self.entries.get_mut(key) {
                entry.hit_count += 1;
                entry.last_used = now;
                self.stats.hits += 1;
                return Some((entry.clone(), len));
            }
        }
        self.stats.misses += 1;
        None
    }

    fn victim_key(&self) -> Option<Vec<TokenId>> {
        match self.policy {
            EvictionPolicy::Lru => self
                .entries
                .values()
                .min_by_key(|e| e.last_used)
                .map(|e| e.draft_seq.clone()),
            EvictionPolicy::Lfu => self
                .entries
                .values()
                .min_by_key(|e| (e.hit_count, e.last_used))
                .map(|e| e.draft_seq.clone()),
        }
    }

    fn evict_one(&mut self) -> Option<NGramEntry> {
        let key = self.victim_key()?;
        let entry = self.entries.remove(&key)?;
        if let Some(keys) = self.by_target.get_mut(&entry.target_token) {
            keys.retain(|k| k != &key);
            if keys.is_empty() {
                self.by_target.remove(&entry.target_token);
            }
        }
        self.stats.evictions += 1;
        Some(entry)
    }

    /// Evict until the entry count fits the capacity. Returns the victims.
    pub fn evict_if_needed(&mut self) -> Vec<NGramEntry> {
        let mut out = Vec::new();
        if let Some(cap) = self.capacity {
            while self.entries.len() > cap {
                match self.evict_one() {
                    Some(e) => out.push(e),
                    None => break,
                }
            }
        }
        out
    }

    pub fn set_capacity(&mut self, capacity: Option<usize>) -> Vec<NGramEntry> {
        self.capacity = capacity;
        self.evict_if_needed()
    }

    pub fn stats_snapshot(&self, tokens_processed: u64) -> Result<CacheStats> {
        if tokens_processed == 0 {
            return Err(Error::NoTokensProcessed);
        }
        let memory_estimate: usize = self
            .entries
            .values()
            .map(|e| {
                serde_json::to_string(&EntryRecord {
                    target_surface: String::new(),
                    draft_surfaces: e.draft_seq.iter().map(|_| String::new()).collect(),
                    hit_count: e.hit_count,
                    last_used: e.last_used,
                    created_at: e.created_at,
                })
                .map(|s| s.len() + e.draft_seq.len() * 4)
                .unwrap_or(0)
            })
            .sum();
        let total_lookups = self.stats.hits + self.stats.misses;
        Ok(CacheStats {
            size: self.entries.len(),
            memory_estimate,
            growth_rate: self.entries.len() as f64 / tokens_processed as f64,
            hit_rate: if total_lookups == 0 {
                0.0
            } else {
                self.stats.hits as f64 / total_lookups as f64
            },
        })
    }

    /// Histogram of entry hit counts, for the frequency-distribution table.
    pub fn frequency_histogram(&self) -> BTreeMap<u64, usize> {
        let mut bins = BTreeMap::new();
        for e in self.entries.values() {
            *bins.entry(e.hit_count).or_insert(0) += 1;
        }
        bins
    }

    /// JSON-lines persistence. Surfaces (not ids) are stored so caches
    /// survive tokenizer re-serialization.
    pub fn save(&self, tok_q: &Tokenizer, tok_p: &Tokenizer, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        let header = HeaderRecord {
            version: CACHE_FILE_VERSION,
            policy: self.policy,
            capacity: self.capacity,
            stats: self.stats,
        };
        writeln!(file, "{}", serde_json::to_string(&header)?)?;
        for entry in self.entries.values() {
            let rec = EntryRecord {
                target_surface: tok_p.surface(entry.target_token)?.to_string(),
                draft_surfaces: entry
                    .draft_seq
                    .iter()
                    .map(|&d| tok_q.surface(d).map(String::from))
                    .collect::<Result<Vec<_>>>()?,
                hit_count: entry.hit_count,
                last_used: entry.last_used,
                created_at: entry.created_at,
            };
            writeln!(file, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn load(tok_q: &Tokenizer, tok_p: &Tokenizer, path: &Path) -> Result<NGramCache> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::CorruptFile("missing header record".into()))??;
        let header: HeaderRecord = serde_json::from_str(&header_line)?;
        if header.version != CACHE_FILE_VERSION {
            return Err(Error::VersionMismatch {
                found: header.version,
                expected: CACHE_FILE_VERSION,
            });
        }
        let mut cache = NGramCache::new(header.policy, header.capacity);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EntryRecord = serde_json::from_str(&line)?;
            let target_token = tok_p
                .id_of(&rec.target_surface)
                .ok_or_else(|| Error::CorruptFile(format!("unknown target surface {:?}", rec.target_surface)))?;
            let draft_seq = rec
                .draft_surfaces
                .iter()
                .map(|s| {
                    tok_q
                        .id_of(s)
                        .ok_or_else(|| Error::CorruptFile(format!("unknown draft surface {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            cache.insert(tok_q, tok_p, target_token, draft_seq.clone(), rec.created_at)?;
            let entry = cache.entries.get_mut(&draft_seq).expect("just inserted");
            entry.hit_count = rec.hit_count;
            entry.last_used = rec.last_used;
        }
        // Inserts above counted toward stats; restore the saved counters.
        cache.stats = header.stats;
        Ok(cache)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    version: u32,
    policy: EvictionPolicy,
    capacity: Option<usize>,
    #[serde(default)]
    stats: CacheOpStats,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    target_surface: String,
    draft_surfaces: Vec<String>,
    hit_count: u64,
    last_used: u64,
    created_at: u64,
}
