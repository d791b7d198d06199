//! Trainable byte-pair-style tokenizers over a shared alphabet.
//!
//! Two deliberately mismatched vocabularies are produced by training with
//! different merge counts on the same corpus. Whitespace is an ordinary
//! alphabet symbol: there is no pre-tokenization, which keeps reverse
//! translation between the two spaces exact.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

const TOKENIZER_FILE_VERSION: u32 = 1;

/// A merge-rule tokenizer. Immutable after training; safe to share across
/// concurrent readers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    surfaces: Vec<String>,
    ids: HashMap<String, TokenId>,
    char_ids: HashMap<char, TokenId>,
    /// (left_id, right_id) -> (rank, merged_id), rebuilt from `merges`.
    merge_table: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl Tokenizer {
    /// Train a tokenizer on `corpus` with at most `num_merges` merge rules.
    ///
    /// The most frequent adjacent pair is merged at each step; ties are
    /// broken by lexicographic order of the merged surface string, so builds
    /// are deterministic given corpus order.
    pub fn train_bpe(corpus: &[String], num_merges: usize) -> Result<Tokenizer> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let alphabet: Vec<char> = corpus
            .iter()
            .flat_map(|s| s.chars())
            .collect::<BTreeSet<char>>()
            .into_iter()
            .collect();

        let mut tok = Tokenizer {
            alphabet: alphabet.clone(),
            merges: Vec::new(),
            surfaces: Vec::new(),
            ids: HashMap::new(),
            char_ids: HashMap::new(),
            merge_table: HashMap::new(),
        };
        for c in &alphabet {
            let id = tok.surfaces.len() as TokenId;
            tok.surfaces.push(c.to_string());
            tok.ids.insert(c.to_string(), id);
            tok.char_ids.insert(*c, id);
        }

        // Working corpus as id sequences over the current vocab.
        let mut seqs: Vec<Vec<TokenId>> = corpus
            .iter()
            .map(|s| s.chars().map(|c| tok.char_ids[&c]).collect())
            .collect();

        for _ in 0..num_merges {
            let mut counts: BTreeMap<(TokenId, TokenId), u64> = BTreeMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            let best = counts.iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Higher "priority" = lexicographically smaller merged
                    // string, so compare reversed for max_by.
                    let sa = format!("{}{}", tok.surfaces[pa.0 as usize], tok.surfaces[pa.1 as usize]);
                    let sb = format!("{}{}", tok.surfaces[pb.0 as usize], tok.surfaces[pb.1 as usize]);
                    sb.cmp(&sa)
                })
            });
            let (&(left, right), _) = match best {
                Some(b) => b,
                None => break, // corpus exhausted all pairs
            };
            let merged = format!("{}{}", tok.surfaces[left as usize], tok.surfaces[right as usize]);
            let new_id = tok.surfaces.len() as TokenId;
            tok.merges
                .push((tok.surfaces[left as usize].clone(), tok.surfaces[right as usize].clone()));
            tok.surfaces.push(merged.clone());
            tok.ids.insert(merged, new_id);
            tok.merge_table
                .insert((left, right), (tok.merges.len() - 1, new_id));

            for seq in &mut seqs {
                apply_merge(seq, left, right, new_id);
            }
        }
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Surface string of a token id.
    pub fn surface(&self, id: TokenId) -> Result<&str> {
        self.surfaces
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(Error::UnknownTokenId(id))
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.ids.get(surface).copied()
    }

    /// Tokenize `text` by repeatedly applying the highest-priority
    /// (earliest-trained) applicable merge rule until none applies.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut seq: Vec<TokenId> = Vec::with_capacity(text.len());
        for c in text.chars() {
            match self.char_ids.get(&c) {
                Some(&id) => seq.push(id),
                None => return Err(Error::UnknownSymbol(c)),
            }
        }
        loop {
            let mut best: Option<(usize, usize, TokenId)> = None; // (rank, pos, merged_id)
            for (i, w) in seq.windows(2).enumerate() {
                if let Some(&(rank, merged)) = self.merge_table.get(&(w[0], w[1])) {
                    if best.map_or(true, |(r, _, _)| rank < r) {
                        best = Some((rank, i, merged));
                    }
                }
            }
            match best {
                Some((_, pos, merged)) => {
                    seq[pos] = merged;
                    seq.remove(pos + 1);
                }
                None => break,
            }
        }
        Ok(seq)
    }

    /// Concatenate surface strings; left inverse of [`Tokenizer::tokenize`].
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.surface(id)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TokenizerFile {
            version: TOKENIZER_FILE_VERSION,
            alphabet: self.alphabet.clone(),
            merges: self.merges.clone(),
            vocab: self
                .surfaces
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i as TokenId))
                .collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let file: TokenizerFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.version != TOKENIZER_FILE_VERSION {
            return Err(Error::VersionMismatch {
                found: file.version,
                expected: TOKENIZER_FILE_VERSION,
            });
        }
        let mut surfaces = vec![String::new(); file.vocab.len()];
        for (s, id) in &file.vocab {
            let slot = surfaces
                .get_mut(*id as usize)
                .ok_or_else(|| Error::CorruptFile(format!("vocab id {id} out of range")))?;
            *slot = s.clone();
        }
        let mut tok = Tokenizer {
            alphabet: file.alphabet,
            merges: file.merges,
            ids: file.vocab.into_iter().collect(),
            char_ids: HashMap::new(),
            merge_table: HashMap::new(),
            surfaces,
        };
        for c in &tok.alphabet {
            let id = *tok
                .ids
                .get(&c.to_string())
                .ok_or_else(|| Error::CorruptFile(format!("alphabet symbol {c:?} missing from vocab")))?;
            tok.char_ids.insert(*c, id);
        }
        for (rank, (l, r)) in tok.merges.iter().enumerate() {
            let merged = format!("{l}{r}");
            let (lid, rid, mid) = match (tok.ids.get(l), tok.ids.get(r), tok.ids.get(&merged)) {
                (Some(&a), Some(&b), Some(&m)) => (a, b, m),
                _ => return Err(Error::CorruptFile(format!("merge ({l:?},{r:?}) references unknown tokens"))),
            };
            tok.merge_table.insert((lid, rid), (rank, mid));
        }
        Ok(tok)
    }
}

fn apply_merge(seq: &mut Vec<TokenId>, left: TokenId, right: TokenId, merged: TokenId) {
    let mut i = 0;
    while i + 1 < seq.len() {
        if seq[i] == left && seq[i + 1] == right {
            seq[i] = merged;
            seq.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    vocab: Vec<(String, TokenId)>,
}

/// Bijective partial map between draft and target token ids whose surface
/// strings are identical.
#[derive(Debug, Clone, Default)]
pub struct DirectMap {
    draft_to_target: BTreeMap<TokenId, TokenId>,
    target_to_draft: BTreeMap<TokenId, TokenId>,
}

impl DirectMap {
    pub fn to_target(&self, draft: TokenId) -> Option<TokenId> {
        self.draft_to_target.get(&draft).copied()
    }

    pub fn to_draft(&self, target: TokenId) -> Option<TokenId> {
        self.target_to_draft.get(&target).copied()
    }

    pub fn len(&self) -> usize {
        self.draft_to_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draft_to_target.is_empty()
    }

    pub fn draft_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.draft_to_target.keys().copied()
    }

    /// Pairs of (draft, target) ids in draft-id order.
    pub fn pairs(&self) -> impl Iterator<Item = (TokenId, TokenId)> + '_ {
        self.draft_to_target.iter().map(|(&d, &t)| (d, t))
    }

    /// Rebuild a map from (draft, target) pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (TokenId, TokenId)>) -> DirectMap {
        let mut map = DirectMap::default();
        for (d, t) in pairs {
            map.draft_to_target.insert(d, t);
            map.target_to_draft.insert(t, d);
        }
        map
    }
}

/// Intersection of the two vocabularies by surface string.
pub fn compute_direct_map(tok_q: &Tokenizer, tok_p: &Tokenizer) -> DirectMap {
    let mut map = DirectMap::default();
    for (id, surface) in tok_q.surfaces.iter().enumerate() {
        if let Some(tid) = tok_p.id_of(surface) {
            map.draft_to_target.insert(id as TokenId, tid);
            map.target_to_draft.insert(tid, id as TokenId);
        }
    }
    map
}
