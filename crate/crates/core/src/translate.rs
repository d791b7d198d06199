//! Cross-vocabulary translation: elevate drafter proposals and
//! distributions into the target vocabulary, and map accepted target tokens
//! back into drafter space, discovering new n-gram candidates along the way.
//!
//! A drafter token either maps directly to a target token with the same
//! surface string, or participates in a cached n-gram that merges several
//! drafter tokens into one target token. The merged token's proposal
//! probability is the product of the drafter's conditional probabilities
//! along the merged run, and the elevated full distribution re-allocates the
//! first sub-token's mass between the merged token and its direct image.

use serde::{Deserialize, Serialize};

use crate::cache::{NGramCache, NGramEntry};
use crate::error::{Error, Result};
use crate::lm::{CategoricalDist, VocabSpace};
use crate::tokenizer::{DirectMap, TokenId, Tokenizer};

/// Per-position provenance of a mapped proposal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    /// One draft token mapped by surface identity.
    DirectMapped { draft_idx: usize },
    /// A run of `draft_len` draft tokens starting at `draft_start`, merged
    /// into a single target token through a cache entry.
    NGramMerged { draft_start: usize, draft_len: usize },
}

/// A drafter proposal re-expressed in target space, with one elevated
/// (generally sub-normalized) distribution per emitted target token.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedProposal {
    pub target_tokens: Vec<TokenId>,
    pub elevated: Vec<CategoricalDist>,
    pub segments: Vec<Segment>,
    /// Number of leading draft tokens consumed. Draft tokens that are
    /// neither direct-mapped nor covered by a cache match truncate the
    /// proposal: the target model cannot score them.
    pub consumed_draft: usize,
}

impl MappedProposal {
    /// Proposal probability q′ of the emitted token at `pos`.
    pub fn proposal_prob(&self, pos: usize) -> f64 {
        self.elevated[pos].probs[self.target_tokens[pos] as usize]
    }
}

/// Accepted target tokens re-expressed in drafter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseResult {
    pub draft_tokens: Vec<TokenId>,
    /// Draft-space retokenization of each accepted target token, in order.
    pub per_token: Vec<Vec<TokenId>>,
    /// Newly discovered n-gram candidates: one target token whose surface
    /// retokenizes into two or more drafter tokens.
    pub new_entries: Vec<(TokenId, Vec<TokenId>)>,
}

/// Left-to-right scan over a drafter proposal: the longest cache match at
/// each position merges its sub-tokens into one target token; otherwise the
/// direct map emits one target token. A draft token satisfying neither
/// truncates the proposal (worst case: an empty proposal).
///
/// Cache lookups bump hit metadata, hence the mutable cache.
pub fn map_proposal(
    draft_tokens: &[TokenId],
    draft_dists: &[CategoricalDist],
    dmap: &DirectMap,
    cache: &mut NGramCache,
    target_vocab_size: usize,
    now: u64,
) -> MappedProposal {
    assert_eq!(draft_tokens.len(), draft_dists.len(), "one distribution per draft token");
    let mut out = MappedProposal {
        target_tokens: Vec::new(),
        elevated: Vec::new(),
        segments: Vec::new(),
        consumed_draft: 0,
    };
    let mut i = 0;
    while i < draft_tokens.len() {
        if let Some((entry, len)) = cache.lookup_longest(draft_tokens, i, now) {
            let subs = &draft_dists[i..i + len];
            let dist = elevate_distribution(
                &draft_dists[i],
                dmap,
                target_vocab_size,
                Some((&entry, subs)),
            );
            out.target_tokens.push(entry.target_token);
            out.elevated.push(dist);
            out.segments.push(Segment::NGramMerged { draft_start: i, draft_len: len });
            i += len;
        } else if let Some(t) = dmap.to_target(draft_tokens[i]) {
            let dist = elevate_distribution(&draft_dists[i], dmap, target_vocab_size, None);
            out.target_tokens.push(t);
            out.elevated.push(dist);
            out.segments.push(Segment::DirectMapped { draft_idx: i });
            i += 1;
        } else {
            break;
        }
    }
    out.consumed_draft = i;
    out
}

/// Elevate a drafter distribution into target space.
///
/// Three-case construction: the matched n-gram token receives the product of
/// the drafter's conditionals along the match; the direct image of the
/// match's first sub-token receives the leftover q(d₁) − ∏ⱼ q(dⱼ); every
/// other direct-mapped token carries its drafter probability unchanged;
/// target tokens with no mapping get zero. The result is sub-normalized:
/// drafter mass outside the direct map is dropped, never made negative.
pub fn elevate_distribution(
    q: &CategoricalDist,
    dmap: &DirectMap,
    target_vocab_size: usize,
    matched: Option<(&NGramEntry, &[CategoricalDist])>,
) -> CategoricalDist {
    debug_assert_eq!(q.space, VocabSpace::Draft);
    let mut probs = vec![0.0; target_vocab_size];
    for (d, t) in dmap.pairs() {
        probs[t as usize] = q.probs[d as usize];
    }
    if let Some((entry, subs)) = matched {
        debug_assert_eq!(entry.draft_seq.len(), subs.len());
        let product: f64 = entry
            .draft_seq
            .iter()
            .zip(subs)
            .map(|(&d, dist)| dist.probs[d as usize])
            .product();
        probs[entry.target_token as usize] = product;
        if let Some(t1) = dmap.to_target(entry.draft_seq[0]) {
            probs[t1 as usize] = q.probs[entry.draft_seq[0] as usize] - product;
        }
    }
    CategoricalDist {
        probs,
        space: VocabSpace::Target,
        sub_normalized: true,
    }
}

/// Retokenize accepted target tokens in drafter space, one target token at
/// a time, so draft-token boundaries always land on target-token
/// boundaries. Each target token whose surface splits into two or more
/// drafter tokens yields an n-gram candidate. Per-token splitting also
/// keeps the drafter context ids stable when both vocabularies coincide:
/// merge closure guarantees a shared token retokenizes to itself, whereas a
/// whole-text retokenization could re-merge across token boundaries.
pub fn reverse_translate(
    accepted_target_tokens: &[TokenId],
    ctx_q: &[TokenId],
    ctx_p: &[TokenId],
    tok_q: &Tokenizer,
    tok_p: &Tokenizer,
) -> Result<ReverseResult> {
    let ctx_q_text = tok_q.detokenize(ctx_q)?;
    let ctx_p_text = tok_p.detokenize(ctx_p)?;
    if ctx_q_text != ctx_p_text {
        return Err(Error::ContextMismatch { draft: ctx_q_text, target: ctx_p_text });
    }

    let mut draft_tokens = Vec::new();
    let mut per_token = Vec::new();
    let mut new_entries = Vec::new();
    for &t in accepted_target_tokens {
        let piece = tok_q.tokenize(tok_p.surface(t)?)?;
        if piece.len() >= 2 {
            new_entries.push((t, piece.clone()));
        }
        per_token.push(piece.clone());
        draft_tokens.extend(piece);
    }

    Ok(ReverseResult { draft_tokens, per_token, new_entries })
}
