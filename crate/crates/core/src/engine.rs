//! The decoding loop: same-vocabulary speculative decoding and its
//! cross-vocabulary generalization, with rejection-sampling verification,
//! residual correction, free-token sampling, context maintenance, and
//! per-round metrics under an abstract cost model.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::NGramCache;
use crate::error::{Error, Result};
use crate::lm::{CategoricalDist, TabularLM};
use crate::tokenizer::{DirectMap, TokenId, Tokenizer};
use crate::translate::{map_proposal, reverse_translate, MappedProposal};
pub use crate::translate::Segment;

/// Decoding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Drafter and target share one vocabulary; proposals pass through.
    Vanilla,
    /// Cross-vocabulary with the direct map only.
    CrossVocabDm,
    /// Cross-vocabulary with the direct map plus the n-gram cache.
    CrossVocabNGram,
}

/// Abstract per-step costs, standing in for wall-clock latencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub draft_step_cost: f64,
    pub target_step_cost: f64,
    pub verify_overhead_cost: f64,
}

impl Default for CostModel {
    fn default() -> CostModel {
        // Drafter/target cost ratio modeled on a ~70M drafter against a
        // ~7B target; verification adds a small fixed overhead per round.
        CostModel {
            draft_step_cost: 0.0716,
            target_step_cost: 1.0,
            verify_overhead_cost: 0.05,
        }
    }
}

/// Engine configuration for one decoding session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Draft tokens proposed per round (upper bound under early exit).
    pub k: usize,
    /// Hard cap on newly decoded target tokens.
    pub max_new_tokens: usize,
    /// Early-exit threshold on the cumulative rejection probability;
    /// 1.0 disables early exit.
    pub gamma: f64,
    pub mode: Mode,
    pub cost_model: CostModel,
    /// Mask the drafter distribution to mappable tokens before sampling
    /// instead of truncating unmappable proposals.
    pub mask_to_direct_map: bool,
    /// Generation stops after emitting a token whose surface contains this
    /// symbol.
    pub eos_symbol: Option<char>,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must be in [0, 1]".into()));
        }
        let c = &self.cost_model;
        if c.draft_step_cost <= 0.0 || c.target_step_cost <= 0.0 || c.verify_overhead_cost <= 0.0 {
            return Err(Error::InvalidConfig("costs must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for EngineConfig {
    fn default() -> EngineConfig {
        EngineConfig {
            k: 3,
            max_new_tokens: 32,
            gamma: 1.0,
            mode: Mode::CrossVocabNGram,
            cost_model: CostModel::default(),
            mask_to_direct_map: false,
            eos_symbol: None,
        }
    }
}

/// Result of verifying one proposal against the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub accepted_count: usize,
    /// Accepted prefix of the proposal, in target space.
    pub accepted_tokens: Vec<TokenId>,
    /// Sampled from the residual at the first rejected position.
    pub correction_token: Option<TokenId>,
    /// Sampled from the target's bonus distribution when every proposed
    /// token is accepted.
    pub free_token: Option<TokenId>,
    /// Per-position acceptance ratios min(1, p/q′).
    pub ratios: Vec<f64>,
}

/// Per-round tallies. `accepted` counts only accepted proposed tokens;
/// `emitted` additionally counts the correction or free token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub proposed: usize,
    pub accepted: usize,
    pub ngram_hits: usize,
    pub emitted: usize,
    pub draft_cost: f64,
    pub target_cost: f64,
}

/// Full record of one decoding round, for training observers and traces.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub ctx_q_before: Vec<TokenId>,
    pub draft_tokens: Vec<TokenId>,
    pub draft_dists: Vec<CategoricalDist>,
    pub target_tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
    pub qprime: Vec<f64>,
    pub target_dists: Vec<CategoricalDist>,
    pub ratios: Vec<f64>,
    pub accepted_count: usize,
    pub correction_token: Option<TokenId>,
    pub free_token: Option<TokenId>,
    pub emitted_target: Vec<TokenId>,
    /// Drafter-side retokenization of each emitted target token, aligned
    /// with `emitted_target`. Merged words show up as multi-token splits.
    pub emitted_draft: Vec<Vec<TokenId>>,
    pub cache_inserts: usize,
}

/// Observer hooks for online adaptation: early exit while drafting and
/// per-round records for training buffers.
pub trait RoundObserver {
    /// Whether to draft another token after the ones sampled so far.
    /// `last_embedding` is the drafter embedding of the newest draft token.
    fn continue_drafting(&mut self, drafted: &[TokenId], last_embedding: &[f64]) -> bool {
        let _ = (drafted, last_embedding);
        true
    }

    fn observe_round(&mut self, record: &RoundRecord) {
        let _ = record;
    }
}

/// No-op observer.
pub struct NullObserver;

impl RoundObserver for NullObserver {}

/// Speedup decomposition under the abstract cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    /// Decoded tokens (including corrections and free tokens) per target
    /// invocation.
    pub acceleration_rate: f64,
    /// Per-round pipeline cost relative to one plain target step.
    pub overhead: f64,
    pub speedup: f64,
}

/// Output of one decoding session.
#[derive(Debug, Clone)]
pub struct GenOutput {
    /// Newly generated text (prompt excluded).
    pub text: String,
    /// Newly generated tokens in target space.
    pub emitted_target: Vec<TokenId>,
    pub metrics: Vec<StepMetrics>,
    pub rounds: Vec<RoundRecord>,
}

/// Residual distribution norm(max(0, p − q′)). When q′ dominates p
/// everywhere the residual has no mass and the target distribution itself
/// is returned.
pub fn residual(p: &CategoricalDist, q_prime: &CategoricalDist) -> CategoricalDist {
    debug_assert_eq!(p.probs.len(), q_prime.probs.len());
    let mut probs: Vec<f64> = p
        .probs
        .iter()
        .zip(&q_prime.probs)
        .map(|(&pi, &qi)| (pi - qi).max(0.0))
        .collect();
    let sum: f64 = probs.iter().sum();
    if sum < 1e-12 {
        return p.clone();
    }
    for x in &mut probs {
        *x /= sum;
    }
    CategoricalDist { probs, space: p.space, sub_normalized: false }
}

/// Sequential rejection sampling over a proposal. One target distribution
/// per proposed position plus one for the bonus position is required.
pub fn verify(
    target_tokens: &[TokenId],
    elevated: &[CategoricalDist],
    target_dists: &[CategoricalDist],
    rng: &mut impl Rng,
) -> Result<VerifyOutcome> {
    let m = target_tokens.len();
    assert_eq!(elevated.len(), m, "one proposal distribution per position");
    assert_eq!(target_dists.len(), m + 1, "target scores m+1 positions");

    let mut out = VerifyOutcome {
        accepted_count: 0,
        accepted_tokens: Vec::new(),
        correction_token: None,
        free_token: None,
        ratios: Vec::with_capacity(m),
    };
    for i in 0..m {
        let t = target_tokens[i] as usize;
        let q = elevated[i].probs[t];
        if q <= 0.0 {
            return Err(Error::ZeroProposalProb(i));
        }
        let p = target_dists[i].probs[t];
        let ratio = (p / q).min(1.0);
        out.ratios.push(ratio);
        let u: f64 = rng.random();
        if u < ratio {
            out.accepted_count += 1;
            out.accepted_tokens.push(target_tokens[i]);
        } else {
            let corr = residual(&target_dists[i], &elevated[i]).sample(rng)?;
            out.correction_token = Some(corr);
            return Ok(out);
        }
    }
    out.free_token = Some(target_dists[m].sample(rng)?);
    Ok(out)
}

/// Aggregate the cost ledger of a run into acceleration, overhead, and
/// speedup.
pub fn compute_speedup(metrics: &[StepMetrics], cost_model: &CostModel) -> Result<SpeedupReport> {
    if metrics.is_empty() {
        return Err(Error::EmptyMetrics);
    }
    let rounds = metrics.len() as f64;
    let emitted: usize = metrics.iter().map(|m| m.emitted).sum();
    let pipeline_cost: f64 = metrics.iter().map(|m| m.draft_cost + m.target_cost).sum();
    let acceleration_rate = emitted as f64 / rounds;
    let overhead = pipeline_cost / (rounds * cost_model.target_step_cost);
    Ok(SpeedupReport { acceleration_rate, overhead, speedup: acceleration_rate / overhead })
}

/// Decode up to `max_new_tokens` target tokens from `prompt`.
///
/// Each round drafts up to k tokens (the observer may cut drafting short),
/// maps them into target space, scores them with the target in one pass,
/// verifies by rejection sampling, feeds accepted text back through reverse
/// translation, and records newly discovered n-grams in the cache.
///
/// `clock` is a logical timestamp shared across calls so cache recency and
/// frequency bookkeeping stay meaningful over a whole stream.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    drafter: &TabularLM,
    target: &TabularLM,
    tok_q: &Tokenizer,
    tok_p: &Tokenizer,
    dmap: &DirectMap,
    cache: &mut NGramCache,
    config: &EngineConfig,
    prompt: &str,
    rng: &mut impl Rng,
    observer: &mut dyn RoundObserver,
    clock: &mut u64,
) -> Result<GenOutput> {
    config.validate()?;
    let mut ctx_q = tok_q.tokenize(prompt)?;
    let mut ctx_p = tok_p.tokenize(prompt)?;
    let mut out = GenOutput {
        text: String::new(),
        emitted_target: Vec::new(),
        metrics: Vec::new(),
        rounds: Vec::new(),
    };
    // Scratch cache so the direct-map-only mode never matches an n-gram.
    let mut scratch = NGramCache::new(cache.policy(), None);
    let mut done = false;

    while !done && out.emitted_target.len() < config.max_new_tokens {
        *clock += 1;
        let round = out.rounds.len();
        let ctx_q_before = ctx_q.clone();

        // Draft phase.
        let mask: Option<BTreeSet<TokenId>> =
            if config.mask_to_direct_map && config.mode != Mode::Vanilla {
                let mut keep: BTreeSet<TokenId> = dmap.draft_ids().collect();
                if config.mode == Mode::CrossVocabNGram {
                    for entry in cache.entries() {
                        keep.extend(entry.draft_seq.iter().copied());
                    }
                }
                Some(keep)
            } else {
                None
            };
        let mut draft_tokens: Vec<TokenId> = Vec::new();
        let mut draft_dists: Vec<CategoricalDist> = Vec::new();
        let mut dctx = ctx_q.clone();
        for j in 0..config.k {
            let mut qd = drafter.next_token_dist(&dctx)?;
            if let Some(keep) = &mask {
                qd.mask_and_renormalize(|t| keep.contains(&t));
            }
            let d = qd.sample(rng)?;
            draft_tokens.push(d);
            draft_dists.push(qd);
            dctx.push(d);
            if j + 1 < config.k
                && !observer.continue_drafting(&draft_tokens, drafter.embedding(d)?)
            {
                break;
            }
        }

        // Map phase.
        let proposal = match config.mode {
            Mode::Vanilla => MappedProposal {
                target_tokens: draft_tokens.clone(),
                elevated: draft_dists.clone(),
                segments: (0..draft_tokens.len())
                    .map(|i| Segment::DirectMapped { draft_idx: i })
                    .collect(),
                consumed_draft: draft_tokens.len(),
            },
            Mode::CrossVocabDm => map_proposal(
                &draft_tokens,
                &draft_dists,
                dmap,
                &mut scratch,
                target.vocab_size,
                *clock,
            ),
            Mode::CrossVocabNGram => map_proposal(
                &draft_tokens,
                &draft_dists,
                dmap,
                cache,
                target.vocab_size,
                *clock,
            ),
        };
        let m = proposal.target_tokens.len();
        let qprime: Vec<f64> = (0..m).map(|i| proposal.proposal_prob(i)).collect();
        let draft_cost = draft_tokens.len() as f64 * config.cost_model.draft_step_cost;
        let target_cost = config.cost_model.target_step_cost + config.cost_model.verify_overhead_cost;

        // Target scoring: one distribution per proposed position plus the
        // bonus position (a single parallel pass on real hardware).
        let mut pctx = ctx_p.clone();
        let mut target_dists = Vec::with_capacity(m + 1);
        for &t in &proposal.target_tokens {
            target_dists.push(target.next_token_dist(&pctx)?);
            pctx.push(t);
        }
        target_dists.push(target.next_token_dist(&pctx)?);

        // Verify phase. An empty proposal degenerates to one target step.
        let outcome = verify(&proposal.target_tokens, &proposal.elevated, &target_dists, rng)?;

        let mut emitted: Vec<TokenId> = outcome.accepted_tokens.clone();
        if let Some(c) = outcome.correction_token {
            emitted.push(c);
        }
        if let Some(f) = outcome.free_token {
            emitted.push(f);
        }
        let budget = config.max_new_tokens - out.emitted_target.len();
        emitted.truncate(budget);
        if let Some(eos) = config.eos_symbol {
            if let Some(pos) = emitted
                .iter()
                .position(|&t| tok_p.surface(t).map(|s| s.contains(eos)).unwrap_or(false))
            {
                emitted.truncate(pos + 1);
                done = true;
            }
        }

        // Reverse translation and cache discovery.
        let rev = reverse_translate(&emitted, &ctx_q, &ctx_p, tok_q, tok_p)?;
        let mut cache_inserts = 0;
        if config.mode == Mode::CrossVocabNGram {
            for (t, seq) in &rev.new_entries {
                if cache.insert(tok_q, tok_p, *t, seq.clone(), *clock)? {
                    cache_inserts += 1;
                }
            }
        }

        // Context update.
        ctx_q.extend(&rev.draft_tokens);
        ctx_p.extend(&emitted);

        // Metrics: accepted counts only proposed tokens; the acceptance
        // count is capped by the emission budget so tallies match output.
        let counted_accepted = outcome.accepted_count.min(emitted.len());
        let ngram_hits = proposal
            .segments
            .iter()
            .take(counted_accepted)
            .filter(|s| matches!(s, Segment::NGramMerged { .. }))
            .count();
        out.metrics.push(StepMetrics {
            proposed: m,
            accepted: counted_accepted,
            ngram_hits,
            emitted: emitted.len(),
            draft_cost,
            target_cost,
        });
        out.rounds.push(RoundRecord {
            round,
            ctx_q_before,
            draft_tokens,
            draft_dists,
            target_tokens: proposal.target_tokens,
            segments: proposal.segments,
            qprime,
            target_dists,
            ratios: outcome.ratios.clone(),
            accepted_count: outcome.accepted_count,
            correction_token: outcome.correction_token,
            free_token: outcome.free_token,
            emitted_target: emitted.clone(),
            emitted_draft: rev.per_token,
            cache_inserts,
        });
        observer.observe_round(out.rounds.last().unwrap());
        out.emitted_target.extend(&emitted);
    }

    out.text = tok_p.detokenize(&out.emitted_target)?;
    Ok(out)
}
