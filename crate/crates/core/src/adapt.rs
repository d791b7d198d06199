//! Online alignment of the drafter to the target: hybrid distillation on
//! decoded positions, an acceptance-prediction head with early exit, and
//! the joint and interleaved training schedules that drive both from a
//! stream of decoding rounds.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::NGramCache;
use crate::engine::{generate, EngineConfig, GenOutput, RoundObserver, RoundRecord, Segment};
use crate::error::{Error, Result};
use crate::lm::{AdamHyper, CategoricalDist, OptimizerState, ParamGrad, TabularLM, VocabSpace};
use crate::tokenizer::{DirectMap, TokenId, Tokenizer};

const ADAPTER_CHECKPOINT_VERSION: u32 = 1;
/// Probability floor applied to teachers and label divisors.
const PROB_FLOOR: f64 = 1e-12;

/// Weighting of the n-gram term in the hybrid distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum LambdaMode {
    /// Constant weight on the n-gram negative log-likelihood term.
    Fixed(f64),
    /// Weight each n-gram position by the verified target probability of
    /// its merged token.
    DynamicTargetProb,
    /// Replace the n-gram term with a KL divergence over the direct-map
    /// image plus the merged token, with the student elevated via the
    /// product of its conditionals.
    ApproxKl,
}

/// One decoded position prepared for distillation, in draft space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PositionRecord {
    DirectMapped {
        /// Draft-space context for this position.
        context: Vec<TokenId>,
        draft_token: TokenId,
        /// Teacher over the draft vocabulary: the target distribution
        /// pulled through the direct map. Entries the map cannot express
        /// stay zero and sit outside the loss's support.
        teacher: Vec<f64>,
        accepted: bool,
    },
    NGramMerged {
        /// Draft-space context for each sub-token.
        contexts: Vec<Vec<TokenId>>,
        draft_seq: Vec<TokenId>,
        /// Verified target probability of the merged token.
        target_prob: f64,
        /// Full target distribution at this position (target space).
        target_full: Vec<f64>,
        target_token: TokenId,
        accepted: bool,
    },
}

/// All positions of one decoding round, ready for the hybrid loss.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DistillBatchItem {
    pub positions: Vec<PositionRecord>,
}

/// One proposed token kept for acceptance-head training. Labels are
/// recomputed against the current drafter at update time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayItem {
    pub context: Vec<TokenId>,
    pub token: TokenId,
    pub target_prob: f64,
}

/// Turn a decoding round into distillation positions.
pub fn build_batch_item(record: &RoundRecord, dmap: &DirectMap) -> DistillBatchItem {
    let mut item = DistillBatchItem::default();
    for (i, seg) in record.segments.iter().enumerate() {
        let accepted = i < record.accepted_count;
        match *seg {
            Segment::DirectMapped { draft_idx } => {
                let mut context = record.ctx_q_before.clone();
                context.extend(&record.draft_tokens[..draft_idx]);
                // Pull the target distribution into draft space through
                // the direct map. The loss later restricts to the map's
                // support, so unmapped entries stay zero.
                let mut teacher =
                    vec![0.0; record.draft_dists[draft_idx].probs.len()];
                for (d, t) in dmap.pairs() {
                    teacher[d as usize] =
                        record.target_dists[i].probs[t as usize].max(PROB_FLOOR);
                }
                item.positions.push(PositionRecord::DirectMapped {
                    context,
                    draft_token: record.draft_tokens[draft_idx],
                    teacher,
                    accepted,
                });
            }
            Segment::NGramMerged { .. } => {}
        }
    }
    // N-gram positions come from the verified output rather than the
    // proposal: every emitted target token whose drafter retokenization
    // spans several tokens is a merge the drafter should learn to spell,
    // and corrections are where merged words show up most often.
    let mut context = record.ctx_q_before.clone();
    for (j, piece) in record.emitted_draft.iter().enumerate() {
        if piece.len() >= 2 {
            let contexts = (0..piece.len())
                .map(|s| {
                    let mut c = context.clone();
                    c.extend(&piece[..s]);
                    c
                })
                .collect();
            let target_token = record.emitted_target[j];
            item.positions.push(PositionRecord::NGramMerged {
                contexts,
                draft_seq: piece.clone(),
                target_prob: record.target_dists[j].probs[target_token as usize],
                target_full: record.target_dists[j].probs.clone(),
                target_token,
                accepted: j < record.accepted_count,
            });
        }
        context.extend(piece);
    }
    item
}

/// Acceptance-head training items from a round: one per direct-mapped
/// position (the head scores single proposed tokens).
pub fn replay_items(record: &RoundRecord) -> Vec<ReplayItem> {
    let mut out = Vec::new();
    for (i, seg) in record.segments.iter().enumerate() {
        if let Segment::DirectMapped { draft_idx } = *seg {
            let mut context = record.ctx_q_before.clone();
            context.extend(&record.draft_tokens[..draft_idx]);
            out.push(ReplayItem {
                context,
                token: record.draft_tokens[draft_idx],
                target_prob: record.target_dists[i].probs
                    [record.target_tokens[i] as usize],
            });
        }
    }
    out
}

/// Hybrid distillation loss over a batch of decoded rounds: reverse KL on
/// direct-mapped positions plus a weighted n-gram term, averaged over all
/// positions. Returns the loss and the gradient with respect to the
/// drafter's logit rows.
pub fn hybrid_loss_grad(
    drafter: &TabularLM,
    batch: &[DistillBatchItem],
    lambda_mode: LambdaMode,
    dmap: &DirectMap,
) -> Result<(f64, ParamGrad)> {
    let positions: usize = batch.iter().map(|b| b.positions.len()).sum();
    if positions == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    let mut grad = ParamGrad::default();
    for item in batch {
        for pos in &item.positions {
            match pos {
                PositionRecord::DirectMapped { context, teacher, .. } => {
                    // Reverse KL restricted to the direct map's image and
                    // renormalized there. This matches relative mass on
                    // mappable tokens while leaving the drafter's mass on
                    // unmapped tokens (merged-word spellings) untouched.
                    let support: Vec<TokenId> = dmap.pairs().map(|(d, _)| d).collect();
                    let teacher_dist = CategoricalDist {
                        probs: teacher.clone(),
                        space: VocabSpace::Draft,
                        sub_normalized: true,
                    };
                    let (kl, g) = drafter.kl_grad(context, &teacher_dist, Some(&support))?;
                    total += kl;
                    grad.merge(&g);
                }
                PositionRecord::NGramMerged {
                    contexts,
                    draft_seq,
                    target_prob,
                    target_full,
                    target_token,
                    ..
                } => match lambda_mode {
                    LambdaMode::Fixed(lambda) => {
                        let (nll, g) = ngram_nll_grad(drafter, contexts, draft_seq, lambda)?;
                        total += nll;
                        grad.merge(&g);
                    }
                    LambdaMode::DynamicTargetProb => {
                        let (nll, g) =
                            ngram_nll_grad(drafter, contexts, draft_seq, *target_prob)?;
                        total += nll;
                        grad.merge(&g);
                    }
                    LambdaMode::ApproxKl => {
                        let (kl, g) = approx_kl_grad(
                            drafter,
                            contexts,
                            draft_seq,
                            target_full,
                            *target_token,
                            dmap,
                        )?;
                        total += kl;
                        grad.merge(&g);
                    }
                },
            }
        }
    }
    grad.scale(1.0 / positions as f64);
    Ok((total / positions as f64, grad))
}

/// Weighted negative log-likelihood of the n-gram's draft sub-tokens.
fn ngram_nll_grad(
    drafter: &TabularLM,
    contexts: &[Vec<TokenId>],
    draft_seq: &[TokenId],
    weight: f64,
) -> Result<(f64, ParamGrad)> {
    let mut total = 0.0;
    let mut grad = ParamGrad::default();
    for (ctx, &d) in contexts.iter().zip(draft_seq) {
        let (nll, g) = drafter.nll_grad(ctx, d)?;
        total += nll;
        grad.merge(&g);
    }
    grad.scale(weight);
    Ok((weight * total, grad))
}

/// Approximate KL on an n-gram position: the student is elevated over the
/// direct-map image plus the merged token (product of conditionals along
/// the merged run, leftover mass on the first sub-token's image); the
/// teacher is the target distribution restricted to the same support and
/// renormalized. Gradients flow through every conditional factor.
fn approx_kl_grad(
    drafter: &TabularLM,
    contexts: &[Vec<TokenId>],
    draft_seq: &[TokenId],
    target_full: &[f64],
    target_token: TokenId,
    dmap: &DirectMap,
) -> Result<(f64, ParamGrad)> {
    let dists: Vec<CategoricalDist> = contexts
        .iter()
        .map(|c| drafter.next_token_dist(c))
        .collect::<Result<_>>()?;
    let factors: Vec<f64> = draft_seq
        .iter()
        .zip(&dists)
        .map(|(&d, q)| q.probs[d as usize])
        .collect();
    let product: f64 = factors.iter().product();
    let tail: f64 = factors[1..].iter().product();
    let d1 = draft_seq[0];
    let prefix_image = dmap.to_target(d1);

    // Teacher: restricted to {direct-map image} ∪ {merged token}, floored
    // and renormalized.
    let p_of = |t: TokenId| target_full[t as usize].max(PROB_FLOOR);
    let mut teacher_sum = p_of(target_token);
    for (_, t) in dmap.pairs() {
        teacher_sum += p_of(t);
    }

    // Student entries and the loss; ln is guarded away from zero.
    let safe_ln = |x: f64| x.max(f64::MIN_POSITIVE).ln();
    let term = |qv: f64, t: TokenId| {
        if qv <= 0.0 {
            0.0
        } else {
            qv * (safe_ln(qv) - (p_of(t) / teacher_sum).ln())
        }
    };
    // d(term)/d(student entry)
    let slope = |qv: f64, t: TokenId| safe_ln(qv) - (p_of(t) / teacher_sum).ln() + 1.0;

    let q1 = &dists[0];
    let mut kl = term(product, target_token);
    let a_g = slope(product, target_token);
    let mut a_f = 0.0;
    for (d, t) in dmap.pairs() {
        let qv = if d == d1 { q1.probs[d as usize] - product } else { q1.probs[d as usize] };
        kl += term(qv, t);
        if d == d1 {
            a_f = slope(qv, t);
        }
    }

    // Gradient with respect to the first position's distribution.
    let mut dl_dq1 = vec![0.0; q1.probs.len()];
    for (d, t) in dmap.pairs() {
        if d != d1 {
            dl_dq1[d as usize] = slope(q1.probs[d as usize], t);
        }
    }
    dl_dq1[d1 as usize] = if prefix_image.is_some() {
        a_g * tail + a_f * (1.0 - tail)
    } else {
        a_g * tail
    };
    let mut grad = drafter.dist_grad(&contexts[0], &dl_dq1)?;

    // Later positions only enter through the product.
    for j in 1..draft_seq.len() {
        let mut dl_dq = vec![0.0; dists[j].probs.len()];
        let through = if prefix_image.is_some() { a_g - a_f } else { a_g };
        dl_dq[draft_seq[j] as usize] = through * product / factors[j];
        grad.merge(&drafter.dist_grad(&contexts[j], &dl_dq)?);
    }
    Ok((kl, grad))
}

/// Acceptance ratio used as a soft label: min(1, p/q) with the drafter
/// probability floored.
pub fn acceptance_label(p_val: f64, q_val: f64) -> f64 {
    (p_val / q_val.max(PROB_FLOOR)).min(1.0)
}

/// Stop drafting once the probability that at least one proposed token
/// gets rejected exceeds gamma.
pub fn early_exit(accept_probs_so_far: &[f64], gamma: f64) -> bool {
    let all_accept: f64 = accept_probs_so_far.iter().product();
    1.0 - all_accept > gamma
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Affine-plus-sigmoid acceptance predictor over the drafter's token
/// embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl AcceptanceHead {
    pub fn new(dim: usize, seed: u64) -> AcceptanceHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AcceptanceHead {
            weight: (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect(),
            bias: 0.0,
        }
    }

    /// Predicted acceptance probability for a token embedding.
    pub fn predict(&self, embedding: &[f64]) -> f64 {
        let z: f64 = self.weight.iter().zip(embedding).map(|(w, e)| w * e).sum::<f64>()
            + self.bias;
        sigmoid(z)
    }
}

/// One SGD step of weighted binary cross-entropy on (embedding, label)
/// pairs; `w_pos` multiplies the label-side term. Returns the loss before
/// the step; an empty batch is a no-op.
pub fn head_update(
    head: &mut AcceptanceHead,
    items: &[(Vec<f64>, f64)],
    w_pos: f64,
    lr: f64,
) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let n = items.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; head.weight.len()];
    let mut gb = 0.0;
    for (e, l) in items {
        let s = head.predict(e);
        loss -= w_pos * l * s.max(f64::MIN_POSITIVE).ln()
            + (1.0 - l) * (1.0 - s).max(f64::MIN_POSITIVE).ln();
        // d(loss)/d(pre-activation)
        let dz = -w_pos * l * (1.0 - s) + (1.0 - l) * s;
        for (g, x) in gw.iter_mut().zip(e) {
            *g += dz * x / n;
        }
        gb += dz / n;
    }
    for (w, g) in head.weight.iter_mut().zip(&gw) {
        *w -= lr * g;
    }
    head.bias -= lr * gb;
    loss / n
}

/// Epochs of head updates over a frozen offline trace.
pub fn pretrain_head(
    head: &mut AcceptanceHead,
    offline_trace: &[(Vec<f64>, f64)],
    epochs: usize,
    w_pos: f64,
    lr: f64,
) {
    for _ in 0..epochs {
        head_update(head, offline_trace, w_pos, lr);
    }
}

/// When drafter and head get their gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Every interval: distill, then one head step on the same window with
    /// labels recomputed against the freshly updated drafter.
    Joint,
    /// Every interval: distill and push the window into a replay buffer;
    /// all other steps train the head on replayed batches.
    Interleaved,
}

/// Knobs for online adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lambda_mode: LambdaMode,
    pub schedule: Schedule,
    /// Update interval I, in stream samples.
    pub interval: usize,
    /// Replay buffer max size N (interleaved schedule).
    pub replay_max: usize,
    /// Replay batch size B (interleaved schedule).
    pub batch_size: usize,
    /// Label-side weight of the BCE loss.
    pub w_pos: f64,
    pub head_lr: f64,
    /// Update the drafter (distillation) at all.
    pub distill: bool,
    /// Train the head and exit drafting early on its predictions.
    pub use_head: bool,
    pub hyper: AdamHyper,
    /// Gradient steps per distillation round.
    pub grad_steps: usize,
}

impl Default for AdaptConfig {
    fn default() -> AdaptConfig {
        AdaptConfig {
            lambda_mode: LambdaMode::Fixed(0.2),
            schedule: Schedule::Joint,
            interval: 8,
            replay_max: 64,
            batch_size: 8,
            w_pos: 1.0,
            head_lr: 0.1,
            distill: true,
            use_head: false,
            hyper: AdamHyper::default(),
            grad_steps: 1,
        }
    }
}

/// Early-exit hook backed by the acceptance head. Predictions reset at
/// the first draft token of each round.
struct EarlyExitObserver<'a> {
    head: &'a AcceptanceHead,
    gamma: f64,
    enabled: bool,
    probs: Vec<f64>,
}

impl RoundObserver for EarlyExitObserver<'_> {
    fn continue_drafting(&mut self, drafted: &[TokenId], last_embedding: &[f64]) -> bool {
        if !self.enabled {
            return true;
        }
        if drafted.len() == 1 {
            self.probs.clear();
        }
        self.probs.push(self.head.predict(last_embedding));
        !early_exit(&self.probs, self.gamma)
    }
}

/// Drafter, head, optimizer, and buffers evolving over a stream.
#[derive(Debug)]
pub struct OnlineAdapter {
    pub drafter: TabularLM,
    pub head: AcceptanceHead,
    pub opt: OptimizerState,
    pub config: AdaptConfig,
    dmap: DirectMap,
    distill_buf: Vec<DistillBatchItem>,
    head_buf: Vec<ReplayItem>,
    replay: VecDeque<ReplayItem>,
    samples_seen: usize,
    rng: ChaCha8Rng,
    pub distill_updates: usize,
    pub head_updates: usize,
    pub last_distill_loss: f64,
    pub last_head_loss: f64,
}

impl OnlineAdapter {
    pub fn new(drafter: TabularLM, dmap: DirectMap, config: AdaptConfig, seed: u64) -> OnlineAdapter {
        let head = AcceptanceHead::new(drafter.embed_dim(), seed.wrapping_add(1));
        OnlineAdapter {
            drafter,
            head,
            opt: OptimizerState::default(),
            config,
            dmap,
            distill_buf: Vec::new(),
            head_buf: Vec::new(),
            replay: VecDeque::new(),
            samples_seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            distill_updates: 0,
            head_updates: 0,
            last_distill_loss: 0.0,
            last_head_loss: 0.0,
        }
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn distill_buf_len(&self) -> usize {
        self.distill_buf.len()
    }

    /// Decode one stream sample with the current drafter (early exit if the
    /// head is enabled), push its rounds to the buffers, and run whatever
    /// updates the schedule calls for.
    #[allow(clippy::too_many_arguments)]
    pub fn process_sample(
        &mut self,
        target: &TabularLM,
        tok_q: &Tokenizer,
        tok_p: &Tokenizer,
        cache: &mut NGramCache,
        engine_cfg: &EngineConfig,
        prompt: &str,
        rng: &mut ChaCha8Rng,
        clock: &mut u64,
    ) -> Result<GenOutput> {
        let out = {
            let mut obs = EarlyExitObserver {
                head: &self.head,
                gamma: engine_cfg.gamma,
                enabled: self.config.use_head,
                probs: Vec::new(),
            };
            generate(
                &self.drafter,
                target,
                tok_q,
                tok_p,
                &self.dmap,
                cache,
                engine_cfg,
                prompt,
                rng,
                &mut obs,
                clock,
            )?
        };
        for record in &out.rounds {
            let item = build_batch_item(record, &self.dmap);
            if !item.positions.is_empty() {
                self.distill_buf.push(item);
            }
            self.head_buf.extend(replay_items(record));
        }
        self.samples_seen += 1;
        match self.config.schedule {
            Schedule::Joint => self.joint_step()?,
            Schedule::Interleaved => self.interleaved_step()?,
        }
        Ok(out)
    }

    fn on_interval(&self) -> bool {
        self.samples_seen % self.config.interval == 0
    }

    /// Interval step of the joint schedule: distillation, then a head step
    /// on the same window with labels recomputed against the updated
    /// drafter; both buffers are then cleared.
    fn joint_step(&mut self) -> Result<()> {
        if !self.on_interval() {
            return Ok(());
        }
        self.distill_on_buffer()?;
        if self.config.use_head && !self.head_buf.is_empty() {
            let items = self.labelled_items(&self.head_buf.clone())?;
            self.last_head_loss =
                head_update(&mut self.head, &items, self.config.w_pos, self.config.head_lr);
            self.head_updates += 1;
        }
        self.distill_buf.clear();
        self.head_buf.clear();
        Ok(())
    }

    /// Interleaved schedule: interval steps distill and move the window
    /// into the replay buffer (FIFO-capped at N); all other steps train the
    /// head on a replayed batch. Before the first interval fills the replay
    /// buffer, batches fall back to the current window.
    fn interleaved_step(&mut self) -> Result<()> {
        if self.on_interval() {
            self.distill_on_buffer()?;
            for item in self.head_buf.drain(..) {
                self.replay.push_back(item);
                if self.replay.len() > self.config.replay_max {
                    self.replay.pop_front();
                }
            }
            self.distill_buf.clear();
        } else if self.config.use_head {
            let pool: Vec<ReplayItem> = if self.replay.is_empty() {
                self.head_buf.clone()
            } else {
                self.replay.iter().cloned().collect()
            };
            if pool.is_empty() {
                return Ok(());
            }
            let batch: Vec<ReplayItem> = (0..self.config.batch_size.min(pool.len()))
                .map(|_| pool[self.rng.random_range(0..pool.len())].clone())
                .collect();
            let items = self.labelled_items(&batch)?;
            self.last_head_loss =
                head_update(&mut self.head, &items, self.config.w_pos, self.config.head_lr);
            self.head_updates += 1;
        }
        Ok(())
    }

    fn distill_on_buffer(&mut self) -> Result<()> {
        if !self.config.distill || self.distill_buf.is_empty() {
            return Ok(());
        }
        for _ in 0..self.config.grad_steps {
            let (loss, grad) = hybrid_loss_grad(
                &self.drafter,
                &self.distill_buf,
                self.config.lambda_mode,
                &self.dmap,
            )?;
            self.drafter.apply_update(&grad, &mut self.opt, &self.config.hyper);
            self.last_distill_loss = loss;
        }
        self.distill_updates += 1;
        Ok(())
    }

    /// Labels against the current drafter, paired with token embeddings.
    fn labelled_items(&self, items: &[ReplayItem]) -> Result<Vec<(Vec<f64>, f64)>> {
        items
            .iter()
            .map(|it| {
                let q = self.drafter.next_token_dist(&it.context)?.probs[it.token as usize];
                let e = self.drafter.embedding(it.token)?.to_vec();
                Ok((e, acceptance_label(it.target_prob, q)))
            })
            .collect()
    }

    /// Serialize the full adapter state: drafter and optimizer, head,
    /// buffers, counters, and RNG, so a resumed run replays bit-exactly.
    /// Swap the direct map (the target tokenizer changed) and drop buffered
    /// positions, whose teachers refer to the old target space.
    pub fn set_dmap(&mut self, dmap: DirectMap) {
        self.dmap = dmap;
        self.distill_buf.clear();
        self.head_buf.clear();
        self.replay.clear();
    }

    pub fn checkpoint_json(&self) -> Result<String> {
        let file = AdapterCheckpoint {
            version: ADAPTER_CHECKPOINT_VERSION,
            drafter: self.drafter.checkpoint_json(&self.opt)?,
            head: self.head.clone(),
            config: self.config.clone(),
            dmap_pairs: self.dmap.pairs().collect(),
            distill_buf: self.distill_buf.clone(),
            head_buf: self.head_buf.clone(),
            replay: self.replay.iter().cloned().collect(),
            samples_seen: self.samples_seen,
            rng: self.rng.clone(),
            distill_updates: self.distill_updates,
            head_updates: self.head_updates,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_checkpoint_json(json: &str) -> Result<OnlineAdapter> {
        let file: AdapterCheckpoint = serde_json::from_str(json)?;
        if file.version != ADAPTER_CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: file.version,
                expected: ADAPTER_CHECKPOINT_VERSION,
            });
        }
        let (drafter, opt) = TabularLM::from_checkpoint_json(&file.drafter)?;
        Ok(OnlineAdapter {
            drafter,
            head: file.head,
            opt,
            config: file.config,
            dmap: DirectMap::from_pairs(file.dmap_pairs),
            distill_buf: file.distill_buf,
            head_buf: file.head_buf,
            replay: file.replay.into(),
            samples_seen: file.samples_seen,
            rng: file.rng,
            distill_updates: file.distill_updates,
            head_updates: file.head_updates,
            last_distill_loss: 0.0,
            last_head_loss: 0.0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<OnlineAdapter> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct AdapterCheckpoint {
    version: u32,
    drafter: String,
    head: AcceptanceHead,
    config: AdaptConfig,
    dmap_pairs: Vec<(TokenId, TokenId)>,
    distill_buf: Vec<DistillBatchItem>,
    head_buf: Vec<ReplayItem>,
    replay: Vec<ReplayItem>,
    samples_seen: usize,
    rng: ChaCha8Rng,
    distill_updates: usize,
    head_updates: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::EvictionPolicy;
    use crate::engine::Mode;
    use crate::tokenizer::compute_direct_map;

    /// Drafter splits "flake"; target owns it whole. Shared merges "la",
    /// "ke", "is" give a direct map that covers every drafter token.
    fn cross_pair() -> (Tokenizer, Tokenizer, DirectMap) {
        let mut corpus: Vec<String> = Vec::new();
        for (word, reps) in [("flake", 3), ("is", 4), (" ", 3), ("la", 2), ("ke", 2)] {
            for _ in 0..reps {
                corpus.push(word.to_string());
            }
        }
        let tok_q = Tokenizer::train_bpe(&corpus, 3).unwrap();
        let tok_p = Tokenizer::train_bpe(&corpus, 50).unwrap();
        let dmap = compute_direct_map(&tok_q, &tok_p);
        (tok_q, tok_p, dmap)
    }

    fn random_probs(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        crate::lm::softmax(&logits, 1.0)
    }

    fn randomized_drafter(tok_q: &Tokenizer, seed: u64) -> TabularLM {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lm = TabularLM::new(tok_q.vocab_size(), 2, 1.0, 4, seed);
        // Materialize a few rows with random logits so gradients differ
        // across contexts.
        for a in 0..tok_q.vocab_size() as TokenId {
            for i in 0..tok_q.vocab_size() {
                lm.nudge_row(&[a], i, rng.random_range(-1.0..1.0));
            }
        }
        lm
    }

    /// One DM position and one n-gram position with random teachers.
    fn random_batch(tok_q: &Tokenizer, tok_p: &Tokenizer, dmap: &DirectMap, seed: u64) -> Vec<DistillBatchItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let is_q = tok_q.id_of("is").unwrap();
        let la_q = tok_q.id_of("la").unwrap();
        let flake_seq = tok_q.tokenize("flake").unwrap();
        let flake_p = tok_p.id_of("flake").unwrap();

        let mut teacher = vec![0.0; tok_q.vocab_size()];
        let probs = random_probs(tok_q.vocab_size(), &mut rng);
        for (d, _) in dmap.pairs() {
            teacher[d as usize] = probs[d as usize].max(PROB_FLOOR);
        }
        let contexts: Vec<Vec<TokenId>> = (0..flake_seq.len())
            .map(|j| {
                let mut c = vec![is_q];
                c.extend(&flake_seq[..j]);
                c
            })
            .collect();
        vec![DistillBatchItem {
            positions: vec![
                PositionRecord::DirectMapped {
                    context: vec![la_q],
                    draft_token: is_q,
                    teacher,
                    accepted: true,
                },
                PositionRecord::NGramMerged {
                    contexts,
                    draft_seq: flake_seq,
                    target_prob: rng.random_range(0.05..0.95),
                    target_full: random_probs(tok_p.vocab_size(), &mut rng),
                    target_token: flake_p,
                    accepted: false,
                },
            ],
        }]
    }

    fn finite_diff_check(mode: LambdaMode, seed: u64) -> f64 {
        let (tok_q, tok_p, dmap) = cross_pair();
        let mut lm = randomized_drafter(&tok_q, seed);
        let batch = random_batch(&tok_q, &tok_p, &dmap, seed);
        let (_, grad) = hybrid_loss_grad(&lm, &batch, mode, &dmap).unwrap();
        assert!(grad.embed.is_empty(), "loss does not touch embeddings");

        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let rows: Vec<(Vec<TokenId>, Vec<f64>)> =
            grad.rows.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (key, row) in rows {
            for (i, &g) in row.iter().enumerate() {
                lm.nudge_row(&key, i, h);
                let (lp, _) = hybrid_loss_grad(&lm, &batch, mode, &dmap).unwrap();
                lm.nudge_row(&key, i, -2.0 * h);
                let (lmi, _) = hybrid_loss_grad(&lm, &batch, mode, &dmap).unwrap();
                lm.nudge_row(&key, i, h);
                let numeric = (lp - lmi) / (2.0 * h);
                let scale = g.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((g - numeric).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn hybrid_gradient_matches_finite_differences_fixed() {
        for seed in 0..5 {
            let err = finite_diff_check(LambdaMode::Fixed(0.2), seed);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn hybrid_gradient_matches_finite_differences_dynamic() {
        for seed in 0..5 {
            let err = finite_diff_check(LambdaMode::DynamicTargetProb, seed);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn hybrid_gradient_matches_finite_differences_approx_kl() {
        for seed in 0..5 {
            let err = finite_diff_check(LambdaMode::ApproxKl, seed);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn dm_only_batch_ignores_lambda_mode() {
        let (tok_q, tok_p, dmap) = cross_pair();
        let lm = randomized_drafter(&tok_q, 3);
        let mut batch = random_batch(&tok_q, &tok_p, &dmap, 3);
        batch[0].positions.retain(|p| matches!(p, PositionRecord::DirectMapped { .. }));
        let (l1, g1) = hybrid_loss_grad(&lm, &batch, LambdaMode::Fixed(0.7), &dmap).unwrap();
        let (l2, g2) = hybrid_loss_grad(&lm, &batch, LambdaMode::ApproxKl, &dmap).unwrap();
        let (l3, g3) =
            hybrid_loss_grad(&lm, &batch, LambdaMode::DynamicTargetProb, &dmap).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(l1, l3);
        assert_eq!(g1.rows, g2.rows);
        assert_eq!(g1.rows, g3.rows);
    }

    #[test]
    fn lambda_zero_reduces_to_dm_term() {
        let (tok_q, tok_p, dmap) = cross_pair();
        let lm = randomized_drafter(&tok_q, 4);
        let batch = random_batch(&tok_q, &tok_p, &dmap, 4);
        let (loss, grad) = hybrid_loss_grad(&lm, &batch, LambdaMode::Fixed(0.0), &dmap).unwrap();

        // Independent evaluation of the lone DM position.
        let (context, teacher) = match &batch[0].positions[0] {
            PositionRecord::DirectMapped { context, teacher, .. } => (context, teacher),
            _ => unreachable!(),
        };
        let teacher_dist = CategoricalDist {
            probs: teacher.clone(),
            space: VocabSpace::Draft,
            sub_normalized: true,
        };
        let support: Vec<TokenId> = dmap.pairs().map(|(d, _)| d).collect();
        let (kl, _) = lm.kl_grad(context, &teacher_dist, Some(&support)).unwrap();
        assert!((loss - kl / 2.0).abs() < 1e-12, "mean over both positions");
        // The n-gram contexts receive zero gradient.
        for row in grad.rows.values() {
            assert!(row.iter().all(|v| v.is_finite()));
        }
        let ngram_key = match &batch[0].positions[1] {
            PositionRecord::NGramMerged { contexts, .. } => contexts[1].clone(),
            _ => unreachable!(),
        };
        let key: Vec<TokenId> = ngram_key[ngram_key.len().saturating_sub(2)..].to_vec();
        if let Some(row) = grad.rows.get(&key) {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dynamic_mode_is_pointwise_target_weighted_nll() {
        let (tok_q, tok_p, dmap) = cross_pair();
        let lm = randomized_drafter(&tok_q, 5);
        let mut batch = random_batch(&tok_q, &tok_p, &dmap, 5);
        batch[0].positions.retain(|p| matches!(p, PositionRecord::NGramMerged { .. }));
        let (loss, _) =
            hybrid_loss_grad(&lm, &batch, LambdaMode::DynamicTargetProb, &dmap).unwrap();
        let (contexts, draft_seq, target_prob) = match &batch[0].positions[0] {
            PositionRecord::NGramMerged { contexts, draft_seq, target_prob, .. } => {
                (contexts, draft_seq, *target_prob)
            }
            _ => unreachable!(),
        };
        let mut log_q = 0.0;
        for (c, &d) in contexts.iter().zip(draft_seq) {
            log_q += lm.next_token_dist(c).unwrap().probs[d as usize].ln();
        }
        assert!((loss - (-target_prob * log_q)).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (tok_q, _, dmap) = cross_pair();
        let lm = randomized_drafter(&tok_q, 1);
        assert!(matches!(
            hybrid_loss_grad(&lm, &[], LambdaMode::Fixed(0.2), &dmap),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn acceptance_label_cases() {
        assert_eq!(acceptance_label(0.3, 0.3), 1.0);
        assert_eq!(acceptance_label(0.2, 0.4), 0.5);
        assert_eq!(acceptance_label(0.3, 1e-15), 1.0);
    }

    #[test]
    fn early_exit_thresholds() {
        assert!(!early_exit(&[0.9, 0.8], 0.3), "1-0.72 <= 0.3 continues");
        assert!(early_exit(&[0.9, 0.8, 0.7], 0.3), "1-0.504 > 0.3 exits");
        assert!(!early_exit(&[0.01; 50], 1.0), "gamma=1 never exits");
    }

    #[test]
    fn early_exit_is_monotone_in_accept_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let n = rng.random_range(1..6);
            let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.99)).collect();
            let gamma: f64 = rng.random_range(0.0..1.0);
            if early_exit(&probs, gamma) {
                let mut lower = probs.clone();
                let i = rng.random_range(0..n);
                lower[i] *= rng.random_range(0.1..1.0);
                assert!(early_exit(&lower, gamma), "lowering a prob cannot flip exit to continue");
            }
        }
    }

    #[test]
    fn head_is_stationary_when_predictions_equal_labels() {
        let mut head = AcceptanceHead::new(3, 1);
        let items: Vec<(Vec<f64>, f64)> = (0..4)
            .map(|i| {
                let e = vec![i as f64 * 0.3 - 0.5, 0.2, -0.1];
                let l = head.predict(&e);
                (e, l)
            })
            .collect();
        let before = head.clone();
        head_update(&mut head, &items, 1.0, 0.5);
        for (w, b) in head.weight.iter().zip(&before.weight) {
            assert!((w - b).abs() < 1e-12);
        }
        assert!((head.bias - before.bias).abs() < 1e-12);
    }

    #[test]
    fn head_bce_value_and_finite_difference() {
        // sigma(0) = 0.5 against label 1: loss = ln 2.
        let head = AcceptanceHead { weight: vec![0.0, 0.0], bias: 0.0 };
        let items = vec![(vec![0.4, -0.7], 1.0)];
        let loss = head_update(&mut head.clone(), &items, 1.0, 0.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // Finite differences on weights and bias.
        let h = 1e-6;
        let base = AcceptanceHead { weight: vec![0.3, -0.2], bias: 0.1 };
        let items = vec![(vec![0.4, -0.7], 0.8), (vec![-0.3, 0.5], 0.2)];
        let eval = |hd: &AcceptanceHead| head_update(&mut hd.clone(), &items, 1.0, 0.0);
        // Recover the analytic gradient from a tiny SGD step.
        let lr = 1e-8;
        let mut stepped = base.clone();
        head_update(&mut stepped, &items, 1.0, lr);
        for i in 0..2 {
            let mut plus = base.clone();
            plus.weight[i] += h;
            let mut minus = base.clone();
            minus.weight[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = (base.weight[i] - stepped.weight[i]) / lr;
            assert!((numeric - analytic).abs() < 1e-4, "weight {i}: {numeric} vs {analytic}");
        }
        let mut plus = base.clone();
        plus.bias += h;
        let mut minus = base.clone();
        minus.bias -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let analytic = (base.bias - stepped.bias) / lr;
        assert!((numeric - analytic).abs() < 1e-4, "bias: {numeric} vs {analytic}");
    }

    #[test]
    fn head_gradient_is_linear_in_positive_weight() {
        let base = AcceptanceHead { weight: vec![0.3, -0.2], bias: 0.1 };
        let items = vec![(vec![0.4, -0.7], 1.0), (vec![-0.3, 0.5], 1.0)];
        let lr = 1e-6;
        let mut one = base.clone();
        head_update(&mut one, &items, 1.0, lr);
        let mut two = base.clone();
        head_update(&mut two, &items, 2.0, lr);
        for i in 0..2 {
            let g1 = base.weight[i] - one.weight[i];
            let g2 = base.weight[i] - two.weight[i];
            assert!((g2 - 2.0 * g1).abs() < 1e-15);
        }
        assert!(((base.bias - two.bias) - 2.0 * (base.bias - one.bias)).abs() < 1e-15);
    }

    #[test]
    fn pretrain_zero_epochs_is_identity_and_self_labels_are_stationary() {
        let mut head = AcceptanceHead::new(3, 5);
        let before = head.clone();
        let trace: Vec<(Vec<f64>, f64)> = (0..6)
            .map(|i| {
                let e = vec![0.1 * i as f64, -0.2, 0.3];
                let l = head.predict(&e);
                (e, l)
            })
            .collect();
        pretrain_head(&mut head, &trace, 0, 1.0, 0.5);
        assert_eq!(head, before);
        pretrain_head(&mut head, &trace, 1, 1.0, 0.5);
        for (w, b) in head.weight.iter().zip(&before.weight) {
            assert!((w - b).abs() < 1e-12);
        }
    }

    /// Same-vocabulary streaming setup for schedule tests.
    fn vanilla_setup() -> (Tokenizer, TabularLM, DirectMap, EngineConfig) {
        let corpus: Vec<String> = ["flake", "is", " "].iter().map(|s| s.to_string()).collect();
        let tok = Tokenizer::train_bpe(&corpus, 4).unwrap();
        let mut target = TabularLM::new(tok.vocab_size(), 2, 1.0, 4, 2);
        target.fit_counts(&[tok.tokenize("flake is flake is flake is ").unwrap()]);
        let dmap = compute_direct_map(&tok, &tok);
        let config = EngineConfig {
            mode: Mode::Vanilla,
            k: 3,
            max_new_tokens: 12,
            gamma: 0.6,
            ..Default::default()
        };
        (tok, target, dmap, config)
    }

    fn drive(adapter: &mut OnlineAdapter, n: usize, setup: &(Tokenizer, TabularLM, DirectMap, EngineConfig), rng: &mut ChaCha8Rng, clock: &mut u64) {
        let (tok, target, _, config) = setup;
        let mut cache = NGramCache::new(EvictionPolicy::Lfu, None);
        for _ in 0..n {
            adapter
                .process_sample(target, tok, tok, &mut cache, config, "flake ", rng, clock)
                .unwrap();
            assert!(adapter.replay_len() <= adapter.config.replay_max);
            if adapter.samples_seen() % adapter.config.interval == 0 {
                assert_eq!(adapter.distill_buf_len(), 0, "window cleared on interval steps");
            }
        }
    }

    #[test]
    fn joint_schedule_updates_once_per_interval() {
        let setup = vanilla_setup();
        let drafter = TabularLM::new(setup.0.vocab_size(), 2, 1.0, 4, 9);
        let config = AdaptConfig {
            schedule: Schedule::Joint,
            interval: 4,
            use_head: true,
            ..Default::default()
        };
        let mut adapter = OnlineAdapter::new(drafter, setup.2.clone(), config, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut clock = 0;
        drive(&mut adapter, 8, &setup, &mut rng, &mut clock);
        assert_eq!(adapter.distill_updates, 2);
        assert_eq!(adapter.head_updates, 2);
    }

    #[test]
    fn interleaved_schedule_counts_and_fifo_eviction() {
        let setup = vanilla_setup();
        let drafter = TabularLM::new(setup.0.vocab_size(), 2, 1.0, 4, 9);
        let config = AdaptConfig {
            schedule: Schedule::Interleaved,
            interval: 4,
            replay_max: 4,
            batch_size: 3,
            use_head: true,
            ..Default::default()
        };
        let mut adapter = OnlineAdapter::new(drafter, setup.2.clone(), config, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut clock = 0;
        drive(&mut adapter, 8, &setup, &mut rng, &mut clock);
        assert_eq!(adapter.distill_updates, 2);
        assert_eq!(adapter.head_updates, 6);
        assert!(adapter.replay_len() <= 4);
        // Oldest replay items were evicted: every surviving item came from
        // the most recent interval pushes.
        assert_eq!(adapter.replay_len(), 4);
    }

    #[test]
    fn labels_shift_after_a_distillation_step() {
        let (tok_q, tok_p, dmap) = cross_pair();
        let mut lm = randomized_drafter(&tok_q, 6);
        let batch = random_batch(&tok_q, &tok_p, &dmap, 6);
        let context = vec![tok_q.id_of("la").unwrap()];
        let token = tok_q.id_of("is").unwrap();
        let q0 = lm.next_token_dist(&context).unwrap().probs[token as usize];
        let p_val = 0.5 * q0; // keep the label off its saturation point
        let label0 = acceptance_label(p_val, q0);
        let hyper = AdamHyper { lr: 0.5, weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::default();
        let (_, grad) = hybrid_loss_grad(&lm, &batch, LambdaMode::Fixed(0.2), &dmap).unwrap();
        lm.apply_update(&grad, &mut opt, &hyper);
        let q1 = lm.next_token_dist(&context).unwrap().probs[token as usize];
        let label1 = acceptance_label(p_val, q1);
        assert_ne!(label0, label1, "moving q moves the recomputed label");
    }

    #[test]
    fn same_seed_runs_are_identical() {
        let setup = vanilla_setup();
        let mk = || {
            let drafter = TabularLM::new(setup.0.vocab_size(), 2, 1.0, 4, 9);
            let config = AdaptConfig {
                schedule: Schedule::Interleaved,
                interval: 3,
                use_head: true,
                hyper: AdamHyper { lr: 0.2, ..Default::default() },
                ..Default::default()
            };
            OnlineAdapter::new(drafter, setup.2.clone(), config, 7)
        };
        let mut a = mk();
        let mut b = mk();
        let mut rng_a = ChaCha8Rng::seed_from_u64(42);
        let mut rng_b = ChaCha8Rng::seed_from_u64(42);
        let (mut ca, mut cb) = (0, 0);
        drive(&mut a, 7, &setup, &mut rng_a, &mut ca);
        drive(&mut b, 7, &setup, &mut rng_b, &mut cb);
        assert_eq!(a.drafter, b.drafter);
        assert_eq!(a.head, b.head);
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let setup = vanilla_setup();
        let config = AdaptConfig {
            schedule: Schedule::Joint,
            interval: 3,
            use_head: true,
            hyper: AdamHyper { lr: 0.2, ..Default::default() },
            ..Default::default()
        };
        let drafter = TabularLM::new(setup.0.vocab_size(), 2, 1.0, 4, 9);
        // Continuous run: 10 samples.
        let mut full = OnlineAdapter::new(drafter.clone(), setup.2.clone(), config.clone(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut clock = 0;
        drive(&mut full, 10, &setup, &mut rng, &mut clock);

        // Split run: 5 samples, checkpoint through JSON, 5 more. The
        // engine RNG and clock are external state restored by the caller.
        let mut first = OnlineAdapter::new(drafter, setup.2.clone(), config, 7);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let mut clock2 = 0;
        drive(&mut first, 5, &setup, &mut rng2, &mut clock2);
        let json = first.checkpoint_json().unwrap();
        let mut resumed = OnlineAdapter::from_checkpoint_json(&json).unwrap();
        drive(&mut resumed, 5, &setup, &mut rng2, &mut clock2);

        assert_eq!(full.drafter, resumed.drafter);
        assert_eq!(full.head, resumed.head);
        assert_eq!(full.samples_seen(), resumed.samples_seen());
        assert_eq!(full.checkpoint_json().unwrap(), resumed.checkpoint_json().unwrap());
    }

    #[test]
    fn checkpoint_rejects_unknown_version() {
        let setup = vanilla_setup();
        let drafter = TabularLM::new(setup.0.vocab_size(), 2, 1.0, 4, 9);
        let adapter = OnlineAdapter::new(drafter, setup.2.clone(), AdaptConfig::default(), 7);
        let json = adapter.checkpoint_json().unwrap().replace("\"version\":1", "\"version\":9");
        assert!(matches!(
            OnlineAdapter::from_checkpoint_json(&json),
            Err(Error::VersionMismatch { .. })
        ));
    }
}
