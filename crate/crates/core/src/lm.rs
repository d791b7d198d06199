//! Probability oracles: tabular softmax conditional language models with
//! full next-token distributions, token embeddings, analytic gradients, and
//! AdamW parameter updates.
//!
//! An order-n model keys a logit row by the last n tokens of context. Unseen
//! windows fall back to a single shared backoff row; gradient updates
//! materialize the touched row so contexts train independently.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

const CHECKPOINT_VERSION: u32 = 1;
const NORM_TOL: f64 = 1e-9;

/// Which vocabulary a distribution lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VocabSpace {
    Draft,
    Target,
}

/// Dense probability vector over one vocabulary.
///
/// `sub_normalized` flags distributions whose mass is deliberately below 1,
/// such as elevated cross-vocabulary distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    pub probs: Vec<f64>,
    pub space: VocabSpace,
    pub sub_normalized: bool,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>, space: VocabSpace) -> CategoricalDist {
        CategoricalDist { probs, space, sub_normalized: false }
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn check_normalized(&self) -> Result<()> {
        if self.sub_normalized {
            return Err(Error::SubNormalized);
        }
        let s = self.sum();
        if (s - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized(s));
        }
        Ok(())
    }

    /// Inverse-CDF sample. Deterministic for a fixed seed and distribution.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<TokenId> {
        self.check_normalized()?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(i as TokenId);
            }
        }
        // Rounding can leave acc marginally below 1; fall to the last token.
        Ok((self.probs.len() - 1) as TokenId)
    }

    /// In-place masking to a token subset followed by renormalization.
    pub fn mask_and_renormalize(&mut self, keep: impl Fn(TokenId) -> bool) {
        let mut sum = 0.0;
        for (i, p) in self.probs.iter_mut().enumerate() {
            if !keep(i as TokenId) {
                *p = 0.0;
            }
            sum += *p;
        }
        if sum > 0.0 {
            for p in &mut self.probs {
                *p /= sum;
            }
            self.sub_normalized = false;
        }
    }
}

/// Sparse gradient: dense row gradients keyed like the logit table, plus
/// embedding gradients for touched tokens.
#[derive(Debug, Clone, Default)]
pub struct ParamGrad {
    pub rows: BTreeMap<Vec<TokenId>, Vec<f64>>,
    pub embed: BTreeMap<TokenId, Vec<f64>>,
}

impl ParamGrad {
    pub fn add_row(&mut self, key: Vec<TokenId>, grad: &[f64]) {
        let row = self.rows.entry(key).or_insert_with(|| vec![0.0; grad.len()]);
        for (a, b) in row.iter_mut().zip(grad) {
            *a += b;
        }
    }

    pub fn merge(&mut self, other: &ParamGrad) {
        for (k, g) in &other.rows {
            self.add_row(k.clone(), g);
        }
        for (t, g) in &other.embed {
            let e = self.embed.entry(*t).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in e.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.rows.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
        for g in self.embed.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.embed.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-4, beta1: 0.9, beta2: 0.999, weight_decay: 0.01, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam moment estimates, keyed like the model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    rows: BTreeMap<Vec<TokenId>, Moments>,
    embed: BTreeMap<TokenId, Moments>,
}

/// Tabular softmax conditional LM.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLM {
    pub order: usize,
    pub vocab_size: usize,
    pub temperature: f64,
    rows: BTreeMap<Vec<TokenId>, Vec<f64>>,
    backoff: Vec<f64>,
    embed: Vec<Vec<f64>>,
}

impl TabularLM {
    /// Fresh model with all-zero logits (uniform everywhere) and
    /// deterministically seeded embeddings of dimension `embed_dim`.
    pub fn new(vocab_size: usize, order: usize, temperature: f64, embed_dim: usize, seed: u64) -> TabularLM {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let embed = (0..vocab_size)
            .map(|_| (0..embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        TabularLM {
            order,
            vocab_size,
            temperature,
            rows: BTreeMap::new(),
            backoff: vec![0.0; vocab_size],
            embed,
        }
    }

    /// Fit logit rows from corpus token sequences: logit = ln(count + 0.5)
    /// per observed window, which makes softmax approximate the smoothed
    /// conditional frequencies at temperature 1.
    pub fn fit_counts(&mut self, sequences: &[Vec<TokenId>]) {
        let mut counts: BTreeMap<Vec<TokenId>, Vec<u64>> = BTreeMap::new();
        for seq in sequences {
            for i in 0..seq.len() {
                let start = i.saturating_sub(self.order);
                let key = seq[start..i].to_vec();
                let row = counts.entry(key).or_insert_with(|| vec![0; self.vocab_size]);
                row[seq[i] as usize] += 1;
            }
        }
        for (key, cnts) in counts {
            let row = cnts.iter().map(|&c| (c as f64 + 0.5).ln()).collect();
            self.rows.insert(key, row);
        }
    }

    pub fn embedding(&self, token: TokenId) -> Result<&[f64]> {
        self.embed
            .get(token as usize)
            .map(|e| e.as_slice())
            .ok_or(Error::InvalidTokenId { id: token, vocab_size: self.vocab_size })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.first().map_or(0, |e| e.len())
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    fn context_key(&self, context: &[TokenId]) -> Vec<TokenId> {
        let start = context.len().saturating_sub(self.order);
        context[start..].to_vec()
    }

    fn validate_context(&self, context: &[TokenId]) -> Result<()> {
        for &t in context {
            if t as usize >= self.vocab_size {
                return Err(Error::InvalidTokenId { id: t, vocab_size: self.vocab_size });
            }
        }
        Ok(())
    }

    fn logits_for(&self, key: &[TokenId]) -> &[f64] {
        self.rows.get(key).map(|r| r.as_slice()).unwrap_or(&self.backoff)
    }

    fn softmax_of(&self, key: &[TokenId]) -> Vec<f64> {
        softmax(self.logits_for(key), self.temperature)
    }

    /// Full next-token distribution p(.|context) = softmax(logits / T).
    pub fn next_token_dist(&self, context: &[TokenId]) -> Result<CategoricalDist> {
        self.validate_context(context)?;
        let key = self.context_key(context);
        Ok(CategoricalDist::new(self.softmax_of(&key), VocabSpace::Draft))
    }

    /// Gradient of -log q(token|context) with respect to the touched row:
    /// (softmax - onehot) / T. Embeddings receive no gradient on this path.
    pub fn nll_grad(&self, context: &[TokenId], token: TokenId) -> Result<(f64, ParamGrad)> {
        self.validate_context(context)?;
        if token as usize >= self.vocab_size {
            return Err(Error::InvalidTokenId { id: token, vocab_size: self.vocab_size });
        }
        let key = self.context_key(context);
        let q = self.softmax_of(&key);
        let loss = -q[token as usize].max(f64::MIN_POSITIVE).ln();
        let mut row = vec![0.0; self.vocab_size];
        for (i, g) in row.iter_mut().enumerate() {
            *g = (q[i] - if i == token as usize { 1.0 } else { 0.0 }) / self.temperature;
        }
        let mut grad = ParamGrad::default();
        grad.add_row(key, &row);
        Ok((loss, grad))
    }

    /// Gradient of reverse KL(q_theta || teacher) with respect to the row
    /// logits. With `mask` present, both sides are renormalized over the
    /// subset before the divergence is taken.
    pub fn kl_grad(
        &self,
        context: &[TokenId],
        teacher: &CategoricalDist,
        mask: Option<&[TokenId]>,
    ) -> Result<(f64, ParamGrad)> {
        self.validate_context(context)?;
        let key = self.context_key(context);
        let q = self.softmax_of(&key);

        let mut dl_dq = vec![0.0; self.vocab_size];
        let kl;
        match mask {
            None => {
                for (i, &p) in teacher.probs.iter().enumerate() {
                    if p <= 0.0 {
                        return Err(Error::TeacherZero(i));
                    }
                }
                kl = q
                    .iter()
                    .zip(&teacher.probs)
                    .map(|(&qi, &pi)| qi * (qi / pi).ln())
                    .sum::<f64>();
                for i in 0..self.vocab_size {
                    dl_dq[i] = (q[i] / teacher.probs[i]).ln() - kl;
                }
            }
            Some(subset) => {
                let qs: f64 = subset.iter().map(|&i| q[i as usize]).sum();
                let ps: f64 = subset.iter().map(|&i| teacher.probs[i as usize]).sum();
                for &i in subset {
                    if teacher.probs[i as usize] <= 0.0 {
                        return Err(Error::TeacherZero(i as usize));
                    }
                }
                kl = subset
                    .iter()
                    .map(|&i| {
                        let qt = q[i as usize] / qs;
                        let pt = teacher.probs[i as usize] / ps;
                        qt * (qt / pt).ln()
                    })
                    .sum::<f64>();
                for &i in subset {
                    let qt = q[i as usize] / qs;
                    let pt = teacher.probs[i as usize] / ps;
                    dl_dq[i as usize] = ((qt / pt).ln() - kl) / qs;
                }
            }
        }

        let row = softmax_backward(&q, &dl_dq, self.temperature);
        let mut grad = ParamGrad::default();
        grad.add_row(key, &row);
        Ok((kl, grad))
    }

    /// Add `delta` to one logit entry, materializing the row if needed.
    /// Intended for finite-difference gradient checks and diagnostics.
    pub fn nudge_row(&mut self, context: &[TokenId], index: usize, delta: f64) {
        let key = self.context_key(context);
        let backoff = self.backoff.clone();
        let row = self.rows.entry(key).or_insert(backoff);
        row[index] += delta;
    }

    /// Chain a loss gradient with respect to the output distribution back
    /// to the logit row serving `context`.
    pub fn dist_grad(&self, context: &[TokenId], dl_dq: &[f64]) -> Result<ParamGrad> {
        self.validate_context(context)?;
        let key = self.context_key(context);
        let q = self.softmax_of(&key);
        let row = softmax_backward(&q, dl_dq, self.temperature);
        let mut grad = ParamGrad::default();
        grad.add_row(key, &row);
        Ok(grad)
    }

    /// AdamW step with decoupled weight decay. Rows touched for the first
    /// time are materialized from the backoff row.
    pub fn apply_update(&mut self, grad: &ParamGrad, state: &mut OptimizerState, hyper: &AdamHyper) {
        let backoff = self.backoff.clone();
        for (key, g) in &grad.rows {
            let row = self.rows.entry(key.clone()).or_insert_with(|| backoff.clone());
            let mom = state.rows.entry(key.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            adamw_step(row, g, mom, hyper);
        }
        for (&tok, g) in &grad.embed {
            if let Some(e) = self.embed.get_mut(tok as usize) {
                let mom = state.embed.entry(tok).or_insert_with(|| Moments {
                    m: vec![0.0; g.len()],
                    v: vec![0.0; g.len()],
                    t: 0,
                });
                adamw_step(e, g, mom, hyper);
            }
        }
    }

    pub fn save(&self, state: &OptimizerState, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_json(state)?)?;
        Ok(())
    }

    pub fn checkpoint_json(&self, state: &OptimizerState) -> Result<String> {
        let file = LmCheckpoint {
            version: CHECKPOINT_VERSION,
            order: self.order,
            vocab_size: self.vocab_size,
            temperature: self.temperature,
            rows: self.rows.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            backoff: self.backoff.clone(),
            embed: self.embed.clone(),
            opt_rows: state.rows.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            opt_embed: state.embed.iter().map(|(&k, v)| (k, v.clone())).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn load(path: &Path) -> Result<(TabularLM, OptimizerState)> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_checkpoint_json(json: &str) -> Result<(TabularLM, OptimizerState)> {
        let file: LmCheckpoint = serde_json::from_str(json)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: file.version, expected: CHECKPOINT_VERSION });
        }
        let model = TabularLM {
            order: file.order,
            vocab_size: file.vocab_size,
            temperature: file.temperature,
            rows: file.rows.into_iter().collect(),
            backoff: file.backoff,
            embed: file.embed,
        };
        let state = OptimizerState {
            rows: file.opt_rows.into_iter().collect(),
            embed: file.opt_embed.into_iter().collect(),
        };
        Ok((model, state))
    }
}

#[derive(Serialize, Deserialize)]
struct LmCheckpoint {
    version: u32,
    order: usize,
    vocab_size: usize,
    temperature: f64,
    rows: Vec<(Vec<TokenId>, Vec<f64>)>,
    backoff: Vec<f64>,
    embed: Vec<Vec<f64>>,
    opt_rows: Vec<(Vec<TokenId>, Moments)>,
    opt_embed: Vec<(TokenId, Moments)>,
}

fn adamw_step(param: &mut [f64], grad: &[f64], mom: &mut Moments, hyper: &AdamHyper) {
    mom.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(mom.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(mom.t as i32);
    for i in 0..param.len() {
        mom.m[i] = hyper.beta1 * mom.m[i] + (1.0 - hyper.beta1) * grad[i];
        mom.v[i] = hyper.beta2 * mom.v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let m_hat = mom.m[i] / bc1;
        let v_hat = mom.v[i] / bc2;
        param[i] -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * param[i]);
    }
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Chain rule through softmax(z/T): given dL/dq, return dL/dz.
pub fn softmax_backward(q: &[f64], dl_dq: &[f64], temperature: f64) -> Vec<f64> {
    let dot: f64 = q.iter().zip(dl_dq).map(|(&a, &b)| a * b).sum();
    q.iter()
        .zip(dl_dq)
        .map(|(&qi, &gi)| qi * (gi - dot) / temperature)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(vocab: usize, temp: f64) -> TabularLM {
        TabularLM::new(vocab, 2, temp, 4, 0)
    }

    fn randomize_row(model: &mut TabularLM, ctx: &[TokenId], rng: &mut ChaCha8Rng) {
        let key = model.context_key(ctx);
        let row: Vec<f64> = (0..model.vocab_size).map(|_| rng.random_range(-2.0..2.0)).collect();
        model.rows.insert(key, row);
    }

    #[test]
    fn fresh_model_is_uniform() {
        let m = model(5, 1.0);
        let d = m.next_token_dist(&[0, 1]).unwrap();
        for &p in &d.probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut m = model(4, 0.7);
        m.rows.insert(vec![0], vec![0.3, -1.0, 2.0, 0.1]);
        let before = m.next_token_dist(&[0]).unwrap();
        for z in m.rows.get_mut(&vec![0u32]).unwrap() {
            *z += 5.0;
        }
        let after = m.next_token_dist(&[0]).unwrap();
        for (a, b) in before.probs.iter().zip(&after.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_step_increases_probability() {
        let mut m = model(6, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        randomize_row(&mut m, &[1, 2], &mut rng);
        let before = m.next_token_dist(&[1, 2]).unwrap().probs[4];
        let (_, grad) = m.nll_grad(&[1, 2], 4).unwrap();
        let mut state = OptimizerState::default();
        let hyper = AdamHyper { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        m.apply_update(&grad, &mut state, &hyper);
        let after = m.next_token_dist(&[1, 2]).unwrap().probs[4];
        assert!(after > before, "dist(t) must strictly increase: {before} -> {after}");
    }

    #[test]
    fn invalid_token_id_errors() {
        let m = model(4, 1.0);
        assert!(m.next_token_dist(&[9]).is_err());
        assert!(m.nll_grad(&[0], 9).is_err());
    }

    #[test]
    fn sample_one_hot_any_seed() {
        let d = CategoricalDist::new(vec![0.0, 0.0, 1.0, 0.0], VocabSpace::Draft);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(d.sample(&mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn sample_uniform_frequencies_within_three_sigma() {
        let d = CategoricalDist::new(vec![0.25; 4], VocabSpace::Draft);
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[d.sample(&mut rng).unwrap() as usize] += 1;
        }
        // binomial sigma = sqrt(n p (1-p))
        let sigma = ((n as f64) * 0.25 * 0.75).sqrt();
        for &c in &counts {
            assert!((c as f64 - n as f64 * 0.25).abs() < 3.0 * sigma, "count {c} outside 3 sigma");
        }
    }

    #[test]
    fn sample_is_deterministic_per_seed() {
        let d = CategoricalDist::new(vec![0.1, 0.2, 0.3, 0.4], VocabSpace::Draft);
        let a = d.sample(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = d.sample(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_rejects_sub_normalized() {
        let mut d = CategoricalDist::new(vec![0.2, 0.2], VocabSpace::Target);
        d.sub_normalized = true;
        assert!(matches!(d.sample(&mut ChaCha8Rng::seed_from_u64(0)), Err(Error::SubNormalized)));
        let d2 = CategoricalDist::new(vec![0.2, 0.2], VocabSpace::Target);
        assert!(matches!(d2.sample(&mut ChaCha8Rng::seed_from_u64(0)), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn nll_grad_at_uniform_row() {
        let m = model(5, 1.0);
        let (_, grad) = m.nll_grad(&[0, 1], 2).unwrap();
        let row = grad.rows.values().next().unwrap();
        for (i, &g) in row.iter().enumerate() {
            let expect = if i == 2 { -(1.0 - 0.2) } else { 0.2 };
            assert!((g - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_grad_saturated_is_near_zero() {
        let mut m = model(3, 1.0);
        m.rows.insert(vec![0], vec![50.0, 0.0, 0.0]);
        let (_, grad) = m.nll_grad(&[0], 0).unwrap();
        let row = grad.rows.values().next().unwrap();
        for &g in row {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn kl_of_equal_dists_is_zero() {
        let m = model(4, 1.0);
        let teacher = m.next_token_dist(&[1]).unwrap();
        let (kl, grad) = m.kl_grad(&[1], &teacher, None).unwrap();
        assert!(kl.abs() < 1e-12);
        for &g in grad.rows.values().next().unwrap() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn kl_closed_form_two_tokens() {
        // student (0.5, 0.5), teacher (0.9, 0.1): KL ~ 0.5108
        let m = model(2, 1.0);
        let teacher = CategoricalDist::new(vec![0.9, 0.1], VocabSpace::Draft);
        let (kl, _) = m.kl_grad(&[0], &teacher, None).unwrap();
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.5108).abs() < 1e-3);
    }

    #[test]
    fn kl_rejects_zero_teacher() {
        let m = model(3, 1.0);
        let teacher = CategoricalDist::new(vec![0.5, 0.5, 0.0], VocabSpace::Draft);
        assert!(matches!(m.kl_grad(&[0], &teacher, None), Err(Error::TeacherZero(2))));
    }

    /// Central finite differences on the touched logit row.
    fn finite_diff_row<F: Fn(&TabularLM) -> f64>(
        m: &TabularLM,
        key: &[TokenId],
        loss: F,
        step: f64,
    ) -> Vec<f64> {
        let mut out = vec![0.0; m.vocab_size];
        for i in 0..m.vocab_size {
            let mut hi = m.clone();
            hi.rows.entry(key.to_vec()).or_insert_with(|| hi.backoff.clone())[i] += step;
            let mut lo = m.clone();
            lo.rows.entry(key.to_vec()).or_insert_with(|| lo.backoff.clone())[i] -= step;
            out[i] = (loss(&hi) - loss(&lo)) / (2.0 * step);
        }
        out
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn nll_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..100 {
            let vocab = rng.random_range(2..8);
            let temp = [0.5, 1.0, 2.0][trial % 3];
            let mut m = TabularLM::new(vocab, 2, temp, 4, trial as u64);
            let ctx = vec![rng.random_range(0..vocab as u32), rng.random_range(0..vocab as u32)];
            randomize_row(&mut m, &ctx, &mut rng);
            let token = rng.random_range(0..vocab as u32);
            let (_, grad) = m.nll_grad(&ctx, token).unwrap();
            let key = m.context_key(&ctx);
            let fd = finite_diff_row(&m, &key, |mm| mm.nll_grad(&ctx, token).unwrap().0, 1e-4);
            let analytic = grad.rows.get(&key).unwrap();
            assert!(rel_err(analytic, &fd) < 1e-5, "trial {trial}: rel err too large");
        }
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..100 {
            let vocab = rng.random_range(2..8);
            let mut m = TabularLM::new(vocab, 2, 1.0, 4, trial as u64);
            let ctx = vec![rng.random_range(0..vocab as u32)];
            randomize_row(&mut m, &ctx, &mut rng);
            let raw: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let teacher = CategoricalDist::new(raw.into_iter().map(|x| x / s).collect(), VocabSpace::Draft);
            let (_, grad) = m.kl_grad(&ctx, &teacher, None).unwrap();
            let key = m.context_key(&ctx);
            let fd = finite_diff_row(&m, &key, |mm| mm.kl_grad(&ctx, &teacher, None).unwrap().0, 1e-4);
            assert!(rel_err(grad.rows.get(&key).unwrap(), &fd) < 1e-5, "trial {trial}");
        }
    }

    #[test]
    fn masked_kl_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for trial in 0..50 {
            let vocab = 6;
            let mut m = TabularLM::new(vocab, 2, 1.0, 4, trial as u64);
            let ctx = vec![rng.random_range(0..vocab as u32)];
            randomize_row(&mut m, &ctx, &mut rng);
            let raw: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let teacher = CategoricalDist::new(raw.into_iter().map(|x| x / s).collect(), VocabSpace::Draft);
            let mask = vec![0u32, 2, 5];
            let (_, grad) = m.kl_grad(&ctx, &teacher, Some(&mask)).unwrap();
            let key = m.context_key(&ctx);
            let fd = finite_diff_row(
                &m,
                &key,
                |mm| mm.kl_grad(&ctx, &teacher, Some(&mask)).unwrap().0,
                1e-4,
            );
            assert!(rel_err(grad.rows.get(&key).unwrap(), &fd) < 1e-5, "trial {trial}");
        }
    }

    #[test]
    fn zero_grad_leaves_parameters_unchanged() {
        let mut m = model(4, 1.0);
        let before = m.clone();
        let mut grad = ParamGrad::default();
        grad.add_row(vec![0, 1], &[0.0; 4]);
        let mut state = OptimizerState::default();
        let hyper = AdamHyper { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        m.apply_update(&grad, &mut state, &hyper);
        // Materialized row equals backoff and stays at zero logits.
        assert_eq!(m.rows.get(&vec![0u32, 1]).unwrap(), &vec![0.0; 4]);
        assert_eq!(m.backoff, before.backoff);
    }

    #[test]
    fn first_adam_step_of_unit_gradient() {
        // single scalar parameter, g=1, lr=0.1 -> step ~ -0.1
        let mut param = vec![0.0];
        let mut mom = Moments { m: vec![0.0], v: vec![0.0], t: 0 };
        let hyper = AdamHyper { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut param, &[1.0], &mut mom, &hyper);
        assert!((param[0] + 0.1).abs() < 1e-6, "got {}", param[0]);
    }

    #[test]
    fn identical_updates_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m1 = model(5, 1.0);
        randomize_row(&mut m1, &[1], &mut rng);
        let mut m2 = m1.clone();
        let (_, grad) = m1.nll_grad(&[1], 3).unwrap();
        let mut s1 = OptimizerState::default();
        let mut s2 = OptimizerState::default();
        let hyper = AdamHyper::default();
        m1.apply_update(&grad, &mut s1, &hyper);
        m2.apply_update(&grad, &mut s2, &hyper);
        assert_eq!(m1, m2);
    }

    #[test]
    fn temperature_monotonicity() {
        let mut m = model(4, 1.0);
        m.rows.insert(vec![2], vec![0.5, 1.5, -0.3, 0.2]);
        let p1 = m.next_token_dist(&[2]).unwrap().probs[1];
        m.temperature = 0.5;
        let p2 = m.next_token_dist(&[2]).unwrap().probs[1];
        assert!(p2 > p1, "lowering temperature must increase the max-prob entry");
    }

    #[test]
    fn distributions_are_normalized_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..50 {
            let vocab = rng.random_range(2..10);
            let mut m = TabularLM::new(vocab, 2, rng.random_range(0.01..2.0), 4, trial);
            let ctx = vec![rng.random_range(0..vocab as u32)];
            randomize_row(&mut m, &ctx, &mut rng);
            let d = m.next_token_dist(&ctx).unwrap();
            assert!((d.sum() - 1.0).abs() < 1e-9);
            assert!(d.probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut m = model(6, 0.73);
        randomize_row(&mut m, &[0, 1], &mut rng);
        randomize_row(&mut m, &[4], &mut rng);
        let mut state = OptimizerState::default();
        let (_, grad) = m.nll_grad(&[0, 1], 2).unwrap();
        m.apply_update(&grad, &mut state, &AdamHyper::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        m.save(&state, &path).unwrap();
        let (back, back_state) = TabularLM::load(&path).unwrap();
        assert_eq!(m, back);
        // Applying the same grad to both must stay bit-identical.
        let mut s1 = state.clone();
        let mut s2 = back_state;
        let mut m2 = back;
        m.apply_update(&grad, &mut s1, &AdamHyper::default());
        m2.apply_update(&grad, &mut s2, &AdamHyper::default());
        assert_eq!(m, m2);
    }
}
