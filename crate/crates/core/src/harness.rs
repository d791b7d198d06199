//! Scenario harness: streams synthetic samples through the decoding engine
//! with optional online adaptation, executes mid-stream dataset and target
//! switches, runs ablation sweeps, and emits deterministic CSV/JSON
//! artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, LambdaMode, OnlineAdapter, Schedule};
use crate::cache::{EvictionPolicy, NGramCache};
use crate::corpus::{gen_corpus, Corpus, CorpusSpec};
use crate::engine::{compute_speedup, EngineConfig};
use crate::error::{Error, Result};
use crate::lm::TabularLM;
use crate::tokenizer::{compute_direct_map, Tokenizer};

/// What learns during the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Frozen drafter, no head.
    None,
    /// Drafter distillation only.
    DistillOnly,
    /// Acceptance head only; drafter frozen.
    AdaptOnly,
    /// Distillation and head updated together each interval.
    Joint,
    /// Distillation on interval steps, head replay updates in between.
    Interleaved,
}

/// Mid-stream regime change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchAction {
    /// Draw subsequent samples from another corpus.
    SwitchDataset(usize),
    /// Verify against another target model.
    SwitchTarget(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchEvent {
    /// Sample index at which the switch takes effect (that sample already
    /// runs under the new regime).
    pub step: usize,
    pub action: SwitchAction,
}

/// One verifier: its tokenizer merge budget and model shape. Targets with
/// equal trained tokenizers share the n-gram cache across switches; a
/// tokenizer change resets it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub merges: usize,
    pub order: usize,
    pub temperature: f64,
    /// Corpus the tokenizer and model are trained on.
    pub corpus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub corpora: Vec<CorpusSpec>,
    pub drafter_merges: usize,
    pub drafter_order: usize,
    pub drafter_temperature: f64,
    pub embed_dim: usize,
    /// Fit the drafter on this corpus before the stream; `None` starts
    /// from random logits.
    pub drafter_fit_corpus: Option<usize>,
    pub targets: Vec<TargetSpec>,
    pub engine: EngineConfig,
    pub adaptation: AdaptationMode,
    pub adapt: AdaptConfig,
    pub cache_policy: EvictionPolicy,
    pub cache_capacity: Option<usize>,
    pub switches: Vec<SwitchEvent>,
    /// Stream length in samples.
    pub samples: usize,
    /// Words of each sampled sentence used as the decoding prompt.
    pub prompt_words: usize,
    pub seed: u64,
    /// When set, run_scenario writes CSV/JSON/cache/checkpoint artifacts
    /// here (partial CSV is flushed on mid-stream errors).
    pub out_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            corpora: vec![CorpusSpec::default()],
            drafter_merges: 40,
            drafter_order: 2,
            drafter_temperature: 1.0,
            embed_dim: 8,
            drafter_fit_corpus: None,
            targets: vec![TargetSpec { merges: 300, order: 2, temperature: 1.0, corpus: 0 }],
            engine: EngineConfig { mask_to_direct_map: true, ..Default::default() },
            adaptation: AdaptationMode::None,
            adapt: AdaptConfig::default(),
            cache_policy: EvictionPolicy::Lfu,
            cache_capacity: None,
            switches: Vec::new(),
            samples: 50,
            prompt_words: 2,
            seed: 0,
        out_dir: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corpora.is_empty() {
            return Err(Error::InvalidConfig("at least one corpus is required".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidConfig("at least one target is required".into()));
        }
        for spec in &self.corpora {
            spec.validate()?;
        }
        let alpha = |s: &CorpusSpec| {
            let mut c: Vec<char> = s.alphabet.chars().collect();
            c.sort_unstable();
            c
        };
        let base = alpha(&self.corpora[0]);
        if self.corpora.iter().any(|c| alpha(c) != base) {
            return Err(Error::InvalidConfig(
                "all corpora must share one alphabet so tokenizers cover every stream".into(),
            ));
        }
        if self.prompt_words == 0 {
            return Err(Error::InvalidConfig("prompt_words must be positive".into()));
        }
        let mut last: Option<usize> = None;
        for ev in &self.switches {
            if let Some(prev) = last {
                if ev.step <= prev {
                    return Err(Error::InvalidConfig(
                        "switch steps must be strictly increasing".into(),
                    ));
                }
            }
            last = Some(ev.step);
            if ev.step >= self.samples {
                return Err(Error::InvalidConfig("switch step beyond stream end".into()));
            }
            let (id, bound, what) = match ev.action {
                SwitchAction::SwitchDataset(id) => (id, self.corpora.len(), "corpus"),
                SwitchAction::SwitchTarget(id) => (id, self.targets.len(), "target"),
            };
            if id >= bound {
                return Err(Error::InvalidConfig(format!("switch references unknown {what} {id}")));
            }
        }
        if let Some(c) = self.drafter_fit_corpus {
            if c >= self.corpora.len() {
                return Err(Error::InvalidConfig(format!("drafter_fit_corpus {c} undefined")));
            }
        }
        for t in &self.targets {
            if t.corpus >= self.corpora.len() {
                return Err(Error::InvalidConfig(format!("target corpus {} undefined", t.corpus)));
            }
        }
        self.engine.validate()?;
        Ok(())
    }

    /// Adapter knobs implied by the adaptation mode.
    fn effective_adapt(&self) -> AdaptConfig {
        let mut cfg = self.adapt.clone();
        match self.adaptation {
            AdaptationMode::None => {
                cfg.distill = false;
                cfg.use_head = false;
            }
            AdaptationMode::DistillOnly => {
                cfg.distill = true;
                cfg.use_head = false;
            }
            AdaptationMode::AdaptOnly => {
                cfg.distill = false;
                cfg.use_head = true;
            }
            AdaptationMode::Joint => {
                cfg.distill = true;
                cfg.use_head = true;
                cfg.schedule = Schedule::Joint;
            }
            AdaptationMode::Interleaved => {
                cfg.distill = true;
                cfg.use_head = true;
                cfg.schedule = Schedule::Interleaved;
            }
        }
        cfg
    }
}

/// Per-sample metric row; exactly the CSV columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub proposed: usize,
    pub accepted: usize,
    pub acc_rate: f64,
    pub ngram_hit: usize,
    pub accel_rate: f64,
    pub overhead: f64,
    pub speedup: f64,
    pub cache_size: usize,
}

/// Stream-level summaries; every field is a pure function of the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Total accepted over total proposed.
    pub acceptance_rate: f64,
    /// Mean of per-sample speedups.
    pub speedup: f64,
    /// Mean n-gram cache hits per sample.
    pub avg_ngram_hit: f64,
    pub final_cache_size: usize,
    /// New cache entries per sample over each quarter of the stream.
    pub cache_growth_per_quarter: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub rows: Vec<StepRow>,
    /// `None` for an empty stream.
    pub aggregates: Option<Aggregates>,
    /// Head BCE loss after each sample (0.0 before the first update).
    pub head_losses: Vec<f64>,
    /// Switches applied, as (step, description).
    pub switch_log: Vec<(usize, String)>,
    /// Cache hit-count histogram at end of stream: hits -> entry count.
    pub histogram: BTreeMap<u64, usize>,
}

pub const CSV_HEADER: &str =
    "step,proposed,accepted,acc_rate,ngram_hit,accel_rate,overhead,speedup,cache_size";

/// Fixed-width CSV for byte-identical reruns.
pub fn csv_string(rows: &[StepRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{},{:.6},{:.6},{:.6},{}\n",
            r.step,
            r.proposed,
            r.accepted,
            r.acc_rate,
            r.ngram_hit,
            r.accel_rate,
            r.overhead,
            r.speedup,
            r.cache_size
        ));
    }
    s
}

/// Recompute the aggregates from rows; the invariant checked by tests.
pub fn aggregates_from_rows(rows: &[StepRow]) -> Option<Aggregates> {
    if rows.is_empty() {
        return None;
    }
    let proposed: usize = rows.iter().map(|r| r.proposed).sum();
    let accepted: usize = rows.iter().map(|r| r.accepted).sum();
    let n = rows.len() as f64;
    let mut growth = Vec::new();
    let mut prev_idx = 0usize;
    let mut prev_size = 0usize;
    for q in 1..=4 {
        let idx = (rows.len() * q).div_ceil(4).max(1) - 1;
        let size = rows[idx].cache_size;
        let span = (idx + 1 - prev_idx).max(1) as f64;
        growth.push((size as f64 - prev_size as f64) / span);
        prev_idx = idx + 1;
        prev_size = size;
    }
    Some(Aggregates {
        acceptance_rate: accepted as f64 / proposed.max(1) as f64,
        speedup: rows.iter().map(|r| r.speedup).sum::<f64>() / n,
        avg_ngram_hit: rows.iter().map(|r| r.ngram_hit as f64).sum::<f64>() / n,
        final_cache_size: rows.last().unwrap().cache_size,
        cache_growth_per_quarter: growth,
    })
}

/// Write CSV, JSON report, histogram table, cache, and adapter checkpoint.
pub fn report_emit(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join("run.csv");
    fs::write(&csv_path, csv_string(&report.rows))?;
    written.push(csv_path);
    let json_path = dir.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(report)?)?;
    written.push(json_path);
    let hist_path = dir.join("histogram.csv");
    let mut hist = String::from("hit_count,entries\n");
    for (hits, n) in &report.histogram {
        hist.push_str(&format!("{hits},{n}\n"));
    }
    fs::write(&hist_path, hist)?;
    written.push(hist_path);
    Ok(written)
}

struct LiveState {
    tok_q: Tokenizer,
    targets: Vec<(Tokenizer, TabularLM)>,
    corpora: Vec<Corpus>,
    adapter: OnlineAdapter,
    cache: NGramCache,
    corpus_idx: usize,
    target_idx: usize,
}

fn build_state(config: &ScenarioConfig) -> Result<LiveState> {
    let corpora: Vec<Corpus> =
        config.corpora.iter().map(gen_corpus).collect::<Result<Vec<_>>>()?;
    let tok_q = Tokenizer::train_bpe(&corpora[0].drafter_material, config.drafter_merges)?;
    let mut targets = Vec::new();
    for spec in &config.targets {
        let corpus = &corpora[spec.corpus];
        let tok_p = Tokenizer::train_bpe(&corpus.target_material, spec.merges)?;
        let mut lm = TabularLM::new(
            tok_p.vocab_size(),
            spec.order,
            spec.temperature,
            config.embed_dim,
            config.seed,
        );
        let seqs = corpus
            .train
            .iter()
            .map(|s| tok_p.tokenize(s))
            .collect::<Result<Vec<_>>>()?;
        lm.fit_counts(&seqs);
        targets.push((tok_p, lm));
    }
    let mut drafter = TabularLM::new(
        tok_q.vocab_size(),
        config.drafter_order,
        config.drafter_temperature,
        config.embed_dim,
        config.seed,
    );
    if let Some(c) = config.drafter_fit_corpus {
        let seqs = corpora[c]
            .train
            .iter()
            .map(|s| tok_q.tokenize(s))
            .collect::<Result<Vec<_>>>()?;
        drafter.fit_counts(&seqs);
    }
    let dmap = compute_direct_map(&tok_q, &targets[0].0);
    let adapter =
        OnlineAdapter::new(drafter, dmap, config.effective_adapt(), config.seed.wrapping_add(13));
    let cache = NGramCache::new(config.cache_policy, config.cache_capacity);
    Ok(LiveState { tok_q, targets, corpora, adapter, cache, corpus_idx: 0, target_idx: 0 })
}

/// Stream `config.samples` decodes, adapting per the configured mode and
/// applying switch events at their exact steps. Artifacts are written to
/// `config.out_dir` when set; a mid-stream error still flushes the partial
/// CSV before returning.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunReport> {
    config.validate()?;
    let mut state = build_state(config)?;
    let mut rows: Vec<StepRow> = Vec::with_capacity(config.samples);
    let mut head_losses = Vec::with_capacity(config.samples);
    let mut switch_log = Vec::new();
    let mut decode_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pick_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(7));
    let mut clock: u64 = 0;

    let result = (|| -> Result<()> {
        for step in 0..config.samples {
            for ev in config.switches.iter().filter(|e| e.step == step) {
                match ev.action {
                    SwitchAction::SwitchDataset(id) => {
                        state.corpus_idx = id;
                        switch_log.push((step, format!("dataset:{id}")));
                    }
                    SwitchAction::SwitchTarget(id) => {
                        let same_family = state.targets[id].0 == state.targets[state.target_idx].0;
                        state.target_idx = id;
                        if !same_family {
                            state.cache =
                                NGramCache::new(config.cache_policy, config.cache_capacity);
                            state.adapter.set_dmap(compute_direct_map(
                                &state.tok_q,
                                &state.targets[id].0,
                            ));
                        }
                        switch_log.push((step, format!("target:{id}")));
                    }
                }
            }
            let corpus = &state.corpora[state.corpus_idx];
            let sentence = &corpus.train[pick_rng.random_range(0..corpus.train.len())];
            let words: Vec<&str> = sentence.split(' ').collect();
            let n = config.prompt_words.min(words.len());
            let mut prompt = words[..n].join(" ");
            prompt.push(' ');

            let (tok_p, target) = &state.targets[state.target_idx];
            let out = state.adapter.process_sample(
                target,
                &state.tok_q,
                tok_p,
                &mut state.cache,
                &config.engine,
                &prompt,
                &mut decode_rng,
                &mut clock,
            )?;
            let proposed: usize = out.metrics.iter().map(|m| m.proposed).sum();
            let accepted: usize = out.metrics.iter().map(|m| m.accepted).sum();
            let ngram_hit: usize = out.metrics.iter().map(|m| m.ngram_hits).sum();
            let sp = compute_speedup(&out.metrics, &config.engine.cost_model)?;
            rows.push(StepRow {
                step,
                proposed,
                accepted,
                acc_rate: accepted as f64 / proposed.max(1) as f64,
                ngram_hit,
                accel_rate: sp.acceleration_rate,
                overhead: sp.overhead,
                speedup: sp.speedup,
                cache_size: state.cache.len(),
            });
            head_losses.push(state.adapter.last_head_loss);
        }
        Ok(())
    })();

    if let Err(e) = result {
        if let Some(dir) = &config.out_dir {
            let _ = fs::create_dir_all(dir);
            let _ = fs::write(dir.join("run.csv"), csv_string(&rows));
        }
        return Err(e);
    }

    let report = RunReport {
        config: config.clone(),
        seed: config.seed,
        aggregates: aggregates_from_rows(&rows),
        rows,
        head_losses,
        switch_log,
        histogram: state.cache.frequency_histogram(),
    };
    if let Some(dir) = &config.out_dir {
        report_emit(&report, dir)?;
        let (tok_p, _) = &state.targets[state.target_idx];
        state.cache.save(&state.tok_q, tok_p, &dir.join("cache.jsonl"))?;
        state.adapter.save(&dir.join("adapter.json"))?;
    }
    Ok(report)
}

/// One ablation axis value; applied to a copy of the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisValue {
    K(usize),
    Gamma(f64),
    Lambda(LambdaMode),
    CachePolicy(EvictionPolicy),
    CacheCapacity(Option<usize>),
}

pub fn apply_axis(base: &ScenarioConfig, value: &AxisValue) -> ScenarioConfig {
    let mut cfg = base.clone();
    match value {
        AxisValue::K(k) => cfg.engine.k = *k,
        AxisValue::Gamma(g) => cfg.engine.gamma = *g,
        AxisValue::Lambda(l) => cfg.adapt.lambda_mode = *l,
        AxisValue::CachePolicy(p) => cfg.cache_policy = *p,
        AxisValue::CacheCapacity(c) => cfg.cache_capacity = *c,
    }
    cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(axis_label(value)));
    cfg
}

fn axis_label(value: &AxisValue) -> String {
    match value {
        AxisValue::K(k) => format!("k_{k}"),
        AxisValue::Gamma(g) => format!("gamma_{g:.3}"),
        AxisValue::Lambda(LambdaMode::Fixed(v)) => format!("lambda_fixed_{v:.3}"),
        AxisValue::Lambda(LambdaMode::DynamicTargetProb) => "lambda_dynamic".to_string(),
        AxisValue::Lambda(LambdaMode::ApproxKl) => "lambda_approx_kl".to_string(),
        AxisValue::CachePolicy(EvictionPolicy::Lru) => "policy_lru".to_string(),
        AxisValue::CachePolicy(EvictionPolicy::Lfu) => "policy_lfu".to_string(),
        AxisValue::CacheCapacity(Some(c)) => format!("capacity_{c}"),
        AxisValue::CacheCapacity(None) => "capacity_full".to_string(),
    }
}

/// Independent runs over one ablation axis, shared base seed.
pub fn sweep(base: &ScenarioConfig, values: &[AxisValue]) -> Result<Vec<RunReport>> {
    values.iter().map(|v| run_scenario(&apply_axis(base, v))).collect()
}

/// The same scenario under several seeds; reported aggregates should be
/// averaged over these runs.
pub fn run_seeds(base: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<RunReport>> {
    seeds
        .iter()
        .map(|&s| {
            let mut cfg = base.clone();
            cfg.seed = s;
            cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("seed_{s}")));
            run_scenario(&cfg)
        })
        .collect()
}

/// Mean acceptance rate across runs (each weighted equally).
pub fn mean_acceptance(reports: &[RunReport]) -> f64 {
    let vals: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.aggregates.as_ref().map(|a| a.acceptance_rate))
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Windowed acceptance-rate time series: mean acc_rate over trailing
/// windows of `window` rows, one value per row index.
pub fn windowed_acceptance(rows: &[StepRow], window: usize) -> Vec<f64> {
    (0..rows.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &rows[lo..=i];
            let p: usize = slice.iter().map(|r| r.proposed).sum();
            let a: usize = slice.iter().map(|r| r.accepted).sum();
            a as f64 / p.max(1) as f64
        })
        .collect()
}
