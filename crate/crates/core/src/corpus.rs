//! Synthetic corpus generation: Zipf-distributed word streams with a
//! controllable fraction of "merge-rich" words that the target tokenizer
//! learns as single tokens while the drafter only ever sees their halves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Characters words are built from. Must be nonempty.
    pub alphabet: String,
    /// Size of the word list; words are ranked by frequency.
    pub num_words: usize,
    /// Zipf exponent: rank r is sampled with weight r^(-exponent).
    pub zipf_exponent: f64,
    pub word_len_min: usize,
    pub word_len_max: usize,
    /// Words per sentence, inclusive bounds.
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    pub train_sentences: usize,
    pub test_sentences: usize,
    /// Fraction of the word list (taken from the most frequent ranks)
    /// presented to the drafter tokenizer only as split halves, so the
    /// drafter never learns the whole-word merge. At 0.0 both tokenizer
    /// training materials are identical.
    pub merge_richness: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            alphabet: "abcdefgh".to_string(),
            num_words: 50,
            zipf_exponent: 1.1,
            word_len_min: 3,
            word_len_max: 6,
            sentence_len_min: 4,
            sentence_len_max: 8,
            train_sentences: 200,
            test_sentences: 50,
            merge_richness: 0.3,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() {
            return Err(Error::InvalidConfig("alphabet must be nonempty".into()));
        }
        if self.alphabet.contains(' ') {
            return Err(Error::InvalidConfig(
                "alphabet must not contain the space separator".into(),
            ));
        }
        if self.num_words == 0 {
            return Err(Error::InvalidConfig("num_words must be positive".into()));
        }
        if self.word_len_min < 2 || self.word_len_max < self.word_len_min {
            return Err(Error::InvalidConfig(
                "word lengths need 2 <= min <= max so every word can be split".into(),
            ));
        }
        if self.sentence_len_min < 1 || self.sentence_len_max < self.sentence_len_min {
            return Err(Error::InvalidConfig(
                "sentence lengths need 1 <= min <= max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.merge_richness) {
            return Err(Error::InvalidConfig("merge_richness must be in [0, 1]".into()));
        }
        if self.zipf_exponent < 0.0 {
            return Err(Error::InvalidConfig("zipf_exponent must be >= 0".into()));
        }
        let chars: Vec<char> = self.alphabet.chars().collect();
        let mut distinct = chars.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != chars.len() {
            return Err(Error::InvalidConfig("alphabet has repeated characters".into()));
        }
        Ok(())
    }
}

/// A generated corpus: word list in rank order, sentence streams, and the
/// per-tokenizer training materials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    /// Distinct words, most frequent first.
    pub words: Vec<String>,
    /// Ranks whose words are withheld from the drafter as whole strings.
    pub rich_ranks: Vec<usize>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// BPE training strings for the drafter: rich words appear only as
    /// their two halves, so no merge can span the boundary.
    pub drafter_material: Vec<String>,
    /// BPE training strings for the target: every word appears whole.
    pub target_material: Vec<String>,
}

fn sample_rank(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
        Ok(i) | Err(i) => i.min(cdf.len() - 1),
    }
}

/// Generate a deterministic synthetic corpus from a spec.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chars: Vec<char> = spec.alphabet.chars().collect();

    // Distinct word list; rejection-sample against duplicates.
    let mut words: Vec<String> = Vec::with_capacity(spec.num_words);
    let mut attempts = 0usize;
    while words.len() < spec.num_words {
        let len = rng.random_range(spec.word_len_min..=spec.word_len_max);
        let w: String = (0..len).map(|_| chars[rng.random_range(0..chars.len())]).collect();
        if words.contains(&w) {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidConfig(
                    "alphabet and word lengths cannot produce enough distinct words".into(),
                ));
            }
        } else {
            words.push(w);
        }
    }

    // Zipf CDF over ranks 1..=num_words.
    let weights: Vec<f64> =
        (1..=spec.num_words).map(|r| (r as f64).powf(-spec.zipf_exponent)).collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(spec.num_words);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }

    let sentence = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.random_range(spec.sentence_len_min..=spec.sentence_len_max);
        let picks: Vec<&str> =
            (0..n).map(|_| words[sample_rank(&cdf, rng)].as_str()).collect();
        picks.join(" ")
    };
    let train: Vec<String> = (0..spec.train_sentences).map(|_| sentence(&mut rng)).collect();
    let test: Vec<String> = (0..spec.test_sentences).map(|_| sentence(&mut rng)).collect();

    // Tokenizer materials: every word at least once so the alphabet is
    // covered, then frequency-weighted repeats so BPE merges frequent
    // words first. Space is its own string, so no merge crosses it.
    let rich_count = (spec.merge_richness * spec.num_words as f64).ceil() as usize;
    let rich_ranks: Vec<usize> = (0..rich_count.min(spec.num_words)).collect();
    let repeats_of = |rank: usize| -> usize {
        1 + (weights[rank] / weights[spec.num_words - 1]).round() as usize
    };
    let mut drafter_material = vec![" ".to_string()];
    let mut target_material = vec![" ".to_string()];
    for (rank, word) in words.iter().enumerate() {
        let reps = repeats_of(rank);
        for _ in 0..reps {
            target_material.push(word.clone());
            if rich_ranks.contains(&rank) {
                let mid = word.chars().count() / 2;
                let split: Vec<char> = word.chars().collect();
                drafter_material.push(split[..mid].iter().collect());
                drafter_material.push(split[mid..].iter().collect());
            } else {
                drafter_material.push(word.clone());
            }
        }
    }

    Ok(Corpus {
        spec: spec.clone(),
        words,
        rich_ranks,
        train,
        test,
        drafter_material,
        target_material,
    })
}

/// Occurrence counts of each word across a slice of sentences.
pub fn word_frequencies(sentences: &[String]) -> std::collections::BTreeMap<String, usize> {
    let mut counts = std::collections::BTreeMap::new();
    for s in sentences {
        for w in s.split(' ').filter(|w| !w.is_empty()) {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Tokenizer;

    #[test]
    fn fixed_seed_reproduces_the_corpus_exactly() {
        let spec = CorpusSpec::default();
        let a = gen_corpus(&spec).unwrap();
        let b = gen_corpus(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = gen_corpus(&CorpusSpec::default()).unwrap();
        let b = gen_corpus(&CorpusSpec { seed: 1, ..CorpusSpec::default() }).unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn zero_merge_richness_gives_identical_tokenizations() {
        let spec = CorpusSpec { merge_richness: 0.0, ..CorpusSpec::default() };
        let corpus = gen_corpus(&spec).unwrap();
        assert_eq!(corpus.drafter_material, corpus.target_material);
        let tok_q = Tokenizer::train_bpe(&corpus.drafter_material, 60).unwrap();
        let tok_p = Tokenizer::train_bpe(&corpus.target_material, 60).unwrap();
        for s in corpus.train.iter().chain(&corpus.test) {
            assert_eq!(tok_q.tokenize(s).unwrap(), tok_p.tokenize(s).unwrap());
        }
    }

    #[test]
    fn rich_words_are_split_by_the_drafter_but_whole_for_the_target() {
        let spec = CorpusSpec { merge_richness: 0.2, ..CorpusSpec::default() };
        let corpus = gen_corpus(&spec).unwrap();
        let tok_q = Tokenizer::train_bpe(&corpus.drafter_material, 200).unwrap();
        let tok_p = Tokenizer::train_bpe(&corpus.target_material, 400).unwrap();
        let mut split_somewhere = false;
        for &rank in &corpus.rich_ranks {
            let word = &corpus.words[rank];
            let p = tok_p.tokenize(word).unwrap();
            let q = tok_q.tokenize(word).unwrap();
            assert_eq!(p.len(), 1, "target owns frequent word {word:?}");
            if q.len() >= 2 {
                split_somewhere = true;
            }
        }
        assert!(split_somewhere, "at least one rich word is split by the drafter");
    }

    #[test]
    fn zipf_top_five_words_cover_forty_percent() {
        let spec = CorpusSpec {
            num_words: 50,
            zipf_exponent: 1.1,
            train_sentences: 500,
            ..CorpusSpec::default()
        };
        let corpus = gen_corpus(&spec).unwrap();
        let counts = word_frequencies(&corpus.train);
        let total: usize = counts.values().sum();
        let top5: usize = corpus.words[..5].iter().map(|w| counts.get(w).copied().unwrap_or(0)).sum();
        assert!(
            top5 as f64 / total as f64 >= 0.40,
            "top-5 share {}",
            top5 as f64 / total as f64
        );
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let bad = CorpusSpec { alphabet: String::new(), ..CorpusSpec::default() };
        assert!(matches!(gen_corpus(&bad), Err(Error::InvalidConfig(_))));
        let bad = CorpusSpec { word_len_min: 1, ..CorpusSpec::default() };
        assert!(matches!(gen_corpus(&bad), Err(Error::InvalidConfig(_))));
        let bad = CorpusSpec { num_words: 0, ..CorpusSpec::default() };
        assert!(matches!(gen_corpus(&bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn words_are_distinct_and_within_length_bounds() {
        let corpus = gen_corpus(&CorpusSpec::default()).unwrap();
        let mut sorted = corpus.words.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), corpus.words.len());
        for w in &corpus.words {
            let n = w.chars().count();
            assert!((3..=6).contains(&n));
        }
    }
}
