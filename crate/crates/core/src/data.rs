//! Byte-level tokenization, calibration sampling and synthetic corpora.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Symbols emitted by the Markov generators.
pub const ALPHABET: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz .,;!?";

/// Identity byte tokenizer: token id = byte value.
pub fn tokenize_bytes(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| u8::try_from(id).map_err(|_| Error::Input(format!("token {id} is not a byte"))))
        .collect()
}

/// Named synthetic text generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// Fixed random order-k Markov chain over [`ALPHABET`].
    Markov { order: usize },
    /// `key -> value` lines drawn from a fixed random dictionary.
    RepeatedTemplate,
}

impl Generator {
    pub fn parse(name: &str) -> Result<Self> {
        if name == "repeated_template" {
            return Ok(Generator::RepeatedTemplate);
        }
        if let Some(k) = name.strip_prefix("markov_") {
            if let Ok(order) = k.parse::<usize>() {
                if (1..=3).contains(&order) {
                    return Ok(Generator::Markov { order });
                }
            }
        }
        Err(Error::Config(format!(
            "unknown generator `{name}` (expected markov_1..markov_3 or repeated_template)"
        )))
    }

    pub fn name(&self) -> String {
        match self {
            Generator::Markov { order } => format!("markov_{order}"),
            Generator::RepeatedTemplate => "repeated_template".into(),
        }
    }
}

/// Order-k Markov chain over `n` symbols. Contexts are the last `k` symbols
/// packed base-`n`, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    order: usize,
    symbols: usize,
    transitions: Vec<Vec<f64>>,
}

/// Successors per context of a random chain.
const BRANCHING: usize = 4;

impl MarkovChain {
    /// Each context gets [`BRANCHING`] random successors with random weights.
    pub fn random(order: usize, seed: u64) -> Self {
        let symbols = ALPHABET.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let contexts = symbols.pow(order as u32);
        let transitions = (0..contexts)
            .map(|_| {
                let mut row = vec![0.0; symbols];
                for _ in 0..BRANCHING {
                    let s = rng.random_range(0..symbols);
                    row[s] += rng.random_range(0.2..1.0);
                }
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
                row
            })
            .collect();
        Self {
            order,
            symbols,
            transitions,
        }
    }

    pub fn from_transitions(order: usize, symbols: usize, transitions: Vec<Vec<f64>>) -> Result<Self> {
        if order == 0 || symbols == 0 || transitions.len() != symbols.pow(order as u32) {
            return Err(Error::Input("transition table does not match order and alphabet".into()));
        }
        for row in &transitions {
            let total: f64 = row.iter().sum();
            if row.len() != symbols || row.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Input("transition rows must be probability vectors".into()));
            }
        }
        Ok(Self {
            order,
            symbols,
            transitions,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn contexts(&self) -> usize {
        self.transitions.len()
    }

    fn next_context(&self, ctx: usize, sym: usize) -> usize {
        (ctx * self.symbols + sym) % self.contexts()
    }

    /// Draws `len` symbol indices.
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut ctx = rng.random_range(0..self.contexts());
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let row = &self.transitions[ctx];
            let mut u: f64 = rng.random();
            let mut sym = self.symbols - 1;
            for (s, &p) in row.iter().enumerate() {
                if u < p {
                    sym = s;
                    break;
                }
                u -= p;
            }
            // Skip zero-probability tail picks caused by rounding.
            if row[sym] == 0.0 {
                sym = row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
            }
            out.push(sym);
            ctx = self.next_context(ctx, sym);
        }
        out
    }

    /// Stationary distribution over contexts, by power iteration on the
    /// lazy chain `(I + P)/2` (same fixed point, no periodicity).
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.contexts();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..100_000 {
            let mut next = vec![0.0; n];
            for (ctx, row) in self.transitions.iter().enumerate() {
                next[ctx] += 0.5 * pi[ctx];
                for (sym, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        next[self.next_context(ctx, sym)] += 0.5 * pi[ctx] * p;
                    }
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats per symbol.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        self.transitions
            .iter()
            .zip(&pi)
            .map(|(row, w)| {
                let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
                w * h
            })
            .sum()
    }
}

const KEYS: usize = 24;

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(3..7);
    (0..len).map(|_| ALPHABET[rng.random_range(0..26)] as char).collect()
}

/// Generates `size` bytes of synthetic text.
pub fn synthetic_corpus(generator: Generator, size: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match generator {
        Generator::Markov { order } => {
            let chain = MarkovChain::random(order, seed);
            chain
                .sample(size, &mut rng)
                .into_iter()
                .map(|s| ALPHABET[s] as char)
                .collect()
        }
        Generator::RepeatedTemplate => {
            let dict: Vec<(String, String)> = (0..KEYS)
                .map(|_| (random_word(&mut rng), random_word(&mut rng)))
                .collect();
            let mut out = String::with_capacity(size + 32);
            while out.len() < size {
                let (k, v) = &dict[rng.random_range(0..KEYS)];
                out.push_str(&format!("{k} -> {v}\n"));
            }
            out.truncate(size);
            out
        }
    }
}

/// Where calibration or training text comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    TextFile(PathBuf),
    Synthetic {
        generator: Generator,
        size: usize,
        seed: u64,
    },
}

impl CorpusSource {
    pub fn load(&self) -> Result<Vec<u32>> {
        match self {
            CorpusSource::TextFile(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                Ok(tokenize_bytes(&bytes))
            }
            CorpusSource::Synthetic {
                generator,
                size,
                seed,
            } => {
                if *size == 0 {
                    return Err(Error::Config("synthetic corpus size must be ≥ 1".into()));
                }
                Ok(tokenize_bytes(synthetic_corpus(*generator, *size, *seed).as_bytes()))
            }
        }
    }
}

/// Splits a token stream into a leading training part and a trailing
/// held-out part of `eval_fraction` of its length.
pub fn split_train_eval(tokens: &[u32], eval_fraction: f64) -> (&[u32], &[u32]) {
    let eval = ((tokens.len() as f64) * eval_fraction).round() as usize;
    tokens.split_at(tokens.len() - eval.min(tokens.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSpec {
    pub source: CorpusSource,
    pub num_sequences: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl CalibrationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.seq_len < 2 || self.batch_size == 0 {
            return Err(Error::Config(
                "calibration needs num_sequences ≥ 1, seq_len ≥ 2 and batch_size ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Equal-length token sequences plus where each one came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<Vec<u32>>,
    /// Start offset of each sequence in its source stream.
    pub offsets: Vec<usize>,
}

/// Uniform random window offsets in `0..=len - seq_len`.
pub fn sample_offsets(len: usize, seq_len: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if len < seq_len || seq_len == 0 {
        return Err(Error::Input(format!(
            "source of {len} tokens is shorter than the window length {seq_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| rng.random_range(0..=len - seq_len)).collect())
}

/// Draws `num_sequences` random windows from `tokens`, grouped into batches.
pub fn sample_windows(
    tokens: &[u32],
    num_sequences: usize,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TokenBatch>> {
    let offsets = sample_offsets(tokens.len(), seq_len, num_sequences, seed)?;
    Ok(offsets
        .chunks(batch_size.max(1))
        .map(|chunk| TokenBatch {
            tokens: chunk.iter().map(|&o| tokens[o..o + seq_len].to_vec()).collect(),
            offsets: chunk.to_vec(),
        })
        .collect())
}

pub fn sample_calibration(spec: &CalibrationSpec) -> Result<Vec<TokenBatch>> {
    spec.validate()?;
    let tokens = spec.source.load()?;
    sample_windows(&tokens, spec.num_sequences, spec.seq_len, spec.batch_size, spec.seed)
}

/// Non-overlapping consecutive windows of `seq_len` tokens; the tail is dropped.
pub fn chunk_sequences(tokens: &[u32], seq_len: usize) -> Vec<Vec<u32>> {
    tokens.chunks_exact(seq_len.max(1)).map(<[u32]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_tokenizer() {
        assert_eq!(tokenize_bytes(b"AB"), vec![65, 66]);
        assert!(tokenize_bytes(b"").is_empty());
        assert!(detokenize(&[300]).is_err());
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            prop_assert_eq!(detokenize(&tokenize_bytes(&bytes)).unwrap(), bytes);
        }
    }

    #[test]
    fn generator_names() {
        assert_eq!(Generator::parse("markov_2").unwrap(), Generator::Markov { order: 2 });
        assert_eq!(Generator::parse("repeated_template").unwrap().name(), "repeated_template");
        assert!(Generator::parse("markov_9").is_err());
        assert!(Generator::parse("c4").is_err());
    }

    #[test]
    fn corpora_are_seed_deterministic_and_in_vocabulary() {
        for g in [Generator::Markov { order: 2 }, Generator::RepeatedTemplate] {
            let a = synthetic_corpus(g, 2000, 5);
            assert_eq!(a.len(), 2000);
            assert_eq!(a, synthetic_corpus(g, 2000, 5));
            assert_ne!(a, synthetic_corpus(g, 2000, 6));
            assert!(tokenize_bytes(a.as_bytes()).iter().all(|&t| t < 256));
        }
    }

    #[test]
    fn deterministic_chain_is_periodic_with_zero_entropy() {
        // Symbol s always goes to s + 1 (mod 4).
        let transitions = (0..4)
            .map(|s| {
                let mut row = vec![0.0; 4];
                row[(s + 1) % 4] = 1.0;
                row
            })
            .collect();
        let chain = MarkovChain::from_transitions(1, 4, transitions).unwrap();
        assert_eq!(chain.entropy_rate(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = chain.sample(20, &mut rng);
        for w in s.windows(2) {
            assert_eq!(w[1], (w[0] + 1) % 4);
        }
        for p in chain.stationary() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_rate_of_two_state_chain() {
        // Closed form: stationary (b, a)/(a+b); rate = π0·H(a) + π1·H(b).
        let (a, b): (f64, f64) = (0.3, 0.1);
        let h = |p: f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        let chain = MarkovChain::from_transitions(1, 2, vec![vec![1.0 - a, a], vec![b, 1.0 - b]]).unwrap();
        let want = (b * h(a) + a * h(b)) / (a + b);
        assert!((chain.entropy_rate() - want).abs() < 1e-12);
    }

    #[test]
    fn empirical_entropy_matches_rate() {
        let chain = MarkovChain::random(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = chain.sample(200_000, &mut rng);
        let mut nll = 0.0;
        for w in seq.windows(2) {
            nll -= chain.transitions[w[0]][w[1]].ln();
        }
        let empirical = nll / (seq.len() - 1) as f64;
        assert!((empirical - chain.entropy_rate()).abs() < 0.02);
    }

    #[test]
    fn window_sampling() {
        let tokens: Vec<u32> = (0..100).collect();
        let a = sample_windows(&tokens, 10, 8, 4, 7).unwrap();
        assert_eq!(a, sample_windows(&tokens, 10, 8, 4, 7).unwrap());
        assert_eq!(a.len(), 3);
        assert_eq!(a[2].tokens.len(), 2);
        for b in &a {
            for (seq, &o) in b.tokens.iter().zip(&b.offsets) {
                assert_eq!(seq[0], o as u32);
                assert_eq!(seq.len(), 8);
            }
        }
        let exact = sample_windows(&tokens[..8], 5, 8, 5, 1).unwrap();
        assert!(exact[0].offsets.iter().all(|&o| o == 0));
        assert!(matches!(sample_windows(&tokens[..7], 1, 8, 1, 1), Err(Error::Input(_))));
    }

    #[test]
    fn offsets_are_uniform() {
        let positions = 50;
        let draws = 10_000;
        let offsets = sample_offsets(positions + 15, 16, draws, 123).unwrap();
        let mut counts = vec![0usize; positions];
        for o in offsets {
            counts[o] += 1;
        }
        let expected = draws as f64 / positions as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of χ² with 49 degrees of freedom.
        assert!(chi2 < 85.35, "chi2 = {chi2}");
    }

    #[test]
    fn split_and_chunk() {
        let tokens: Vec<u32> = (0..100).collect();
        let (train, eval) = split_train_eval(&tokens, 0.1);
        assert_eq!((train.len(), eval.len()), (90, 10));
        let chunks = chunk_sequences(&tokens, 30);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[1][0], 30);
    }
}
