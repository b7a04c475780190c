//! Resolves a [`DataSpec`] into train and validation chunks.

use crate::corpus::{ingest_bytes, CorpusVocab, SyntheticSource, DEFAULT_HOLDOUT};
use crate::error::{Error, Result};
use crate::forward::{TokenSequence, Vocabulary};

use super::config::{DataSpec, TrainConfig};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    /// Character table for text corpora.
    pub symbols: Option<CorpusVocab>,
    /// Generating source for synthetic data.
    pub source: Option<SyntheticSource>,
    pub train: Vec<TokenSequence>,
    pub valid: Vec<TokenSequence>,
}

impl Dataset {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        match &cfg.data {
            DataSpec::Text { path, vocab_cap } => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let c = ingest_bytes(&bytes, *vocab_cap, cfg.chunk_len, DEFAULT_HOLDOUT)?;
                Ok(Self {
                    vocab: c.vocab.vocabulary(),
                    symbols: Some(c.vocab),
                    source: None,
                    train: c.train,
                    valid: c.valid,
                })
            }
            DataSpec::Synthetic {
                source,
                train_chunks,
                valid_chunks,
            } => {
                let src: SyntheticSource = source.parse()?;
                Ok(Self::synthetic(src, *train_chunks, *valid_chunks, cfg.chunk_len, cfg.data_seed))
            }
        }
    }

    /// Consecutive chunks of one generated stream; validation takes the tail.
    pub fn synthetic(source: SyntheticSource, train: usize, valid: usize, len: usize, seed: u64) -> Self {
        let mut chunks = source.chunks(train + valid, len, seed);
        let valid = chunks.split_off(train);
        Self {
            vocab: source.vocabulary(),
            symbols: None,
            source: Some(source),
            train: chunks,
            valid,
        }
    }

    pub fn chunk_len(&self) -> usize {
        self.train.first().or(self.valid.first()).map_or(0, |c| c.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_split_sizes() {
        let cfg = TrainConfig::parse("source = uniform:5\ntrain_chunks = 10\nvalid_chunks = 3\nchunk_len = 7\n").unwrap();
        let d = Dataset::load(&cfg).unwrap();
        assert_eq!((d.train.len(), d.valid.len(), d.chunk_len()), (10, 3, 7));
        assert_eq!(d.vocab.m(), 5);
        assert_eq!(Dataset::load(&cfg).unwrap().valid, d.valid);
    }

    #[test]
    fn missing_corpus_is_io_error() {
        let cfg = TrainConfig::parse("corpus = /nonexistent/text.txt\n").unwrap();
        assert!(matches!(Dataset::load(&cfg), Err(Error::Io { .. })));
    }
}
