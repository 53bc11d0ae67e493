//! Config-driven experiment runner. Each experiment writes CSV artifacts
//! that are a pure function of the configuration and seed; wall-clock
//! figures go to a separate `.meta` file.

pub mod artifacts;
pub mod config;
pub mod experiments;

use rand::Rng as _;

pub use artifacts::{Artifacts, Meta, Table};
pub use config::{ExperimentConfig, Overrides};
pub use experiments::*;

use crate::corpus::{build_vocabulary, generate_corpus, split, Document, MarkovModel, Splits, VocabConfig, Vocabulary};
use crate::decoder::{decode, DecodeConfig, DecodeOutput};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Conditioning, ModelConfig, Parameters};
use crate::pool::par_map;
use crate::seed::{self, streams};
use crate::task::{Task, TrainExample};

/// Everything derived from the configuration and one seed before any
/// model exists: vocabulary, language model and glyph table.
#[derive(Debug, Clone)]
pub struct Setup {
    pub task: Task,
    pub markov: MarkovModel,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let vocab = build_vocabulary(&VocabConfig::default())?;
        let markov = MarkovModel::random(
            &vocab,
            cfg.corpus.generation.markov_sharpness,
            seed::derive(seed, streams::MARKOV, 0),
        )?;
        let task = Task::new(
            vocab,
            cfg.corpus.glyph_size,
            cfg.corpus.wrap,
            seed::derive(seed, streams::GLYPH, 0),
        )?;
        Ok(Self { task, markov })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.task.vocab
    }

    pub fn model_config(&self, cfg: &ExperimentConfig, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab().len(),
            visual_dim: self.task.visual_dim(),
            seed,
            ..cfg.model.arch
        }
    }

    /// Rejects a checkpoint that was trained for a different task.
    pub fn check_model(&self, params: &Parameters<f32>) -> Result<()> {
        let c = &params.config;
        if c.vocab_size != self.vocab().len() || c.visual_dim != self.task.visual_dim() {
            return Err(Error::Data(format!(
                "checkpoint expects vocabulary {} and visual width {}, task has {} and {}",
                c.vocab_size,
                c.visual_dim,
                self.vocab().len(),
                self.task.visual_dim()
            )));
        }
        Ok(())
    }

    pub fn corpus(&self, cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
        let docs = generate_corpus(&cfg.corpus.generation, self.vocab(), &self.markov, seed, 0)?;
        split(&docs, cfg.corpus.split, &mut seed::child_rng(seed, streams::SPLIT, 0))
    }

    /// Training pairs with targets EOS-filled to a multiple of `fill` and
    /// per-document glyph noise drawn from `[0, eps_max]`.
    pub fn examples(&self, docs: &[Document], eps_max: f64, seed: u64, fill: usize) -> Result<Vec<TrainExample>> {
        docs.iter()
            .map(|d| {
                self.task.example(
                    d,
                    doc_epsilon(seed, d.id, eps_max),
                    Task::noise_seed(seed, d.id),
                    fill,
                    1.0,
                )
            })
            .collect()
    }

    /// Model inputs at a fixed glyph noise level.
    pub fn conditions(&self, docs: &[Document], epsilon: f64, seed: u64) -> Result<Vec<Conditioning>> {
        docs.iter()
            .map(|d| self.task.condition(d.kind, &d.tokens, epsilon, Task::noise_seed(seed, d.id)))
            .collect()
    }
}

/// Glyph noise of document `id` when levels are drawn from `[0, eps_max]`.
pub fn doc_epsilon(seed: u64, id: u64, eps_max: f64) -> f64 {
    if eps_max == 0.0 {
        return 0.0;
    }
    eps_max * seed::child_rng(seed, streams::EPSILON, id).gen::<f64>()
}

/// Target padding granularity for a training attention mode.
pub fn fill_for(mode: AttentionMode, block_size: usize) -> usize {
    match mode {
        AttentionMode::Block(b) => b,
        AttentionMode::Causal => 1,
        AttentionMode::Full => block_size,
    }
}

/// Decodes every document on the worker pool; document `id` always draws
/// from stream `(seed, id)`, so results are independent of the pool size.
pub fn decode_all(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    docs: &[Document],
    conds: &[Conditioning],
    dcfg: &DecodeConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<DecodeOutput>> {
    dcfg.validate()?;
    let idx: Vec<usize> = (0..docs.len()).collect();
    par_map(&idx, workers, |&i| {
        decode(params, &conds[i], vocab, dcfg, &mut seed::child_rng(seed, streams::DECODE, docs[i].id))
    })
}

/// Tokens committed per denoising forward, pooled over all sessions. Every
/// finished block contributes `L'` commits.
pub fn block_tpf(outs: &[DecodeOutput]) -> f64 {
    let committed: usize = outs.iter().flat_map(|o| &o.stats.blocks).map(|b| b.committed).sum();
    let forwards: usize = outs.iter().map(|o| o.stats.forwards).sum();
    if forwards == 0 {
        0.0
    } else {
        committed as f64 / forwards as f64
    }
}

/// Emitted tokens per second, pooled.
pub fn pooled_tps(outs: &[DecodeOutput]) -> f64 {
    let tokens: usize = outs.iter().map(|o| o.stats.tokens).sum();
    let wall: f64 = outs.iter().map(|o| o.stats.wall_secs).sum();
    if wall > 0.0 {
        tokens as f64 / wall
    } else {
        0.0
    }
}

/// Length of the longest suffix of `seq` made of at least two consecutive
/// copies of one unit.
pub fn trailing_repetition<T: PartialEq>(seq: &[T]) -> usize {
    let n = seq.len();
    let mut best = 0;
    for p in 1..=n / 2 {
        let unit = &seq[n - p..];
        let mut m = 1;
        while (m + 1) * p <= n && &seq[n - (m + 1) * p..n - m * p] == unit {
            m += 1;
        }
        if m >= 2 {
            best = best.max(m * p);
        }
    }
    best
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, sd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repetition_examples() {
        assert_eq!(trailing_repetition(&[1, 2, 3]), 0);
        assert_eq!(trailing_repetition(&[1, 2, 3, 3]), 2);
        assert_eq!(trailing_repetition(&[9, 1, 2, 1, 2, 1, 2]), 6);
        assert_eq!(trailing_repetition(&[1, 2, 1, 2, 3]), 0);
        assert_eq!(trailing_repetition::<u32>(&[]), 0);
        assert_eq!(trailing_repetition(&[5, 5, 5, 5, 5]), 5);
    }

    #[test]
    fn doc_epsilon_in_range_and_stable() {
        for id in 0..100 {
            let e = doc_epsilon(3, id, 0.2);
            assert!((0.0..0.2).contains(&e));
            assert_eq!(e, doc_epsilon(3, id, 0.2));
        }
        assert_eq!(doc_epsilon(3, 1, 0.0), 0.0);
    }

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_sd(&[7.0]), (7.0, 0.0));
    }
}
