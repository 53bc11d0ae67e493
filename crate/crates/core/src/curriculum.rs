//! Two-stage training: weighted ELBO stages, consistency-based hard-case
//! mining and the replay-mixed fine-tuning set.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::corpus::{DocKind, TokenId, Vocabulary};
use crate::decoder::{decode, DecodeConfig, SamplingConfig};
use crate::diffusion::{make_training_batch, NoiseConfig};
use crate::error::{Error, Result};
use crate::metrics::similarity;
use crate::model::{loss_and_grad, Adam, AdamConfig, AttentionMode, Conditioning, Parameters};
use crate::pool::par_map;
use crate::seed::{self, streams, Rng};
use crate::task::TrainExample;

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub noise: NoiseConfig,
    pub mode: AttentionMode,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            adam: AdamConfig::default(),
            noise: NoiseConfig::default(),
            mode: AttentionMode::Block(16),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub masked_acc: f64,
}

/// Consecutive steps above `DIVERGENCE_FACTOR ×` the first loss that abort
/// a stage.
pub const DIVERGENCE_PATIENCE: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Noise-block granularity for a training mask: per-block noise follows the
/// attention blocks; causal training draws a level per token and full
/// attention one level per sample.
fn noise_block(mode: AttentionMode, width: usize) -> usize {
    match mode {
        AttentionMode::Block(b) => b,
        AttentionMode::Causal => 1,
        AttentionMode::Full => width,
    }
}

/// Trains `params` in place for `cfg.epochs` passes over `data`. Batch
/// order and masks come from streams keyed by epoch and step, so the run is
/// a pure function of its inputs.
pub fn run_stage(
    params: &mut Parameters<f32>,
    vocab: &Vocabulary,
    data: &[TrainExample],
    cfg: &StageConfig,
    mut on_step: impl FnMut(&CurvePoint),
) -> Result<Vec<CurvePoint>> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = Adam::new(cfg.adam, params);
    let mut curve = Vec::new();
    let mut first_loss = None;
    let mut above = 0usize;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::child_rng(cfg.seed, streams::SHUFFLE, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let examples: Vec<&TrainExample> = chunk.iter().map(|&i| &data[i]).collect();
            let point = train_step(params, vocab, &mut opt, &examples, cfg, step)?;
            let initial = *first_loss.get_or_insert(point.loss);
            if point.loss > DIVERGENCE_FACTOR * initial {
                above += 1;
                if above >= DIVERGENCE_PATIENCE {
                    return Err(Error::Numeric(format!(
                        "training diverged: loss {:.4} above {DIVERGENCE_FACTOR}x the initial {initial:.4} for {above} steps (step {step})",
                        point.loss
                    )));
                }
            } else {
                above = 0;
            }
            on_step(&point);
            curve.push(point);
            step += 1;
        }
    }
    Ok(curve)
}

fn train_step(
    params: &mut Parameters<f32>,
    vocab: &Vocabulary,
    opt: &mut Adam,
    examples: &[&TrainExample],
    cfg: &StageConfig,
    step: usize,
) -> Result<CurvePoint> {
    let targets: Vec<&[TokenId]> = examples.iter().map(|e| e.target.as_slice()).collect();
    let weights: Vec<f64> = examples.iter().map(|e| e.weight).collect();
    let longest = targets.iter().map(|t| t.len()).max().unwrap_or(1);
    let block = noise_block(cfg.mode, longest);
    let width = longest.div_ceil(block) * block;
    let mut rng = seed::child_rng(cfg.seed, streams::TRAIN, step as u64);
    let batch = make_training_batch(&targets, Some(&weights), block, Some(width), &cfg.noise, vocab, &mut rng)?;
    let conds: Vec<_> = examples.iter().map(|e| e.cond.clone()).collect();
    let lg = loss_and_grad(params, &conds, &batch, cfg.mode)?;
    let grad_norm = opt.step(params, &lg.grads)?;
    Ok(CurvePoint {
        step,
        loss: lg.loss,
        grad_norm,
        masked_acc: lg.masked_accuracy(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    /// Stochastic passes per document.
    pub passes: usize,
    pub temperature: f64,
    /// Documents with consistency below this are hard.
    pub tau_c: f64,
    pub beta: f64,
    /// Replay size as a multiple of the hard-set size.
    pub alpha: f64,
    /// Decoder used for the passes; its sampling temperature is overridden.
    pub decode: DecodeConfig,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            passes: 4,
            temperature: 1.0,
            tau_c: 0.8,
            beta: 1.0,
            alpha: 1.0,
            decode: DecodeConfig::default(),
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes < 2 {
            return Err(Error::Config(format!("need at least 2 passes, got {}", self.passes)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("pass temperature must be positive".into()));
        }
        if !(self.tau_c > 0.0 && self.tau_c < 1.0) {
            return Err(Error::Config(format!("tau_c {} outside (0, 1)", self.tau_c)));
        }
        if !(self.beta >= 0.0 && self.alpha >= 0.0) {
            return Err(Error::Config("beta and alpha must be non-negative".into()));
        }
        self.decode.validate()
    }
}

/// `T` decodes of one document, pass `i` drawing from stream `(seed, i)`.
pub fn stochastic_passes(
    params: &Parameters<f32>,
    cond: &Conditioning,
    vocab: &Vocabulary,
    passes: usize,
    temperature: f64,
    decode_cfg: &DecodeConfig,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    if passes < 2 {
        return Err(Error::Config(format!("need at least 2 passes, got {passes}")));
    }
    let cfg = DecodeConfig {
        sampling: SamplingConfig { temperature, ..decode_cfg.sampling },
        ..*decode_cfg
    };
    (0..passes)
        .map(|i| {
            let mut rng = seed::child_rng(seed, streams::PASS, i as u64);
            Ok(decode(params, cond, vocab, &cfg, &mut rng)?.tokens)
        })
        .collect()
}

/// Mean pairwise similarity over all unordered pairs of outputs.
pub fn consistency_score(outputs: &[Vec<TokenId>], kind: DocKind, vocab: &Vocabulary) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::Domain(format!("consistency needs at least 2 outputs, got {}", outputs.len())));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            sum += similarity(kind, &outputs[i], &outputs[j], vocab);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// `1 + beta · (1 − c)`.
pub fn sample_weight(consistency: f64, beta: f64) -> f64 {
    1.0 + beta * (1.0 - consistency)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedSample {
    /// Index into the mined pool.
    pub index: usize,
    pub id: u64,
    pub kind: DocKind,
    pub consistency: f64,
    pub weight: f64,
    pub selected: bool,
}

/// Consistency of every pool document; those below `cfg.tau_c` are
/// selected. Pass streams are keyed by document id, so the result does not
/// depend on pool order or worker count.
pub fn mine_hard(
    params: &Parameters<f32>,
    pool: &[TrainExample],
    vocab: &Vocabulary,
    cfg: &MiningConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<MinedSample>> {
    if cfg.passes < 2 {
        return Err(Error::Config(format!("need at least 2 passes, got {}", cfg.passes)));
    }
    let indexed: Vec<(usize, &TrainExample)> = pool.iter().enumerate().collect();
    par_map(&indexed, workers, |&(index, ex)| {
        let outs = stochastic_passes(
            params,
            &ex.cond,
            vocab,
            cfg.passes,
            cfg.temperature,
            &cfg.decode,
            seed::derive(seed, streams::PASS, ex.id),
        )?;
        let c = consistency_score(&outs, ex.kind, vocab)?;
        Ok(MinedSample {
            index,
            id: ex.id,
            kind: ex.kind,
            consistency: c,
            weight: sample_weight(c, cfg.beta),
            selected: c < cfg.tau_c,
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftDataset {
    pub examples: Vec<TrainExample>,
    pub n_hard: usize,
    pub n_replay: usize,
    /// The base corpus was smaller than the replay request, so replay was
    /// drawn with replacement.
    pub with_replacement: bool,
}

/// Hard samples (ground-truth targets, weight `w`) plus
/// `round(alpha · |hard|)` uniformly drawn base samples at weight 1.
pub fn build_sft_dataset(
    mined: &[MinedSample],
    pool: &[TrainExample],
    base: &[TrainExample],
    alpha: f64,
    rng: &mut Rng,
) -> Result<SftDataset> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha {alpha} must be non-negative")));
    }
    let mut examples: Vec<TrainExample> = mined
        .iter()
        .filter(|m| m.selected)
        .map(|m| TrainExample { weight: m.weight, ..pool[m.index].clone() })
        .collect();
    let n_hard = examples.len();
    let n_replay = (alpha * n_hard as f64).round() as usize;
    if n_replay > 0 && base.is_empty() {
        return Err(Error::Data("replay requested from an empty base corpus".into()));
    }
    let with_replacement = n_replay > base.len();
    let picks: Vec<usize> = if with_replacement {
        (0..n_replay).map(|_| rng.gen_range(0..base.len())).collect()
    } else {
        index::sample(rng, base.len(), n_replay).into_vec()
    };
    examples.extend(picks.into_iter().map(|i| TrainExample { weight: 1.0, ..base[i].clone() }));
    Ok(SftDataset { examples, n_hard, n_replay, with_replacement })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, generate_corpus, CorpusConfig, MarkovModel, VocabConfig};
    use crate::model::{init_parameters, ModelConfig};
    use crate::task::Task;

    fn setup(n: usize) -> (Task, Vec<TrainExample>, Parameters<f32>) {
        let vocab = build_vocabulary(&VocabConfig::default()).unwrap();
        let markov = MarkovModel::random(&vocab, 1.5, 1).unwrap();
        let cfg = CorpusConfig { n_docs: n, ..Default::default() };
        let docs = generate_corpus(&cfg, &vocab, &markov, 2, 0).unwrap();
        let task = Task::new(vocab, 3, 16, 0).unwrap();
        let ex = docs.iter().map(|d| task.example(d, 0.0, 0, 16, 1.0).unwrap()).collect();
        let mc = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, visual_dim: 11, ..Default::default() };
        (task, ex, init_parameters(&mc).unwrap())
    }

    #[test]
    fn consistency_examples() {
        let v = build_vocabulary(&VocabConfig::default()).unwrap();
        let p = |s: &str| v.parse_tokens(s).unwrap();
        let same = vec![p("a b c"); 4];
        assert_eq!(consistency_score(&same, DocKind::Text, &v).unwrap(), 1.0);
        let two = vec![p("a b c"), p("a b d")];
        assert!((consistency_score(&two, DocKind::Text, &v).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let three = vec![p("a b c"), p("a"), p("c b")];
        let rev: Vec<_> = three.iter().rev().cloned().collect();
        assert_eq!(
            consistency_score(&three, DocKind::Text, &v).unwrap(),
            consistency_score(&rev, DocKind::Text, &v).unwrap()
        );
        assert!(matches!(consistency_score(&[], DocKind::Text, &v), Err(Error::Domain(_))));
        assert_eq!(sample_weight(0.25, 2.0), 2.5);
    }

    #[test]
    fn passes_count_and_greedy_limit() {
        let (task, ex, p) = setup(3);
        let cfg = DecodeConfig { block_size: 16, max_blocks: 2, ..Default::default() };
        let outs = stochastic_passes(&p, &ex[0].cond, &task.vocab, 4, 1.0, &cfg, 7).unwrap();
        assert_eq!(outs.len(), 4);
        let greedy = stochastic_passes(&p, &ex[0].cond, &task.vocab, 4, 0.0, &cfg, 7).unwrap();
        assert!(greedy.iter().all(|o| *o == greedy[0]));
        assert!(matches!(
            stochastic_passes(&p, &ex[0].cond, &task.vocab, 1, 1.0, &cfg, 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mining_thresholds_nest() {
        let (task, ex, p) = setup(6);
        let base = MiningConfig { decode: DecodeConfig { max_blocks: 2, ..Default::default() }, ..Default::default() };
        let at = |tau_c| {
            let cfg = MiningConfig { tau_c, ..base };
            mine_hard(&p, &ex, &task.vocab, &cfg, 3, 1).unwrap()
        };
        assert!(at(0.0).iter().all(|m| !m.selected));
        assert!(at(1.0 + 1e-9).iter().all(|m| m.selected));
        let (lo, hi) = (at(0.3), at(0.6));
        for (a, b) in lo.iter().zip(&hi) {
            assert!(!a.selected || b.selected);
            assert!(a.weight >= 1.0 && a.weight <= 1.0 + base.beta);
        }
        assert_eq!(mine_hard(&p, &ex, &task.vocab, &base, 3, 2).unwrap(), at(0.8));
    }

    #[test]
    fn sft_mixing_sizes() {
        let (_, ex, _) = setup(60);
        let mined: Vec<MinedSample> = ex
            .iter()
            .enumerate()
            .map(|(i, e)| MinedSample {
                index: i,
                id: e.id,
                kind: e.kind,
                consistency: 0.5,
                weight: 1.5,
                selected: i < 50,
            })
            .collect();
        let mut rng = seed::rng(0);
        let d = build_sft_dataset(&mined, &ex, &ex, 1.0, &mut rng).unwrap();
        assert_eq!((d.examples.len(), d.n_hard, d.n_replay, d.with_replacement), (100, 50, 50, false));
        let d = build_sft_dataset(&mined, &ex, &ex[..30], 1.0, &mut rng).unwrap();
        assert_eq!((d.examples.len(), d.with_replacement), (100, true));
        let d = build_sft_dataset(&mined, &ex, &ex, 0.0, &mut rng).unwrap();
        assert_eq!(d.examples.len(), 50);
        assert!(d.examples.iter().all(|e| e.weight == 1.5));
        let d = build_sft_dataset(&mined, &ex, &ex, 0.5, &mut rng).unwrap();
        assert!(!d.with_replacement);
        assert!(d.examples[50..].iter().all(|e| e.weight == 1.0));
    }

    #[test]
    fn unit_weights_reproduce_unweighted_training() {
        let (task, ex, p0) = setup(8);
        let cfg = StageConfig { epochs: 1, batch_size: 4, mode: AttentionMode::Block(16), ..Default::default() };
        let mut a = p0.clone();
        let ca = run_stage(&mut a, &task.vocab, &ex, &cfg, |_| {}).unwrap();
        let mut b = p0.clone();
        let cb = run_stage(&mut b, &task.vocab, &ex, &cfg, |_| {}).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ca, cb);
        assert_eq!(ca.len(), 2);
        assert!(run_stage(&mut b, &task.vocab, &[], &cfg, |_| {}).is_err());
    }
}
