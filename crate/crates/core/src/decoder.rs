//! Block-wise iterative decoding.
//!
//! Each block starts as `L'` MASKs. Every forward samples a candidate at
//! each still-masked position and the scheduler decides which candidates
//! become final. A block that has no masks left is written into the KV
//! cache by the first forward of the next block, so `F` counts denoising
//! forwards only. Decoding stops after the block holding the first EOS.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;

use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::tensor::Real;
use crate::model::{AttentionMode, Conditioning, KvCache, Parameters};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheduler {
    /// Commit every candidate with confidence `>= tau`; if none qualifies,
    /// commit the single most confident one.
    Dynamic { tau: f64 },
    /// Finish each block in exactly `steps` forwards.
    Static { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// `0` means greedy.
    pub temperature: f64,
    /// `0` disables top-k filtering.
    pub top_k: usize,
    pub top_p: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub scheduler: Scheduler,
    pub sampling: SamplingConfig,
    pub block_size: usize,
    pub max_blocks: usize,
    pub seed: u64,
}

pub const DEFAULT_TAU: f64 = 0.95;

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            scheduler: Scheduler::Dynamic { tau: DEFAULT_TAU },
            sampling: SamplingConfig::default(),
            block_size: 16,
            max_blocks: 8,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.max_blocks == 0 {
            return Err(Error::Config("block size and max blocks must be positive".into()));
        }
        match self.scheduler {
            Scheduler::Dynamic { tau } if !(tau > 0.0 && tau <= 1.0) => {
                return Err(Error::Config(format!("threshold {tau} outside (0, 1]")))
            }
            Scheduler::Static { steps } if steps == 0 || steps > self.block_size => {
                return Err(Error::Config(format!(
                    "static steps {steps} outside [1, {}]",
                    self.block_size
                )))
            }
            _ => {}
        }
        let s = self.sampling;
        if !(s.temperature >= 0.0 && s.temperature.is_finite()) {
            return Err(Error::Config("temperature must be finite and non-negative".into()));
        }
        if !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", s.top_p)));
        }
        Ok(())
    }
}

/// Positions to commit, ascending. `candidates` holds `(position,
/// confidence)` for every still-masked position; `remaining_steps` is
/// `S - s + 1` at static step `s`.
pub fn select_commits(
    candidates: &[(usize, f64)],
    scheduler: Scheduler,
    remaining_steps: Option<usize>,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Contract("no masked positions to commit".into()));
    }
    // Most confident first; ties go to the lower position.
    let ranked = || {
        let mut r = candidates.to_vec();
        r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        r
    };
    let mut out: Vec<usize> = match scheduler {
        Scheduler::Dynamic { tau } => {
            let pass: Vec<usize> = candidates.iter().filter(|c| c.1 >= tau).map(|c| c.0).collect();
            if pass.is_empty() {
                vec![ranked()[0].0]
            } else {
                pass
            }
        }
        Scheduler::Static { .. } => {
            let q = remaining_steps
                .filter(|&q| q > 0)
                .ok_or_else(|| Error::Contract("static scheduling needs remaining steps".into()))?;
            let quota = candidates.len().div_ceil(q);
            ranked().into_iter().take(quota).map(|c| c.0).collect()
        }
    };
    out.sort_unstable();
    Ok(out)
}

/// Commit sizes of a static schedule over a block of `block` masks.
pub fn static_commit_sizes(block: usize, steps: usize) -> Vec<usize> {
    let mut r = block;
    (0..steps)
        .map(|s| {
            let n = r.div_ceil(steps - s);
            r -= n;
            n
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockStats {
    pub forwards: usize,
    /// Positions committed in the block (always the block size once full).
    pub committed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeStats {
    /// Emitted tokens, up to and including the first EOS.
    pub tokens: usize,
    pub forwards: usize,
    pub wall_secs: f64,
    pub blocks: Vec<BlockStats>,
    /// Max blocks reached without an EOS.
    pub truncated: bool,
}

impl DecodeStats {
    pub fn tpf(&self) -> f64 {
        if self.forwards == 0 {
            0.0
        } else {
            self.tokens as f64 / self.forwards as f64
        }
    }

    pub fn tps(&self) -> f64 {
        if self.wall_secs > 0.0 {
            self.tokens as f64 / self.wall_secs
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Commit {
    /// Absolute text position.
    pub pos: usize,
    pub token: TokenId,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub block: usize,
    /// Index of the forward within the session.
    pub forward: usize,
    pub commits: Vec<Commit>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeTrace {
    pub block_size: usize,
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    /// Rebuilds the output from the commits alone. Fails if any position is
    /// committed twice or left uncommitted inside a decoded block.
    pub fn replay(&self, eos: TokenId) -> Result<Vec<TokenId>> {
        let n_blocks = self.steps.iter().map(|s| s.block + 1).max().unwrap_or(0);
        let mut canvas: Vec<Option<TokenId>> = vec![None; n_blocks * self.block_size];
        for step in &self.steps {
            for c in &step.commits {
                let slot = canvas
                    .get_mut(c.pos)
                    .ok_or_else(|| Error::Contract(format!("commit outside canvas at {}", c.pos)))?;
                if slot.replace(c.token).is_some() {
                    return Err(Error::Contract(format!("position {} committed twice", c.pos)));
                }
            }
        }
        let mut out = Vec::with_capacity(canvas.len());
        for (i, t) in canvas.into_iter().enumerate() {
            let t = t.ok_or_else(|| Error::Contract(format!("position {i} never committed")))?;
            out.push(t);
            if t == eos {
                break;
            }
        }
        Ok(out)
    }

    /// One line per step: `block:step → pos=token@conf,...`.
    pub fn dump(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        let mut last_block = usize::MAX;
        let mut k = 0;
        for step in &self.steps {
            if step.block != last_block {
                last_block = step.block;
                k = 0;
            }
            let items: Vec<String> = step
                .commits
                .iter()
                .map(|c| format!("{}={}@{:.3}", c.pos, vocab.token(c.token), c.confidence))
                .collect();
            let _ = writeln!(s, "{}:{} → {}", step.block, k, items.join(","));
            k += 1;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Emitted tokens, ending with EOS unless truncated.
    pub tokens: Vec<TokenId>,
    pub stats: DecodeStats,
    pub trace: DecodeTrace,
}

/// Draws a candidate from a logit row and returns it with its confidence,
/// the probability under the untempered softmax. Only `allowed` tokens
/// compete.
pub fn sample_candidate<F: Real>(
    logits: &[F],
    allowed: &[bool],
    sampling: &SamplingConfig,
    rng: &mut Rng,
) -> (TokenId, f64) {
    let ids: Vec<usize> = (0..logits.len()).filter(|&j| allowed[j]).collect();
    let raw: Vec<f64> = ids.iter().map(|&j| logits[j].f64()).collect();
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = raw.iter().map(|v| (v - max).exp()).sum();
    let prob = |i: usize| (raw[i] - max).exp() / z;
    // Greedy: highest logit, lowest id on ties.
    let argmax = (0..ids.len()).fold(0, |b, i| if raw[i] > raw[b] { i } else { b });
    if sampling.temperature == 0.0 {
        return (ids[argmax] as TokenId, prob(argmax));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
    let t = sampling.temperature;
    let tmax = raw[order[0]] / t;
    let mut w: Vec<f64> = order.iter().map(|&i| (raw[i] / t - tmax).exp()).collect();
    if sampling.top_k > 0 && sampling.top_k < w.len() {
        w.truncate(sampling.top_k);
    }
    if sampling.top_p < 1.0 {
        let total: f64 = w.iter().sum();
        let mut acc = 0.0;
        let mut keep = w.len();
        for (n, v) in w.iter().enumerate() {
            acc += v / total;
            if acc >= sampling.top_p {
                keep = n + 1;
                break;
            }
        }
        w.truncate(keep);
    }
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut pick = w.len() - 1;
    for (n, v) in w.iter().enumerate() {
        if u < *v {
            pick = n;
            break;
        }
        u -= v;
    }
    let i = order[pick];
    (ids[i] as TokenId, prob(i))
}

/// Block-wise decoding of one document.
pub fn decode<F: Real>(
    params: &Parameters<F>,
    cond: &Conditioning,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
    rng: &mut Rng,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    let l = cfg.block_size;
    if cfg.max_blocks * l > params.config.max_text_len {
        return Err(Error::Config(format!(
            "{} blocks of {l} exceed the model's text length {}",
            cfg.max_blocks, params.config.max_text_len
        )));
    }
    let start = Instant::now();
    let allowed = vocab.emittable();
    let mode = AttentionMode::Block(l);
    let mut cache = KvCache::prefill(params, cond)?;
    let mut out = Vec::new();
    let mut stats = DecodeStats::default();
    let mut trace = DecodeTrace {
        block_size: l,
        steps: Vec::new(),
    };
    let mut pending: Vec<TokenId> = Vec::new();
    let mut eos_at = None;
    for b in 0..cfg.max_blocks {
        let mut block = vec![vocab.mask; l];
        let mut masked = vec![true; l];
        let mut bs = BlockStats::default();
        let mut step = 0;
        while masked.iter().any(|&m| m) {
            let mut window = std::mem::take(&mut pending);
            let offset = window.len();
            window.extend_from_slice(&block);
            let logits = cache.extend(params, &window, offset, mode)?;
            let nv = params.config.vocab_size;
            let mut cands = Vec::new();
            let mut drawn = Vec::new();
            for i in (0..l).filter(|&i| masked[i]) {
                let row = &logits[(offset + i) * nv..(offset + i + 1) * nv];
                let (tok, conf) = sample_candidate(row, &allowed, &cfg.sampling, rng);
                cands.push((i, conf));
                drawn.push((i, tok, conf));
            }
            let remaining = match cfg.scheduler {
                Scheduler::Static { steps } => Some(steps.saturating_sub(step).max(1)),
                Scheduler::Dynamic { .. } => None,
            };
            let chosen = select_commits(&cands, cfg.scheduler, remaining)?;
            let mut commits = Vec::with_capacity(chosen.len());
            for (i, tok, conf) in drawn {
                if chosen.binary_search(&i).is_ok() {
                    block[i] = tok;
                    masked[i] = false;
                    commits.push(Commit {
                        pos: b * l + i,
                        token: tok,
                        confidence: conf,
                    });
                }
            }
            bs.committed += commits.len();
            trace.steps.push(TraceStep {
                block: b,
                forward: stats.forwards,
                commits,
            });
            stats.forwards += 1;
            bs.forwards += 1;
            step += 1;
        }
        stats.blocks.push(bs);
        match block.iter().position(|&t| t == vocab.eos) {
            Some(i) => {
                out.extend_from_slice(&block[..=i]);
                eos_at = Some(b * l + i);
                break;
            }
            None => out.extend_from_slice(&block),
        }
        pending = block;
    }
    stats.truncated = eos_at.is_none();
    stats.tokens = out.len();
    stats.wall_secs = start.elapsed().as_secs_f64();
    Ok(DecodeOutput {
        tokens: out,
        stats,
        trace,
    })
}

/// Left-to-right decoding: block size 1, so one token per forward.
pub fn ar_decode<F: Real>(
    params: &Parameters<F>,
    cond: &Conditioning,
    vocab: &Vocabulary,
    sampling: &SamplingConfig,
    max_len: usize,
    rng: &mut Rng,
) -> Result<DecodeOutput> {
    let cfg = DecodeConfig {
        scheduler: Scheduler::Dynamic { tau: 1.0 },
        sampling: *sampling,
        block_size: 1,
        max_blocks: max_len,
        seed: 0,
    };
    decode(params, cond, vocab, &cfg, rng)
}

/// Fixed-length decoding over a single fully bidirectional canvas of
/// `preset` positions, with no early stop. Returns the whole canvas.
pub fn decode_fixed_length<F: Real>(
    params: &Parameters<F>,
    cond: &Conditioning,
    vocab: &Vocabulary,
    preset: usize,
    scheduler: Scheduler,
    sampling: &SamplingConfig,
    rng: &mut Rng,
) -> Result<DecodeOutput> {
    let cfg = DecodeConfig {
        scheduler,
        sampling: *sampling,
        block_size: preset,
        max_blocks: 1,
        seed: 0,
    };
    cfg.validate()?;
    let start = Instant::now();
    let allowed = vocab.emittable();
    let nv = params.config.vocab_size;
    let mut cache = KvCache::prefill(params, cond)?;
    let mut canvas = vec![vocab.mask; preset];
    let mut masked = vec![true; preset];
    let mut stats = DecodeStats::default();
    let mut trace = DecodeTrace {
        block_size: preset,
        steps: Vec::new(),
    };
    while masked.iter().any(|&m| m) {
        let logits = cache.extend(params, &canvas, 0, AttentionMode::Full)?;
        let mut cands = Vec::new();
        let mut drawn = Vec::new();
        for i in (0..preset).filter(|&i| masked[i]) {
            let (tok, conf) = sample_candidate(&logits[i * nv..(i + 1) * nv], &allowed, sampling, rng);
            cands.push((i, conf));
            drawn.push((i, tok, conf));
        }
        let remaining = match scheduler {
            Scheduler::Static { steps } => Some(steps.saturating_sub(stats.forwards).max(1)),
            Scheduler::Dynamic { .. } => None,
        };
        let chosen = select_commits(&cands, scheduler, remaining)?;
        let mut commits = Vec::new();
        for (i, tok, conf) in drawn {
            if chosen.binary_search(&i).is_ok() {
                canvas[i] = tok;
                masked[i] = false;
                commits.push(Commit { pos: i, token: tok, confidence: conf });
            }
        }
        trace.steps.push(TraceStep { block: 0, forward: stats.forwards, commits });
        stats.forwards += 1;
    }
    stats.blocks.push(BlockStats { forwards: stats.forwards, committed: preset });
    stats.truncated = !canvas.contains(&vocab.eos);
    stats.tokens = preset;
    stats.wall_secs = start.elapsed().as_secs_f64();
    Ok(DecodeOutput { tokens: canvas, stats, trace })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsSummary {
    pub runs: usize,
    pub tokens: usize,
    pub forwards: usize,
    pub wall_secs: f64,
    /// Pooled `ΣN / ΣF`.
    pub tpf: f64,
    /// Pooled `ΣN / Σtime`.
    pub tps: f64,
    pub truncated: usize,
}

pub fn summarize_stats(stats: &[DecodeStats]) -> Result<StatsSummary> {
    if stats.is_empty() {
        return Err(Error::Domain("no decode statistics to summarize".into()));
    }
    let tokens: usize = stats.iter().map(|s| s.tokens).sum();
    let forwards: usize = stats.iter().map(|s| s.forwards).sum();
    let wall: f64 = stats.iter().map(|s| s.wall_secs).sum();
    Ok(StatsSummary {
        runs: stats.len(),
        tokens,
        forwards,
        wall_secs: wall,
        tpf: if forwards == 0 { 0.0 } else { tokens as f64 / forwards as f64 },
        tps: if wall > 0.0 { tokens as f64 / wall } else { 0.0 },
        truncated: stats.iter().filter(|s| s.truncated).count(),
    })
}

/// Throughput ratio of a run against a baseline.
pub fn speedup(run_tps: f64, baseline_tps: f64) -> f64 {
    run_tps / baseline_tps
}
