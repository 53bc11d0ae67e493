//! Experiment configuration: a flat `key = value` file with `[corpus]`,
//! `[model]`, `[decode]` and `[curriculum]` sections plus top-level `name`,
//! `seed`, `out` and `workers`. Unknown sections and keys are rejected so a
//! typo never silently falls back to a default.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::{Ini, ParseOption, Properties};

use crate::corpus::{CorpusConfig, DocShape, SizeRange};
use crate::curriculum::{MiningConfig, StageConfig};
use crate::decoder::{DecodeConfig, SamplingConfig, Scheduler, DEFAULT_TAU};
use crate::diffusion::{NoiseConfig, NoiseMode};
use crate::error::{Error, Result};
use crate::model::{AdamConfig, AttentionMode, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSettings {
    pub generation: CorpusConfig,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub glyph_size: usize,
    pub wrap: usize,
    /// Glyph noise applied when decoding evaluation documents.
    pub epsilon: f64,
    /// Upper end of the per-document noise drawn for training documents.
    pub train_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    /// Vocabulary size and visual width are filled in from the task.
    pub arch: ModelConfig,
    pub attention: AttentionMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub noise: NoiseConfig,
}

impl ModelSettings {
    pub fn stage(&self, seed: u64) -> StageConfig {
        StageConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam,
            noise: self.noise,
            mode: self.attention,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSettings {
    pub decode: DecodeConfig,
    pub taus: Vec<f64>,
    /// Glyph noise of the threshold sweep; the corpus `epsilon` when unset.
    pub sweep_epsilon: Option<f64>,
    pub static_steps: Vec<usize>,
    pub compare_tau: f64,
    pub compare_block_size: usize,
    /// Preset canvas lengths as multiples of the target length.
    pub presets: Vec<f64>,
    pub ablation_docs: usize,
    /// Longest table (EOS included) admitted to the attention ablation.
    pub ablation_max_len: usize,
    /// Cap on decoded documents per experiment; `0` decodes the whole split.
    pub eval_docs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSettings {
    pub mining: MiningConfig,
    /// Per-document glyph noise of the mining pool and the hard split is
    /// drawn from `[0, eps_max]`.
    pub eps_max: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    /// Independent seeds for the multi-seed studies.
    pub seeds: usize,
    pub shuffle_levels: Vec<f64>,
    /// Fixed glyph noise for the shuffle study; calibrated when unset.
    pub shuffle_epsilon: Option<f64>,
    pub calibration_grid: Vec<f64>,
    pub calibration_range: [f64; 2],
    pub shuffle_tau: f64,
    pub shuffle_temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub corpus: CorpusSettings,
    pub model: ModelSettings,
    pub decode: DecodeSettings,
    pub curriculum: CurriculumSettings,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

const SECTIONS: [&str; 4] = ["corpus", "model", "decode", "curriculum"];

impl ExperimentConfig {
    /// All defaults under an explicit seed.
    pub fn with_seed(seed: u64) -> Self {
        Self::from_ini_str(&format!("seed = {seed}"), &Overrides::default()).expect("defaults are valid")
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_ini_str(text: &str, overrides: &Overrides) -> Result<Self> {
        let opt = ParseOption {
            enabled_quote: false,
            enabled_escape: false,
            ..Default::default()
        };
        let ini = Ini::load_from_str_opt(text, opt).map_err(|e| Error::Config(e.to_string()))?;
        for (name, _) in ini.iter() {
            if let Some(name) = name {
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!("unknown section [{name}]")));
                }
            }
        }

        let mut top = Reader::new("top level", ini.section(None::<String>));
        let name = top.get("name", "experiment".to_string())?;
        let seed = match (overrides.seed, top.opt::<u64>("seed")?) {
            (Some(s), _) | (None, Some(s)) => s,
            (None, None) => return Err(Error::Config("a seed is required (`seed = ...` or --seed)".into())),
        };
        // File values are read even when overridden so they still count as known keys.
        let file_out = PathBuf::from(top.get("out", "out".to_string())?);
        let file_workers = top.get("workers", 1usize)?;
        let out_dir = overrides.out_dir.clone().unwrap_or(file_out);
        let workers = overrides.workers.unwrap_or(file_workers);
        top.finish()?;
        if workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }

        let mut m = Reader::new("model", ini.section(Some("model")));
        let arch = ModelConfig {
            d_model: m.get("d_model", 64)?,
            n_layers: m.get("n_layers", 3)?,
            n_heads: m.get("n_heads", 4)?,
            d_ff: m.get("d_ff", 256)?,
            vocab_size: 1,
            max_text_len: m.get("max_text_len", 128)?,
            block_size: m.get("block_size", 16)?,
            visual_dim: 1,
            max_visual_len: m.get("max_visual_len", 128)?,
            seed,
        };
        let attention = match m.get("attention", "block".to_string())?.as_str() {
            "block" => AttentionMode::Block(arch.block_size),
            "causal" => AttentionMode::Causal,
            "full" => AttentionMode::Full,
            other => return Err(Error::Config(format!("model.attention: unknown mode {other:?}"))),
        };
        let adam_default = AdamConfig::default();
        let adam = AdamConfig {
            lr: m.get("lr", adam_default.lr)?,
            weight_decay: m.get("weight_decay", adam_default.weight_decay)?,
            clip: m.get("clip", adam_default.clip)?,
            warmup_steps: m.get("warmup", adam_default.warmup_steps)?,
            ..adam_default
        };
        let noise = NoiseConfig {
            mode: match m.get("noise", "per_block".to_string())?.as_str() {
                "per_block" => NoiseMode::PerBlockT,
                "global" => NoiseMode::GlobalT,
                other => return Err(Error::Config(format!("model.noise: unknown mode {other:?}"))),
            },
            t_min: m.get("t_min", crate::diffusion::DEFAULT_T_MIN)?,
            fixed_t: None,
        };
        let model = ModelSettings {
            arch,
            attention,
            epochs: m.get("epochs", 10)?,
            batch_size: m.get("batch_size", 16)?,
            adam,
            noise,
        };
        m.finish()?;

        let mut c = Reader::new("corpus", ini.section(Some("corpus")));
        let shape_default = DocShape::default();
        let shape = DocShape {
            text_len: c.range("text_len", shape_default.text_len)?,
            table_rows: c.range("table_rows", shape_default.table_rows)?,
            table_cols: c.range("table_cols", shape_default.table_cols)?,
            p_empty: c.get("p_empty", shape_default.p_empty)?,
            formula_depth: c.range("formula_depth", shape_default.formula_depth)?,
            max_len: model.arch.max_text_len,
        };
        let corpus = CorpusSettings {
            generation: CorpusConfig {
                n_docs: c.get("n_docs", 1000)?,
                shape,
                kind_weights: c.array("kinds", [1.0, 1.0, 1.0])?,
                markov_sharpness: c.get("markov_sharpness", 1.5)?,
            },
            split: c.array("split", [0.8, 0.1, 0.1])?,
            glyph_size: c.get("glyph_size", 4)?,
            wrap: c.get("wrap", 16)?,
            epsilon: c.get("epsilon", 0.0)?,
            train_epsilon: c.get("train_epsilon", 0.0)?,
        };
        c.finish()?;

        let mut d = Reader::new("decode", ini.section(Some("decode")));
        let block_size = d.get("block_size", model.arch.block_size)?;
        let scheduler = match d.get("scheduler", "dynamic".to_string())?.as_str() {
            "dynamic" => Scheduler::Dynamic { tau: d.get("tau", DEFAULT_TAU)? },
            "static" => Scheduler::Static { steps: d.get("steps", 6)? },
            other => return Err(Error::Config(format!("decode.scheduler: unknown scheduler {other:?}"))),
        };
        let decode_cfg = DecodeConfig {
            scheduler,
            sampling: SamplingConfig {
                temperature: d.get("temperature", 1.0)?,
                top_k: d.get("top_k", 0)?,
                top_p: d.get("top_p", 1.0)?,
            },
            block_size,
            max_blocks: d.get("max_blocks", model.arch.max_text_len / block_size.max(1))?,
            seed,
        };
        let decode = DecodeSettings {
            decode: decode_cfg,
            taus: d.list("taus", vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])?,
            sweep_epsilon: d.opt("sweep_epsilon")?,
            static_steps: d.list("static_steps", vec![6, 32])?,
            compare_tau: d.get("compare_tau", 0.97)?,
            compare_block_size: d.get("compare_block_size", 32)?,
            presets: d.list("presets", vec![0.5, 1.0, 4.0])?,
            ablation_docs: d.get("ablation_docs", 100)?,
            ablation_max_len: d.get("ablation_max_len", 32)?,
            eval_docs: d.get("eval_docs", 0)?,
        };
        d.finish()?;

        let mut k = Reader::new("curriculum", ini.section(Some("curriculum")));
        let mining_default = MiningConfig::default();
        let curriculum = CurriculumSettings {
            mining: MiningConfig {
                passes: k.get("passes", mining_default.passes)?,
                temperature: k.get("pass_temperature", mining_default.temperature)?,
                tau_c: k.get("tau_c", mining_default.tau_c)?,
                beta: k.get("beta", mining_default.beta)?,
                alpha: k.get("alpha", mining_default.alpha)?,
                decode: decode_cfg,
            },
            eps_max: k.get("eps_max", 0.1)?,
            stage2_epochs: k.get("stage2_epochs", 5)?,
            stage2_lr: k.get("stage2_lr", 1e-3)?,
            seeds: k.get("seeds", 3)?,
            shuffle_levels: k.list("shuffle_levels", vec![0.0, 0.25, 0.5, 0.75, 1.0])?,
            shuffle_epsilon: k.opt("shuffle_epsilon")?,
            calibration_grid: k.list("calibration_grid", (0..=8).map(|i| i as f64 * 0.0025).collect())?,
            calibration_range: k.array("calibration_range", [0.90, 0.97])?,
            shuffle_tau: k.get("shuffle_tau", DEFAULT_TAU)?,
            shuffle_temperature: k.get("shuffle_temperature", 0.0)?,
        };
        k.finish()?;

        let cfg = Self {
            name,
            seed,
            out_dir,
            workers,
            corpus,
            model,
            decode,
            curriculum,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks on top of each sub-config's own validation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let mut arch = self.model.arch;
        arch.vocab_size = 1;
        arch.visual_dim = 1;
        arch.validate()?;
        if self.model.epochs == 0 || self.model.batch_size == 0 {
            return bad("model epochs and batch_size must be positive".into());
        }
        if !(self.model.adam.lr > 0.0 && self.curriculum.stage2_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.model.noise.t_min > 0.0 && self.model.noise.t_min < 1.0) {
            return bad(format!("t_min {} outside (0, 1)", self.model.noise.t_min));
        }
        for (kind, w) in crate::corpus::DocKind::ALL.iter().zip(self.corpus.generation.kind_weights) {
            if w > 0.0 {
                self.corpus.generation.shape.validate(*kind)?;
            }
        }
        if self.corpus.glyph_size == 0 || self.corpus.wrap == 0 {
            return bad("glyph_size and wrap must be positive".into());
        }
        let eps = [
            ("corpus.epsilon", self.corpus.epsilon),
            ("corpus.train_epsilon", self.corpus.train_epsilon),
            ("curriculum.eps_max", self.curriculum.eps_max),
        ];
        for (k, e) in eps.into_iter().chain(self.decode.sweep_epsilon.map(|e| ("decode.sweep_epsilon", e))) {
            if !(0.0..=0.5).contains(&e) {
                return bad(format!("{k} = {e} outside [0, 0.5]"));
            }
        }
        if self.corpus.split.iter().any(|r| !(0.0..=1.0).contains(r))
            || (self.corpus.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!("corpus.split {:?} must be fractions summing to 1", self.corpus.split));
        }
        self.decode.decode.validate()?;
        if self.decode.decode.block_size > self.model.arch.max_text_len
            || self.decode.decode.block_size * self.decode.decode.max_blocks > self.model.arch.max_text_len
        {
            return bad("decode block_size × max_blocks exceeds the model's text length".into());
        }
        if self.decode.taus.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) || self.decode.taus.is_empty() {
            return bad("decode.taus must be a non-empty list in (0, 1]".into());
        }
        let cb = self.decode.compare_block_size;
        if cb == 0 || self.model.arch.max_text_len % cb != 0 {
            return bad(format!("compare_block_size {cb} must divide max_text_len"));
        }
        if self.decode.static_steps.iter().any(|&s| s == 0 || s > cb) {
            return bad(format!("static_steps must lie in [1, {cb}]"));
        }
        if !(self.decode.compare_tau > 0.0 && self.decode.compare_tau <= 1.0) {
            return bad("compare_tau outside (0, 1]".into());
        }
        if self.decode.presets.iter().any(|p| !(*p > 0.0)) {
            return bad("presets must be positive multiples".into());
        }
        if self.decode.ablation_max_len < 2 || self.decode.ablation_max_len > self.model.arch.max_text_len {
            return bad("ablation_max_len outside [2, max_text_len]".into());
        }
        self.curriculum.mining.validate()?;
        let k = &self.curriculum;
        if k.seeds == 0 || k.stage2_epochs == 0 {
            return bad("curriculum seeds and stage2_epochs must be positive".into());
        }
        if k.shuffle_levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("shuffle levels must lie in [0, 1]".into());
        }
        if k.shuffle_epsilon.is_none() && k.calibration_grid.is_empty() {
            return bad("shuffle study needs shuffle_epsilon or a calibration grid".into());
        }
        if k.calibration_grid.iter().chain(&k.shuffle_epsilon).any(|e| !(0.0..=0.5).contains(e)) {
            return bad("shuffle noise levels must lie in [0, 0.5]".into());
        }
        let [lo, hi] = k.calibration_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("calibration_range [{lo}, {hi}] is not an interval in [0, 1]"));
        }
        if !(k.shuffle_tau > 0.0 && k.shuffle_tau <= 1.0) || !(k.shuffle_temperature >= 0.0) {
            return bad("shuffle_tau must be in (0, 1] and shuffle_temperature non-negative".into());
        }
        Ok(())
    }
}

/// Typed access to one section that remembers which keys were read.
struct Reader<'a> {
    section: &'static str,
    props: Option<&'a Properties>,
    used: Vec<String>,
}

impl<'a> Reader<'a> {
    fn new(section: &'static str, props: Option<&'a Properties>) -> Self {
        Self { section, props, used: Vec::new() }
    }

    fn raw(&mut self, key: &str) -> Result<Option<&'a str>> {
        self.used.push(key.to_string());
        let Some(props) = self.props else { return Ok(None) };
        let mut all = props.get_all(key);
        let first = all.next();
        if all.next().is_some() {
            return Err(Error::Config(format!("{}: key {key:?} given more than once", self.section)));
        }
        Ok(first.map(str::trim))
    }

    fn parse<T: FromStr>(&self, key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Config(format!("{}.{key}: cannot parse {v:?}", self.section)))
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key)? {
            None => Ok(None),
            Some(v) => self.parse(key, v).map(Some),
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key)? {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| self.parse(key, s))
                .collect(),
        }
    }

    fn array<const N: usize>(&mut self, key: &str, default: [f64; N]) -> Result<[f64; N]> {
        let v = self.list(key, default.to_vec())?;
        v.try_into()
            .map_err(|v: Vec<f64>| Error::Config(format!("{}.{key}: expected {N} values, got {}", self.section, v.len())))
    }

    /// `a..b` (inclusive) or a single value.
    fn range(&mut self, key: &str, default: SizeRange) -> Result<SizeRange> {
        let Some(v) = self.raw(key)? else { return Ok(default) };
        match v.split_once("..") {
            Some((a, b)) => Ok(SizeRange::new(self.parse(key, a.trim())?, self.parse(key, b.trim())?)),
            None => Ok(SizeRange::exact(self.parse(key, v)?)),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(props) = self.props {
            for (k, _) in props.iter() {
                if !self.used.iter().any(|u| u == k) {
                    return Err(Error::Config(format!("{}: unknown key {k:?}", self.section)));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = ExperimentConfig::from_ini_str("seed = 4\n", &Overrides::default()).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.workers, 1);
        assert_eq!(c.model.attention, AttentionMode::Block(16));
        assert_eq!(c.decode.decode.max_blocks, 8);
        assert_eq!(c.decode.taus.len(), 7);
        let o = Overrides { seed: Some(9), out_dir: Some("x".into()), workers: Some(3) };
        let c = ExperimentConfig::from_ini_str("seed = 4\nworkers = 2\nout = y\n", &o).unwrap();
        assert_eq!((c.seed, c.workers, c.out_dir), (9, 3, PathBuf::from("x")));
    }

    #[test]
    fn sections_ranges_and_comments() {
        let text = "\
# comment line
seed = 1
[corpus]
n_docs = 50
kinds = 0, 1, 0
table_rows = 2..3
text_len = 20
[model]
attention = causal
lr = 0.001
[decode]
scheduler = static
steps = 4
taus = 0.5, 0.9
[curriculum]
shuffle_epsilon = 0.03
";
        let c = ExperimentConfig::from_ini_str(text, &Overrides::default()).unwrap();
        assert_eq!(c.corpus.generation.n_docs, 50);
        assert_eq!(c.corpus.generation.kind_weights, [0.0, 1.0, 0.0]);
        assert_eq!(c.corpus.generation.shape.table_rows, SizeRange::new(2, 3));
        assert_eq!(c.corpus.generation.shape.text_len, SizeRange::exact(20));
        assert_eq!(c.model.attention, AttentionMode::Causal);
        assert_eq!(c.decode.decode.scheduler, Scheduler::Static { steps: 4 });
        assert_eq!(c.decode.taus, vec![0.5, 0.9]);
        assert_eq!(c.curriculum.shuffle_epsilon, Some(0.03));
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            "",
            "seed = 1\n[corpus]\nnn_docs = 3\n",
            "seed = 1\n[bogus]\nx = 1\n",
            "seed = x\n",
            "seed = 1\n[decode]\ntau = 1.5\n",
            "seed = 1\n[model]\nblock_size = 24\n",
            "seed = 1\n[corpus]\nsplit = 0.5, 0.5\n",
            "seed = 1\n[corpus]\nepsilon = 0.7\n",
            "seed = 1\nworkers = 0\n",
            "seed = 1\n[model]\nattention = sideways\n",
        ];
        for text in cases {
            let r = ExperimentConfig::from_ini_str(text, &Overrides::default());
            assert!(matches!(r, Err(Error::Config(_))), "{text:?} gave {r:?}");
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let r = ExperimentConfig::load(Path::new("/nonexistent/cfg.ini"), &Overrides::default());
        assert!(matches!(r, Err(Error::Io { .. })));
        assert_eq!(r.unwrap_err().exit_code(), 3);
    }
}
