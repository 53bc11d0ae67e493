//! The experiment runners behind the CLI subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use super::artifacts::{Artifacts, Meta, Table};
use super::config::ExperimentConfig;
use super::{block_tpf, decode_all, doc_epsilon, fill_for, mean_sd, pooled_tps, trailing_repetition, Setup};
use crate::corpus::{
    generate_corpus, read_splits, semantic_shuffle, split_files, write_corpus, DocKind, Document, Splits, TokenId,
};
use crate::curriculum::{build_sft_dataset, mine_hard, run_stage, CurvePoint, MinedSample, StageConfig};
use crate::decoder::{decode_fixed_length, DecodeConfig, DecodeOutput, Scheduler};
use crate::error::{Error, Result};
use crate::metrics::{normalized_edit_distance, score_corpus, strip_eos, ScoreReport};
use crate::model::{checkpoint, init_parameters, AdamConfig, AttentionMode, Parameters};
use crate::pool::par_map;
use crate::seed::{self, streams};
use crate::task::TrainExample;

pub const TRAIN_HEADER: &str = "step,loss,grad_norm,masked_acc";
pub const PREDICTION_HEADER: &str = "id,kind,tokens,forwards,n,wall_ms,truncated";
pub const SWEEP_HEADER: &str = "tau,tpf,tps,text_edit,formula,table_teds,overall";
pub const SCHEDULER_HEADER: &str = "scheduler,param,tpf,tps,text_edit,overall";
pub const ATTENTION_HEADER: &str = "mode,preset_len,target_len,truncated,repetition,edit";
pub const SHUFFLE_HEADER: &str = "mode,distortion,epsilon,text_edit,seq_acc";
pub const MINING_HEADER: &str = "id,kind,C,w,selected";
pub const CURRICULUM_HEADER: &str = "variant,seed,overall,text_edit,formula,table_teds,seq_acc";

/// Input locations and switches that are not part of the experiment
/// configuration. Unset paths default to locations under the output
/// directory.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub corpus_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    /// `train`, `val` or `test`; `test` when unset.
    pub split: Option<String>,
    pub trace: bool,
    /// Fill the TPS columns. Off by default because wall-clock numbers
    /// break byte-identical reruns.
    pub timing: bool,
}

impl Inputs {
    fn corpus_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| cfg.out_dir.join("corpus"))
    }

    fn model(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.model.clone().unwrap_or_else(|| cfg.out_dir.join("model.bdif"))
    }

    fn predictions(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.predictions.clone().unwrap_or_else(|| cfg.out_dir.join("predictions.tsv"))
    }

    fn split<'a>(&self, splits: &'a Splits) -> Result<&'a [Document]> {
        match self.split.as_deref().unwrap_or("test") {
            "train" => Ok(&splits.train),
            "val" => Ok(&splits.val),
            "test" => Ok(&splits.test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val or test)"))),
        }
    }
}

/// Files written by a run and a human-readable summary.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn limit<'a>(docs: &'a [Document], n: usize) -> &'a [Document] {
    if n == 0 {
        docs
    } else {
        &docs[..n.min(docs.len())]
    }
}

fn curve_table(curve: &[CurvePoint]) -> Table {
    let mut t = Table::csv(TRAIN_HEADER);
    for p in curve {
        t.push(vec![p.step.to_string(), f6(p.loss), f6(p.grad_norm), f6(p.masked_acc)]);
    }
    t
}

fn predictions_of(docs: &[Document], outs: &[DecodeOutput]) -> Vec<(u64, Vec<TokenId>)> {
    docs.iter().zip(outs).map(|(d, o)| (d.id, o.tokens.clone())).collect()
}

fn load_model(setup: &Setup, path: &Path) -> Result<Parameters<f32>> {
    let params = checkpoint::load(path)?;
    setup.check_model(&params)?;
    Ok(params)
}

fn load_split(inputs: &Inputs, cfg: &ExperimentConfig, setup: &Setup) -> Result<Splits> {
    let dir = inputs.corpus_dir(cfg);
    if !dir.join("train.tsv").exists() {
        return Err(Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no corpus here; run `gen` first"),
        ));
    }
    read_splits(&dir, setup.vocab())
}

/// Trains a fresh model on `examples` and returns it with its curve.
pub fn train_model(
    setup: &Setup,
    cfg: &ExperimentConfig,
    seed: u64,
    examples: &[TrainExample],
    stage: &StageConfig,
    label: &str,
) -> Result<(Parameters<f32>, Vec<CurvePoint>)> {
    let mut params = init_parameters::<f32>(&setup.model_config(cfg, seed))?;
    let curve = train_in_place(&mut params, setup, examples, stage, label)?;
    Ok((params, curve))
}

fn train_in_place(
    params: &mut Parameters<f32>,
    setup: &Setup,
    examples: &[TrainExample],
    stage: &StageConfig,
    label: &str,
) -> Result<Vec<CurvePoint>> {
    let start = Instant::now();
    let every = (examples.len().div_ceil(stage.batch_size) * stage.epochs / 10).max(1);
    run_stage(params, setup.vocab(), examples, stage, |p| {
        if p.step % every == 0 {
            info!(
                "{label}: step {} loss {:.4} masked acc {:.3} ({:.0}s)",
                p.step,
                p.loss,
                p.masked_acc,
                start.elapsed().as_secs_f64()
            );
        }
    })
}

/// `gen`: synthesizes a corpus and writes its three splits.
pub fn run_gen(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Report> {
    let setup = Setup::new(cfg, cfg.seed)?;
    let splits = setup.corpus(cfg, cfg.seed)?;
    let dir = inputs.corpus_dir(cfg);
    let mut art = Artifacts::create(&dir)?;
    for (path, part) in split_files(&dir).iter().zip([&splits.train, &splits.val, &splits.test]) {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        write_corpus(&art.claim(&name), part, setup.vocab())?;
    }
    let summary = format!(
        "corpus: {} train, {} val, {} test documents in {}\n",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        dir.display()
    );
    Ok(Report { files: art.keep(), summary })
}

/// `train`: trains on the train split and writes the checkpoint and curve.
pub fn run_train(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Report> {
    let start = Instant::now();
    let setup = Setup::new(cfg, cfg.seed)?;
    let splits = load_split(inputs, cfg, &setup)?;
    let fill = fill_for(cfg.model.attention, cfg.model.arch.block_size);
    let examples = setup.examples(&splits.train, cfg.corpus.train_epsilon, cfg.seed, fill)?;
    let stage = cfg.model.stage(cfg.seed);
    let (params, curve) = train_model(&setup, cfg, cfg.seed, &examples, &stage, "train")?;
    let mut art = Artifacts::create(&cfg.out_dir)?;
    art.table("train.csv", &curve_table(&curve))?;
    let model_path = inputs.model(cfg);
    if let Some(parent) = model_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    art.claim_external(&model_path);
    checkpoint::save(&params, &model_path)?;
    let last = curve.last().copied().unwrap_or(CurvePoint { step: 0, loss: 0.0, grad_norm: 0.0, masked_acc: 0.0 });
    let mut meta = Meta::new("train");
    meta.set("wall_secs", format!("{:.1}", start.elapsed().as_secs_f64()));
    meta.set("steps", curve.len());
    art.text("train.meta", &meta.render())?;
    let summary = format!(
        "trained {} steps on {} documents: final loss {:.4}, masked acc {:.4}\ncheckpoint {}\n",
        curve.len(),
        examples.len(),
        last.loss,
        last.masked_acc,
        model_path.display()
    );
    Ok(Report { files: art.keep(), summary })
}

/// `decode`: decodes a split and writes one prediction row per document.
pub fn run_decode(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Report> {
    let setup = Setup::new(cfg, cfg.seed)?;
    let params = load_model(&setup, &inputs.model(cfg))?;
    let splits = load_split(inputs, cfg, &setup)?;
    let docs = limit(inputs.split(&splits)?, cfg.decode.eval_docs);
    let conds = setup.conditions(docs, cfg.corpus.epsilon, cfg.seed)?;
    let outs = decode_all(&params, setup.vocab(), docs, &conds, &cfg.decode.decode, cfg.seed, cfg.workers)?;
    let mut t = Table::tsv(PREDICTION_HEADER);
    let mut traces = String::new();
    for (d, o) in docs.iter().zip(&outs) {
        t.push(vec![
            d.id.to_string(),
            d.kind.to_string(),
            setup.vocab().render_tokens(&o.tokens),
            o.stats.forwards.to_string(),
            o.stats.tokens.to_string(),
            if inputs.timing { format!("{:.3}", o.stats.wall_secs * 1e3) } else { String::new() },
            u8::from(o.stats.truncated).to_string(),
        ]);
        if inputs.trace {
            traces.push_str(&format!("# document {}\n{}", d.id, o.trace.dump(setup.vocab())));
        }
    }
    let mut art = Artifacts::create(&cfg.out_dir)?;
    let path = inputs.predictions(cfg);
    art.claim_external(&path);
    t.write(&path)?;
    if inputs.trace {
        art.text("traces.txt", &traces)?;
    }
    let mut meta = Meta::new("decode");
    meta.set("tps", format!("{:.2}", pooled_tps(&outs)));
    art.text("decode.meta", &meta.render())?;
    let truncated = outs.iter().filter(|o| o.stats.truncated).count();
    let summary = format!(
        "decoded {} documents: TPF {:.3}, {} truncated\npredictions {}\n",
        docs.len(),
        block_tpf(&outs),
        truncated,
        path.display()
    );
    Ok(Report { files: art.keep(), summary })
}

/// Reads a prediction file written by [`run_decode`].
pub fn read_predictions(path: &Path, setup: &Setup) -> Result<Vec<(u64, Vec<TokenId>)>> {
    let t = Table::read(path, b'\t', PREDICTION_HEADER)?;
    t.rows
        .iter()
        .map(|r| {
            let id = r[0]
                .parse::<u64>()
                .map_err(|_| Error::Data(format!("{}: bad document id {:?}", path.display(), r[0])))?;
            Ok((id, setup.vocab().parse_tokens(&r[2])?))
        })
        .collect()
}

/// `score`: scores a prediction file against its split.
pub fn run_score(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Report> {
    let setup = Setup::new(cfg, cfg.seed)?;
    let splits = load_split(inputs, cfg, &setup)?;
    let docs = limit(inputs.split(&splits)?, cfg.decode.eval_docs);
    let preds = read_predictions(&inputs.predictions(cfg), &setup)?;
    let report = score_corpus(&preds, docs, setup.vocab())?;
    let mut t = Table::csv(ScoreReport::csv_header());
    t.push(report.csv_row().split(',').map(str::to_string).collect());
    let mut art = Artifacts::create(&cfg.out_dir)?;
    art.table("scores.csv", &t)?;
    Ok(Report { files: art.keep(), summary: report.table() })
}

/// `sweep-threshold`: dynamic decoding over the configured thresholds.
pub fn run_sweep(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Report> {
    let setup = Setup::new(cfg, cfg.seed)?;
    let params = load_model(&setup, &inputs.model(cfg))?;
    let splits = load_split(inputs, cfg, &setup)?;
    let docs = limit(inputs.split(&splits)?, cfg.decode.eval_docs);
    let epsilon = cfg.decode.sweep_epsilon.unwrap_or(cfg.corpus.epsilon);
    let conds = setup.conditions(docs, epsilon, cfg.seed)?;
    let mut t = Table::csv(SWEEP_HEADER);
    let mut meta = Meta::new("sweep-threshold");
    meta.set("epsilon", epsilon);
    let mut summary = format!("threshold sweep on {} documents at glyph noise {epsilon}\n", docs.len());
    for &tau in &cfg.decode.taus {
        let dcfg = DecodeConfig { scheduler: Scheduler::Dynamic { tau }, ..cfg.decode.decode };
        let outs = decode_all(&params, setup.vocab(), docs, &conds, &dcfg, cfg.seed, cfg.workers)?;
        let r = score_corpus(&predictions_of(docs, &outs), docs, setup.vocab())?;
        let (tpf, tps) = (block_tpf(&outs), pooled_tps(&outs));
        t.push(vec![
            tau.to_string(),
            f4(tpf),
            if inputs.timing { format!("{tps:.2}") } else { String::new() },
            f6(r.text_edit),
            f4(r.formula),
            f4(r.table_teds),
            f4(r.overall),
        ]);
        meta.set(&format!("tps[{tau}]"), format!("{tps:.2}"));
        summary.push_str(&format!("  tau {tau:<5} TPF {tpf:7.3}  overall {:6.2}\n", r.overall));
        info!("tau {tau}: TPF {tpf:.3} overall {:.2}", r.overall);
    }
    let mut art = Artifacts::create(&cfg.out_dir)?;
    art.table("sweep.csv", &t)?;
    art.text("sweep.meta", &meta.render())?;
    Ok(Report { files: art.keep(), summary })
}

/// `compare-schedulers`: static schedules against one dynamic threshold at
/// the comparison block size.
pub fn run_compare(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Report> {
    let setup = Setup::new(cfg, cfg.seed)?;
    let params = load_model(&setup, &inputs.model(cfg))?;
    let splits = load_split(inputs, cfg, &setup)?;
    let docs = limit(inputs.split(&splits)?, cfg.decode.eval_docs);
    let conds = setup.conditions(docs, cfg.corpus.epsilon, cfg.seed)?;
    let block = cfg.decode.compare_block_size;
    let base = DecodeConfig {
        block_size: block,
        max_blocks: cfg.model.arch.max_text_len / block,
        ..cfg.decode.decode
    };
    let mut runs: Vec<(&str, String, Scheduler)> = cfg
        .decode
        .static_steps
        .iter()
        .map(|&s| ("static", s.to_string(), Scheduler::Static { steps: s }))
        .collect();
    runs.push(("dynamic", cfg.decode.compare_tau.to_string(), Scheduler::Dynamic { tau: cfg.decode.compare_tau }));
    let mut t = Table::csv(SCHEDULER_HEADER);
    let mut meta = Meta::new("compare-schedulers");
    let mut summary = format!("scheduler comparison at block size {block} on {} documents\n", docs.len());
    for (name, param, scheduler) in runs {
        let dcfg = DecodeConfig { scheduler, ..base };
        let outs = decode_all(&params, setup.vocab(), docs, &conds, &dcfg, cfg.seed, cfg.workers)?;
        let r = score_corpus(&predictions_of(docs, &outs), docs, setup.vocab())?;
        let (tpf, tps) = (block_tpf(&outs), pooled_tps(&outs));
        t.push(vec![
            name.to_string(),
            param.clone(),
            f4(tpf),
            if inputs.timing { format!("{tps:.2}") } else { String::new() },
            f6(r.text_edit),
            f4(r.overall),
        ]);
        meta.set(&format!("tps[{name}:{param}]"), format!("{tps:.2}"));
        summary.push_str(&format!("  {name:<8}{param:<6} TPF {tpf:7.3}  overall {:6.2}\n", r.overall));
    }
    let mut art = Artifacts::create(&cfg.out_dir)?;
    art.table("schedulers.csv", &t)?;
    art.text("schedulers.meta", &meta.render())?;
    Ok(Report { files: art.keep(), summary })
}

/// Table documents no longer than `max_len` tokens, generated from id
/// `first_id` onwards until `n` are found.
fn short_tables(
    cfg: &ExperimentConfig,
    setup: &Setup,
    seed: u64,
    first_id: u64,
    n: usize,
    max_len: usize,
) -> Result<Vec<Document>> {
    let mut gen = cfg.corpus.generation.clone();
    gen.kind_weights = [0.0, 1.0, 0.0];
    gen.n_docs = n.max(64);
    let mut out = Vec::with_capacity(n);
    let mut next = first_id;
    for _ in 0..1000 {
        let docs = generate_corpus(&gen, setup.vocab(), &setup.markov, seed, next)?;
        next += gen.n_docs as u64;
        out.extend(docs.into_iter().filter(|d| d.len() <= max_len));
        if out.len() >= n {
            out.truncate(n);
            return Ok(out);
        }
    }
    Err(Error::Config(format!("table shape never yields documents of at most {max_len} tokens")))
}

/// `ablate-attention`: a full-attention model decoding into preset
/// canvases against a block-attention model that stops at EOS.
pub fn run_ablate(cfg: &ExperimentConfig, _inputs: &Inputs) -> Result<Report> {
    let start = Instant::now();
    let seed = cfg.seed;
    let setup = Setup::new(cfg, seed)?;
    let max_len = cfg.decode.ablation_max_len;
    let n_train = cfg.corpus.generation.n_docs;
    let train = short_tables(cfg, &setup, seed, 0, n_train, max_len)?;
    let eval = short_tables(cfg, &setup, seed, 1 << 40, cfg.decode.ablation_docs, max_len)?;
    let b = cfg.model.arch.block_size;

    let block_stage = StageConfig { mode: AttentionMode::Block(b), ..cfg.model.stage(seed) };
    let ex = setup.examples(&train, cfg.corpus.train_epsilon, seed, b)?;
    let (block_model, block_curve) = train_model(&setup, cfg, seed, &ex, &block_stage, "block")?;
    let full_stage = StageConfig { mode: AttentionMode::Full, ..cfg.model.stage(seed) };
    let ex = setup.examples(&train, cfg.corpus.train_epsilon, seed, max_len)?;
    let (full_model, full_curve) = train_model(&setup, cfg, seed, &ex, &full_stage, "full")?;

    let vocab = setup.vocab();
    let conds = setup.conditions(&eval, cfg.corpus.epsilon, seed)?;
    let dcfg = cfg.decode.decode;
    let block_outs = decode_all(&block_model, vocab, &eval, &conds, &dcfg, seed, cfg.workers)?;
    let capacity = dcfg.block_size * dcfg.max_blocks;
    let l = cfg.model.arch.max_text_len;
    let mut t = Table::csv(ATTENTION_HEADER);
    let mut summary_rows: Vec<(String, Vec<(bool, usize, f64)>)> = Vec::new();
    let edit = |out: &[TokenId], d: &Document| {
        normalized_edit_distance(strip_eos(out, vocab.eos), strip_eos(&d.tokens, vocab.eos))
    };
    let mut rows = Vec::new();
    for (d, o) in eval.iter().zip(&block_outs) {
        let r = (o.stats.truncated, trailing_repetition(strip_eos(&o.tokens, vocab.eos)), edit(&o.tokens, d));
        t.push(vec!["block".into(), capacity.to_string(), d.len().to_string(), u8::from(r.0).to_string(), r.1.to_string(), f6(r.2)]);
        rows.push(r);
    }
    summary_rows.push(("block".into(), rows));
    for &m in &cfg.decode.presets {
        let idx: Vec<usize> = (0..eval.len()).collect();
        let results = par_map(&idx, cfg.workers, |&i| {
            let d = &eval[i];
            let n = d.len();
            let preset = ((m * n as f64).round() as usize).clamp(1, l);
            let mut rng = seed::child_rng(seed, streams::DECODE, d.id);
            let o = decode_fixed_length(&full_model, &conds[i], vocab, preset, dcfg.scheduler, &dcfg.sampling, &mut rng)?;
            // A fixed-length canvas has no early stop: the output is every
            // content token on it, with EOS and PAD skipped wherever they sit.
            let out: Vec<TokenId> = o.tokens.iter().copied().filter(|&x| x != vocab.eos && x != vocab.pad).collect();
            let truncated = preset < n || o.stats.truncated;
            Ok((preset, n, truncated, trailing_repetition(&out), edit(&out, d)))
        })?;
        let mut rows = Vec::new();
        for (preset, n, tr, rep, e) in results {
            t.push(vec!["full".into(), preset.to_string(), n.to_string(), u8::from(tr).to_string(), rep.to_string(), f6(e)]);
            rows.push((tr, rep, e));
        }
        summary_rows.push((format!("full@{m}N"), rows));
    }
    let mut s = Table::csv("mode,docs,truncated_rate,mean_repetition,mean_edit");
    let mut summary = format!("attention ablation on {} tables of at most {max_len} tokens\n", eval.len());
    for (name, rows) in &summary_rows {
        let k = rows.len().max(1) as f64;
        let tr = rows.iter().filter(|r| r.0).count() as f64 / k;
        let rep = rows.iter().map(|r| r.1 as f64).sum::<f64>() / k;
        let ed = rows.iter().map(|r| r.2).sum::<f64>() / k;
        s.push(vec![name.clone(), rows.len().to_string(), f4(tr), f4(rep), f4(ed)]);
        summary.push_str(&format!("  {name:<10} truncated {tr:.3}  repetition {rep:6.3}  edit {ed:.4}\n"));
    }
    let mut art = Artifacts::create(&cfg.out_dir)?;
    art.table("attention.csv", &t)?;
    art.table("attention_summary.csv", &s)?;
    art.table("train_block.csv", &curve_table(&block_curve))?;
    art.table("train_full.csv", &curve_table(&full_curve))?;
    let mut meta = Meta::new("ablate-attention");
    meta.set("wall_secs", format!("{:.1}", start.elapsed().as_secs_f64()));
    art.text("attention.meta", &meta.render())?;
    Ok(Report { files: art.keep(), summary })
}

/// Chooses the shuffle-study noise: the smallest grid level at which both
/// clean accuracies fall inside `range`, else the level closest to it.
pub fn pick_epsilon(grid: &[f64], accs: &[(f64, f64)], range: [f64; 2]) -> (f64, bool) {
    let gap = |a: f64| (range[0] - a).max(a - range[1]).max(0.0);
    let mut best = (f64::INFINITY, grid[0]);
    for (&e, &(x, y)) in grid.iter().zip(accs) {
        let g = gap(x).max(gap(y));
        if g == 0.0 {
            return (e, true);
        }
        if g < best.0 {
            best = (g, e);
        }
    }
    (best.1, false)
}

/// `shuffle-robustness`: left-to-right against block-diffusion decoding on
/// word-shuffled text, averaged over seeds.
pub fn run_shuffle(cfg: &ExperimentConfig, _inputs: &Inputs) -> Result<Report> {
    let start = Instant::now();
    let k = &cfg.curriculum;
    let levels = &k.shuffle_levels;
    let mut per_seed = Table::csv(&format!("seed,{SHUFFLE_HEADER}"));
    let mut calib = Table::csv("seed,epsilon,ar_acc,diffusion_acc,chosen");
    // (mode, level) -> per-seed (epsilon, text_edit, seq_acc)
    let mut acc: Vec<Vec<Vec<(f64, f64, f64)>>> = vec![vec![Vec::new(); levels.len()]; 2];
    let modes = ["ar", "diffusion"];
    for i in 0..k.seeds {
        let seed = cfg.seed + i as u64;
        let setup = Setup::new(cfg, seed)?;
        let vocab = setup.vocab();
        let splits = setup.corpus(cfg, seed)?;
        let b = cfg.model.arch.block_size;
        let mut models = Vec::new();
        for (name, mode) in [("ar", AttentionMode::Block(1)), ("diffusion", AttentionMode::Block(b))] {
            let fill = fill_for(mode, b);
            let ex = setup.examples(&splits.train, cfg.corpus.train_epsilon, seed, fill)?;
            let stage = StageConfig { mode, ..cfg.model.stage(seed) };
            models.push(train_model(&setup, cfg, seed, &ex, &stage, &format!("{name} seed {seed}"))?.0);
        }
        let sampling = crate::decoder::SamplingConfig { temperature: k.shuffle_temperature, ..cfg.decode.decode.sampling };
        let l = cfg.model.arch.max_text_len;
        let dcfgs = [
            DecodeConfig { scheduler: Scheduler::Dynamic { tau: k.shuffle_tau }, sampling, block_size: 1, max_blocks: l, seed },
            DecodeConfig { scheduler: Scheduler::Dynamic { tau: k.shuffle_tau }, sampling, block_size: b, max_blocks: l / b, seed },
        ];
        let text_only = |docs: &[Document]| -> Vec<Document> {
            limit(&docs.iter().filter(|d| d.kind == DocKind::Text).cloned().collect::<Vec<_>>(), cfg.decode.eval_docs).to_vec()
        };
        let eval_acc = |docs: &[Document], eps: f64, m: usize| -> Result<ScoreReport> {
            let conds = setup.conditions(docs, eps, seed)?;
            let outs = decode_all(&models[m], vocab, docs, &conds, &dcfgs[m], seed, cfg.workers)?;
            score_corpus(&predictions_of(docs, &outs), docs, vocab)
        };
        let epsilon = match k.shuffle_epsilon {
            Some(e) => e,
            None => {
                let val = text_only(&splits.val);
                let mut accs = Vec::new();
                for &e in &k.calibration_grid {
                    let a = (eval_acc(&val, e, 0)?.token_acc, eval_acc(&val, e, 1)?.token_acc);
                    info!("seed {seed} calibration eps {e}: ar {:.4} diffusion {:.4}", a.0, a.1);
                    accs.push(a);
                }
                let (e, inside) = pick_epsilon(&k.calibration_grid, &accs, k.calibration_range);
                for (&g, a) in k.calibration_grid.iter().zip(&accs) {
                    calib.push(vec![seed.to_string(), g.to_string(), f4(a.0), f4(a.1), u8::from(g == e).to_string()]);
                }
                if !inside {
                    log::warn!("seed {seed}: no calibration level puts both accuracies in range; using {e}");
                }
                e
            }
        };
        let test = text_only(&splits.test);
        for (li, &level) in levels.iter().enumerate() {
            let shuffled: Vec<Document> = test
                .iter()
                .map(|d| semantic_shuffle(d, level, vocab, &mut seed::child_rng(seed, streams::WORDS, d.id)))
                .collect::<Result<_>>()?;
            for m in 0..2 {
                let r = eval_acc(&shuffled, epsilon, m)?;
                per_seed.push(vec![
                    seed.to_string(),
                    modes[m].into(),
                    level.to_string(),
                    epsilon.to_string(),
                    f6(r.text_edit),
                    f6(r.seq_acc),
                ]);
                acc[m][li].push((epsilon, r.text_edit, r.seq_acc));
            }
        }
    }
    let mut t = Table::csv(SHUFFLE_HEADER);
    let mut summary = format!("semantic shuffle over {} seeds (mean text edit distance)\n", k.seeds);
    for (m, name) in modes.iter().enumerate() {
        for (li, level) in levels.iter().enumerate() {
            let v = &acc[m][li];
            let n = v.len() as f64;
            let eps = v.iter().map(|x| x.0).sum::<f64>() / n;
            let ed = v.iter().map(|x| x.1).sum::<f64>() / n;
            let sa = v.iter().map(|x| x.2).sum::<f64>() / n;
            t.push(vec![name.to_string(), level.to_string(), format!("{eps:.4}"), f6(ed), f6(sa)]);
            summary.push_str(&format!("  {name:<10} distortion {level:<5} edit {ed:.4}  exact {sa:.3}\n"));
        }
    }
    let mut art = Artifacts::create(&cfg.out_dir)?;
    art.table("shuffle.csv", &t)?;
    art.table("shuffle_seeds.csv", &per_seed)?;
    if !calib.rows.is_empty() {
        art.table("calibration.csv", &calib)?;
    }
    let mut meta = Meta::new("shuffle-robustness");
    meta.set("wall_secs", format!("{:.1}", start.elapsed().as_secs_f64()));
    art.text("shuffle.meta", &meta.render())?;
    Ok(Report { files: art.keep(), summary })
}

fn mining_table(mined: &[MinedSample]) -> Table {
    let mut t = Table::csv(MINING_HEADER);
    for m in mined {
        t.push(vec![m.id.to_string(), m.kind.to_string(), f6(m.consistency), f6(m.weight), u8::from(m.selected).to_string()]);
    }
    t
}

/// `mine`: consistency of every validation document under a trained model.
pub fn run_mine(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Report> {
    let setup = Setup::new(cfg, cfg.seed)?;
    let params = load_model(&setup, &inputs.model(cfg))?;
    let splits = load_split(inputs, cfg, &setup)?;
    let pool_docs = limit(&splits.val, cfg.decode.eval_docs);
    let b = cfg.decode.decode.block_size;
    let pool = setup.examples(pool_docs, cfg.curriculum.eps_max, cfg.seed, b)?;
    let mined = mine_hard(&params, &pool, setup.vocab(), &cfg.curriculum.mining, cfg.seed, cfg.workers)?;
    let mut art = Artifacts::create(&cfg.out_dir)?;
    art.table("mining.csv", &mining_table(&mined))?;
    let hard = mined.iter().filter(|m| m.selected).count();
    let summary = format!("mined {} documents: {hard} below consistency {}\n", mined.len(), cfg.curriculum.mining.tau_c);
    Ok(Report { files: art.keep(), summary })
}

/// One seed of the curriculum ablation.
struct CurriculumRun {
    scores: [(String, ScoreReport); 3],
    curves: [Vec<CurvePoint>; 3],
    mined: Vec<MinedSample>,
    n_hard: usize,
}

fn curriculum_seed(cfg: &ExperimentConfig, seed: u64) -> Result<CurriculumRun> {
    let k = &cfg.curriculum;
    let setup = Setup::new(cfg, seed)?;
    let vocab = setup.vocab();
    let splits = setup.corpus(cfg, seed)?;
    let b = cfg.model.arch.block_size;
    let fill = fill_for(cfg.model.attention, b);
    let base = setup.examples(&splits.train, cfg.corpus.train_epsilon, seed, fill)?;
    let stage1 = cfg.model.stage(seed);
    let (s1, c1) = train_model(&setup, cfg, seed, &base, &stage1, &format!("stage 1 seed {seed}"))?;

    let pool = setup.examples(limit(&splits.val, cfg.decode.eval_docs), k.eps_max, seed, fill)?;
    let mined = mine_hard(&s1, &pool, vocab, &k.mining, seed, cfg.workers)?;
    let sft = build_sft_dataset(&mined, &pool, &base, k.mining.alpha, &mut seed::child_rng(seed, streams::REPLAY, 0))?;
    info!("seed {seed}: {} hard, {} replay", sft.n_hard, sft.n_replay);
    if sft.examples.is_empty() {
        return Err(Error::Data(format!(
            "seed {seed}: no pool document fell below consistency {}; raise eps_max or tau_c",
            k.mining.tau_c
        )));
    }
    let stage2 = StageConfig {
        epochs: k.stage2_epochs,
        adam: AdamConfig { lr: k.stage2_lr, ..cfg.model.adam },
        seed: seed::derive(seed, streams::TRAIN, 2),
        ..stage1
    };
    let mut s12 = s1.clone();
    let c12 = train_in_place(&mut s12, &setup, &sft.examples, &stage2, &format!("stage 2 seed {seed}"))?;
    // Stage 2 alone starts from scratch, so it keeps the first-stage rate.
    let stage2_only = StageConfig { adam: cfg.model.adam, ..stage2 };
    let (s2, c2) = train_model(&setup, cfg, seed, &sft.examples, &stage2_only, &format!("stage 2 only seed {seed}"))?;

    // Held-out hard split: test documents at per-document noise. Their ids
    // are disjoint from the pool's, so the noise draws are independent.
    let docs = limit(&splits.test, cfg.decode.eval_docs);
    let conds: Vec<_> = docs
        .iter()
        .map(|d| {
            let eps = doc_epsilon(seed, d.id, k.eps_max);
            setup.task.condition(d.kind, &d.tokens, eps, crate::task::Task::noise_seed(seed, d.id))
        })
        .collect::<Result<_>>()?;
    let score = |p: &Parameters<f32>| -> Result<ScoreReport> {
        let outs = decode_all(p, vocab, docs, &conds, &cfg.decode.decode, seed, cfg.workers)?;
        score_corpus(&predictions_of(docs, &outs), docs, vocab)
    };
    Ok(CurriculumRun {
        scores: [
            ("stage1+stage2".into(), score(&s12)?),
            ("stage1".into(), score(&s1)?),
            ("stage2_only".into(), score(&s2)?),
        ],
        curves: [c1, c12, c2],
        mined,
        n_hard: sft.n_hard,
    })
}

/// `finetune`: the two-stage curriculum against each stage alone, over
/// seeds, scored on a noisy held-out split.
pub fn run_finetune(cfg: &ExperimentConfig, _inputs: &Inputs) -> Result<Report> {
    let start = Instant::now();
    let mut art = Artifacts::create(&cfg.out_dir)?;
    let mut t = Table::csv(CURRICULUM_HEADER);
    let mut overall: Vec<(String, Vec<f64>)> = Vec::new();
    for i in 0..cfg.curriculum.seeds {
        let seed = cfg.seed + i as u64;
        let run = curriculum_seed(cfg, seed)?;
        for (j, (name, r)) in run.scores.iter().enumerate() {
            t.push(vec![name.clone(), seed.to_string(), f4(r.overall), f6(r.text_edit), f4(r.formula), f4(r.table_teds), f6(r.seq_acc)]);
            if overall.len() <= j {
                overall.push((name.clone(), Vec::new()));
            }
            overall[j].1.push(r.overall);
        }
        for (name, c) in ["stage1", "stage2", "stage2_only"].iter().zip(&run.curves) {
            art.table(&format!("train_{name}_s{seed}.csv"), &curve_table(c))?;
        }
        art.table(&format!("mining_s{seed}.csv"), &mining_table(&run.mined))?;
        info!("seed {seed}: {} hard samples", run.n_hard);
    }
    let mut s = Table::csv("variant,mean_overall,sd_overall,seeds");
    let mut summary = format!("curriculum ablation over {} seeds (overall on the noisy held-out split)\n", cfg.curriculum.seeds);
    for (name, v) in &overall {
        let (m, sd) = mean_sd(v);
        s.push(vec![name.clone(), f4(m), f4(sd), v.len().to_string()]);
        summary.push_str(&format!("  {name:<14} {m:6.2} ± {sd:.2}\n"));
    }
    art.table("curriculum.csv", &t)?;
    art.table("curriculum_summary.csv", &s)?;
    let mut meta = Meta::new("finetune");
    meta.set("wall_secs", format!("{:.1}", start.elapsed().as_secs_f64()));
    art.text("finetune.meta", &meta.render())?;
    Ok(Report { files: art.keep(), summary })
}
