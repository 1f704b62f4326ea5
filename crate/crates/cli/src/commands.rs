use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use multitok_core::decoder::{Decoder, DecoderConfig};
use multitok_core::lm::MultiHeadLm;
use multitok_core::metrics::{parse_epsilon_grid, ppl_joint, ppl_n, speedup_and_mix, sweep as run_sweep, write_sweep_csv};
use multitok_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, MultiHeadModel};
use multitok_core::ngram::{build_mask as make_mask, count_ngrams_with, shards_from_env, CooccurrenceMask, MaskSet};
use multitok_core::ot::run_ot_check;
use multitok_core::train::{train as run_training, Optimizer, Schedule, TrainError, TrainingConfig};
use multitok_core::vocab::{split_corpus, CorpusSplit, TokenMode, Vocab, DEFAULT_MAX_SEQ_LEN};

use crate::args::{BuildMaskArgs, CorpusArgs, DecodeArgs, GenerateArgs, OtCheckArgs, PplArgs, SweepArgs, TrainArgs};
use crate::config::{print_manifest, ConfigFile, Resolver};
use crate::UsageError;

const TRAIN_KEYS: &[&str] = &[
    "corpus",
    "token_mode",
    "split",
    "max_seq_len",
    "seed",
    "d_model",
    "stem_layers",
    "heads",
    "context_len",
    "attn_heads",
    "lr_b",
    "lr_m",
    "lr_mb",
    "steps",
    "batch_size",
    "optimizer",
    "weight_decay",
    "warmup",
    "grad_clip",
    "eval_every",
    "from_base",
    "copy_init",
    "out",
];

const DEFAULT_SPLIT: f64 = 0.97;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn path_string(p: Option<&PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn parse_mode(s: &str) -> Result<TokenMode> {
    s.parse().map_err(|e| usage(format!("{e}")))
}

/// Resolved corpus settings.
struct CorpusSpec {
    path: PathBuf,
    mode: TokenMode,
    split: f64,
    max_seq_len: usize,
    seed: u64,
}

impl CorpusSpec {
    fn from_flags(c: &CorpusArgs, seed: u64, manifest: &mut Vec<(String, String)>) -> Result<Self> {
        let path = c
            .corpus
            .clone()
            .ok_or_else(|| usage("--corpus is required"))?;
        let spec = Self {
            path,
            mode: parse_mode(c.token_mode.as_deref().unwrap_or("byte"))?,
            split: c.split.unwrap_or(DEFAULT_SPLIT),
            max_seq_len: c.max_seq_len.unwrap_or(DEFAULT_MAX_SEQ_LEN),
            seed,
        };
        spec.record(manifest);
        Ok(spec)
    }

    fn record(&self, manifest: &mut Vec<(String, String)>) {
        manifest.push(("corpus".into(), self.path.display().to_string()));
        manifest.push(("token_mode".into(), self.mode.to_string()));
        manifest.push(("split".into(), self.split.to_string()));
        manifest.push(("max_seq_len".into(), self.max_seq_len.to_string()));
        manifest.push(("seed".into(), self.seed.to_string()));
    }

    /// Reads the corpus, builds its vocabulary unless one is given, and
    /// splits the encoded lines.
    fn load(&self, vocab: Option<Vocab>) -> Result<(Vocab, CorpusSplit)> {
        let text = std::fs::read_to_string(&self.path)
            .with_context(|| format!("cannot read corpus {}", self.path.display()))?;
        let vocab = match vocab {
            Some(v) => v,
            None => Vocab::build(&text, self.mode)?,
        };
        let seqs = vocab
            .encode_lines(&text, self.max_seq_len)
            .with_context(|| format!("cannot encode corpus {}", self.path.display()))?;
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(usage(format!("split {} must lie strictly between 0 and 1", self.split)));
        }
        let split = split_corpus(seqs, self.split, self.seed)?;
        Ok((vocab, split))
    }
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).context("cannot load model")
}

fn model_manifest(c: &ModelConfig, manifest: &mut Vec<(String, String)>) {
    for (k, v) in [
        ("vocab_size", c.vocab_size),
        ("d_model", c.d_model),
        ("stem_layers", c.stem_layers),
        ("heads", c.n_heads),
        ("context_len", c.context_len),
        ("attn_heads", c.attn_heads),
    ] {
        manifest.push((format!("model.{k}"), v.to_string()));
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p, TRAIN_KEYS)?,
        None => ConfigFile::default(),
    };
    let mut r = Resolver::new(&file);
    let defaults = TrainingConfig::default();
    let model_defaults = ModelConfig::default();

    let seed = r.get("seed", a.seed, 0u64)?;
    let corpus = r.get_opt("corpus", path_string(a.corpus.corpus.as_ref()))?;
    let mode = parse_mode(&r.get("token_mode", a.corpus.token_mode.clone(), "byte".to_string())?)?;
    let split = r.get("split", a.corpus.split, DEFAULT_SPLIT)?;
    let max_seq_len = r.get("max_seq_len", a.corpus.max_seq_len, DEFAULT_MAX_SEQ_LEN)?;
    let from_base = r.get_opt("from_base", path_string(a.from_base.as_ref()))?;
    let copy_init = r.get("copy_init", a.copy_init.then_some(true), false)?;
    let heads = r.get("heads", a.heads, model_defaults.n_heads)?;
    let shape_flags = [a.d_model, a.stem_layers, a.context_len, a.attn_heads];
    let d_model = r.get("d_model", a.d_model, model_defaults.d_model)?;
    let stem_layers = r.get("stem_layers", a.stem_layers, model_defaults.stem_layers)?;
    let context_len = r.get("context_len", a.context_len, model_defaults.context_len)?;
    let attn_heads = r.get("attn_heads", a.attn_heads, model_defaults.attn_heads)?;
    let lr_b = r.get("lr_b", a.lr_b, defaults.lr_b)?;
    let lr_m = r.get("lr_m", a.lr_m, defaults.lr_m)?;
    let lr_mb = r.get("lr_mb", a.lr_mb, defaults.lr_mb)?;
    let steps = r.get("steps", a.steps, defaults.steps)?;
    let batch_size = r.get("batch_size", a.batch_size, defaults.batch_size)?;
    let optimizer = r.get("optimizer", a.optimizer.clone(), "adamw".to_string())?;
    let weight_decay = r.get("weight_decay", a.weight_decay, 0.01)?;
    let warmup = r.get("warmup", a.warmup.clone(), "0.01".to_string())?;
    let grad_clip = r.get("grad_clip", a.grad_clip.clone(), "1".to_string())?;
    let eval_every = r.get("eval_every", a.eval_every, defaults.eval_every)?;
    let out = r
        .get_opt("out", path_string(a.out.as_ref()))?
        .ok_or_else(|| usage("--out is required"))?;

    let cfg = TrainingConfig {
        lr_b,
        lr_m,
        lr_mb,
        steps,
        batch_size,
        optimizer: match optimizer.as_str() {
            "adamw" => Optimizer::AdamW { weight_decay },
            "sgd" => Optimizer::Sgd,
            other => return Err(usage(format!("unknown optimizer {other:?} (expected adamw or sgd)"))),
        },
        schedule: match warmup.as_str() {
            "off" => Schedule::Constant,
            s => Schedule::WarmupCosine {
                warmup_fraction: s.parse().map_err(|_| usage(format!("bad warmup {s:?}")))?,
            },
        },
        grad_clip: match grad_clip.as_str() {
            "off" => None,
            s => Some(s.parse().map_err(|_| usage(format!("bad grad_clip {s:?}")))?),
        },
        seed,
        eval_every,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let spec = corpus.map(|path| CorpusSpec {
        path: PathBuf::from(path),
        mode,
        split,
        max_seq_len,
        seed,
    });

    let (mut model, vocab) = match &from_base {
        Some(base_path) => {
            if shape_flags.iter().any(Option::is_some) {
                log::warn!("layer shape flags are ignored with --from-base");
            }
            let base = load_model(Path::new(base_path))?;
            let bc = base.model.config().clone();
            let model = MultiHeadModel::transfer_from_base(&base.model, bc.stem_layers, heads, copy_init, seed)
                .with_context(|| format!("cannot extend base model {base_path}"))?;
            let vocab = match (base.vocab, &spec) {
                (Some(v), _) => v,
                (None, Some(s)) => s.load(None)?.0,
                (None, None) => bail!("base model {base_path} has no vocabulary and no --corpus was given"),
            };
            (model, vocab)
        }
        None => {
            let s = spec.as_ref().ok_or_else(|| usage("--corpus is required"))?;
            let text =
                std::fs::read_to_string(&s.path).with_context(|| format!("cannot read corpus {}", s.path.display()))?;
            let vocab = Vocab::build(&text, mode)?;
            let config = ModelConfig {
                vocab_size: vocab.size(),
                d_model,
                stem_layers,
                n_heads: heads,
                context_len,
                attn_heads,
            };
            config.validate().map_err(|e| usage(e.to_string()))?;
            (MultiHeadModel::new(config, seed)?, vocab)
        }
    };
    let mut manifest = r.manifest;
    model_manifest(model.config(), &mut manifest);
    manifest.push(("parameters".into(), model.parameter_count().to_string()));
    print_manifest("train", &manifest);

    if steps > 0 {
        let s = spec.as_ref().ok_or_else(|| usage("--corpus is required when steps > 0"))?;
        let (_, data) = s.load(Some(vocab.clone()))?;
        let report = match run_training(&mut model, &data.train, Some(&data.validation), &cfg) {
            Ok(r) => r,
            Err(TrainError::Diverged { step, .. }) => bail!("training diverged at step {step}"),
            Err(e) => return Err(e.into()),
        };
        eprintln!("trained {steps} steps in {:.1}s", report.wall_clock.as_secs_f64());
        if let Some(last) = report.validation.last() {
            for (i, l) in last.log_ppl.iter().enumerate() {
                println!("PPL_{} {}", i + 1, l.exp());
            }
        }
    }
    save_checkpoint(Path::new(&out), &model, Some(&vocab)).with_context(|| format!("cannot write model {out}"))?;
    Ok(())
}

pub fn build_mask(a: BuildMaskArgs) -> Result<()> {
    if !(2..=4).contains(&a.order) {
        return Err(usage(format!("order {} outside 2..=4", a.order)));
    }
    if !(a.floor.is_finite() && a.floor >= 0.0) {
        return Err(usage(format!("floor {} must be finite and nonnegative", a.floor)));
    }
    let mut manifest = Vec::new();
    let spec = CorpusSpec::from_flags(&a.corpus, a.seed, &mut manifest)?;
    let vocab = match &a.model {
        Some(p) => Some(
            load_model(p)?
                .vocab
                .ok_or_else(|| anyhow!("model {} has no vocabulary", p.display()))?,
        ),
        None => None,
    };
    let shards = shards_from_env();
    manifest.push(("order".into(), a.order.to_string()));
    manifest.push(("floor".into(), a.floor.to_string()));
    manifest.push(("threads".into(), shards.to_string()));
    manifest.push(("out".into(), a.out.display().to_string()));
    print_manifest("build-mask", &manifest);

    let (vocab, data) = spec.load(vocab)?;
    let v = vocab.size();
    let uni = count_ngrams_with(&data.train, 1, v, None, shards)?;
    let joint = count_ngrams_with(&data.train, a.order, v, None, shards)?;
    let mask = make_mask(&uni, &joint, a.floor)?;
    mask.save(&a.out)
        .with_context(|| format!("cannot write mask {}", a.out.display()))?;
    eprintln!(
        "{} stored entries over {} positions, {} bytes in memory",
        mask.len(),
        joint.total_positions(),
        mask.footprint_bytes()
    );
    Ok(())
}

fn decoder_config(d: &DecodeArgs, seed: u64, heads: usize) -> Result<DecoderConfig> {
    let n_max = d.n_max.unwrap_or(heads.min(3));
    if heads < 2 {
        return Err(usage("multi-token decoding needs a model with at least 2 heads"));
    }
    if n_max > heads {
        return Err(usage(format!("n_max {n_max} exceeds the model's {heads} heads")));
    }
    let cfg = DecoderConfig {
        n_max,
        k: d.k,
        temperature: d.temperature,
        repetition_penalty: d.rep_penalty,
        repetition_window: d.rep_window,
        epsilon_b: d.epsilon_b,
        alpha_c: d.alpha_c,
        adaptive_thresholding: match d.adaptive.as_str() {
            "on" => true,
            "off" => false,
            other => return Err(usage(format!("--adaptive expects on or off, got {other:?}"))),
        },
        blur_kernel: match d.blur.as_str() {
            "off" => None,
            s => Some(s.parse().map_err(|_| usage(format!("--blur expects a kernel size or off, got {s:?}")))?),
        },
        rng_seed: seed,
        end_token: None,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn decoder_manifest(c: &DecoderConfig, manifest: &mut Vec<(String, String)>) {
    let blur = c.blur_kernel.map_or("off".to_string(), |k| k.to_string());
    for (k, v) in [
        ("n_max", c.n_max.to_string()),
        ("epsilon_b", c.epsilon_b.to_string()),
        ("k", c.k.to_string()),
        ("temperature", c.temperature.to_string()),
        ("rep_penalty", c.repetition_penalty.to_string()),
        ("rep_window", c.repetition_window.to_string()),
        ("alpha_c", c.alpha_c.to_string()),
        ("adaptive", if c.adaptive_thresholding { "on" } else { "off" }.to_string()),
        ("blur", blur),
        ("seed", c.rng_seed.to_string()),
    ] {
        manifest.push((k.to_string(), v));
    }
}

/// Loads one mask per order `2..=n_max`. Without mask files every ratio
/// is 1 and masking is a no-op.
fn load_masks(paths: &[PathBuf], n_max: usize, vocab_size: usize) -> Result<MaskSet> {
    if paths.is_empty() {
        log::warn!("no --mask given; co-occurrence masking disabled");
        return Ok(MaskSet::identity(n_max, vocab_size)?);
    }
    let mut set = MaskSet::new();
    for p in paths {
        set.insert(CooccurrenceMask::load(p).context("cannot load mask")?);
    }
    set.check(n_max, vocab_size)?;
    Ok(set)
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let ck = load_model(&a.model)?;
    let vocab = ck
        .vocab
        .ok_or_else(|| anyhow!("model {} has no vocabulary", a.model.display()))?;
    let model = ck.model;
    let mut cfg = decoder_config(&a.decode, a.seed, model.n_heads())?;
    if let Some(c) = a.stop {
        cfg.end_token = Some(
            vocab
                .id_of(u32::from(c))
                .ok_or_else(|| usage(format!("stop symbol {c:?} is not in the vocabulary")))?,
        );
    }
    let prompt = vocab
        .encode(&a.prompt)
        .map_err(|e| usage(format!("prompt: {e}")))?;
    if prompt.is_empty() {
        return Err(usage("prompt must not be empty"));
    }
    let mut manifest = vec![("model".to_string(), a.model.display().to_string())];
    decoder_manifest(&cfg, &mut manifest);
    manifest.push(("max_tokens".into(), a.max_tokens.to_string()));
    for m in &a.decode.masks {
        manifest.push(("mask".into(), m.display().to_string()));
    }
    print_manifest("generate", &manifest);
    let masks = load_masks(&a.decode.masks, cfg.n_max, model.vocab_size())?;

    let start = Instant::now();
    let (out, trace) = Decoder::new(cfg.clone(), &masks)?.generate(&model, &prompt, a.max_tokens)?;
    let elapsed = start.elapsed().as_secs_f64();
    println!("{}{}", a.prompt, vocab.decode(&out)?);

    if let Some(path) = &a.trace {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot write trace {}", path.display()))?);
        writeln!(w, "step,n_emitted,backoffs,max_joint_value")?;
        for (i, s) in trace.steps.iter().enumerate() {
            writeln!(w, "{},{},{},{}", i + 1, s.emitted, s.backoffs, s.max_joint_value)?;
        }
        w.flush()?;
    }
    if !trace.steps.is_empty() {
        let (speedup, mix) = speedup_and_mix(&trace, cfg.n_max)?;
        eprintln!(
            "{} tokens in {} forward passes: speed-up {speedup:.3}, mix {mix:?}, {elapsed:.3}s",
            trace.tokens(),
            trace.forward_passes
        );
    }
    if a.wall_clock && !out.is_empty() {
        let single = DecoderConfig {
            epsilon_b: 1.0,
            end_token: None,
            ..cfg
        };
        let start = Instant::now();
        Decoder::new(single, &masks)?.generate(&model, &prompt, out.len())?;
        let baseline = start.elapsed().as_secs_f64();
        eprintln!("wall-clock: one token per step {baseline:.3}s, speed-up {:.3}", baseline / elapsed);
    }
    Ok(())
}

/// Loads a model and the validation split of the corpus, encoded with the
/// model's vocabulary.
fn model_and_validation(
    model: &Path,
    corpus: &CorpusArgs,
    seed: u64,
    manifest: &mut Vec<(String, String)>,
) -> Result<(MultiHeadModel, CorpusSplit)> {
    let ck = load_model(model)?;
    manifest.push(("model".into(), model.display().to_string()));
    let mut spec = CorpusSpec::from_flags(corpus, seed, manifest)?;
    if let Some(v) = &ck.vocab {
        spec.mode = v.mode();
    }
    let (vocab, data) = spec.load(ck.vocab)?;
    if vocab.size() != ck.model.vocab_size() {
        bail!(
            "vocabulary of {} symbols does not match the model's {}",
            vocab.size(),
            ck.model.vocab_size()
        );
    }
    Ok((ck.model, data))
}

pub fn ppl(a: PplArgs) -> Result<()> {
    let mut manifest = Vec::new();
    manifest.push(("order".to_string(), a.order.to_string()));
    let (model, data) = model_and_validation(&a.model, &a.corpus, a.seed, &mut manifest)?;
    print_manifest("ppl", &manifest);
    if a.order == 0 || a.order > model.n_heads() {
        return Err(usage(format!("order {} outside 1..={}", a.order, model.n_heads())));
    }
    for n in 1..=a.order {
        println!("PPL_{n} {}", ppl_n(&model, &data.validation, n)?);
    }
    for n in 2..=a.order {
        println!("PPL_1:{n} {}", ppl_joint(&model, &data.validation, n)?);
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let grid = parse_epsilon_grid(&a.grid).map_err(|e| usage(e.to_string()))?;
    let mut manifest = Vec::new();
    let (model, data) = model_and_validation(&a.model, &a.corpus, a.seed, &mut manifest)?;
    let cfg = decoder_config(&a.decode.with_epsilon(grid[0]), a.seed, model.n_heads())?;
    decoder_manifest(&cfg, &mut manifest);
    for (k, v) in manifest.iter_mut() {
        if k == "epsilon_b" {
            v.clone_from(&a.grid);
        }
    }
    print_manifest("sweep", &manifest);
    let masks = load_masks(&a.decode.masks, cfg.n_max, model.vocab_size())?;
    let rows = run_sweep(&model, &data.validation, &cfg, &masks, &grid)?;
    match &a.out {
        Some(path) => {
            let mut w =
                BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?);
            write_sweep_csv(&rows, &mut w)?;
            w.flush()?;
        }
        None => write_sweep_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

pub fn ot_check(a: OtCheckArgs) -> Result<()> {
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    print_manifest(
        "ot-check",
        &[
            ("trials".into(), a.trials.to_string()),
            ("vocab".into(), a.vocab.map_or("2..=5".into(), |v| v.to_string())),
            ("seed".into(), a.seed.to_string()),
            ("tolerance".into(), a.tolerance.to_string()),
        ],
    );
    let report = run_ot_check(a.trials, a.vocab, a.seed, a.tolerance).map_err(|e| usage(e.to_string()))?;
    println!("trials {}", report.trials);
    println!("max_tv {:e}", report.max_tv);
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        bail!("max TV {:e} is not below {:e}", report.max_tv, report.tolerance)
    }
}
