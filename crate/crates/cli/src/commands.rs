use std::io::Write;
use std::path::{Path, PathBuf};

use attconv::gradcheck::grad_check;
use attconv::model::{count_params, ParamCount};
use attconv::text::synth::{gen_context_lookup, gen_nonlocal_match, gen_separable};
use attconv::text::{build_embeddings, build_vocab, load_jsonl, load_pretrained, Dataset, EncodedExample, Vocabulary};
use attconv::{evaluate, train, ContextMode, Model, ModelConfig, Variant};
use serde::Serialize;
use serde_json::json;

use crate::attmap::{to_svg, to_tsv};
use crate::checkpoint::Checkpoint;
use crate::config::ConfigFile;
use crate::CliError;

/// Hidden size cap for gradient checks.
pub const GRADCHECK_MAX_D: usize = 8;
pub const GRADCHECK_STEP: f64 = 1e-5;

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    serde_json::to_writer(&mut *out, value).map_err(|e| CliError::Data(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

fn load_data(path: &Path, what: &str) -> Result<Dataset, CliError> {
    let ds = load_jsonl(path).map_err(|e| match e {
        attconv::Error::Io { source, .. } => CliError::Data(format!("cannot read {what} {}: {source}", path.display())),
        other => CliError::Data(other.to_string()),
    })?;
    if ds.is_empty() {
        return Err(CliError::Data(format!(
            "{what} {} contains no examples",
            path.display()
        )));
    }
    Ok(ds)
}

/// Maps `ds` onto the model's classes; a label the model lacks is a
/// configuration mismatch.
fn align_labels(ds: &Dataset, labels: &[String], path: &Path) -> Result<Dataset, CliError> {
    ds.relabel(labels)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// Pretrained vectors in word2vec text format.
    pub embeddings: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
}

/// Trains a model, streams `{epoch, split, loss, accuracy}` records to
/// `out` and writes the checkpoint.
pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let file = ConfigFile::load(&args.config)?;
    let seed = file.resolve_seed(args.seed)?;
    let mut train_config = file.train_config()?;
    if let Some(e) = args.epochs {
        train_config.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        train_config.learning_rate = lr;
    }
    train_config.validate()?;

    let train_ds = load_data(&args.train, "training data")?;
    let model_config = file.model_config(Some(train_ds.num_classes()), seed)?;
    let dev_ds = match &args.dev {
        Some(p) => Some(align_labels(&load_data(p, "dev data")?, &train_ds.labels, p)?),
        None => None,
    };

    let d = model_config.d;
    let pretrained = match &args.embeddings {
        Some(p) => Some(load_pretrained(p, d, seed)?),
        None => None,
    };
    let mut vocab = build_vocab(&train_ds.examples, pretrained.as_ref().map(|(v, _)| v))?;
    if model_config.context_mode == ContextMode::MultiConc {
        vocab.ensure_separator();
    }
    let embeddings = build_embeddings(&vocab, pretrained.as_ref().map(|(v, m)| (v, m)), d, seed)?;
    let mut model = Model::new(model_config, vocab, train_ds.labels.clone(), embeddings)?;

    let train_data = train_ds.encode(&model.vocab);
    let dev_data = dev_ds.map(|ds| ds.encode(&model.vocab));
    let mut sink_err = None;
    train(&mut model, &train_data, dev_data.as_deref(), &train_config, |m| {
        if sink_err.is_none() {
            sink_err = emit(out, m).err();
        }
    })?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    Checkpoint { model, train_config }.save(&args.out)?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub workers: usize,
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ck = Checkpoint::load(&args.model)?;
    let ds = load_data(&args.data, "data")?;
    let ds = align_labels(&ds, &ck.model.labels, &args.data)?;
    let data = ds.encode(&ck.model.vocab);
    let r = evaluate(&ck.model, &data, args.workers.max(1))?;
    emit(
        out,
        &json!({
            "accuracy": r.accuracy,
            "n": r.n,
            "correct": r.correct,
            "loss": r.loss,
            "labels": ck.model.labels,
            "confusion": r.confusion,
        }),
    )
}

#[derive(Clone, Debug)]
pub struct GradcheckArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub tolerance: f64,
    pub step: f64,
}

/// Two-example dataset shaped for `mode`: texts of 5 and 6 tokens,
/// contexts of 6 tokens (two contexts in the multi-context modes). No
/// padding token occurs.
pub fn gradcheck_examples(mode: ContextMode) -> (Vocabulary, Vec<EncodedExample>) {
    let mut vocab = Vocabulary::new();
    let ids: Vec<usize> = (0..10).map(|i| vocab.insert(&format!("g{i}"))).collect();
    if mode == ContextMode::MultiConc {
        vocab.ensure_separator();
    }
    let seq = |len: usize, salt: usize| -> Vec<usize> { (0..len).map(|j| ids[(salt * 7 + j * 3) % 10]).collect() };
    let contexts = |salt: usize| -> Vec<Vec<usize>> {
        match mode {
            ContextMode::Intra => vec![],
            ContextMode::Single => vec![seq(6, salt + 1)],
            ContextMode::MultiWise | ContextMode::MultiConc => vec![seq(6, salt + 1), seq(6, salt + 2)],
        }
    };
    let examples = vec![
        EncodedExample {
            text: seq(5, 0),
            contexts: contexts(0),
            label: 0,
        },
        EncodedExample {
            text: seq(if mode == ContextMode::Intra { 6 } else { 5 }, 3),
            contexts: contexts(3),
            label: 1,
        },
    ];
    (vocab, examples)
}

/// Central-difference check of every parameter of a small model built from
/// the config (hidden size capped at 8). Prints one JSON record per tensor
/// and a summary; fails unless every relative error is below `tolerance`.
pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let file = ConfigFile::load(&args.config)?;
    let seed = file.resolve_seed(args.seed)?;
    let mut config: ModelConfig = file.model_config(Some(file.num_classes.unwrap_or(2)), seed)?;
    config.d = config.d.min(GRADCHECK_MAX_D);
    config.num_classes = 2;
    let (vocab, examples) = gradcheck_examples(config.context_mode);
    let embeddings = build_embeddings(&vocab, None, config.d, seed)?;
    let model = Model::new(config, vocab, vec!["a".into(), "b".into()], embeddings)?;
    let report = grad_check(
        &model.store,
        |g| model.batch_loss(g, &examples),
        args.step,
        args.tolerance,
    )?;
    for t in &report.tensors {
        emit(
            out,
            &json!({
                "tensor": t.name,
                "entries": t.entries,
                "max_rel_error": t.max_rel_error,
                "worst_entry": t.worst_entry,
                "analytic": t.analytic,
                "numeric": t.numeric,
                "passed": t.max_rel_error < args.tolerance,
            }),
        )?;
    }
    let worst = report.worst().map(|t| t.name.clone()).unwrap_or_default();
    emit(
        out,
        &json!({
            "variant": model.config.variant,
            "context_mode": model.config.context_mode,
            "d": model.config.d,
            "tolerance": args.tolerance,
            "step": args.step,
            "max_rel_error": report.max_rel_error(),
            "worst_tensor": worst,
            "passed": report.passed(),
        }),
    )?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed: worst tensor {worst} has relative error {:e} (tolerance {:e})",
            report.max_rel_error(),
            args.tolerance
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapFormat {
    Tsv,
    Svg,
}

#[derive(Clone, Debug)]
pub struct AttmapArgs {
    pub model: PathBuf,
    pub input: PathBuf,
    pub format: MapFormat,
    /// Output directory, created if missing.
    pub out: PathBuf,
}

/// Writes `ex{N}_layer{L}_ctx{K}.{tsv,svg}` per attention matrix of every
/// input example and lists the files on `out`.
pub fn cmd_attmap(args: &AttmapArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ck = Checkpoint::load(&args.model)?;
    let model = &ck.model;
    if !model.config.variant.has_attention_map() {
        return Err(CliError::Config(format!(
            "the {} variant has no attention matrices to export",
            model.config.variant
        )));
    }
    let ds = load_data(&args.input, "input")?;
    if model.config.context_mode == ContextMode::Intra {
        if let Some(n) = ds.examples.iter().position(|e| !e.contexts.is_empty()) {
            return Err(CliError::Config(format!(
                "intra-context model given contexts (example {n} of {})",
                args.input.display()
            )));
        }
    }
    let data = ds.encode(&model.vocab);
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;
    let ext = match args.format {
        MapFormat::Tsv => "tsv",
        MapFormat::Svg => "svg",
    };
    for (n, ex) in data.iter().enumerate() {
        for map in model.attention_maps(ex)? {
            let body = match args.format {
                MapFormat::Tsv => to_tsv(&map, &model.vocab),
                MapFormat::Svg => to_svg(&map, &model.vocab),
            };
            let path = args
                .out
                .join(format!("ex{n}_layer{}_ctx{}.{ext}", map.layer, map.context));
            std::fs::write(&path, body).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
            emit(
                out,
                &json!({
                    "file": path.display().to_string(),
                    "example": n,
                    "layer": map.layer,
                    "context": map.context,
                    "rows": map.weights.rows(),
                    "cols": map.weights.cols(),
                }),
            )?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct ParamsArgs {
    pub config: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Vocabulary size assumed for `--config` (reserved tokens included).
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ParamTable {
    variant: Variant,
    d: usize,
    vocab_size: usize,
    tensors: Vec<attconv::model::ParamRow>,
    total_excluding_embeddings: usize,
    total_including_embeddings: usize,
}

fn table(model: &Model) -> ParamTable {
    let all: ParamCount = count_params(&model.store, true);
    ParamTable {
        variant: model.config.variant,
        d: model.config.d,
        vocab_size: model.vocab.len(),
        tensors: all.rows,
        total_excluding_embeddings: count_params(&model.store, false).total,
        total_including_embeddings: all.total,
    }
}

/// Model built from a config with `vocab_size` vocabulary entries.
pub fn model_from_config(file: &ConfigFile, seed: u64, vocab_size: usize) -> Result<Model, CliError> {
    let config = file.model_config(None, seed)?;
    let mut vocab = Vocabulary::new();
    let reserved = vocab.len() + usize::from(config.context_mode == ContextMode::MultiConc);
    if vocab_size < reserved {
        return Err(CliError::Config(format!("vocab size must be at least {reserved}")));
    }
    if config.context_mode == ContextMode::MultiConc {
        vocab.ensure_separator();
    }
    for i in 0..vocab_size - reserved {
        vocab.insert(&format!("w{i}"));
    }
    let labels = (0..config.num_classes).map(|k| format!("class{k}")).collect();
    let embeddings = attconv::text::EmbeddingMatrix::zeros(vocab.len(), config.d);
    Ok(Model::new(config, vocab, labels, embeddings)?)
}

/// Per-tensor shapes and sizes plus totals with and without embeddings.
pub fn cmd_params(args: &ParamsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = match (&args.config, &args.model) {
        (Some(c), None) => {
            let file = ConfigFile::load(c)?;
            model_from_config(&file, file.seed.unwrap_or(0), args.vocab_size.unwrap_or(2))?
        }
        (None, Some(m)) => Checkpoint::load(m)?.model,
        _ => return Err(CliError::Config("give exactly one of --config and --model".into())),
    };
    emit(out, &table(&model))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    Nonlocal,
    Lookup,
    Separable,
}

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub task: SynthTask,
    pub n: usize,
    pub seed: u64,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub out: PathBuf,
}

/// Writes a seeded synthetic dataset as JSONL.
pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ds = match args.task {
        SynthTask::Nonlocal => gen_nonlocal_match(args.n, args.seq_len, args.vocab_size, args.seed)?,
        SynthTask::Lookup => gen_context_lookup(args.n, args.seed)?,
        SynthTask::Separable => gen_separable(args.n, args.seed),
    };
    ds.save_jsonl(&args.out)?;
    emit(
        out,
        &json!({"file": args.out.display().to_string(), "examples": ds.len()}),
    )
}
