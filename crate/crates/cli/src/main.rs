use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use kdnli::data::{
    apply_cipher, gen_synthetic_absa, gen_synthetic_nli, load_absa, load_nli, load_parallel,
    load_rte, save_absa, save_nli, save_parallel, save_rte, CipherSpec, NliExample, NliLabel,
    RteExample, RteLabel, LEXICON,
};
use kdnli::distill::{distill, TeacherStudentSetup};
use kdnli::encoder::{Encoder, Vocabulary};
use kdnli::eval::{
    evaluate_nli, evaluate_rte, zero_shot_task, EvalReport, HypothesisTemplate, LabelMapping, Task,
};
use kdnli::head::{NliModel, PairClassifier};
use kdnli::par::Execution;
use kdnli::persist::{
    checkpoint_id, embed_corpus, load_checkpoint, save_checkpoint, CachedEncoder, Checkpoint,
    EmbeddingCache, ModelKind, RunConfig, SplitClassifier, Storage,
};
use kdnli::train::{finetune_nli, RunOptions, TrainingLog};
use kdnli::translate::{
    finetune_translated, DictionaryTranslator, IdentityTranslator, SubprocessTranslator, Translator,
};

#[derive(Parser)]
#[command(
    name = "kdnli",
    version,
    about = "Siamese-encoder NLI with cross-lingual distillation"
)]
struct Cli {
    /// Run every stage on a single thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune a fresh encoder and head on labelled NLI pairs.
    TrainNli {
        #[arg(long)]
        data: PathBuf,
        /// Preset name or key=value file.
        #[arg(long, default_value = "desk-nli")]
        config: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Token list; defaults to the words of the training data.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Store tensors as 64-bit floats.
        #[arg(long)]
        wide: bool,
    },
    /// Align a student encoder to a frozen teacher on a parallel corpus.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        parallel: PathBuf,
        #[arg(long, default_value = "desk-kd")]
        config: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Composed checkpoint whose head is attached to the student.
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        wide: bool,
    },
    /// Fine-tune on NLI data translated batch by batch.
    TranslateTrain {
        #[arg(long)]
        data: PathBuf,
        /// `identity`, `cipher:<map file>` or `cmd:<program>`.
        #[arg(long, default_value = "identity")]
        translator: String,
        #[arg(long, default_value = "desk-mt")]
        config: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        wide: bool,
    },
    /// Score a composed model on a task.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Nli)]
        task: TaskArg,
        /// Also report the alternative label mapping.
        #[arg(long)]
        all_variants: bool,
        /// Hypothesis for sa/tr/absa; defaults to the built-in template.
        #[arg(long)]
        hypothesis: Option<String>,
        /// Positive topic for tr/absa.
        #[arg(long)]
        topic: Option<String>,
        /// Embedding cache to classify from instead of running the encoder.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Append JSON report lines to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Encode every sentence a task needs into an embedding cache.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = TaskArg::Nli)]
        task: TaskArg,
        #[arg(long)]
        hypothesis: Option<String>,
        #[arg(long)]
        cache: PathBuf,
    },
    /// Classify one premise/hypothesis pair.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        premise: String,
        #[arg(long)]
        hypothesis: String,
    },
    /// Write the synthetic corpora, cipher and vocabulary.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 3000)]
        n_train: usize,
        #[arg(long, default_value_t = 600)]
        n_test: usize,
        /// Source NLI examples whose sentences form the parallel corpus.
        #[arg(long, default_value_t = 1000)]
        n_parallel: usize,
        #[arg(long, default_value_t = 700)]
        n_absa: usize,
        #[arg(long, default_value_t = 18)]
        grammar_size: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Nli,
    Rte,
    Sa,
    Tr,
    Absa,
}

impl TaskArg {
    fn zero_shot(self) -> Option<Task> {
        match self {
            TaskArg::Sa => Some(Task::Sa),
            TaskArg::Tr => Some(Task::Tr),
            TaskArg::Absa => Some(Task::Absa),
            _ => None,
        }
    }
}

fn storage(wide: bool) -> Storage {
    if wide {
        Storage::F64
    } else {
        Storage::F32
    }
}

fn print_log(stage: &str, log: &TrainingLog) {
    let total = log.epochs.len();
    for e in &log.epochs {
        match e.accuracy {
            Some(acc) => println!(
                "{stage} epoch {}/{total} loss {:.6} acc {:.4}",
                e.epoch, e.mean_loss, acc
            ),
            None => println!("{stage} epoch {}/{total} loss {:.6}", e.epoch, e.mean_loss),
        }
    }
    println!("{stage} optimizer steps {}", log.optimizer_steps);
}

fn vocab_for(path: Option<&Path>, data: &[NliExample]) -> Result<Vocabulary> {
    Ok(match path {
        Some(p) => {
            Vocabulary::load(p).with_context(|| format!("reading vocabulary {}", p.display()))?
        }
        None => Vocabulary::from_texts(
            data.iter()
                .flat_map(|e| [e.premise.as_str(), e.hypothesis.as_str()]),
        ),
    })
}

fn fresh_model(cfg: &RunConfig, vocab: Vocabulary, seed: u64) -> Result<NliModel> {
    let encoder = Encoder::new(cfg.encoder.clone(), vocab, seed)?;
    Ok(NliModel::with_desk_head(encoder, seed.wrapping_add(1))?)
}

fn save_model(model: &NliModel, cfg: &RunConfig, seed: u64, out: &Path, wide: bool) -> Result<()> {
    let mut ckpt = Checkpoint::from_model(model, seed);
    add_hyper_echo(&mut ckpt, cfg);
    save_checkpoint(&ckpt, out, storage(wide))?;
    println!(
        "saved {} checkpoint {} id {}",
        ckpt.kind.as_str(),
        out.display(),
        checkpoint_id(out)?
    );
    Ok(())
}

fn add_hyper_echo(ckpt: &mut Checkpoint, cfg: &RunConfig) {
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            ckpt.config
                .entry(k.to_string())
                .or_insert_with(|| v.to_string());
        }
    }
}

fn load_model(path: &Path) -> Result<NliModel> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.to_model()?)
}

fn parse_translator(spec: &str) -> Result<Box<dyn Translator>> {
    if spec == "identity" {
        return Ok(Box::new(IdentityTranslator));
    }
    if let Some(path) = spec.strip_prefix("cipher:") {
        let cipher = CipherSpec::load(path).with_context(|| format!("reading cipher {path}"))?;
        return Ok(Box::new(DictionaryTranslator::from_cipher(&cipher)));
    }
    if let Some(cmd) = spec.strip_prefix("cmd:") {
        let mut parts = cmd.split_whitespace();
        let program = parts.next().context("empty translator command")?;
        let args: Vec<String> = parts.map(String::from).collect();
        return Ok(Box::new(SubprocessTranslator::spawn(program, &args)?));
    }
    bail!("unknown translator {spec:?}; expected identity, cipher:<file> or cmd:<program>")
}

fn template(
    task: Task,
    hypothesis: Option<&str>,
    topic: Option<&str>,
) -> Result<HypothesisTemplate> {
    let base = HypothesisTemplate::default_for(task).context("no template for this task")?;
    let text = hypothesis.map_or(base.hypothesis_text, String::from);
    let topic = topic.map(String::from).or(base.target_topic);
    Ok(HypothesisTemplate::new(task, text, topic)?)
}

fn run_eval<M: PairClassifier + ?Sized>(
    model: &M,
    data: &Path,
    task: TaskArg,
    all_variants: bool,
    hypothesis: Option<&str>,
    topic: Option<&str>,
    exec: Execution,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    match task {
        TaskArg::Nli => reports.push(evaluate_nli(model, &load_nli(data)?, exec)?),
        TaskArg::Rte => {
            let examples = load_rte(data)?;
            for mapping in mappings(Task::Rte, all_variants) {
                println!("mapping: neutral -> {}", mapping.neutral_maps_to);
                reports.push(evaluate_rte(model, &examples, &mapping, exec)?);
            }
        }
        other => {
            let task = other.zero_shot().expect("zero-shot task");
            let examples = load_absa(data)?;
            let template = template(task, hypothesis, topic)?;
            for mapping in mappings(task, all_variants) {
                println!("mapping: neutral -> {}", mapping.neutral_maps_to);
                reports.push(zero_shot_task(model, &examples, &template, &mapping, exec)?);
            }
        }
    }
    Ok(reports)
}

fn mappings(task: Task, all: bool) -> Vec<LabelMapping> {
    if all {
        LabelMapping::variants(task).to_vec()
    } else {
        vec![LabelMapping::for_task(task)]
    }
}

fn task_texts(path: &Path, task: TaskArg, hypothesis: Option<&str>) -> Result<Vec<String>> {
    Ok(match task {
        TaskArg::Nli => load_nli(path)?
            .into_iter()
            .flat_map(|e| [e.premise, e.hypothesis])
            .collect(),
        TaskArg::Rte => load_rte(path)?
            .into_iter()
            .flat_map(|e| [e.premise, e.hypothesis])
            .collect(),
        other => {
            let t = template(other.zero_shot().expect("zero-shot task"), hypothesis, None)?;
            let mut texts: Vec<String> = load_absa(path)?.into_iter().map(|e| e.text).collect();
            texts.push(t.hypothesis_text);
            texts
        }
    })
}

fn gen_data(
    out: &Path,
    seed: u64,
    n_train: usize,
    n_test: usize,
    n_parallel: usize,
    n_absa: usize,
    grammar_size: usize,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let train = gen_synthetic_nli(seed, n_train, grammar_size)?;
    let test = gen_synthetic_nli(seed.wrapping_add(1), n_test, grammar_size)?;
    let source = gen_synthetic_nli(seed.wrapping_add(2), n_parallel, grammar_size)?;
    let absa = gen_synthetic_absa(seed.wrapping_add(3), n_absa)?;
    let words = LEXICON.words();
    let cipher = CipherSpec::generate(seed.wrapping_add(4), words.iter().copied())?;
    let sentences: Vec<&str> = source
        .iter()
        .flat_map(|e| [e.premise.as_str(), e.hypothesis.as_str()])
        .collect();
    let parallel = cipher.parallel_corpus(&sentences)?;
    let test_cipher = apply_cipher(&test, &cipher)?.examples;
    let rte: Vec<RteExample> = test
        .iter()
        .map(|e| RteExample {
            premise: e.premise.clone(),
            hypothesis: e.hypothesis.clone(),
            label: if e.label == NliLabel::Entailment {
                RteLabel::Entailment
            } else {
                RteLabel::NoEntailment
            },
        })
        .collect();

    let mut tokens: BTreeSet<String> = words.iter().map(|w| w.to_string()).collect();
    tokens.extend(cipher.cipher_words().map(String::from));
    for text in absa.iter().map(|e| e.text.as_str()).chain(
        [Task::Sa, Task::Tr, Task::Absa]
            .into_iter()
            .filter_map(HypothesisTemplate::default_for)
            .map(|t| t.hypothesis_text)
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str),
    ) {
        tokens.extend(text.split_whitespace().map(str::to_lowercase));
    }
    let vocab = Vocabulary::from_tokens(tokens.iter().map(String::as_str))?;

    save_nli(out.join("nli_train.tsv"), &train)?;
    save_nli(out.join("nli_test.tsv"), &test)?;
    save_nli(out.join("nli_test_cipher.tsv"), &test_cipher)?;
    save_rte(out.join("rte_test.tsv"), &rte)?;
    save_absa(out.join("absa.tsv"), &absa)?;
    save_parallel(out.join("parallel.tsv"), &parallel)?;
    cipher.save(out.join("cipher.tsv"))?;
    vocab.save(out.join("vocab.txt"))?;
    println!(
        "wrote {} train, {} test, {} parallel, {} absa examples and {} tokens to {}",
        train.len(),
        test.len(),
        parallel.len(),
        absa.len(),
        vocab.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::TrainNli {
            data,
            config,
            seed,
            vocab,
            out,
            wide,
        } => {
            let cfg = RunConfig::resolve(&config)?;
            let dataset = load_nli(&data)?;
            let mut model = fresh_model(&cfg, vocab_for(vocab.as_deref(), &dataset)?, seed)?;
            let opts = RunOptions::seeded(seed.wrapping_add(2)).with_execution(exec);
            println!(
                "training on {} examples for {} epochs",
                dataset.len(),
                cfg.hyper.epochs
            );
            let log = finetune_nli(&mut model, &dataset, &cfg.hyper, opts)?;
            print_log("nli", &log);
            save_model(&model, &cfg, seed, &out, wide)
        }
        Command::Distill {
            teacher,
            parallel,
            config,
            seed,
            head,
            out,
            wide,
        } => {
            let cfg = RunConfig::resolve(&config)?;
            let teacher = load_checkpoint(&teacher)?.to_encoder()?;
            let corpus = load_parallel(&parallel)?;
            let mut setup = TeacherStudentSetup::from_teacher(teacher);
            println!(
                "distilling on {} pairs for {} epochs",
                corpus.len(),
                cfg.hyper.epochs
            );
            let log = distill(
                &mut setup,
                &corpus,
                &cfg.hyper,
                RunOptions::seeded(seed).with_execution(exec),
            )?;
            print_log("kd", &log);
            let student = setup.into_student();
            let mut ckpt = match head {
                Some(path) => {
                    let head = load_checkpoint(&path)?.to_head()?;
                    Checkpoint::from_model(&NliModel::new(student, head)?, seed)
                }
                None => Checkpoint::from_encoder(&student, seed),
            };
            add_hyper_echo(&mut ckpt, &cfg);
            save_checkpoint(&ckpt, &out, storage(wide))?;
            println!(
                "saved {} checkpoint {} id {}",
                ckpt.kind.as_str(),
                out.display(),
                checkpoint_id(&out)?
            );
            Ok(())
        }
        Command::TranslateTrain {
            data,
            translator,
            config,
            seed,
            vocab,
            out,
            wide,
        } => {
            let cfg = RunConfig::resolve(&config)?;
            let dataset = load_nli(&data)?;
            let translator = parse_translator(&translator)?;
            let mut model = fresh_model(&cfg, vocab_for(vocab.as_deref(), &dataset)?, seed)?;
            let opts = RunOptions::seeded(seed.wrapping_add(2)).with_execution(exec);
            println!(
                "training on {} translated examples for {} epochs",
                dataset.len(),
                cfg.hyper.epochs
            );
            let log =
                finetune_translated(&mut model, &dataset, translator.as_ref(), &cfg.hyper, opts)?;
            print_log("mt", &log);
            save_model(&model, &cfg, seed, &out, wide)
        }
        Command::Eval {
            model,
            data,
            task,
            all_variants,
            hypothesis,
            topic,
            cache,
            report,
        } => {
            let ckpt =
                load_checkpoint(&model).with_context(|| format!("loading {}", model.display()))?;
            let (hyp, top) = (hypothesis.as_deref(), topic.as_deref());
            let reports = match cache {
                Some(path) => {
                    let cache = EmbeddingCache::load(&path, &checkpoint_id(&model)?)?;
                    let encoder = CachedEncoder::new(&cache);
                    let head = ckpt.to_head()?;
                    let split = SplitClassifier {
                        encoder: &encoder,
                        head: &head,
                    };
                    run_eval(&split, &data, task, all_variants, hyp, top, exec)?
                }
                None => run_eval(&ckpt.to_model()?, &data, task, all_variants, hyp, top, exec)?,
            };
            let mut lines = String::new();
            for r in &reports {
                print!("{}", r.to_text());
                lines.push_str(&r.to_json_line());
                lines.push('\n');
            }
            if let Some(path) = report {
                use std::io::Write;
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .with_context(|| format!("opening {}", path.display()))?;
                f.write_all(lines.as_bytes())?;
            }
            Ok(())
        }
        Command::Embed {
            model,
            data,
            task,
            hypothesis,
            cache,
        } => {
            let ckpt = load_checkpoint(&model)?;
            if ckpt.kind == ModelKind::Head {
                bail!("{} holds no encoder", model.display());
            }
            let encoder = ckpt.to_encoder()?;
            let id = checkpoint_id(&model)?;
            let mut store = if cache.exists() {
                EmbeddingCache::load(&cache, &id)?
            } else {
                EmbeddingCache::new(id, encoder.embed_dim())
            };
            let mut texts = Vec::new();
            for path in &data {
                texts.extend(task_texts(path, task, hypothesis.as_deref())?);
            }
            let added = embed_corpus(&texts, &encoder, &mut store, exec)?;
            store.save(&cache)?;
            println!(
                "encoded {added} new texts; cache {} holds {}",
                cache.display(),
                store.len()
            );
            Ok(())
        }
        Command::Predict {
            model,
            premise,
            hypothesis,
        } => {
            let pred = load_model(&model)?.predict_pair(&premise, &hypothesis)?;
            let [e, n, c] = pred.probabilities;
            println!(
                "{} (entailment {e:.4}, neutral {n:.4}, contradiction {c:.4})",
                pred.predicted_label
            );
            Ok(())
        }
        Command::GenData {
            out,
            seed,
            n_train,
            n_test,
            n_parallel,
            n_absa,
            grammar_size,
        } => gen_data(
            &out,
            seed,
            n_train,
            n_test,
            n_parallel,
            n_absa,
            grammar_size,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
