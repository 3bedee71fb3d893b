//! Command-line surface: data generation, training regimes, evaluation,
//! prediction, rendering, and gradient checking.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use flexdoc::eval::{evaluate, render_table, ModelPredictor, MostFrequent, ScoreReport};
use flexdoc::mask::{MaskSet, TaskSpec};
use flexdoc::model::{load_checkpoint, Model};
use flexdoc::render::{nn_retrieve, render_svg, AssetGallery, RenderStyle};
use flexdoc::schema::{read_jsonl, Document, FieldValue, Schema};
use flexdoc::synth::{generate, BayesOracle, Manifest};
use flexdoc::train::{train, Corpus, Regime};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "flexdoc", version, about = "Masked field prediction for vector graphic documents")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override keys of the run-config file (flags win).
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Run-config file (TOML or JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated task list, e.g. ELEM,POS,ATTR
    #[arg(long, global = true, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Training regime: imp | exp | exp-ft | expert
    #[arg(long, global = true)]
    regime: Option<String>,
    /// Checkpoint to fine-tune from (exp-ft)
    #[arg(long, global = true)]
    init_checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for data/eval parallelism (0 = default)
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Directory with schema.json and the JSONL splits
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Task for the expert regime
    #[arg(long, global = true)]
    expert_task: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark corpus
    Generate,
    /// In-domain pre-training with random masking (IMP)
    Pretrain,
    /// Multi-task training: exp (default), exp-ft, or expert
    Train,
    /// Evaluate a checkpoint and baselines on the test split
    Eval {
        /// Model checkpoint to evaluate
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also evaluate the most-frequent baseline (and the generator
        /// oracle when the corpus carries a manifest)
        #[arg(long)]
        baselines: bool,
    },
    /// Complete the masked fields of a document
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input document (single JSON object; Mask sentinels mark the
        /// fields to fill)
        #[arg(long)]
        input: PathBuf,
        /// Mask a complete document with this task first
        #[arg(long)]
        task: Option<String>,
        /// Replace predicted feature vectors by their nearest gallery asset
        #[arg(long)]
        gallery: Option<PathBuf>,
        /// Where to write the completed document (stdout when omitted)
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Render a document to SVG
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Finite-difference check of the full model gradient
    GradCheck {
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLEXDOC_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{}", serde_json::json!({ "error": format!("{err:#}") }));
        std::process::exit(1);
    }
}

fn effective_config(overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg.seed = Some(seed);
    }
    if let Some(tasks) = &overrides.tasks {
        cfg.tasks = tasks.clone();
    }
    if let Some(regime) = &overrides.regime {
        cfg.train.regime = regime.parse::<Regime>()?;
    }
    if let Some(ckpt) = &overrides.init_checkpoint {
        cfg.init_checkpoint = Some(ckpt.clone());
    }
    if let Some(out) = &overrides.out {
        cfg.out_dir = out.clone();
    }
    if let Some(workers) = overrides.workers {
        cfg.workers = workers;
    }
    if let Some(epochs) = overrides.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(batch) = overrides.batch_size {
        cfg.train.batch_size = batch;
    }
    if let Some(dir) = &overrides.data_dir {
        cfg.data_dir = Some(dir.clone());
    }
    if let Some(task) = &overrides.expert_task {
        cfg.train.expert_task = Some(task.clone());
    }
    cfg.propagate_seed();
    if cfg.workers > 0 {
        // the global pool can only be installed once; later calls are no-ops
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global();
    }
    Ok(cfg)
}

fn load_corpus(cfg: &RunConfig) -> Result<(Corpus, Vec<Document>)> {
    let (schema_path, train_path, val_path, test_path) = cfg.resolved_corpus_paths()?;
    let schema = Schema::load(&schema_path)
        .with_context(|| format!("loading schema {}", schema_path.display()))?;
    let train_docs = read_jsonl(&train_path, &schema)?;
    let val_docs = read_jsonl(&val_path, &schema)?;
    let test_docs = read_jsonl(&test_path, &schema)?;
    Ok((
        Corpus {
            schema,
            train: train_docs,
            val: val_docs,
        },
        test_docs,
    ))
}

fn run_training(cfg: &RunConfig, regime: Regime) -> Result<()> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.regime = regime;
    let (corpus, _) = load_corpus(cfg)?;
    let tasks = cfg.parsed_tasks()?;
    let init = match (&cfg.init_checkpoint, regime) {
        (Some(path), _) => Some(load_checkpoint(path, &corpus.schema)?),
        (None, Regime::ExpFt) => bail!("exp-ft requires --init-checkpoint"),
        _ => None,
    };
    cfg.echo_into(&cfg.out_dir)?;
    log::info!(
        "training regime {regime} on {} documents ({} epochs, batch {})",
        corpus.train.len(),
        train_cfg.epochs,
        train_cfg.batch_size
    );
    let outcome = train(&corpus, &tasks, &cfg.model, &train_cfg, init, Some(&cfg.out_dir))?;
    if let Some(score) = outcome.best_val_score {
        log::info!("best validation mean score {score:.4}");
    }
    println!("checkpoint written to {}", cfg.out_dir.join("model.ckpt").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.overrides)?;
    match cli.command {
        Command::Generate => {
            cfg.echo_into(&cfg.out_dir)?;
            let corpus = generate(&cfg.generator)?;
            corpus.write_to_dir(&cfg.out_dir)?;
            println!(
                "wrote {} train / {} val / {} test documents to {}",
                corpus.train.len(),
                corpus.val.len(),
                corpus.test.len(),
                cfg.out_dir.display()
            );
            Ok(())
        }
        Command::Pretrain => run_training(&cfg, Regime::Imp),
        Command::Train => run_training(&cfg, cfg.train.regime),
        Command::Eval { checkpoint, baselines } => {
            let (corpus, test_docs) = load_corpus(&cfg)?;
            let tasks = cfg.parsed_tasks()?;
            cfg.echo_into(&cfg.out_dir)?;
            let seed = cfg.seed.unwrap_or(0);
            let batch = cfg.train.batch_size;
            let mut reports: Vec<ScoreReport> = Vec::new();
            let model: Option<Model> = match &checkpoint {
                Some(path) => Some(load_checkpoint(path, &corpus.schema)?),
                None => None,
            };
            if let Some(model) = &model {
                let hash = corpus.schema.hash();
                let predictor = ModelPredictor::new(model, &tasks, "model");
                reports.push(evaluate(&predictor, &test_docs, &corpus.schema, &tasks, seed, batch, &hash)?);
            }
            if baselines {
                let mf = MostFrequent::from_train_split(&corpus.train, &corpus.schema);
                reports.push(evaluate(&mf, &test_docs, &corpus.schema, &tasks, seed, batch, "")?);
                if let Some(manifest) = read_manifest(&cfg) {
                    let oracle = BayesOracle::new(manifest.config.clone());
                    if oracle.schema().hash() == corpus.schema.hash() {
                        reports.push(evaluate(&oracle, &test_docs, &corpus.schema, &tasks, seed, batch, "")?);
                    }
                }
            }
            if reports.is_empty() {
                bail!("nothing to evaluate: pass --checkpoint and/or --baselines");
            }
            let table = render_table(&reports);
            print!("{table}");
            std::fs::write(
                cfg.out_dir.join("eval_report.json"),
                serde_json::to_string_pretty(&reports)?,
            )?;
            Ok(())
        }
        Command::Predict {
            checkpoint,
            input,
            task,
            gallery,
            out_file,
        } => {
            let (schema_path, ..) = cfg.resolved_corpus_paths()?;
            let schema = Schema::load(&schema_path)?;
            let model = load_checkpoint(&checkpoint, &schema)?;
            let text = std::fs::read_to_string(&input)?;
            let doc = Document::from_json_str(text.trim(), &schema)?;
            let tasks = cfg.parsed_tasks()?;
            let seed = cfg.seed.unwrap_or(0);
            let (input_doc, mask, task_for_model) = match &task {
                Some(name) => {
                    let task: TaskSpec = name.parse().map_err(anyhow::Error::from)?;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                    let triplet = flexdoc::mask::build_triplet(&doc, &schema, &task, &mut rng)?;
                    (triplet.input, triplet.mask, task)
                }
                None => {
                    // derive the mask from the Mask sentinels in the input
                    let mut mask = MaskSet::new();
                    for (i, e) in doc.elements.iter().enumerate() {
                        for k in 0..schema.len() {
                            if e.field(k).is_mask() {
                                mask.insert(i, k);
                            }
                        }
                    }
                    (doc, mask, TaskSpec::Elem)
                }
            };
            let task_id = model.config.use_task_embedding.then(|| {
                tasks
                    .iter()
                    .position(|t| t.name() == task_for_model.name())
                    .unwrap_or(0)
            });
            let mut completed = model.predict(&input_doc, &mask, task_id)?;
            if let Some(gallery_path) = gallery {
                let gallery = AssetGallery::load(&gallery_path)?;
                retrieve_assets(&mut completed, &mask, &schema, &gallery)?;
            }
            let json = completed.to_json_string(&schema);
            match out_file {
                Some(path) => {
                    std::fs::write(&path, format!("{json}\n"))?;
                    println!("completed document written to {}", path.display());
                }
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Render { input, out_file } => {
            let (schema_path, ..) = cfg.resolved_corpus_paths()?;
            let schema = Schema::load(&schema_path)?;
            let text = std::fs::read_to_string(&input)?;
            let doc = Document::from_json_str(text.trim(), &schema)?;
            let svg = render_svg(&doc, &schema, &RenderStyle::default())?;
            let path = out_file.unwrap_or_else(|| {
                cfg.out_dir.join(format!("{}.svg", doc.id.replace(['/', '\\'], "_")))
            });
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, svg)?;
            println!("svg written to {}", path.display());
            Ok(())
        }
        Command::GradCheck { probes, eps, tol } => {
            let report = grad_check_command(&cfg, probes, eps, tol)?;
            println!("{report}");
            if !report.passed() {
                bail!("gradient check failed: max relative error {:.3e}", report.max_rel_error);
            }
            Ok(())
        }
    }
}

fn read_manifest(cfg: &RunConfig) -> Option<Manifest> {
    let dir = cfg
        .data_dir
        .clone()
        .or_else(|| cfg.corpus.schema.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)))?;
    let text = std::fs::read_to_string(dir.join("manifest.json")).ok()?;
    serde_json::from_str(&text).ok()
}

/// Replaces predicted numerical fields by their nearest gallery asset and
/// logs the retrieved ids.
fn retrieve_assets(
    doc: &mut Document,
    mask: &MaskSet,
    schema: &Schema,
    gallery: &AssetGallery,
) -> Result<()> {
    for (i, k) in mask.iter() {
        let spec = schema.attr(k);
        let FieldValue::Numerical(query) = doc.elements[i].field(k).clone() else {
            continue;
        };
        let asset_id = nn_retrieve(&query, gallery, &spec.name)?;
        let asset = gallery
            .assets(&spec.name)
            .and_then(|assets| assets.iter().find(|a| a.asset_id == asset_id))
            .expect("retrieved id exists");
        log::info!(
            "element {i} {}: retrieved asset {} ({})",
            spec.name,
            asset_id,
            asset.payload
        );
        doc.elements[i].set_field(k, FieldValue::Numerical(asset.vector.clone()));
    }
    Ok(())
}

fn grad_check_command(
    cfg: &RunConfig,
    probes: usize,
    eps: f64,
    tol: f64,
) -> Result<flexdoc::tensor::GradCheckReport> {
    use flexdoc::synth::GeneratorConfig;
    let gen_cfg = GeneratorConfig {
        num_train: 4,
        num_val: 0,
        num_test: 0,
        seed: cfg.seed.unwrap_or(7),
        ..cfg.generator.clone()
    };
    let corpus = generate(&gen_cfg)?;
    let model = Model::new(corpus.schema.clone(), cfg.model.clone(), gen_cfg.seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(gen_cfg.seed);
    let triplets: Vec<_> = corpus
        .train
        .iter()
        .map(|d| flexdoc::mask::build_triplet(d, &corpus.schema, &TaskSpec::Random { p: 0.3 }, &mut rng))
        .collect::<flexdoc::Result<_>>()?;
    let params = model.params.tensors();
    let value_fn = |tensors: &indexmap::IndexMap<String, flexdoc::tensor::Tensor>| {
        model
            .loss_value_with(tensors, &triplets, None)
            .expect("loss evaluation")
    };
    let grad_fn = |_: &indexmap::IndexMap<String, flexdoc::tensor::Tensor>| {
        let mut inner_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (_, grads) = model
            .batch_gradients(&triplets, None, false, &mut inner_rng)
            .expect("gradient evaluation");
        grads
    };
    Ok(flexdoc::tensor::grad_check(&params, value_fn, grad_fn, probes, eps, tol, &mut rng))
}
