//! The training loops: mini-batch construction by masking-pattern sampling,
//! optimization, per-epoch validation, and best-checkpoint retention.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{evaluate, ModelPredictor};
use crate::mask::{build_triplet, TaskSpec, Triplet};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::schema::{validate, Document, Schema};

use super::{adam_step, OptimizerState, Regime, TrainConfig};

#[derive(Debug, Clone)]
pub struct Corpus {
    pub schema: Schema,
    pub train: Vec<Document>,
    pub val: Vec<Document>,
}

impl Corpus {
    /// Checks every document against the schema; the first violation aborts.
    pub fn validate(&self) -> Result<()> {
        for (split, docs) in [("train", &self.train), ("val", &self.val)] {
            for doc in docs {
                let report = validate(doc, &self.schema);
                if let Some(v) = report.violations.first() {
                    return Err(Error::Train(format!(
                        "{split} document `{}` does not validate: {}",
                        doc.id, v.message
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub task: String,
    pub loss: Option<f64>,
    pub score: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    /// Mean per-document training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub best_val_score: Option<f64>,
}

/// Trains a model under the configured regime. `init` provides the starting
/// weights for EXP-FT. When `out_dir` is given, the final checkpoint and a
/// JSONL training log are written there.
pub fn train(
    corpus: &Corpus,
    tasks: &[TaskSpec],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<Model>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    corpus.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Train("empty training split".into()));
    }

    let training_tasks: Vec<TaskSpec> = match cfg.regime {
        Regime::Imp => vec![TaskSpec::Random { p: cfg.mask_prob_imp }],
        Regime::Exp | Regime::ExpFt => {
            if tasks.is_empty() {
                return Err(Error::Train("explicit multi-task training needs a task list".into()));
            }
            tasks.to_vec()
        }
        Regime::Expert => {
            let name = cfg.expert_task.as_deref().expect("validated");
            vec![name.parse()?]
        }
    };
    // validation always scores the named design tasks; an expert is only
    // accountable for its own task
    let val_tasks: Vec<TaskSpec> = match cfg.regime {
        Regime::Expert => training_tasks.clone(),
        _ => tasks.to_vec(),
    };

    let mut model = match init {
        Some(m) => {
            if cfg.regime != Regime::ExpFt {
                log::info!("initial weights provided for regime {}", cfg.regime);
            }
            if m.schema.hash() != corpus.schema.hash() {
                return Err(Error::Train("initial checkpoint was trained on a different schema".into()));
            }
            if m.config != *model_cfg {
                return Err(Error::Train("initial checkpoint has a different model config".into()));
            }
            m
        }
        None => {
            if cfg.regime == Regime::ExpFt {
                return Err(Error::Train("exp-ft requires an initial checkpoint".into()));
            }
            Model::new(corpus.schema.clone(), model_cfg.clone(), cfg.seed)?
        }
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x53_48_55_46);
    let mut task_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x54_41_53_4b);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4d_41_53_4b);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x44_52_4f_50);
    let eval_seed = cfg.seed ^ 0x45_56_41_4c;

    let mut optimizer = OptimizerState::new(&model.params);
    let mut log_records = Vec::new();
    let mut loss_curve = Vec::new();
    let mut best: Option<(f64, crate::model::ParameterStore)> = None;

    let mut indices: Vec<usize> = (0..corpus.train.len()).collect();
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_docs = 0usize;
        for (step, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let mut triplets: Vec<Triplet> = Vec::with_capacity(chunk.len());
            let mut task_ids: Vec<usize> = Vec::with_capacity(chunk.len());
            for &doc_idx in chunk {
                let doc = &corpus.train[doc_idx];
                if let Some((triplet, task_idx)) =
                    sample_triplet(doc, &corpus.schema, &training_tasks, &mut task_rng, &mut mask_rng)?
                {
                    triplets.push(triplet);
                    task_ids.push(task_idx);
                }
            }
            if triplets.is_empty() {
                continue;
            }
            let ids = model.config.use_task_embedding.then(|| task_ids.clone());
            let (loss, grads) = model
                .batch_gradients(&triplets, ids, true, &mut dropout_rng)
                .map_err(|e| Error::Train(format!("epoch {epoch} step {step}: {e}")))?;
            adam_step(&mut model.params, &grads, &mut optimizer, cfg);
            epoch_loss += loss * triplets.len() as f64;
            epoch_docs += triplets.len();
        }
        let mean_loss = epoch_loss / epoch_docs.max(1) as f64;
        loss_curve.push(mean_loss);
        log_records.push(LogRecord {
            epoch,
            split: "train".into(),
            task: "ALL".into(),
            loss: Some(mean_loss),
            score: None,
        });
        log::debug!("epoch {epoch}: train loss {mean_loss:.4}");

        let run_val = cfg.val_interval > 0
            && !corpus.val.is_empty()
            && ((epoch + 1) % cfg.val_interval == 0 || epoch + 1 == cfg.epochs);
        if run_val {
            let predictor = ModelPredictor::new(&model, &training_tasks, "train-val");
            let report = evaluate(
                &predictor,
                &corpus.val,
                &corpus.schema,
                &val_tasks,
                eval_seed,
                cfg.batch_size,
                "",
            )?;
            for t in &report.tasks {
                log_records.push(LogRecord {
                    epoch,
                    split: "val".into(),
                    task: t.task.clone(),
                    loss: None,
                    score: Some(t.mean),
                });
            }
            let mean = report.mean_over_tasks;
            log_records.push(LogRecord {
                epoch,
                split: "val".into(),
                task: "MEAN".into(),
                loss: None,
                score: Some(mean),
            });
            if best.as_ref().map_or(true, |(b, _)| mean > *b) {
                best = Some((mean, model.params.clone()));
            }
        }
    }

    let best_val_score = best.as_ref().map(|(s, _)| *s);
    if let Some((_, params)) = best {
        model.params = params;
    }
    // checkpoints carry an f32 payload; quantizing the live model first
    // makes save -> load -> evaluate reproduce scores bit-identically
    model.params.quantize_f32();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&model, &dir.join("model.ckpt"))?;
        let mut log_text = String::new();
        for record in &log_records {
            log_text.push_str(&serde_json::to_string(record)?);
            log_text.push('\n');
        }
        std::fs::write(dir.join("train_log.jsonl"), log_text)?;
    }

    Ok(TrainOutcome {
        model,
        log: log_records,
        loss_curve,
        best_val_score,
    })
}

/// Trains a per-task expert: identical to [`train`] with a single fixed
/// task.
pub fn train_expert(
    corpus: &Corpus,
    task: &TaskSpec,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        regime: Regime::Expert,
        expert_task: Some(task.name().to_string()),
        ..base.clone()
    };
    train(corpus, std::slice::from_ref(task), model_cfg, &cfg, None, out_dir)
}

/// Draws a task and builds its triplet; a degenerate (empty-mask) draw
/// resamples among the remaining tasks. Returns the triplet and the index
/// of the chosen task, or None when every task is degenerate for this
/// document.
fn sample_triplet(
    doc: &Document,
    schema: &Schema,
    tasks: &[TaskSpec],
    task_rng: &mut ChaCha8Rng,
    mask_rng: &mut ChaCha8Rng,
) -> Result<Option<(Triplet, usize)>> {
    let mut candidates: Vec<usize> = (0..tasks.len()).collect();
    while !candidates.is_empty() {
        let pick = task_rng.gen_range(0..candidates.len());
        let task_idx = candidates.swap_remove(pick);
        let triplet = build_triplet(doc, schema, &tasks[task_idx], mask_rng)?;
        if !triplet.mask.is_empty() {
            return Ok(Some((triplet, task_idx)));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::score;
    use crate::mask::MaskSet;
    use crate::schema::tests::{element_of_type, ten_attr_schema};
    use crate::schema::FieldValue;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 32,
            ..ModelConfig::default()
        }
    }

    fn tiny_corpus(schema: &Schema, n: usize) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let docs: Vec<Document> = (0..n)
            .map(|i| {
                let len = 2 + i % 3;
                let types: Vec<usize> = (0..len).map(|_| rng.gen_range(0..3)).collect();
                let mut doc = Document::new(
                    format!("doc-{i}"),
                    types.iter().map(|&t| element_of_type(schema, t)).collect(),
                );
                // vary a couple of fields so documents differ
                let color = schema.index_of("color").unwrap();
                doc.elements[0].set_field(color, FieldValue::Categorical(i % 16));
                doc
            })
            .collect();
        Corpus {
            schema: schema.clone(),
            train: docs.clone(),
            val: docs.into_iter().take(2).collect(),
        }
    }

    fn fast_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            regime: Regime::Exp,
            batch_size: 8,
            epochs,
            lr: 1e-3,
            val_interval: 0,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_seeds_reproduce_identical_loss_curves() {
        let schema = ten_attr_schema();
        let corpus = tiny_corpus(&schema, 6);
        let tasks = TaskSpec::standard_tasks();
        let cfg = fast_cfg(3);
        let a = train(&corpus, &tasks, &tiny_model_cfg(), &cfg, None, None).unwrap();
        let b = train(&corpus, &tasks, &tiny_model_cfg(), &cfg, None, None).unwrap();
        assert_eq!(a.loss_curve.len(), 3);
        for (x, y) in a.loss_curve.iter().zip(&b.loss_curve) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn loss_decreases_over_early_epochs() {
        let schema = ten_attr_schema();
        let corpus = tiny_corpus(&schema, 32);
        let tasks = TaskSpec::standard_tasks();
        let out = train(&corpus, &tasks, &tiny_model_cfg(), &fast_cfg(12), None, None).unwrap();
        assert!(out.loss_curve.iter().all(|l| l.is_finite()));
        // per-epoch task resampling is noisy at this scale: compare the
        // first two epochs against the last two
        let early = (out.loss_curve[0] + out.loss_curve[1]) / 2.0;
        let late = (out.loss_curve[10] + out.loss_curve[11]) / 2.0;
        assert!(late < early, "no improvement: {:?}", out.loss_curve);
    }

    #[test]
    fn exp_ft_without_checkpoint_is_an_error() {
        let schema = ten_attr_schema();
        let corpus = tiny_corpus(&schema, 4);
        let cfg = TrainConfig {
            regime: Regime::ExpFt,
            ..fast_cfg(1)
        };
        let err = train(&corpus, &TaskSpec::standard_tasks(), &tiny_model_cfg(), &cfg, None, None)
            .unwrap_err();
        assert!(err.to_string().contains("initial checkpoint"), "{err}");
    }

    #[test]
    fn degenerate_tasks_are_resampled() {
        let schema = ten_attr_schema();
        // no image elements anywhere: IMG masks are always empty
        let docs: Vec<Document> = (0..6)
            .map(|i| {
                Document::new(
                    format!("txt-{i}"),
                    vec![element_of_type(&schema, 0), element_of_type(&schema, 2)],
                )
            })
            .collect();
        let corpus = Corpus {
            schema: schema.clone(),
            train: docs,
            val: Vec::new(),
        };
        let tasks = vec![TaskSpec::Img, TaskSpec::Elem];
        let out = train(&corpus, &tasks, &tiny_model_cfg(), &fast_cfg(2), None, None);
        assert!(out.is_ok());
    }

    #[test]
    fn expert_overfits_a_handful_of_documents() {
        let schema = ten_attr_schema();
        let mut corpus = tiny_corpus(&schema, 4);
        corpus.val = Vec::new();
        let cfg = TrainConfig {
            lr: 3e-3,
            ..fast_cfg(150)
        };
        let out = train_expert(&corpus, &TaskSpec::Elem, &tiny_model_cfg(), &cfg, None).unwrap();
        // reproduce held-out masked fields on the training documents
        let mut total = 0.0;
        let mut count = 0;
        for doc in &corpus.train {
            let mut rng = crate::eval::eval_rng(99, &doc.id, &TaskSpec::Elem);
            let t = build_triplet(doc, &schema, &TaskSpec::Elem, &mut rng).unwrap();
            let pred = out.model.predict(&t.input, &t.mask, None).unwrap();
            total += score(&pred, &t.target, &t.mask, &schema).unwrap();
            count += 1;
        }
        let mean = total / count as f64;
        assert!(mean >= 0.9, "overfit train score {mean}");
    }

    #[test]
    fn validation_selects_and_persists_a_checkpoint() {
        let schema = ten_attr_schema();
        let corpus = tiny_corpus(&schema, 6);
        let tasks = TaskSpec::standard_tasks();
        let cfg = TrainConfig {
            val_interval: 2,
            ..fast_cfg(4)
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&corpus, &tasks, &tiny_model_cfg(), &cfg, None, Some(dir.path())).unwrap();
        assert!(out.best_val_score.is_some());
        assert!(dir.path().join("model.ckpt").exists());
        let log_text = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert!(log_text.lines().count() >= 4);
        // the saved checkpoint reloads against the same schema
        let loaded = crate::model::load_checkpoint(&dir.path().join("model.ckpt"), &schema).unwrap();
        for (name, p) in out.model.params.iter() {
            assert_eq!(&p.tensor, loaded.params.get(name), "parameter {name}");
        }
        // predictions from the loaded model match the in-memory model
        let doc = &corpus.train[0];
        let mut rng = crate::eval::eval_rng(1, &doc.id, &TaskSpec::Attr);
        let t = build_triplet(doc, &schema, &TaskSpec::Attr, &mut rng).unwrap();
        let a = out.model.predict(&t.input, &t.mask, None).unwrap();
        let b = loaded.predict(&t.input, &t.mask, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn imp_regime_trains_with_random_masks() {
        let schema = ten_attr_schema();
        let corpus = tiny_corpus(&schema, 6);
        let cfg = TrainConfig {
            regime: Regime::Imp,
            ..fast_cfg(2)
        };
        let out = train(&corpus, &TaskSpec::standard_tasks(), &tiny_model_cfg(), &cfg, None, None).unwrap();
        assert_eq!(out.loss_curve.len(), 2);
    }

    #[test]
    fn loss_masking_ignores_out_of_mask_targets() {
        // tape loss agrees with the straight-line loss and does not look at
        // fields outside the mask
        let schema = ten_attr_schema();
        let model = Model::new(schema.clone(), tiny_model_cfg(), 1).unwrap();
        let doc = Document::new(
            "m",
            vec![element_of_type(&schema, 0), element_of_type(&schema, 2)],
        );
        let color = schema.index_of("color").unwrap();
        let mut mask = MaskSet::new();
        mask.insert(0, color);
        let input = crate::mask::apply_mask(&doc, &mask);
        let mut target2 = doc.clone();
        target2.elements[1].set_field(color, FieldValue::Categorical(3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t1 = Triplet { input: input.clone(), target: doc, mask: mask.clone() };
        let t2 = Triplet { input, target: target2, mask };
        let (l1, _) = model.batch_gradients(std::slice::from_ref(&t1), None, false, &mut rng).unwrap();
        let (l2, _) = model.batch_gradients(std::slice::from_ref(&t2), None, false, &mut rng).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }
}
