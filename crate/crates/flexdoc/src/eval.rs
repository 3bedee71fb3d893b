//! Scoring, the per-task evaluation harness, the most-frequent baseline,
//! and the box-placement metrics (IoU, BDE).

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::{build_triplet, MaskSet, TaskSpec};
use crate::model::Model;
use crate::schema::{AttributeGroup, AttributeKind, Document, FieldValue, Schema};
use crate::util::fnv1a64;

/// A model or baseline that completes masked documents. `task` carries the
/// evaluation task so that task-conditioned models can look up their query
/// embedding; baselines ignore it.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict_batch(
        &self,
        inputs: &[Document],
        masks: &[MaskSet],
        task: &TaskSpec,
    ) -> Result<Vec<Document>>;
}

/// Per-field score `s^k`: exact match for categorical fields, cosine
/// similarity mapped to [0, 1] via `(1 + cos) / 2` for numerical fields.
/// A `Null` prediction at a masked field scores zero; a zero-norm vector in
/// the cosine scores 0.5 and is logged.
fn field_score(prediction: &FieldValue, target: &FieldValue) -> Result<f64> {
    match (prediction, target) {
        (FieldValue::Categorical(p), FieldValue::Categorical(t)) => Ok(f64::from(p == t)),
        (FieldValue::Numerical(p), FieldValue::Numerical(t)) => {
            let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            let np: f64 = p.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nt: f64 = t.iter().map(|a| a * a).sum::<f64>().sqrt();
            if np == 0.0 || nt == 0.0 {
                log::warn!("zero-norm vector in cosine score; scoring 0.5");
                return Ok(0.5);
            }
            Ok((1.0 + dot / (np * nt)) / 2.0)
        }
        // wrong kind or Null/Mask predicted at a masked field: a miss
        (FieldValue::Null | FieldValue::Mask | FieldValue::Categorical(_) | FieldValue::Numerical(_), _) => {
            Ok(0.0)
        }
    }
}

/// Mean over the masked fields of the per-field scores (the evaluation
/// score for one document).
pub fn score(prediction: &Document, target: &Document, mask: &MaskSet, schema: &Schema) -> Result<f64> {
    Ok(score_by_group(prediction, target, mask, schema)?.0)
}

/// As [`score`], additionally returning per-attribute-group sums and counts.
pub fn score_by_group(
    prediction: &Document,
    target: &Document,
    mask: &MaskSet,
    schema: &Schema,
) -> Result<(f64, IndexMap<AttributeGroup, (f64, usize)>)> {
    if mask.is_empty() {
        return Err(Error::Eval("score over an empty mask".into()));
    }
    let mut total = 0.0;
    let mut groups: IndexMap<AttributeGroup, (f64, usize)> = IndexMap::new();
    for (i, k) in mask.iter() {
        let spec = schema.attr(k);
        let tv = target.elements[i].field(k);
        if tv.is_null() || tv.is_mask() {
            return Err(Error::Eval(format!(
                "target `{}` has a special token at masked field ({i}, {})",
                target.id, spec.name
            )));
        }
        let s = field_score(prediction.elements[i].field(k), tv)?;
        total += s;
        let entry = groups.entry(spec.group).or_insert((0.0, 0));
        entry.0 += s;
        entry.1 += 1;
    }
    Ok((total / mask.len() as f64, groups))
}

/// Per-attribute statistics of a training split: category counts and
/// numerical running means.
#[derive(Debug, Clone)]
pub struct FrequencyTable {
    counts: Vec<Option<Vec<u64>>>,
    means: Vec<Option<(Vec<f64>, u64)>>,
}

impl FrequencyTable {
    pub fn build(docs: &[Document], schema: &Schema) -> FrequencyTable {
        let mut counts: Vec<Option<Vec<u64>>> = Vec::new();
        let mut means: Vec<Option<(Vec<f64>, u64)>> = Vec::new();
        for spec in schema.attributes() {
            match spec.kind {
                AttributeKind::Categorical { cardinality } => {
                    counts.push(Some(vec![0; cardinality]));
                    means.push(None);
                }
                AttributeKind::Numerical { dim } => {
                    counts.push(None);
                    means.push(Some((vec![0.0; dim], 0)));
                }
            }
        }
        for doc in docs {
            for element in &doc.elements {
                for k in 0..schema.len() {
                    match element.field(k) {
                        FieldValue::Categorical(id) => {
                            counts[k].as_mut().unwrap()[*id] += 1;
                        }
                        FieldValue::Numerical(v) => {
                            let (sum, n) = means[k].as_mut().unwrap();
                            for (s, x) in sum.iter_mut().zip(v) {
                                *s += x;
                            }
                            *n += 1;
                        }
                        FieldValue::Null | FieldValue::Mask => {}
                    }
                }
            }
        }
        FrequencyTable { counts, means }
    }

    /// Most frequent category; ties break to the lowest id.
    pub fn mode(&self, attr: usize) -> Result<usize> {
        let counts = self.counts[attr]
            .as_ref()
            .ok_or_else(|| Error::Eval(format!("attribute {attr} is not categorical")))?;
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::Eval(format!("attribute {attr} absent from the frequency table")));
        }
        let mut best = 0;
        for (i, &c) in counts.iter().enumerate().skip(1) {
            if c > counts[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn mean(&self, attr: usize) -> Result<Vec<f64>> {
        let (sum, n) = self.means[attr]
            .as_ref()
            .ok_or_else(|| Error::Eval(format!("attribute {attr} is not numerical")))?;
        if *n == 0 {
            return Err(Error::Eval(format!("attribute {attr} absent from the frequency table")));
        }
        Ok(sum.iter().map(|s| s / *n as f64).collect())
    }
}

/// Fills each masked categorical field with the training-split mode and
/// each masked numerical field with the training-split mean.
pub fn most_frequent_predict(
    input: &Document,
    mask: &MaskSet,
    table: &FrequencyTable,
    schema: &Schema,
) -> Result<Document> {
    let mut out = input.clone();
    for (i, k) in mask.iter() {
        let value = match schema.attr(k).kind {
            AttributeKind::Categorical { .. } => FieldValue::Categorical(table.mode(k)?),
            AttributeKind::Numerical { .. } => FieldValue::Numerical(table.mean(k)?),
        };
        out.elements[i].set_field(k, value);
    }
    Ok(out)
}

/// The most-frequent baseline as a [`Predictor`].
pub struct MostFrequent {
    pub table: FrequencyTable,
    pub schema: Schema,
}

impl MostFrequent {
    pub fn from_train_split(docs: &[Document], schema: &Schema) -> MostFrequent {
        MostFrequent {
            table: FrequencyTable::build(docs, schema),
            schema: schema.clone(),
        }
    }
}

impl Predictor for MostFrequent {
    fn name(&self) -> String {
        "most-frequent".into()
    }

    fn predict_batch(
        &self,
        inputs: &[Document],
        masks: &[MaskSet],
        _task: &TaskSpec,
    ) -> Result<Vec<Document>> {
        inputs
            .iter()
            .zip(masks)
            .map(|(doc, mask)| most_frequent_predict(doc, mask, &self.table, &self.schema))
            .collect()
    }
}

/// A trained model as a [`Predictor`]. `tasks` maps evaluation tasks to the
/// task-embedding row used during training (only consulted when the model
/// was trained with task embeddings).
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub tasks: Vec<TaskSpec>,
    pub label: String,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Model, tasks: &[TaskSpec], label: impl Into<String>) -> ModelPredictor<'a> {
        ModelPredictor {
            model,
            tasks: tasks.to_vec(),
            label: label.into(),
        }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict_batch(
        &self,
        inputs: &[Document],
        masks: &[MaskSet],
        task: &TaskSpec,
    ) -> Result<Vec<Document>> {
        let task_ids = if self.model.config.use_task_embedding {
            let idx = self
                .tasks
                .iter()
                .position(|t| t.name() == task.name())
                .ok_or_else(|| Error::Eval(format!("task {task} unknown to this model")))?;
            Some(vec![idx; inputs.len()])
        } else {
            None
        };
        self.model.predict_batch(inputs, masks, task_ids)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskScore {
    pub task: String,
    pub mean: f64,
    /// Documents that produced a non-empty mask for this task.
    pub documents: usize,
    pub per_group: IndexMap<String, f64>,
}

/// Table-1-shaped report: one row per model, one column per task.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub model: String,
    pub config_hash: String,
    pub tasks: Vec<TaskScore>,
    pub mean_over_tasks: f64,
}

impl ScoreReport {
    pub fn task(&self, name: &str) -> Option<&TaskScore> {
        self.tasks.iter().find(|t| t.task == name)
    }

    pub fn task_mean(&self, name: &str) -> f64 {
        self.task(name).map(|t| t.mean).unwrap_or(f64::NAN)
    }
}

/// Renders reports as an aligned plain-text table.
pub fn render_table(reports: &[ScoreReport]) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    if reports.is_empty() {
        return out;
    }
    let tasks: Vec<&str> = reports[0].tasks.iter().map(|t| t.task.as_str()).collect();
    let name_width = reports
        .iter()
        .map(|r| r.model.len())
        .max()
        .unwrap()
        .max("model".len());
    write!(out, "{:<name_width$}", "model").unwrap();
    for t in &tasks {
        write!(out, "  {t:>6}").unwrap();
    }
    writeln!(out, "  {:>6}", "mean").unwrap();
    for r in reports {
        write!(out, "{:<name_width$}", r.model).unwrap();
        for t in &tasks {
            write!(out, "  {:>6.3}", r.task_mean(t)).unwrap();
        }
        writeln!(out, "  {:>6.3}", r.mean_over_tasks).unwrap();
    }
    out
}

/// Deterministic per-document evaluation rng, derived from the corpus seed,
/// the document id, and the task name.
pub fn eval_rng(seed: u64, doc_id: &str, task: &TaskSpec) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(doc_id.as_bytes()) ^ fnv1a64(task.name().as_bytes()))
}

/// Evaluates a predictor on a corpus split: one triplet per document per
/// task (fixed seed), documents with empty masks skipped, document scores
/// averaged.
pub fn evaluate(
    predictor: &dyn Predictor,
    docs: &[Document],
    schema: &Schema,
    tasks: &[TaskSpec],
    seed: u64,
    batch_size: usize,
    config_hash: &str,
) -> Result<ScoreReport> {
    assert!(batch_size > 0, "evaluate: batch_size must be positive");
    let mut task_scores = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut inputs = Vec::new();
        let mut masks = Vec::new();
        let mut targets = Vec::new();
        for doc in docs {
            let mut rng = eval_rng(seed, &doc.id, task);
            let triplet = build_triplet(doc, schema, task, &mut rng)?;
            if triplet.mask.is_empty() {
                continue;
            }
            inputs.push(triplet.input);
            masks.push(triplet.mask);
            targets.push(doc);
        }
        let documents = inputs.len();
        let mut sum = 0.0;
        let mut group_acc: IndexMap<AttributeGroup, (f64, usize)> = IndexMap::new();
        for start in (0..documents).step_by(batch_size) {
            let end = (start + batch_size).min(documents);
            let preds = predictor.predict_batch(&inputs[start..end], &masks[start..end], task)?;
            for (j, pred) in preds.iter().enumerate() {
                let idx = start + j;
                let (s, groups) = score_by_group(pred, targets[idx], &masks[idx], schema)?;
                sum += s;
                for (g, (gs, gc)) in groups {
                    let entry = group_acc.entry(g).or_insert((0.0, 0));
                    entry.0 += gs;
                    entry.1 += gc;
                }
            }
        }
        let mean = if documents == 0 { 0.0 } else { sum / documents as f64 };
        let per_group = group_acc
            .into_iter()
            .map(|(g, (s, c))| (g.name().to_string(), s / c.max(1) as f64))
            .collect();
        task_scores.push(TaskScore {
            task: task.name().to_string(),
            mean,
            documents,
            per_group,
        });
    }
    let mean_over_tasks =
        task_scores.iter().map(|t| t.mean).sum::<f64>() / task_scores.len().max(1) as f64;
    Ok(ScoreReport {
        model: predictor.name(),
        config_hash: config_hash.to_string(),
        tasks: task_scores,
        mean_over_tasks,
    })
}

/// Intersection over union of two axis-aligned boxes given as
/// `(left, top, width, height)` in normalized canvas coordinates.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return Ok(0.0);
    }
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    // roundoff in inter vs the closed-form areas can push the ratio a few
    // ulps past 1
    Ok((inter / union).min(1.0))
}

/// Boundary displacement error: mean absolute displacement of the four
/// edges in normalized coordinates.
pub fn bde(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let edges_a = [a[0], a[1], a[0] + a[2], a[1] + a[3]];
    let edges_b = [b[0], b[1], b[0] + b[2], b[1] + b[3]];
    Ok(edges_a
        .iter()
        .zip(&edges_b)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / 4.0)
}

fn check_box(b: [f64; 4]) -> Result<()> {
    if b[2] < 0.0 || b[3] < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "box has negative extent: w={} h={}",
            b[2], b[3]
        )));
    }
    Ok(())
}
