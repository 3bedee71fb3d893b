//! Forward pass and prediction.
//!
//! Every field of an element is embedded by a per-attribute encoder and the
//! contributions are summed into one latent per element. Special tokens are
//! handled like categorical values: categorical attributes reserve two
//! extra table rows for `[NULL]`/`[MASK]`, numerical attributes carry a
//! dedicated two-row table next to their linear projection. Transformer
//! blocks (pre-norm) mix the S element latents; padded positions are
//! excluded from attention by a large negative logit bias. A single linear
//! head per attribute decodes the latents back into field space.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::MaskSet;
use crate::schema::{AttributeKind, Document, FieldValue, Schema};
use crate::tensor::{Tape, Tensor, Var};

use super::{init_params, ModelConfig, ParameterStore};

/// Attention bias at padded key positions. exp(x - max) underflows to zero
/// for any real max, so padded keys receive exactly zero weight.
const PAD_BIAS: f64 = -1e9;

enum AttrPrep {
    Categorical {
        ids: Vec<usize>,
        rows: Vec<usize>,
        targets: Vec<usize>,
    },
    Numerical {
        values: Tensor,
        special_ids: Vec<usize>,
        real_mask: Vec<f64>,
        special_mask: Vec<f64>,
        rows: Vec<usize>,
        targets: Option<Tensor>,
    },
}

/// Encoded inputs for one mini-batch: everything the forward pass and the
/// loss need, laid out as flat arrays over `batch x position`.
pub struct BatchPrep {
    pub batch: usize,
    pub s_max: usize,
    doc_lens: Vec<usize>,
    attrs: Vec<AttrPrep>,
    task_ids: Option<Vec<usize>>,
    num_masked: usize,
}

impl BatchPrep {
    pub fn from_triplets(
        schema: &Schema,
        triplets: &[crate::mask::Triplet],
        task_ids: Option<Vec<usize>>,
    ) -> Result<BatchPrep> {
        let inputs: Vec<&Document> = triplets.iter().map(|t| &t.input).collect();
        let masks: Vec<&MaskSet> = triplets.iter().map(|t| &t.mask).collect();
        let targets: Vec<&Document> = triplets.iter().map(|t| &t.target).collect();
        BatchPrep::build(schema, &inputs, &masks, Some(&targets), task_ids)
    }

    pub fn for_inference(
        schema: &Schema,
        inputs: &[&Document],
        masks: &[&MaskSet],
        task_ids: Option<Vec<usize>>,
    ) -> Result<BatchPrep> {
        BatchPrep::build(schema, inputs, masks, None, task_ids)
    }

    fn build(
        schema: &Schema,
        inputs: &[&Document],
        masks: &[&MaskSet],
        targets: Option<&[&Document]>,
        task_ids: Option<Vec<usize>>,
    ) -> Result<BatchPrep> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        assert_eq!(inputs.len(), masks.len(), "one mask per document");
        if let Some(ids) = &task_ids {
            assert_eq!(ids.len(), inputs.len(), "one task id per document");
        }
        let batch = inputs.len();
        let s_max = inputs.iter().map(|d| d.len()).max().unwrap();
        let doc_lens: Vec<usize> = inputs.iter().map(|d| d.len()).collect();
        let rows_total = batch * s_max;

        let mut attrs = Vec::with_capacity(schema.len());
        let mut num_masked = 0usize;
        for (k, spec) in schema.attributes().iter().enumerate() {
            match spec.kind {
                AttributeKind::Categorical { cardinality } => {
                    let mut ids = vec![cardinality; rows_total]; // Null id
                    for (b, doc) in inputs.iter().enumerate() {
                        for (i, element) in doc.elements.iter().enumerate() {
                            ids[b * s_max + i] = match element.field(k) {
                                FieldValue::Categorical(v) => *v,
                                FieldValue::Null => cardinality,
                                FieldValue::Mask => cardinality + 1,
                                FieldValue::Numerical(_) => {
                                    return Err(Error::InvalidArgument(format!(
                                        "document `{}`: vector value at categorical attribute `{}`",
                                        doc.id, spec.name
                                    )))
                                }
                            };
                        }
                    }
                    let mut rows = Vec::new();
                    let mut tgts = Vec::new();
                    for (b, mask) in masks.iter().enumerate() {
                        for (i, kk) in mask.iter() {
                            if kk != k {
                                continue;
                            }
                            rows.push(b * s_max + i);
                            if let Some(target_docs) = targets {
                                let tv = target_docs[b].elements[i].field(k);
                                let id = tv.as_categorical().ok_or_else(|| {
                                    Error::InvalidArgument(format!(
                                        "target `{}`: masked field ({i}, {}) is not categorical",
                                        target_docs[b].id, spec.name
                                    ))
                                })?;
                                tgts.push(id);
                            }
                        }
                    }
                    num_masked += rows.len();
                    attrs.push(AttrPrep::Categorical { ids, rows, targets: tgts });
                }
                AttributeKind::Numerical { dim } => {
                    let mut values = Tensor::zeros(vec![rows_total, dim]);
                    let mut special_ids = vec![0usize; rows_total]; // Null row
                    let mut real_mask = vec![0.0; rows_total];
                    let mut special_mask = vec![1.0; rows_total]; // padding is Null
                    for (b, doc) in inputs.iter().enumerate() {
                        for (i, element) in doc.elements.iter().enumerate() {
                            let row = b * s_max + i;
                            match element.field(k) {
                                FieldValue::Numerical(v) => {
                                    if v.len() != dim {
                                        return Err(Error::InvalidArgument(format!(
                                            "document `{}`: wrong vector length at `{}`",
                                            doc.id, spec.name
                                        )));
                                    }
                                    values.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(v);
                                    real_mask[row] = 1.0;
                                    special_mask[row] = 0.0;
                                }
                                FieldValue::Null => special_ids[row] = 0,
                                FieldValue::Mask => special_ids[row] = 1,
                                FieldValue::Categorical(_) => {
                                    return Err(Error::InvalidArgument(format!(
                                        "document `{}`: categorical value at numerical attribute `{}`",
                                        doc.id, spec.name
                                    )))
                                }
                            }
                        }
                    }
                    let mut rows = Vec::new();
                    let mut tgt_data = Vec::new();
                    for (b, mask) in masks.iter().enumerate() {
                        for (i, kk) in mask.iter() {
                            if kk != k {
                                continue;
                            }
                            rows.push(b * s_max + i);
                            if let Some(target_docs) = targets {
                                let tv = target_docs[b].elements[i].field(k);
                                let v = tv.as_numerical().ok_or_else(|| {
                                    Error::InvalidArgument(format!(
                                        "target `{}`: masked field ({i}, {}) is not numerical",
                                        target_docs[b].id, spec.name
                                    ))
                                })?;
                                tgt_data.extend_from_slice(v);
                            }
                        }
                    }
                    num_masked += rows.len();
                    let tgts = targets.map(|_| Tensor::new(vec![rows.len(), dim], tgt_data));
                    attrs.push(AttrPrep::Numerical {
                        values,
                        special_ids,
                        real_mask,
                        special_mask,
                        rows,
                        targets: tgts,
                    });
                }
            }
        }
        Ok(BatchPrep {
            batch,
            s_max,
            doc_lens,
            attrs,
            task_ids,
            num_masked,
        })
    }

    pub fn num_masked(&self) -> usize {
        self.num_masked
    }

    /// Attention logit bias, zero at attendable keys and a large negative
    /// value at padded keys: `[batch * heads, s', s']` where `s'` includes
    /// the optional task position.
    fn key_bias(&self, heads: usize, with_task: bool) -> Tensor {
        let off = usize::from(with_task);
        let sp = self.s_max + off;
        let mut data = vec![0.0; self.batch * heads * sp * sp];
        for (b, &len) in self.doc_lens.iter().enumerate() {
            for h in 0..heads {
                let base = (b * heads + h) * sp * sp;
                for q in 0..sp {
                    for kk in 0..sp {
                        let real = if with_task && kk == 0 { true } else { kk - off < len };
                        if !real {
                            data[base + q * sp + kk] = PAD_BIAS;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.batch * heads, sp, sp], data)
    }
}

/// The document model: configuration, schema, and parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: Schema,
    pub params: ParameterStore,
}

fn bind_tensors(
    tape: &mut Tape,
    tensors: impl Iterator<Item = (String, Tensor)>,
    requires_grad: bool,
) -> IndexMap<String, Var> {
    tensors
        .map(|(name, tensor)| (name, tape.leaf(tensor, requires_grad)))
        .collect()
}

impl Model {
    pub fn new(schema: Schema, config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let params = init_params(&schema, &config, seed);
        Ok(Model { config, schema, params })
    }

    pub fn from_parts(schema: Schema, config: ModelConfig, params: ParameterStore) -> Result<Model> {
        config.validate()?;
        Ok(Model { config, schema, params })
    }

    /// Inserts every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> IndexMap<String, Var> {
        bind_tensors(
            tape,
            self.params.iter().map(|(n, p)| (n.clone(), p.tensor.clone())),
            requires_grad,
        )
    }

    /// Encoder: per-attribute embeddings summed per element -> `[B*S, d]`.
    fn encode(
        &self,
        tape: &mut Tape,
        bound: &IndexMap<String, Var>,
        prep: &BatchPrep,
    ) -> Var {
        let contribs = self.encode_contributions(tape, bound, prep);
        let mut h = tape.add_n(&contribs);
        if self.config.use_positional_embedding {
            assert!(
                prep.s_max <= self.config.max_elements,
                "batch length {} exceeds positional table {}",
                prep.s_max,
                self.config.max_elements
            );
            let pos_ids: Vec<usize> = (0..prep.batch * prep.s_max).map(|r| r % prep.s_max).collect();
            let pos = tape.embedding_lookup(bound["enc.pos.table"], &pos_ids);
            h = tape.add(h, pos);
        }
        h
    }

    fn encode_contributions(
        &self,
        tape: &mut Tape,
        bound: &IndexMap<String, Var>,
        prep: &BatchPrep,
    ) -> Vec<Var> {
        let mut contribs = Vec::new();
        for (spec, attr) in self.schema.attributes().iter().zip(&prep.attrs) {
            match attr {
                AttrPrep::Categorical { ids, .. } => {
                    let table = bound[&format!("enc.{}.table", spec.name)];
                    contribs.push(tape.embedding_lookup(table, ids));
                }
                AttrPrep::Numerical {
                    values,
                    special_ids,
                    real_mask,
                    special_mask,
                    ..
                } => {
                    let vals = tape.constant(values.clone());
                    let proj = bound[&format!("enc.{}.proj", spec.name)];
                    let projected = tape.matmul(vals, proj);
                    contribs.push(tape.mul_rowmask(projected, real_mask));
                    let table = bound[&format!("enc.{}.special", spec.name)];
                    let special = tape.embedding_lookup(table, special_ids);
                    contribs.push(tape.mul_rowmask(special, special_mask));
                }
            }
        }
        contribs
    }

    fn layer_norm_affine(
        &self,
        tape: &mut Tape,
        bound: &IndexMap<String, Var>,
        x: Var,
        prefix: &str,
    ) -> Var {
        let normed = tape.layer_norm_last(x, 1e-6);
        let scaled = tape.mul_bias(normed, bound[&format!("{prefix}.gamma")]);
        tape.add_bias(scaled, bound[&format!("{prefix}.beta")])
    }

    fn linear(
        &self,
        tape: &mut Tape,
        bound: &IndexMap<String, Var>,
        x: Var,
        w: &str,
        b: &str,
    ) -> Var {
        let prod = tape.matmul(x, bound[w]);
        tape.add_bias(prod, bound[b])
    }

    /// Full forward pass: encoder, transformer blocks, final norm.
    /// Returns element latents `[B * S, d]` (the task position, when
    /// enabled, is already dropped).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &IndexMap<String, Var>,
        prep: &BatchPrep,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Var {
        let cfg = &self.config;
        let (b, s, d) = (prep.batch, prep.s_max, cfg.d_model);
        let with_task = cfg.use_task_embedding;
        if with_task {
            assert!(prep.task_ids.is_some(), "task ids required when task embedding is enabled");
        }

        let h = self.encode(tape, bound, prep);
        let mut x = tape.reshape(h, vec![b, s, d]);
        if with_task {
            let ids = prep.task_ids.as_ref().unwrap();
            let task_rows = tape.embedding_lookup(bound["enc.task.table"], ids);
            let task_rows = tape.reshape(task_rows, vec![b, 1, d]);
            x = tape.concat(1, task_rows, x);
        }
        let sp = s + usize::from(with_task);
        let key_bias = cfg.use_attention.then(|| prep.key_bias(cfg.num_heads, with_task));
        let dh = d / cfg.num_heads;
        let p = cfg.dropout;

        for l in 0..cfg.num_layers {
            if cfg.use_attention {
                let xn = self.layer_norm_affine(tape, bound, x, &format!("layer{l}.ln1"));
                let x2 = tape.reshape(xn, vec![b * sp, d]);
                let q = self.linear(tape, bound, x2, &format!("layer{l}.attn.wq"), &format!("layer{l}.attn.bq"));
                let kk = self.linear(tape, bound, x2, &format!("layer{l}.attn.wk"), &format!("layer{l}.attn.bk"));
                let v = self.linear(tape, bound, x2, &format!("layer{l}.attn.wv"), &format!("layer{l}.attn.bv"));
                let q = tape.reshape(q, vec![b, sp, d]);
                let kk = tape.reshape(kk, vec![b, sp, d]);
                let v = tape.reshape(v, vec![b, sp, d]);
                let q = tape.split_heads(q, cfg.num_heads);
                let kk = tape.split_heads(kk, cfg.num_heads);
                let v = tape.split_heads(v, cfg.num_heads);
                let kt = tape.transpose_last2(kk);
                let scores = tape.bmm(q, kt);
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let scores = tape.add_const(scores, key_bias.as_ref().unwrap());
                let probs = tape.softmax_last(scores);
                let probs = tape.dropout(probs, p, train, rng);
                let ctx = tape.bmm(probs, v);
                let ctx = tape.merge_heads(ctx, cfg.num_heads);
                let ctx2 = tape.reshape(ctx, vec![b * sp, d]);
                let out = self.linear(tape, bound, ctx2, &format!("layer{l}.attn.wo"), &format!("layer{l}.attn.bo"));
                let out = tape.dropout(out, p, train, rng);
                let out3 = tape.reshape(out, vec![b, sp, d]);
                x = tape.add(x, out3);
            }
            let xn = self.layer_norm_affine(tape, bound, x, &format!("layer{l}.ln2"));
            let x2 = tape.reshape(xn, vec![b * sp, d]);
            let h1 = self.linear(tape, bound, x2, &format!("layer{l}.ffn.w1"), &format!("layer{l}.ffn.b1"));
            let h1 = tape.gelu(h1);
            let h2 = self.linear(tape, bound, h1, &format!("layer{l}.ffn.w2"), &format!("layer{l}.ffn.b2"));
            let h2 = tape.dropout(h2, p, train, rng);
            let h3 = tape.reshape(h2, vec![b, sp, d]);
            x = tape.add(x, h3);
        }
        x = self.layer_norm_affine(tape, bound, x, "final_ln");
        if with_task {
            x = tape.slice(x, 1, 1, s);
        }
        tape.reshape(x, vec![b * s, d])
    }

    /// Reconstruction loss over the masked fields: softmax cross-entropy
    /// for categorical attributes, per-field mean squared error for
    /// numerical ones, summed per document and averaged over the batch.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        bound: &IndexMap<String, Var>,
        h_dec: Var,
        prep: &BatchPrep,
    ) -> Result<Var> {
        if prep.num_masked == 0 {
            return Err(Error::Train("loss over an empty mask set".into()));
        }
        let mut terms = Vec::new();
        for (spec, attr) in self.schema.attributes().iter().zip(&prep.attrs) {
            match attr {
                AttrPrep::Categorical { rows, targets, .. } => {
                    if rows.is_empty() {
                        continue;
                    }
                    let g = tape.gather_rows(h_dec, rows);
                    let logits = self.linear(tape, bound, g, &format!("dec.{}.w", spec.name), &format!("dec.{}.b", spec.name));
                    terms.push(tape.cross_entropy_sum(logits, targets));
                }
                AttrPrep::Numerical { rows, targets, .. } => {
                    if rows.is_empty() {
                        continue;
                    }
                    let g = tape.gather_rows(h_dec, rows);
                    let pred = self.linear(tape, bound, g, &format!("dec.{}.w", spec.name), &format!("dec.{}.b", spec.name));
                    let target = targets.as_ref().expect("training prep carries targets");
                    terms.push(tape.mse_sum_row_mean(pred, target));
                }
            }
        }
        let total = tape.add_n(&terms);
        Ok(tape.scale(total, 1.0 / prep.batch as f64))
    }

    /// One training forward/backward: returns the batch loss and per-name
    /// gradients (zero tensors for parameters the loss does not reach).
    pub fn batch_gradients(
        &self,
        triplets: &[crate::mask::Triplet],
        task_ids: Option<Vec<usize>>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, IndexMap<String, Tensor>)> {
        let prep = BatchPrep::from_triplets(&self.schema, triplets, task_ids)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let h_dec = self.forward(&mut tape, &bound, &prep, train, rng);
        let loss = self.loss_tape(&mut tape, &bound, h_dec, &prep)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Train(format!("non-finite loss {loss_value}")));
        }
        let mut grads = tape.backward(loss)?;
        let out = bound
            .iter()
            .map(|(name, &var)| {
                let g = grads
                    .take(var)
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(name).shape().to_vec()));
                (name.clone(), g)
            })
            .collect();
        Ok((loss_value, out))
    }

    /// Loss value under an alternative parameter assignment; used by the
    /// finite-difference gradient checker.
    pub fn loss_value_with(
        &self,
        tensors: &IndexMap<String, Tensor>,
        triplets: &[crate::mask::Triplet],
        task_ids: Option<Vec<usize>>,
    ) -> Result<f64> {
        let prep = BatchPrep::from_triplets(&self.schema, triplets, task_ids)?;
        let mut tape = Tape::new();
        // frozen leaves: no backward closures are recorded anywhere
        let bound = bind_tensors(&mut tape, tensors.iter().map(|(n, t)| (n.clone(), t.clone())), false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h_dec = self.forward(&mut tape, &bound, &prep, false, &mut rng);
        let loss = self.loss_tape(&mut tape, &bound, h_dec, &prep)?;
        Ok(tape.value(loss).item())
    }

    /// Completes a document: masked categorical fields take the argmax over
    /// the head logits (ties to the lowest id), masked numerical fields take
    /// the raw head output, everything else is copied from the input.
    ///
    /// Applicability follows the TYPE field: when TYPE itself is masked its
    /// logits decide the element's type first, and masked fields that do
    /// not apply to the predicted type come back as `Null`.
    pub fn predict(&self, input: &Document, mask: &MaskSet, task_id: Option<usize>) -> Result<Document> {
        let mut out = self.predict_batch(
            std::slice::from_ref(input),
            std::slice::from_ref(mask),
            task_id.map(|t| vec![t]),
        )?;
        Ok(out.pop().unwrap())
    }

    pub fn predict_batch(
        &self,
        inputs: &[Document],
        masks: &[MaskSet],
        task_ids: Option<Vec<usize>>,
    ) -> Result<Vec<Document>> {
        for (doc, mask) in inputs.iter().zip(masks) {
            check_mask_consistency(doc, mask, &self.schema)?;
        }
        if self.config.use_task_embedding && task_ids.is_none() {
            return Err(Error::InvalidArgument(
                "predict: task id required when task embedding is enabled".into(),
            ));
        }
        let input_refs: Vec<&Document> = inputs.iter().collect();
        let mask_refs: Vec<&MaskSet> = masks.iter().collect();
        let prep = BatchPrep::for_inference(&self.schema, &input_refs, &mask_refs, task_ids)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h_dec = self.forward(&mut tape, &bound, &prep, false, &mut rng);

        // decode heads at masked rows only
        let mut head_rows: Vec<&[usize]> = Vec::with_capacity(self.schema.len());
        let mut head_out: Vec<Option<Tensor>> = Vec::with_capacity(self.schema.len());
        for (spec, attr) in self.schema.attributes().iter().zip(&prep.attrs) {
            let rows = match attr {
                AttrPrep::Categorical { rows, .. } => rows,
                AttrPrep::Numerical { rows, .. } => rows,
            };
            head_rows.push(rows);
            if rows.is_empty() {
                head_out.push(None);
                continue;
            }
            let g = tape.gather_rows(h_dec, rows);
            let o = self.linear(&mut tape, &bound, g, &format!("dec.{}.w", spec.name), &format!("dec.{}.b", spec.name));
            head_out.push(Some(tape.value(o).clone()));
        }

        let lookup = |k: usize, row: usize| -> Option<&[f64]> {
            let rows = head_rows[k];
            let pos = rows.binary_search(&row).ok()?;
            let out = head_out[k].as_ref()?;
            let width = out.shape()[1];
            Some(&out.data()[pos * width..(pos + 1) * width])
        };

        let type_idx = self.schema.type_index();
        let mut outputs = Vec::with_capacity(inputs.len());
        for (b, (input, mask)) in inputs.iter().zip(masks).enumerate() {
            let mut doc = input.clone();
            // TYPE first: it decides which other heads apply
            let mut types: Vec<Option<usize>> = input
                .elements
                .iter()
                .map(|e| e.type_id(&self.schema))
                .collect();
            for (i, k) in mask.iter() {
                if k != type_idx {
                    continue;
                }
                let logits = lookup(type_idx, b * prep.s_max + i).expect("masked TYPE row decoded");
                types[i] = Some(argmax(logits));
            }
            for (i, k) in mask.iter() {
                let spec = self.schema.attr(k);
                if k == type_idx {
                    doc.elements[i].set_field(k, FieldValue::Categorical(types[i].unwrap()));
                    continue;
                }
                let applicable = types[i].map_or(true, |t| spec.applies_to_type(t));
                if !applicable {
                    doc.elements[i].set_field(k, FieldValue::Null);
                    continue;
                }
                let out = lookup(k, b * prep.s_max + i).expect("masked row decoded");
                let value = match spec.kind {
                    AttributeKind::Categorical { .. } => FieldValue::Categorical(argmax(out)),
                    AttributeKind::Numerical { .. } => FieldValue::Numerical(out.to_vec()),
                };
                doc.elements[i].set_field(k, value);
            }
            outputs.push(doc);
        }
        Ok(outputs)
    }
}


/// First maximal index: ties break to the lowest category id.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_mask_consistency(doc: &Document, mask: &MaskSet, schema: &Schema) -> Result<()> {
    for (i, k) in mask.iter() {
        if i >= doc.len() {
            return Err(Error::InvalidArgument(format!(
                "mask entry ({i}, {k}) out of range for document `{}`",
                doc.id
            )));
        }
        if !doc.elements[i].field(k).is_mask() {
            return Err(Error::InvalidArgument(format!(
                "document `{}`: field ({i}, {}) is in the mask but not Mask",
                doc.id,
                schema.attr(k).name
            )));
        }
    }
    for (i, e) in doc.elements.iter().enumerate() {
        for k in 0..schema.len() {
            if e.field(k).is_mask() && !mask.contains(i, k) {
                return Err(Error::InvalidArgument(format!(
                    "document `{}`: Mask at ({i}, {}) missing from the mask set",
                    doc.id,
                    schema.attr(k).name
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_triplet, TaskSpec};
    use crate::schema::tests::{element_of_type, ten_attr_schema};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 32,
            dropout: 0.1,
            ..ModelConfig::default()
        }
    }

    fn test_model() -> Model {
        Model::new(ten_attr_schema(), small_config(), 7).unwrap()
    }

    fn complete_doc(schema: &Schema, types: &[usize]) -> Document {
        Document::new(
            format!("doc-{}", types.len()),
            types.iter().map(|&t| element_of_type(schema, t)).collect(),
        )
    }

    #[test]
    fn identical_elements_get_identical_embeddings() {
        let model = test_model();
        let doc = complete_doc(&model.schema, &[1, 1, 2]);
        let mask = MaskSet::new();
        let prep = BatchPrep::for_inference(&model.schema, &[&doc], &[&mask], None).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let h = model.encode(&mut tape, &bound, &prep);
        let t = tape.value(h);
        let d = model.config.d_model;
        assert_eq!(&t.data()[0..d], &t.data()[d..2 * d]);
        assert_ne!(&t.data()[0..d], &t.data()[2 * d..3 * d]);
    }

    #[test]
    fn all_null_element_embedding_is_deterministic() {
        let model = test_model();
        let schema = model.schema.clone();
        let mut doc = complete_doc(&schema, &[0]);
        doc.elements[0] = crate::schema::Element::null(&schema);
        let run = || {
            let mask = MaskSet::new();
            let prep = BatchPrep::for_inference(&schema, &[&doc], &[&mask], None).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let h = model.encode(&mut tape, &bound, &prep);
            tape.value(h).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_sum_is_order_independent() {
        let model = test_model();
        let doc = complete_doc(&model.schema, &[0, 1, 2]);
        let mask = MaskSet::new();
        let prep = BatchPrep::for_inference(&model.schema, &[&doc], &[&mask], None).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let contribs = model.encode_contributions(&mut tape, &bound, &prep);
        let fwd = tape.add_n(&contribs);
        let rev_order: Vec<Var> = contribs.iter().rev().copied().collect();
        let rev = tape.add_n(&rev_order);
        for (a, b) in tape.value(fwd).data().iter().zip(tape.value(rev).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_mask_prediction_is_identity() {
        let model = test_model();
        let doc = complete_doc(&model.schema, &[0, 1, 2]);
        let out = model.predict(&doc, &MaskSet::new(), None).unwrap();
        assert_eq!(out, doc);
    }

    #[test]
    fn prediction_is_deterministic_and_local() {
        let model = test_model();
        let schema = model.schema.clone();
        let doc = complete_doc(&schema, &[0, 1, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = build_triplet(&doc, &schema, &TaskSpec::Attr, &mut rng).unwrap();
        let a = model.predict(&t.input, &t.mask, None).unwrap();
        let b = model.predict(&t.input, &t.mask, None).unwrap();
        assert_eq!(a, b);
        // unmasked fields are copied verbatim
        for (i, e) in a.elements.iter().enumerate() {
            for k in 0..schema.len() {
                if !t.mask.contains(i, k) {
                    assert_eq!(e.field(k), t.input.elements[i].field(k));
                } else {
                    assert!(!e.field(k).is_mask());
                }
            }
        }
    }

    #[test]
    fn predict_rejects_inconsistent_mask() {
        let model = test_model();
        let doc = complete_doc(&model.schema, &[0, 1]);
        let mut mask = MaskSet::new();
        mask.insert(0, 1); // claims a masked field the input does not have
        assert!(model.predict(&doc, &mask, None).is_err());
    }

    #[test]
    fn elem_prediction_respects_predicted_type_applicability() {
        let model = test_model();
        let schema = model.schema.clone();
        let doc = complete_doc(&schema, &[2, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = build_triplet(&doc, &schema, &TaskSpec::Elem, &mut rng).unwrap();
        let out = model.predict(&t.input, &t.mask, None).unwrap();
        let masked_elem = t.mask.iter().next().unwrap().0;
        let predicted_type = out.elements[masked_elem].type_id(&schema).unwrap();
        for (i, k) in t.mask.iter() {
            let spec = schema.attr(k);
            let value = out.elements[i].field(k);
            assert!(!value.is_mask());
            if k != schema.type_index() && !spec.applies_to_type(predicted_type) {
                assert!(value.is_null(), "attribute {} should be Null", spec.name);
            }
            if spec.applies_to_type(predicted_type) {
                assert!(!value.is_null(), "attribute {} should be predicted", spec.name);
            }
        }
    }

    #[test]
    fn permutation_equivariance_without_positional_embedding() {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let model = test_model();
        let schema = model.schema.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let types: Vec<usize> = (0..4 + trial % 3).map(|_| rng.gen_range(0..3)).collect();
            let doc = complete_doc(&schema, &types);
            let t = build_triplet(&doc, &schema, &TaskSpec::Pos, &mut rng).unwrap();
            let mut perm: Vec<usize> = (0..doc.len()).collect();
            perm.shuffle(&mut rng);
            let mut permuted_input = t.input.clone();
            for (from, &to) in perm.iter().enumerate() {
                permuted_input.elements[to] = t.input.elements[from].clone();
            }
            let permuted_mask = t.mask.permuted(&perm);
            let base = model.predict(&t.input, &t.mask, None).unwrap();
            let shuffled = model.predict(&permuted_input, &permuted_mask, None).unwrap();
            for (from, &to) in perm.iter().enumerate() {
                for k in 0..schema.len() {
                    match (base.elements[from].field(k), shuffled.elements[to].field(k)) {
                        (FieldValue::Numerical(a), FieldValue::Numerical(b)) => {
                            for (x, y) in a.iter().zip(b) {
                                assert!((x - y).abs() < 1e-5);
                            }
                        }
                        (a, b) => assert_eq!(a, b),
                    }
                }
            }
        }
    }

    #[test]
    fn padding_does_not_influence_real_positions() {
        let model = test_model();
        let schema = model.schema.clone();
        let doc_small = complete_doc(&schema, &[0, 1]);
        let doc_large = complete_doc(&schema, &[2, 2, 2, 2, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = build_triplet(&doc_small, &schema, &TaskSpec::Attr, &mut rng).unwrap();
        // alone in the batch (no padding)
        let alone = model.predict(&t.input, &t.mask, None).unwrap();
        // batched next to a longer document (padded by 4 positions)
        let empty = MaskSet::new();
        let batched = model
            .predict_batch(
                &[t.input.clone(), doc_large.clone()],
                &[t.mask.clone(), empty],
                None,
            )
            .unwrap();
        for (a, b) in alone.elements.iter().zip(&batched[0].elements) {
            for k in 0..schema.len() {
                match (a.field(k), b.field(k)) {
                    (FieldValue::Numerical(x), FieldValue::Numerical(y)) => {
                        for (p, q) in x.iter().zip(y) {
                            assert!((p - q).abs() < 1e-5);
                        }
                    }
                    (x, y) => assert_eq!(x, y),
                }
            }
        }
    }

    #[test]
    fn decoder_head_shapes_follow_schema() {
        let model = test_model();
        for spec in model.schema.attributes() {
            let w = model.params.get(&format!("dec.{}.w", spec.name));
            let out = match spec.kind {
                AttributeKind::Categorical { cardinality } => cardinality,
                AttributeKind::Numerical { dim } => dim,
            };
            assert_eq!(w.shape(), &[model.config.d_model, out]);
        }
    }

    #[test]
    fn zero_latent_decodes_to_head_bias() {
        let mut model = test_model();
        // give one head a recognizable bias
        let bias = model.params.get_mut("dec.color.b");
        for (i, v) in bias.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.5;
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let zeros = tape.constant(Tensor::zeros(vec![1, model.config.d_model]));
        let out = model.linear(&mut tape, &bound, zeros, "dec.color.w", "dec.color.b");
        let got = tape.value(out).data().to_vec();
        let want: Vec<f64> = (0..16).map(|i| i as f64 * 0.5).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn every_parameter_is_reachable_from_the_loss() {
        // positional + task embeddings enabled; the batch covers every
        // attribute both visible and masked, with Null fields present.
        let schema = ten_attr_schema();
        let config = ModelConfig {
            use_positional_embedding: true,
            use_task_embedding: true,
            num_tasks: 2,
            ..small_config()
        };
        let model = Model::new(schema.clone(), config, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let docs = [
            complete_doc(&schema, &[0, 1, 2, 1]),
            complete_doc(&schema, &[2, 1, 0]),
        ];
        // deterministic full coverage: one masked image element, then every
        // attribute group masked across the second document
        let m1 = crate::mask::element_mask(&docs[0], &schema, &std::collections::BTreeSet::from([1])).unwrap();
        let m2 = crate::mask::attribute_mask(&docs[1], &schema, &crate::schema::AttributeGroup::ALL);
        let triplets = vec![
            crate::mask::Triplet {
                input: crate::mask::apply_mask(&docs[0], &m1),
                target: docs[0].clone(),
                mask: m1,
            },
            crate::mask::Triplet {
                input: crate::mask::apply_mask(&docs[1], &m2),
                target: docs[1].clone(),
                mask: m2,
            },
        ];
        let (loss, grads) = model
            .batch_gradients(&triplets, Some(vec![0, 1]), false, &mut rng)
            .unwrap();
        assert!(loss.is_finite());
        for (name, _) in model.params.iter() {
            let g = &grads[name];
            let norm: f64 = g.data().iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "parameter `{name}` has zero gradient");
        }
    }

    #[test]
    fn single_element_attention_is_well_defined() {
        let model = test_model();
        let schema = model.schema.clone();
        let doc = complete_doc(&schema, &[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = build_triplet(&doc, &schema, &TaskSpec::Pos, &mut rng).unwrap();
        let out = model.predict(&t.input, &t.mask, None).unwrap();
        assert!(crate::schema::validate(&out, &schema).is_empty());
    }

    #[test]
    fn task_embedding_changes_output_but_keeps_shape() {
        let schema = ten_attr_schema();
        let config = ModelConfig {
            use_task_embedding: true,
            num_tasks: 5,
            dropout: 0.0,
            ..small_config()
        };
        let model = Model::new(schema.clone(), config, 3).unwrap();
        let doc = complete_doc(&schema, &[0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = build_triplet(&doc, &schema, &TaskSpec::Pos, &mut rng).unwrap();
        let a = model.predict(&t.input, &t.mask, Some(0)).unwrap();
        let b = model.predict(&t.input, &t.mask, Some(0)).unwrap();
        assert_eq!(a, b);
        assert!(model.predict(&t.input, &t.mask, None).is_err());
        assert_eq!(a.len(), doc.len());
    }
}
