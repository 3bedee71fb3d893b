//! Masking strategies and the named design tasks they encode.
//!
//! A task is nothing more than a masking pattern: element masking covers
//! every field of selected elements, attribute masking covers a group of
//! attributes across all elements, and random masking covers each non-Null
//! field independently with some probability. `Null` fields are never
//! masked.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::schema::{AttributeGroup, Document, FieldValue, Schema};

/// The index set M of (element, attribute) pairs to predict. Attributes are
/// identified by their index in the schema's canonical order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskSet {
    entries: BTreeSet<(usize, usize)>,
}

impl MaskSet {
    pub fn new() -> MaskSet {
        MaskSet::default()
    }

    pub fn insert(&mut self, element: usize, attr: usize) {
        self.entries.insert((element, attr));
    }

    pub fn contains(&self, element: usize, attr: usize) -> bool {
        self.entries.contains(&(element, attr))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().copied()
    }

    pub fn union(&self, other: &MaskSet) -> MaskSet {
        MaskSet {
            entries: self.entries.union(&other.entries).copied().collect(),
        }
    }

    /// Applies a permutation of element indices: entry `(i, k)` becomes
    /// `(perm[i], k)`.
    pub fn permuted(&self, perm: &[usize]) -> MaskSet {
        MaskSet {
            entries: self.entries.iter().map(|&(i, k)| (perm[i], k)).collect(),
        }
    }
}

impl FromIterator<(usize, usize)> for MaskSet {
    fn from_iter<T: IntoIterator<Item = (usize, usize)>>(iter: T) -> MaskSet {
        MaskSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// A named design task expressed as a masking-pattern generator.
///
/// TYPE prediction is deliberately not a task; the attribute-prediction
/// tasks target the POS/ATTR/IMG/TXT groups only.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    /// Mask all attributes of a single, uniformly chosen element.
    Elem,
    Pos,
    Attr,
    Img,
    Txt,
    /// Mask each non-Null field independently with probability `p`.
    Random { p: f64 },
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Elem => "ELEM",
            TaskSpec::Pos => "POS",
            TaskSpec::Attr => "ATTR",
            TaskSpec::Img => "IMG",
            TaskSpec::Txt => "TXT",
            TaskSpec::Random { .. } => "RANDOM",
        }
    }

    /// The attribute groups an attribute-masking task targets.
    pub fn target_groups(&self) -> Option<&'static [AttributeGroup]> {
        match self {
            TaskSpec::Pos => Some(&[AttributeGroup::Pos]),
            TaskSpec::Attr => Some(&[AttributeGroup::Attr]),
            TaskSpec::Img => Some(&[AttributeGroup::Img]),
            TaskSpec::Txt => Some(&[AttributeGroup::Txt]),
            TaskSpec::Elem | TaskSpec::Random { .. } => None,
        }
    }

    /// The five named design tasks.
    pub fn standard_tasks() -> Vec<TaskSpec> {
        vec![
            TaskSpec::Elem,
            TaskSpec::Pos,
            TaskSpec::Attr,
            TaskSpec::Img,
            TaskSpec::Txt,
        ]
    }
}

impl std::fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<TaskSpec> {
        match s.to_ascii_uppercase().as_str() {
            "ELEM" => Ok(TaskSpec::Elem),
            "POS" => Ok(TaskSpec::Pos),
            "ATTR" => Ok(TaskSpec::Attr),
            "IMG" => Ok(TaskSpec::Img),
            "TXT" => Ok(TaskSpec::Txt),
            "RANDOM" => Ok(TaskSpec::Random { p: 0.15 }),
            other => Err(Error::Mask(format!("unknown task `{other}`"))),
        }
    }
}

/// A masked input, its complete ground truth, and the mask that separates
/// them.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub input: Document,
    pub target: Document,
    pub mask: MaskSet,
}

/// Masks every non-Null field of each selected element.
pub fn element_mask(
    doc: &Document,
    schema: &Schema,
    element_indices: &BTreeSet<usize>,
) -> Result<MaskSet> {
    let mut mask = MaskSet::new();
    for &i in element_indices {
        let element = doc
            .elements
            .get(i)
            .ok_or_else(|| Error::Mask(format!("element index {i} out of range ({} elements)", doc.len())))?;
        for k in 0..schema.len() {
            if !element.field(k).is_null() {
                mask.insert(i, k);
            }
        }
    }
    Ok(mask)
}

/// Masks every non-Null field whose attribute belongs to one of the given
/// groups, across all elements.
pub fn attribute_mask(doc: &Document, schema: &Schema, groups: &[AttributeGroup]) -> MaskSet {
    debug_assert!(!groups.is_empty(), "attribute_mask expects non-empty groups");
    let mut mask = MaskSet::new();
    let targets: Vec<usize> = schema
        .attributes()
        .iter()
        .enumerate()
        .filter(|(_, a)| groups.contains(&a.group))
        .map(|(k, _)| k)
        .collect();
    for (i, element) in doc.elements.iter().enumerate() {
        for &k in &targets {
            if !element.field(k).is_null() {
                mask.insert(i, k);
            }
        }
    }
    mask
}

/// Masks each non-Null field independently with probability `p`. An empty
/// draw is resampled until the mask is non-empty, which preserves per-field
/// independence conditioned on non-emptiness.
pub fn random_mask(doc: &Document, schema: &Schema, p: f64, rng: &mut impl Rng) -> Result<MaskSet> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Mask(format!("random_mask: p must be in (0, 1), got {p}")));
    }
    let candidates: Vec<(usize, usize)> = doc
        .elements
        .iter()
        .enumerate()
        .flat_map(|(i, e)| {
            (0..schema.len())
                .filter(move |&k| !e.field(k).is_null())
                .map(move |k| (i, k))
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::Mask("random_mask: document has no maskable fields".into()));
    }
    loop {
        let mask: MaskSet = candidates
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(p))
            .collect();
        if !mask.is_empty() {
            return Ok(mask);
        }
    }
}

/// Replaces the fields at `mask` with `Mask` and leaves everything else.
pub fn apply_mask(target: &Document, mask: &MaskSet) -> Document {
    let mut input = target.clone();
    for (i, k) in mask.iter() {
        input.elements[i].set_field(k, FieldValue::Mask);
    }
    input
}

/// Builds the (input, target, mask) triplet for a task from a complete
/// document.
///
/// ELEM masks all attributes of exactly one uniformly chosen element. A
/// degenerate task (e.g. IMG on a document with no image elements) yields an
/// empty-mask triplet; callers are expected to skip or resample it.
pub fn build_triplet(
    target: &Document,
    schema: &Schema,
    task: &TaskSpec,
    rng: &mut impl Rng,
) -> Result<Triplet> {
    if !target.is_complete() {
        return Err(Error::Mask(format!(
            "build_triplet: target document `{}` contains Mask fields",
            target.id
        )));
    }
    let mask = match task {
        TaskSpec::Elem => {
            if target.is_empty() {
                return Err(Error::Mask("build_triplet: ELEM on an empty document".into()));
            }
            let chosen = rng.gen_range(0..target.len());
            element_mask(target, schema, &BTreeSet::from([chosen]))?
        }
        TaskSpec::Random { p } => random_mask(target, schema, *p, rng)?,
        attr_task => attribute_mask(target, schema, attr_task.target_groups().unwrap()),
    };
    Ok(Triplet {
        input: apply_mask(target, &mask),
        target: target.clone(),
        mask,
    })
}

/// Uniform draw from a non-empty task list.
pub fn sample_task<'a>(tasks: &'a [TaskSpec], rng: &mut impl Rng) -> Result<&'a TaskSpec> {
    tasks
        .choose(rng)
        .ok_or_else(|| Error::Mask("sample_task: empty task list".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{AttributeKind, AttributeSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ten_attr_schema() -> Schema {
        crate::schema::tests::ten_attr_schema()
    }

    fn element_of_type(schema: &Schema, t: usize) -> crate::schema::Element {
        crate::schema::tests::element_of_type(schema, t)
    }

    fn doc(schema: &Schema, types: &[usize]) -> Document {
        Document::new(
            "mask-test",
            types.iter().map(|&t| element_of_type(schema, t)).collect(),
        )
    }

    #[test]
    fn element_mask_skips_null_fields() {
        // 10 attributes; a text element (type 2) has the 3 image-only
        // attributes Null, so masking it covers 7 fields.
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0, 1, 2, 1, 0]);
        let mask = element_mask(&d, &schema, &BTreeSet::from([2])).unwrap();
        assert_eq!(mask.len(), 7);
        assert!(mask.iter().all(|(i, _)| i == 2));
    }

    #[test]
    fn element_mask_empty_selection() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0, 1]);
        let mask = element_mask(&d, &schema, &BTreeSet::new()).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn element_mask_all_elements_fully_applicable() {
        // Schema where every attribute applies to every type: |M| = S * N.
        let attrs = vec![
            AttributeSpec {
                name: "type".into(),
                kind: AttributeKind::Categorical { cardinality: 2 },
                group: AttributeGroup::Type,
                applies_to: None,
            },
            AttributeSpec {
                name: "x".into(),
                kind: AttributeKind::Categorical { cardinality: 8 },
                group: AttributeGroup::Pos,
                applies_to: None,
            },
            AttributeSpec {
                name: "c".into(),
                kind: AttributeKind::Categorical { cardinality: 4 },
                group: AttributeGroup::Attr,
                applies_to: None,
            },
        ];
        let schema = Schema::new(attrs, None).unwrap();
        let d = doc(&schema, &[0, 1, 0, 1]);
        let mask = element_mask(&d, &schema, &BTreeSet::from([0, 1, 2, 3])).unwrap();
        assert_eq!(mask.len(), 4 * 3);
    }

    #[test]
    fn element_mask_rejects_out_of_range() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0, 1]);
        assert!(element_mask(&d, &schema, &BTreeSet::from([5])).is_err());
    }

    #[test]
    fn attribute_mask_pos_group() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0, 1, 2, 0]);
        let mask = attribute_mask(&d, &schema, &[AttributeGroup::Pos]);
        // x, y, w, h apply to all 4 elements
        assert_eq!(mask.len(), 16);
    }

    #[test]
    fn attribute_mask_img_on_document_without_images() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0, 2, 2]);
        let mask = attribute_mask(&d, &schema, &[AttributeGroup::Img]);
        assert!(mask.is_empty());
    }

    #[test]
    fn attribute_mask_union_of_groups() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0, 1, 2]);
        let pos = attribute_mask(&d, &schema, &[AttributeGroup::Pos]);
        let attr = attribute_mask(&d, &schema, &[AttributeGroup::Attr]);
        let both = attribute_mask(&d, &schema, &[AttributeGroup::Pos, AttributeGroup::Attr]);
        assert_eq!(both, pos.union(&attr));
    }

    #[test]
    fn random_mask_mean_matches_binomial() {
        // 10k trials over a document with 200 non-Null fields at p = 0.15:
        // the mean mask size is np = 30, within +/- 1.5.
        let attrs = vec![
            AttributeSpec {
                name: "type".into(),
                kind: AttributeKind::Categorical { cardinality: 2 },
                group: AttributeGroup::Type,
                applies_to: None,
            },
            AttributeSpec {
                name: "a".into(),
                kind: AttributeKind::Categorical { cardinality: 4 },
                group: AttributeGroup::Attr,
                applies_to: None,
            },
            AttributeSpec {
                name: "b".into(),
                kind: AttributeKind::Categorical { cardinality: 4 },
                group: AttributeGroup::Attr,
                applies_to: None,
            },
            AttributeSpec {
                name: "c".into(),
                kind: AttributeKind::Categorical { cardinality: 4 },
                group: AttributeGroup::Attr,
                applies_to: None,
            },
        ];
        let schema = Schema::new(attrs, None).unwrap();
        let d = doc(&schema, &vec![0; 50]); // 50 elements x 4 attrs = 200 fields
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|_| random_mask(&d, &schema, 0.15, &mut rng).unwrap().len())
            .sum();
        let mean = total as f64 / trials as f64;
        assert!((mean - 30.0).abs() < 1.5, "mean {mean}");
    }

    #[test]
    fn random_mask_never_covers_null_fields() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0, 1, 2]);
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = random_mask(&d, &schema, 0.3, &mut rng).unwrap();
            for (i, k) in mask.iter() {
                assert!(!d.elements[i].field(k).is_null());
            }
        }
    }

    #[test]
    fn random_mask_on_single_field_is_forced() {
        // A one-element document whose only non-Null field is TYPE: the
        // resample-until-non-empty rule always masks that field.
        let attrs = vec![AttributeSpec {
            name: "type".into(),
            kind: AttributeKind::Categorical { cardinality: 2 },
            group: AttributeGroup::Type,
            applies_to: None,
        }];
        let schema = Schema::new(attrs, None).unwrap();
        let d = doc(&schema, &[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = random_mask(&d, &schema, 0.15, &mut rng).unwrap();
        assert_eq!(mask.len(), 1);
        assert!(mask.contains(0, 0));
    }

    #[test]
    fn random_mask_rejects_bad_probability() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_mask(&d, &schema, 0.0, &mut rng).is_err());
        assert!(random_mask(&d, &schema, 1.0, &mut rng).is_err());
    }

    #[test]
    fn build_triplet_elem_single_element() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let triplet = build_triplet(&d, &schema, &TaskSpec::Elem, &mut rng).unwrap();
        // 9 of the 10 attributes apply to an image element (font is text-only)
        assert_eq!(triplet.mask.len(), 9);
        for (i, k) in triplet.mask.iter() {
            assert_eq!(i, 0);
            assert!(triplet.input.elements[i].field(k).is_mask());
        }
        assert_eq!(triplet.target, d);
    }

    #[test]
    fn build_triplet_pos_masks_all_position_fields() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let triplet = build_triplet(&d, &schema, &TaskSpec::Pos, &mut rng).unwrap();
        for (i, element) in triplet.input.elements.iter().enumerate() {
            for name in ["x", "y", "w", "h"] {
                let k = schema.index_of(name).unwrap();
                assert!(element.field(k).is_mask());
                assert!(triplet.mask.contains(i, k));
            }
        }
        assert_eq!(triplet.mask.len(), 12);
    }

    #[test]
    fn build_triplet_degenerate_task_yields_empty_mask() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0, 2]); // no image elements
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let triplet = build_triplet(&d, &schema, &TaskSpec::Img, &mut rng).unwrap();
        assert!(triplet.mask.is_empty());
        assert_eq!(triplet.input, d);
    }

    #[test]
    fn build_triplet_rejects_incomplete_target() {
        let schema = ten_attr_schema();
        let mut d = doc(&schema, &[0, 1]);
        d.elements[0].set_field(1, FieldValue::Mask);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_triplet(&d, &schema, &TaskSpec::Pos, &mut rng).is_err());
    }

    #[test]
    fn triplet_input_matches_target_outside_mask() {
        let schema = ten_attr_schema();
        let d = doc(&schema, &[0, 1, 2, 1]);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let task = TaskSpec::Random { p: 0.3 };
            let t = build_triplet(&d, &schema, &task, &mut rng).unwrap();
            for (i, e) in t.input.elements.iter().enumerate() {
                for k in 0..schema.len() {
                    if t.mask.contains(i, k) {
                        assert!(e.field(k).is_mask());
                    } else {
                        assert_eq!(e.field(k), t.target.elements[i].field(k));
                    }
                }
            }
            // overwriting the input at M with target values reproduces the target
            let mut restored = t.input.clone();
            for (i, k) in t.mask.iter() {
                restored.elements[i].set_field(k, t.target.elements[i].field(k).clone());
            }
            assert_eq!(restored, t.target);
        }
    }

    #[test]
    fn sample_task_single_choice() {
        let tasks = vec![TaskSpec::Elem];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_task(&tasks, &mut rng).unwrap(), &TaskSpec::Elem);
        }
    }

    #[test]
    fn sample_task_uniform_over_five() {
        let tasks = TaskSpec::standard_tasks();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let t = sample_task(&tasks, &mut rng).unwrap();
            let idx = tasks.iter().position(|x| x == t).unwrap();
            counts[idx] += 1;
        }
        for &c in &counts {
            assert!((c as i64 - 2000).abs() <= 120, "counts {counts:?}");
        }
    }

    #[test]
    fn sample_task_is_reproducible() {
        let tasks = TaskSpec::standard_tasks();
        let seq1: Vec<String> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..100)
                .map(|_| sample_task(&tasks, &mut rng).unwrap().name().to_string())
                .collect()
        };
        let seq2: Vec<String> = {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..100)
                .map(|_| sample_task(&tasks, &mut rng).unwrap().name().to_string())
                .collect()
        };
        assert_eq!(seq1, seq2);
        assert!(sample_task(&[], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn task_names_round_trip() {
        for task in TaskSpec::standard_tasks() {
            assert_eq!(TaskSpec::from_str(task.name()).unwrap(), task);
        }
        assert_eq!(
            TaskSpec::from_str("random").unwrap(),
            TaskSpec::Random { p: 0.15 }
        );
        assert!(TaskSpec::from_str("TYPE").is_err());
    }
}
