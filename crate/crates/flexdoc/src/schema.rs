//! Attribute schema and the order-less multi-modal document data model.
//!
//! A document is a set of elements; each element is a row of fields, one per
//! attribute in the schema. A field holds a categorical id, a numerical
//! vector, or one of the two special tokens: `Null` (inherently missing,
//! e.g. the font of an image element, or batch padding) and `Mask` (a value
//! the model must predict).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Documents with more elements than this are rejected.
pub const MAX_ELEMENTS: usize = 50;

/// JSONL sentinel for [`FieldValue::Null`].
pub const NULL_SENTINEL: &str = "__NULL__";
/// JSONL sentinel for [`FieldValue::Mask`].
pub const MASK_SENTINEL: &str = "__MASK__";

/// Attribute groups. `Pos` covers position and size, `Attr` covers the
/// remaining styling attributes (color, font, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AttributeGroup {
    Type,
    Pos,
    Img,
    Txt,
    Attr,
}

impl AttributeGroup {
    pub const ALL: [AttributeGroup; 5] = [
        AttributeGroup::Type,
        AttributeGroup::Pos,
        AttributeGroup::Img,
        AttributeGroup::Txt,
        AttributeGroup::Attr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttributeGroup::Type => "TYPE",
            AttributeGroup::Pos => "POS",
            AttributeGroup::Img => "IMG",
            AttributeGroup::Txt => "TXT",
            AttributeGroup::Attr => "ATTR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Categorical { cardinality: usize },
    Numerical { dim: usize },
}

impl AttributeKind {
    pub fn is_categorical(&self) -> bool {
        matches!(self, AttributeKind::Categorical { .. })
    }
}

/// Declarative description of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttributeKind,
    pub group: AttributeGroup,
    /// Element-type ids for which this attribute is meaningful. `None`
    /// means the attribute applies to every type. For all other types the
    /// field is forced to `Null`.
    #[serde(default)]
    pub applies_to: Option<BTreeSet<usize>>,
}

impl AttributeSpec {
    pub fn applies_to_type(&self, type_id: usize) -> bool {
        match &self.applies_to {
            None => true,
            Some(set) => set.contains(&type_id),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    attributes: Vec<AttributeSpec>,
    #[serde(default)]
    type_names: Option<Vec<String>>,
}

/// An ordered list of attribute specs. The order in the file is canonical
/// and defines attribute iteration everywhere.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "SchemaFile")]
pub struct Schema {
    attributes: Vec<AttributeSpec>,
    type_names: Option<Vec<String>>,
    type_index: usize,
}

impl From<Schema> for SchemaFile {
    fn from(s: Schema) -> SchemaFile {
        SchemaFile {
            attributes: s.attributes,
            type_names: s.type_names,
        }
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let file = SchemaFile::deserialize(deserializer)?;
        Schema::new(file.attributes, file.type_names).map_err(serde::de::Error::custom)
    }
}

impl Schema {
    pub fn new(attributes: Vec<AttributeSpec>, type_names: Option<Vec<String>>) -> Result<Schema> {
        if attributes.is_empty() {
            return Err(Error::Schema("schema has no attributes".into()));
        }
        let mut seen = BTreeSet::new();
        for spec in &attributes {
            if !seen.insert(spec.name.clone()) {
                return Err(Error::Schema(format!("duplicate attribute name `{}`", spec.name)));
            }
            match spec.kind {
                AttributeKind::Categorical { cardinality } if cardinality < 2 => {
                    return Err(Error::Schema(format!(
                        "attribute `{}`: categorical cardinality must be >= 2, got {cardinality}",
                        spec.name
                    )));
                }
                AttributeKind::Numerical { dim } if dim < 1 => {
                    return Err(Error::Schema(format!(
                        "attribute `{}`: numerical dim must be >= 1",
                        spec.name
                    )));
                }
                _ => {}
            }
        }
        let type_attrs: Vec<usize> = attributes
            .iter()
            .enumerate()
            .filter(|(_, a)| a.group == AttributeGroup::Type)
            .map(|(i, _)| i)
            .collect();
        let type_index = match type_attrs.as_slice() {
            [i] => *i,
            _ => {
                return Err(Error::Schema(format!(
                    "schema must have exactly one TYPE attribute, found {}",
                    type_attrs.len()
                )))
            }
        };
        let num_types = match attributes[type_index].kind {
            AttributeKind::Categorical { cardinality } => cardinality,
            AttributeKind::Numerical { .. } => {
                return Err(Error::Schema("the TYPE attribute must be categorical".into()))
            }
        };
        if let Some(names) = &type_names {
            if names.len() != num_types {
                return Err(Error::Schema(format!(
                    "type_names has {} entries but the TYPE attribute has cardinality {num_types}",
                    names.len()
                )));
            }
        }
        for spec in &attributes {
            if let Some(set) = &spec.applies_to {
                if let Some(&id) = set.iter().find(|&&id| id >= num_types) {
                    return Err(Error::Schema(format!(
                        "attribute `{}`: applies_to references unknown type id {id}",
                        spec.name
                    )));
                }
            }
        }
        Ok(Schema {
            attributes,
            type_names,
            type_index,
        })
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attr(&self, index: usize) -> &AttributeSpec {
        &self.attributes[index]
    }

    /// Index of the single TYPE attribute.
    pub fn type_index(&self) -> usize {
        self.type_index
    }

    /// Number of element types (cardinality of the TYPE attribute).
    pub fn num_types(&self) -> usize {
        match self.attributes[self.type_index].kind {
            AttributeKind::Categorical { cardinality } => cardinality,
            AttributeKind::Numerical { .. } => unreachable!("TYPE is validated categorical"),
        }
    }

    pub fn type_names(&self) -> Option<&[String]> {
        self.type_names.as_deref()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Attribute indices belonging to `group`, in canonical order.
    pub fn group_indices(&self, group: AttributeGroup) -> Vec<usize> {
        self.attributes
            .iter()
            .enumerate()
            .filter(|(_, a)| a.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("schema serialization cannot fail")
    }

    /// Hex SHA-256 of the canonical JSON form; used to bind checkpoints to
    /// the schema they were trained against.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            write!(out, "{byte:02x}").unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Schema> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One cell of the element-by-attribute field array.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Categorical(usize),
    Numerical(Vec<f64>),
    Null,
    Mask,
}

impl FieldValue {
    pub fn is_null(&self) -> bool {
        matches!(self, FieldValue::Null)
    }

    pub fn is_mask(&self) -> bool {
        matches!(self, FieldValue::Mask)
    }

    pub fn as_categorical(&self) -> Option<usize> {
        match self {
            FieldValue::Categorical(id) => Some(*id),
            _ => None,
        }
    }

    pub fn as_numerical(&self) -> Option<&[f64]> {
        match self {
            FieldValue::Numerical(v) => Some(v),
            _ => None,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            FieldValue::Categorical(id) => serde_json::json!(id),
            FieldValue::Numerical(v) => serde_json::json!(v),
            FieldValue::Null => serde_json::json!(NULL_SENTINEL),
            FieldValue::Mask => serde_json::json!(MASK_SENTINEL),
        }
    }

    fn from_json(value: &serde_json::Value, spec: &AttributeSpec) -> Result<FieldValue> {
        match value {
            serde_json::Value::String(s) if s == NULL_SENTINEL => Ok(FieldValue::Null),
            serde_json::Value::String(s) if s == MASK_SENTINEL => Ok(FieldValue::Mask),
            serde_json::Value::Number(n) => {
                let AttributeKind::Categorical { cardinality } = spec.kind else {
                    return Err(Error::Parse(format!(
                        "attribute `{}` is numerical but got a scalar",
                        spec.name
                    )));
                };
                let id = n.as_u64().ok_or_else(|| {
                    Error::Parse(format!("attribute `{}`: categorical id must be a non-negative integer", spec.name))
                })? as usize;
                if id >= cardinality {
                    return Err(Error::Parse(format!(
                        "attribute `{}`: id out of range ({id} >= cardinality {cardinality})",
                        spec.name
                    )));
                }
                Ok(FieldValue::Categorical(id))
            }
            serde_json::Value::Array(items) => {
                let AttributeKind::Numerical { dim } = spec.kind else {
                    return Err(Error::Parse(format!(
                        "attribute `{}` is categorical but got a vector",
                        spec.name
                    )));
                };
                if items.len() != dim {
                    return Err(Error::Parse(format!(
                        "attribute `{}`: expected vector of length {dim}, got {}",
                        spec.name,
                        items.len()
                    )));
                }
                let mut vec = Vec::with_capacity(dim);
                for item in items {
                    let x = item.as_f64().ok_or_else(|| {
                        Error::Parse(format!("attribute `{}`: non-numeric vector entry", spec.name))
                    })?;
                    if !x.is_finite() {
                        return Err(Error::Parse(format!(
                            "attribute `{}`: non-finite vector entry",
                            spec.name
                        )));
                    }
                    vec.push(x);
                }
                Ok(FieldValue::Numerical(vec))
            }
            other => Err(Error::Parse(format!(
                "attribute `{}`: unsupported field encoding {other}",
                spec.name
            ))),
        }
    }
}

/// One element: a field per schema attribute, stored in canonical attribute
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    fields: Vec<FieldValue>,
}

impl Element {
    pub fn new(fields: Vec<FieldValue>) -> Element {
        Element { fields }
    }

    /// An all-`Null` element (used for batch padding).
    pub fn null(schema: &Schema) -> Element {
        Element {
            fields: vec![FieldValue::Null; schema.len()],
        }
    }

    pub fn fields(&self) -> &[FieldValue] {
        &self.fields
    }

    pub fn field(&self, attr_index: usize) -> &FieldValue {
        &self.fields[attr_index]
    }

    pub fn set_field(&mut self, attr_index: usize, value: FieldValue) {
        self.fields[attr_index] = value;
    }

    /// The element's type id, if the TYPE field holds a real category.
    pub fn type_id(&self, schema: &Schema) -> Option<usize> {
        self.fields[schema.type_index()].as_categorical()
    }

    pub fn is_all_null(&self) -> bool {
        self.fields.iter().all(|f| f.is_null())
    }
}

/// An order-less set of elements. Element order is preserved in storage but
/// carries no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub canvas: Option<std::collections::BTreeMap<String, f64>>,
    pub elements: Vec<Element>,
}

impl Document {
    pub fn new(id: impl Into<String>, elements: Vec<Element>) -> Document {
        Document {
            id: id.into(),
            canvas: None,
            elements,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// True if no field anywhere in the document is `Mask`.
    pub fn is_complete(&self) -> bool {
        self.elements
            .iter()
            .all(|e| e.fields().iter().all(|f| !f.is_mask()))
    }

    pub fn to_json_value(&self, schema: &Schema) -> serde_json::Value {
        let elements: Vec<serde_json::Value> = self
            .elements
            .iter()
            .map(|e| {
                let mut map = serde_json::Map::new();
                for (spec, value) in schema.attributes().iter().zip(e.fields()) {
                    map.insert(spec.name.clone(), value.to_json());
                }
                serde_json::Value::Object(map)
            })
            .collect();
        let mut doc = serde_json::Map::new();
        doc.insert("id".into(), serde_json::json!(self.id));
        if let Some(canvas) = &self.canvas {
            doc.insert("canvas".into(), serde_json::json!(canvas));
        }
        doc.insert("elements".into(), serde_json::Value::Array(elements));
        serde_json::Value::Object(doc)
    }

    /// Canonical single-line JSON text.
    pub fn to_json_string(&self, schema: &Schema) -> String {
        self.to_json_value(schema).to_string()
    }

    pub fn from_json_value(value: &serde_json::Value, schema: &Schema) -> Result<Document> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Parse("document must be a JSON object".into()))?;
        for key in obj.keys() {
            if key != "id" && key != "canvas" && key != "elements" {
                return Err(Error::Parse(format!("unknown document key `{key}`")));
            }
        }
        let id = obj
            .get("id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Parse("document is missing a string `id`".into()))?
            .to_string();
        let canvas = match obj.get("canvas") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| Error::Parse(format!("bad canvas: {e}")))?,
            ),
        };
        let elements_json = obj
            .get("elements")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Parse("document is missing an `elements` array".into()))?;
        let mut elements = Vec::with_capacity(elements_json.len());
        for (i, elem) in elements_json.iter().enumerate() {
            let map = elem
                .as_object()
                .ok_or_else(|| Error::Parse(format!("element {i} must be a JSON object")))?;
            for key in map.keys() {
                if schema.index_of(key).is_none() {
                    return Err(Error::Parse(format!("element {i}: unknown attribute `{key}`")));
                }
            }
            let mut fields = Vec::with_capacity(schema.len());
            for spec in schema.attributes() {
                let raw = map.get(&spec.name).ok_or_else(|| {
                    Error::Parse(format!("element {i}: missing attribute `{}`", spec.name))
                })?;
                fields.push(
                    FieldValue::from_json(raw, spec)
                        .map_err(|e| Error::Parse(format!("element {i}: {e}")))?,
                );
            }
            elements.push(Element::new(fields));
        }
        Ok(Document { id, canvas, elements })
    }

    pub fn from_json_str(text: &str, schema: &Schema) -> Result<Document> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        Document::from_json_value(&value, schema)
    }
}

/// One reported invariant violation. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub element: Option<usize>,
    pub attribute: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, element: Option<usize>, attribute: Option<&str>, message: String) {
        self.violations.push(Violation {
            element,
            attribute: attribute.map(str::to_string),
            message,
        });
    }
}

/// Checks every document and element invariant and reports each violation
/// with its element index and attribute name.
pub fn validate(doc: &Document, schema: &Schema) -> ValidationReport {
    let mut report = ValidationReport::default();
    if doc.elements.is_empty() {
        report.push(None, None, "document has no elements".into());
    }
    if doc.elements.len() > MAX_ELEMENTS {
        report.push(
            None,
            None,
            format!("document has {} elements, maximum is {MAX_ELEMENTS}", doc.elements.len()),
        );
    }
    let type_idx = schema.type_index();
    for (i, element) in doc.elements.iter().enumerate() {
        if element.fields().len() != schema.len() {
            report.push(
                Some(i),
                None,
                format!(
                    "element has {} fields, schema has {} attributes",
                    element.fields().len(),
                    schema.len()
                ),
            );
            continue;
        }
        let type_value = element.field(type_idx);
        if type_value.is_null() {
            report.push(
                Some(i),
                Some(&schema.attr(type_idx).name),
                "the TYPE attribute must not be Null".into(),
            );
        }
        let type_id = type_value.as_categorical();
        for (k, spec) in schema.attributes().iter().enumerate() {
            let value = element.field(k);
            match (value, &spec.kind) {
                (FieldValue::Categorical(id), AttributeKind::Categorical { cardinality }) => {
                    if id >= cardinality {
                        report.push(
                            Some(i),
                            Some(&spec.name),
                            format!("categorical id {id} out of range (cardinality {cardinality})"),
                        );
                    }
                }
                (FieldValue::Categorical(_), AttributeKind::Numerical { .. }) => {
                    report.push(Some(i), Some(&spec.name), "expected a vector, got a categorical id".into());
                }
                (FieldValue::Numerical(v), AttributeKind::Numerical { dim }) => {
                    if v.len() != *dim {
                        report.push(
                            Some(i),
                            Some(&spec.name),
                            format!("vector length {} does not match dim {dim}", v.len()),
                        );
                    } else if v.iter().any(|x| !x.is_finite()) {
                        report.push(Some(i), Some(&spec.name), "vector has non-finite components".into());
                    }
                }
                (FieldValue::Numerical(_), AttributeKind::Categorical { .. }) => {
                    report.push(Some(i), Some(&spec.name), "expected a categorical id, got a vector".into());
                }
                (FieldValue::Null | FieldValue::Mask, _) => {}
            }
            // Applicability is only decidable when the element's type is known.
            if let Some(tid) = type_id {
                if !spec.applies_to_type(tid) && !value.is_null() {
                    report.push(
                        Some(i),
                        Some(&spec.name),
                        format!("attribute does not apply to element type {tid} and must be Null"),
                    );
                }
            }
        }
    }
    report
}

/// Documents padded to a common length with all-`Null` elements. Padding
/// positions are excluded from attention, loss, and scoring via `pad_mask`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub documents: Vec<Document>,
    /// `pad_mask[d][s]` is true where position `s` holds a real element.
    pub pad_mask: Vec<Vec<bool>>,
    pub s_max: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Recovers the original (unpadded) documents.
    pub fn unpad(&self) -> Vec<Document> {
        self.documents
            .iter()
            .zip(&self.pad_mask)
            .map(|(doc, mask)| {
                let real = mask.iter().filter(|m| **m).count();
                let mut out = doc.clone();
                out.elements.truncate(real);
                out
            })
            .collect()
    }
}

/// Pads all documents to the maximum element count in the list.
pub fn pad_batch(documents: &[Document], schema: &Schema) -> Result<Batch> {
    if documents.is_empty() {
        return Err(Error::InvalidArgument("pad_batch: empty document list".into()));
    }
    let s_max = documents.iter().map(Document::len).max().unwrap();
    let mut padded = Vec::with_capacity(documents.len());
    let mut pad_mask = Vec::with_capacity(documents.len());
    for doc in documents {
        let mut out = doc.clone();
        let mut mask = vec![true; doc.len()];
        while out.elements.len() < s_max {
            out.elements.push(Element::null(schema));
            mask.push(false);
        }
        padded.push(out);
        pad_mask.push(mask);
    }
    Ok(Batch {
        documents: padded,
        pad_mask,
        s_max,
    })
}

/// Uniform binning of a value in [0, 1]: `floor(value * bins)`, clamped to
/// `bins - 1` at the upper edge.
pub fn discretize(value: f64, bins: usize) -> Result<usize> {
    if bins == 0 {
        return Err(Error::InvalidArgument("discretize: bins must be positive".into()));
    }
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(Error::InvalidArgument(format!(
            "discretize: value {value} outside [0, 1]"
        )));
    }
    Ok(((value * bins as f64) as usize).min(bins - 1))
}

/// Inverse of [`discretize`]: the bin center `(bin + 0.5) / bins`.
pub fn undiscretize(bin: usize, bins: usize) -> f64 {
    (bin as f64 + 0.5) / bins as f64
}

/// Reads a JSONL corpus, one document per line.
pub fn read_jsonl(path: &Path, schema: &Schema) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        docs.push(
            Document::from_json_str(line, schema)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?,
        );
    }
    Ok(docs)
}

/// Writes a JSONL corpus, one document per line.
pub fn write_jsonl(path: &Path, docs: &[Document], schema: &Schema) -> Result<()> {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&doc.to_json_string(schema));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Ten-attribute schema with three image-only attributes; used by the
    /// masking examples as well.
    pub(crate) fn ten_attr_schema() -> Schema {
        let mut attrs = vec![AttributeSpec {
            name: "type".into(),
            kind: AttributeKind::Categorical { cardinality: 3 },
            group: AttributeGroup::Type,
            applies_to: None,
        }];
        for name in ["x", "y", "w", "h"] {
            attrs.push(AttributeSpec {
                name: name.into(),
                kind: AttributeKind::Categorical { cardinality: 64 },
                group: AttributeGroup::Pos,
                applies_to: None,
            });
        }
        attrs.push(AttributeSpec {
            name: "color".into(),
            kind: AttributeKind::Categorical { cardinality: 16 },
            group: AttributeGroup::Attr,
            applies_to: None,
        });
        attrs.push(AttributeSpec {
            name: "font".into(),
            kind: AttributeKind::Categorical { cardinality: 8 },
            group: AttributeGroup::Attr,
            applies_to: Some([2].into()),
        });
        // image-only attributes (type id 1)
        attrs.push(AttributeSpec {
            name: "image_feat".into(),
            kind: AttributeKind::Numerical { dim: 4 },
            group: AttributeGroup::Img,
            applies_to: Some([1].into()),
        });
        attrs.push(AttributeSpec {
            name: "image_filter".into(),
            kind: AttributeKind::Categorical { cardinality: 5 },
            group: AttributeGroup::Img,
            applies_to: Some([1].into()),
        });
        attrs.push(AttributeSpec {
            name: "image_alpha".into(),
            kind: AttributeKind::Numerical { dim: 1 },
            group: AttributeGroup::Img,
            applies_to: Some([1].into()),
        });
        Schema::new(attrs, Some(vec!["shape".into(), "image".into(), "text".into()])).unwrap()
    }

    pub(crate) fn element_of_type(schema: &Schema, type_id: usize) -> Element {
        let mut fields = Vec::new();
        for (k, spec) in schema.attributes().iter().enumerate() {
            if k == schema.type_index() {
                fields.push(FieldValue::Categorical(type_id));
            } else if !spec.applies_to_type(type_id) {
                fields.push(FieldValue::Null);
            } else {
                fields.push(match &spec.kind {
                    AttributeKind::Categorical { cardinality } => {
                        FieldValue::Categorical(type_id % cardinality)
                    }
                    AttributeKind::Numerical { dim } => {
                        FieldValue::Numerical(vec![0.25; *dim])
                    }
                });
            }
        }
        Element::new(fields)
    }

    fn doc_with_types(schema: &Schema, types: &[usize]) -> Document {
        Document::new(
            "test-doc",
            types.iter().map(|&t| element_of_type(schema, t)).collect(),
        )
    }

    #[test]
    fn schema_invariants_enforced() {
        let bad = Schema::new(
            vec![AttributeSpec {
                name: "type".into(),
                kind: AttributeKind::Categorical { cardinality: 1 },
                group: AttributeGroup::Type,
                applies_to: None,
            }],
            None,
        );
        assert!(bad.is_err());

        let no_type = Schema::new(
            vec![AttributeSpec {
                name: "x".into(),
                kind: AttributeKind::Categorical { cardinality: 4 },
                group: AttributeGroup::Pos,
                applies_to: None,
            }],
            None,
        );
        assert!(no_type.is_err());

        let dup = Schema::new(
            vec![
                AttributeSpec {
                    name: "type".into(),
                    kind: AttributeKind::Categorical { cardinality: 3 },
                    group: AttributeGroup::Type,
                    applies_to: None,
                },
                AttributeSpec {
                    name: "type".into(),
                    kind: AttributeKind::Categorical { cardinality: 3 },
                    group: AttributeGroup::Attr,
                    applies_to: None,
                },
            ],
            None,
        );
        assert!(dup.is_err());
    }

    #[test]
    fn validate_flags_inapplicable_non_null() {
        let schema = ten_attr_schema();
        let mut doc = doc_with_types(&schema, &[0, 1, 2]);
        // give the shape element (type 0) a non-Null font (text-only attribute)
        let font = schema.index_of("font").unwrap();
        doc.elements[0].set_field(font, FieldValue::Categorical(3));
        let report = validate(&doc, &schema);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].element, Some(0));
        assert_eq!(report.violations[0].attribute.as_deref(), Some("font"));
    }

    #[test]
    fn validate_well_formed_document_is_clean() {
        let schema = ten_attr_schema();
        let doc = doc_with_types(&schema, &[0, 1, 2, 2, 0]);
        assert!(validate(&doc, &schema).is_empty());
    }

    #[test]
    fn validate_rejects_oversized_documents() {
        let schema = ten_attr_schema();
        let doc = doc_with_types(&schema, &vec![0; 51]);
        let report = validate(&doc, &schema);
        assert!(report
            .violations
            .iter()
            .any(|v| v.message.contains("51 elements")));
    }

    #[test]
    fn serialize_round_trip_preserves_document() {
        let schema = ten_attr_schema();
        let mut doc = doc_with_types(&schema, &[1, 2, 0]);
        doc.canvas = Some([("width".to_string(), 256.0), ("height".to_string(), 128.0)].into());
        let text = doc.to_json_string(&schema);
        let back = Document::from_json_str(&text, &schema).unwrap();
        assert_eq!(doc, back);
    }

    #[test]
    fn deserialize_rejects_out_of_range_id() {
        let schema = ten_attr_schema();
        let doc = doc_with_types(&schema, &[0]);
        let text = doc.to_json_string(&schema).replace("\"color\":0", "\"color\":16");
        let err = Document::from_json_str(&text, &schema).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn deserialize_mask_sentinel_round_trips() {
        let schema = ten_attr_schema();
        let mut doc = doc_with_types(&schema, &[2]);
        let color = schema.index_of("color").unwrap();
        doc.elements[0].set_field(color, FieldValue::Mask);
        let text = doc.to_json_string(&schema);
        assert!(text.contains(MASK_SENTINEL));
        let back = Document::from_json_str(&text, &schema).unwrap();
        assert_eq!(back.elements[0].field(color), &FieldValue::Mask);
    }

    #[test]
    fn deserialize_rejects_unknown_attribute() {
        let schema = ten_attr_schema();
        let doc = doc_with_types(&schema, &[0]);
        let text = doc
            .to_json_string(&schema)
            .replace("\"color\"", "\"colour\"");
        assert!(Document::from_json_str(&text, &schema).is_err());
    }

    #[test]
    fn deserialize_rejects_wrong_length_vector() {
        let schema = ten_attr_schema();
        let doc = doc_with_types(&schema, &[1]);
        let text = doc.to_json_string(&schema).replace(
            "\"image_feat\":[0.25,0.25,0.25,0.25]",
            "\"image_feat\":[0.25,0.25]",
        );
        let err = Document::from_json_str(&text, &schema).unwrap_err();
        assert!(err.to_string().contains("length"), "{err}");
    }

    #[test]
    fn pad_batch_pads_to_longest() {
        let schema = ten_attr_schema();
        let docs = vec![
            doc_with_types(&schema, &[0, 1, 2]),
            doc_with_types(&schema, &[0, 1, 2, 0, 1]),
            doc_with_types(&schema, &[2, 2]),
        ];
        let batch = pad_batch(&docs, &schema).unwrap();
        assert_eq!(batch.s_max, 5);
        let sums: Vec<usize> = batch
            .pad_mask
            .iter()
            .map(|m| m.iter().filter(|x| **x).count())
            .collect();
        assert_eq!(sums, vec![3, 5, 2]);
        for (doc, mask) in batch.documents.iter().zip(&batch.pad_mask) {
            assert_eq!(doc.len(), 5);
            for (elem, real) in doc.elements.iter().zip(mask) {
                if !real {
                    assert!(elem.is_all_null());
                }
            }
        }
        assert_eq!(batch.unpad(), docs);
    }

    #[test]
    fn pad_batch_single_document_adds_nothing() {
        let schema = ten_attr_schema();
        let docs = vec![doc_with_types(&schema, &[0, 1, 2, 0])];
        let batch = pad_batch(&docs, &schema).unwrap();
        assert_eq!(batch.s_max, 4);
        assert_eq!(batch.documents[0], docs[0]);
    }

    #[test]
    fn pad_batch_rejects_empty_input() {
        let schema = ten_attr_schema();
        assert!(pad_batch(&[], &schema).is_err());
    }

    #[test]
    fn pad_batch_extreme_sizes() {
        let schema = ten_attr_schema();
        let docs = vec![
            doc_with_types(&schema, &[0]),
            doc_with_types(&schema, &vec![1; 50]),
        ];
        let batch = pad_batch(&docs, &schema).unwrap();
        assert_eq!(batch.s_max, 50);
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(0.0, 64).unwrap(), 0);
        assert_eq!(discretize(1.0, 64).unwrap(), 63);
        assert_eq!(discretize(0.5, 16).unwrap(), 8);
        assert_eq!(undiscretize(8, 16), 0.53125);
        assert!(discretize(-0.1, 64).is_err());
        assert!(discretize(1.1, 64).is_err());
    }

    #[test]
    fn discretize_round_trip_error_bound() {
        for bins in [16usize, 64] {
            for i in 0..1000 {
                let v = i as f64 / 1000.0;
                let bin = discretize(v, bins).unwrap();
                let back = undiscretize(bin, bins);
                assert!(
                    (back - v).abs() <= 0.5 / bins as f64 + 1e-12,
                    "v={v} bins={bins} back={back}"
                );
            }
        }
    }

    #[test]
    fn schema_hash_is_stable_and_sensitive() {
        let a = ten_attr_schema();
        let b = ten_attr_schema();
        assert_eq!(a.hash(), b.hash());
        let mut attrs = a.attributes().to_vec();
        attrs[5].name = "colour".into();
        let c = Schema::new(attrs, a.type_names().map(|n| n.to_vec())).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn schema_file_round_trip() {
        let schema = ten_attr_schema();
        let json = schema.canonical_json();
        let back: Schema = serde_json::from_str(&json).unwrap();
        assert_eq!(schema, back);
    }
}
