//! Qualitative output: nearest-neighbor decoding of predicted feature
//! vectors against an asset gallery, and SVG rendering of documents as
//! type-colored bounding boxes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeKind, Document, FieldValue, Schema};

/// One retrievable asset: a feature vector plus a reference to the actual
/// payload (image path, text content, ...).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Asset {
    pub attribute: String,
    pub asset_id: u64,
    pub vector: Vec<f64>,
    pub payload: String,
}

/// Per-attribute lists of assets for nearest-neighbor retrieval.
#[derive(Debug, Clone, Default)]
pub struct AssetGallery {
    by_attribute: BTreeMap<String, Vec<Asset>>,
}

impl AssetGallery {
    pub fn new() -> AssetGallery {
        AssetGallery::default()
    }

    pub fn insert(&mut self, asset: Asset) {
        self.by_attribute
            .entry(asset.attribute.clone())
            .or_default()
            .push(asset);
    }

    pub fn assets(&self, attribute: &str) -> Option<&[Asset]> {
        self.by_attribute.get(attribute).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_attribute.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_attribute.is_empty()
    }

    /// Collects every non-Null numerical field of the documents as an
    /// asset; ids are assigned in document order.
    pub fn from_documents(docs: &[Document], schema: &Schema) -> AssetGallery {
        let mut gallery = AssetGallery::new();
        let mut next_id = 0u64;
        for doc in docs {
            for (i, element) in doc.elements.iter().enumerate() {
                for (k, spec) in schema.attributes().iter().enumerate() {
                    if !matches!(spec.kind, AttributeKind::Numerical { .. }) {
                        continue;
                    }
                    if let FieldValue::Numerical(v) = element.field(k) {
                        gallery.insert(Asset {
                            attribute: spec.name.clone(),
                            asset_id: next_id,
                            vector: v.clone(),
                            payload: format!("{}#{}", doc.id, i),
                        });
                        next_id += 1;
                    }
                }
            }
        }
        gallery
    }

    /// Gallery file: JSONL of assets.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for assets in self.by_attribute.values() {
            for asset in assets {
                out.push_str(&serde_json::to_string(asset)?);
                out.push('\n');
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AssetGallery> {
        let text = std::fs::read_to_string(path)?;
        let mut gallery = AssetGallery::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let asset: Asset = serde_json::from_str(line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            gallery.insert(asset);
        }
        Ok(gallery)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Returns the asset id with the highest cosine similarity to the query;
/// ties break to the lowest asset id.
pub fn nn_retrieve(query: &[f64], gallery: &AssetGallery, attribute: &str) -> Result<u64> {
    let assets = gallery
        .assets(attribute)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| Error::Eval(format!("gallery has no assets for attribute `{attribute}`")))?;
    let mut best: Option<(f64, u64)> = None;
    for asset in assets {
        if asset.vector.len() != query.len() {
            return Err(Error::Eval(format!(
                "asset {} has dim {}, query has dim {}",
                asset.asset_id,
                asset.vector.len(),
                query.len()
            )));
        }
        let sim = cosine(query, &asset.vector);
        let better = match best {
            None => true,
            Some((s, id)) => sim > s || (sim == s && asset.asset_id < id),
        };
        if better {
            best = Some((sim, asset.asset_id));
        }
    }
    Ok(best.expect("non-empty asset list").1)
}

/// Fig.-style palette keyed by element-type name; unknown names cycle
/// through the palette by type id.
const TYPE_COLORS: [(&str, &str); 4] = [
    ("shape", "green"),
    ("image", "magenta"),
    ("text", "purple"),
    ("fill", "yellow"),
];

const FALLBACK_COLORS: [&str; 6] = ["green", "magenta", "purple", "yellow", "orange", "teal"];

#[derive(Debug, Clone)]
pub struct RenderStyle {
    pub canvas_width: f64,
    pub canvas_height: f64,
    pub fill_opacity: f64,
}

impl Default for RenderStyle {
    fn default() -> RenderStyle {
        RenderStyle {
            canvas_width: 256.0,
            canvas_height: 256.0,
            fill_opacity: 0.6,
        }
    }
}

fn type_color(schema: &Schema, type_id: usize) -> &'static str {
    if let Some(names) = schema.type_names() {
        if let Some(name) = names.get(type_id) {
            for (n, c) in TYPE_COLORS {
                if n == name {
                    return c;
                }
            }
        }
    }
    FALLBACK_COLORS[type_id % FALLBACK_COLORS.len()]
}

/// Renders one rectangle per element, colored by element type. Position
/// bins map to the bin's lower edge `k / bins` and size bins to the upper
/// edge `(k + 1) / bins`, so a full-canvas element covers the viewBox
/// exactly. Elements with unresolvable position fields are drawn as a
/// dashed outline at the canvas center and flagged.
pub fn render_svg(doc: &Document, schema: &Schema, style: &RenderStyle) -> Result<String> {
    let (w, h) = (style.canvas_width, style.canvas_height);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.2} {h:.2}" width="{w:.2}" height="{h:.2}">"#
    )
    .unwrap();
    writeln!(
        svg,
        r#"  <rect x="0" y="0" width="{w:.2}" height="{h:.2}" fill="white" stroke="gray"/>"#
    )
    .unwrap();

    let pos_attr = |name: &str| -> Option<(usize, usize)> {
        let k = schema.index_of(name)?;
        match schema.attr(k).kind {
            AttributeKind::Categorical { cardinality } => Some((k, cardinality)),
            AttributeKind::Numerical { .. } => None,
        }
    };
    let coords = ["x", "y", "width", "height"].map(pos_attr);

    for (i, element) in doc.elements.iter().enumerate() {
        let type_id = element.type_id(schema).unwrap_or(0);
        let color = type_color(schema, type_id);
        let mut resolved = [0.0f64; 4];
        let mut ok = true;
        for (slot, attr) in resolved.iter_mut().zip(&coords) {
            match attr {
                Some((k, bins)) => match element.field(*k) {
                    FieldValue::Categorical(bin) => {
                        *slot = *bin as f64 / *bins as f64;
                    }
                    _ => ok = false,
                },
                None => ok = false,
            }
        }
        if ok {
            // sizes take the bin's upper edge
            let bins_w = coords[2].unwrap().1 as f64;
            let bins_h = coords[3].unwrap().1 as f64;
            let (x, y) = (resolved[0] * w, resolved[1] * h);
            let rw = (resolved[2] + 1.0 / bins_w) * w;
            let rh = (resolved[3] + 1.0 / bins_h) * h;
            writeln!(
                svg,
                r#"  <rect data-element="{i}" x="{x:.2}" y="{y:.2}" width="{rw:.2}" height="{rh:.2}" fill="{color}" fill-opacity="{:.2}" stroke="{color}"/>"#,
                style.fill_opacity
            )
            .unwrap();
        } else {
            let (rw, rh) = (w * 0.25, h * 0.25);
            let (x, y) = ((w - rw) / 2.0, (h - rh) / 2.0);
            writeln!(
                svg,
                r#"  <rect data-element="{i}" data-flag="missing-pos" x="{x:.2}" y="{y:.2}" width="{rw:.2}" height="{rh:.2}" fill="none" stroke="{color}" stroke-dasharray="4 2"/>"#
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
