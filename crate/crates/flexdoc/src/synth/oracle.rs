//! Closed-form Bayes predictor for the synthetic generator.
//!
//! Observed fields are conditionally independent given the document theme
//! (and the visible element types), so the posterior over themes
//! factorizes over elements and the per-field posterior predictive has a
//! closed form. Categorical fields take the posterior mode, numerical
//! fields the posterior mean. The oracle sees exactly what a model sees,
//! the masked input, and therefore also uses the applicability structure
//! the mask and the visible `Null` fields reveal (e.g. an element whose
//! mask covers `font` must be a text element), plus the generator's
//! guarantee that every document contains an image and a text element.

use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::mask::{MaskSet, TaskSpec};
use crate::schema::{Document, FieldValue, Schema};
use crate::util::logsumexp;

use super::{crello_like_schema, GeneratorConfig, TYPE_IMAGE, TYPE_TEXT, TYPE_PROBS};

pub struct BayesOracle {
    cfg: GeneratorConfig,
    schema: Schema,
    idx_type: usize,
    idx_pos: [usize; 4],
    idx_color: [usize; 3],
    idx_font: usize,
    idx_img: usize,
    idx_txt: usize,
}

/// Visible fields of one element of the masked input.
#[derive(Default)]
struct Evidence {
    type_id: Option<usize>,
    pos: [Option<usize>; 4],
    color: [Option<usize>; 3],
    font: Option<usize>,
    img_feat: Option<Vec<f64>>,
    txt_feat: Option<Vec<f64>>,
    /// Attribute indices that are masked / visible-Null on this element.
    masked: Vec<usize>,
    nulls: Vec<usize>,
}

fn softmax_vec(log_weights: &[f64]) -> Vec<f64> {
    let z = logsumexp(log_weights);
    log_weights.iter().map(|l| (l - z).exp()).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl BayesOracle {
    pub fn new(cfg: GeneratorConfig) -> BayesOracle {
        let schema = crello_like_schema(&cfg);
        let idx = |name: &str| schema.index_of(name).expect("preset attribute");
        BayesOracle {
            idx_type: idx("type"),
            idx_pos: [idx("x"), idx("y"), idx("width"), idx("height")],
            idx_color: [idx("color_r"), idx("color_g"), idx("color_b")],
            idx_font: idx("font"),
            idx_img: idx("image_feat"),
            idx_txt: idx("text_feat"),
            schema,
            cfg,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    fn mix(&self, hit: bool, bins: usize) -> f64 {
        self.cfg.rho * f64::from(hit) + (1.0 - self.cfg.rho) / bins as f64
    }

    /// Unnormalized Gaussian log-likelihood; the shared normalizer cancels
    /// inside every mixture this feeds.
    fn log_gauss(&self, x: &[f64], mean: &[f64]) -> f64 {
        let s2 = self.cfg.noise_sigma * self.cfg.noise_sigma;
        let d2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
        -d2 / (2.0 * s2)
    }

    /// Log-likelihood of an element's visible fields given its type and the
    /// document theme. Fields that cannot belong to the type yield -inf.
    fn elem_loglik(&self, ev: &Evidence, c: usize, theme: usize) -> f64 {
        if (ev.font.is_some() || ev.txt_feat.is_some()) && c != TYPE_TEXT {
            return f64::NEG_INFINITY;
        }
        if ev.img_feat.is_some() && c != TYPE_IMAGE {
            return f64::NEG_INFINITY;
        }
        let mut lp = 0.0;
        let pos_table = self.cfg.pos_table(c);
        for (a, bin) in ev.pos.iter().enumerate() {
            if let Some(bin) = bin {
                lp += self.mix(*bin == pos_table[a], self.cfg.pos_bins).ln();
            }
        }
        let color_table = self.cfg.color_table(c, theme);
        for (ch, bin) in ev.color.iter().enumerate() {
            if let Some(bin) = bin {
                lp += self.mix(*bin == color_table[ch], self.cfg.color_bins).ln();
            }
        }
        if c == TYPE_TEXT {
            // the theme pins the text cluster
            let z = self.cfg.theme_cluster(theme);
            if let Some(f) = ev.font {
                lp += self.mix(f == z, self.cfg.font_cardinality).ln();
            }
            if let Some(v) = &ev.txt_feat {
                lp += self.log_gauss(v, &self.cfg.text_mean(z));
            }
        }
        if c == TYPE_IMAGE {
            if let Some(v) = &ev.img_feat {
                lp += self.log_gauss(v, &self.cfg.image_mean(theme));
            }
        }
        lp
    }

    /// As [`Self::elem_loglik`] with the type marginalized out.
    fn elem_loglik_marginal(&self, ev: &Evidence, theme: usize) -> f64 {
        match ev.type_id {
            Some(c) => self.elem_loglik(ev, c, theme),
            None => {
                let terms: Vec<f64> = TYPE_PROBS
                    .iter()
                    .enumerate()
                    .map(|(c, p)| p.ln() + self.elem_loglik(ev, c, theme))
                    .collect();
                logsumexp(&terms)
            }
        }
    }

    fn collect_evidence(&self, doc: &Document) -> Result<Vec<Evidence>> {
        if doc.elements.iter().any(|e| e.fields().len() != self.schema.len()) {
            return Err(Error::Eval(format!(
                "document `{}` was not produced by this generator (wrong field count)",
                doc.id
            )));
        }
        let mut out = Vec::with_capacity(doc.len());
        for element in &doc.elements {
            let mut ev = Evidence::default();
            for (k, value) in element.fields().iter().enumerate() {
                match value {
                    FieldValue::Mask => ev.masked.push(k),
                    FieldValue::Null => ev.nulls.push(k),
                    FieldValue::Categorical(v) => {
                        if k == self.idx_type {
                            ev.type_id = Some(*v);
                        } else if let Some(a) = self.idx_pos.iter().position(|&i| i == k) {
                            ev.pos[a] = Some(*v);
                        } else if let Some(ch) = self.idx_color.iter().position(|&i| i == k) {
                            ev.color[ch] = Some(*v);
                        } else if k == self.idx_font {
                            ev.font = Some(*v);
                        }
                    }
                    FieldValue::Numerical(v) => {
                        if k == self.idx_img {
                            ev.img_feat = Some(v.clone());
                        } else if k == self.idx_txt {
                            ev.txt_feat = Some(v.clone());
                        }
                    }
                }
            }
            out.push(ev);
        }
        Ok(out)
    }

    /// Posterior weights over the masked element's type. Combines the type
    /// prior, the applicability pattern the mask and visible Nulls reveal,
    /// the at-least-one-image-and-text guarantee, and the element's own
    /// visible fields.
    fn type_weights(&self, ev: &Evidence, all: &[Evidence], self_idx: usize, post_t: &[f64]) -> Vec<f64> {
        if let Some(c) = ev.type_id {
            let mut w = vec![0.0; TYPE_PROBS.len()];
            w[c] = 1.0;
            return w;
        }
        let mut allowed = [true; 4];
        for (c, slot) in allowed.iter_mut().enumerate() {
            for &k in &ev.masked {
                if k != self.idx_type && !self.schema.attr(k).applies_to_type(c) {
                    *slot = false;
                }
            }
            // generated documents never leave an applicable field Null
            for &k in &ev.nulls {
                if self.schema.attr(k).applies_to_type(c) {
                    *slot = false;
                }
            }
        }
        let masked_types = all.iter().filter(|e| e.type_id.is_none()).count();
        if masked_types == 1 {
            let visible_has = |ty: usize| {
                all.iter()
                    .enumerate()
                    .any(|(j, e)| j != self_idx && e.type_id == Some(ty))
            };
            if !visible_has(TYPE_IMAGE) {
                for (c, slot) in allowed.iter_mut().enumerate() {
                    *slot &= c == TYPE_IMAGE;
                }
            }
            if !visible_has(TYPE_TEXT) {
                for (c, slot) in allowed.iter_mut().enumerate() {
                    *slot &= c == TYPE_TEXT;
                }
            }
        }
        if !allowed.iter().any(|&a| a) {
            allowed = [true; 4];
        }
        let log_w: Vec<f64> = TYPE_PROBS
            .iter()
            .enumerate()
            .map(|(c, p)| {
                if !allowed[c] {
                    return f64::NEG_INFINITY;
                }
                let lik: Vec<f64> = post_t
                    .iter()
                    .enumerate()
                    .map(|(t, pt)| pt.max(1e-300).ln() + self.elem_loglik(ev, c, t))
                    .collect();
                p.ln() + logsumexp(&lik)
            })
            .collect();
        softmax_vec(&log_w)
    }

    fn predict_doc(&self, input: &Document, mask: &MaskSet) -> Result<Document> {
        let cfg = &self.cfg;
        let evidence = self.collect_evidence(input)?;
        let theme_logpost: Vec<f64> = (0..cfg.num_themes)
            .map(|t| evidence.iter().map(|ev| self.elem_loglik_marginal(ev, t)).sum())
            .collect();
        let post_t = softmax_vec(&theme_logpost);

        let type_w: Vec<Vec<f64>> = evidence
            .iter()
            .enumerate()
            .map(|(i, ev)| self.type_weights(ev, &evidence, i, &post_t))
            .collect();

        let mut out = input.clone();
        for (i, k) in mask.iter() {
            let w = &type_w[i];
            let value = if k == self.idx_type {
                FieldValue::Categorical(argmax(w))
            } else if let Some(a) = self.idx_pos.iter().position(|&x| x == k) {
                let mut score = vec![0.0; cfg.pos_bins];
                for (c, &wc) in w.iter().enumerate() {
                    score[cfg.pos_table(c)[a]] += wc * cfg.rho;
                }
                FieldValue::Categorical(argmax(&score))
            } else if let Some(ch) = self.idx_color.iter().position(|&x| x == k) {
                let mut score = vec![0.0; cfg.color_bins];
                for (t, &pt) in post_t.iter().enumerate() {
                    for (c, &wc) in w.iter().enumerate() {
                        score[cfg.color_table(c, t)[ch]] += pt * wc * cfg.rho;
                    }
                }
                FieldValue::Categorical(argmax(&score))
            } else if k == self.idx_font {
                // masked font implies a text element
                let mut score = vec![0.0; cfg.font_cardinality];
                for (t, &pt) in post_t.iter().enumerate() {
                    let z = cfg.theme_cluster(t);
                    for (f, s) in score.iter_mut().enumerate() {
                        *s += pt * self.mix(f == z, cfg.font_cardinality);
                    }
                }
                FieldValue::Categorical(argmax(&score))
            } else if k == self.idx_txt {
                let mut mean = vec![0.0; cfg.feature_dim];
                for (t, &pt) in post_t.iter().enumerate() {
                    for (m, mu) in mean.iter_mut().zip(cfg.text_mean(cfg.theme_cluster(t))) {
                        *m += pt * mu;
                    }
                }
                FieldValue::Numerical(mean)
            } else if k == self.idx_img {
                let mut mean = vec![0.0; cfg.feature_dim];
                for (t, &pt) in post_t.iter().enumerate() {
                    for (m, mu) in mean.iter_mut().zip(cfg.image_mean(t)) {
                        *m += pt * mu;
                    }
                }
                FieldValue::Numerical(mean)
            } else {
                return Err(Error::Eval(format!("unexpected masked attribute index {k}")));
            };
            out.elements[i].set_field(k, value);
        }
        Ok(out)
    }
}

impl Predictor for BayesOracle {
    fn name(&self) -> String {
        "bayes-oracle".into()
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
            .map(|(doc, mask)| self.predict_doc(doc, mask))
            .collect()
    }
}
