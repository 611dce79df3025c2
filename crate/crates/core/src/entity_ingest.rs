//! Entity annotations: parsing, validation, deduplication, pseudo-labels.
//!
//! One JSON document per image pair:
//!
//! ```json
//! {"image_id": "00012", "entities": [
//!     {"text": "car", "source": "vi", "embedding": [0.01, ...]},
//!     {"text": "person", "source": "ir", "embedding_ref": {"file": "00012.egt", "row": 1}}
//! ]}
//! ```
//!
//! `embedding` holds exactly [`EMBEDDING_DIM`] numbers. `embedding_ref`
//! points at a row of an `EGT1` matrix stored next to the document.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{egt, Tensor};

pub const EMBEDDING_DIM: usize = 768;
pub const MAX_ENTITIES: usize = 16;
pub const NUM_LABELS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Ir,
    Vi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub text: String,
    pub source: Source,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityAnnotation {
    pub image_id: String,
    pub entities: Vec<EntityRecord>,
}

/// Case-folding used for every entity comparison.
pub fn fold(text: &str) -> String {
    text.to_lowercase()
}

/// Trims each string and drops later case-insensitive duplicates. Strings
/// that are empty after trimming are dropped as well.
pub fn dedupe_entities<S: AsRef<str>>(texts: &[S]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in texts {
        let t = t.as_ref().trim();
        if !t.is_empty() && seen.insert(fold(t)) {
            out.push(t.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRef {
    pub file: String,
    pub row: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntity {
    text: String,
    source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_ref: Option<EmbeddingRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    image_id: String,
    entities: Vec<RawEntity>,
}

/// Parses a document whose embeddings are all inline.
pub fn parse_annotation(document: &[u8]) -> Result<EntityAnnotation> {
    parse_annotation_in(document, None)
}

/// Parses a document, resolving `embedding_ref` files relative to
/// `base_dir`.
pub fn parse_annotation_in(document: &[u8], base_dir: Option<&Path>) -> Result<EntityAnnotation> {
    let raw: RawAnnotation = serde_json::from_slice(document)
        .map_err(|e| Error::Annotation(format!("malformed JSON: {e}")))?;
    let mut sidecars: HashMap<PathBuf, Tensor> = HashMap::new();
    let mut entities = Vec::with_capacity(raw.entities.len());
    for (i, e) in raw.entities.into_iter().enumerate() {
        let embedding = match (e.embedding, e.embedding_ref) {
            (Some(v), None) => v,
            (None, Some(r)) => {
                let dir = base_dir.ok_or_else(|| {
                    Error::Annotation(format!(
                        "entity {i}: embedding_ref needs the document's directory"
                    ))
                })?;
                let path = dir.join(&r.file);
                if !sidecars.contains_key(&path) {
                    let t = egt::load(&path)?;
                    sidecars.insert(path.clone(), t);
                }
                sidecar_row(&sidecars[&path], r.row)
                    .map_err(|why| Error::Annotation(format!("entity {i}: {why}")))?
            }
            _ => {
                return Err(Error::Annotation(format!(
                    "entity {i}: exactly one of embedding / embedding_ref is required"
                )))
            }
        };
        entities.push(EntityRecord {
            text: e.text,
            source: e.source,
            embedding,
        });
    }
    let annotation = EntityAnnotation {
        image_id: raw.image_id,
        entities,
    };
    validate(&annotation)?;
    Ok(annotation)
}

fn sidecar_row(t: &Tensor, row: usize) -> std::result::Result<Vec<f64>, String> {
    if t.rank() != 2 || t.dim(1) != EMBEDDING_DIM {
        return Err(format!(
            "embedding length: sidecar shape {:?} is not [E, {EMBEDDING_DIM}]",
            t.shape()
        ));
    }
    if row >= t.dim(0) {
        return Err(format!("sidecar row {row} out of range ({} rows)", t.dim(0)));
    }
    Ok(t.row(row).to_vec())
}

/// Reads and parses an annotation file.
pub fn load_annotation(path: &Path) -> Result<EntityAnnotation> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_annotation_in(&bytes, path.parent())
        .map_err(|e| Error::Annotation(format!("{}: {e}", path.display())))
}

/// Checks every invariant of [`EntityAnnotation`].
pub fn validate(a: &EntityAnnotation) -> Result<()> {
    let err = |m: String| Err(Error::Annotation(m));
    if a.image_id.is_empty() {
        return err("empty image_id".into());
    }
    if a.entities.is_empty() {
        return err("empty entity list".into());
    }
    if a.entities.len() > MAX_ENTITIES {
        return err(format!(
            "{} entities exceeds the limit of {MAX_ENTITIES}",
            a.entities.len()
        ));
    }
    let mut seen = BTreeSet::new();
    for (i, e) in a.entities.iter().enumerate() {
        if e.text.is_empty() {
            return err(format!("entity {i}: empty text"));
        }
        if e.text.trim() != e.text {
            return err(format!("entity {i}: surrounding whitespace in {:?}", e.text));
        }
        if !seen.insert(fold(&e.text)) {
            return err(format!("entity {i}: duplicate entity {:?}", e.text));
        }
        if e.embedding.len() != EMBEDDING_DIM {
            return err(format!(
                "entity {i}: embedding length {} (expected {EMBEDDING_DIM})",
                e.embedding.len()
            ));
        }
        if e.embedding.iter().any(|v| !v.is_finite()) {
            return err(format!("entity {i}: non-finite embedding value"));
        }
    }
    Ok(())
}

fn to_raw(a: &EntityAnnotation) -> RawAnnotation {
    RawAnnotation {
        image_id: a.image_id.clone(),
        entities: a
            .entities
            .iter()
            .map(|e| RawEntity {
                text: e.text.clone(),
                source: e.source,
                embedding: Some(e.embedding.clone()),
                embedding_ref: None,
            })
            .collect(),
    }
}

/// Canonical form: compact JSON, object keys in lexicographic order,
/// embeddings inline, numbers in shortest round-trip notation.
pub fn serialize(a: &EntityAnnotation) -> String {
    let value = serde_json::to_value(to_raw(a)).expect("annotation is always representable");
    value.to_string()
}

/// Writes `a` as a document whose embeddings live in the `EGT1` sidecar
/// `sidecar_name` (relative to the document). Returns the document text and
/// the sidecar matrix.
pub fn serialize_with_sidecar(a: &EntityAnnotation, sidecar_name: &str) -> (String, Tensor) {
    let mut raw = to_raw(a);
    for (row, e) in raw.entities.iter_mut().enumerate() {
        e.embedding = None;
        e.embedding_ref = Some(EmbeddingRef {
            file: sidecar_name.to_string(),
            row,
        });
    }
    let doc = serde_json::to_value(raw).expect("representable").to_string();
    (doc, stack_entity_features(a))
}

/// Row `e` is the embedding of entity `e`.
pub fn stack_entity_features(a: &EntityAnnotation) -> Tensor {
    let data = a
        .entities
        .iter()
        .flat_map(|e| e.embedding.iter().copied())
        .collect();
    Tensor::new(&[a.entities.len(), EMBEDDING_DIM], data)
        .expect("validated annotations have at least one entity")
}

/// Multi-hot pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelVector(pub [bool; NUM_LABELS]);

impl LabelVector {
    pub fn as_f64(&self) -> [f64; NUM_LABELS] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// The nine label categories and the entity strings that map to each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVocabulary {
    categories: Vec<String>,
    lookup: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVocabulary {
    categories: Vec<String>,
    synonyms: BTreeMap<String, Vec<String>>,
}

impl LabelVocabulary {
    /// The shipped placeholder vocabulary. The category set is a stand-in;
    /// supply a vocabulary file to match a particular dataset.
    pub fn default_vocabulary() -> Self {
        Self::from_json(include_bytes!("../assets/vocabulary.json"))
            .expect("shipped vocabulary is valid")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let raw: RawVocabulary = serde_json::from_slice(bytes)
            .map_err(|e| Error::Vocabulary(format!("malformed JSON: {e}")))?;
        if raw.categories.len() != NUM_LABELS {
            return Err(Error::Vocabulary(format!(
                "{} categories (expected {NUM_LABELS})",
                raw.categories.len()
            )));
        }
        let folded: BTreeSet<String> = raw.categories.iter().map(|c| fold(c)).collect();
        if folded.len() != NUM_LABELS {
            return Err(Error::Vocabulary("duplicate category names".into()));
        }
        let mut lookup = BTreeMap::new();
        for (cat, words) in &raw.synonyms {
            let Some(index) = raw.categories.iter().position(|c| c == cat) else {
                return Err(Error::Vocabulary(format!("synonyms for unknown category {cat:?}")));
            };
            for w in words {
                if let Some(prev) = lookup.insert(fold(w.trim()), index) {
                    if prev != index {
                        return Err(Error::Vocabulary(format!(
                            "{w:?} listed under both {:?} and {cat:?}",
                            raw.categories[prev]
                        )));
                    }
                }
            }
        }
        Ok(LabelVocabulary {
            categories: raw.categories,
            lookup,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Category whose synonym set contains `text` after case-folding.
    pub fn category_of(&self, text: &str) -> Option<usize> {
        self.lookup.get(&fold(text)).copied()
    }
}

/// Sets bit `c` when any entity belongs to category `c`; other entities are
/// ignored.
pub fn entities_to_labels(a: &EntityAnnotation, vocab: &LabelVocabulary) -> LabelVector {
    let mut bits = [false; NUM_LABELS];
    for e in &a.entities {
        if let Some(c) = vocab.category_of(&e.text) {
            bits[c] = true;
        }
    }
    LabelVector(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(text: &str, fill: f64) -> EntityRecord {
        EntityRecord {
            text: text.into(),
            source: Source::Vi,
            embedding: vec![fill; EMBEDDING_DIM],
        }
    }

    fn doc_with(n_embed: usize) -> String {
        let emb: Vec<String> = (0..n_embed).map(|_| "0.5".to_string()).collect();
        format!(
            r#"{{"image_id":"x","entities":[{{"text":"car","source":"ir","embedding":[{}]}}]}}"#,
            emb.join(",")
        )
    }

    #[test]
    fn dedupe_examples() {
        assert_eq!(dedupe_entities(&["Car", "car", "tree"]), vec!["Car", "tree"]);
        assert!(dedupe_entities::<&str>(&[]).is_empty());
        assert_eq!(dedupe_entities(&["a", "A", "a "]), vec!["a"]);
        let once = dedupe_entities(&[" Bus", "bus ", "Lamp", "LAMP", "x"]);
        assert_eq!(dedupe_entities(&once), once);
    }

    #[test]
    fn minimal_document_parses() {
        let a = parse_annotation(doc_with(EMBEDDING_DIM).as_bytes()).unwrap();
        assert_eq!(a.entities.len(), 1);
        assert_eq!(a.entities[0].source, Source::Ir);
    }

    #[test]
    fn rejects_invalid_documents() {
        let e = parse_annotation(doc_with(767).as_bytes()).unwrap_err();
        assert!(e.to_string().contains("embedding length"), "{e}");
        assert!(parse_annotation(b"{not json").is_err());
        assert!(parse_annotation(br#"{"image_id":"x","entities":[]}"#).is_err());
        let mut a = EntityAnnotation {
            image_id: "x".into(),
            entities: vec![record("Car", 0.1), record("car", 0.2)],
        };
        assert!(parse_annotation(serialize(&a).as_bytes()).is_err());
        a.entities[1].text = " tree".into();
        assert!(parse_annotation(serialize(&a).as_bytes()).is_err());
    }

    #[test]
    fn serialize_is_a_parse_fixed_point() {
        let a = EntityAnnotation {
            image_id: "p1".into(),
            entities: vec![record("car", 0.1), record("tree", -3.25e-5)],
        };
        let s = serialize(&a);
        let b = parse_annotation(s.as_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(serialize(&b), s);
    }

    #[test]
    fn random_documents_round_trip_exactly() {
        let mut rng = crate::numerics::Rng::seed_from_u64(20);
        for d in 0..20 {
            let n = 2 + rng.below(7);
            let entities = (0..n)
                .map(|i| EntityRecord {
                    text: format!("{}{i}", ["car", "road sign", "Person", "tree"][rng.below(4)]),
                    source: if rng.uniform() < 0.5 { Source::Ir } else { Source::Vi },
                    embedding: (0..EMBEDDING_DIM).map(|_| rng.normal() * 10f64.powi(rng.below(9) as i32 - 6)).collect(),
                })
                .collect();
            let a = EntityAnnotation {
                image_id: format!("doc_{d}"),
                entities,
            };
            let s = serialize(&a);
            let b = parse_annotation(s.as_bytes()).unwrap();
            assert_eq!(a, b, "doc {d}");
            assert_eq!(serialize(&b), s, "doc {d}");
        }
    }

    #[test]
    fn sidecar_documents_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = EntityAnnotation {
            image_id: "p2".into(),
            entities: vec![record("bus", 0.25), record("lamp", -0.5)],
        };
        a.entities[1].source = Source::Ir;
        let (doc, matrix) = serialize_with_sidecar(&a, "p2.egt");
        egt::save(&dir.path().join("p2.egt"), &matrix).unwrap();
        std::fs::write(dir.path().join("p2.json"), &doc).unwrap();
        assert_eq!(load_annotation(&dir.path().join("p2.json")).unwrap(), a);
        assert!(parse_annotation(doc.as_bytes()).is_err());
    }

    #[test]
    fn labels_from_default_vocabulary() {
        let v = LabelVocabulary::default_vocabulary();
        assert_eq!(v.categories().len(), NUM_LABELS);
        let a = EntityAnnotation {
            image_id: "x".into(),
            entities: vec![record("Cars", 0.0), record("sky", 0.0)],
        };
        let y = entities_to_labels(&a, &v);
        assert_eq!(y.count(), 1);
        assert!(y.0[1]);
        let none = EntityAnnotation {
            image_id: "x".into(),
            entities: vec![record("sky", 0.0)],
        };
        assert_eq!(entities_to_labels(&none, &v).count(), 0);
    }

    #[test]
    fn vocabulary_rejects_overlapping_synonyms() {
        let cats: Vec<String> = (0..9).map(|i| format!("\"c{i}\"")).collect();
        let doc = format!(
            r#"{{"categories":[{}],"synonyms":{{"c0":["Car"],"c1":["car"]}}}}"#,
            cats.join(",")
        );
        assert!(LabelVocabulary::from_json(doc.as_bytes()).is_err());
        let short = r#"{"categories":["a"],"synonyms":{}}"#;
        assert!(LabelVocabulary::from_json(short.as_bytes()).is_err());
    }

    #[test]
    fn stacked_rows_follow_annotation_order() {
        let a = EntityAnnotation {
            image_id: "x".into(),
            entities: vec![record("a", 1.0), record("b", 2.0), record("c", 3.0)],
        };
        let t = stack_entity_features(&a);
        assert_eq!(t.shape(), &[3, EMBEDDING_DIM]);
        for (i, e) in a.entities.iter().enumerate() {
            assert_eq!(t.row(i), e.embedding.as_slice());
        }
    }
}
