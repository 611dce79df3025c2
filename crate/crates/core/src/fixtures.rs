//! Synthetic image pairs with hand-written annotations, used by the test
//! suites and the guide.
//!
//! Each pair shows the same scene twice: an infrared view where objects are
//! warm blobs on a cool background, and a colour visible view where the same
//! objects are dark shapes over a textured ground and a bright sky.
//!
//! ```text
//! <root>/annotations/embeddings.egt      one row per distinct entity
//! <root>/annotations/pair_<k>.json       entities, referencing rows above
//! <root>/<size>/{ir,vi}/pair_<k>.png
//! <root>/<size>/manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::data_pipeline::{save_gray_png, save_rgb_png, DatasetManifest, ManifestEntry, Split};
use crate::entity_ingest::EMBEDDING_DIM;
use crate::error::{Error, Result};
use crate::numerics::{egt, Rng, Tensor};

pub const PAIRS: usize = 8;
pub const SIZES: [usize; 2] = [32, 448];
/// Annotations also shipped with inline embeddings under `inline_annotations/`.
pub const INLINE_DOCS: usize = 3;
const SEED: u64 = 0x5eed_f1c5;

/// Entity strings per pair; `road` and `sky` match no label category.
pub const ENTITIES: [&[(&str, &str)]; PAIRS] = [
    &[("person", "ir"), ("car", "vi")],
    &[("car", "vi"), ("road", "vi"), ("tree", "vi")],
    &[("person", "ir"), ("bicycle", "vi")],
    &[("bus", "vi"), ("building", "vi"), ("lamp", "ir")],
    &[("truck", "ir"), ("tree", "vi")],
    &[("motorcycle", "vi"), ("person", "ir"), ("lamp", "vi")],
    &[("building", "vi"), ("car", "ir"), ("sky", "vi")],
    &[("person", "ir"), ("bus", "vi"), ("tree", "vi"), ("bicycle", "vi")],
];

/// Distinct entity strings in sidecar row order.
pub fn vocabulary_rows() -> Vec<&'static str> {
    let mut rows: Vec<&str> = ENTITIES.iter().flat_map(|p| p.iter().map(|e| e.0)).collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

/// Unit-norm stand-in text embeddings, one row per entry of
/// [`vocabulary_rows`].
pub fn embeddings() -> Tensor {
    let rows = vocabulary_rows();
    let mut data = Vec::with_capacity(rows.len() * EMBEDDING_DIM);
    for r in 0..rows.len() {
        let mut rng = Rng::for_stream(SEED, r as u64);
        let v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| ((x / norm) as f32) as f64));
    }
    Tensor::new(&[rows.len(), EMBEDDING_DIM], data).expect("sized")
}

pub fn pair_id(k: usize) -> String {
    format!("pair_{k}")
}

/// Annotation document for pair `k`, referencing `embeddings.egt`.
pub fn annotation_json(k: usize) -> String {
    let rows = vocabulary_rows();
    let entities: Vec<serde_json::Value> = ENTITIES[k]
        .iter()
        .map(|(text, source)| {
            let row = rows.iter().position(|r| r == text).expect("listed");
            serde_json::json!({
                "text": text,
                "source": source,
                "embedding_ref": {"file": "embeddings.egt", "row": row},
            })
        })
        .collect();
    let doc = serde_json::json!({"image_id": pair_id(k), "entities": entities});
    serde_json::to_string_pretty(&doc).expect("plain JSON") + "\n"
}

struct Object {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    heat: f64,
    color: [f64; 3],
}

fn objects(k: usize) -> Vec<Object> {
    let mut rng = Rng::for_stream(SEED ^ 0xface, k as u64);
    (0..2 + k % 3)
        .map(|_| Object {
            cx: rng.uniform_range(0.15, 0.85),
            cy: rng.uniform_range(0.45, 0.85),
            rx: rng.uniform_range(0.05, 0.12),
            ry: rng.uniform_range(0.08, 0.18),
            heat: rng.uniform_range(0.6, 0.9),
            color: [rng.uniform_range(0.05, 0.5), rng.uniform_range(0.05, 0.5), rng.uniform_range(0.05, 0.5)],
        })
        .collect()
}

/// Infrared `[1×n×n]` and visible RGB `[3×n×n]` images of pair `k`.
pub fn images(k: usize, n: usize) -> (Tensor, Tensor) {
    let objs = objects(k);
    let phase = k as f64 * 0.7;
    let mut ir = vec![0.0; n * n];
    let mut vi = vec![0.0; 3 * n * n];
    let horizon = 0.4 + 0.02 * k as f64;
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let mut t = 0.12 + 0.1 * v + 0.03 * (9.0 * u + phase).sin();
            let mut rgb = if v < horizon {
                [0.55 + 0.3 * v, 0.7 + 0.2 * v, 0.95]
            } else {
                let g = 0.35 + 0.1 * (23.0 * u + 7.0 * v + phase).sin() * (11.0 * v).cos();
                [g * 0.9, g, g * 0.7]
            };
            for o in &objs {
                let d = ((u - o.cx) / o.rx).powi(2) + ((v - o.cy) / o.ry).powi(2);
                t += o.heat * (-d * 1.5).exp();
                if d < 1.0 {
                    rgb = o.color;
                }
            }
            ir[y * n + x] = t.clamp(0.0, 1.0);
            for c in 0..3 {
                vi[c * n * n + y * n + x] = rgb[c].clamp(0.0, 1.0);
            }
        }
    }
    (
        Tensor::new(&[1, n, n], ir).expect("sized"),
        Tensor::new(&[3, n, n], vi).expect("sized"),
    )
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the full fixture tree under `root`.
pub fn generate(root: &Path) -> Result<()> {
    let ann = root.join("annotations");
    mkdir(&ann)?;
    write(&ann.join("embeddings.egt"), &egt::to_bytes(&embeddings()))?;
    for k in 0..PAIRS {
        write(&ann.join(format!("{}.json", pair_id(k))), annotation_json(k).as_bytes())?;
    }
    let inline = root.join("inline_annotations");
    mkdir(&inline)?;
    for k in 0..INLINE_DOCS {
        let doc = crate::entity_ingest::load_annotation(&ann.join(format!("{}.json", pair_id(k))))?;
        write(&inline.join(format!("{}.json", pair_id(k))), crate::entity_ingest::serialize(&doc).as_bytes())?;
    }
    for n in SIZES {
        let dir = root.join(n.to_string());
        let mut entries = Vec::new();
        for sub in ["ir", "vi"] {
            mkdir(&dir.join(sub))?;
        }
        for k in 0..PAIRS {
            let (ir, vi) = images(k, n);
            let name = format!("{}.png", pair_id(k));
            save_gray_png(&dir.join("ir").join(&name), &ir)?;
            save_rgb_png(&dir.join("vi").join(&name), &vi)?;
            entries.push(ManifestEntry {
                ir_path: PathBuf::from("ir").join(&name),
                vi_path: PathBuf::from("vi").join(&name),
                annotation_path: PathBuf::from("../annotations").join(format!("{}.json", pair_id(k))),
            });
        }
        let m = DatasetManifest {
            split: Split::Train,
            entries,
        };
        let text = serde_json::to_string_pretty(&m)? + "\n";
        write(&dir.join("manifest.json"), text.as_bytes())?;
    }
    Ok(())
}

/// The fixture tree shipped with the repository.
pub fn shipped_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Manifest of the shipped pairs at extent `n` (32 or 448).
pub fn shipped_manifest(n: usize) -> PathBuf {
    shipped_root().join(n.to_string()).join("manifest.json")
}
