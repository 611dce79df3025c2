//! Dataset assembly: decoding, luminance conversion, sliding-window crops,
//! manifests and seeded batch order.
//!
//! Colour conversion is full-range ITU-R BT.601 (the JPEG/JFIF form) on
//! values scaled to `[0, 1]`; chroma is centred on 0.5.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::entity_ingest::{
    entities_to_labels, load_annotation, stack_entity_features, EntityAnnotation, LabelVector,
    LabelVocabulary,
};
use crate::error::{Error, Result};
use crate::numerics::kernels::{crop, pad_reflect};
use crate::numerics::{Rng, Tensor};

/// Spatial extents must be multiples of this.
pub const ALIGN: usize = 16;
pub const DEFAULT_CROP: usize = 448;
pub const DEFAULT_STRIDE: usize = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePairSample {
    pub id: String,
    /// `[1×H×W]` in `[0, 1]`.
    pub ir: Tensor,
    /// Visible luminance, `[1×H×W]`.
    pub vi_y: Tensor,
    /// Visible chroma `[2×H×W]` (Cb, Cr); `None` for grayscale sources.
    pub vi_cbcr: Option<Tensor>,
    pub annotation: EntityAnnotation,
    pub label: LabelVector,
}

impl ImagePairSample {
    /// `[E×D]` entity embeddings.
    pub fn entity_features(&self) -> Tensor {
        stack_entity_features(&self.annotation)
    }

    pub fn height(&self) -> usize {
        self.ir.dim(1)
    }

    pub fn width(&self) -> usize {
        self.ir.dim(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image pair; paths are relative to the manifest file once saved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub ir_path: PathBuf,
    pub vi_path: PathBuf,
    pub annotation_path: PathBuf,
}

impl ManifestEntry {
    /// Sample id: the file stem of the infrared image.
    pub fn stem(&self) -> String {
        self.ir_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Reads a manifest and resolves its paths against the manifest's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Dataset {
            id: path.display().to_string(),
            reason: format!("malformed manifest: {e}"),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            for p in [&mut e.ir_path, &mut e.vi_path, &mut e.annotation_path] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Writes the manifest with paths made relative to `path`'s directory
    /// where they lie beneath it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut m = self.clone();
        for e in &mut m.entries {
            for p in [&mut e.ir_path, &mut e.vi_path, &mut e.annotation_path] {
                if let Ok(rel) = p.strip_prefix(base) {
                    *p = rel.to_path_buf();
                }
            }
        }
        let text = serde_json::to_string_pretty(&m)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Stems are unique and every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            let stem = e.stem();
            if !seen.insert(stem.clone()) {
                return Err(Error::Dataset {
                    id: stem,
                    reason: "duplicate stem in manifest".into(),
                });
            }
            for p in [&e.ir_path, &e.vi_path, &e.annotation_path] {
                if !p.is_file() {
                    return Err(Error::Dataset {
                        id: stem,
                        reason: format!("missing file {}", p.display()),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        0.5 - 0.168_736 * r - 0.331_264 * g + 0.5 * b,
        0.5 + 0.5 * r - 0.418_688 * g - 0.081_312 * b,
    ]
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    let (cb, cr) = (cb - 0.5, cr - 0.5);
    [
        y + 1.402 * cr,
        y - 0.344_136 * cb - 0.714_136 * cr,
        y + 1.772 * cb,
    ]
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes an image as `[3×H×W]` RGB in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Splits `[3×H×W]` RGB into luminance `[1×H×W]` and chroma `[2×H×W]`.
pub fn split_luma_chroma(rgb: &Tensor) -> (Tensor, Tensor) {
    let n = rgb.dim(1) * rgb.dim(2);
    let d = rgb.data();
    let mut y = vec![0.0; n];
    let mut cbcr = vec![0.0; 2 * n];
    for i in 0..n {
        let [a, b, c] = rgb_to_ycbcr(d[i], d[n + i], d[2 * n + i]);
        y[i] = a;
        cbcr[i] = b;
        cbcr[n + i] = c;
    }
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    (
        Tensor::new(&[1, h, w], y).expect("sized"),
        Tensor::new(&[2, h, w], cbcr).expect("sized"),
    )
}

/// Whether all three channels agree everywhere.
fn is_gray(rgb: &Tensor) -> bool {
    let n = rgb.dim(1) * rgb.dim(2);
    let d = rgb.data();
    (0..n).all(|i| d[i] == d[n + i] && d[i] == d[2 * n + i])
}

/// Decodes an infrared image as one channel: the luminance of colour files,
/// the stored value of grayscale ones.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?;
    if img.color().has_color() {
        let rgb = load_rgb(path)?;
        Ok(split_luma_chroma(&rgb).0)
    } else {
        let g = img.to_luma8();
        let (w, h) = (g.width() as usize, g.height() as usize);
        let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Tensor::new(&[1, h, w], data)
    }
}

pub fn load_pair(entry: &ManifestEntry, vocab: &LabelVocabulary) -> Result<ImagePairSample> {
    let id = entry.stem();
    let ctx = |e: Error| Error::Dataset {
        id: id.clone(),
        reason: e.to_string(),
    };
    let ir = load_gray(&entry.ir_path).map_err(ctx)?;
    let rgb = load_rgb(&entry.vi_path).map_err(ctx)?;
    if ir.shape()[1..] != rgb.shape()[1..] {
        return Err(Error::Dataset {
            id,
            reason: format!(
                "infrared {:?} and visible {:?} extents differ",
                &ir.shape()[1..],
                &rgb.shape()[1..]
            ),
        });
    }
    let gray = is_gray(&rgb);
    let (vi_y, cbcr) = split_luma_chroma(&rgb);
    let annotation = load_annotation(&entry.annotation_path).map_err(ctx)?;
    let label = entities_to_labels(&annotation, vocab);
    Ok(ImagePairSample {
        id,
        ir,
        vi_y,
        vi_cbcr: (!gray).then_some(cbcr),
        annotation,
        label,
    })
}

pub fn load_dataset(manifest: &DatasetManifest, vocab: &LabelVocabulary) -> Result<Vec<ImagePairSample>> {
    manifest.entries.iter().map(|e| load_pair(e, vocab)).collect()
}

/// Window offsets along one axis of length `len`: `0, stride, …` while the
/// window fits, plus a final window flush with the far edge.
pub fn crop_offsets(len: usize, size: usize, stride: usize) -> Vec<usize> {
    if len <= size {
        return vec![0];
    }
    let last = len - size;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

fn check_crop_args(size: usize, stride: usize) -> Result<()> {
    if size == 0 || size % ALIGN != 0 {
        return Err(Error::invalid("size", format!("{size} is not a positive multiple of {ALIGN}")));
    }
    if stride == 0 || stride > size {
        return Err(Error::invalid("stride", format!("{stride} must lie in 1..={size}")));
    }
    Ok(())
}

/// Reflect-pads a `C×H×W` tensor on the bottom/right so both extents are at
/// least `size`.
pub fn pad_to(x: &Tensor, size: usize) -> Tensor {
    let (h, w) = (x.dim(1), x.dim(2));
    if h >= size && w >= size {
        return x.clone();
    }
    pad_reflect(x, 0, size.saturating_sub(h), 0, size.saturating_sub(w))
}

/// Every `size×size` window of a `C×H×W` tensor under the flush rule, with
/// its `(y, x)` offset. Smaller inputs are reflect-padded first.
pub fn crop_windows(x: &Tensor, size: usize, stride: usize) -> Result<Vec<((usize, usize), Tensor)>> {
    check_crop_args(size, stride)?;
    let x = pad_to(x, size);
    let mut out = Vec::new();
    for oy in crop_offsets(x.dim(1), size, stride) {
        for ox in crop_offsets(x.dim(2), size, stride) {
            out.push(((oy, ox), crop(&x, oy, ox, size, size)?));
        }
    }
    Ok(out)
}

/// Patch id for the window at `(y, x)` of `parent`.
pub fn patch_id(parent: &str, y: usize, x: usize) -> String {
    format!("{parent}_y{y}_x{x}")
}

/// Aligned `size×size` patches; each inherits its parent's annotation and
/// label.
pub fn crop_sliding(sample: &ImagePairSample, size: usize, stride: usize) -> Result<Vec<ImagePairSample>> {
    let ir = crop_windows(&sample.ir, size, stride)?;
    let vi = crop_windows(&sample.vi_y, size, stride)?;
    let cbcr = match &sample.vi_cbcr {
        Some(c) => Some(crop_windows(c, size, stride)?),
        None => None,
    };
    Ok(ir
        .into_iter()
        .zip(vi)
        .enumerate()
        .map(|(i, (((y, x), ir), (_, vi_y)))| ImagePairSample {
            id: patch_id(&sample.id, y, x),
            ir,
            vi_y,
            vi_cbcr: cbcr.as_ref().map(|c| c[i].1.clone()),
            annotation: sample.annotation.clone(),
            label: sample.label,
        })
        .collect())
}

/// Sample order for one epoch; a pure function of `(n, seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::for_stream(seed, epoch).shuffle(&mut order);
    order
}

/// Index batches of one epoch; the last batch may be short.
pub fn batch_iter(n: usize, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Dataset {
            id: "dataset".into(),
            reason: "no samples".into(),
        });
    }
    if batch == 0 {
        return Err(Error::invalid("batch", "must be at least 1"));
    }
    Ok(epoch_order(n, seed, epoch)
        .chunks(batch)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Fused luminance with the visible chroma reattached, as `[3×H×W]` RGB
/// clamped to `[0, 1]`. Without chroma the output is gray.
pub fn recolor(fused: &Tensor, cbcr: Option<&Tensor>) -> Result<Tensor> {
    let (h, w) = (fused.dim(1), fused.dim(2));
    let n = h * w;
    if let Some(c) = cbcr {
        if c.shape() != [2, h, w] {
            return Err(Error::shape(
                "recolor",
                format!("chroma {:?} for luminance {:?}", c.shape(), fused.shape()),
            ));
        }
    }
    let y = fused.data();
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let (cb, cr) = match cbcr {
            Some(c) => (c.data()[i], c.data()[n + i]),
            None => (0.5, 0.5),
        };
        let rgb = ycbcr_to_rgb(y[i], cb, cr);
        for k in 0..3 {
            out[k * n + i] = rgb[k].clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], out)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_image(path: &Path, img: image::DynamicImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes `[1×H×W]` as an 8-bit grayscale PNG, clamping to `[0, 1]`.
pub fn save_gray_png(path: &Path, x: &Tensor) -> Result<()> {
    let (h, w) = (x.dim(1) as u32, x.dim(2) as u32);
    let raw = x.data()[..(h * w) as usize].iter().map(|&v| quantize(v)).collect();
    let img = image::GrayImage::from_raw(w, h, raw).expect("sized buffer");
    save_image(path, image::DynamicImage::ImageLuma8(img))
}

/// Writes `[3×H×W]` as an 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn save_rgb_png(path: &Path, x: &Tensor) -> Result<()> {
    let (h, w) = (x.dim(1), x.dim(2));
    let n = h * w;
    let d = x.data();
    let raw = (0..n)
        .flat_map(|i| [quantize(d[i]), quantize(d[n + i]), quantize(d[2 * n + i])])
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    save_image(path, image::DynamicImage::ImageRgb8(img))
}

/// Crops every pair of `manifest` into `size×size` patches under `out_dir`
/// (`ir/`, `vi/`, `annotations/`) and returns the patch manifest. Visible
/// patches are cut from the decoded RGB, so their pixels are copied exactly.
pub fn preprocess(
    manifest: &DatasetManifest,
    out_dir: &Path,
    size: usize,
    stride: usize,
) -> Result<DatasetManifest> {
    check_crop_args(size, stride)?;
    let dirs = ["ir", "vi", "annotations"].map(|d| out_dir.join(d));
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::new();
    for e in &manifest.entries {
        let stem = e.stem();
        let ctx = |err: Error| Error::Dataset {
            id: stem.clone(),
            reason: err.to_string(),
        };
        let ir = load_gray(&e.ir_path).map_err(ctx)?;
        let rgb = load_rgb(&e.vi_path).map_err(ctx)?;
        if ir.shape()[1..] != rgb.shape()[1..] {
            return Err(ctx(Error::shape("preprocess", "infrared and visible extents differ")));
        }
        let annotation = load_annotation(&e.annotation_path).map_err(ctx)?;
        let ann_path = dirs[2].join(format!("{stem}.json"));
        fs::write(&ann_path, crate::entity_ingest::serialize(&annotation))
            .map_err(|err| Error::io(&ann_path, err))?;
        let vi_gray = is_gray(&rgb);
        for (((y, x), ir_patch), (_, vi_patch)) in crop_windows(&ir, size, stride)?
            .into_iter()
            .zip(crop_windows(&rgb, size, stride)?)
        {
            let id = patch_id(&stem, y, x);
            let ir_path = dirs[0].join(format!("{id}.png"));
            let vi_path = dirs[1].join(format!("{id}.png"));
            save_gray_png(&ir_path, &ir_patch)?;
            if vi_gray {
                let plane = Tensor::new(&[1, size, size], vi_patch.channel(0).to_vec())?;
                save_gray_png(&vi_path, &plane)?;
            } else {
                save_rgb_png(&vi_path, &vi_patch)?;
            }
            entries.push(ManifestEntry {
                ir_path,
                vi_path,
                annotation_path: ann_path.clone(),
            });
        }
    }
    Ok(DatasetManifest {
        split: manifest.split,
        entries,
    })
}
