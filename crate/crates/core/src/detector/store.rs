//! On-disk dataset and model formats.
//!
//! A dataset directory holds `frames/NNNNNN.pgm` (binary 8-bit graymaps),
//! `ground_truth.jsonl` with one `{"frame", "box"}` record per frame and a
//! `manifest.json` describing the scene.
//!
//! A model file is one JSON header line followed by the parameters as
//! little-endian `f64`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::model::{DetectorModel, ModelSpec};
use super::scene::{Frame, SceneSpec};
use crate::eval::io::{read_ground_truth, write_jsonl};
use crate::loss::LossVariant;
use crate::{Error, Result, Scalar};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
const FRAMES_DIR: &str = "frames";
const DATASET_FORMAT: &str = "hardmine-dataset";
const MODEL_FORMAT: &str = "hardmine-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub positives: usize,
    pub scene: SceneSpec,
}

fn frame_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{id:06}.pgm"))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dir: &Path, scene: &SceneSpec, frames: &[Frame]) -> Result<Manifest> {
    mkdir(&dir.join(FRAMES_DIR))?;
    for f in frames {
        let path = frame_path(dir, f.id);
        let mut bytes = Vec::with_capacity(f.pixels.len() + 32);
        PnmEncoder::new(&mut bytes)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&f.pixels, f.size as u32, f.size as u32, ExtendedColorType::L8)
            .map_err(|e| Error::data(&path, e.to_string()))?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let gts: Vec<_> = frames.iter().map(Frame::ground_truth).collect();
    write_jsonl(&dir.join(GROUND_TRUTH_FILE), &gts)?;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        frames: frames.len(),
        positives: frames.iter().filter(|f| f.gt.is_some()).count(),
        scene: scene.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if manifest.format != DATASET_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::data(
            &path,
            format!("unsupported dataset format {} v{}", manifest.format, manifest.version),
        ));
    }
    Ok(manifest)
}

/// Loads every frame listed in the ground-truth file, in file order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Frame>> {
    let manifest = read_manifest(dir)?;
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let gts = read_ground_truth(&gt_path)?;
    if gts.len() != manifest.frames {
        return Err(Error::data(
            &gt_path,
            format!("{} records, manifest lists {} frames", gts.len(), manifest.frames),
        ));
    }
    let side = manifest.scene.image_size;
    gts.into_iter()
        .map(|g| {
            let path = frame_path(dir, g.frame);
            let img = image::open(&path).map_err(|e| Error::data(&path, e.to_string()))?.into_luma8();
            if img.width() as usize != side || img.height() as usize != side {
                return Err(Error::data(
                    &path,
                    format!("{}x{} image, manifest says {side}x{side}", img.width(), img.height()),
                ));
            }
            if let Some(b) = &g.bbox {
                if !b.lies_within(side as f64, side as f64) {
                    return Err(Error::data(&gt_path, format!("frame {}: box leaves the image", g.frame)));
                }
            }
            Ok(Frame {
                id: g.frame,
                size: side,
                pixels: img.into_raw(),
                gt: g.bbox,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub param_count: usize,
    pub seed: u64,
    pub variant: LossVariant,
}

pub fn save_model<T: Scalar>(path: &Path, model: &DetectorModel<T>, seed: u64, variant: LossVariant) -> Result<()> {
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        version: FORMAT_VERSION,
        spec: model.spec().clone(),
        param_count: model.param_count(),
        seed,
        variant,
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serialises");
    bytes.push(b'\n');
    for p in model.params() {
        bytes.extend_from_slice(&p.as_f64().to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(ModelHeader, DetectorModel<T>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let header: ModelHeader =
        serde_json::from_slice(&line).map_err(|e| Error::data(path, format!("header: {e}")))?;
    if header.format != MODEL_FORMAT || header.version != FORMAT_VERSION {
        return Err(Error::data(
            path,
            format!("unsupported model format {} v{}", header.format, header.version),
        ));
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != 8 * header.param_count {
        return Err(Error::data(
            path,
            format!("{} parameter bytes, header promises {}", body.len(), 8 * header.param_count),
        ));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    let mut model = DetectorModel::zeroed(header.spec.clone()).map_err(|e| Error::data(path, e.to_string()))?;
    model.set_params(params).map_err(|e| Error::data(path, e.to_string()))?;
    Ok((header, model))
}
