//! File formats and dataset manifests.
//!
//! Masks are single-channel 16-bit PNGs (8-bit inputs are widened
//! losslessly). Feature maps and offset fields use the OWFM binary layout:
//! magic `OWFM`, version u16, then H, W, D as u32 and H*W*D little-endian
//! f32 values, row-major with the feature dimension innermost. Descriptor
//! banks use the same format family (`OWBK`) with f64 moments so persisted
//! discovery state resumes exactly. All round trips are bit-exact.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{BinaryMask, FeatureMap, InstanceMask, ModelError, OffsetField, SemanticMask};
use crate::postprocess::{DiscoveryState, PostprocessError};
use crate::scalar::Real;
use crate::stats::DescriptorBank;
use crate::synth::SceneSpec;

const MASK_MAX_LABEL: u32 = u16::MAX as u32;
const FEATURE_MAGIC: &[u8; 4] = b"OWFM";
const BANK_MAGIC: &[u8; 4] = b"OWBK";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug)]
pub enum IoError {
    /// The file does not start with the expected magic bytes.
    BadMagic,
    /// PNG is not 8- or 16-bit single-channel.
    DepthUnsupported,
    TruncatedFile,
    /// Feature payload contains NaN or infinity.
    NonFinite,
    /// Mask label does not fit 16-bit storage.
    LabelTooLarge {
        label: u32,
    },
    UnsupportedVersion {
        version: u16,
    },
    BadDimension {
        expected: usize,
        got: usize,
    },
    MissingPrediction {
        image: String,
        path: PathBuf,
    },
    ManifestInvalid(String),
    Model(ModelError),
    State(PostprocessError),
    Decode(String),
    Io(std::io::Error),
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::BadMagic => write!(f, "bad magic bytes"),
            IoError::DepthUnsupported => {
                write!(
                    f,
                    "only 8- or 16-bit single-channel PNG masks are supported"
                )
            }
            IoError::TruncatedFile => write!(f, "file is truncated"),
            IoError::NonFinite => write!(f, "payload contains non-finite values"),
            IoError::LabelTooLarge { label } => {
                write!(f, "label {label} exceeds 16-bit mask storage")
            }
            IoError::UnsupportedVersion { version } => {
                write!(f, "unsupported format version {version}")
            }
            IoError::BadDimension { expected, got } => {
                write!(f, "expected feature dimension {expected}, got {got}")
            }
            IoError::MissingPrediction { image, path } => {
                write!(
                    f,
                    "missing prediction for image '{image}': {}",
                    path.display()
                )
            }
            IoError::ManifestInvalid(msg) => write!(f, "invalid manifest: {msg}"),
            IoError::Model(e) => write!(f, "{e}"),
            IoError::State(e) => write!(f, "{e}"),
            IoError::Decode(msg) => write!(f, "decode error: {msg}"),
            IoError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for IoError {}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e)
    }
}

impl From<ModelError> for IoError {
    fn from(e: ModelError) -> Self {
        IoError::Model(e)
    }
}

/// Raw mask payload shared by semantic and instance rasters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskData {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

pub fn write_mask(path: &Path, height: usize, width: usize, labels: &[u32]) -> Result<(), IoError> {
    assert_eq!(labels.len(), height * width);
    if let Some(&label) = labels.iter().find(|&&l| l > MASK_MAX_LABEL) {
        return Err(IoError::LabelTooLarge { label });
    }
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| IoError::Decode(e.to_string()))?;
    let mut bytes = Vec::with_capacity(labels.len() * 2);
    for &label in labels {
        bytes.extend_from_slice(&(label as u16).to_be_bytes());
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| IoError::Decode(e.to_string()))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<MaskData, IoError> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|_| IoError::BadMagic)?;
    if magic != [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A] {
        return Err(IoError::BadMagic);
    }
    drop(file);

    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| IoError::Decode(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(IoError::DepthUnsupported);
    }
    let depth = info.bit_depth;
    if depth != png::BitDepth::Eight && depth != png::BitDepth::Sixteen {
        return Err(IoError::DepthUnsupported);
    }
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or(IoError::TruncatedFile)?];
    let out = reader
        .next_frame(&mut buf)
        .map_err(|e| IoError::Decode(e.to_string()))?;
    let height = out.height as usize;
    let width = out.width as usize;
    let labels = match depth {
        png::BitDepth::Eight => buf[..height * width].iter().map(|&b| b as u32).collect(),
        png::BitDepth::Sixteen => buf[..height * width * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect(),
        _ => unreachable!(),
    };
    Ok(MaskData {
        height,
        width,
        labels,
    })
}

pub fn write_semantic_mask(path: &Path, mask: &SemanticMask) -> Result<(), IoError> {
    write_mask(path, mask.height(), mask.width(), mask.labels())
}

pub fn read_semantic_mask(path: &Path) -> Result<SemanticMask, IoError> {
    let data = read_mask(path)?;
    Ok(SemanticMask::new(data.height, data.width, data.labels)?)
}

pub fn write_instance_mask(path: &Path, mask: &InstanceMask) -> Result<(), IoError> {
    write_mask(path, mask.height(), mask.width(), mask.ids())
}

pub fn read_instance_mask(path: &Path) -> Result<InstanceMask, IoError> {
    let data = read_mask(path)?;
    Ok(InstanceMask::new(data.height, data.width, data.labels)?)
}

pub fn write_binary_mask(path: &Path, mask: &BinaryMask) -> Result<(), IoError> {
    let labels: Vec<u32> = mask.values().iter().map(|&b| b as u32).collect();
    write_mask(path, mask.height(), mask.width(), &labels)
}

fn write_u32(out: &mut impl Write, v: u32) -> Result<(), IoError> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact_or_truncated(input: &mut impl Read, buf: &mut [u8]) -> Result<(), IoError> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            IoError::TruncatedFile
        } else {
            IoError::Io(e)
        }
    })
}

fn read_u32(input: &mut impl Read) -> Result<u32, IoError> {
    let mut buf = [0u8; 4];
    read_exact_or_truncated(input, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_feature_header(
    out: &mut impl Write,
    height: usize,
    width: usize,
    dim: usize,
) -> Result<(), IoError> {
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_u32(out, height as u32)?;
    write_u32(out, width as u32)?;
    write_u32(out, dim as u32)?;
    Ok(())
}

fn read_feature_header(input: &mut impl Read) -> Result<(usize, usize, usize), IoError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(input, &mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(IoError::BadMagic);
    }
    let mut version = [0u8; 2];
    read_exact_or_truncated(input, &mut version)?;
    let version = u16::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion { version });
    }
    let height = read_u32(input)? as usize;
    let width = read_u32(input)? as usize;
    let dim = read_u32(input)? as usize;
    Ok((height, width, dim))
}

fn write_f32_payload<T: Real>(
    out: &mut impl Write,
    values: impl Iterator<Item = T>,
) -> Result<(), IoError> {
    for v in values {
        let v32 = v.to_f32().ok_or(IoError::NonFinite)?;
        out.write_all(&v32.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32_payload<T: Real>(input: &mut impl Read, count: usize) -> Result<Vec<T>, IoError> {
    let mut bytes = vec![0u8; count * 4];
    read_exact_or_truncated(input, &mut bytes)?;
    let mut values = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(IoError::NonFinite);
        }
        values.push(T::from_f32(v).ok_or(IoError::NonFinite)?);
    }
    Ok(values)
}

pub fn write_feature_map<T: Real>(path: &Path, map: &FeatureMap<T>) -> Result<(), IoError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_feature_header(&mut out, map.height(), map.width(), map.dim())?;
    write_f32_payload(&mut out, map.values().iter().copied())?;
    Ok(())
}

pub fn read_feature_map<T: Real>(path: &Path) -> Result<FeatureMap<T>, IoError> {
    let mut input = BufReader::new(File::open(path)?);
    let (height, width, dim) = read_feature_header(&mut input)?;
    let values = read_f32_payload(&mut input, height * width * dim)?;
    Ok(FeatureMap::new(height, width, dim, values)?)
}

pub fn write_offset_field<T: Real>(path: &Path, field: &OffsetField<T>) -> Result<(), IoError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_feature_header(&mut out, field.height(), field.width(), 2)?;
    write_f32_payload(&mut out, field.offsets().iter().flatten().copied())?;
    Ok(())
}

pub fn read_offset_field<T: Real>(path: &Path) -> Result<OffsetField<T>, IoError> {
    let mut input = BufReader::new(File::open(path)?);
    let (height, width, dim) = read_feature_header(&mut input)?;
    if dim != 2 {
        return Err(IoError::BadDimension {
            expected: 2,
            got: dim,
        });
    }
    let values = read_f32_payload::<T>(&mut input, height * width * 2)?;
    let offsets = values.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    Ok(OffsetField::new(height, width, offsets)?)
}

pub fn write_bank<T: Real>(path: &Path, bank: &DescriptorBank<T>) -> Result<(), IoError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(BANK_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_u32(&mut out, bank.dim() as u32)?;
    write_u32(&mut out, bank.num_classes() as u32)?;
    for class in bank.raw_classes() {
        out.write_all(&class.count.to_le_bytes())?;
        out.write_all(&[class.frozen as u8])?;
        for &v in class.mean.iter().chain(&class.m2) {
            let v64 = v.to_f64().ok_or(IoError::NonFinite)?;
            out.write_all(&v64.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_bank<T: Real>(path: &Path) -> Result<DescriptorBank<T>, IoError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut input, &mut magic)?;
    if &magic != BANK_MAGIC {
        return Err(IoError::BadMagic);
    }
    let mut version = [0u8; 2];
    read_exact_or_truncated(&mut input, &mut version)?;
    let version = u16::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion { version });
    }
    let dim = read_u32(&mut input)? as usize;
    let num_classes = read_u32(&mut input)? as usize;
    let mut classes = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut count = [0u8; 8];
        read_exact_or_truncated(&mut input, &mut count)?;
        let count = u64::from_le_bytes(count);
        let mut frozen = [0u8; 1];
        read_exact_or_truncated(&mut input, &mut frozen)?;
        let mut moments = vec![0u8; dim * 2 * 8];
        read_exact_or_truncated(&mut input, &mut moments)?;
        let mut values = moments
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]));
        let mean: Vec<T> = (&mut values)
            .take(dim)
            .map(|v| T::from_f64(v).ok_or(IoError::NonFinite))
            .collect::<Result<_, _>>()?;
        let m2: Vec<T> = values
            .map(|v| T::from_f64(v).ok_or(IoError::NonFinite))
            .collect::<Result<_, _>>()?;
        if mean.iter().chain(&m2).any(|v| !v.is_finite()) {
            return Err(IoError::NonFinite);
        }
        classes.push(crate::stats::raw_class(mean, m2, count, frozen[0] != 0));
    }
    Ok(DescriptorBank::from_raw(dim, classes))
}

pub fn write_state<T: Real>(path: &Path, state: &DiscoveryState<T>) -> Result<(), IoError> {
    write_bank(path, state.bank())
}

pub fn read_state<T: Real>(path: &Path) -> Result<DiscoveryState<T>, IoError> {
    let bank = read_bank(path)?;
    DiscoveryState::from_bank(bank).map_err(IoError::State)
}

/// One dataset image: an id plus the ground-truth artifacts the task needs.
/// Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_semantic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_instance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_anomaly: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    pub thing: bool,
    #[serde(default)]
    pub ignore: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub task: String,
    pub images: Vec<ManifestImage>,
    pub classes: Vec<ClassEntry>,
}

impl DatasetManifest {
    pub fn ignore_id(&self) -> u32 {
        self.classes
            .iter()
            .find(|c| c.ignore)
            .map(|c| c.id)
            .expect("validated manifests have exactly one ignore class")
    }

    pub fn thing_ids(&self) -> BTreeSet<u32> {
        self.classes
            .iter()
            .filter(|c| c.thing && !c.ignore)
            .map(|c| c.id)
            .collect()
    }

    /// Number of ground-truth classes (highest non-ignore id + 1).
    pub fn num_gt_classes(&self) -> usize {
        self.classes
            .iter()
            .filter(|c| !c.ignore)
            .map(|c| c.id as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self, base: &Path) -> Result<(), IoError> {
        if self.images.is_empty() {
            return Err(IoError::ManifestInvalid("no images".into()));
        }
        let mut image_ids = BTreeSet::new();
        for image in &self.images {
            if !image_ids.insert(&image.id) {
                return Err(IoError::ManifestInvalid(format!(
                    "duplicate image id '{}'",
                    image.id
                )));
            }
            for path in [&image.gt_semantic, &image.gt_instance, &image.gt_anomaly]
                .into_iter()
                .flatten()
            {
                let full = base.join(path);
                if !full.is_file() {
                    return Err(IoError::ManifestInvalid(format!(
                        "referenced file missing: {}",
                        full.display()
                    )));
                }
            }
        }
        let mut class_ids = BTreeSet::new();
        for class in &self.classes {
            if !class_ids.insert(class.id) {
                return Err(IoError::ManifestInvalid(format!(
                    "duplicate class id {}",
                    class.id
                )));
            }
        }
        let ignore_count = self.classes.iter().filter(|c| c.ignore).count();
        if ignore_count != 1 {
            return Err(IoError::ManifestInvalid(format!(
                "exactly one ignore class required, found {ignore_count}"
            )));
        }
        Ok(())
    }
}

/// Loads and validates a manifest; returns it with its base directory for
/// resolving relative paths.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf), IoError> {
    let text = std::fs::read_to_string(path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| IoError::ManifestInvalid(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    manifest.validate(&base)?;
    Ok((manifest, base))
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| IoError::ManifestInvalid(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_scene_spec(path: &Path) -> Result<SceneSpec, IoError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::ManifestInvalid(e.to_string()))
}

pub fn save_scene_spec(path: &Path, spec: &SceneSpec) -> Result<(), IoError> {
    let text =
        serde_json::to_string_pretty(spec).map_err(|e| IoError::ManifestInvalid(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes a metric report; serialization is byte-stable for identical inputs.
pub fn write_report(path: &Path, report: &crate::metrics::MetricReport) -> Result<(), IoError> {
    std::fs::write(path, report.to_json())?;
    Ok(())
}
