use std::fs;
use std::path::{Path, PathBuf};

use segda_grad::Tensor;
use serde::{Deserialize, Serialize};

use super::{domain_shift, generate_scene, Domain, DomainShift, LabeledScene, SceneConfig};
use crate::error::{CoreError, Result};

pub const DATASET_FORMAT: &str = "segda-synth-v1";
const MANIFEST: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    SourceVal,
    TargetTrain,
    TargetVal,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SourceTrain, Split::SourceVal, Split::TargetTrain, Split::TargetVal];

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceVal => Domain::Source,
            Split::TargetTrain | Split::TargetVal => Domain::Target,
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// Everything needed to regenerate a dataset byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub shift: DomainShift,
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            shift: DomainShift::default(),
            source_train: 400,
            source_val: 100,
            target_train: 400,
            target_val: 100,
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::SourceVal => self.source_val,
            Split::TargetTrain => self.target_train,
            Split::TargetVal => self.target_val,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub domain: Domain,
    pub seed: u64,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub image: String,
    pub mask: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: DatasetConfig,
    scenes: Vec<ManifestEntry>,
}

/// Scenes of all four splits, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
    pub scenes: Vec<LabeledScene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&LabeledScene> {
        self.entries.iter().zip(&self.scenes).filter(|(e, _)| e.split == split).map(|(_, s)| s).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.config.scene.num_classes
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v * 255.0).round() / 255.0)
}

/// Generates every split in memory. Images are quantized to 8 bits so the
/// in-memory dataset equals its on-disk form.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.scene.validate()?;
    let mut entries = Vec::new();
    let mut scenes = Vec::new();
    for split in Split::ALL {
        for i in 0..config.count(split) {
            let seed = splitmix64(splitmix64(config.seed ^ (split.tag() << 56)) ^ i as u64);
            let mut scene = generate_scene(seed, &config.scene)?;
            if split.domain() == Domain::Target {
                scene = domain_shift(&scene, &config.shift);
            }
            scene.image = quantize(&scene.image);
            let id = format!("{}_{i:04}", serde_json::to_value(split).expect("enum").as_str().expect("string"));
            entries.push(ManifestEntry {
                image: format!("images/{id}.ppm"),
                mask: format!("masks/{id}.pgm"),
                id,
                split,
                domain: split.domain(),
                seed,
                height: config.scene.height,
                width: config.scene.width,
                num_classes: config.scene.num_classes,
            });
            scenes.push(scene);
        }
    }
    Ok(Dataset { config: config.clone(), entries, scenes })
}

fn parse_err(file: &Path, offset: usize, msg: impl Into<String>) -> CoreError {
    CoreError::Parse { file: file.to_path_buf(), offset, msg: msg.into() }
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], file: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(file, 0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(file, pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(file, start, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(file, pos, format!("maxval {maxval} is not 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(file, pos, "expected whitespace after header"));
    }
    Ok(Header { width, height, data_offset: pos + 1 })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CoreError::io(path, e))
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize, file: &Path) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let have = bytes.len() - header.data_offset;
    if have < need {
        return Err(parse_err(file, bytes.len(), format!("truncated pixel data: {have} of {need} bytes")));
    }
    if have > need {
        return Err(parse_err(file, header.data_offset + need, "trailing bytes after pixel data"));
    }
    Ok(&bytes[header.data_offset..])
}

/// Writes a `3 × H × W` image in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [3, h, w] = image.shape()[..] else {
        return Err(CoreError::UnsupportedDimension(format!("PPM needs 3×H×W, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    let d = image.data();
    for j in 0..hw {
        for k in 0..3 {
            out.push((d[k * hw + j].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes, b"P6", path)?;
    let data = payload(&bytes, &header, 3, path)?;
    let hw = header.width * header.height;
    let mut out = vec![0.0; 3 * hw];
    for j in 0..hw {
        for k in 0..3 {
            out[k * hw + j] = f64::from(data[3 * j + k]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, header.height, header.width], out)?)
}

/// Writes class ids as binary PGM.
pub fn write_pgm(path: &Path, mask: &[usize], height: usize, width: usize) -> Result<()> {
    if mask.len() != height * width {
        return Err(CoreError::UnsupportedDimension(format!("mask has {} entries for {height}×{width}", mask.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &m in mask {
        out.push(u8::try_from(m).map_err(|_| CoreError::InvalidLabel(format!("class id {m} does not fit a byte")))?);
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

/// Returns the mask with its height and width.
pub fn read_pgm(path: &Path) -> Result<(Vec<usize>, usize, usize)> {
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes, b"P5", path)?;
    let data = payload(&bytes, &header, 1, path)?;
    Ok((data.iter().map(|&b| usize::from(b)).collect(), header.height, header.width))
}

pub fn write_scene(scene: &LabeledScene, dir: &Path, entry: &ManifestEntry) -> Result<()> {
    for rel in [&entry.image, &entry.mask] {
        if let Some(parent) = dir.join(rel).parent() {
            fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
    }
    write_ppm(&dir.join(&entry.image), &scene.image)?;
    write_pgm(&dir.join(&entry.mask), &scene.mask, scene.height(), scene.width())
}

pub fn read_scene(dir: &Path, entry: &ManifestEntry) -> Result<LabeledScene> {
    let image_path = dir.join(&entry.image);
    let mask_path = dir.join(&entry.mask);
    let image = read_ppm(&image_path)?;
    let (mask, h, w) = read_pgm(&mask_path)?;
    if image.shape() != [3, entry.height, entry.width] || (h, w) != (entry.height, entry.width) {
        return Err(CoreError::UnsupportedDimension(format!("scene {} does not match its manifest extent", entry.id)));
    }
    if let Some(pos) = mask.iter().position(|&m| m >= entry.num_classes) {
        return Err(CoreError::InvalidLabel(format!(
            "{}: class id {} at pixel {pos} outside [0, {})",
            mask_path.display(),
            mask[pos],
            entry.num_classes
        )));
    }
    Ok(LabeledScene { image, mask, num_classes: entry.num_classes, domain: entry.domain, seed: entry.seed })
}

/// Writes every scene and then `dataset.json`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    for (entry, scene) in dataset.entries.iter().zip(&dataset.scenes) {
        write_scene(scene, dir, entry)?;
    }
    let manifest = Manifest { format: DATASET_FORMAT.into(), config: dataset.config.clone(), scenes: dataset.entries.clone() };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::Json { path: path.clone(), source: e })?;
    fs::write(&path, text + "\n").map_err(|e| CoreError::io(&path, e))?;
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CoreError::Json { path: path.clone(), source: e })?;
    if manifest.format != DATASET_FORMAT {
        return Err(CoreError::Parse { file: path, offset: 0, msg: format!("unknown dataset format {}", manifest.format) });
    }
    let scenes = manifest.scenes.iter().map(|e| read_scene(dir, e)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config: manifest.config, entries: manifest.scenes, scenes })
}
