//! Model and dataset persistence: a human-diffable JSON manifest plus raw
//! ATF1 blobs in a sibling `blobs/` directory.
//!
//! Save -> load -> save is byte-identical. Every blob carries an FNV-1a
//! digest checked on load, and decomposed layers additionally store a
//! digest of their composed dense filters so `verify` can detect tampered
//! coefficients (both forward paths consume the same alpha, so an
//! equivalence check alone cannot).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::atf;
use crate::atom_conv::{AtomCoefficients, DecomposedConv2d, FilterAtoms};
use crate::error::{Error, Result};
use crate::finetune::Dataset;
use crate::kron_linear::{self, KronFactors};
use crate::model::{Layer, LoRAAdapter, Model};
use crate::overcomplete::{OvercompleteAtoms, OvercompleteConv2d};
use crate::tensor::{ConvGeometry, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// 64-bit FNV-1a over a byte stream; integrity checking, not cryptography.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tensor_digest(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 4 + t.rank() * 4);
    for &e in t.shape() {
        bytes.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    format!("{:016x}", fnv1a64(&bytes))
}

/// Reference to one ATF1 blob file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlobRef {
    pub file: String,
    pub shape: Vec<usize>,
    pub digest: String,
}

/// One layer record of the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerRecord {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_channel: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_rows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_cols: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lora_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub blobs: BTreeMap<String, BlobRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen: Vec<String>,
    /// Digest of the composed dense weight of a decomposed layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composed_digest: Option<String>,
}

impl LayerRecord {
    fn bare(kind: &str) -> Self {
        LayerRecord {
            kind: kind.into(),
            stride: None,
            padding: None,
            eps: None,
            m: None,
            m1: None,
            per_channel: None,
            k_rows: None,
            k_cols: None,
            lora_scale: None,
            blobs: BTreeMap::new(),
            frozen: Vec::new(),
            composed_digest: None,
        }
    }
}

/// The manifest document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelManifest {
    pub format_version: u32,
    pub layers: Vec<LayerRecord>,
    pub head: BTreeMap<String, BlobRef>,
    /// Free-form run metadata (training settings, history pointers).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

fn blobs_dir(dir: &Path) -> PathBuf {
    dir.join("blobs")
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Digest of the composed dense weight, for layers that have one.
pub fn composed_digest(layer: &Layer) -> Result<Option<String>> {
    Ok(match layer {
        Layer::Decomposed(l) => Some(tensor_digest(&crate::atom_conv::compose_filters(
            &l.coeffs, &l.atoms,
        )?)),
        Layer::Overcomplete(l) => Some(tensor_digest(&l.compose_effective()?)),
        Layer::Kron { factors, .. } => Some(tensor_digest(&kron_linear::compose_linear(factors))),
        _ => None,
    })
}

struct BlobWriter {
    dir: PathBuf,
}

impl BlobWriter {
    fn write(&self, name: &str, t: &Tensor) -> Result<BlobRef> {
        let file = format!("{name}.atf");
        atf::save(&self.dir.join(&file), t)?;
        Ok(BlobRef {
            file,
            shape: t.shape().to_vec(),
            digest: tensor_digest(t),
        })
    }
}

/// Write the model (manifest + blobs) under `dir`, creating it if needed.
pub fn save_model(dir: &Path, model: &Model, meta: &BTreeMap<String, Value>) -> Result<()> {
    fs::create_dir_all(blobs_dir(dir))?;
    let w = BlobWriter {
        dir: blobs_dir(dir),
    };
    let mut layers = Vec::with_capacity(model.layers.len());
    for (idx, layer) in model.layers.iter().enumerate() {
        let tag = |name: &str| format!("layer{idx:03}.{name}");
        let mut rec = LayerRecord::bare(layer.kind());
        match layer {
            Layer::Conv {
                weight,
                bias,
                geom,
                lora,
            } => {
                rec.stride = Some(geom.stride);
                rec.padding = Some(geom.padding);
                rec.blobs.insert("weight".into(), w.write(&tag("weight"), weight)?);
                rec.blobs.insert("bias".into(), w.write(&tag("bias"), bias)?);
                if let Some(a) = lora {
                    rec.lora_scale = Some(a.scale);
                    rec.blobs
                        .insert("lora_down".into(), w.write(&tag("lora_down"), &a.w_down)?);
                    rec.blobs
                        .insert("lora_up".into(), w.write(&tag("lora_up"), &a.w_up)?);
                }
            }
            Layer::Decomposed(l) => {
                rec.stride = Some(l.geom.stride);
                rec.padding = Some(l.geom.padding);
                rec.m = Some(l.atoms.num_atoms());
                rec.blobs
                    .insert("atoms".into(), w.write(&tag("atoms"), &l.atoms.tensor)?);
                rec.blobs
                    .insert("alpha".into(), w.write(&tag("alpha"), l.coeffs.alpha())?);
                if let Some(b) = &l.bias {
                    rec.blobs.insert("bias".into(), w.write(&tag("bias"), b)?);
                }
                if l.coeffs.is_frozen() {
                    rec.frozen.push("alpha".into());
                }
                rec.composed_digest = composed_digest(layer)?;
            }
            Layer::Overcomplete(l) => {
                rec.stride = Some(l.geom.stride);
                rec.padding = Some(l.geom.padding);
                rec.m = Some(l.over.m);
                rec.m1 = Some(l.over.m1);
                rec.per_channel = Some(l.over.per_channel);
                rec.blobs
                    .insert("beta".into(), w.write(&tag("beta"), &l.over.beta)?);
                rec.blobs.insert("d1".into(), w.write(&tag("d1"), &l.over.d1)?);
                rec.blobs
                    .insert("alpha".into(), w.write(&tag("alpha"), l.coeffs.alpha())?);
                if let Some(b) = &l.bias {
                    rec.blobs.insert("bias".into(), w.write(&tag("bias"), b)?);
                }
                if l.coeffs.is_frozen() {
                    rec.frozen.push("alpha".into());
                }
                rec.composed_digest = composed_digest(layer)?;
            }
            Layer::Kron { factors, bias } => {
                rec.k_rows = Some(factors.k_rows);
                rec.k_cols = Some(factors.k_cols);
                rec.blobs.insert("a".into(), w.write(&tag("a"), &factors.a)?);
                rec.blobs.insert("b".into(), w.write(&tag("b"), &factors.b)?);
                rec.blobs.insert("bias".into(), w.write(&tag("bias"), bias)?);
                rec.frozen.push("a".into());
                rec.composed_digest = composed_digest(layer)?;
            }
            Layer::Norm { gain, bias, eps } => {
                rec.eps = Some(*eps);
                rec.blobs.insert("gain".into(), w.write(&tag("gain"), gain)?);
                rec.blobs.insert("bias".into(), w.write(&tag("bias"), bias)?);
            }
            Layer::Relu | Layer::GlobalAvgPool => {}
        }
        layers.push(rec);
    }
    let mut head = BTreeMap::new();
    head.insert("weight".to_string(), w.write("head.weight", &model.head_w)?);
    head.insert("bias".to_string(), w.write("head.bias", &model.head_b)?);
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        layers,
        head,
        meta: meta.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(manifest_path(dir), text)?;
    Ok(())
}

fn read_blob(dir: &Path, r: &BlobRef) -> Result<Tensor> {
    let t = atf::load(&blobs_dir(dir).join(&r.file))?;
    if t.shape() != r.shape.as_slice() {
        return Err(Error::BadFormat(format!(
            "{}: shape {:?} does not match manifest {:?}",
            r.file,
            t.shape(),
            r.shape
        )));
    }
    let d = tensor_digest(&t);
    if d != r.digest {
        return Err(Error::BadFormat(format!(
            "{}: digest {d} does not match manifest {}",
            r.file, r.digest
        )));
    }
    Ok(t)
}

fn need<'a>(rec: &'a LayerRecord, name: &str) -> Result<&'a BlobRef> {
    rec.blobs
        .get(name)
        .ok_or_else(|| Error::BadFormat(format!("{} layer is missing blob '{name}'", rec.kind)))
}

fn geom_of(rec: &LayerRecord) -> Result<ConvGeometry> {
    ConvGeometry::new(
        rec.stride
            .ok_or_else(|| Error::BadFormat(format!("{} layer is missing stride", rec.kind)))?,
        rec.padding
            .ok_or_else(|| Error::BadFormat(format!("{} layer is missing padding", rec.kind)))?,
    )
}

/// Read the manifest document alone.
pub fn load_manifest(dir: &Path) -> Result<ModelManifest> {
    let text = fs::read_to_string(manifest_path(dir))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::BadFormat(format!(
            "manifest format {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Load a model saved by [`save_model`], checking every blob digest.
pub fn load_model(dir: &Path) -> Result<(Model, ModelManifest)> {
    let manifest = load_manifest(dir)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for rec in &manifest.layers {
        let layer = match rec.kind.as_str() {
            "conv" => {
                let weight = read_blob(dir, need(rec, "weight")?)?;
                let bias = read_blob(dir, need(rec, "bias")?)?;
                let lora = match (rec.blobs.get("lora_down"), rec.blobs.get("lora_up")) {
                    (Some(d), Some(u)) => Some(LoRAAdapter {
                        w_down: read_blob(dir, d)?,
                        w_up: read_blob(dir, u)?,
                        scale: rec.lora_scale.unwrap_or(1.0),
                    }),
                    _ => None,
                };
                Layer::Conv {
                    weight,
                    bias,
                    geom: geom_of(rec)?,
                    lora,
                }
            }
            "decomposed-conv" => {
                let atoms = FilterAtoms::new(read_blob(dir, need(rec, "atoms")?)?)?;
                let mut coeffs = AtomCoefficients::new(read_blob(dir, need(rec, "alpha")?)?)?;
                if rec.frozen.iter().any(|f| f == "alpha") {
                    coeffs.freeze();
                }
                let bias = match rec.blobs.get("bias") {
                    Some(b) => Some(read_blob(dir, b)?),
                    None => None,
                };
                Layer::Decomposed(DecomposedConv2d::new(atoms, coeffs, geom_of(rec)?, bias)?)
            }
            "overcomplete-conv" => {
                let beta = read_blob(dir, need(rec, "beta")?)?;
                let d1 = read_blob(dir, need(rec, "d1")?)?;
                let m = rec
                    .m
                    .ok_or_else(|| Error::BadFormat("overcomplete layer missing m".into()))?;
                let m1 = rec
                    .m1
                    .ok_or_else(|| Error::BadFormat("overcomplete layer missing m1".into()))?;
                let over = OvercompleteAtoms {
                    beta,
                    d1,
                    m,
                    m1,
                    per_channel: rec.per_channel.unwrap_or(false),
                };
                let mut coeffs = AtomCoefficients::new(read_blob(dir, need(rec, "alpha")?)?)?;
                if rec.frozen.iter().any(|f| f == "alpha") {
                    coeffs.freeze();
                }
                let bias = match rec.blobs.get("bias") {
                    Some(b) => Some(read_blob(dir, b)?),
                    None => None,
                };
                Layer::Overcomplete(OvercompleteConv2d::new(over, coeffs, geom_of(rec)?, bias)?)
            }
            "kron-linear" => {
                let a = read_blob(dir, need(rec, "a")?)?;
                let b = read_blob(dir, need(rec, "b")?)?;
                let bias = read_blob(dir, need(rec, "bias")?)?;
                Layer::Kron {
                    factors: KronFactors {
                        a,
                        b,
                        k_rows: rec
                            .k_rows
                            .ok_or_else(|| Error::BadFormat("kron layer missing k_rows".into()))?,
                        k_cols: rec
                            .k_cols
                            .ok_or_else(|| Error::BadFormat("kron layer missing k_cols".into()))?,
                    },
                    bias,
                }
            }
            "norm" => Layer::Norm {
                gain: read_blob(dir, need(rec, "gain")?)?,
                bias: read_blob(dir, need(rec, "bias")?)?,
                eps: rec
                    .eps
                    .ok_or_else(|| Error::BadFormat("norm layer missing eps".into()))?,
            },
            "relu" => Layer::Relu,
            "global-avg-pool" => Layer::GlobalAvgPool,
            other => return Err(Error::BadFormat(format!("unknown layer kind '{other}'"))),
        };
        layers.push(layer);
    }
    let head_w = read_blob(
        dir,
        manifest
            .head
            .get("weight")
            .ok_or_else(|| Error::BadFormat("manifest missing head weight".into()))?,
    )?;
    let head_b = read_blob(
        dir,
        manifest
            .head
            .get("bias")
            .ok_or_else(|| Error::BadFormat("manifest missing head bias".into()))?,
    )?;
    Ok((
        Model {
            layers,
            head_w,
            head_b,
        },
        manifest,
    ))
}

/// Dataset sidecar metadata.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub split: String,
}

/// Write a dataset as images.atf + labels.atf + meta.json under `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset, split: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    atf::save(&dir.join("images.atf"), &data.images)?;
    let labels = Tensor::new(
        vec![data.labels.len()],
        data.labels.iter().map(|&l| l as f32).collect(),
    )?;
    atf::save(&dir.join("labels.atf"), &labels)?;
    let meta = DatasetMeta {
        num_classes: data.num_classes,
        split: split.into(),
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join("meta.json"), text)?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let images = atf::load(&dir.join("images.atf"))?;
    let labels_t = atf::load(&dir.join("labels.atf"))?;
    let mut labels = Vec::with_capacity(labels_t.len());
    for &v in labels_t.data() {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::BadFormat(format!("non-integer label {v}")));
        }
        labels.push(v as usize);
    }
    let data = Dataset::new(images, labels, meta.num_classes)?;
    Ok((data, meta))
}
