//! On-disk formats: JSON headers with sibling little-endian payloads for
//! volumes and parameters, plain JSON for cluster sets, reports and dataset
//! manifests. JSON keys are written in sorted order and every file is written
//! to a temporary sibling and renamed into place.
//!
//! Concurrent writers to the same path are not supported.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{Architecture, ClassifierParams};
use crate::clustering::{Cluster, ClusterSet};
use crate::error::{Error, Result};
use crate::phantom::{LesionSpec, PhantomConfig, PhantomStudy};
use crate::volume::{Dims, Volume};

pub const FORMAT_VERSION: u32 = 1;
pub const VOLUME_MAGIC: &str = "explainseg-volume";
pub const MODEL_MAGIC: &str = "explainseg-model";
pub const CLUSTERS_MAGIC: &str = "explainseg-clusters";
pub const MANIFEST_MAGIC: &str = "explainseg-dataset";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Precondition(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Serializes with sorted object keys, pretty-printed.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key
    let v = serde_json::to_value(value)
        .map_err(|e| Error::DataIntegrity(format!("cannot serialize: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v)
        .map_err(|e| Error::DataIntegrity(format!("cannot serialize: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_atomic(path, to_sorted_json(value)?.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    parse_json(&bytes, path)
}

fn parse_json<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::Schema {
            path: path.to_path_buf(),
            field: if field == "." { "<root>".into() } else { field },
            reason: e.into_inner().to_string(),
        }
    })
}

fn schema(path: &Path, field: &str, reason: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        field: field.into(),
        reason: reason.into(),
    }
}

fn check_magic_version(path: &Path, magic: &str, expected: &str, version: u32) -> Result<()> {
    if magic != expected {
        return Err(schema(path, "magic", format!("expected '{expected}', found '{magic}'")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn payload_path(header: &Path, ext: &str) -> PathBuf {
    header.with_extension(ext)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    U8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSemantics {
    Hu,
    Windowed,
    Heatmap,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub magic: String,
    pub version: u32,
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub dtype: DType,
    pub value_semantics: ValueSemantics,
    /// File name of the payload, relative to the header.
    pub payload: String,
    /// Hex SHA-256 of the payload bytes.
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

/// Writes `path` (JSON header) and a sibling `.raw` payload, x-fastest.
/// Masks are stored as one byte per voxel and must be binary.
pub fn save_volume(
    vol: &Volume,
    semantics: ValueSemantics,
    path: &Path,
    provenance: Option<serde_json::Value>,
) -> Result<VolumeHeader> {
    let (dtype, bytes) = if semantics == ValueSemantics::Mask {
        vol.ensure_binary()?;
        (DType::U8, vol.data().iter().map(|&v| v as u8).collect::<Vec<u8>>())
    } else {
        (
            DType::F32,
            vol.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        )
    };
    let raw = payload_path(path, "raw");
    let header = VolumeHeader {
        magic: VOLUME_MAGIC.into(),
        version: FORMAT_VERSION,
        dims: vol.dims(),
        spacing: vol.spacing(),
        dtype,
        value_semantics: semantics,
        payload: file_name(&raw),
        checksum: sha256_hex(&bytes),
        provenance,
    };
    write_atomic(&raw, &bytes)?;
    save_json(&header, path)?;
    Ok(header)
}

pub fn load_volume(path: &Path) -> Result<(Volume, VolumeHeader)> {
    let header: VolumeHeader = load_json(path)?;
    check_magic_version(path, &header.magic, VOLUME_MAGIC, header.version)?;
    let raw = path.with_file_name(&header.payload);
    let bytes = read(&raw)?;
    let width = match header.dtype {
        DType::F32 => 4,
        DType::U8 => 1,
    };
    let expected = header.dims.len() * width;
    if bytes.len() != expected {
        return Err(Error::Length {
            path: raw,
            expected,
            found: bytes.len(),
        });
    }
    if sha256_hex(&bytes) != header.checksum {
        return Err(Error::Checksum { path: raw });
    }
    let data: Vec<f32> = match header.dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    let vol = if header.value_semantics == ValueSemantics::Mask {
        let mut v = Volume::new_mask(data, header.dims)?;
        v.set_spacing(header.spacing);
        v
    } else {
        Volume::with_spacing(data, header.dims, header.spacing)?
    };
    Ok((vol, header))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterRecord {
    id: usize,
    voxel_count: usize,
    centroid: [f64; 3],
    bbox: [[usize; 3]; 2],
    /// `[start, length]` runs over sorted linear indices.
    rle_voxels: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterFile {
    magic: String,
    version: u32,
    source_dims: Dims,
    clusters: Vec<ClusterRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

pub fn rle_encode(sorted: &[usize]) -> Vec<[usize; 2]> {
    let mut runs: Vec<[usize; 2]> = Vec::new();
    for &i in sorted {
        match runs.last_mut() {
            Some(r) if r[0] + r[1] == i => r[1] += 1,
            _ => runs.push([i, 1]),
        }
    }
    runs
}

pub fn rle_decode(runs: &[[usize; 2]]) -> Vec<usize> {
    runs.iter().flat_map(|&[s, n]| s..s + n).collect()
}

pub fn save_clusters(cs: &ClusterSet, path: &Path, config_hash: Option<&str>) -> Result<()> {
    let file = ClusterFile {
        magic: CLUSTERS_MAGIC.into(),
        version: FORMAT_VERSION,
        source_dims: cs.source_dims,
        clusters: cs
            .clusters
            .iter()
            .map(|c| ClusterRecord {
                id: c.id,
                voxel_count: c.voxel_count,
                centroid: c.centroid,
                bbox: c.bbox,
                rle_voxels: rle_encode(&c.voxels),
            })
            .collect(),
        config_hash: config_hash.map(str::to_string),
    };
    save_json(&file, path)
}

/// Loads a cluster set, checking that runs are sorted, in range, disjoint and
/// consistent with the stored counts.
pub fn load_clusters(path: &Path) -> Result<(ClusterSet, Option<String>)> {
    let file: ClusterFile = load_json(path)?;
    check_magic_version(path, &file.magic, CLUSTERS_MAGIC, file.version)?;
    let dims = file.source_dims;
    let mut seen = vec![false; dims.len()];
    let mut clusters = Vec::with_capacity(file.clusters.len());
    for (k, rec) in file.clusters.into_iter().enumerate() {
        let field = |f: &str| format!("clusters[{k}].{f}");
        let voxels = rle_decode(&rec.rle_voxels);
        if voxels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(schema(path, &field("rle_voxels"), "runs must be sorted and non-overlapping"));
        }
        for &v in &voxels {
            if v >= dims.len() {
                return Err(schema(path, &field("rle_voxels"), format!("voxel {v} outside {dims}")));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(schema(path, &field("rle_voxels"), format!("voxel {v} in two clusters")));
            }
        }
        if voxels.len() != rec.voxel_count {
            return Err(schema(
                path,
                &field("voxel_count"),
                format!("{} stored, {} decoded", rec.voxel_count, voxels.len()),
            ));
        }
        let c = Cluster::from_indices(rec.id, voxels, dims)
            .map_err(|e| schema(path, &field("rle_voxels"), e.to_string()))?;
        if c.bbox != rec.bbox {
            return Err(schema(path, &field("bbox"), "does not match voxels"));
        }
        if (0..3).any(|a| (c.centroid[a] - rec.centroid[a]).abs() > 1e-9 * (1.0 + c.centroid[a].abs())) {
            return Err(schema(path, &field("centroid"), "does not match voxels"));
        }
        // keep the stored centroid so save/load is bit-exact
        clusters.push(Cluster { centroid: rec.centroid, ..c });
    }
    Ok((
        ClusterSet {
            source_dims: dims,
            clusters,
        },
        file.config_hash,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub magic: String,
    pub version: u32,
    pub architecture: Architecture,
    pub param_count: usize,
    /// File name of the little-endian f32 blob, relative to the descriptor.
    pub payload: String,
    pub checksum: String,
    /// Attribution target of the network output.
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

pub fn save_params(
    params: &ClassifierParams,
    path: &Path,
    provenance: Option<serde_json::Value>,
) -> Result<ModelDescriptor> {
    let bytes: Vec<u8> = params.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
    let bin = payload_path(path, "bin");
    let desc = ModelDescriptor {
        magic: MODEL_MAGIC.into(),
        version: FORMAT_VERSION,
        architecture: params.architecture().clone(),
        param_count: params.param_count(),
        payload: file_name(&bin),
        checksum: sha256_hex(&bytes),
        output: "logit".into(),
        provenance,
    };
    write_atomic(&bin, &bytes)?;
    save_json(&desc, path)?;
    Ok(desc)
}

pub fn load_params(path: &Path) -> Result<(ClassifierParams, ModelDescriptor)> {
    let desc: ModelDescriptor = load_json(path)?;
    check_magic_version(path, &desc.magic, MODEL_MAGIC, desc.version)?;
    let bin = path.with_file_name(&desc.payload);
    let bytes = read(&bin)?;
    if bytes.len() != desc.param_count * 4 {
        return Err(Error::Length {
            path: bin,
            expected: desc.param_count * 4,
            found: bytes.len(),
        });
    }
    if sha256_hex(&bytes) != desc.checksum {
        return Err(Error::Checksum { path: bin });
    }
    let flat: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let params = ClassifierParams::from_flat(desc.architecture.clone(), &flat)
        .map_err(|e| schema(path, "architecture", e.to_string()))?;
    Ok((params, desc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Header paths relative to the manifest directory.
    pub volume: String,
    pub gt_mask: String,
    pub positive: bool,
    pub lesions: Vec<LesionSpec>,
    pub slice_labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub magic: String,
    pub version: u32,
    pub phantom: PhantomConfig,
    pub count: usize,
    pub positivity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub studies: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn positives(&self) -> usize {
        self.studies.iter().filter(|s| s.positive).count()
    }
}

/// Writes every study (HU volume and ground-truth mask) plus `manifest.json` into `dir`.
pub fn save_dataset(
    dir: &Path,
    studies: &[PhantomStudy],
    phantom: &PhantomConfig,
    positivity: f64,
    config_hash: Option<&str>,
) -> Result<DatasetManifest> {
    let prov = config_hash.map(|h| serde_json::json!({ "config_hash": h }));
    let mut entries = Vec::with_capacity(studies.len());
    for s in studies {
        let vol = format!("{}.json", s.id);
        let gt = format!("{}_gt.json", s.id);
        save_volume(&s.volume, ValueSemantics::Hu, &dir.join(&vol), prov.clone())?;
        save_volume(&s.gt_mask, ValueSemantics::Mask, &dir.join(&gt), prov.clone())?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            seed: s.seed,
            volume: vol,
            gt_mask: gt,
            positive: s.is_positive(),
            lesions: s.lesions.clone(),
            slice_labels: s.slice_labels.clone(),
        });
    }
    let manifest = DatasetManifest {
        magic: MANIFEST_MAGIC.into(),
        version: FORMAT_VERSION,
        phantom: phantom.clone(),
        count: studies.len(),
        positivity,
        config_hash: config_hash.map(str::to_string),
        studies: entries,
    };
    save_json(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Loads `dir/manifest.json` and checks that every referenced header and
/// payload exists.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let m: DatasetManifest = load_json(&path)?;
    check_magic_version(&path, &m.magic, MANIFEST_MAGIC, m.version)?;
    if m.count != m.studies.len() {
        return Err(schema(&path, "count", format!("{} declared, {} listed", m.count, m.studies.len())));
    }
    let mut ids = std::collections::BTreeSet::new();
    for (k, e) in m.studies.iter().enumerate() {
        if !ids.insert(e.id.as_str()) {
            return Err(schema(&path, &format!("studies[{k}].id"), format!("duplicate id '{}'", e.id)));
        }
        for rel in [&e.volume, &e.gt_mask] {
            let header = dir.join(rel);
            for p in [header.clone(), payload_path(&header, "raw")] {
                if !p.is_file() {
                    return Err(Error::Reference(format!(
                        "study '{}' references missing file {}",
                        e.id,
                        p.display()
                    )));
                }
            }
        }
    }
    Ok(m)
}

/// Reads one manifest entry back into a study.
pub fn load_study(dir: &Path, entry: &ManifestEntry) -> Result<PhantomStudy> {
    let (volume, _) = load_volume(&dir.join(&entry.volume))?;
    let (gt_mask, _) = load_volume(&dir.join(&entry.gt_mask))?;
    volume.ensure_same_dims(&gt_mask, "study volume vs ground truth")?;
    if entry.slice_labels.len() != volume.dims().depth {
        return Err(Error::Shape(format!(
            "study '{}' has {} slice labels for depth {}",
            entry.id,
            entry.slice_labels.len(),
            volume.dims().depth
        )));
    }
    Ok(PhantomStudy {
        id: entry.id.clone(),
        seed: entry.seed,
        volume,
        gt_mask,
        slice_labels: entry.slice_labels.clone(),
        lesions: entry.lesions.clone(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<PhantomStudy>)> {
    let m = load_manifest(dir)?;
    let studies = m
        .studies
        .iter()
        .map(|e| load_study(dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, studies))
}
