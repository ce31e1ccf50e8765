//! Volumes, label maps, probability maps and the on-disk case container.
//!
//! A case is stored as a JSON sidecar (`<case_id>.json`) next to raw
//! little-endian payloads: `<case_id>.img.bin` (float32, C×D×H×W),
//! `<case_id>.lbl.bin` (int8, D×H×W) and optionally `<case_id>.prob.bin`
//! (float32, K×D×H×W). A dataset root carries `manifest.json`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const NUM_CLASSES: usize = 4;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const HIDDEN_DIR: &str = "hidden";

/// Tolerance on the per-voxel class sum of a [`ProbabilityMap`].
pub const PROB_SUM_TOL: f32 = 1e-5;

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    channels: usize,
    dims: Dims,
    pub voxel_spacing: [f32; 3],
    pub channel_names: Vec<String>,
}

pub fn default_channel_names(c: usize) -> Vec<String> {
    const NAMES: [&str; 4] = ["t1", "t2", "t1ce", "flair"];
    (0..c)
        .map(|i| NAMES.get(i).map_or_else(|| format!("ch{i}"), |s| s.to_string()))
        .collect()
}

impl Volume {
    pub fn new(data: Vec<f32>, channels: usize, dims: Dims) -> Result<Self> {
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::Shape(format!(
                "volume data length {} does not match {}x{:?}",
                data.len(),
                channels,
                dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume element {i}")));
        }
        Ok(Volume {
            data,
            channels,
            dims,
            voxel_spacing: [1.0; 3],
            channel_names: default_channel_names(channels),
        })
    }

    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Volume {
            data: vec![0.0; channels * voxel_count(dims)],
            channels,
            dims,
            voxel_spacing: [1.0; 3],
            channel_names: default_channel_names(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access; callers are responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = voxel_count(self.dims);
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("volume element {i}"))),
            None => Ok(()),
        }
    }

    /// Channel-wise concatenation (`self` channels first).
    pub fn concat(&self, other: &Volume) -> Result<Volume> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.dims, other.dims
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut names = self.channel_names.clone();
        names.extend(other.channel_names.iter().cloned());
        Ok(Volume {
            data,
            channels: self.channels + other.channels,
            dims: self.dims,
            voxel_spacing: self.voxel_spacing,
            channel_names: names,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Taxonomy {
    /// 0 background, 1 WM, 2 GM, 3 CSF
    Tissue,
    /// 0 background, 1 edema, 2 non-enhancing tumor, 3 enhancing tumor
    Tumor,
}

impl Taxonomy {
    pub fn class_names(self) -> [&'static str; NUM_CLASSES] {
        match self {
            Taxonomy::Tissue => ["background", "wm", "gm", "csf"],
            Taxonomy::Tumor => ["background", "edema", "non_enhancing", "enhancing"],
        }
    }
}

pub mod tissue {
    pub const BACKGROUND: i8 = 0;
    pub const WM: i8 = 1;
    pub const GM: i8 = 2;
    pub const CSF: i8 = 3;
}

pub mod tumor {
    pub const BACKGROUND: i8 = 0;
    pub const EDEMA: i8 = 1;
    pub const NON_ENHANCING: i8 = 2;
    pub const ENHANCING: i8 = 3;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    data: Vec<i8>,
    dims: Dims,
    taxonomy: Taxonomy,
}

impl LabelMap {
    pub fn new(data: Vec<i8>, dims: Dims, taxonomy: Taxonomy) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "label data length {} does not match {:?}",
                data.len(),
                dims
            )));
        }
        let map = LabelMap {
            data,
            dims,
            taxonomy,
        };
        map.check()?;
        Ok(map)
    }

    pub fn zeros(dims: Dims, taxonomy: Taxonomy) -> Self {
        LabelMap {
            data: vec![0; voxel_count(dims)],
            dims,
            taxonomy,
        }
    }

    fn check(&self) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&v| !(0..NUM_CLASSES as i8).contains(&v))
        {
            Some(i) => Err(Error::Invariant(format!(
                "label value {} at voxel {i} outside the {:?} taxonomy",
                self.data[i], self.taxonomy
            ))),
            None => Ok(()),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn taxonomy(&self) -> Taxonomy {
        self.taxonomy
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn set(&mut self, idx: usize, value: i8) {
        assert!((0..NUM_CLASSES as i8).contains(&value), "label {value} out of range");
        self.data[idx] = value;
    }

    pub fn count(&self, value: i8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }

    /// One-hot encoding as a `NUM_CLASSES`×D×H×W float buffer.
    pub fn one_hot(&self) -> Vec<f32> {
        let n = self.data.len();
        let mut out = vec![0.0; NUM_CLASSES * n];
        for (i, &v) in self.data.iter().enumerate() {
            out[v as usize * n + i] = 1.0;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    data: Vec<f32>,
    dims: Dims,
}

impl ProbabilityMap {
    /// Validates range and per-voxel normalization.
    pub fn new(data: Vec<f32>, dims: Dims) -> Result<Self> {
        let n = voxel_count(dims);
        if data.len() != NUM_CLASSES * n {
            return Err(Error::Shape(format!(
                "probability data length {} does not match {}x{:?}",
                data.len(),
                NUM_CLASSES,
                dims
            )));
        }
        for i in 0..n {
            let mut sum = 0.0f32;
            for k in 0..NUM_CLASSES {
                let p = data[k * n + i];
                if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                    return Err(Error::Invariant(format!(
                        "probability {p} at class {k}, voxel {i} outside [0,1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Invariant(format!(
                    "probabilities at voxel {i} sum to {sum}"
                )));
            }
        }
        Ok(ProbabilityMap { data, dims })
    }

    pub fn from_labels(labels: &LabelMap) -> Self {
        ProbabilityMap {
            data: labels.one_hot(),
            dims: labels.dims(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn class(&self, k: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.data[k * n..(k + 1) * n]
    }

    /// Per-voxel argmax; ties resolve to the lower class index.
    pub fn argmax(&self, taxonomy: Taxonomy) -> LabelMap {
        let n = voxel_count(self.dims);
        let data = (0..n)
            .map(|i| {
                let mut best = 0;
                for k in 1..NUM_CLASSES {
                    if self.data[k * n + i] > self.data[best * n + i] {
                        best = k;
                    }
                }
                best as i8
            })
            .collect();
        LabelMap {
            data,
            dims: self.dims,
            taxonomy,
        }
    }

    /// Hard one-hot variant of this map.
    pub fn to_one_hot(&self) -> ProbabilityMap {
        ProbabilityMap::from_labels(&self.argmax(Taxonomy::Tissue))
    }

    pub fn as_volume(&self) -> Volume {
        let mut v = Volume {
            data: self.data.clone(),
            channels: NUM_CLASSES,
            dims: self.dims,
            voxel_spacing: [1.0; 3],
            channel_names: Vec::new(),
        };
        v.channel_names = Taxonomy::Tissue
            .class_names()
            .iter()
            .map(|s| format!("p_{s}"))
            .collect();
        v
    }
}

// ---------------------------------------------------------------------------
// Container format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelHeader {
    pub taxonomy: Taxonomy,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseHeader {
    pub format_version: u32,
    pub case_id: String,
    /// [C, D, H, W]
    pub shape: [usize; 4],
    pub dtype: String,
    pub byte_order: String,
    pub channel_names: Vec<String>,
    pub voxel_spacing: [f32; 3],
    pub labels: Option<LabelHeader>,
}

impl CaseHeader {
    pub fn dims(&self) -> Dims {
        [self.shape[1], self.shape[2], self.shape[3]]
    }
}

/// File paths of a case given its stem (`<dir>/<case_id>`).
#[derive(Debug, Clone)]
pub struct CasePaths {
    pub header: PathBuf,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub prob: PathBuf,
}

impl CasePaths {
    pub fn from_stem(stem: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        CasePaths {
            header: with(".json"),
            image: with(".img.bin"),
            labels: with(".lbl.bin"),
            prob: with(".prob.bin"),
        }
    }
}

fn case_id_of(stem: &Path) -> Result<String> {
    stem.file_name()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::InvalidArgument(format!("bad case path {}", stem.display())))
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Header {
        path: path.to_owned(),
        source,
    })
}

pub(crate) fn f32_to_le_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path: path.to_owned(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

pub(crate) fn le_bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Writes a case container at `stem` (`<dir>/<case_id>`).
pub fn save_case(volume: &Volume, labels: Option<&LabelMap>, stem: &Path) -> Result<()> {
    volume.check_finite()?;
    if volume.channel_names.len() != volume.channels {
        return Err(Error::Invariant(format!(
            "{} channel names for {} channels",
            volume.channel_names.len(),
            volume.channels
        )));
    }
    if let Some(l) = labels {
        l.check()?;
        if l.dims != volume.dims {
            return Err(Error::Shape(format!(
                "labels {:?} vs volume {:?}",
                l.dims, volume.dims
            )));
        }
    }
    let paths = CasePaths::from_stem(stem);
    let [d, h, w] = volume.dims;
    let header = CaseHeader {
        format_version: FORMAT_VERSION,
        case_id: case_id_of(stem)?,
        shape: [volume.channels, d, h, w],
        dtype: "float32".into(),
        byte_order: "little".into(),
        channel_names: volume.channel_names.clone(),
        voxel_spacing: volume.voxel_spacing,
        labels: labels.map(|l| LabelHeader {
            taxonomy: l.taxonomy,
            dtype: "int8".into(),
        }),
    };
    write_atomic(&paths.image, &f32_to_le_bytes(&volume.data))?;
    if let Some(l) = labels {
        let bytes: Vec<u8> = l.data.iter().map(|&v| v as u8).collect();
        write_atomic(&paths.labels, &bytes)?;
    }
    write_json(&paths.header, &header)
}

pub fn load_header(stem: &Path) -> Result<CaseHeader> {
    let header: CaseHeader = read_json(&CasePaths::from_stem(stem).header)?;
    check_version(header.format_version)?;
    Ok(header)
}

/// Reads a case container written by [`save_case`].
pub fn load_case(stem: &Path) -> Result<(Volume, Option<LabelMap>)> {
    let paths = CasePaths::from_stem(stem);
    let header = load_header(stem)?;
    let [c, d, h, w] = header.shape;
    let dims = [d, h, w];
    let n = voxel_count(dims);
    let bytes = read_payload(&paths.image, c * n * 4)?;
    let mut volume = Volume::new(le_bytes_to_f32(&bytes), c, dims)?;
    volume.voxel_spacing = header.voxel_spacing;
    volume.channel_names = header.channel_names.clone();
    let labels = match &header.labels {
        Some(lh) => {
            let bytes = read_payload(&paths.labels, n)?;
            Some(LabelMap::new(
                bytes.into_iter().map(|b| b as i8).collect(),
                dims,
                lh.taxonomy,
            )?)
        }
        None => None,
    };
    Ok((volume, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelOnlyHeader {
    format_version: u32,
    case_id: String,
    shape: [usize; 3],
    taxonomy: Taxonomy,
    dtype: String,
}

/// Label-only container (used for the quarantined target tissue truth).
pub fn save_label_map(labels: &LabelMap, stem: &Path) -> Result<()> {
    labels.check()?;
    let paths = CasePaths::from_stem(stem);
    let bytes: Vec<u8> = labels.data.iter().map(|&v| v as u8).collect();
    write_atomic(&paths.labels, &bytes)?;
    write_json(
        &paths.header,
        &LabelOnlyHeader {
            format_version: FORMAT_VERSION,
            case_id: case_id_of(stem)?,
            shape: labels.dims,
            taxonomy: labels.taxonomy,
            dtype: "int8".into(),
        },
    )
}

pub fn load_label_map(stem: &Path) -> Result<LabelMap> {
    let paths = CasePaths::from_stem(stem);
    let header: LabelOnlyHeader = read_json(&paths.header)?;
    check_version(header.format_version)?;
    let bytes = read_payload(&paths.labels, voxel_count(header.shape))?;
    LabelMap::new(
        bytes.into_iter().map(|b| b as i8).collect(),
        header.shape,
        header.taxonomy,
    )
}

/// Writes `<stem>.prob.bin`.
pub fn save_prob_map(prob: &ProbabilityMap, stem: &Path) -> Result<()> {
    write_atomic(&CasePaths::from_stem(stem).prob, &f32_to_le_bytes(&prob.data))
}

pub fn load_prob_map(stem: &Path, dims: Dims) -> Result<ProbabilityMap> {
    let path = CasePaths::from_stem(stem).prob;
    let bytes = read_payload(&path, NUM_CLASSES * voxel_count(dims) * 4)?;
    ProbabilityMap::new(le_bytes_to_f32(&bytes), dims)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn taxonomy(self) -> Taxonomy {
        match self {
            Domain::Source => Taxonomy::Tissue,
            Domain::Target => Taxonomy::Tumor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub domain: Domain,
    pub volume_path: String,
    #[serde(default)]
    pub label_path: Option<String>,
    #[serde(default)]
    pub induced_prob_path: Option<String>,
}

impl CaseRecord {
    pub fn new(case_id: &str, domain: Domain, with_labels: bool) -> Self {
        CaseRecord {
            case_id: case_id.to_owned(),
            domain,
            volume_path: format!("{case_id}.img.bin"),
            label_path: with_labels.then(|| format!("{case_id}.lbl.bin")),
            induced_prob_path: None,
        }
    }

    pub fn stem(&self, root: &Path) -> PathBuf {
        root.join(&self.case_id)
    }
}

pub fn hidden_tissue_stem(root: &Path, case_id: &str) -> PathBuf {
    root.join(HIDDEN_DIR).join(case_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub shape: Dims,
    pub seed: u64,
    pub cases: Vec<CaseRecord>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let m: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
        check_version(m.format_version)?;
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_json(&root.join(MANIFEST_FILE), self)
    }

    pub fn cases_in(&self, domain: Domain) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(move |c| c.domain == domain)
    }

    pub fn case(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateCaseId,
    MissingFile { path: String },
    MissingLabels,
    WrongTaxonomy { expected: Taxonomy, found: Taxonomy },
    ShapeMismatch { expected: Dims, found: Dims },
    OutOfRange,
    Unreadable { message: String },
    UnsupportedVersion { found: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub case_id: String,
    pub violation: Violation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Lists every violated invariant; never fails.
pub fn validate_manifest(manifest: &DatasetManifest, root: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut push = |case_id: &str, violation| {
        report.issues.push(ValidationIssue {
            case_id: case_id.to_owned(),
            violation,
        })
    };
    if manifest.format_version != FORMAT_VERSION {
        push(
            "",
            Violation::UnsupportedVersion {
                found: manifest.format_version,
            },
        );
    }
    let mut seen = HashSet::new();
    for case in &manifest.cases {
        let id = case.case_id.as_str();
        if !seen.insert(id) {
            push(id, Violation::DuplicateCaseId);
        }
        let expected = case.domain.taxonomy();
        if case.label_path.is_none() {
            push(id, Violation::MissingLabels);
        }
        let mut files = vec![case.volume_path.clone()];
        files.extend(case.label_path.clone());
        files.extend(case.induced_prob_path.clone());
        let mut missing = false;
        for f in files {
            if !root.join(&f).is_file() {
                push(id, Violation::MissingFile { path: f });
                missing = true;
            }
        }
        if missing {
            continue;
        }
        let stem = case.stem(root);
        match load_case(&stem) {
            Err(e) => push(
                id,
                Violation::Unreadable {
                    message: e.to_string(),
                },
            ),
            Ok((vol, labels)) => {
                if vol.dims() != manifest.shape {
                    push(
                        id,
                        Violation::ShapeMismatch {
                            expected: manifest.shape,
                            found: vol.dims(),
                        },
                    );
                }
                if !vol.in_unit_range() {
                    push(id, Violation::OutOfRange);
                }
                match labels {
                    Some(l) if l.taxonomy() != expected => push(
                        id,
                        Violation::WrongTaxonomy {
                            expected,
                            found: l.taxonomy(),
                        },
                    ),
                    None if case.label_path.is_some() => push(id, Violation::MissingLabels),
                    _ => {}
                }
                if case.induced_prob_path.is_some() {
                    if let Err(e) = load_prob_map(&stem, vol.dims()) {
                        push(
                            id,
                            Violation::Unreadable {
                                message: e.to_string(),
                            },
                        );
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: Dims) -> Volume {
        let n = 4 * voxel_count(dims);
        let data = (0..n).map(|i| (i % 97) as f32 / 96.0).collect();
        Volume::new(data, 4, dims).unwrap()
    }

    #[test]
    fn zero_volume_payload_size() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("z");
        save_case(&Volume::zeros(4, [8, 8, 8]), None, &stem).unwrap();
        let len = fs::metadata(CasePaths::from_stem(&stem).image).unwrap().len();
        assert_eq!(len, 4 * 8 * 8 * 8 * 4);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("case_a");
        let mut v = ramp_volume([4, 5, 6]);
        v.data_mut()[3] = 0.1 + 1e-8;
        v.voxel_spacing = [1.0, 1.5, 2.0];
        let mut l = LabelMap::zeros([4, 5, 6], Taxonomy::Tumor);
        l.set(7, 3);
        save_case(&v, Some(&l), &stem).unwrap();
        let (v2, l2) = load_case(&stem).unwrap();
        let bits = |x: &Volume| x.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&v), bits(&v2));
        assert_eq!(v, v2);
        assert_eq!(Some(l), l2);
    }

    #[test]
    fn truncated_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("t");
        save_case(&ramp_volume([4, 4, 4]), None, &stem).unwrap();
        let img = CasePaths::from_stem(&stem).image;
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_case(&stem), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("v");
        save_case(&ramp_volume([2, 2, 2]), None, &stem).unwrap();
        let hp = CasePaths::from_stem(&stem).header;
        let mut h: CaseHeader = read_json(&hp).unwrap();
        h.format_version = 99;
        write_json(&hp, &h).unwrap();
        assert!(matches!(load_case(&stem), Err(Error::FormatVersion { found: 99, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_case(&dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn nan_rejected() {
        assert!(Volume::new(vec![f32::NAN; 8], 1, [2, 2, 2]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let mut v = Volume::zeros(4, [2, 2, 2]);
        v.data_mut()[5] = f32::NAN;
        assert!(matches!(
            save_case(&v, None, &dir.path().join("n")),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn label_value_five_rejected() {
        let mut data = vec![0i8; 8];
        data[2] = 5;
        assert!(matches!(
            LabelMap::new(data, [2, 2, 2], Taxonomy::Tumor),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn probability_map_normalization_enforced() {
        let mut data = vec![0.25f32; 4 * 8];
        assert!(ProbabilityMap::new(data.clone(), [2, 2, 2]).is_ok());
        data[0] = 0.3;
        assert!(ProbabilityMap::new(data, [2, 2, 2]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = ProbabilityMap::new(vec![0.25; 4], [1, 1, 1]).unwrap();
        assert_eq!(p.argmax(Taxonomy::Tumor).data(), &[0]);
    }

    fn write_two_case_dataset(root: &Path) -> DatasetManifest {
        let v = ramp_volume([2, 2, 2]);
        let l = LabelMap::zeros([2, 2, 2], Taxonomy::Tissue);
        save_case(&v, Some(&l), &root.join("s0")).unwrap();
        let t = LabelMap::zeros([2, 2, 2], Taxonomy::Tumor);
        save_case(&v, Some(&t), &root.join("t0")).unwrap();
        DatasetManifest {
            format_version: FORMAT_VERSION,
            shape: [2, 2, 2],
            seed: 0,
            cases: vec![
                CaseRecord::new("s0", Domain::Source, true),
                CaseRecord::new("t0", Domain::Target, true),
            ],
        }
    }

    #[test]
    fn manifest_validation_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_two_case_dataset(dir.path());
        assert!(validate_manifest(&m, dir.path()).is_empty());

        let mut dup = m.clone();
        dup.cases.push(dup.cases[0].clone());
        let r = validate_manifest(&dup, dir.path());
        assert_eq!(r.issues.len(), 1);
        assert_eq!(r.issues[0].violation, Violation::DuplicateCaseId);

        m.cases[0].label_path = None;
        let r = validate_manifest(&m, dir.path());
        assert_eq!(r.issues.len(), 1);
        assert_eq!(r.issues[0].violation, Violation::MissingLabels);
        assert_eq!(r.issues[0].case_id, "s0");
    }

    #[test]
    fn manifest_detects_taxonomy_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_two_case_dataset(dir.path());
        m.cases[1].domain = Domain::Source;
        m.shape = [2, 2, 3];
        let r = validate_manifest(&m, dir.path());
        assert!(r
            .issues
            .iter()
            .any(|i| matches!(i.violation, Violation::WrongTaxonomy { .. })));
        assert_eq!(
            r.issues
                .iter()
                .filter(|i| matches!(i.violation, Violation::ShapeMismatch { .. }))
                .count(),
            2
        );
    }
}
