//! Binary tensor container (`.cgtn`) and the key/value manifests that tie blobs into
//! attention bundles, layouts, datasets and checkpoints.
//!
//! Blob layout, all scalars little-endian:
//!
//! | offset | size      | field                          |
//! |--------|-----------|--------------------------------|
//! | 0      | 4         | magic `CGTN`                   |
//! | 4      | 4         | version (u32, currently 1)     |
//! | 8      | 1         | dtype (0 = f32, 1 = u8)        |
//! | 9      | 1         | ndim (1..=4)                   |
//! | 10     | 4 × ndim  | dims (u32 each, all ≥ 1)       |
//! | ...    | payload   | row-major scalars              |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Map2, Mask, CANONICAL_SIZE};
use crate::layout::InstanceLayout;

pub const MAGIC: [u8; 4] = *b"CGTN";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            other => Err(Error::MalformedBlob(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorBlob {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "dims {dims:?} hold {n} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::ShapeMismatch("expected f32 tensor, got u8".into())),
        }
    }

    pub fn into_u8(self) -> Result<Vec<u8>> {
        match self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::ShapeMismatch("expected u8 tensor, got f32".into())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        check_dims(&self.dims)?;
        let mut out = Vec::with_capacity(10 + 4 * self.dims.len() + self.data.len() * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::InvalidShape(format!("dim {d} overflows 32 bits")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::MalformedBlob(format!(
                "{}: {} bytes is shorter than the header",
                origin.display(),
                bytes.len()
            )));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
                found: magic,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = DType::from_code(bytes[8])?;
        let ndim = bytes[9] as usize;
        let header = 10 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::MalformedBlob(format!(
                "{}: truncated dims",
                origin.display()
            )));
        }
        let dims: Vec<usize> = bytes[10..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        check_dims(&dims)?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::MalformedBlob("element count overflows".into()))?;
        let payload = &bytes[header..];
        if payload.len() != n * dtype.size() {
            return Err(Error::MalformedBlob(format!(
                "{}: payload is {} bytes, dims {:?} need {}",
                origin.display(),
                payload.len(),
                dims,
                n * dtype.size()
            )));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::InvalidShape(format!(
            "ndim {} outside [1, 4]",
            dims.len()
        )));
    }
    if let Some(d) = dims.iter().find(|&&d| d == 0) {
        return Err(Error::InvalidShape(format!("zero-length dim in {dims:?} ({d})")));
    }
    if let Some(&d) = dims.iter().find(|&&d| d > u32::MAX as usize) {
        return Err(Error::InvalidShape(format!("dim {d} overflows 32 bits")));
    }
    Ok(())
}

pub fn write_blob(path: &Path, tensor: &TensorBlob) -> Result<()> {
    let bytes = tensor.encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<TensorBlob> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    TensorBlob::decode(&bytes, path)
}

/// Ordered `key = value` text document. `#` starts a comment line; keys may not contain `=`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Manifest(format!("missing key `{key}`")))
    }

    pub fn parse_key<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Manifest(format!("bad value for `{key}`: {raw:?}")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> {
        self.entries()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v)))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Manifest(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Manifest(format!("line {}: empty key", lineno + 1)));
            }
            if doc.get(k).is_some() {
                return Err(Error::Manifest(format!("duplicate key `{k}`")));
            }
            doc.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn render(&self, header: &str) -> Result<String> {
        let mut out = format!("# {header}\n");
        for (k, v) in &self.entries {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Manifest(format!("unrepresentable entry `{k}`")));
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path, header: &str) -> Result<()> {
        fs::write(path, self.render(header)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleManifest {
    pub prompt: String,
    pub object_token_indices: Vec<usize>,
    pub timestep: u32,
    pub layer_id: String,
    /// (H, W) of the stored tensors.
    pub resolution: (usize, usize),
    /// Tensor name → path relative to the bundle directory. Names: `self` and `cross.<token>`.
    pub tensor_files: BTreeMap<String, PathBuf>,
}

impl BundleManifest {
    pub fn validate(&self) -> Result<()> {
        if self.timestep > 1000 {
            return Err(Error::Manifest(format!(
                "timestep {} outside [0, 1000]",
                self.timestep
            )));
        }
        if self.resolution.0 < 8 || self.resolution.1 < 8 {
            return Err(Error::Manifest(format!(
                "resolution {:?} below 8x8",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("prompt", &self.prompt)
            .set("object_token_indices", join(&self.object_token_indices))
            .set("timestep", self.timestep)
            .set("layer_id", &self.layer_id)
            .set(
                "resolution",
                format!("{}x{}", self.resolution.0, self.resolution.1),
            );
        for (name, path) in &self.tensor_files {
            doc.set(&format!("tensor.{name}"), path.display());
        }
        doc
    }

    pub fn from_doc(doc: &KvDoc) -> Result<Self> {
        let indices = doc.require("object_token_indices")?;
        let object_token_indices = indices
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Manifest(format!("bad token index {s:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let m = Self {
            prompt: doc.require("prompt")?.to_string(),
            object_token_indices,
            timestep: doc.parse_key("timestep")?,
            layer_id: doc.require("layer_id")?.to_string(),
            resolution: parse_resolution(doc.require("resolution")?)?,
            tensor_files: doc
                .with_prefix("tensor.")
                .map(|(k, v)| (k.to_string(), PathBuf::from(v)))
                .collect(),
        };
        m.validate()?;
        Ok(m)
    }
}

pub fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::Manifest(format!("resolution {s:?} is not HxW")))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| Error::Manifest(format!("resolution {s:?} is not HxW")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Per-pixel self-attention features, H×W×D row-major (pixel-major, feature-minor).
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl Features {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 || data.len() != h * w * d {
            return Err(Error::InvalidShape(format!(
                "features {h}x{w}x{d} with {} values",
                data.len()
            )));
        }
        Ok(Self { h, w, d, data })
    }

    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.d..(idx + 1) * self.d]
    }

    pub fn resize_bilinear(&self, h: usize, w: usize) -> Features {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = vec![0.0; h * w * self.d];
        for r in 0..h {
            let (r0, r1, fr) = crate::grid::bilinear_coord(r, h, self.h);
            for c in 0..w {
                let (c0, c1, fc) = crate::grid::bilinear_coord(c, w, self.w);
                let weights = [
                    (r0 * self.w + c0, (1.0 - fr) * (1.0 - fc)),
                    (r0 * self.w + c1, (1.0 - fr) * fc),
                    (r1 * self.w + c0, fr * (1.0 - fc)),
                    (r1 * self.w + c1, fr * fc),
                ];
                let dst = &mut out[(r * w + c) * self.d..(r * w + c + 1) * self.d];
                for (src, wt) in weights {
                    for (o, &v) in dst.iter_mut().zip(self.pixel(src)) {
                        *o += wt * v;
                    }
                }
            }
        }
        Features {
            h,
            w,
            d: self.d,
            data: out,
        }
    }
}

/// Self-attention features plus one cross-attention map per object token, all on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    pub manifest: BundleManifest,
    pub features: Features,
    pub cross: Vec<Map2>,
}

impl AttentionBundle {
    pub fn resolution(&self) -> (usize, usize) {
        (self.features.h, self.features.w)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution();
        if self.cross.len() != self.manifest.object_token_indices.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} cross maps for {} object tokens",
                self.cross.len(),
                self.manifest.object_token_indices.len()
            )));
        }
        for (i, m) in self.cross.iter().enumerate() {
            if (m.h, m.w) != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "cross map {i} is {}x{}, features are {h}x{w}",
                    m.h, m.w
                )));
            }
        }
        Ok(())
    }

    fn cross_name(token: usize) -> String {
        format!("cross.{token}")
    }
}

/// Reads a bundle directory and resamples it onto the canonical 32×32 grid.
pub fn read_bundle(dir: &Path) -> Result<AttentionBundle> {
    let doc = KvDoc::read(&dir.join(MANIFEST_FILE))?;
    let manifest = BundleManifest::from_doc(&doc)?;
    let (h, w) = manifest.resolution;
    let file_for = |name: &str| -> Result<PathBuf> {
        manifest
            .tensor_files
            .get(name)
            .map(|p| dir.join(p))
            .ok_or_else(|| Error::Manifest(format!("no tensor entry `tensor.{name}`")))
    };

    let blob = read_blob(&file_for("self")?)?;
    if blob.dims.len() != 3 || blob.dims[0] != h || blob.dims[1] != w {
        return Err(Error::ShapeMismatch(format!(
            "self-attention features {:?}, manifest resolution {h}x{w}",
            blob.dims
        )));
    }
    let d = blob.dims[2];
    let features = Features::new(h, w, d, blob.into_f32()?)?;

    let mut cross = Vec::with_capacity(manifest.object_token_indices.len());
    for &tok in &manifest.object_token_indices {
        let blob = read_blob(&file_for(&AttentionBundle::cross_name(tok))?)?;
        if blob.dims != [h, w] {
            return Err(Error::ShapeMismatch(format!(
                "cross map for token {tok} is {:?}, manifest resolution {h}x{w}",
                blob.dims
            )));
        }
        cross.push(Map2::new(h, w, blob.into_f32()?)?);
    }

    let c = CANONICAL_SIZE;
    let bundle = AttentionBundle {
        features: features.resize_bilinear(c, c),
        cross: cross.iter().map(|m| m.resize_bilinear(c, c)).collect(),
        manifest,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` into `dir` at its own resolution; file names are regenerated.
pub fn write_bundle(dir: &Path, bundle: &AttentionBundle) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = bundle.resolution();
    let mut manifest = bundle.manifest.clone();
    manifest.resolution = (h, w);
    manifest.tensor_files.clear();
    manifest
        .tensor_files
        .insert("self".into(), PathBuf::from("self.cgtn"));
    write_blob(
        &dir.join("self.cgtn"),
        &TensorBlob::f32(vec![h, w, bundle.features.d], bundle.features.data.clone())?,
    )?;
    for (&tok, map) in manifest.object_token_indices.iter().zip(&bundle.cross) {
        let file = format!("cross_{tok}.cgtn");
        write_blob(
            &dir.join(&file),
            &TensorBlob::f32(vec![h, w], map.data.clone())?,
        )?;
        manifest
            .tensor_files
            .insert(AttentionBundle::cross_name(tok), PathBuf::from(file));
    }
    manifest
        .to_doc()
        .write(&dir.join(MANIFEST_FILE), "countlayout attention bundle v1")
}

pub fn layout_to_blob(layout: &InstanceLayout) -> Result<TensorBlob> {
    let k = layout.num_channels().max(1);
    let mut data = Vec::with_capacity(k * layout.h * layout.w);
    for m in &layout.channels {
        data.extend_from_slice(&m.data);
    }
    if layout.channels.is_empty() {
        data.resize(layout.h * layout.w, 0);
    }
    TensorBlob::u8(vec![k, layout.h, layout.w], data)
}

/// Inverse of [`layout_to_blob`]; all-empty single-channel blobs decode to zero channels.
pub fn layout_from_blob(blob: TensorBlob) -> Result<InstanceLayout> {
    if blob.dims.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "layout blob must be KxHxW, got {:?}",
            blob.dims
        )));
    }
    let (k, h, w) = (blob.dims[0], blob.dims[1], blob.dims[2]);
    let data = blob.into_u8()?;
    let channels = data
        .chunks_exact(h * w)
        .map(|c| Mask::new(h, w, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let layout = InstanceLayout::new(h, w, channels)?;
    if k == 1 && layout.count() == 0 {
        return Ok(InstanceLayout::empty(h, w));
    }
    Ok(layout)
}

/// Layout directory: `layout.cgtn` (u8, K×H×W) plus a manifest with count and areas.
pub fn write_layout(dir: &Path, layout: &InstanceLayout) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_blob(&dir.join("layout.cgtn"), &layout_to_blob(layout)?)?;
    let mut doc = KvDoc::new();
    doc.set("tensor.layout", "layout.cgtn")
        .set("resolution", format!("{}x{}", layout.h, layout.w))
        .set("count", layout.count())
        .set("areas", join(&layout.areas()));
    doc.write(&dir.join(MANIFEST_FILE), "countlayout instance layout v1")
}

/// Reads a layout directory; masks at other resolutions are resampled (nearest) to 32×32.
pub fn read_layout(dir: &Path) -> Result<InstanceLayout> {
    let doc = KvDoc::read(&dir.join(MANIFEST_FILE))?;
    let file = doc.get("tensor.layout").unwrap_or("layout.cgtn");
    let layout = layout_from_blob(read_blob(&dir.join(file))?)?;
    let c = CANONICAL_SIZE;
    Ok(layout.resize_nearest(c, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_f32_layout_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.cgtn");
        let t = TensorBlob::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_blob(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CGTN");
        assert_eq!(bytes.len(), 18 + 16);
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[18..22], &1.0f32.to_le_bytes());
        assert_eq!(read_blob(&p).unwrap(), t);
    }

    #[test]
    fn zero_length_dim_rejected() {
        assert!(matches!(
            TensorBlob::f32(vec![2, 0], vec![]),
            Err(Error::InvalidShape(_))
        ));
        let t = TensorBlob {
            dims: vec![0],
            data: TensorData::U8(vec![]),
        };
        assert!(t.encode().is_err());
    }

    #[test]
    fn ones_mask_payload() {
        let t = TensorBlob::u8(vec![32, 32], vec![1; 1024]).unwrap();
        let bytes = t.encode().unwrap();
        let payload = &bytes[18..];
        assert_eq!(payload.len(), 1024);
        assert!(payload.iter().all(|&b| b == 0x01));
    }

    #[test]
    fn decode_rejects_bad_magic_version_and_length() {
        let good = TensorBlob::u8(vec![3], vec![1, 2, 3]).unwrap().encode().unwrap();
        let p = Path::new("x");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(TensorBlob::decode(&bad, p), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            TensorBlob::decode(&bad, p),
            Err(Error::UnsupportedVersion(2))
        ));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(TensorBlob::decode(&bad, p), Err(Error::MalformedBlob(_))));
        assert!(TensorBlob::decode(&good[..good.len() - 1], p).is_err());
        let mut bad = good;
        bad[9] = 5;
        assert!(TensorBlob::decode(&bad, p).is_err());
    }

    #[test]
    fn kvdoc_roundtrip_and_errors() {
        let mut d = KvDoc::new();
        d.set("prompt", "a photo of x = y").set("n", 3);
        let text = d.render("hdr").unwrap();
        let back = KvDoc::parse(&text).unwrap();
        assert_eq!(back.get("prompt"), Some("a photo of x = y"));
        assert_eq!(back.parse_key::<u32>("n").unwrap(), 3);
        assert!(KvDoc::parse("novalue\n").is_err());
        assert!(KvDoc::parse("a = 1\na = 2\n").is_err());
        assert!(back.require("missing").is_err());
    }

    #[test]
    fn layout_blob_roundtrip() {
        let l = InstanceLayout::new(
            4,
            4,
            vec![
                Mask::from_fn(4, 4, |r, c| r == c),
                Mask::from_fn(4, 4, |r, _| r == 3),
            ],
        )
        .unwrap();
        let back = layout_from_blob(layout_to_blob(&l).unwrap()).unwrap();
        assert_eq!(back, l);
        let empty = InstanceLayout::empty(4, 4);
        assert_eq!(layout_from_blob(layout_to_blob(&empty).unwrap()).unwrap(), empty);
    }
}
