//! Tensor bundles (`<stem>.manifest.json` + `<stem>.bin`) and a read-only
//! safetensors parser.
//!
//! The blob starts with the 8 magic bytes `PLOPBND1` followed by the tensors
//! as little-endian f32 in row-major order. Manifest offsets are absolute
//! byte offsets into the blob, 4-byte aligned.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::placement::ModuleType;
use crate::tensor::{Matrix, Vector};

pub const MAGIC: &[u8; 8] = b"PLOPBND1";
const FORMAT: &str = "plop-bundle";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub module_type: Option<ModuleType>,
    pub layer: Option<usize>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "{name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            data,
            module_type: None,
            layer: None,
        })
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Result<Self> {
        Self::new(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn with_module(mut self, module_type: Option<ModuleType>, layer: Option<usize>) -> Self {
        self.module_type = module_type;
        self.layer = layer;
        self
    }

    /// Interprets a 2-D tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape[..] {
            [rows, cols] => Matrix::new(rows, cols, self.data.clone()),
            _ => Err(Error::InvalidShape(format!(
                "{}: expected 2-D, got {:?}",
                self.name, self.shape
            ))),
        }
    }

    /// Rows of a 2-D tensor as vectors.
    pub fn to_rows(&self) -> Result<Vec<Vector>> {
        match self.shape[..] {
            [_, cols] if cols > 0 => self
                .data
                .chunks_exact(cols)
                .map(|r| Vector::new(r.to_vec()))
                .collect(),
            _ => Err(Error::InvalidShape(format!(
                "{}: expected 2-D, got {:?}",
                self.name, self.shape
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module_type: Option<ModuleType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_len: u64,
    /// Hex sha256 of the blob.
    pub sha256: String,
    pub entries: Vec<ManifestEntry>,
}

/// `(manifest, blob)` paths for a bundle stem such as `out/acts`.
pub fn bundle_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    let s = s.strip_suffix(".manifest.json").unwrap_or(&s);
    (
        PathBuf::from(format!("{s}.manifest.json")),
        PathBuf::from(format!("{s}.bin")),
    )
}

/// Serializes tensors to manifest text and blob bytes.
pub fn encode_bundle(tensors: &[Tensor], blob_name: &str) -> Result<(String, Vec<u8>)> {
    let mut names = BTreeSet::new();
    let mut blob = MAGIC.to_vec();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        if !names.insert(t.name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {:?}", t.name)));
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::InvalidShape(format!(
                "{}: shape/data mismatch",
                t.name
            )));
        }
        let offset = blob.len() as u64;
        for x in &t.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: t.name.clone(),
            dtype: "f32".into(),
            shape: t.shape.clone(),
            offset,
            length: blob.len() as u64 - offset,
            module_type: t.module_type,
            layer: t.layer,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob_name.into(),
        blob_len: blob.len() as u64,
        sha256: hex::encode(Sha256::digest(&blob)),
        entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    Ok((text, blob))
}

/// Writes `<stem>.manifest.json` and `<stem>.bin`. Returns the bundle digest.
pub fn write_bundle(stem: &Path, tensors: &[Tensor]) -> Result<String> {
    let (manifest_path, blob_path) = bundle_paths(stem);
    let blob_name = blob_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::InvalidArgument(format!("bad bundle path {}", stem.display())))?;
    let (text, blob) = encode_bundle(tensors, &blob_name)?;
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    fs::write(&manifest_path, &text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(digest_bytes(text.as_bytes()))
}

/// Hex sha256 of a byte string.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses tensors from manifest text and blob bytes, validating layout and digest.
pub fn decode_bundle(manifest_text: &str, blob: &[u8]) -> Result<Vec<Tensor>> {
    let manifest: Manifest = serde_json::from_str(manifest_text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported bundle format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if blob.len() < MAGIC.len() || &blob[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic at byte offset 0".into()));
    }
    if manifest.blob_len != blob.len() as u64 {
        return Err(Error::Format(format!(
            "blob is {} bytes but the manifest says {} (truncated or padded)",
            blob.len(),
            manifest.blob_len
        )));
    }
    let actual = hex::encode(Sha256::digest(blob));
    if actual != manifest.sha256 {
        return Err(Error::Format(format!(
            "blob digest {actual} does not match manifest {}",
            manifest.sha256
        )));
    }

    let mut names = BTreeSet::new();
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for e in &manifest.entries {
        if !names.insert(e.name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {:?}", e.name)));
        }
        if e.dtype != "f32" {
            return Err(Error::Format(format!(
                "{}: unsupported dtype {:?}",
                e.name, e.dtype
            )));
        }
        if e.offset % 4 != 0 || e.length % 4 != 0 {
            return Err(Error::Format(format!(
                "{}: offset {} / length {} not 4-byte aligned",
                e.name, e.offset, e.length
            )));
        }
        if e.offset < MAGIC.len() as u64 {
            return Err(Error::Format(format!(
                "{}: offset {} overlaps the magic header",
                e.name, e.offset
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= blob.len() as u64)
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: bytes {}..{} exceed blob length {}",
                    e.name,
                    e.offset,
                    e.offset.saturating_add(e.length),
                    blob.len()
                ))
            })?;
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        if e.shape.is_empty() || numel * 4 != e.length {
            return Err(Error::Format(format!(
                "{}: shape {:?} needs {} bytes, entry has {}",
                e.name,
                e.shape,
                numel * 4,
                e.length
            )));
        }
        spans.push((e.offset, end, e.name.as_str()));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format(format!(
                "{} (bytes {}..{}) overlaps {} (bytes {}..{})",
                w[1].2, w[1].0, w[1].1, w[0].2, w[0].0, w[0].1
            )));
        }
    }

    manifest
        .entries
        .into_iter()
        .map(|e| {
            let bytes = &blob[e.offset as usize..(e.offset + e.length) as usize];
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Tensor::new(e.name, e.shape, data)?.with_module(e.module_type, e.layer))
        })
        .collect()
}

/// Reads a bundle given its stem or its manifest path.
pub fn read_bundle(path: &Path) -> Result<Vec<Tensor>> {
    let (manifest_path, default_blob) = bundle_paths(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let blob_path = manifest_path
        .parent()
        .map(|d| d.join(&manifest.blob))
        .unwrap_or(default_blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    decode_bundle(&text, &blob)
}

/// Digest of a bundle on disk: sha256 of its manifest file, which itself
/// carries the blob digest.
pub fn bundle_digest(path: &Path) -> Result<String> {
    let (manifest_path, _) = bundle_paths(path);
    let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(digest_bytes(&text))
}

#[derive(Deserialize)]
struct SafetensorsEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Parses safetensors bytes. F16 and BF16 are widened to f32, which is exact.
/// Tensors are returned in data order.
pub fn parse_safetensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the 8-byte header length",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let data_start = 8u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::Format(format!(
                "header length {header_len} at byte 0 runs past the end of the {}-byte file",
                bytes.len()
            ))
        })? as usize;
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..data_start])
            .map_err(|e| Error::Format(format!("malformed header JSON: {e}")))?;
    let data = &bytes[data_start..];

    let mut entries = Vec::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let e: SafetensorsEntry = serde_json::from_value(value)
            .map_err(|err| Error::Format(format!("{name}: malformed entry: {err}")))?;
        entries.push((name, e));
    }
    entries.sort_by_key(|(name, e)| (e.data_offsets, name.clone()));

    let mut prev_end = 0u64;
    let mut prev_name = String::new();
    let mut out = Vec::with_capacity(entries.len());
    for (name, e) in entries {
        let [begin, end] = e.data_offsets;
        let width = match e.dtype.as_str() {
            "F32" => 4,
            "F16" | "BF16" => 2,
            other => return Err(Error::Format(format!("{name}: unsupported dtype {other}"))),
        };
        if begin > end || end > data.len() as u64 {
            return Err(Error::Format(format!(
                "{name}: data bytes {begin}..{end} outside the {}-byte data section",
                data.len()
            )));
        }
        if begin < prev_end {
            return Err(Error::Format(format!(
                "{name}: data bytes {begin}..{end} overlap {prev_name} ending at {prev_end}"
            )));
        }
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        if numel * width != end - begin {
            return Err(Error::Format(format!(
                "{name}: shape {:?} of {} needs {} bytes, offsets give {}",
                e.shape,
                e.dtype,
                numel * width,
                end - begin
            )));
        }
        let raw = &data[begin as usize..end as usize];
        let values: Vec<f32> = match e.dtype.as_str() {
            "F32" => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            "F16" => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            _ => raw
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        // Scalars have an empty shape; store them as 1-element vectors.
        let shape = if e.shape.is_empty() { vec![1] } else { e.shape };
        let layer = crate::placement::parse_layer_index(&name);
        out.push(Tensor::new(name.clone(), shape, values)?.with_module(None, layer));
        prev_end = end;
        prev_name = name;
    }
    Ok(out)
}

pub fn read_safetensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_safetensors(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Tensor> {
        vec![
            Tensor::new(
                "a",
                vec![3, 4],
                (0..12).map(|i| i as f32 * 0.5 - 1.0).collect(),
            )
            .unwrap(),
            Tensor::new(
                "layers.0.attn.q_proj",
                vec![2, 2],
                vec![1.0, f32::MIN_POSITIVE, -0.0, 3.25],
            )
            .unwrap()
            .with_module(Some(ModuleType::Query), Some(0)),
        ]
    }

    #[test]
    fn encode_decode_round_trip() {
        let (text, blob) = encode_bundle(&sample(), "x.bin").unwrap();
        let back = decode_bundle(&text, &blob).unwrap();
        assert_eq!(back, sample());
        for (a, b) in back.iter().zip(sample()) {
            let bits = |t: &Tensor| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(&b));
        }
        let (text2, blob2) = encode_bundle(&back, "x.bin").unwrap();
        assert_eq!((text, blob), (text2, blob2));
    }

    #[test]
    fn duplicate_names_fail_at_write() {
        let mut t = sample();
        t[1].name = "a".into();
        t[1].shape = vec![4];
        assert!(matches!(encode_bundle(&t, "x.bin"), Err(Error::Format(_))));
    }

    fn tamper(f: impl FnOnce(&mut Manifest)) -> (String, Vec<u8>) {
        let (text, blob) = encode_bundle(&sample(), "x.bin").unwrap();
        let mut m: Manifest = serde_json::from_str(&text).unwrap();
        f(&mut m);
        (serde_json::to_string(&m).unwrap(), blob)
    }

    #[test]
    fn decode_rejects_bad_layouts() {
        let (text, blob) = tamper(|m| m.entries[1].offset = 64);
        let err = decode_bundle(&text, &blob).unwrap_err().to_string();
        assert!(err.contains("exceed blob length"), "{err}");

        let (text, blob) = tamper(|m| m.entries[1].offset = 40);
        let err = decode_bundle(&text, &blob).unwrap_err().to_string();
        assert!(err.contains("overlaps"), "{err}");

        let (text, blob) = tamper(|m| m.entries[0].offset = 10);
        assert!(decode_bundle(&text, &blob).is_err());

        let (text, blob) = tamper(|m| m.entries[0].shape = vec![5, 4]);
        assert!(decode_bundle(&text, &blob).is_err());

        let (text, mut blob) = encode_bundle(&sample(), "x.bin").unwrap();
        blob[0] = b'X';
        assert!(decode_bundle(&text, &blob)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        let (text, blob) = encode_bundle(&sample(), "x.bin").unwrap();
        assert!(decode_bundle(&text, &blob[..blob.len() - 4]).is_err());

        let (text, mut blob) = encode_bundle(&sample(), "x.bin").unwrap();
        blob[9] ^= 1;
        assert!(decode_bundle(&text, &blob)
            .unwrap_err()
            .to_string()
            .contains("digest"));
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("sub/acts");
        let d1 = write_bundle(&stem, &sample()).unwrap();
        let (m, b) = bundle_paths(&stem);
        let (m1, b1) = (fs::read(&m).unwrap(), fs::read(&b).unwrap());
        let back = read_bundle(&m).unwrap();
        assert_eq!(back, sample());
        let d2 = write_bundle(&stem, &back).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(m1, fs::read(&m).unwrap());
        assert_eq!(b1, fs::read(&b).unwrap());
        assert_eq!(bundle_digest(&stem).unwrap(), d1);
    }

    fn safetensors(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn safetensors_examples() {
        let vals = [1.5f32, -2.0, 0.25, 8.0];
        let data: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = safetensors(
            r#"{"__metadata__":{"format":"pt"},"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &data,
        );
        let t = parse_safetensors(&file).unwrap();
        assert_eq!(t[0].shape, vec![2, 2]);
        assert_eq!(t[0].data, vals);

        let file = safetensors(
            r#"{"b":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]},"h":{"dtype":"F16","shape":[1],"data_offsets":[2,4]}}"#,
            &[0x80, 0x3F, 0x00, 0x3C],
        );
        let t = parse_safetensors(&file).unwrap();
        assert_eq!(t[0].data, vec![1.0]);
        assert_eq!(t[1].data, vec![1.0]);
    }

    #[test]
    fn safetensors_errors() {
        let mut file = safetensors(
            r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
            &[0; 4],
        );
        file[..8].copy_from_slice(&1000u64.to_le_bytes());
        assert!(parse_safetensors(&file)
            .unwrap_err()
            .to_string()
            .contains("runs past"));

        let file = safetensors(
            r#"{"w":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#,
            &[0; 1],
        );
        assert!(parse_safetensors(&file)
            .unwrap_err()
            .to_string()
            .contains("unsupported dtype"));

        let file = safetensors(r#"{"w": nope}"#, &[]);
        assert!(parse_safetensors(&file)
            .unwrap_err()
            .to_string()
            .contains("malformed"));

        let file = safetensors(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            &[0; 8],
        );
        assert!(parse_safetensors(&file)
            .unwrap_err()
            .to_string()
            .contains("overlap"));

        let file = safetensors(
            r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#,
            &[0; 8],
        );
        assert!(parse_safetensors(&file).is_err());
        assert!(parse_safetensors(&[1, 2]).is_err());
    }
}
