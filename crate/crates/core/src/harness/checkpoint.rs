//! Checkpoint directories: `manifest.json` plus one raw little-endian f32 file per parameter.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::architectures::{
    build_denoiser, build_discriminator, build_encoder, build_mirror_decoder, build_style_decoder, ArchId,
    BuildOptions, LayerTag, NetRole, Network, Stage,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
/// Parameter files bigger than this are refused before reading.
pub const MAX_PARAM_ELEMS: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// File name relative to the checkpoint directory.
    pub file: String,
    pub trainable: bool,
    /// Weight is spectrally normalized at use; its power-iteration vectors are saved as
    /// ordinary records.
    pub spectral: bool,
}

impl ParamRecord {
    pub fn elem_count(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    pub fn byte_len(&self) -> Option<usize> {
        self.elem_count()?.checked_mul(4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: ArchId,
    pub role: NetRole,
    pub model_id: String,
    pub input_geometry: [usize; 3],
    pub bottleneck_geometry: [usize; 3],
    pub dtype: String,
    pub taps: Vec<(LayerTag, String)>,
    pub stages: Vec<Stage>,
    pub params: Vec<ParamRecord>,
}

impl Manifest {
    pub fn of(net: &Network) -> Self {
        let params = net
            .params
            .entries()
            .iter()
            .map(|e| ParamRecord {
                name: e.name.clone(),
                shape: e.var.dims().to_vec(),
                file: format!("{}.bin", e.name),
                trainable: e.trainable,
                spectral: net.params.is_spectral(&e.name),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            arch: net.arch,
            role: net.role,
            model_id: net.params.arch_id.clone(),
            input_geometry: net.params.input_geometry,
            bottleneck_geometry: net.params.bottleneck_geometry,
            dtype: "f32".into(),
            taps: net.taps.clone(),
            stages: net.stages.clone(),
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parse { offset: 0, msg });
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported checkpoint format version {}", self.format_version));
        }
        if self.dtype != "f32" {
            return bad(format!("unsupported dtype `{}`", self.dtype));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.params {
            if p.name.is_empty() || !seen.insert(p.name.as_str()) {
                return bad(format!("empty or duplicate parameter name `{}`", p.name));
            }
            if !safe_file_name(&p.file) {
                return bad(format!("parameter `{}` has an unsafe file name `{}`", p.name, p.file));
            }
            match p.elem_count() {
                Some(n) if n <= MAX_PARAM_ELEMS => {}
                _ => return bad(format!("parameter `{}` has an oversized shape {:?}", p.name, p.shape)),
            }
        }
        Ok(())
    }

    fn num_classes(&self) -> Option<usize> {
        self.stages
            .iter()
            .find(|s| s.name == "head")
            .and_then(|s| s.rows.last())
            .map(|r| r.output[0])
    }
}

fn safe_file_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.len() <= 255
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b))
}

/// Parses and validates manifest text.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        msg: format!("manifest: {e}"),
    })?;
    m.validate()?;
    Ok(m)
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = bytes.split(|&b| b == b'\n').take(line - 1).map(|l| l.len() + 1).sum();
    (start + column.saturating_sub(1)).min(bytes.len())
}

/// Decodes a raw little-endian f32 parameter file of the given shape.
pub fn decode_params(bytes: &[u8], shape: &[usize], name: &str) -> Result<Vec<f32>> {
    let expected = shape
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Parse {
            offset: 0,
            msg: format!("parameter `{name}`: shape {shape:?} overflows"),
        })?;
    if bytes.len() != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(expected),
            msg: format!(
                "parameter `{name}`: expected {expected} bytes for shape {shape:?}, found {}",
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn encode_params(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `net` to `dir`, creating it if needed. Values are stored as f32.
pub fn save_checkpoint(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest::of(net);
    for (rec, e) in manifest.params.iter().zip(net.params.entries()) {
        let v: Vec<f32> = e.var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        fs::write(dir.join(&rec.file), encode_params(&v))?;
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    parse_manifest(&bytes).map_err(|e| Error::Checkpoint {
        path,
        msg: e.to_string(),
    })
}

/// What the caller expects to find; `None` fields accept anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct Expect {
    pub arch: Option<ArchId>,
    pub role: Option<NetRole>,
}

/// Rebuilds the network described by the manifest and fills in the saved values. The manifest
/// must match the rebuilt layout exactly (stages, names, shapes) or nothing is loaded.
pub fn load_checkpoint(dir: &Path, expect: Expect) -> Result<Network> {
    let m = read_manifest(dir)?;
    let refuse = |msg: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        msg,
    };
    if let Some(a) = expect.arch {
        if a != m.arch {
            return Err(refuse(format!("checkpoint holds a {} model, expected {a}", m.arch)));
        }
    }
    if let Some(r) = expect.role {
        if r != m.role {
            return Err(refuse(format!(
                "checkpoint holds a {:?} network, expected {r:?}",
                m.role
            )));
        }
    }
    let opts = BuildOptions {
        num_classes: m.num_classes().unwrap_or(BuildOptions::default().num_classes),
        spectral: m.params.iter().any(|p| p.spectral),
        ..BuildOptions::default()
    };
    let net = rebuild(m.arch, m.role, &opts)?;
    if net.stages != m.stages {
        return Err(refuse("layer list does not match the architecture".into()));
    }
    let entries = net.params.entries();
    if entries.len() != m.params.len() {
        return Err(refuse(format!(
            "manifest lists {} parameters, the architecture has {}",
            m.params.len(),
            entries.len()
        )));
    }
    for (rec, e) in m.params.iter().zip(entries) {
        if rec.name != e.name || rec.shape != e.var.dims() {
            return Err(refuse(format!(
                "parameter `{}` {:?} does not match `{}` {:?}",
                rec.name,
                rec.shape,
                e.name,
                e.var.dims()
            )));
        }
    }
    let mut values = Vec::with_capacity(m.params.len());
    for rec in &m.params {
        let path = dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| refuse(format!("parameter `{}`: {e}", rec.name)))?;
        let v = decode_params(&bytes, &rec.shape, &rec.name).map_err(|e| refuse(e.to_string()))?;
        values.push(Tensor::from_vec(v, rec.shape.as_slice(), &Device::Cpu)?);
    }
    let mut net = net;
    for (rec, v) in m.params.iter().zip(&values) {
        net.params.set(&rec.name, v)?;
    }
    for rec in &m.params {
        net.params.set_trainable_exact(&rec.name, rec.trainable);
    }
    net.params.arch_id = m.model_id;
    Ok(net)
}

fn rebuild(arch: ArchId, role: NetRole, opts: &BuildOptions) -> Result<Network> {
    match role {
        NetRole::Encoder => build_encoder(arch, opts),
        NetRole::Decoder => build_mirror_decoder(arch, opts),
        NetRole::StyleDecoder(t) => build_style_decoder(arch, t, opts),
        NetRole::Discriminator => build_discriminator(arch, opts),
        NetRole::Denoiser => build_denoiser(arch, opts),
    }
}

/// Paths of every file a checkpoint consists of, manifest first.
pub fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let m = read_manifest(dir)?;
    let mut out = vec![dir.join(MANIFEST_FILE)];
    out.extend(m.params.iter().map(|p| dir.join(&p.file)));
    Ok(out)
}
