//! Model checkpoint files.
//!
//! Layout: `PEGM`, u32 version, u32 header length, UTF-8 JSON header, then
//! every parameter tensor as little-endian f64 in declared order, then a
//! CRC32 of all preceding bytes. All integers are little-endian.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Backbone, ConvBlock, HeadWeights, ModelConfig, PrototypeBank, ProtoEEGNet, Provenance};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"PEGM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    config_digest: String,
    tensors: Vec<TensorEntry>,
    provenance: Vec<Option<Provenance>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn named_tensors(model: &ProtoEEGNet) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, b) in model.backbone.blocks.iter().enumerate() {
        out.push((format!("backbone.{i}.kernels"), &*b.kernels));
        out.push((format!("backbone.{i}.gain"), &*b.gain));
        out.push((format!("backbone.{i}.bias"), &*b.bias));
    }
    out.push(("prototypes".to_string(), &*model.prototypes.vectors));
    out.push(("head".to_string(), &*model.head.weights));
    out
}

/// Serializes a model to bytes.
pub fn encode_model(model: &ProtoEEGNet) -> Vec<u8> {
    let tensors = named_tensors(model);
    let header = Header {
        format_version: MODEL_FORMAT_VERSION,
        config: model.config.clone(),
        config_digest: model.config_digest(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        provenance: model.prototypes.provenance.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save_model(model: &ProtoEEGNet, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ProtoEEGNet> {
    decode_model(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(field, "file truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ProtoEEGNet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::format("magic", "not a model checkpoint"));
    }
    let version = r.u32("version")?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {MODEL_FORMAT_VERSION}"),
        ));
    }
    let header_len = r.u32("header_length")? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::format("header", e.to_string()))?;
    if header.format_version != version {
        return Err(Error::format("header.format_version", "disagrees with file version"));
    }
    if bytes.len() < r.pos + 4 {
        return Err(Error::format("payload", "file truncated"));
    }
    let payload_end = bytes.len() - 4;
    let expected_crc = u32::from_le_bytes(bytes[payload_end..].try_into().unwrap());
    let config = header.config;
    if crate::digest::json_digest(&config) != header.config_digest {
        return Err(Error::format("header.config_digest", "does not match config"));
    }
    config
        .validate()
        .map_err(|e| Error::format("header.config", e.to_string()))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let body = &bytes[..payload_end];
    let mut body_reader = Reader {
        buf: body,
        pos: r.pos,
    };
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = body_reader.take(n * 8, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(
            Tensor::new(entry.shape.clone(), data).map_err(|e| Error::format(&entry.name, e.to_string()))?,
        );
    }
    if body_reader.pos != payload_end {
        return Err(Error::format("payload", "unexpected trailing bytes"));
    }
    if crc32fast::hash(body) != expected_crc {
        return Err(Error::format("crc32", "checksum mismatch"));
    }

    let layout = config.layout();
    let shapes = config.backbone.block_shapes()?;
    if tensors.len() != 3 * shapes.len() + 2 {
        return Err(Error::format("header.tensors", "unexpected tensor count"));
    }
    let mut it = tensors.into_iter();
    let mut blocks = Vec::new();
    let mut c_in = 1;
    for (spec, shape) in config.backbone.blocks.iter().zip(&shapes) {
        let kernels = it.next().unwrap();
        let gain = it.next().unwrap();
        let bias = it.next().unwrap();
        if kernels.shape() != [spec.out_channels, c_in, spec.kernel.0, spec.kernel.1]
            || gain.len() != shape[0]
            || bias.len() != shape[0]
        {
            return Err(Error::format("header.tensors", "backbone shape disagrees with config"));
        }
        c_in = spec.out_channels;
        blocks.push(ConvBlock {
            kernels: Arc::new(kernels),
            gain: Arc::new(gain),
            bias: Arc::new(bias),
        });
    }
    let protos = it.next().unwrap();
    let head = it.next().unwrap();
    if header.provenance.len() != layout.num_prototypes() {
        return Err(Error::format("header.provenance", "wrong number of entries"));
    }
    let mut bank = PrototypeBank::from_vectors(layout, config.backbone.latent_dim, protos.into_data())
        .map_err(|e| Error::format("prototypes", e.to_string()))?;
    bank.provenance = header.provenance;
    let head = HeadWeights::from_matrix(layout, head.into_data())
        .map_err(|e| Error::format("head", e.to_string()))?;
    ProtoEEGNet::from_parts(config, Backbone { blocks }, bank, head)
}
