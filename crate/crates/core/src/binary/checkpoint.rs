//! Self-describing model container.
//!
//! ```text
//! magic   8 bytes  "FDABNNCK"
//! version u32 LE
//! hlen    u64 LE   length of the UTF-8 header that follows
//! header  lines:   `meta <key> <value>`
//!                  `tensor <name> <dtype> <d0,d1,...>`
//! payload          raw little-endian elements of each tensor, header order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::ShortcutKind;
use crate::binary::layer::{AdapterConfig, ScaleMode};
use crate::binary::model::{build_model, Arch, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::surrogate::SurrogateSpec;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"FDABNNCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    /// Free-form metadata beyond the model description.
    pub meta: BTreeMap<String, String>,
}

fn encode_adapter(a: &Option<AdapterConfig>) -> String {
    match a {
        None => "none".into(),
        Some(a) => format!("{}:{}:{}", a.reduction, a.shortcut.label(), a.gain),
    }
}

fn decode_adapter(s: &str) -> Result<Option<AdapterConfig>> {
    if s == "none" {
        return Ok(None);
    }
    let bad = || Error::Checkpoint(format!("malformed adapter '{s}'"));
    let p: Vec<&str> = s.split(':').collect();
    if p.len() != 3 {
        return Err(bad());
    }
    Ok(Some(AdapterConfig {
        reduction: p[0].parse().map_err(|_| bad())?,
        shortcut: ShortcutKind::parse(p[1]).ok_or_else(bad)?,
        gain: p[2].parse().map_err(|_| bad())?,
    }))
}

fn model_meta(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("arch", c.arch.label().into()),
        ("in_channels", c.in_channels.to_string()),
        ("image_size", c.image_size.to_string()),
        ("num_classes", c.num_classes.to_string()),
        ("weight_surrogate", c.weight_surrogate.encode()),
        ("act_surrogate", c.act_surrogate.encode()),
        ("weight_adapter", encode_adapter(&c.weight_adapter)),
        ("act_adapter", encode_adapter(&c.act_adapter)),
        ("weight_scale", c.weight_scale.label().into()),
        ("act_scale", c.act_scale.label().into()),
    ]
}

fn config_from_meta(meta: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key '{k}'")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("meta '{k}' is not an integer")))
    };
    let surrogate = |k: &str| SurrogateSpec::decode(get(k)?).map_err(|e| Error::Checkpoint(e.to_string()));
    let scale = |k: &str| {
        get(k).and_then(|v| ScaleMode::parse(v).ok_or_else(|| Error::Checkpoint(format!("bad scale mode '{v}'"))))
    };
    let arch = get("arch")?;
    Ok(ModelConfig {
        arch: Arch::parse(arch).ok_or_else(|| Error::Checkpoint(format!("unknown architecture '{arch}'")))?,
        in_channels: int("in_channels")?,
        image_size: int("image_size")?,
        num_classes: int("num_classes")?,
        weight_surrogate: surrogate("weight_surrogate")?,
        act_surrogate: surrogate("act_surrogate")?,
        weight_adapter: decode_adapter(get("weight_adapter")?)?,
        act_adapter: decode_adapter(get("act_adapter")?)?,
        weight_scale: scale("weight_scale")?,
        act_scale: scale("act_scale")?,
    })
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Checkpoint(format!(
            "header token '{s}' must be non-empty without whitespace"
        )));
    }
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(model: &mut Model<T>, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut header = String::new();
    for (k, v) in model_meta(&model.config) {
        header.push_str(&format!("meta {k} {v}\n"));
    }
    for (k, v) in meta {
        check_token(k)?;
        check_token(v)?;
        header.push_str(&format!("meta {k} {v}\n"));
    }
    let mut payload = Vec::new();
    model.visit(&mut |name, t, _| {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {} {}\n", T::DTYPE.name(), dims.join(",")));
        for &v in t.data() {
            v.to_le_bytes(&mut payload);
        }
    });
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header = bytes
        .get(20..20usize.saturating_add(hlen))
        .ok_or_else(|| err("truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| err("header is not UTF-8"))?;

    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    for line in header.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        match f.as_slice() {
            ["meta", k, v] => {
                meta.insert(k.to_string(), v.to_string());
            }
            ["tensor", name, dtype, dims] => {
                let dtype = DType::parse(dtype).ok_or_else(|| Error::Checkpoint(format!("unknown dtype '{dtype}'")))?;
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Checkpoint(format!("bad shape '{dims}'")))?;
                entries.push(Entry {
                    name: name.to_string(),
                    dtype,
                    shape,
                });
            }
            _ => return Err(Error::Checkpoint(format!("malformed header line '{line}'"))),
        }
    }

    let config = config_from_meta(&meta)?;
    let mut model = build_model::<T>(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut offset = 20 + hlen;
    let mut tensors = BTreeMap::new();
    for e in entries {
        let len = numel(&e.shape) * e.dtype.size();
        let raw = bytes
            .get(offset..offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("truncated payload for '{}'", e.name)))?;
        offset += len;
        let values: Vec<T> = match e.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_slice(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_slice(c)))
                .collect(),
        };
        tensors.insert(e.name, Tensor::new(e.shape, values)?);
    }
    if offset != bytes.len() {
        return Err(err("trailing bytes after payload"));
    }

    let mut failure = None;
    model.visit(&mut |name, t, _| {
        if failure.is_some() {
            return;
        }
        match tensors.remove(name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => failure = Some(Error::shape("checkpoint tensor", t.shape(), v.shape())),
            None => failure = Some(Error::Checkpoint(format!("missing tensor '{name}'"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor '{extra}'")));
    }
    for (k, _) in model_meta(&config) {
        meta.remove(k);
    }
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &mut Model<T>, meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
