//! `DSAC` checkpoint container.
//!
//! ```text
//! "DSAC" u32 version=1
//! str  config digest                      (str = u32 byte length + UTF-8)
//! u32  metadata count, then (str key, str value) sorted by key
//! u32  record count, then per record:
//!      str name, u32 rank, rank × u32 dims, product(dims) × f32 LE
//! ```
//! Scalars (`sim.w`, `sim.b`) are rank-0 records holding one value.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::{HeadMerge, ModelConfig, ModelParams};
use crate::codec::{put_f32s, put_string, put_u32, read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Parameterized};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub digest: String,
    pub metadata: BTreeMap<String, String>,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_string(&mut out, &self.digest);
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_string(&mut out, k);
            put_string(&mut out, v);
        }
        put_u32(&mut out, self.records.len() as u32);
        for r in &self.records {
            put_string(&mut out, &r.name);
            put_u32(&mut out, r.dims.len() as u32);
            for &d in &r.dims {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, &r.values);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "DSAC");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("DSAC: unsupported version {version}")));
        }
        let digest = r.string()?;
        let n_meta = r.u32()? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n_records = r.u32()? as usize;
        let mut records = Vec::with_capacity(n_records.min(1 << 16));
        for _ in 0..n_records {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::format(format!("DSAC: record {name} has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("DSAC: record size overflow"))?;
            let values = r.f32_vec(count)?;
            records.push(Record { name, dims, values });
        }
        r.finish()?;
        Ok(Checkpoint {
            digest,
            metadata,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("DSAC: missing metadata `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::format(format!("DSAC: metadata `{key}` = {raw:?} does not parse")))
    }

    /// Fail with an incompatibility error unless `digest` matches.
    pub fn require_digest(&self, digest: &str) -> Result<()> {
        if self.digest != digest {
            return Err(Error::Incompatible(format!(
                "checkpoint config digest {} does not match configuration digest {}",
                self.digest, digest
            )));
        }
        Ok(())
    }
}

/// Append model records (prefix `model.`) to a checkpoint, plus the model
/// configuration as metadata.
pub fn put_model(ckpt: &mut Checkpoint, params: &ModelParams) {
    let c = &params.config;
    let meta = [
        ("model.input_dim", c.input_dim.to_string()),
        ("model.layers", c.layers.to_string()),
        ("model.hidden", c.hidden.to_string()),
        ("model.embed_dim", c.embed_dim.to_string()),
        ("model.attn_dim", c.attn_dim.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.head_merge", c.head_merge.as_str().to_string()),
        ("model.renormalize", c.renormalize.to_string()),
        ("model.init_w", c.init_w.to_string()),
        ("model.init_b", c.init_b.to_string()),
        ("model.init_scheme", "uniform(+-1/sqrt(fan_in)), forget bias +1".to_string()),
    ];
    for (k, v) in meta {
        ckpt.metadata.insert(k.to_string(), v);
    }
    put_params(ckpt, params, "model.");
}

pub fn model_config_from(ckpt: &Checkpoint) -> Result<ModelConfig> {
    let head_merge = HeadMerge::parse(ckpt.meta("model.head_merge")?)
        .ok_or_else(|| Error::format("DSAC: unknown model.head_merge"))?;
    let cfg = ModelConfig {
        input_dim: ckpt.meta_parse("model.input_dim")?,
        layers: ckpt.meta_parse("model.layers")?,
        hidden: ckpt.meta_parse("model.hidden")?,
        embed_dim: ckpt.meta_parse("model.embed_dim")?,
        attn_dim: ckpt.meta_parse("model.attn_dim")?,
        heads: ckpt.meta_parse("model.heads")?,
        head_merge,
        renormalize: ckpt.meta_parse("model.renormalize")?,
        init_w: ckpt.meta_parse("model.init_w")?,
        init_b: ckpt.meta_parse("model.init_b")?,
    };
    cfg.validate().map_err(|e| Error::format(format!("DSAC: {e}")))?;
    Ok(cfg)
}

/// Read tensors named `{prefix}{tensor}` into a parameter set of `config`'s layout.
pub fn take_params(ckpt: &Checkpoint, config: &ModelConfig, prefix: &str) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config);
    let shapes = params.shapes();
    for ((name, dims), (_, dst)) in shapes.iter().zip(params.tensors_mut()) {
        let full = format!("{prefix}{name}");
        let rec = ckpt
            .record(&full)
            .ok_or_else(|| Error::format(format!("DSAC: missing record `{full}`")))?;
        if &rec.dims != dims {
            return Err(Error::format(format!(
                "DSAC: record `{full}` has dims {:?}, expected {dims:?}",
                rec.dims
            )));
        }
        dst.copy_from_slice(&rec.values);
    }
    Ok(params)
}

pub fn put_params(ckpt: &mut Checkpoint, params: &ModelParams, prefix: &str) {
    for ((name, dims), (_, values)) in params.shapes().into_iter().zip(params.tensors()) {
        ckpt.records.push(Record {
            name: format!("{prefix}{name}"),
            dims,
            values: values.to_vec(),
        });
    }
}

pub fn model_from(ckpt: &Checkpoint) -> Result<ModelParams> {
    let cfg = model_config_from(ckpt)?;
    take_params(ckpt, &cfg, "model.")
}

/// Round every value to the nearest `f32`, so a checkpoint round trip is exact.
pub fn quantize(params: &mut ModelParams) {
    for (_, t) in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

pub fn quantize_matrix(m: &mut Matrix) {
    m.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}
