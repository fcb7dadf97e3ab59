//! Model checkpoints.
//!
//! ```text
//! IMSE-CHECKPOINT 1\n
//! config_bytes <n>\n
//! <n bytes of TOML config>
//! tensors <count>\n
//! then per tensor:  <name> <d0,d1,...>\n  followed by numel little-endian f64
//! end\n
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ViTConfig;
use super::vit::{Block, DenseLinear, Linear, NormParams, Trainability, VisionTransformer};
use crate::error::{Error, Result};
use crate::spectral::{OffsetReader, SpectralLayer};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &str = "IMSE-CHECKPOINT 1";

pub fn write_checkpoint<T: Real>(model: &VisionTransformer<T>, w: &mut impl Write) -> Result<()> {
    let cfg = toml::to_string(model.config()).map_err(|e| Error::Config(e.to_string()))?;
    let io = |e: std::io::Error| Error::io("<checkpoint>", e);
    write!(w, "{CHECKPOINT_MAGIC}\nconfig_bytes {}\n{cfg}", cfg.len()).map_err(io)?;
    let tensors = model.named_tensors();
    write!(w, "tensors {}\n", tensors.len()).map_err(io)?;
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        write!(w, "{name} {}\n", dims.join(",")).map_err(io)?;
        for x in t.data() {
            w.write_all(&x.as_f64().to_le_bytes()).map_err(io)?;
        }
    }
    w.write_all(b"end\n").map_err(io)?;
    Ok(())
}

pub fn checkpoint_bytes<T: Real>(model: &VisionTransformer<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(model, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn save_checkpoint<T: Real>(model: &VisionTransformer<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<VisionTransformer<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8]) -> Result<VisionTransformer<T>> {
    let mut cursor = bytes;
    let model = read_checkpoint(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format {
            offset: (bytes.len() - cursor.len()) as u64,
            reason: "trailing bytes after checkpoint".into(),
        });
    }
    Ok(model)
}

pub fn read_checkpoint<T: Real>(r: &mut impl Read) -> Result<VisionTransformer<T>> {
    let mut rd = OffsetReader::new(r);
    rd.expect_line(CHECKPOINT_MAGIC)?;
    let n: usize = rd.keyed_line("config_bytes")?;
    let at = rd.offset;
    if n > 1 << 20 {
        return Err(Error::Format {
            offset: at,
            reason: "config section too large".into(),
        });
    }
    let mut buf = vec![0u8; n];
    rd.exact(&mut buf, "config")?;
    let text = String::from_utf8(buf).map_err(|_| Error::Format {
        offset: at,
        reason: "config is not utf-8".into(),
    })?;
    let config: ViTConfig = toml::from_str(&text).map_err(|e| Error::Format {
        offset: at,
        reason: format!("bad config: {e}"),
    })?;
    config.validate().map_err(|e| Error::Format {
        offset: at,
        reason: e.to_string(),
    })?;

    let count: usize = rd.keyed_line("tensors")?;
    let mut map = HashMap::new();
    let mut order = Vec::new();
    for _ in 0..count {
        let at = rd.offset;
        let line = rd.line()?;
        let bad = |reason: String| Error::Format { offset: at, reason };
        let (name, dims) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("expected `<name> <shape>`, got `{line}`")))?;
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("bad shape `{dims}`")))?;
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(bad(format!("tensor `{name}` too large")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(T::lit(rd.f64()?));
        }
        if map.insert(name.to_string(), (at, Tensor::new(shape, data)?)).is_some() {
            return Err(bad(format!("duplicate tensor `{name}`")));
        }
        order.push(name.to_string());
    }
    rd.expect_line("end")?;
    let end = rd.offset;

    let mut src = Source { map, end };
    let model = assemble(config, &mut src)?;
    if let Some(extra) = order.iter().find(|n| src.map.contains_key(*n)) {
        return Err(Error::Format {
            offset: src.map[extra].0,
            reason: format!("unexpected tensor `{extra}`"),
        });
    }
    if model.named_tensors().iter().map(|(n, _)| n).ne(order.iter()) {
        return Err(Error::Format {
            offset: end,
            reason: "tensors are not in model order".into(),
        });
    }
    Ok(model)
}

struct Source<T> {
    map: HashMap<String, (u64, Tensor<T>)>,
    end: u64,
}

impl<T: Real> Source<T> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let (at, t) = self.map.remove(name).ok_or_else(|| Error::Format {
            offset: self.end,
            reason: format!("missing tensor `{name}`"),
        })?;
        if t.shape() != shape {
            return Err(Error::Format {
                offset: at,
                reason: format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        Ok(t)
    }

    fn dense(&mut self, prefix: &str, d_out: usize, d_in: usize) -> Result<DenseLinear<T>> {
        Ok(DenseLinear {
            weight: self.take(&format!("{prefix}.weight"), &[d_out, d_in])?,
            bias: self.take(&format!("{prefix}.bias"), &[d_out])?,
        })
    }

    fn linear(&mut self, prefix: &str, d_out: usize, d_in: usize) -> Result<Linear<T>> {
        if self.map.contains_key(&format!("{prefix}.weight")) {
            return Ok(Linear::Dense(self.dense(prefix, d_out, d_in)?));
        }
        let r = d_out.min(d_in);
        let u = self.take(&format!("{prefix}.u"), &[d_out, r])?;
        let sigma = self.take(&format!("{prefix}.sigma"), &[r])?;
        let v = self.take(&format!("{prefix}.v"), &[d_in, r])?;
        let bias = self.take(&format!("{prefix}.bias"), &[d_out])?;
        Ok(Linear::Spectral(SpectralLayer::from_parts(u, sigma, v, bias)?))
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Result<NormParams<T>> {
        Ok(NormParams {
            gamma: self.take(&format!("{prefix}.gamma"), &[c])?,
            beta: self.take(&format!("{prefix}.beta"), &[c])?,
        })
    }
}

fn assemble<T: Real>(config: ViTConfig, src: &mut Source<T>) -> Result<VisionTransformer<T>> {
    let c = config.embed_dim;
    let hidden = config.hidden_dim();
    let patch_embed = src.dense("patch_embed", c, config.patch_dim())?;
    let cls_token = src.take("cls_token", &[c])?;
    let pos_embed = src.take("pos_embed", &[config.num_tokens(), c])?;
    let mut blocks = Vec::with_capacity(config.depth);
    for b in 0..config.depth {
        let p = format!("blocks.{b}");
        let norm1 = src.norm(&format!("{p}.norm1"), c)?;
        let attn_in = if config.fused_qkv {
            vec![src.linear(&format!("{p}.attn.qkv"), 3 * c, c)?]
        } else {
            ["q", "k", "v"]
                .iter()
                .map(|n| src.linear(&format!("{p}.attn.{n}"), c, c))
                .collect::<Result<_>>()?
        };
        let proj = src.linear(&format!("{p}.attn.proj"), c, c)?;
        let norm2 = src.norm(&format!("{p}.norm2"), c)?;
        let fc1 = src.linear(&format!("{p}.mlp.fc1"), hidden, c)?;
        let fc2 = src.linear(&format!("{p}.mlp.fc2"), c, hidden)?;
        blocks.push(Block {
            norm1,
            attn_in,
            proj,
            norm2,
            fc1,
            fc2,
        });
    }
    let norm = src.norm("norm", c)?;
    let head = src.dense("head", config.num_classes, c)?;
    let mut model = VisionTransformer::from_parts(config, patch_embed, cls_token, pos_embed, blocks, norm, head);
    let mode = if model.is_decomposed() {
        Trainability::Spectral
    } else {
        Trainability::None
    };
    model.set_trainability(mode);
    Ok(model)
}
