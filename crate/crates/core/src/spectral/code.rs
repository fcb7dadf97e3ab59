//! Spectral codes and their binary container.
//!
//! Layout:
//!
//! ```text
//! IMSE-CODE 1\n
//! layers <count>\n
//! <layer id> <rank>\n      (one line per layer, in order)
//! end\n
//! <rank_1 + ... + rank_L little-endian f64 values>
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const CODE_MAGIC: &str = "IMSE-CODE 1";

/// Singular values of every spectral layer, in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCode {
    layers: Vec<(String, Vec<f64>)>,
}

/// Anything that carries a spectral code: models, or test doubles.
pub trait CodeHolder {
    fn extract_code(&self) -> SpectralCode;
    fn load_code(&mut self, code: &SpectralCode) -> Result<()>;
}

impl SpectralCode {
    pub fn new(layers: Vec<(String, Vec<f64>)>) -> Result<Self> {
        for (i, (id, _)) in layers.iter().enumerate() {
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(Error::LayerMismatch {
                    layer: id.clone(),
                    reason: "layer ids must be non-empty and whitespace-free".into(),
                });
            }
            if layers[..i].iter().any(|(other, _)| other == id) {
                return Err(Error::LayerMismatch {
                    layer: id.clone(),
                    reason: "duplicate layer id".into(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[(String, Vec<f64>)] {
        &self.layers
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.layers.iter().find(|(l, _)| l == id).map(|(_, s)| s.as_slice())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total number of singular values.
    pub fn scalar_count(&self) -> usize {
        self.layers.iter().map(|(_, s)| s.len()).sum()
    }

    /// Checks that `other` describes the same layers with the same ranks.
    pub fn check_compatible(&self, other: &SpectralCode) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            let layer = self
                .layers
                .iter()
                .map(|(id, _)| id)
                .find(|id| other.get(id).is_none())
                .or_else(|| other.layers.iter().map(|(id, _)| id).find(|id| self.get(id).is_none()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::LayerMismatch {
                layer,
                reason: format!("code has {} layers, expected {}", other.layers.len(), self.layers.len()),
            });
        }
        for ((a, sa), (b, sb)) in self.layers.iter().zip(&other.layers) {
            if a != b {
                return Err(Error::LayerMismatch {
                    layer: b.clone(),
                    reason: format!("expected layer `{a}` at this position"),
                });
            }
            if sa.len() != sb.len() {
                return Err(Error::LayerMismatch {
                    layer: b.clone(),
                    reason: format!("rank {} but expected {}", sb.len(), sa.len()),
                });
            }
        }
        Ok(())
    }

    fn header(&self) -> String {
        let mut h = format!("{CODE_MAGIC}\nlayers {}\n", self.layers.len());
        for (id, s) in &self.layers {
            h.push_str(&format!("{id} {}\n", s.len()));
        }
        h.push_str("end\n");
        h
    }

    /// Size in bytes of [`SpectralCode::write_to`] output.
    pub fn encoded_len(&self) -> usize {
        self.header().len() + 8 * self.scalar_count()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(self.header().as_bytes())?;
        for (_, s) in &self.layers {
            for x in s {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut reader = OffsetReader::new(r);
        Self::read_tracked(&mut reader)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let code = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format {
                offset: (bytes.len() - cursor.len()) as u64,
                reason: "trailing bytes after spectral code".into(),
            });
        }
        Ok(code)
    }

    pub(crate) fn read_tracked<R: Read>(reader: &mut OffsetReader<R>) -> Result<Self> {
        reader.expect_line(CODE_MAGIC)?;
        let count: usize = reader.keyed_line("layers")?;
        let mut dims = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = reader.offset;
            let line = reader.line()?;
            let mut parts = line.split(' ');
            let (Some(id), Some(rank), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("expected `<layer> <rank>`, got `{line}`"),
                });
            };
            let rank: usize = rank.parse().map_err(|_| Error::Format {
                offset: at,
                reason: format!("bad rank `{rank}`"),
            })?;
            dims.push((id.to_string(), rank));
        }
        reader.expect_line("end")?;
        let mut layers = Vec::with_capacity(dims.len());
        for (id, rank) in dims {
            let mut s = Vec::with_capacity(rank);
            for _ in 0..rank {
                s.push(reader.f64()?);
            }
            layers.push((id, s));
        }
        let at = reader.offset;
        SpectralCode::new(layers).map_err(|e| Error::Format {
            offset: at,
            reason: e.to_string(),
        })
    }
}

/// Byte reader that remembers its position for error messages.
pub(crate) struct OffsetReader<R> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn eof(&self, what: &str) -> Error {
        Error::Format {
            offset: self.offset,
            reason: format!("unexpected end of data while reading {what}"),
        }
    }

    pub fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => return Err(self.eof(what)),
                Ok(n) => {
                    filled += n;
                    self.offset += n as u64;
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => {
                    return Err(Error::Format {
                        offset: self.offset,
                        reason: e.to_string(),
                    })
                }
            }
        }
        Ok(())
    }

    /// Reads up to and excluding `\n`; rejects lines longer than 4 KiB.
    pub fn line(&mut self) -> Result<String> {
        let start = self.offset;
        let mut bytes = Vec::new();
        loop {
            let mut b = [0u8; 1];
            self.exact(&mut b, "header line")?;
            if b[0] == b'\n' {
                break;
            }
            bytes.push(b[0]);
            if bytes.len() > 4096 {
                return Err(Error::Format {
                    offset: start,
                    reason: "header line too long".into(),
                });
            }
        }
        String::from_utf8(bytes).map_err(|_| Error::Format {
            offset: start,
            reason: "header is not utf-8".into(),
        })
    }

    pub fn expect_line(&mut self, want: &str) -> Result<()> {
        let at = self.offset;
        let got = self.line()?;
        if got != want {
            return Err(Error::Format {
                offset: at,
                reason: format!("expected `{want}`, got `{got}`"),
            });
        }
        Ok(())
    }

    pub fn keyed_line<V: std::str::FromStr>(&mut self, key: &str) -> Result<V> {
        let at = self.offset;
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: at,
                reason: format!("expected `{key} <value>`, got `{line}`"),
            })
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, "f64 payload")?;
        Ok(f64::from_le_bytes(b))
    }
}
