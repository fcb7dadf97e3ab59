//! Bank files.
//!
//! ```text
//! IMSE-BANK 1\n
//! alpha <f64>\n  tau <f64>\n  steps <u64>\n  channels <C>\n  entries <K>\n  ema <0|1>\n
//! per entry:  entry <label>\n  C means, C variances (LE f64)  <spectral code>
//! if ema:     C means, C variances
//! end\n
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{BankEntry, DomainBank, DomainDescriptor};
use crate::error::{Error, Result};
use crate::spectral::{OffsetReader, SpectralCode};

pub const BANK_MAGIC: &str = "IMSE-BANK 1";

fn write_descriptor(w: &mut Vec<u8>, d: &DomainDescriptor) {
    for x in d.mean().iter().chain(d.var()) {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_descriptor<R: Read>(rd: &mut OffsetReader<R>, c: usize) -> Result<DomainDescriptor> {
    let at = rd.offset;
    let mut vals = Vec::with_capacity(2 * c);
    for _ in 0..2 * c {
        vals.push(rd.f64()?);
    }
    let var = vals.split_off(c);
    DomainDescriptor::new(vals, var).map_err(|e| Error::Format {
        offset: at,
        reason: e.to_string(),
    })
}

impl DomainBank {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.entries[0].descriptor.channels();
        let mut out = format!(
            "{BANK_MAGIC}\nalpha {}\ntau {}\nsteps {}\nchannels {c}\nentries {}\nema {}\n",
            self.alpha,
            self.tau,
            self.steps,
            self.entries.len(),
            u8::from(self.ema.is_some())
        )
        .into_bytes();
        for e in &self.entries {
            out.extend_from_slice(format!("entry {}\n", e.label).as_bytes());
            write_descriptor(&mut out, &e.descriptor);
            e.code.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        if let Some(ema) = &self.ema {
            write_descriptor(&mut out, ema);
        }
        out.extend_from_slice(b"end\n");
        out
    }

    /// Bytes one entry occupies in the file.
    pub fn entry_encoded_len(entry: &BankEntry) -> usize {
        format!("entry {}\n", entry.label).len() + 16 * entry.descriptor.channels() + entry.code.encoded_len()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn restore(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let bank = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format {
                offset: (bytes.len() - cursor.len()) as u64,
                reason: "trailing bytes after bank".into(),
            });
        }
        Ok(bank)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut rd = OffsetReader::new(r);
        rd.expect_line(BANK_MAGIC)?;
        let alpha: f64 = rd.keyed_line("alpha")?;
        let tau: f64 = rd.keyed_line("tau")?;
        let steps: u64 = rd.keyed_line("steps")?;
        let c: usize = rd.keyed_line("channels")?;
        let at = rd.offset;
        let count: usize = rd.keyed_line("entries")?;
        let has_ema: u8 = rd.keyed_line("ema")?;
        if count == 0 || c == 0 || has_ema > 1 {
            return Err(Error::Format {
                offset: at,
                reason: "bank needs at least one entry, one channel and a 0/1 ema flag".into(),
            });
        }
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = rd.offset;
            let line = rd.line()?;
            let label = line.strip_prefix("entry ").ok_or_else(|| Error::Format {
                offset: at,
                reason: format!("expected `entry <label>`, got `{line}`"),
            })?;
            let descriptor = read_descriptor(&mut rd, c)?;
            let at = rd.offset;
            let code = SpectralCode::read_tracked(&mut rd)?;
            if let Some(first) = entries.first() {
                let first: &BankEntry = first;
                first.code.check_compatible(&code).map_err(|e| Error::Format {
                    offset: at,
                    reason: e.to_string(),
                })?;
            }
            entries.push(BankEntry {
                descriptor,
                code,
                label: label.to_string(),
            });
        }
        let ema = if has_ema == 1 {
            Some(read_descriptor(&mut rd, c)?)
        } else {
            None
        };
        rd.expect_line("end")?;
        let mut bank = DomainBank::new(entries[0].descriptor.clone(), entries[0].code.clone(), alpha, tau).map_err(|e| {
            Error::Format {
                offset: 0,
                reason: e.to_string(),
            }
        })?;
        bank.entries = entries;
        bank.ema = ema;
        bank.steps = steps;
        Ok(bank)
    }
}
