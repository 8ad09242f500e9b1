//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "DRPO" | version u16 | activation u8
//! | layer count u32 | layer sizes u32... | time_dim u32
//! | T u32 | beta_start f64 | beta_end f64 | schedule kind u8
//! | config length u32 | config UTF-8 bytes
//! | theta length u64 | theta f64...
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, Arch, DenoiserParams};
use crate::schedule::{DiffusionSchedule, ScheduleKind};

pub const MAGIC: &[u8; 4] = b"DRPO";
pub const FORMAT_VERSION: u16 = 1;

/// Network parameters, the schedule they were trained under, and the
/// resolved training configuration as text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: DiffusionSchedule,
    pub config: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.params.arch();
        let mut b = Vec::with_capacity(64 + self.config.len() + 8 * self.params.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.push(arch.activation.code());
        b.extend_from_slice(&(arch.layers.len() as u32).to_le_bytes());
        for &n in &arch.layers {
            b.extend_from_slice(&(n as u32).to_le_bytes());
        }
        b.extend_from_slice(&(arch.time_dim as u32).to_le_bytes());
        b.extend_from_slice(&(self.schedule.steps() as u32).to_le_bytes());
        b.extend_from_slice(&self.schedule.beta_start().to_le_bytes());
        b.extend_from_slice(&self.schedule.beta_end().to_le_bytes());
        b.push(self.schedule.kind().code());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for x in self.params.theta() {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::CorruptHeader("bad magic bytes".into()));
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let act = r.u8("activation")?;
        let activation = Activation::from_code(act)
            .ok_or_else(|| Error::CorruptHeader(format!("unknown activation code {act}")))?;
        let n_layers = r.u32("layer count")? as usize;
        if n_layers > 1024 {
            return Err(Error::CorruptHeader(format!(
                "implausible layer count {n_layers}"
            )));
        }
        let layers = (0..n_layers)
            .map(|_| r.u32("layer size").map(|n| n as usize))
            .collect::<Result<Vec<_>>>()?;
        let time_dim = r.u32("time_dim")? as usize;
        let steps = r.u32("schedule length")? as usize;
        let beta_start = r.f64("beta_start")?;
        let beta_end = r.f64("beta_end")?;
        let kind_code = r.u8("schedule kind")?;
        let kind = ScheduleKind::from_code(kind_code)
            .ok_or_else(|| Error::CorruptHeader(format!("unknown schedule kind {kind_code}")))?;
        let config_len = r.u32("config length")? as usize;
        let config = String::from_utf8(r.take(config_len, "config")?.to_vec())
            .map_err(|_| Error::CorruptHeader("config text is not UTF-8".into()))?;
        let theta_len = r.u64("theta length")? as usize;
        if theta_len > r.remaining() / 8 {
            return Err(Error::CorruptHeader(format!(
                "theta length {theta_len} exceeds the {} bytes left",
                r.remaining()
            )));
        }
        let theta = (0..theta_len)
            .map(|_| r.f64("theta"))
            .collect::<Result<Vec<_>>>()?;
        if r.remaining() != 0 {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }

        let arch = Arch {
            layers,
            time_dim,
            activation,
        };
        let params = DenoiserParams::from_theta(arch, theta)
            .map_err(|e| Error::CorruptHeader(e.to_string()))?;
        let schedule = DiffusionSchedule::new(steps, beta_start, beta_end, kind)
            .map_err(|e| Error::CorruptHeader(e.to_string()))?;
        Ok(Self {
            params,
            schedule,
            config,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::CorruptHeader(format!(
                "file ends while reading {what} at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.array(what).map(u16::from_le_bytes)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.array(what).map(u64::from_le_bytes)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        self.array(what).map(f64::from_le_bytes)
    }
}

pub fn save_checkpoint(
    params: &DenoiserParams,
    schedule: &DiffusionSchedule,
    config: &str,
    path: &Path,
) -> Result<()> {
    let ckpt = Checkpoint {
        params: params.clone(),
        schedule: schedule.clone(),
        config: config.to_string(),
    };
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
