//! Binary parameter container for encoders and full Q-networks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DQNPCKPT"
//! version      u32      1
//! kind         u8       1 = encoder, 2 = q-network
//! assets       u32
//! window       u32
//! frozen       u8       0 or 1
//! count        u32      number of tensors
//! count times:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   ndim       u8
//!   dims       ndim x u64
//!   data       prod(dims) x f64 (IEEE-754 bits, little-endian)
//! ```
//!
//! Nothing follows the last tensor. Round trips are bit-exact.

use std::path::Path;

use thiserror::Error;

use crate::qnet::{Dense, Encoder, Lstm, QNetwork, Regressor};

pub const MAGIC: &[u8; 8] = b"DQNPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unknown checkpoint kind {0}")]
    Kind(u8),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after last tensor")]
    Trailing(usize),
    #[error("invalid tensor name")]
    Name,
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is a {got}, expected a {expected}")]
    WrongKind {
        got: &'static str,
        expected: &'static str,
    },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Encoder,
    QNetwork,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Encoder => 1,
            Kind::QNetwork => 2,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Kind::Encoder => "encoder",
            Kind::QNetwork => "q-network",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub assets: usize,
    pub window: usize,
    pub encoder_frozen: bool,
    pub tensors: Vec<Tensor>,
}

fn dense_tensors(prefix: &str, d: &Dense, out: &mut Vec<Tensor>) {
    out.push(Tensor {
        name: format!("{prefix}.weight"),
        shape: vec![d.outputs, d.inputs],
        data: d.weights.clone(),
    });
    out.push(Tensor {
        name: format!("{prefix}.bias"),
        shape: vec![d.outputs],
        data: d.bias.clone(),
    });
}

fn encoder_tensors(e: &Encoder, out: &mut Vec<Tensor>) {
    let l = &e.lstm;
    out.push(Tensor {
        name: "encoder.lstm.weight".into(),
        shape: vec![4 * l.hidden, l.inputs + l.hidden],
        data: l.weights.clone(),
    });
    out.push(Tensor {
        name: "encoder.lstm.bias".into(),
        shape: vec![4 * l.hidden],
        data: l.bias.clone(),
    });
    dense_tensors("encoder.projection", &e.projection, out);
}

impl Checkpoint {
    pub fn from_encoder(encoder: &Encoder, assets: usize, window: usize) -> Self {
        let mut tensors = Vec::new();
        encoder_tensors(encoder, &mut tensors);
        Self {
            kind: Kind::Encoder,
            assets,
            window,
            encoder_frozen: true,
            tensors,
        }
    }

    pub fn from_network(net: &QNetwork) -> Self {
        let mut tensors = Vec::new();
        encoder_tensors(&net.encoder, &mut tensors);
        for (k, layer) in net.regressor.layers.iter().enumerate() {
            dense_tensors(&format!("regressor.{k}"), layer, &mut tensors);
        }
        Self {
            kind: Kind::QNetwork,
            assets: net.assets,
            window: net.window,
            encoder_frozen: net.encoder_frozen,
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.into()))
    }

    fn expect_shape(t: &Tensor, expected: &[usize]) -> Result<(), CheckpointError> {
        if t.shape != expected {
            return Err(CheckpointError::Shape {
                name: t.name.clone(),
                got: t.shape.clone(),
                expected: expected.to_vec(),
            });
        }
        Ok(())
    }

    fn dense(&self, prefix: &str) -> Result<Dense, CheckpointError> {
        let w = self.tensor(&format!("{prefix}.weight"))?;
        if w.shape.len() != 2 {
            return Err(CheckpointError::Shape {
                name: w.name.clone(),
                got: w.shape.clone(),
                expected: vec![0, 0],
            });
        }
        let (outputs, inputs) = (w.shape[0], w.shape[1]);
        let b = self.tensor(&format!("{prefix}.bias"))?;
        Self::expect_shape(b, &[outputs])?;
        Ok(Dense {
            inputs,
            outputs,
            weights: w.data.clone(),
            bias: b.data.clone(),
        })
    }

    pub fn encoder(&self) -> Result<Encoder, CheckpointError> {
        let w = self.tensor("encoder.lstm.weight")?;
        let bad = || CheckpointError::Shape {
            name: w.name.clone(),
            got: w.shape.clone(),
            expected: vec![4, 5 + 1],
        };
        if w.shape.len() != 2 || w.shape[0] % 4 != 0 || w.shape[0] == 0 {
            return Err(bad());
        }
        let hidden = w.shape[0] / 4;
        let inputs = w.shape[1].checked_sub(hidden).ok_or_else(bad)?;
        if inputs != crate::marketdata::FEATURES {
            return Err(bad());
        }
        let b = self.tensor("encoder.lstm.bias")?;
        Self::expect_shape(b, &[4 * hidden])?;
        let projection = self.dense("encoder.projection")?;
        if projection.inputs != hidden {
            return Err(CheckpointError::Shape {
                name: "encoder.projection.weight".into(),
                got: vec![projection.outputs, projection.inputs],
                expected: vec![projection.outputs, hidden],
            });
        }
        Ok(Encoder {
            lstm: Lstm {
                inputs,
                hidden,
                weights: w.data.clone(),
                bias: b.data.clone(),
            },
            projection,
        })
    }

    pub fn into_encoder(self) -> Result<Encoder, CheckpointError> {
        self.encoder()
    }

    pub fn network(&self) -> Result<QNetwork, CheckpointError> {
        if self.kind != Kind::QNetwork {
            return Err(CheckpointError::WrongKind {
                got: self.kind.label(),
                expected: Kind::QNetwork.label(),
            });
        }
        let encoder = self.encoder()?;
        let mut layers = Vec::new();
        while self
            .tensors
            .iter()
            .any(|t| t.name == format!("regressor.{}.weight", layers.len()))
        {
            layers.push(self.dense(&format!("regressor.{}", layers.len()))?);
        }
        if layers.is_empty() {
            return Err(CheckpointError::Missing("regressor.0.weight".into()));
        }
        let mut expected_in = self.assets * encoder.latent() + self.assets + 1;
        for (k, l) in layers.iter().enumerate() {
            if l.inputs != expected_in {
                return Err(CheckpointError::Shape {
                    name: format!("regressor.{k}.weight"),
                    got: vec![l.outputs, l.inputs],
                    expected: vec![l.outputs, expected_in],
                });
            }
            expected_in = l.outputs;
        }
        let outputs = crate::actionspace::action_count(self.assets);
        if expected_in != outputs {
            return Err(CheckpointError::Shape {
                name: format!("regressor.{}.weight", layers.len() - 1),
                got: vec![expected_in],
                expected: vec![outputs],
            });
        }
        Ok(QNetwork {
            assets: self.assets,
            window: self.window,
            encoder,
            regressor: Regressor { layers },
            encoder_frozen: self.encoder_frozen,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.assets as u32).to_le_bytes());
        out.extend_from_slice(&(self.window as u32).to_le_bytes());
        out.push(self.encoder_frozen as u8);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = match r.u8()? {
            1 => Kind::Encoder,
            2 => Kind::QNetwork,
            other => return Err(CheckpointError::Kind(other)),
        };
        let assets = r.u32()? as usize;
        let window = r.u32()? as usize;
        let encoder_frozen = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(CheckpointError::Truncated(r.pos - 1)),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Name)?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut len: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated(r.pos))?;
                len = len
                    .checked_mul(d)
                    .ok_or(CheckpointError::Truncated(r.pos))?;
                shape.push(d);
            }
            let byte_len = len
                .checked_mul(8)
                .ok_or(CheckpointError::Truncated(r.pos))?;
            let raw = r.take(byte_len)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self {
            kind,
            assets,
            window,
            encoder_frozen,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated(self.pos))?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
