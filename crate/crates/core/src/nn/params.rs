use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::MlpSpec;
use crate::error::{Error, Result};

/// Flat weights and biases of one network in the [`MlpSpec::layers`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self(vec![0.0; spec.param_count()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_bytes(&self, spec: &MlpSpec) -> Vec<u8> {
        write_blob(BlobKind::Params, spec, 0, &self.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(MlpSpec, Self)> {
        let blob = read_blob(bytes)?;
        if blob.kind != BlobKind::Params {
            return Err(Error::Format(format!(
                "expected a parameter vector, found {:?}",
                blob.kind
            )));
        }
        if blob.values.len() != blob.spec.param_count() {
            return Err(Error::Format(format!(
                "parameter count {} does not match architecture ({})",
                blob.values.len(),
                blob.spec.param_count()
            )));
        }
        Ok((blob.spec, Self(blob.values)))
    }
}

/// I.i.d. zero-mean Gaussian parameters with standard deviation `init_std`.
pub fn init_params(spec: &MlpSpec, init_std: f64, seed: u64) -> Result<ParamVector> {
    if !(init_std >= 0.0 && init_std.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "init_std must be finite and >= 0, got {init_std}"
        )));
    }
    let n = spec.param_count();
    if init_std == 0.0 {
        return Ok(ParamVector(vec![0.0; n]));
    }
    let normal = Normal::new(0.0, init_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ParamVector((0..n).map(|_| normal.sample(&mut rng)).collect()))
}

const MAGIC: &[u8; 8] = b"NANOFLOW";
const LAYOUT_VERSION: u8 = 1;
const HEADER_LEN: usize = 8 + 1 + 1 + 4 + 4 + 4 + 8;

/// What a binary blob holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobKind {
    Params = 0,
    /// Variational means followed by the raw scale parameters.
    Variational = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub kind: BlobKind,
    pub spec: MlpSpec,
    /// Kind-specific extra header word (number of latent coordinates for
    /// variational states).
    pub aux: u32,
    pub values: Vec<f64>,
}

/// Layout: 8-byte magic, layout version byte, kind byte, hidden layer count
/// (u32), hidden width (u32), aux word (u32), value count (u64), then the
/// values as little-endian f64.
pub fn write_blob(kind: BlobKind, spec: &MlpSpec, aux: u32, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.push(LAYOUT_VERSION);
    out.push(kind as u8);
    out.extend_from_slice(&(spec.hidden_layers as u32).to_le_bytes());
    out.extend_from_slice(&(spec.hidden_width as u32).to_le_bytes());
    out.extend_from_slice(&aux.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_blob(bytes: &[u8]) -> Result<Blob> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a nanoflow binary file".into()));
    }
    if bytes[8] != LAYOUT_VERSION {
        return Err(Error::Format(format!(
            "unsupported layout version {}",
            bytes[8]
        )));
    }
    let kind = match bytes[9] {
        0 => BlobKind::Params,
        1 => BlobKind::Variational,
        k => return Err(Error::Format(format!("unknown blob kind {k}"))),
    };
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let hidden_layers = u32_at(10) as usize;
    let hidden_width = u32_at(14) as usize;
    let aux = u32_at(18);
    let count = u64::from_le_bytes(bytes[22..30].try_into().unwrap()) as usize;
    if hidden_layers == 0 || hidden_width == 0 {
        return Err(Error::Format("empty architecture in header".into()));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != count.saturating_mul(8) {
        return Err(Error::Format(format!(
            "expected {count} values, body holds {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Blob {
        kind,
        spec: MlpSpec::new(hidden_layers, hidden_width),
        aux,
        values,
    })
}
