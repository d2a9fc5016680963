use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Mode, Tdnn, TdnnConfig, TdnnOutput};
use crate::corpus::LanguageRegistry;
use crate::error::{LidError, Result};
use crate::features::FeatureMatrix;

pub const MODEL_MAGIC: &[u8; 4] = b"LIDT";
pub const MODEL_VERSION: u32 = 1;

/// A trained network bound to the in-set language ordering it was trained on.
#[derive(Debug, Clone)]
pub struct TdnnModel {
    pub net: Tdnn<f32>,
    pub registry_hash: String,
    /// Configuration and seed that produced the model, stored verbatim.
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TdnnConfig,
    provenance: serde_json::Value,
}

impl TdnnModel {
    pub fn new(net: Tdnn<f32>, registry: &LanguageRegistry) -> Result<Self> {
        if net.config.num_classes() != registry.in_set().len() {
            return Err(LidError::Shape(format!(
                "network has {} outputs but the registry lists {} in-set languages",
                net.config.num_classes(),
                registry.in_set().len()
            )));
        }
        Ok(TdnnModel {
            net,
            registry_hash: registry.in_set_hash(),
            provenance: serde_json::Value::Null,
        })
    }

    pub fn check_registry(&self, registry: &LanguageRegistry) -> Result<()> {
        let found = registry.in_set_hash();
        if found != self.registry_hash {
            return Err(LidError::RegistryMismatch {
                expected: self.registry_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn forward(&self, features: &FeatureMatrix, mode: Mode) -> Result<TdnnOutput<f32>> {
        self.net.forward(features.frames.view(), mode)
    }

    /// Forward pass after verifying the registry matches the model.
    pub fn forward_checked(
        &self,
        features: &FeatureMatrix,
        mode: Mode,
        registry: &LanguageRegistry,
    ) -> Result<TdnnOutput<f32>> {
        self.check_registry(registry)?;
        self.forward(features, mode)
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.net.layers {
            for t in [&l.weight.as_slice().unwrap(), &l.bias.as_slice().unwrap()] {
                t.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            for t in [&l.gamma, &l.beta, &l.running_mean, &l.running_var] {
                t.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        out
    }

    /// SHA-256 over the parameter payload, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.payload()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            config: self.net.config.clone(),
            provenance: self.provenance.clone(),
        })
        .expect("header serializes");
        let payload = self.payload();
        let mut out = Vec::with_capacity(payload.len() + header.len() + 64);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.registry_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.registry_hash.as_bytes());
        out.extend_from_slice(&((payload.len() / 4) as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |_| LidError::VersionMismatch("truncated model file".into());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MODEL_MAGIC {
            return Err(LidError::VersionMismatch("not a TDNN model file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(LidError::VersionMismatch(format!(
                "model format version {version}, expected {MODEL_VERSION}"
            )));
        }
        let header: Header = serde_json::from_slice(&read_block(&mut r)?)?;
        let registry_hash = String::from_utf8(read_block(&mut r)?)
            .map_err(|_| LidError::VersionMismatch("registry hash is not UTF-8".into()))?;
        let mut count = [0u8; 8];
        r.read_exact(&mut count).map_err(truncated)?;
        let count = u64::from_le_bytes(count) as usize;
        let mut net = Tdnn::<f32>::zeros(header.config)?;
        if count != net.parameter_count() + net.layers.iter().map(|l| 2 * l.out_dim).sum::<usize>()
        {
            return Err(LidError::VersionMismatch(
                "parameter payload does not match the stored configuration".into(),
            ));
        }
        let mut next = || -> Result<f32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(truncated)?;
            Ok(f32::from_le_bytes(b))
        };
        for l in &mut net.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = next()?;
            }
            for v in l
                .gamma
                .iter_mut()
                .chain(l.beta.iter_mut())
                .chain(l.running_mean.iter_mut())
                .chain(l.running_var.iter_mut())
            {
                *v = next()?;
            }
        }
        Ok(TdnnModel {
            net,
            registry_hash,
            provenance: header.provenance,
        })
    }
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| LidError::VersionMismatch("truncated model file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_block(r: &mut Cursor<&[u8]>) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| LidError::VersionMismatch("truncated model file".into()))?;
    Ok(buf)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_model(model: &TdnnModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()).map_err(|e| LidError::io(path, e))
}

/// Loads a model, optionally checking it against the current registry.
pub fn load_model(path: &Path, registry: Option<&LanguageRegistry>) -> Result<TdnnModel> {
    let bytes = std::fs::read(path).map_err(|e| LidError::io(path, e))?;
    let model = TdnnModel::from_bytes(&bytes)?;
    if let Some(reg) = registry {
        model.check_registry(reg)?;
    }
    Ok(model)
}
