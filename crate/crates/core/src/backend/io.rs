use std::io::{Cursor, Read};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BackendConfig, EnsembleMember, LdaProjector, PldaEnsemble, PldaModel};
use crate::error::{LidError, Result};

pub const ENSEMBLE_MAGIC: &[u8; 4] = b"LIDE";
pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MemberShape {
    input_dim: usize,
    k: usize,
    classes: Vec<String>,
    class_counts: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BackendConfig,
    labels: Vec<String>,
    batch_manifest: Vec<Vec<String>>,
    members: Vec<MemberShape>,
    provenance: serde_json::Value,
}

fn put(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl PldaEnsemble {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            labels: self.labels.clone(),
            batch_manifest: self.batch_manifest.clone(),
            members: self
                .members
                .iter()
                .map(|m| MemberShape {
                    input_dim: m.lda.input_dim(),
                    k: m.lda.output_dim(),
                    classes: m.plda.classes.clone(),
                    class_counts: m.plda.class_counts.clone(),
                })
                .collect(),
            provenance: self.provenance.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(ENSEMBLE_MAGIC);
        out.extend_from_slice(&ENSEMBLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in &self.members {
            put(&mut out, m.lda.mean.as_slice());
            put(&mut out, m.lda.projection.as_slice());
            let p = &m.plda;
            put(&mut out, p.mean.as_slice());
            put(&mut out, p.phi_b.as_slice());
            put(&mut out, p.phi_w.as_slice());
            put(&mut out, p.transform.as_slice());
            put(&mut out, p.lambda.as_slice());
            put(&mut out, p.class_means.as_slice());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| LidError::VersionMismatch(format!("ensemble file: {what}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v).map_err(|_| bad("truncated"))?;
        let version = u32::from_le_bytes(v);
        if version != ENSEMBLE_VERSION {
            return Err(bad(&format!("version {version}, expected {ENSEMBLE_VERSION}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header).map_err(|_| bad("truncated"))?;
        let header: Header = serde_json::from_slice(&header)?;

        let mut take = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut members = Vec::with_capacity(header.members.len());
        for shape in header.members {
            let (d, k, c) = (shape.input_dim, shape.k, shape.classes.len());
            let lda = LdaProjector {
                mean: DVector::from_vec(take(d)?),
                projection: DMatrix::from_vec(d, k, take(d * k)?),
            };
            let plda = PldaModel {
                mean: DVector::from_vec(take(k)?),
                phi_b: DMatrix::from_vec(k, k, take(k * k)?),
                phi_w: DMatrix::from_vec(k, k, take(k * k)?),
                transform: DMatrix::from_vec(k, k, take(k * k)?),
                lambda: DVector::from_vec(take(k)?),
                class_means: DMatrix::from_vec(c, k, take(c * k)?),
                classes: shape.classes,
                class_counts: shape.class_counts,
            };
            members.push(EnsembleMember { lda, plda });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(PldaEnsemble {
            config: header.config,
            members,
            batch_manifest: header.batch_manifest,
            labels: header.labels,
            provenance: header.provenance,
        })
    }
}

pub fn save_ensemble(ensemble: &PldaEnsemble, path: &Path) -> Result<()> {
    std::fs::write(path, ensemble.to_bytes()).map_err(|e| LidError::io(path, e))
}

pub fn load_ensemble(path: &Path) -> Result<PldaEnsemble> {
    let bytes = std::fs::read(path).map_err(|e| LidError::io(path, e))?;
    PldaEnsemble::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{fit_ensemble, LabeledRep, MemorySource, RepresentationVector, ResidencyMeter};

    fn ensemble() -> PldaEnsemble {
        let data: Vec<LabeledRep> = (0..60)
            .map(|i| LabeledRep {
                rep: RepresentationVector {
                    segment_id: format!("s{i:02}"),
                    values: (0..6).map(|d| ((i * 7 + d * 3) % 11) as f32 + (i % 3) as f32 * 4.0).collect(),
                },
                label: format!("l{}", i % 3),
            })
            .collect();
        let cfg = BackendConfig {
            batch_segments: 30,
            ..BackendConfig::default()
        };
        let mut e = fit_ensemble(&mut MemorySource::new(data), &cfg, &ResidencyMeter::new()).unwrap();
        e.provenance = serde_json::json!({"seed": 0});
        e
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let e = ensemble();
        let bytes = e.to_bytes();
        let back = PldaEnsemble::from_bytes(&bytes).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        save_ensemble(&e, &p).unwrap();
        assert_eq!(load_ensemble(&p).unwrap(), e);
    }

    #[test]
    fn header_validation() {
        let mut bytes = ensemble().to_bytes();
        bytes[1] = b'X';
        assert!(matches!(PldaEnsemble::from_bytes(&bytes), Err(LidError::VersionMismatch(_))));
        let bytes = ensemble().to_bytes();
        assert!(PldaEnsemble::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
