//! Serialized model weights: a JSON architecture header line followed by
//! the raw little-endian f32 weight payload, mirroring the RGF layout.

use super::NnError;
use crate::diffusion::{ConditionMode, DenoiserConfig};
use crate::field::NormSpec;
use crate::transform::TransformConfig;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchDescriptor {
    Transform {
        cfg: TransformConfig,
        in_channels: usize,
        train_rows: usize,
        train_cols: usize,
    },
    Denoiser {
        cfg: DenoiserConfig,
        mode: ConditionMode,
        t_steps: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Default)]
pub struct TrainMeta {
    pub steps: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct BundleHeader {
    version: u32,
    arch: ArchDescriptor,
    params: Vec<(String, Vec<usize>)>,
    norm: NormSpec,
    meta: TrainMeta,
    weight_count: usize,
    dtype: String,
    endian: String,
}

/// Architecture descriptor, normalization config, flat weights, and
/// training metadata for either stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub arch: ArchDescriptor,
    pub params: Vec<(String, Vec<usize>)>,
    pub norm: NormSpec,
    pub meta: TrainMeta,
    pub weights: Vec<f32>,
}

impl ModelBundle {
    pub fn new(
        arch: ArchDescriptor,
        params: Vec<(String, Vec<usize>)>,
        norm: NormSpec,
        meta: TrainMeta,
        weights: Vec<f32>,
    ) -> Result<ModelBundle, NnError> {
        let expect: usize = params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if expect != weights.len() {
            return Err(NnError::BadBundle(format!(
                "weight count {} does not match architecture ({expect})",
                weights.len()
            )));
        }
        Ok(ModelBundle { arch, params, norm, meta, weights })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let header = BundleHeader {
            version: BUNDLE_VERSION,
            arch: self.arch.clone(),
            params: self.params.clone(),
            norm: self.norm.clone(),
            meta: self.meta.clone(),
            weight_count: self.weights.len(),
            dtype: "f32".into(),
            endian: "LE".into(),
        };
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let line = serde_json::to_string(&header).map_err(|e| NnError::BadBundle(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for &v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelBundle, NnError> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut header_bytes = Vec::new();
        let mut one = [0u8; 1];
        loop {
            let n = r.read(&mut one)?;
            if n == 0 {
                return Err(NnError::BadBundle("missing newline after header".into()));
            }
            if one[0] == b'\n' {
                break;
            }
            header_bytes.push(one[0]);
            if header_bytes.len() > 1 << 20 {
                return Err(NnError::BadBundle("header exceeds 1 MiB".into()));
            }
        }
        let header: BundleHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| NnError::BadBundle(e.to_string()))?;
        if header.version != BUNDLE_VERSION {
            return Err(NnError::BadBundle(format!("unsupported version {}", header.version)));
        }
        if header.dtype != "f32" || header.endian != "LE" {
            return Err(NnError::BadBundle(format!(
                "unsupported payload encoding {}/{}",
                header.dtype, header.endian
            )));
        }
        let mut payload = vec![0u8; header.weight_count * 4];
        let mut filled = 0;
        while filled < payload.len() {
            let n = r.read(&mut payload[filled..])?;
            if n == 0 {
                return Err(NnError::BadBundle(format!(
                    "truncated weight payload: wanted {} bytes, got {filled}",
                    payload.len()
                )));
            }
            filled += n;
        }
        let weights: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        ModelBundle::new(header.arch, header.params, header.norm, header.meta, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;
    use crate::transform::TransformConfig;

    fn sample_bundle() -> ModelBundle {
        let mut rng = Rng64::new(3);
        let weights: Vec<f32> = (0..20).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect();
        ModelBundle::new(
            ArchDescriptor::Transform {
                cfg: TransformConfig::default(),
                in_channels: 4,
                train_rows: 64,
                train_cols: 64,
            },
            vec![("w".into(), vec![4, 4]), ("b".into(), vec![4])],
            NormSpec::default(),
            TrainMeta { steps: 10, seed: 7 },
            weights,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let bundle = sample_bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bundle");
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        assert_eq!(bundle.arch, loaded.arch);
        assert_eq!(bundle.meta, loaded.meta);
        for (a, b) in bundle.weights.iter().zip(loaded.weights.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn weight_count_mismatch_rejected() {
        let err = ModelBundle::new(
            ArchDescriptor::Transform {
                cfg: TransformConfig::default(),
                in_channels: 4,
                train_rows: 64,
                train_cols: 64,
            },
            vec![("w".into(), vec![4, 4])],
            NormSpec::default(),
            TrainMeta::default(),
            vec![0.0; 3],
        )
        .unwrap_err();
        assert!(matches!(err, NnError::BadBundle(_)));
    }
}
