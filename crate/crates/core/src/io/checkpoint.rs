//! Binary checkpoint files.
//!
//! Layout, little-endian: magic `NAFC`, version u16, digest length u16 and
//! digest bytes (sha-256 of the canonical run configuration), tensor count
//! u32, then per tensor: name length u16, name bytes, rank u8, one u32 per
//! dimension, f32 data. Optimizer state rides along under reserved names
//! (`adam.m.*`, `adam.v.*`, `adam.step`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attention::ProjectionParams;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::objective::adam::AdamState;
use crate::objective::ClassifierParams;

pub const MAGIC: &[u8; 4] = b"NAFC";
pub const FORMAT_VERSION: u16 = 1;

/// Tensor order shared by the optimizer state and the checkpoint codec.
pub const MODEL_TENSORS: [&str; 5] = ["proj.w_iq", "proj.w_iv", "proj.w_tk", "proj.w_tv", "classifier"];

/// Named tensors plus the digest of the configuration that produced them.
/// The map is ordered so serialization is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: Vec<u8>,
    pub tensors: BTreeMap<String, Mat>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_digest.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(2);
            out.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
            for v in tensor.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format(format!("checkpoint truncated at byte {pos}", pos = *pos)));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("checkpoint has bad magic".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("checkpoint has unsupported version {version}")));
        }
        let digest_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let config_digest = take(&mut pos, digest_len)?.to_vec();
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let rank = take(&mut pos, 1)?[0];
            if rank != 2 {
                return Err(Error::Format(format!("tensor {name} has unsupported rank {rank}")));
            }
            let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64);
            }
            if tensors.insert(name.clone(), Mat::from_vec(rows, cols, data)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format("checkpoint has trailing bytes".into()));
        }
        Ok(Self { config_digest, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
    }
}

/// Packs projections, classifier and optimizer state into a checkpoint.
pub fn pack_model(
    params: &ProjectionParams,
    classifier: &ClassifierParams,
    adam: &AdamState,
    config_digest: Vec<u8>,
) -> Result<Checkpoint> {
    if adam.tensor_count() != MODEL_TENSORS.len() {
        return Err(Error::InvalidInput(format!(
            "optimizer tracks {} tensors, expected {}",
            adam.tensor_count(),
            MODEL_TENSORS.len()
        )));
    }
    let mut tensors = BTreeMap::new();
    let values = [
        &params.w_iq,
        &params.w_iv,
        &params.w_tk,
        &params.w_tv,
        &classifier.weights,
    ];
    for (name, tensor) in MODEL_TENSORS.iter().zip(values) {
        tensors.insert(name.to_string(), tensor.clone());
    }
    for (k, name) in MODEL_TENSORS.iter().enumerate() {
        tensors.insert(format!("adam.m.{name}"), adam.first_moments()[k].clone());
        tensors.insert(format!("adam.v.{name}"), adam.second_moments()[k].clone());
    }
    tensors.insert(
        "adam.step".to_string(),
        Mat::from_vec(1, 1, vec![adam.step_count() as f64])?,
    );
    Ok(Checkpoint { config_digest, tensors })
}

/// Reverses [`pack_model`].
pub fn unpack_model(cp: &Checkpoint) -> Result<(ProjectionParams, ClassifierParams, AdamState)> {
    let params = ProjectionParams::new(
        cp.tensor("proj.w_iq")?.clone(),
        cp.tensor("proj.w_iv")?.clone(),
        cp.tensor("proj.w_tk")?.clone(),
        cp.tensor("proj.w_tv")?.clone(),
    )?;
    let classifier = ClassifierParams::new(cp.tensor("classifier")?.clone())?;
    let mut m = Vec::with_capacity(MODEL_TENSORS.len());
    let mut v = Vec::with_capacity(MODEL_TENSORS.len());
    for name in MODEL_TENSORS {
        m.push(cp.tensor(&format!("adam.m.{name}"))?.clone());
        v.push(cp.tensor(&format!("adam.v.{name}"))?.clone());
    }
    let step = cp.tensor("adam.step")?.get(0, 0);
    if step < 0.0 || step.fract() != 0.0 {
        return Err(Error::Format(format!("adam.step holds a non-integer value {step}")));
    }
    let adam = AdamState::from_parts(step as u64, m, v)?;
    Ok((params, classifier, adam))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_mat(rows: usize, cols: usize, seed: f32) -> Mat {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((i as f32 * 0.61 + seed).cos()) as f64)
            .collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    fn sample_model() -> (ProjectionParams, ClassifierParams, AdamState) {
        let params = ProjectionParams::new(
            f32_mat(3, 3, 0.0),
            f32_mat(3, 3, 1.0),
            f32_mat(3, 3, 2.0),
            f32_mat(3, 3, 3.0),
        )
        .unwrap();
        let classifier = ClassifierParams::new(f32_mat(4, 3, 4.0)).unwrap();
        let adam = AdamState::new(&[(3, 3), (3, 3), (3, 3), (3, 3), (4, 3)]);
        (params, classifier, adam)
    }

    #[test]
    fn model_round_trip() {
        let (params, classifier, adam) = sample_model();
        let cp = pack_model(&params, &classifier, &adam, vec![1, 2, 3]).unwrap();
        let bytes = cp.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(cp, back);
        assert_eq!(back.to_bytes(), bytes);
        let (p2, c2, a2) = unpack_model(&back).unwrap();
        assert_eq!(params, p2);
        assert_eq!(classifier, c2);
        assert_eq!(adam, a2);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let (params, classifier, adam) = sample_model();
        let bytes = pack_model(&params, &classifier, &adam, vec![]).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn missing_tensor_reported_by_name() {
        let (params, classifier, adam) = sample_model();
        let mut cp = pack_model(&params, &classifier, &adam, vec![]).unwrap();
        cp.tensors.remove("proj.w_tk");
        let err = unpack_model(&cp).unwrap_err();
        assert!(err.to_string().contains("proj.w_tk"));
    }
}
