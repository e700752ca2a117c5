//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DPTQCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then
//! every parameter as little-endian `f64` in header order. Nothing
//! time-dependent is stored, so identical models give identical files.

use std::path::Path;

use dptq_core::nn::{ClassifierNet, Linear, Mlp, MlpSpec, PolicyNet};
use dptq_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, LabResult};

pub const MAGIC: &[u8; 8] = b"DPTQCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    Policy { num_layers: usize, num_options: usize },
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    /// Seed the producing stage's random streams were derived from.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelKind,
    spec: MlpSpec,
    tensors: Vec<TensorEntry>,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Classifier(ClassifierNet),
    Policy(PolicyNet),
}

impl Model {
    fn mlp(&self) -> &Mlp {
        match self {
            Model::Classifier(n) => &n.mlp,
            Model::Policy(p) => &p.mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> LabResult<Vec<u8>> {
        let mlp = self.model.mlp();
        let tensors = mlp
            .named_params()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            model: match &self.model {
                Model::Classifier(_) => ModelKind::Classifier,
                Model::Policy(p) => ModelKind::Policy {
                    num_layers: p.num_layers,
                    num_options: p.num_options,
                },
            },
            spec: mlp.spec.clone(),
            tensors,
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| LabError::Report(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * mlp.params().map(Tensor::numel).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in mlp.params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> LabResult<Self> {
        let bad = |detail: &str| LabError::Checkpoint {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a dptq checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
        let mut data = &body[hlen..];

        let expected = Mlp::zeros(header.spec.clone());
        let names: Vec<(String, Vec<usize>)> = expected
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if names.len() != header.tensors.len()
            || names.iter().zip(&header.tensors).any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(bad("tensor table does not match the network spec"));
        }
        let mut layers = Vec::with_capacity(expected.layers.len());
        let mut take = |shape: &[usize]| -> LabResult<Tensor> {
            let n: usize = shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad("truncated parameter data"));
            }
            let vals = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[8 * n..];
            Ok(Tensor::new(shape, vals)?)
        };
        for l in &expected.layers {
            let weight = take(l.weight.shape())?;
            let bias = take(l.bias.shape())?;
            layers.push(Linear { weight, bias });
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after parameter data"));
        }
        let mlp = Mlp {
            spec: header.spec,
            layers,
        };
        let model = match header.model {
            ModelKind::Classifier => Model::Classifier(ClassifierNet { mlp }),
            ModelKind::Policy {
                num_layers,
                num_options,
            } => {
                if mlp.spec.output_dim != num_layers * num_options {
                    return Err(bad("policy output size does not match L x O"));
                }
                Model::Policy(PolicyNet {
                    mlp,
                    num_layers,
                    num_options,
                })
            }
        };
        Ok(Self {
            model,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> LabResult<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| LabError::io(path, e))
    }

    /// A missing or unreadable file is reported as a checkpoint error.
    pub fn load(path: &Path) -> LabResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::Checkpoint {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn into_classifier(self, path: &Path) -> LabResult<ClassifierNet> {
        match self.model {
            Model::Classifier(n) => Ok(n),
            Model::Policy(_) => Err(LabError::Compat(format!("{} holds a policy, not a classifier", path.display()))),
        }
    }

    pub fn into_policy(self, path: &Path) -> LabResult<PolicyNet> {
        match self.model {
            Model::Policy(p) => Ok(p),
            Model::Classifier(_) => Err(LabError::Compat(format!("{} holds a classifier, not a policy", path.display()))),
        }
    }
}

/// Hex sha256 of a file.
pub fn file_hash(path: &Path) -> LabResult<String> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dptq_core::nn::forward_full_precision;
    use dptq_core::rng::Rng;

    fn prov() -> Provenance {
        Provenance {
            stage: "test".into(),
            config_hash: "00".into(),
            seed: 1,
        }
    }

    #[test]
    fn classifier_round_trip_is_bitwise() {
        let net = ClassifierNet::new(MlpSpec::new(5, vec![7, 6], 3).unwrap(), &mut Rng::seeded(3));
        let ck = Checkpoint {
            model: Model::Classifier(net.clone()),
            provenance: prov(),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        let probe = Tensor::new(&[4, 5], (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let net2 = back.into_classifier(Path::new("x")).unwrap();
        let a = forward_full_precision(&net, &probe).unwrap();
        let b = forward_full_precision(&net2, &probe).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ck.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn policy_round_trip() {
        let p = PolicyNet::new(5, vec![4], 3, 2, &mut Rng::seeded(4)).unwrap();
        let ck = Checkpoint {
            model: Model::Policy(p.clone()),
            provenance: prov(),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("p")).unwrap();
        assert_eq!(back.into_policy(Path::new("p")).unwrap(), p);
    }

    #[test]
    fn corrupt_files_rejected() {
        let net = ClassifierNet::new(MlpSpec::new(2, vec![2], 2).unwrap(), &mut Rng::seeded(5));
        let bytes = Checkpoint {
            model: Model::Classifier(net),
            provenance: prov(),
        }
        .to_bytes()
        .unwrap();
        let p = Path::new("c");
        assert!(Checkpoint::from_bytes(b"nope", p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        let err = Checkpoint::from_bytes(&v2, p).unwrap_err();
        assert!(err.to_string().contains("version 2"));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
    }
}
