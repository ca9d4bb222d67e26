//! Model checkpoints: a JSON header followed by a little-endian f64 blob.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, the header
//! JSON, then every tensor listed in the header back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::operator::{Normalization, OperatorArch, OperatorModel};
use crate::policy::{PolicyArch, PolicyModel};
use crate::TOOL_VERSION;

const MAGIC: &[u8; 8] = b"PDPCCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub tool_version: String,
    pub config_hash: Option<String>,
    /// Architecture and other non-tensor settings.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    fn new(kind: &str, config_hash: Option<&str>, meta: serde_json::Value, named: Vec<(String, Tensor)>) -> Self {
        let (names, tensors): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        let entries = names
            .into_iter()
            .zip(&tensors)
            .map(|(name, t): (String, &Tensor)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                kind: kind.to_string(),
                tool_version: TOOL_VERSION.to_string(),
                config_hash: config_hash.map(str::to_string),
                meta,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in self.tensors.iter().flat_map(|t| t.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        if buf.len() < 20 || &buf[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
        let body = buf.get(20..20 + len).ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
        let mut blob = buf[20 + len..].chunks_exact(8);
        if blob.remainder().len() != 0 {
            return Err(Error::format(path, "weight blob is not a whole number of f64 values"));
        }
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if blob.len() != total {
            return Err(Error::format(path, format!("expected {total} weights, found {}", blob.len())));
        }
        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let n = e.shape.iter().product();
                let data = (&mut blob)
                    .take(n)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::new(e.shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { header, tensors })
    }

    fn take(&self, name: &str) -> Result<Tensor> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| self.tensors[i].clone())
            .ok_or_else(|| Error::Mismatch(format!("checkpoint has no tensor `{name}`")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Mismatch(format!("expected a {kind} checkpoint, found {}", self.header.kind)));
        }
        Ok(())
    }
}

fn mlp_tensors(prefix: &str, mlp: &Mlp, out: &mut Vec<(String, Tensor)>) {
    for (i, l) in mlp.layers.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), l.weight.clone()));
        out.push((format!("{prefix}.{i}.bias"), l.bias.clone()));
    }
}

fn mlp_from(ck: &Checkpoint, prefix: &str, activation: crate::nn::Activation) -> Result<Mlp> {
    let mut layers = Vec::new();
    while let Ok(w) = ck.take(&format!("{prefix}.{}.weight", layers.len())) {
        let b = ck.take(&format!("{prefix}.{}.bias", layers.len()))?;
        layers.push(Linear {
            weight: w.with_grad(),
            bias: b.with_grad(),
        });
    }
    if layers.is_empty() {
        return Err(Error::Mismatch(format!("checkpoint has no layers for `{prefix}`")));
    }
    Ok(Mlp { layers, activation })
}

#[derive(Serialize, Deserialize)]
struct OperatorMeta {
    arch: OperatorArch,
}

pub fn save_operator(model: &OperatorModel, config_hash: Option<&str>, path: &Path) -> Result<()> {
    let mut t = Vec::new();
    mlp_tensors("state_branch", &model.state_branch, &mut t);
    mlp_tensors("control_branch", &model.control_branch, &mut t);
    mlp_tensors("trunk", &model.trunk, &mut t);
    let n = &model.norm;
    for (name, v) in [
        ("grid_x", &model.grid_x),
        ("norm.state_mean", &n.state_mean),
        ("norm.state_std", &n.state_std),
        ("norm.deriv_mean", &n.deriv_mean),
        ("norm.deriv_std", &n.deriv_std),
    ] {
        t.push((name.to_string(), Tensor::vector(v.clone())));
    }
    t.push(("norm.amp_scale".into(), Tensor::vector(vec![n.amp_scale])));
    let meta = serde_json::to_value(OperatorMeta { arch: model.arch.clone() })?;
    Checkpoint::new("operator", config_hash, meta, t).save(path)
}

pub fn load_operator(path: &Path) -> Result<(OperatorModel, CheckpointHeader)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind("operator")?;
    let meta: OperatorMeta = serde_json::from_value(ck.header.meta.clone())?;
    let act = meta.arch.activation;
    let vec = |name: &str| ck.take(name).map(Tensor::into_data);
    let norm = Normalization {
        state_mean: vec("norm.state_mean")?,
        state_std: vec("norm.state_std")?,
        amp_scale: vec("norm.amp_scale")?[0],
        deriv_mean: vec("norm.deriv_mean")?,
        deriv_std: vec("norm.deriv_std")?,
    };
    let model = OperatorModel::from_parts(
        meta.arch,
        mlp_from(&ck, "state_branch", act)?,
        mlp_from(&ck, "control_branch", act)?,
        mlp_from(&ck, "trunk", act)?,
        norm,
        vec("grid_x")?,
    );
    Ok((model, ck.header))
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    arch: PolicyArch,
    n_x: usize,
    n_xi: usize,
}

pub fn save_policy(model: &PolicyModel, config_hash: Option<&str>, path: &Path) -> Result<()> {
    let mut t = Vec::new();
    mlp_tensors("net", &model.net, &mut t);
    t.push(("a_max".into(), Tensor::vector(vec![model.a_max])));
    let meta = serde_json::to_value(PolicyMeta {
        arch: model.arch.clone(),
        n_x: model.n_x,
        n_xi: model.n_xi,
    })?;
    Checkpoint::new("policy", config_hash, meta, t).save(path)
}

pub fn load_policy(path: &Path) -> Result<(PolicyModel, CheckpointHeader)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind("policy")?;
    let meta: PolicyMeta = serde_json::from_value(ck.header.meta.clone())?;
    let net = mlp_from(&ck, "net", meta.arch.activation)?;
    let model = PolicyModel {
        a_max: ck.take("a_max")?.data()[0],
        arch: meta.arch,
        net,
        n_x: meta.n_x,
        n_xi: meta.n_xi,
    };
    Ok((model, ck.header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn operator() -> OperatorModel {
        let arch = OperatorArch {
            width: 7,
            depth: 2,
            p: 5,
            activation: Activation::Tanh,
        };
        let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let mut norm = Normalization::identity(11, 40.0);
        norm.state_mean[3] = 0.1 + 0.2;
        norm.deriv_std[4] = 1.0 / 3.0;
        OperatorModel::new(arch, grid, 4, norm, 5)
    }

    #[test]
    fn operator_round_trip_is_bit_exact() {
        let m = operator();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("op.ckpt");
        save_operator(&m, Some("abc"), &path).unwrap();
        let (back, header) = load_operator(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.config_hash.as_deref(), Some("abc"));
        assert_eq!(header.tool_version, TOOL_VERSION);
        for (a, b) in m.trunk_matrix().data().iter().zip(back.trunk_matrix().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // saving again yields the same bytes
        let path2 = dir.path().join("op2.ckpt");
        save_operator(&back, Some("abc"), &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn policy_round_trip_and_kind_check() {
        let p = PolicyModel::new(PolicyArch::default(), 11, 11, 4, 40.0, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save_policy(&p, None, &path).unwrap();
        let (back, _) = load_policy(&path).unwrap();
        assert_eq!(back, p);
        assert!(matches!(load_operator(&path), Err(Error::Mismatch(_))));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("op.ckpt");
        save_operator(&operator(), None, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
