//! Attack result export: a binary tensor dump plus a JSON manifest.
//!
//! Tensor dump layout: `AATTENS` magic, version (`u32` LE), rank (`u32` LE),
//! each dimension (`u64` LE), then values as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttackLoss, Direction, NormBall, PgdConfig};
use crate::error::{Error, Result};
use crate::numerics::{l2_norm, linf_norm, Tensor};

pub const TENSOR_MAGIC: &[u8; 7] = b"AATTENS";
const TENSOR_VERSION: u32 = 1;

pub fn write_tensor_dump(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(15 + 8 * (t.shape().len() + t.len()));
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    crate::io::write_atomic(path, &out)
}

pub fn read_tensor_dump(path: &Path) -> Result<Tensor> {
    let b = fs::read(path)?;
    if b.len() < 15 || &b[..7] != TENSOR_MAGIC {
        return Err(Error::format(path, "missing AATTENS magic"));
    }
    let version = u32::from_le_bytes(b[7..11].try_into().expect("4 bytes"));
    if version != TENSOR_VERSION {
        return Err(Error::format(path, format!("unsupported tensor dump version {version}")));
    }
    let rank = u32::from_le_bytes(b[11..15].try_into().expect("4 bytes")) as usize;
    let body = 15 + 8 * rank;
    if b.len() < body {
        return Err(Error::format(path, "truncated shape"));
    }
    let shape: Vec<usize> = b[15..body]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if b.len() != body + 8 * n {
        return Err(Error::format(path, format!("expected {n} values after the header")));
    }
    let data = b[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub loss: AttackLoss,
    pub direction: Direction,
    pub ball: NormBall,
    pub pgd: PgdConfig,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub final_loss: Vec<f64>,
    pub l2: Vec<f64>,
    pub linf: Vec<f64>,
}

impl AttackManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        loss: AttackLoss,
        direction: Direction,
        ball: NormBall,
        pgd: PgdConfig,
        seed: u64,
        x0: &Tensor,
        x_adv: &Tensor,
        final_loss: Vec<f64>,
    ) -> Result<Self> {
        if x0.shape() != x_adv.shape() {
            return Err(Error::shape("attack manifest", format!("{:?} vs {:?}", x0.shape(), x_adv.shape())));
        }
        let deltas: Vec<Vec<f64>> = (0..x0.rows())
            .map(|r| x_adv.row(r).iter().zip(x0.row(r)).map(|(a, b)| a - b).collect())
            .collect();
        Ok(Self {
            loss,
            direction,
            ball,
            pgd,
            seed,
            config_hash: None,
            final_loss,
            l2: deltas.iter().map(|d| l2_norm(d)).collect(),
            linf: deltas.iter().map(|d| linf_norm(d)).collect(),
        })
    }
}

/// Writes `<stem>.tensor` and `<stem>.json` next to each other.
pub fn write_attack_export(stem: &Path, x_adv: &Tensor, manifest: &AttackManifest) -> Result<()> {
    write_tensor_dump(&stem.with_extension("tensor"), x_adv)?;
    crate::io::write_atomic(&stem.with_extension("json"), &serde_json::to_vec_pretty(manifest)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tensor");
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, 1e-300, f64::MAX, 0.0]).unwrap();
        write_tensor_dump(&p, &t).unwrap();
        assert_eq!(read_tensor_dump(&p).unwrap(), t);
        let mut raw = fs::read(&p).unwrap();
        raw.pop();
        fs::write(&p, raw).unwrap();
        assert!(matches!(read_tensor_dump(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_norms() {
        let x0 = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let xa = Tensor::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let m = AttackManifest::new(
            AttackLoss::Detector,
            Direction::Minimize,
            NormBall::l2(0.5).unwrap(),
            PgdConfig::new(1, 0.1),
            0,
            &x0,
            &xa,
            vec![-1.0],
        )
        .unwrap();
        assert!((m.l2[0] - 0.5).abs() < 1e-15);
        assert_eq!(m.linf[0], 0.4);
    }
}
