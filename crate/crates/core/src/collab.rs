//! Collaborative training: clients ship parameter deltas against a shared
//! base model and a coordinator averages them back in.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_container, write_container, ManifestEntry, ModelParams};
use crate::numerics::Tensor;

pub const DELTA_MAGIC: [u8; 4] = *b"RPTD";

/// Element-wise `tuned - base`, tied to the base model by fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub fingerprint: String,
    pub manifest: Vec<ManifestEntry>,
    pub arrays: Vec<Tensor>,
    pub client: String,
    pub steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DeltaMeta {
    manifest: Vec<ManifestEntry>,
    fingerprint: String,
    client: String,
    steps: usize,
}

fn check_compatible(base: &ModelParams, fingerprint: &str) -> Result<()> {
    if base.fingerprint() != fingerprint {
        return Err(Error::Fingerprint { expected: base.fingerprint().to_string(), found: fingerprint.to_string() });
    }
    Ok(())
}

pub fn export_delta(base: &ModelParams, tuned: &ModelParams, client: impl Into<String>, steps: usize) -> Result<Delta> {
    check_compatible(base, tuned.fingerprint())?;
    let arrays = base
        .tensors()
        .iter()
        .zip(tuned.tensors())
        .map(|(b, t)| {
            let mut d = t.clone();
            d.axpy(-1.0, b)?;
            Ok(d)
        })
        .collect::<Result<_>>()?;
    Ok(Delta { fingerprint: base.fingerprint().to_string(), manifest: base.manifest(), arrays, client: client.into(), steps })
}

fn cmp_arrays(a: &[Tensor], b: &[Tensor]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            match p.total_cmp(q) {
                Ordering::Equal => {}
                o => return o,
            }
        }
    }
    Ordering::Equal
}

/// `base + Σ wᵢ·Δᵢ`, uniform weights by default. Deltas are summed in
/// client-label order, so the result does not depend on input order.
pub fn merge(base: &ModelParams, deltas: &[Delta], weights: Option<&[f64]>) -> Result<ModelParams> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("no deltas to merge".into()));
    }
    let k = deltas.len();
    let weights: Vec<f64> = match weights {
        None => vec![1.0 / k as f64; k],
        Some(w) => {
            let sum: f64 = w.iter().sum();
            if w.len() != k || w.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("{k} deltas need {k} non-negative weights summing to 1")));
            }
            w.to_vec()
        }
    };
    let manifest = base.manifest();
    for d in deltas {
        check_compatible(base, &d.fingerprint)?;
        if d.manifest != manifest || d.arrays.iter().zip(&manifest).any(|(a, m)| a.shape() != m.shape.as_slice()) {
            return Err(Error::Shape { op: "merge", detail: format!("delta from {:?} does not match the base manifest", d.client) });
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        deltas[a].client.cmp(&deltas[b].client).then_with(|| cmp_arrays(&deltas[a].arrays, &deltas[b].arrays))
    });
    let mut out = base.clone();
    for i in order {
        for (t, d) in out.tensors_mut().iter_mut().zip(&deltas[i].arrays) {
            t.axpy(weights[i], d)?;
        }
    }
    Ok(out)
}

impl Delta {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let meta = DeltaMeta {
            manifest: self.manifest.clone(),
            fingerprint: self.fingerprint.clone(),
            client: self.client.clone(),
            steps: self.steps,
        };
        write_container(w, &DELTA_MAGIC, &meta, &self.arrays.iter().collect::<Vec<_>>())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = read_container(bytes, &DELTA_MAGIC, "delta")?;
        let meta: DeltaMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Malformed(format!("metadata: {e}")))?;
        let mut offset = 0;
        let arrays = c.take_tensors(&mut offset, &meta.manifest)?;
        if offset != c.payload.len() {
            return Err(Error::Malformed(format!("{} trailing values", c.payload.len() - offset)));
        }
        Ok(Delta { fingerprint: meta.fingerprint, manifest: meta.manifest, arrays, client: meta.client, steps: meta.steps })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params(seed: u64) -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, n_enc_layers: 1, n_dec_layers: 1, ..ModelConfig::small(12) };
        let p = ModelParams::init(&cfg, seed).unwrap();
        (cfg, p)
    }

    fn constant(cfg: &ModelConfig, x: f64) -> ModelParams {
        let mut p = ModelParams::zeros(cfg).unwrap();
        p.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(x));
        p
    }

    #[test]
    fn zero_and_scalar_deltas() {
        let (cfg, base) = params(1);
        let d = export_delta(&base, &base, "a", 0).unwrap();
        assert!(d.arrays.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
        let d = export_delta(&constant(&cfg, 1.0), &constant(&cfg, 4.0), "a", 1).unwrap();
        assert!(d.arrays.iter().all(|t| t.data().iter().all(|&x| x == 3.0)));
    }

    #[test]
    fn mean_of_two() {
        let (cfg, _) = params(1);
        let zero = constant(&cfg, 0.0);
        let d1 = export_delta(&zero, &constant(&cfg, 1.0), "a", 1).unwrap();
        let d3 = export_delta(&zero, &constant(&cfg, 3.0), "b", 1).unwrap();
        let m = merge(&zero, &[d1.clone(), d3.clone()], None).unwrap();
        assert!(m.tensors().iter().all(|t| t.data().iter().all(|&x| x == 2.0)));
        let same = merge(&zero, &[d1.clone(), d1.clone(), d1.clone()], None).unwrap();
        assert_eq!(same, merge(&zero, &[d1.clone()], None).unwrap());
        let w = merge(&zero, &[d1.clone(), d3.clone()], Some(&[0.25, 0.75])).unwrap();
        assert!(w.tensors()[0].data().iter().all(|&x| x == 2.5));
        assert!(merge(&zero, &[d1.clone(), d3.clone()], Some(&[0.5, 0.6])).is_err());
        assert!(merge(&zero, &[d1, d3], Some(&[-0.5, 1.5])).is_err());
        assert!(merge(&zero, &[], None).is_err());
    }

    #[test]
    fn reconstructs_tuned_and_rejects_foreign() {
        let (cfg, base) = params(1);
        let (_, tuned) = params(2);
        let d = export_delta(&base, &tuned, "c", 10).unwrap();
        let m = merge(&base, &[d.clone()], None).unwrap();
        for (a, b) in m.tensors().iter().zip(tuned.tensors()) {
            assert!(a.max_abs_diff(b) <= 1e-15);
        }
        let back = Delta::from_bytes(&d.to_bytes().unwrap()).unwrap();
        assert_eq!((back.client.as_str(), back.steps), ("c", 10));
        let m = merge(&base, &[back], None).unwrap();
        for (a, b) in m.tensors().iter().zip(tuned.tensors()) {
            assert!(a.max_abs_diff(b) <= 1e-6);
        }
        let other = ModelParams::init(&ModelConfig { d_model: 12, ..cfg }, 0).unwrap();
        assert!(matches!(export_delta(&base, &other, "x", 0), Err(Error::Fingerprint { .. })));
        let foreign = export_delta(&other, &other, "x", 0).unwrap();
        assert!(matches!(merge(&base, &[foreign], None), Err(Error::Fingerprint { .. })));
        let mut bytes = d.to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"RPTC");
        assert_eq!(Delta::from_bytes(&bytes).unwrap_err().to_string(), "not an RPT delta");
    }
}
