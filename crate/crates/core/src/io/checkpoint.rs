//! Binary parameter checkpoints.
//!
//! Layout: the magic bytes `SPNAS1`, then entries until end of file. Each
//! entry is a `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u64`
//! dimensions and the little-endian `f64` payload. All integers are
//! little-endian.
//!
//! Supernet checkpoints add a `meta.json` entry whose rank-1 payload holds
//! the UTF-8 bytes of a JSON document (macro config, indicator config and
//! provenance), one byte per element, so the file stays a flat list of
//! tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::Provenance;
use super::write_atomic;
use crate::superkernel::IndicatorConfig;
use crate::supernet::{build_supernet, MacroConfig, Supernet};
use crate::tensor::{ParamStore, Tensor};
use crate::{seeded_rng, Error, Result};

pub const MAGIC: &[u8; 6] = b"SPNAS1";
const META: &str = "meta.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            entries: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.get(id).detached()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(r.error(0, "not a checkpoint (bad magic)"));
        }
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        while r.pos < bytes.len() {
            let start = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error(start, "name is not UTF-8"))?
                .to_string();
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(r.error(start, format!("duplicate entry '{name}'")));
            }
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| r.error(start, format!("'{name}': implausible shape {shape:?}")))?;
            let payload = r.take(count * 8, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Checkpoint { entries })
    }

    /// Overwrite every parameter in `store` by name. The entry set must match
    /// exactly, up to entries named `meta.*`.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let params: Vec<_> = self.entries.iter().filter(|(n, _)| !n.starts_with("meta.")).collect();
        if params.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                params.len(),
                store.len()
            )));
        }
        for (name, t) in params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter '{name}' not in model")))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::shape("restore", "parameter", format!("{:?}", dst.shape()), format!("{name} {:?}", t.shape())));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.origin.display().to_string(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error(self.bytes.len(), format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetMeta {
    #[serde(rename = "macro")]
    pub macro_cfg: MacroConfig,
    pub indicator: IndicatorConfig,
    pub provenance: Option<Provenance>,
}

pub fn supernet_checkpoint(sn: &Supernet, provenance: Option<Provenance>) -> Checkpoint {
    let meta = SupernetMeta {
        macro_cfg: sn.macro_cfg.clone(),
        indicator: sn.indicator,
        provenance,
    };
    let json = serde_json::to_vec(&meta).expect("meta serializes");
    let mut ck = Checkpoint::from_store(&sn.store);
    let bytes = Tensor::new(&[json.len()], json.iter().map(|&b| f64::from(b)).collect()).expect("rank-1 shape");
    ck.entries.push((META.to_string(), bytes));
    ck
}

/// Rebuild a supernet from a checkpoint written by [`supernet_checkpoint`].
pub fn supernet_from_checkpoint(ck: &Checkpoint) -> Result<(Supernet, SupernetMeta)> {
    let raw = ck
        .get(META)
        .ok_or_else(|| Error::Config(format!("checkpoint has no {META} entry")))?;
    let bytes: Vec<u8> = raw
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Config(format!("{META} holds a non-byte value {v}")))
            }
        })
        .collect::<Result<_>>()?;
    let meta: SupernetMeta = serde_json::from_slice(&bytes)?;
    let mut sn = build_supernet(&meta.macro_cfg, meta.indicator, &mut seeded_rng(0))?;
    ck.restore_into(&mut sn.store)?;
    Ok((sn, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", ParamKind::Weight, Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 0.1]).unwrap());
        s.add("t", ParamKind::Threshold, Tensor::scalar(0.25));
        s.add("ü.name", ParamKind::Buffer, Tensor::filled(&[3], 2.0));
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = Checkpoint::from_store(&store());
        let bytes = ck.encode();
        assert_eq!(&bytes[..6], b"SPNAS1");
        let back = Checkpoint::decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.entries.len(), 3);
        for ((na, ta), (nb, tb)) in ck.entries.iter().zip(&back.entries) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
        assert_eq!(bytes, back.encode());
    }

    #[test]
    fn layout_of_a_single_entry() {
        let mut s = ParamStore::new();
        s.add("w", ParamKind::Weight, Tensor::new(&[1], vec![1.0]).unwrap());
        let bytes = Checkpoint::from_store(&s).encode();
        let mut want = b"SPNAS1".to_vec();
        want.extend([1, 0, 0, 0, b'w', 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncation_and_bad_magic_report_offsets() {
        let bytes = Checkpoint::from_store(&store()).encode();
        for cut in [3, 10, bytes.len() - 1] {
            match Checkpoint::decode(&bytes[..cut], Path::new("x")) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad, Path::new("x")), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let ck = Checkpoint::from_store(&store());
        let mut target = store();
        target.get_mut(target.find("t").unwrap()).data_mut()[0] = 9.0;
        ck.restore_into(&mut target).unwrap();
        assert_eq!(target.get(target.find("t").unwrap()).item(), 0.25);

        let mut other = ParamStore::new();
        other.add("a", ParamKind::Weight, Tensor::zeros(&[3, 2]));
        other.add("t", ParamKind::Threshold, Tensor::scalar(0.0));
        other.add("ü.name", ParamKind::Buffer, Tensor::filled(&[3], 2.0));
        assert!(ck.restore_into(&mut other).is_err());
    }

    #[test]
    fn supernet_reload_reproduces_logits() {
        use crate::supernet::GatePlan;
        use crate::tensor::Tape;
        let cfg = MacroConfig::tiny();
        let mut sn = build_supernet(&cfg, IndicatorConfig::default(), &mut seeded_rng(5)).unwrap();
        let k = sn.kernel(0).clone();
        k.set_threshold(&mut sn.store, crate::superkernel::GateKind::K5, 1e9);
        let prov = Provenance {
            seed: 5,
            lambda: 0.5,
            search_steps: 3,
        };
        let ck = supernet_checkpoint(&sn, Some(prov.clone()));
        let back = Checkpoint::decode(&ck.encode(), Path::new("x")).unwrap();
        let (sn2, meta) = supernet_from_checkpoint(&back).unwrap();
        assert_eq!(meta.provenance, Some(prov));
        assert_eq!(sn.derive().unwrap(), sn2.derive().unwrap());
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| (i as f64 * 0.37).sin());
        let run = |s: &Supernet| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let out = s.forward(&mut t, xv, GatePlan::Indicators(s.indicator), &[]).unwrap();
            t.value(out.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(&sn), run(&sn2));
    }
}
