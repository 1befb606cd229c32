//! Checkpoint files.
//!
//! Binary layout: magic `KSGN`, format version u32 LE, then entries ordered
//! by name, each as name-length u32 / UTF-8 name / rank u32 / dims u32[] /
//! payload f64 LE. A CRC32 of all preceding bytes trails the file.
//!
//! A file holds one or more named sections ("generator", "critic"); entry
//! names are `<section>.<param>`, Adam state lives under
//! `<section>.<param>.adam.m` / `.adam.v`, the shared step count under
//! `<section>.adam.step`, and spectral-norm power-iteration vectors under
//! `<section>.<param>.sn.u`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KSGN";
const VERSION: u32 = 1;

fn checkpoint_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serialize named tensors (already sorted by `BTreeMap`) into file bytes.
fn encode(entries: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn decode(path: &Path, bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 12 {
        return Err(checkpoint_err(path, "file too short"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(checkpoint_err(path, "checksum mismatch"));
    }
    if &body[..4] != MAGIC {
        return Err(checkpoint_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(checkpoint_err(path, format!("unsupported format version {version}")));
    }
    let mut entries = BTreeMap::new();
    let mut pos = 8usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(checkpoint_err(path, "truncated entry"));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < body.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4")) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| checkpoint_err(path, "entry name is not UTF-8"))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4")) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4")) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect();
        entries.insert(name, Tensor::new(shape, data)?);
    }
    Ok(entries)
}

/// Write one or more parameter stores as named sections.
pub fn save(path: &Path, sections: &[(&str, &ParamStore)]) -> Result<()> {
    let mut entries = BTreeMap::new();
    for (section, store) in sections {
        for name in store.names() {
            let value = store.get(name).expect("listed name");
            entries.insert(format!("{section}.{name}"), value.clone());
            let (m, v) = store.adam_state(name).expect("listed name");
            entries.insert(format!("{section}.{name}.adam.m"), m.clone());
            entries.insert(format!("{section}.{name}.adam.v"), v.clone());
            if let Some(u) = store.sn_u(name) {
                entries.insert(format!("{section}.{name}.sn.u"), u.clone());
            }
        }
        entries.insert(
            format!("{section}.adam.step"),
            Tensor::scalar(store.step() as f64),
        );
    }
    let bytes = encode(&entries);
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create checkpoint {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("write checkpoint {}", path.display()), e))?;
    Ok(())
}

/// All raw entries of a checkpoint.
pub fn read_entries(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(format!("open checkpoint {}", path.display()), e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("read checkpoint {}", path.display()), e))?;
    decode(path, &bytes)
}

/// Load one section back into a [`ParamStore`].
pub fn load_section(path: &Path, section: &str) -> Result<ParamStore> {
    let entries = read_entries(path)?;
    let prefix = format!("{section}.");
    let mut store = ParamStore::new();
    let mut adam: Vec<(String, Option<Tensor>, Option<Tensor>)> = Vec::new();
    let mut sn: Vec<(String, Tensor)> = Vec::new();
    let mut step: Option<u64> = None;
    let mut seen = false;
    for (full, tensor) in &entries {
        let Some(rest) = full.strip_prefix(&prefix) else {
            continue;
        };
        seen = true;
        if rest == "adam.step" {
            step = Some(tensor.scalar_value()? as u64);
        } else if let Some(base) = rest.strip_suffix(".adam.m") {
            upsert_adam(&mut adam, base, Some(tensor.clone()), None);
        } else if let Some(base) = rest.strip_suffix(".adam.v") {
            upsert_adam(&mut adam, base, None, Some(tensor.clone()));
        } else if let Some(base) = rest.strip_suffix(".sn.u") {
            sn.push((base.to_string(), tensor.clone()));
        } else {
            store.insert(rest, tensor.clone());
        }
    }
    if !seen {
        return Err(checkpoint_err(path, format!("no section '{section}'")));
    }
    for (name, m, v) in adam {
        if let (Some(m), Some(v)) = (m, v) {
            store.set_adam_state(&name, m, v)?;
        }
    }
    for (name, u) in sn {
        store.set_sn_u(&name, u)?;
    }
    if let Some(step) = step {
        store.set_step(step);
    }
    Ok(store)
}

fn upsert_adam(
    acc: &mut Vec<(String, Option<Tensor>, Option<Tensor>)>,
    name: &str,
    m: Option<Tensor>,
    v: Option<Tensor>,
) {
    if let Some(slot) = acc.iter_mut().find(|(n, _, _)| n == name) {
        if m.is_some() {
            slot.1 = m;
        }
        if v.is_some() {
            slot.2 = v;
        }
    } else {
        acc.push((name.to_string(), m, v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adam_step, init, Activation, AdamHyper, MlpSpec};
    use crate::rng::RngState;

    fn store_bits(s: &ParamStore) -> Vec<(String, Vec<u64>, Vec<u64>, Vec<u64>)> {
        s.names()
            .map(|n| {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                let (m, v) = s.adam_state(n).unwrap();
                (n.to_string(), bits(s.get(n).unwrap()), bits(m), bits(v))
            })
            .collect()
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ksgn");
        let spec = MlpSpec::new(3, vec![4], 2, Activation::Relu);
        let mut gen = init(&spec, &mut RngState::seed_from_u64(1)).unwrap();
        let critic = init(&spec, &mut RngState::seed_from_u64(2)).unwrap();
        // Advance Adam state so it is non-trivial.
        let grads: Vec<(String, Tensor)> = gen
            .names()
            .map(|n| (n.to_string(), Tensor::ones(gen.get(n).unwrap().shape())))
            .collect();
        let h = AdamHyper {
            lr: 0.01,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        };
        adam_step(&mut gen, &grads, &h).unwrap();

        save(&path, &[("generator", &gen), ("critic", &critic)]).unwrap();
        let gen2 = load_section(&path, "generator").unwrap();
        let critic2 = load_section(&path, "critic").unwrap();
        assert_eq!(store_bits(&gen), store_bits(&gen2));
        assert_eq!(store_bits(&critic), store_bits(&critic2));
        assert_eq!(gen2.step(), 1);
        assert_eq!(critic2.step(), 0);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ksgn");
        let spec = MlpSpec::new(2, vec![], 1, Activation::Relu);
        let store = init(&spec, &mut RngState::seed_from_u64(1)).unwrap();
        save(&path, &[("generator", &store)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_section(&path, "generator").unwrap_err().to_string();
        assert!(err.contains("checksum mismatch"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ksgn");
        let mut buf = b"NOPE".to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &buf).unwrap();
        let err = read_entries(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn missing_section_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ksgn");
        let spec = MlpSpec::new(2, vec![], 1, Activation::Relu);
        let store = init(&spec, &mut RngState::seed_from_u64(1)).unwrap();
        save(&path, &[("generator", &store)]).unwrap();
        assert!(load_section(&path, "critic").is_err());
    }

    #[test]
    fn spectral_norm_vectors_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ksgn");
        let spec = MlpSpec {
            spectral_norm: true,
            ..MlpSpec::new(2, vec![3], 1, Activation::LeakyRelu(0.2))
        };
        let store = init(&spec, &mut RngState::seed_from_u64(7)).unwrap();
        save(&path, &[("critic", &store)]).unwrap();
        let loaded = load_section(&path, "critic").unwrap();
        assert_eq!(loaded.sn_u("w0").unwrap(), store.sn_u("w0").unwrap());
        assert_eq!(loaded.sn_u("w1").unwrap(), store.sn_u("w1").unwrap());
    }
}
