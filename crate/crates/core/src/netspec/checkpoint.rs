//! Checkpoint files.
//!
//! A checkpoint is a pair of files:
//!
//! * `<name>.bin`: back-to-back records, all integers little-endian `u64`:
//!   `name_len, name bytes (UTF-8), ndim, dims[ndim], count, count × f64 (LE)`.
//! * `<name>.manifest.txt`: line-oriented text,
//!   ```text
//!   crfgan-checkpoint 1
//!   fingerprint <16 hex digits>
//!   meta <key> <value to end of line>
//!   tensor <name> <d0xd1x…> <byte offset of record> <count>
//!   ```
//!
//! Both files are written to a temporary name and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const MAGIC: &str = "crfgan-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("manifest.txt")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take_u64(buf: &[u8], at: &mut usize) -> Result<u64> {
    let b = buf
        .get(*at..*at + 8)
        .ok_or_else(|| Error::Integrity("checkpoint record truncated".into()))?;
    *at += 8;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))
    }

    pub fn write(&self, bin: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        let mut manifest = format!("{MAGIC}\nfingerprint {:016x}\n", self.fingerprint);
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Parameter(format!("invalid meta entry {k:?}")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for t in &self.tensors {
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::Parameter(format!("tensor {} dims/data mismatch", t.name)));
            }
            let dims = t
                .dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            manifest.push_str(&format!(
                "tensor {} {} {} {}\n",
                t.name,
                if dims.is_empty() { "scalar".into() } else { dims },
                bytes.len(),
                t.data.len()
            ));
            bytes.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
            bytes.extend_from_slice(t.name.as_bytes());
            bytes.extend_from_slice(&(t.dims.len() as u64).to_le_bytes());
            for d in &t.dims {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            bytes.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(bin, &bytes)?;
        write_atomic(&manifest_path(bin), manifest.as_bytes())
    }

    pub fn read(bin: &Path) -> Result<Checkpoint> {
        let mp = manifest_path(bin);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Format(format!("{} is not a checkpoint manifest", mp.display())));
        }
        let mut ck = Checkpoint::default();
        for line in lines {
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "fingerprint" => {
                    ck.fingerprint = u64::from_str_radix(rest.trim(), 16)
                        .map_err(|e| Error::Format(format!("bad fingerprint: {e}")))?;
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(Error::Format(format!("bad tensor line {line:?}")));
                    }
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
                    };
                    let dims: Vec<usize> = if f[1] == "scalar" {
                        vec![]
                    } else {
                        f[1].split('x').map(parse).collect::<Result<_>>()?
                    };
                    let mut at = parse(f[2])?;
                    let count = parse(f[3])?;
                    let name_len = take_u64(&bytes, &mut at)? as usize;
                    let name = bytes
                        .get(at..at + name_len)
                        .ok_or_else(|| Error::Integrity("record name truncated".into()))?;
                    if name != f[0].as_bytes() {
                        return Err(Error::Integrity(format!("record at {} is not {}", f[2], f[0])));
                    }
                    at += name_len;
                    let ndim = take_u64(&bytes, &mut at)? as usize;
                    let rec_dims = (0..ndim)
                        .map(|_| take_u64(&bytes, &mut at).map(|d| d as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let rec_count = take_u64(&bytes, &mut at)? as usize;
                    if rec_dims != dims || rec_count != count {
                        return Err(Error::Integrity(format!("record {} disagrees with manifest", f[0])));
                    }
                    let raw = bytes
                        .get(at..at + 8 * count)
                        .ok_or_else(|| Error::Integrity(format!("record {} truncated", f[0])))?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect();
                    ck.tensors.push(NamedTensor {
                        name: f[0].to_string(),
                        dims,
                        data,
                    });
                }
                "" => {}
                other => return Err(Error::Format(format!("unknown manifest entry {other:?}"))),
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            fingerprint: 0xdead_beef_0123_4567,
            meta: vec![("iteration".into(), "17".into()), ("config".into(), "{\"a\": 1}".into())],
            tensors: vec![
                NamedTensor {
                    name: "G1.0.weight".into(),
                    dims: vec![2, 3],
                    data: vec![1.0, -2.5, f64::MIN_POSITIVE, 0.1, 1e300, -0.0],
                },
                NamedTensor {
                    name: "adam.t".into(),
                    dims: vec![],
                    data: vec![3.0],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        let ck = sample();
        ck.write(&p).unwrap();
        let back = Checkpoint::read(&p).unwrap();
        assert_eq!(back.fingerprint, ck.fingerprint);
        assert_eq!(back.meta, ck.meta);
        for (a, b) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let manifest = fs::read_to_string(manifest_path(&p)).unwrap();
        assert!(manifest.contains("tensor G1.0.weight 2x3 0 6\n"));
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        sample().write(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::read(&p), Err(Error::Integrity(_))));
    }
}
