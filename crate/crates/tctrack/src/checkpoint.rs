//! Binary container for named tensors (checkpoints and tracker state).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   : 4 bytes, b"TCKP"
//! version : u32 (currently 1)
//! count   : u64 record count
//! record  : name_len u32, name (UTF-8), ndim u32, ndim x extent u64,
//!           numel x f64 (row-major data)
//! ```
//!
//! Values are stored as raw `f64` bits, so a save/load round trip is
//! bit-exact — required for deterministic resume and for the
//! byte-identical rerun guarantees of training and tracking.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: [u8; 4] = *b"TCKP";
const VERSION: u32 = 1;
/// Guards against absurd allocations when a corrupt header lies about
/// sizes.
const MAX_NAME: usize = 4096;
const MAX_NDIM: usize = 8;
const MAX_NUMEL: u64 = 1 << 32;

/// Writes named tensors in iteration order.
pub fn save_records<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let records: Vec<(&str, &Tensor)> = records.into_iter().collect();
    let wr = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| io_err(path, e))
    };
    wr(&mut w, &MAGIC)?;
    wr(&mut w, &VERSION.to_le_bytes())?;
    wr(&mut w, &(records.len() as u64).to_le_bytes())?;
    for (name, t) in records {
        wr(&mut w, &(name.len() as u32).to_le_bytes())?;
        wr(&mut w, name.as_bytes())?;
        wr(&mut w, &(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            wr(&mut w, &(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            wr(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads all records back, in stored order.
pub fn load_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(path, &mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}, expected {MAGIC:?}",
            path.display()
        )));
    }
    let version = read_u32(path, &mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported container version {version} (supported: {VERSION})",
            path.display()
        )));
    }
    let count = read_u64(path, &mut r)?;
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = read_u32(path, &mut r)? as usize;
        if name_len > MAX_NAME {
            return Err(Error::Format(format!(
                "{}: record name length {name_len} exceeds limit",
                path.display()
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(path, &mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| {
            Error::Format(format!("{}: record name is not UTF-8", path.display()))
        })?;
        let ndim = read_u32(path, &mut r)? as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::Format(format!(
                "{}: record {name:?} has unsupported rank {ndim}",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let d = read_u64(path, &mut r)?;
            numel = numel.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        if numel > MAX_NUMEL {
            return Err(Error::Format(format!(
                "{}: record {name:?} claims {numel} elements",
                path.display()
            )));
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for slot in data.iter_mut() {
            read_exact(path, &mut r, &mut buf)?;
            *slot = f64::from_le_bytes(buf);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Saves every parameter of a store, in registration order.
pub fn save_store(path: &Path, store: &ParamStore) -> Result<()> {
    save_records(path, store.iter().map(|p| (p.name.as_str(), &p.value)))
}

/// Loads parameter values into an already-registered store. The file
/// must carry exactly the registered parameter set with matching shapes;
/// any missing, extra, or reshaped records are listed in the error.
pub fn load_store(path: &Path, store: &mut ParamStore) -> Result<()> {
    let records = load_records(path)?;
    let mut problems: Vec<String> = Vec::new();
    let mut seen: Vec<&str> = Vec::with_capacity(records.len());
    for (name, tensor) in &records {
        seen.push(name);
        if !store.contains(name) {
            problems.push(format!("extra record {name:?}"));
        } else if store.get(name)?.value.shape() != tensor.shape() {
            problems.push(format!(
                "shape mismatch for {name:?}: file has {:?}, model expects {:?}",
                tensor.shape(),
                store.get(name)?.value.shape()
            ));
        }
    }
    for p in store.iter() {
        if !seen.contains(&p.name.as_str()) {
            problems.push(format!("missing record {:?}", p.name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Format(format!(
            "{}: checkpoint does not match the model ({})",
            path.display(),
            problems.join("; ")
        )));
    }
    for (name, tensor) in records {
        store.get_mut(&name)?.value = tensor;
    }
    Ok(())
}

fn read_exact(path: &Path, r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: truncated container", path.display()))
        } else {
            io_err(path, e)
        }
    })
}

fn read_u32(path: &Path, r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(path, r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(path: &Path, r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(path, r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("tctrack-checkpoint-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut store = ParamStore::new(42);
        store.register("a/w", &[3, 4], Init::TruncNormal { std: 0.02 }).unwrap();
        store.register("a/b", &[1, 4], Init::Zeros).unwrap();
        store.register("conv/w", &[2, 3, 3, 3], Init::TruncNormal { std: 0.1 }).unwrap();
        let path = tmpfile("roundtrip.tckp");
        save_store(&path, &store).unwrap();

        let mut reloaded = ParamStore::new(7); // different seed on purpose
        reloaded.register("a/w", &[3, 4], Init::Zeros).unwrap();
        reloaded.register("a/b", &[1, 4], Init::Zeros).unwrap();
        reloaded.register("conv/w", &[2, 3, 3, 3], Init::Zeros).unwrap();
        load_store(&path, &mut reloaded).unwrap();
        for (p, q) in store.iter().zip(reloaded.iter()) {
            assert_eq!(p.name, q.name);
            let same = p
                .value
                .data()
                .iter()
                .zip(q.value.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "values of {} changed across the round trip", p.name);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = tmpfile("badmagic.tckp");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = load_records(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut store = ParamStore::new(1);
        store.register("w", &[8, 8], Init::Ones).unwrap();
        let path = tmpfile("trunc.tckp");
        save_store(&path, &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_records(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let path = tmpfile("version.tckp");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TCKP");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_records(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn load_lists_missing_extra_and_mismatched() {
        let mut on_disk = ParamStore::new(1);
        on_disk.register("keep", &[2, 2], Init::Ones).unwrap();
        on_disk.register("extra", &[2, 2], Init::Ones).unwrap();
        on_disk.register("reshaped", &[2, 3], Init::Ones).unwrap();
        let path = tmpfile("mismatch.tckp");
        save_store(&path, &on_disk).unwrap();

        let mut model = ParamStore::new(2);
        model.register("keep", &[2, 2], Init::Zeros).unwrap();
        model.register("reshaped", &[3, 2], Init::Zeros).unwrap();
        model.register("missing", &[1, 1], Init::Zeros).unwrap();
        let err = load_store(&path, &mut model).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("extra record \"extra\""), "{msg}");
        assert!(msg.contains("shape mismatch for \"reshaped\""), "{msg}");
        assert!(msg.contains("missing record \"missing\""), "{msg}");
        // And a failed load must not have partially overwritten values.
        assert_eq!(model.get("keep").unwrap().value.data(), &[0.0; 4]);
    }
}
