//! Binary tensor container used for checkpoints and optimizer state.
//!
//! Layout: the 5-byte magic `VLAM1`, then a u64 record count, then records
//! sorted by name. Each record is `name_len: u64, name: utf-8 bytes,
//! rank: u64, extents: u64 each, data: f32 little-endian`. Values are always
//! stored as f32 regardless of the in-memory scalar type, so an f32 model
//! round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};

const MAGIC: &[u8; 5] = b"VLAM1";

/// One named tensor in a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Writes records sorted by name. Input order does not matter.
pub fn write_tensors(path: &Path, mut records: Vec<NamedTensor>) -> Result<()> {
    records.sort_by(|a, b| a.name.cmp(&b.name));
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io_err)?;
    for rec in &records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&(rec.shape.len() as u64).to_le_bytes()).map_err(io_err)?;
        for &e in &rec.shape {
            w.write_all(&(e as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in &rec.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Reads every record of a container file.
pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);

    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let count = read_u64(&mut r, path)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r, path)? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!(
                "implausible name length {name_len} in {}",
                path.display()
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("non-utf8 name in {}: {e}", path.display())))?;
        let rank = read_u64(&mut r, path)? as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::Checkpoint(format!(
                "record {name} has rank {rank}, expected 1 or 2"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(io_err)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push(NamedTensor { name, shape, data });
    }
    Ok(records)
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(u64::from_le_bytes(buf))
}

/// Saves every parameter of a store.
pub fn save_params<F: Real>(path: &Path, store: &ParamStore<F>) -> Result<()> {
    let records = store
        .ids_by_name()
        .into_iter()
        .map(|id| NamedTensor {
            name: store.name(id).to_string(),
            shape: store.value(id).shape().to_vec(),
            data: store.value(id).data().iter().map(|&v| v.to_f64() as f32).collect(),
        })
        .collect();
    write_tensors(path, records)
}

/// Loads a checkpoint into a store built with the identical architecture.
/// The file must contain exactly the store's parameter names and shapes.
pub fn load_params<F: Real>(path: &Path, store: &mut ParamStore<F>) -> Result<()> {
    let records = read_tensors(path)?;
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} has {} records, model has {} parameters",
            path.display(),
            records.len(),
            store.len()
        )));
    }
    for rec in records {
        let id = store.lookup(&rec.name).ok_or_else(|| {
            Error::Checkpoint(format!("unexpected parameter {} in {}", rec.name, path.display()))
        })?;
        if store.value(id).shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} in file, {:?} in model",
                rec.name,
                rec.shape,
                store.value(id).shape()
            )));
        }
        let data = rec.data.iter().map(|&v| F::from_f64(v as f64)).collect();
        store.set_value(id, Tensor::from_vec(rec.shape, data));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn params_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vlam");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        store.add(
            "z.last",
            crate::numerics::params::xavier_uniform(&mut rng, 3, 4),
            true,
        );
        store.add(
            "a.first",
            crate::numerics::params::xavier_uniform(&mut rng, 2, 2),
            true,
        );
        save_params(&path, &store).unwrap();

        let mut restored = ParamStore::<f32>::new();
        restored.add("z.last", Tensor::zeros(vec![3, 4]), true);
        restored.add("a.first", Tensor::zeros(vec![2, 2]), true);
        load_params(&path, &mut restored).unwrap();
        for (id_a, id_b) in store.ids_by_name().iter().zip(restored.ids_by_name()) {
            assert_eq!(store.value(*id_a).data(), restored.value(id_b).data());
        }
    }

    #[test]
    fn records_are_stored_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vlam");
        write_tensors(
            &path,
            vec![
                NamedTensor {
                    name: "zz".into(),
                    shape: vec![1],
                    data: vec![1.0],
                },
                NamedTensor {
                    name: "aa".into(),
                    shape: vec![1],
                    data: vec![2.0],
                },
            ],
        )
        .unwrap();
        let records = read_tensors(&path).unwrap();
        assert_eq!(records[0].name, "aa");
        assert_eq!(records[1].name, "zz");
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vlam");
        write_tensors(
            &path,
            vec![NamedTensor {
                name: "w".into(),
                shape: vec![2, 2],
                data: vec![0.0; 4],
            }],
        )
        .unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(vec![3, 2]), true);
        let err = load_params(&path, &mut store).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn load_rejects_missing_and_extra_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vlam");
        write_tensors(
            &path,
            vec![NamedTensor {
                name: "other".into(),
                shape: vec![1],
                data: vec![0.0],
            }],
        )
        .unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(vec![1]), true);
        assert!(load_params(&path, &mut store).is_err());
    }

    #[test]
    fn truncated_file_is_a_checkpoint_error_not_a_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vlam");
        std::fs::write(&path, b"VLAM1\x01\x00").unwrap();
        assert!(read_tensors(&path).is_err());
    }
}
