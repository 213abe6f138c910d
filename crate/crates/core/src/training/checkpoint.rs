//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, version byte, then records of
//! `[name_len u32][name][kind u8][payload_len u64][payload]`, all
//! little-endian. Known kinds: 1 = f64 array (u32 ndim, u32 dims, f64
//! data), 2 = u64 scalar, 3 = UTF-8 JSON. Unknown kinds are skipped on
//! read, so later writers can add records without breaking old readers.
//!
//! Arrays are stored as f64; an f32 store round-trips bit-exactly because
//! f32 -> f64 is lossless.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::num::Scalar;
use crate::training::adam::Adam;

const MAGIC: &[u8; 8] = b"MSTTSCKP";
const VERSION: u8 = 1;

const KIND_ARRAY_F64: u8 = 1;
const KIND_SCALAR_U64: u8 = 2;
const KIND_JSON: u8 = 3;

/// In-memory view of a checkpoint file.
#[derive(Default)]
pub struct Checkpoint {
    pub arrays: IndexMap<String, (Vec<usize>, Vec<f64>)>,
    pub scalars: IndexMap<String, u64>,
    pub json: IndexMap<String, String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        for (name, (dims, data)) in &self.arrays {
            let payload_len = 4 + 4 * dims.len() + 8 * data.len();
            write_record_header(&mut w, name, KIND_ARRAY_F64, payload_len as u64)?;
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for &d in dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for (name, &v) in &self.scalars {
            write_record_header(&mut w, name, KIND_SCALAR_U64, 8)?;
            w.write_all(&v.to_le_bytes())?;
        }
        for (name, s) in &self.json {
            write_record_header(&mut w, name, KIND_JSON, s.len() as u64)?;
            w.write_all(s.as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::missing(format!("checkpoint {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)?;
        if ver[0] != VERSION {
            return Err(Error::format(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ver[0]
            )));
        }

        let mut ckpt = Checkpoint::default();
        loop {
            let mut len4 = [0u8; 4];
            match r.read_exact(&mut len4) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len4) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::format("checkpoint record name is not UTF-8"))?;
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            let mut len8 = [0u8; 8];
            r.read_exact(&mut len8)?;
            let payload_len = u64::from_le_bytes(len8) as usize;

            match kind[0] {
                KIND_ARRAY_F64 => {
                    r.read_exact(&mut len4)?;
                    let ndim = u32::from_le_bytes(len4) as usize;
                    let mut dims = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        r.read_exact(&mut len4)?;
                        dims.push(u32::from_le_bytes(len4) as usize);
                    }
                    let count: usize = dims.iter().product();
                    let mut data = Vec::with_capacity(count);
                    let mut f8 = [0u8; 8];
                    for _ in 0..count {
                        r.read_exact(&mut f8)?;
                        data.push(f64::from_le_bytes(f8));
                    }
                    ckpt.arrays.insert(name, (dims, data));
                }
                KIND_SCALAR_U64 => {
                    r.read_exact(&mut len8)?;
                    ckpt.scalars.insert(name, u64::from_le_bytes(len8));
                }
                KIND_JSON => {
                    let mut buf = vec![0u8; payload_len];
                    r.read_exact(&mut buf)?;
                    let s = String::from_utf8(buf)
                        .map_err(|_| Error::format("checkpoint JSON record is not UTF-8"))?;
                    ckpt.json.insert(name, s);
                }
                _ => {
                    // Forward compatibility: skip unknown records.
                    std::io::copy(
                        &mut r.by_ref().take(payload_len as u64),
                        &mut std::io::sink(),
                    )?;
                }
            }
        }
        Ok(ckpt)
    }

    pub fn put_array<T: Scalar>(&mut self, name: impl Into<String>, arr: &ArrayD<T>) {
        self.arrays.insert(
            name.into(),
            (
                arr.shape().to_vec(),
                arr.iter().map(|v| v.as_f64()).collect(),
            ),
        );
    }

    pub fn take_array<T: Scalar>(&self, name: &str) -> Result<ArrayD<T>> {
        let (dims, data) = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::missing(format!("checkpoint record '{name}'")))?;
        let values: Vec<T> = data.iter().map(|&v| T::of(v)).collect();
        ArrayD::from_shape_vec(IxDyn(dims), values).map_err(|e| Error::format(e.to_string()))
    }
}

fn write_record_header(w: &mut impl Write, name: &str, kind: u8, payload_len: u64) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[kind])?;
    w.write_all(&payload_len.to_le_bytes())?;
    Ok(())
}

/// Everything a training run needs to stop and continue bit-exactly.
pub struct TrainState<T: Scalar> {
    pub store: ParamStore<T>,
    pub adam: Option<Adam<T>>,
    /// 1, 2 or 3.
    pub stage: u8,
    /// Stage-1 level phase index (0 elsewhere).
    pub phase: usize,
    /// Completed steps within the current phase/stage.
    pub steps_done: usize,
    pub complete: bool,
    pub schedule_json: String,
    pub config_json: String,
    pub inventory: Vec<String>,
}

pub fn save_train_state<T: Scalar>(path: &Path, state: &TrainState<T>) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    for (name, arr) in state.store.iter() {
        ckpt.put_array(format!("param.{name}"), arr);
    }
    if let Some(adam) = &state.adam {
        let (m, v, t) = adam.state();
        for (name, arr) in m {
            ckpt.put_array(format!("opt.m.{name}"), arr);
        }
        for (name, arr) in v {
            ckpt.put_array(format!("opt.v.{name}"), arr);
        }
        ckpt.scalars.insert("opt.t".into(), t);
    }
    ckpt.scalars
        .insert("train.stage".into(), state.stage as u64);
    ckpt.scalars
        .insert("train.phase".into(), state.phase as u64);
    ckpt.scalars
        .insert("train.steps_done".into(), state.steps_done as u64);
    ckpt.scalars
        .insert("train.complete".into(), state.complete as u64);
    ckpt.json
        .insert("schedule".into(), state.schedule_json.clone());
    ckpt.json.insert("config".into(), state.config_json.clone());
    ckpt.json.insert(
        "inventory".into(),
        serde_json::to_string(&state.inventory).map_err(|e| Error::format(e.to_string()))?,
    );
    ckpt.save(path)
}

pub fn load_train_state<T: Scalar>(
    path: &Path,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<TrainState<T>> {
    let ckpt = Checkpoint::load(path)?;
    let mut store = ParamStore::<T>::new();
    let mut m: IndexMap<String, ArrayD<T>> = IndexMap::new();
    let mut v: IndexMap<String, ArrayD<T>> = IndexMap::new();
    for name in ckpt.arrays.keys() {
        if let Some(p) = name.strip_prefix("param.") {
            store.insert(p, ckpt.take_array::<T>(name)?);
        } else if let Some(p) = name.strip_prefix("opt.m.") {
            m.insert(p.to_string(), ckpt.take_array::<T>(name)?);
        } else if let Some(p) = name.strip_prefix("opt.v.") {
            v.insert(p.to_string(), ckpt.take_array::<T>(name)?);
        }
    }
    let adam = if let Some(&t) = ckpt.scalars.get("opt.t") {
        Some(Adam::from_state(beta1, beta2, epsilon, m, v, t))
    } else {
        None
    };
    let scalar = |k: &str| -> Result<u64> {
        ckpt.scalars
            .get(k)
            .copied()
            .ok_or_else(|| Error::missing(format!("checkpoint scalar '{k}'")))
    };
    let json = |k: &str| -> Result<String> {
        ckpt.json
            .get(k)
            .cloned()
            .ok_or_else(|| Error::missing(format!("checkpoint record '{k}'")))
    };
    let inventory: Vec<String> = serde_json::from_str(&json("inventory")?)
        .map_err(|e| Error::format(format!("checkpoint inventory: {e}")))?;
    Ok(TrainState {
        store,
        adam,
        stage: scalar("train.stage")? as u8,
        phase: scalar("train.phase")? as usize,
        steps_done: scalar("train.steps_done")? as usize,
        complete: scalar("train.complete")? != 0,
        schedule_json: json("schedule")?,
        config_json: json("config")?,
        inventory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn container_round_trip_is_bit_exact_for_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut ckpt = Checkpoint::default();
        let arr = ArrayD::from_shape_fn(IxDyn(&[3, 2]), |ix| {
            (ix[0] as f32 * 1.37 - ix[1] as f32 * 0.961).sin()
        });
        ckpt.put_array("param.w", &arr);
        ckpt.scalars.insert("train.stage".into(), 2);
        ckpt.json.insert("schedule".into(), "{\"x\":1}".into());
        ckpt.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        let arr2: ArrayD<f32> = back.take_array("param.w").unwrap();
        for (a, b) in arr.iter().zip(arr2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.scalars["train.stage"], 2);
        assert_eq!(back.json["schedule"], "{\"x\":1}");
    }

    #[test]
    fn unknown_record_kinds_are_skipped() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("fwd.ckpt");
        let mut ckpt = Checkpoint::default();
        ckpt.scalars.insert("train.stage".into(), 1);
        ckpt.save(&path).unwrap();

        // Append a record with an unknown kind.
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap();
        f.write_all(&(6u32).to_le_bytes()).unwrap();
        f.write_all(b"future").unwrap();
        f.write_all(&[42u8]).unwrap();
        f.write_all(&(4u64).to_le_bytes()).unwrap();
        f.write_all(b"\x01\x02\x03\x04").unwrap();
        drop(f);

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.scalars["train.stage"], 1);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"WRONGMAG\x01").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(crate::error::Error::Format(_))
        ));
    }
}
