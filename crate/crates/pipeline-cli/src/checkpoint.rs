//! Single-file checkpoints: magic, version, config JSON, named f64
//! tensors, then the optimizer moments. Everything little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use fusedet::model::Model;
use numcore::{Adam, AdamConfig, Tensor};

use crate::config::RunConfig;
use crate::{CliError, Result};

const MAGIC: &[u8; 8] = b"FUSEDET1";
const VERSION: u32 = 1;

fn io_err(path: &Path, detail: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {}", path.display(), detail))
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.u32(b.len() as u32)?;
        self.out.write_all(b)
    }
    fn f64s(&mut self, vals: &[f64]) -> std::io::Result<()> {
        for v in vals {
            self.out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inp: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        self.inp.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        let mut b = [0u8; 8];
        self.inp.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn bytes(&mut self) -> std::io::Result<Vec<u8>> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inp.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn f64s(&mut self, len: usize) -> std::io::Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        self.inp.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Writes config, weights, and optimizer moments as one file.
pub fn save(path: &Path, cfg: &RunConfig, model: &Model, adam: &Adam) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = Writer { out: std::io::BufWriter::new(file) };
    let result = (|| -> std::io::Result<()> {
        w.out.write_all(MAGIC)?;
        w.u32(VERSION)?;
        w.bytes(serde_json::to_string(cfg).expect("config serializes").as_bytes())?;
        w.u64(adam.step_count())?;

        let mut params: Vec<(String, Tensor)> = Vec::new();
        model.visit_params(&mut |name, t| params.push((name.to_string(), t.clone())));
        w.u32(params.len() as u32)?;
        for (name, t) in &params {
            w.bytes(name.as_bytes())?;
            w.u32(t.rank() as u32)?;
            for &d in t.shape() {
                w.u32(d as u32)?;
            }
            w.f64s(t.data())?;
        }

        let state: Vec<(&str, &[f64], &[f64])> = adam.state().collect();
        w.u32(state.len() as u32)?;
        for (name, m, v) in state {
            w.bytes(name.as_bytes())?;
            w.u32(m.len() as u32)?;
            w.f64s(m)?;
            w.f64s(v)?;
        }
        w.out.flush()
    })();
    result.map_err(|e| io_err(path, e))
}

/// Reads a checkpoint back: rebuilds the model from the stored config,
/// overwrites its weights, and re-attaches the optimizer state. Returns
/// the completed step count as well.
pub fn load(path: &Path) -> Result<(RunConfig, Model, Adam, u64)> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader { inp: std::io::BufReader::new(file) };

    let mut magic = [0u8; 8];
    r.inp.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(io_err(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32().map_err(|e| io_err(path, e))?;
    if version != VERSION {
        return Err(io_err(path, format!("unsupported checkpoint version {}", version)));
    }
    let cfg_bytes = r.bytes().map_err(|e| io_err(path, e))?;
    let cfg: RunConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| io_err(path, format!("embedded config: {}", e)))?;
    let step = r.u64().map_err(|e| io_err(path, e))?;

    let n_params = r.u32().map_err(|e| io_err(path, e))? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes().map_err(|e| io_err(path, e))?)
            .map_err(|_| io_err(path, "parameter name is not UTF-8"))?;
        let rank = r.u32().map_err(|e| io_err(path, e))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().map_err(|e| io_err(path, e))? as usize);
        }
        let len = shape.iter().product::<usize>();
        let data = r.f64s(len).map_err(|e| io_err(path, e))?;
        let t = Tensor::new(shape, data).map_err(|e| io_err(path, e))?;
        tensors.insert(name, t);
    }

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut missing = Vec::new();
    let mut mismatch = Vec::new();
    model.visit_params_mut(&mut |name, t| match tensors.remove(name) {
        None => missing.push(name.to_string()),
        Some(stored) if stored.shape() != t.shape() => mismatch.push(name.to_string()),
        Some(stored) => *t = stored,
    });
    if !missing.is_empty() {
        return Err(io_err(path, format!("missing parameters: {}", missing.join(", "))));
    }
    if !mismatch.is_empty() {
        return Err(io_err(path, format!("shape mismatch for: {}", mismatch.join(", "))));
    }
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.into_keys().collect();
        return Err(io_err(path, format!("unknown parameters: {}", extra.join(", "))));
    }

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let n_moments = r.u32().map_err(|e| io_err(path, e))? as usize;
    for _ in 0..n_moments {
        let name = String::from_utf8(r.bytes().map_err(|e| io_err(path, e))?)
            .map_err(|_| io_err(path, "moment name is not UTF-8"))?;
        let len = r.u32().map_err(|e| io_err(path, e))? as usize;
        let m = r.f64s(len).map_err(|e| io_err(path, e))?;
        let v = r.f64s(len).map_err(|e| io_err(path, e))?;
        adam.restore(&name, m, v, step).map_err(|e| io_err(path, e))?;
    }

    Ok((cfg, model, adam, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fusedet::model::ModelConfig;

    #[test]
    fn checkpoint_round_trips_weights_and_moments() {
        let run = RunConfig {
            model: ModelConfig::micro(2),
            learning_rate: 1e-3,
            ..RunConfig::default()
        };
        let model = Model::new(run.model.clone(), 3).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: run.learning_rate, ..AdamConfig::default() });
        // Fabricate one step of state on a couple of parameters.
        adam.begin_step();
        let mut touched = 0;
        let mut model = model;
        let mut failed = None;
        model.visit_params_mut(&mut |name, t| {
            if touched < 2 {
                let g = vec![0.01; t.len()];
                if let Err(e) = adam.update(name, t, &g) {
                    failed = Some(e);
                }
                touched += 1;
            }
        });
        assert!(failed.is_none());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save(&path, &run, &model, &adam).unwrap();
        let (cfg2, model2, adam2, step) = load(&path).unwrap();

        assert_eq!(cfg2, run);
        assert_eq!(step, 1);
        assert_eq!(adam2.step_count(), 1);
        let mut originals: Vec<(String, Tensor)> = Vec::new();
        model.visit_params(&mut |n, t| originals.push((n.to_string(), t.clone())));
        let mut restored: Vec<(String, Tensor)> = Vec::new();
        model2.visit_params(&mut |n, t| restored.push((n.to_string(), t.clone())));
        assert_eq!(originals.len(), restored.len());
        for ((n1, t1), (n2, t2)) in originals.iter().zip(&restored) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "weights differ for {}", n1);
        }
        let state1: Vec<(String, Vec<f64>, Vec<f64>)> =
            adam.state().map(|(n, m, v)| (n.to_string(), m.to_vec(), v.to_vec())).collect();
        let state2: Vec<(String, Vec<f64>, Vec<f64>)> =
            adam2.state().map(|(n, m, v)| (n.to_string(), m.to_vec(), v.to_vec())).collect();
        assert_eq!(state1, state2);
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(load(&path).err().unwrap().to_string().contains("magic"));

        std::fs::write(&path, b"FUSEDET1\x01").unwrap();
        assert!(load(&path).is_err());
    }
}
