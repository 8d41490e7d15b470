//! Checkpoint file: `GSNN-CKPT v1` header, then one record per parameter in
//! name order. Each record is a text line `P<TAB>name<TAB>rows<TAB>cols`
//! followed by `rows*cols` little-endian 8-byte floats. Optimizer state may
//! follow under a `STATE` marker with the same record layout plus per-kind
//! scalars.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NumericError, OptState, ParameterSet, Result, Tensor2};

const HEADER: &str = "GSNN-CKPT v1";

fn write_tensor<W: Write>(w: &mut W, t: &Tensor2) -> Result<()> {
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Tensor2> {
    let mut data = vec![0.0; rows * cols];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)
            .map_err(|_| NumericError::Checkpoint("truncated tensor payload".into()))?;
        *v = f64::from_le_bytes(buf);
    }
    Tensor2::from_vec(rows, cols, data)
}

fn read_line<R: Read>(r: &mut R) -> Result<Option<String>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte)? {
            0 => {
                if line.is_empty() {
                    return Ok(None);
                }
                return Err(NumericError::Checkpoint("missing trailing newline".into()));
            }
            _ => {
                if byte[0] == b'\n' {
                    return Ok(Some(String::from_utf8(line).map_err(|_| {
                        NumericError::Checkpoint("non-UTF8 record line".into())
                    })?));
                }
                line.push(byte[0]);
            }
        }
    }
}

/// Save parameter values (and, when requested, optimizer state) to `path`.
pub fn save_checkpoint(ps: &ParameterSet, path: &Path, with_state: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{HEADER}")?;
    let ids = ps.ids_by_name();
    for &id in &ids {
        let t = ps.value(id);
        writeln!(w, "P\t{}\t{}\t{}", ps.name(id), t.rows(), t.cols())?;
        write_tensor(&mut w, t)?;
        writeln!(w)?;
    }
    if with_state {
        writeln!(w, "STATE")?;
        for &id in &ids {
            match ps.state(id) {
                OptState::Empty => {}
                OptState::Sgd { velocity } => {
                    writeln!(
                        w,
                        "S\t{}\tsgd\t{}\t{}",
                        ps.name(id),
                        velocity.rows(),
                        velocity.cols()
                    )?;
                    write_tensor(&mut w, velocity)?;
                    writeln!(w)?;
                }
                OptState::Adam { m, v, t } => {
                    writeln!(
                        w,
                        "S\t{}\tadam\t{}\t{}\t{}",
                        ps.name(id),
                        m.rows(),
                        m.cols(),
                        t
                    )?;
                    write_tensor(&mut w, m)?;
                    write_tensor(&mut w, v)?;
                    writeln!(w)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub enum LoadedState {
    Sgd { velocity: Tensor2 },
    Adam { m: Tensor2, v: Tensor2, t: u64 },
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCheckpoint {
    pub params: Vec<(String, Tensor2)>,
    pub states: Vec<(String, LoadedState)>,
}

impl LoadedCheckpoint {
    /// Copy loaded values (and state) into an already-registered set.
    /// Names and shapes must match exactly.
    pub fn apply_to(&self, ps: &mut ParameterSet) -> Result<()> {
        if self.params.len() != ps.len() {
            return Err(NumericError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                ps.len()
            )));
        }
        for (name, tensor) in &self.params {
            let id = ps.id(name).ok_or_else(|| {
                NumericError::Checkpoint(format!("unknown parameter {name} in checkpoint"))
            })?;
            if ps.value(id).shape() != tensor.shape() {
                return Err(NumericError::Checkpoint(format!(
                    "shape mismatch for {name}: model {:?}, checkpoint {:?}",
                    ps.value(id).shape(),
                    tensor.shape()
                )));
            }
            *ps.value_mut(id) = tensor.clone();
        }
        for (name, state) in &self.states {
            let id = ps.id(name).ok_or_else(|| {
                NumericError::Checkpoint(format!("state for unknown parameter {name}"))
            })?;
            let st = match state {
                LoadedState::Sgd { velocity } => OptState::Sgd {
                    velocity: velocity.clone(),
                },
                LoadedState::Adam { m, v, t } => OptState::Adam {
                    m: m.clone(),
                    v: v.clone(),
                    t: *t,
                },
            };
            ps.set_state(id, st);
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_line(&mut r)?
        .ok_or_else(|| NumericError::Checkpoint("empty checkpoint file".into()))?;
    if header != HEADER {
        return Err(NumericError::Checkpoint(format!(
            "unsupported checkpoint header: {header:?}, expected {HEADER:?}"
        )));
    }
    let mut out = LoadedCheckpoint::default();
    let mut in_state = false;
    while let Some(line) = read_line(&mut r)? {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "STATE" => {
                in_state = true;
            }
            "P" if !in_state => {
                if fields.len() != 4 {
                    return Err(NumericError::Checkpoint(format!(
                        "malformed parameter record: {line:?}"
                    )));
                }
                let rows = parse_dim(fields[2], &line)?;
                let cols = parse_dim(fields[3], &line)?;
                let t = read_tensor(&mut r, rows, cols)?;
                out.params.push((fields[1].to_string(), t));
            }
            "S" if in_state => {
                if fields.len() < 5 {
                    return Err(NumericError::Checkpoint(format!(
                        "malformed state record: {line:?}"
                    )));
                }
                let rows = parse_dim(fields[3], &line)?;
                let cols = parse_dim(fields[4], &line)?;
                match fields[2] {
                    "sgd" => {
                        let velocity = read_tensor(&mut r, rows, cols)?;
                        out.states
                            .push((fields[1].to_string(), LoadedState::Sgd { velocity }));
                    }
                    "adam" => {
                        let t = fields
                            .get(5)
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| {
                                NumericError::Checkpoint(format!(
                                    "malformed adam state record: {line:?}"
                                ))
                            })?;
                        let m = read_tensor(&mut r, rows, cols)?;
                        let v = read_tensor(&mut r, rows, cols)?;
                        out.states
                            .push((fields[1].to_string(), LoadedState::Adam { m, v, t }));
                    }
                    other => {
                        return Err(NumericError::Checkpoint(format!(
                            "unknown optimizer state kind {other:?}"
                        )))
                    }
                }
            }
            _ => {
                return Err(NumericError::Checkpoint(format!(
                    "unexpected record: {line:?}"
                )));
            }
        }
    }
    Ok(out)
}

fn parse_dim(s: &str, line: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| NumericError::Checkpoint(format!("bad dimension in record: {line:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn sample_set() -> ParameterSet {
        let mut ps = ParameterSet::new();
        let mut rng = substream(11, "init");
        ps.register_uniform("out.w", 3, 5, 5, &mut rng).unwrap();
        ps.register_uniform("gate.wz", 4, 4, 4, &mut rng).unwrap();
        ps.register("bias", Tensor2::from_vec(2, 1, vec![0.5, -0.25]).unwrap())
            .unwrap();
        ps
    }

    #[test]
    fn roundtrip_preserves_values_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ps = sample_set();
        save_checkpoint(&ps, &path, false).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut fresh = sample_set();
        for id in fresh.ids_by_name() {
            fresh.value_mut(id).fill(0.0);
        }
        loaded.apply_to(&mut fresh).unwrap();
        for id in ps.ids_by_name() {
            assert_eq!(ps.value(id), fresh.value(id), "{}", ps.name(id));
        }
    }

    #[test]
    fn roundtrip_with_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ps = sample_set();
        let id = ps.id("gate.wz").unwrap();
        ps.set_state(
            id,
            OptState::Adam {
                m: Tensor2::zeros(4, 4),
                v: Tensor2::identity(4),
                t: 7,
            },
        );
        save_checkpoint(&ps, &path, true).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.states.len(), 1);
        match &loaded.states[0].1 {
            LoadedState::Adam { t, v, .. } => {
                assert_eq!(*t, 7);
                assert_eq!(v.get(2, 2), 1.0);
            }
            _ => panic!("expected adam state"),
        }
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, "GSNN-CKPT v2\n").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("header"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, "GSNN-CKPT v1\nP\tw\t2\t2\n\x01\x02").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
