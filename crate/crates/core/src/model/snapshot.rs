//! Binary model snapshot: magic `MRTM`, u16 version, the model config as TOML,
//! named little-endian f64 tensors, then the expert-bias vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"MRTM";
const VERSION: u16 = 1;

pub fn write_snapshot(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = toml::to_string(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    write_bytes(&mut w, header.as_bytes())?;
    let named = model.params.named();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t, _) in named {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(model.biases.len() as u32).to_le_bytes())?;
    for b in &model.biases {
        w.write_all(&(b.len() as u32).to_le_bytes())?;
        for v in b {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model snapshot".into()));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    if u16::from_le_bytes(v) != VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {}", u16::from_le_bytes(v))));
    }
    let header = String::from_utf8(read_bytes(&mut r)?).map_err(|e| Error::Format(e.to_string()))?;
    let config: ModelConfig = toml::from_str(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut model = Model::new(config, 0)?;
    let expected: Vec<(String, usize, usize)> = model
        .params
        .named()
        .into_iter()
        .map(|(n, t, _)| (n, t.rows(), t.cols()))
        .collect();
    if read_u32(&mut r)? as usize != expected.len() {
        return Err(Error::Format("tensor count does not match the config".into()));
    }
    let mut flat = Vec::with_capacity(model.params.num_params());
    for (name, rows, cols) in expected {
        let got = String::from_utf8(read_bytes(&mut r)?).map_err(|e| Error::Format(e.to_string()))?;
        let (gr, gc) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
        if got != name || gr != rows || gc != cols {
            return Err(Error::Format(format!("unexpected tensor {} ({}×{}), wanted {}", got, gr, gc, name)));
        }
        for _ in 0..rows * cols {
            flat.push(read_f64(&mut r)?);
        }
    }
    model.params.assign_flat(&flat)?;
    let layers = read_u32(&mut r)? as usize;
    if layers != model.biases.len() {
        return Err(Error::Format("bias table does not match the layer count".into()));
    }
    for b in &mut model.biases {
        if read_u32(&mut r)? as usize != b.len() {
            return Err(Error::Format("bias length mismatch".into()));
        }
        for x in b.iter_mut() {
            *x = read_f64(&mut r)?;
        }
    }
    Ok(model)
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Format("implausible string length".into()));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

