//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SALCUTCK"
//! version      u32      1
//! arch_len     u32      length of the arch block in bytes
//! arch         utf-8    key=value lines
//! n_params     u32
//! per param:   ndim u32, dims u64 * ndim, data f64 * prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ArchConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SALCUTCK";
const VERSION: u32 = 1;

pub fn write_checkpoint(state: &ModelState, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let arch = state.arch().to_kv();
    out.write_all(&(arch.len() as u32).to_le_bytes())?;
    out.write_all(arch.as_bytes())?;
    let params: Vec<&Tensor> = state.params().collect();
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        out.write_all(&(p.ndim() as u32).to_le_bytes())?;
        for &d in p.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(input)?))
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ModelState> {
    if &read_exact::<8>(input)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch_len = read_u32(input)? as usize;
    let mut arch_bytes = vec![0u8; arch_len];
    input
        .read_exact(&mut arch_bytes)
        .map_err(|e| Error::Format(format!("truncated arch block: {e}")))?;
    let arch_text =
        String::from_utf8(arch_bytes).map_err(|_| Error::Format("arch block is not utf-8".into()))?;
    let arch = ArchConfig::from_kv(&arch_text)?;
    let count = read_u32(input)? as usize;
    let expected = arch.param_shapes();
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, arch declares {}",
            expected.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for shape in &expected {
        let ndim = read_u32(input)? as usize;
        let dims: Vec<usize> = (0..ndim)
            .map(|_| Ok(u64::from_le_bytes(read_exact::<8>(input)?) as usize))
            .collect::<Result<_>>()?;
        if &dims != shape {
            return Err(Error::Format(format!("tensor shape {dims:?}, expected {shape:?}")));
        }
        let numel: usize = dims.iter().product();
        let data = (0..numel)
            .map(|_| Ok(f64::from_le_bytes(read_exact::<8>(input)?)))
            .collect::<Result<Vec<f64>>>()?;
        params.push(Tensor::new(dims, data)?);
    }
    ModelState::from_params(arch, params)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(state, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut std::io::BufReader::new(file))
}
