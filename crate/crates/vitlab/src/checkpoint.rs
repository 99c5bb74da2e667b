//! Flat binary checkpoints: a versioned header with the model config,
//! then one record per parameter (path, dtype, shape, little-endian f64
//! payload). Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{DType, Tensor};
use crate::vit::{ModelConfig, ParamTree};

const MAGIC: &[u8; 8] = b"VITLABCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config serialization: {0}")]
    Config(#[from] serde_json::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ParamTree) -> Result<(), CheckpointError> {
    // write to a sibling temp file and rename so a crash never leaves a
    // truncated checkpoint behind
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg_json = serde_json::to_vec(cfg)?;
        w.write_all(&(cfg_json.len() as u64).to_le_bytes())?;
        w.write_all(&cfg_json)?;
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for (name, t) in params.iter() {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[dtype_tag(t.dtype())])?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ParamTree), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_json = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_json)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_json)?;
    let count = read_u64(&mut r)? as usize;
    let mut tree = ParamTree::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("non-utf8 parameter name".into()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = parse_dtype(tag[0])?;
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        tree.insert(name, Tensor::from_vec(shape, data, dtype));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((cfg, tree))
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn parse_dtype(tag: u8) -> Result<DType, CheckpointError> {
    match tag {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        t => Err(CheckpointError::Corrupt(format!("unknown dtype tag {t}"))),
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
