//! Binary checkpoints: bit-exact, little-endian, checksummed.
//!
//! Layout ("LVCK"):
//! ```text
//! magic "LVCK" | u32 version | u32 config_len | config JSON |
//! u32 tensor_count |
//!   per tensor: u16 name_len | name | u8 dtype | u8 rank |
//!               u32 dims[rank] | u64 payload_len | payload (LE scalars)
//! u32 crc32 over everything above
//! ```
//! `load(save(p)) == p` bitwise; the checksum is verified on load. Writes go
//! through a temp file and an atomic rename.

use std::path::Path;

use crate::config::ModelConfig;
use crate::model::ModelParams;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LVCK";
const VERSION: u32 = 1;

/// IEEE CRC-32 (polynomial 0xEDB88320), table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

/// Whole-file atomic write: temp file in the same directory, then rename.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp",
            path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
        )),
        None => std::path::PathBuf::from(format!(".{}.tmp", path.display())),
    };
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize just the tensor table (no config, no checksum). Two parameter
/// sets serialize identically here iff every named tensor is bit-identical.
pub fn tensor_table_bytes<T: Real>(params: &ModelParams<T>) -> Vec<u8> {
    let named = params.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(dtype_tag(T::DTYPE));
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let payload_len = tensor.len() * T::BYTE_WIDTH;
        out.extend_from_slice(&(payload_len as u64).to_le_bytes());
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    out
}

fn dtype_tag(dtype: &str) -> u8 {
    match dtype {
        "f32" => 0,
        "f64" => 1,
        other => unreachable!("unknown dtype {other}"),
    }
}

pub fn to_bytes<T: Real>(config: &ModelConfig, params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&tensor_table_bytes(params));
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save<T: Real>(path: &Path, config: &ModelConfig, params: &ModelParams<T>) -> Result<()> {
    atomic_write(path, &to_bytes(config, params))
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<T>)> {
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let mut r = ByteReader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.take(cfg_len)?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    config.validate()?;

    let count = r.u32()? as usize;
    let mut table: Vec<(String, Tensor<T>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != dtype_tag(T::DTYPE) {
            return Err(Error::Format(format!(
                "tensor {name} has dtype tag {dtype}, expected {} ({})",
                dtype_tag(T::DTYPE),
                T::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let payload_len = r.u64()? as usize;
        let expect: usize = dims.iter().product::<usize>() * T::BYTE_WIDTH;
        if payload_len != expect {
            return Err(Error::Format(format!(
                "tensor {name}: payload {payload_len} bytes, dims want {expect}"
            )));
        }
        let payload = r.take(payload_len)?;
        let data: Vec<T> =
            payload.chunks(T::BYTE_WIDTH).map(|c| T::from_le_slice(c)).collect();
        table.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }

    // Rebuild the parameter structure and fill it from the table.
    let mut params = ModelParams::<T>::init(&config)?;
    let mut filled = 0usize;
    {
        let mut slots = params.named_tensors_mut();
        if slots.len() != table.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config wants {}",
                table.len(),
                slots.len()
            )));
        }
        for (name, tensor) in table {
            let slot = slots
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if slot.1.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} vs configured {:?}",
                    tensor.shape(),
                    slot.1.shape()
                )));
            }
            *slot.1 = tensor;
            filled += 1;
        }
    }
    debug_assert_eq!(filled, params.named_tensors().len());
    Ok((config, params))
}

pub fn load<T: Real>(path: &Path) -> Result<(ModelConfig, ModelParams<T>)> {
    from_bytes(&std::fs::read(path)?)
}

/// Config embedded in a checkpoint without materializing the tensors
/// (used to pick the precision before a typed load).
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig> {
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let _version = r.u32()?;
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.take(cfg_len)?;
    serde_json::from_slice(cfg_bytes).map_err(|e| Error::Format(format!("embedded config: {e}")))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AblationFlags, ModelConfig, Precision};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            p: 4,
            q: 2,
            patch: [2, 2],
            lookup_grid: [4, 4],
            channels: 1,
            compressed_grids: vec![[2, 2], [3, 3]],
            num_classes: 3,
            flags: AblationFlags::default(),
            scale_attention: true,
            output_projections: true,
            seed: 11,
            precision: Precision::F32,
        }
    }

    #[test]
    fn crc32_known_vector() {
        // Standard test vector: CRC-32("123456789") = 0xCBF43926.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let config = toy_config();
        let params = ModelParams::<f32>::init(&config).unwrap();
        let bytes = to_bytes(&config, &params);
        let (cfg2, params2) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(config, cfg2);
        assert_eq!(params, params2);
        assert_eq!(to_bytes(&cfg2, &params2), bytes);
    }

    #[test]
    fn f64_round_trip() {
        let mut config = toy_config();
        config.precision = Precision::F64;
        let params = ModelParams::<f64>::init(&config).unwrap();
        let bytes = to_bytes(&config, &params);
        let (_, params2) = from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(params, params2);
    }

    #[test]
    fn corruption_is_detected() {
        let config = toy_config();
        let params = ModelParams::<f32>::init(&config).unwrap();
        let mut bytes = to_bytes(&config, &params);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = from_bytes::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let config = toy_config();
        let params = ModelParams::<f32>::init(&config).unwrap();
        let bytes = to_bytes(&config, &params);
        let err = from_bytes::<f64>(&bytes).unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn tensor_bytes_ignore_compressed_grids() {
        // Same seed, different grid menus: identical parameter bytes.
        let mut a_cfg = toy_config();
        a_cfg.compressed_grids = vec![[3, 3]];
        let mut b_cfg = toy_config();
        b_cfg.compressed_grids = vec![[2, 2], [4, 4]];
        let a = ModelParams::<f32>::init(&a_cfg).unwrap();
        let b = ModelParams::<f32>::init(&b_cfg).unwrap();
        assert_eq!(tensor_table_bytes(&a), tensor_table_bytes(&b));
    }

    #[test]
    fn file_save_load() {
        let dir = std::env::temp_dir().join(format!("lvck-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.lvck");
        let config = toy_config();
        let params = ModelParams::<f32>::init(&config).unwrap();
        save(&path, &config, &params).unwrap();
        let (cfg2, params2) = load::<f32>(&path).unwrap();
        assert_eq!(config, cfg2);
        assert_eq!(params, params2);
        let peeked = peek_config(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(peeked, config);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
