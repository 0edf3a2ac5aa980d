//! Little-endian binary formats: `DLKV` rasters (images, volumes, label
//! maps) and `DLKC` checkpoints.
//!
//! Raster layout: magic, `u16` version, `u8` dtype (0 = f32, 1 = f64,
//! 2 = u8), `u8` rank, `u32` dims in `N, C, spatial..` order, then the
//! row-major payload.
//!
//! Checkpoint layout: magic, `u16` version, `u32` length plus UTF-8 config
//! text, `u64` seed, `u64` epoch, `f64` learning rate, momentum and weight
//! decay, `u32` tensor count, one directory entry per tensor (`u16` name
//! length, name, `u8` dtype, `u8` rank, `u32` dims, `u64` payload offset,
//! `u64` byte length), then the payload region. Parameters come first in
//! store order, then momentum buffers as `optim.<parameter>`.
//!
//! Readers reject bad magic, unknown versions, truncation, overlapping or
//! out-of-order payloads and trailing bytes.

use std::fs;
use std::path::Path;

use crate::nn::ParamStore;
use crate::optim::OptimState;
use crate::tensor::{LabelMap, Real, Tensor};
use crate::train::Checkpoint;
use crate::{Error, Result};

pub const RASTER_MAGIC: &[u8; 4] = b"DLKV";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLKC";
pub const VERSION: u16 = 1;

const OPTIM_PREFIX: &str = "optim.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    /// Code used for tensors of the compiled scalar type.
    fn native() -> Self {
        if std::mem::size_of::<Real>() == 4 {
            DType::F32
        } else {
            DType::F64
        }
    }
}

/// Decoded raster contents.
#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    Real(Tensor),
    /// Label map stored with dims `N, 1, spatial..`.
    Labels(LabelMap),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u16()?;
        if v != VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn byte_len(dims: &[usize], dtype: DType) -> Result<usize> {
    dims.iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) -> Result<()> {
    let rank = u8::try_from(dims.len()).map_err(|_| Error::Format(format!("rank {} too large", dims.len())))?;
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

fn put_reals(out: &mut Vec<u8>, data: &[Real]) {
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_reals(bytes: &[u8], dtype: DType) -> Result<Vec<Real>> {
    match dtype {
        DType::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as Real)
            .collect()),
        DType::F64 => Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")) as Real)
            .collect()),
        DType::U8 => Err(Error::Format("expected floating point payload, found u8".into())),
    }
}

pub fn encode_raster(r: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    match r {
        Raster::Real(t) => {
            out.push(DType::native() as u8);
            put_dims(&mut out, t.shape())?;
            put_reals(&mut out, t.data());
        }
        Raster::Labels(l) => {
            out.push(DType::U8 as u8);
            let mut dims = vec![l.shape()[0], 1];
            dims.extend_from_slice(&l.shape()[1..]);
            put_dims(&mut out, &dims)?;
            out.extend_from_slice(l.data());
        }
    }
    Ok(out)
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let mut r = Reader::new(bytes);
    r.header(RASTER_MAGIC)?;
    let dtype = DType::from_code(r.u8()?)?;
    let dims = r.dims()?;
    if dims.len() < 2 {
        return Err(Error::Format(format!("raster needs N and C axes, got dims {dims:?}")));
    }
    let payload = r.take(byte_len(&dims, dtype)?)?;
    r.finish()?;
    match dtype {
        DType::U8 => {
            if dims[1] != 1 {
                return Err(Error::Format(format!("label raster must have one channel, got {}", dims[1])));
            }
            let mut shape = vec![dims[0]];
            shape.extend_from_slice(&dims[2..]);
            Ok(Raster::Labels(LabelMap::new(&shape, payload.to_vec())?))
        }
        _ => Ok(Raster::Real(Tensor::new(&dims, get_reals(payload, dtype)?)?)),
    }
}

pub fn save_raster(path: &Path, r: &Raster) -> Result<()> {
    fs::write(path, encode_raster(r)?)?;
    Ok(())
}

pub fn load_raster(path: &Path) -> Result<Raster> {
    decode_raster(&fs::read(path)?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    match load_raster(path)? {
        Raster::Real(t) => Ok(t),
        Raster::Labels(_) => Err(Error::Format(format!("{} holds labels, expected intensities", path.display()))),
    }
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    match load_raster(path)? {
        Raster::Labels(l) => Ok(l),
        Raster::Real(_) => Err(Error::Format(format!("{} holds intensities, expected labels", path.display()))),
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in ck.params.iter() {
        if name.starts_with(OPTIM_PREFIX) {
            return Err(Error::Format(format!("parameter name {name} collides with optimizer buffers")));
        }
        tensors.push((name.to_string(), t));
    }
    for (name, t) in ck.optim.buffers() {
        tensors.push((format!("{OPTIM_PREFIX}{name}"), t));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = ck.config.as_bytes();
    let cfg_len = u32::try_from(cfg.len()).map_err(|_| Error::Format("config text too long".into()))?;
    out.extend_from_slice(&cfg_len.to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    for v in [ck.optim.lr, ck.optim.momentum, ck.optim.weight_decay] {
        out.extend_from_slice(&(v as f64).to_le_bytes());
    }
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    let dtype = DType::native();
    let mut offset = 0u64;
    for (name, t) in &tensors {
        let nb = name.as_bytes();
        let nl = u16::try_from(nb.len()).map_err(|_| Error::Format(format!("name {name} too long")))?;
        out.extend_from_slice(&nl.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(dtype as u8);
        put_dims(&mut out, t.shape())?;
        let len = byte_len(t.shape(), dtype)? as u64;
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        offset += len;
    }
    for (_, t) in &tensors {
        put_reals(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let cfg_len = r.u32()? as usize;
    let config = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Format("config text is not UTF-8".into()))?
        .to_string();
    let seed = r.u64()?;
    let epoch = r.u64()?;
    let (lr, momentum, wd) = (r.f64()?, r.f64()?, r.f64()?);
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count.min(1 << 16));
    let mut expect = 0u64;
    for _ in 0..count {
        let nl = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nl)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_code(r.u8()?)?;
        if dtype == DType::U8 {
            return Err(Error::Format(format!("tensor {name} has integer dtype")));
        }
        let dims = r.dims()?;
        let (off, len) = (r.u64()?, r.u64()?);
        if off != expect || len != byte_len(&dims, dtype)? as u64 {
            return Err(Error::Format(format!("tensor {name}: payload entry out of place")));
        }
        expect = off
            .checked_add(len)
            .ok_or_else(|| Error::Format("payload size overflow".into()))?;
        dir.push((name, dtype, dims, len as usize));
    }
    let mut params = ParamStore::new();
    let mut optim = OptimState::new(lr as Real, momentum as Real, wd as Real);
    for (name, dtype, dims, len) in dir {
        let t = Tensor::new(&dims, get_reals(r.take(len)?, dtype)?)?;
        match name.strip_prefix(OPTIM_PREFIX) {
            Some(p) => optim.set_buffer(p, t),
            None => params
                .insert(&name, t)
                .map_err(|_| Error::Format(format!("duplicate tensor {name}")))?,
        }
    }
    r.finish()?;
    Ok(Checkpoint {
        config,
        params,
        optim,
        seed,
        epoch,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_checkpoint() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::new(&[2, 2], vec![1.0, -0.5, 1e-300, 3.25]).unwrap()).unwrap();
        params.insert("a.b", Tensor::new(&[2], vec![0.1, 0.2]).unwrap()).unwrap();
        let mut optim = OptimState::new(0.05, 0.9, 1e-4);
        optim.set_buffer("a.b", Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        Checkpoint {
            config: "[net]\nrank = 2\n".into(),
            params,
            optim,
            seed: 42,
            epoch: 3,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ck = small_checkpoint();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let ck = Checkpoint {
            config: String::new(),
            params: ParamStore::new(),
            optim: OptimState::new(0.1, 0.0, 0.0),
            seed: 0,
            epoch: 0,
        };
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn checkpoint_corruption_is_rejected() {
        let bytes = encode_checkpoint(&small_checkpoint()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_checkpoint(&bad).is_err());
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }

    #[test]
    fn raster_round_trips() {
        let t = Tensor::new(&[1, 2, 2, 3], (0..12).map(|i| i as Real * 0.1).collect()).unwrap();
        let bytes = encode_raster(&Raster::Real(t.clone())).unwrap();
        assert_eq!(&bytes[..4], b"DLKV");
        assert_eq!(bytes.len(), 4 + 2 + 1 + 1 + 4 * 4 + 12 * std::mem::size_of::<Real>());
        assert_eq!(decode_raster(&bytes).unwrap(), Raster::Real(t));

        let l = LabelMap::new(&[2, 2, 2], vec![0, 1, 2, 0, 1, 1, 0, 2]).unwrap();
        let bytes = encode_raster(&Raster::Labels(l.clone())).unwrap();
        assert_eq!(decode_raster(&bytes).unwrap(), Raster::Labels(l));
    }

    #[test]
    fn raster_corruption_is_rejected() {
        let l = LabelMap::new(&[1, 2, 2], vec![0, 1, 1, 0]).unwrap();
        let bytes = encode_raster(&Raster::Labels(l)).unwrap();
        assert!(decode_raster(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0]);
        assert!(decode_raster(&long).is_err());
        let mut bad = bytes.clone();
        bad[6] = 7;
        assert!(decode_raster(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_raster(&bad).is_err());
        // A huge extent must fail cleanly instead of allocating.
        let mut huge = bytes[..8].to_vec();
        put_dims(&mut huge, &[u32::MAX as usize, u32::MAX as usize, u32::MAX as usize, 2]).unwrap();
        assert!(decode_raster(&huge).is_err());
    }

    #[test]
    fn f32_payloads_are_accepted() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(RASTER_MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.push(DType::F32 as u8);
        put_dims(&mut bytes, &[1, 1, 2]).unwrap();
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        match decode_raster(&bytes).unwrap() {
            Raster::Real(t) => assert_eq!(t.data(), &[1.5, -2.0]),
            other => panic!("{other:?}"),
        }
    }
}
