//! Binary cache of a train/test pair.
//!
//! Layout (little-endian): magic `TSADVDAT`, u32 version, u32-length UTF-8
//! key, then train and test datasets, each as: u8 task (0 regression,
//! 1 classification), u64 windows, u64 channels, f64 x, f64 y, f64 min per
//! channel, f64 max per channel, u64 start per window.

use std::fs;
use std::path::Path;

use super::{NormStats, WindowedDataset, PREDICTORS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Task;

const MAGIC: &[u8; 8] = b"TSADVDAT";
const VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_dataset(out: &mut Vec<u8>, d: &WindowedDataset) {
    out.push(match d.task {
        Task::Regression => 0,
        Task::Classification => 1,
    });
    put_u64(out, d.len() as u64);
    put_u64(out, d.channels() as u64);
    put_f64s(out, d.x.data());
    put_f64s(out, d.y.data());
    put_f64s(out, &d.stats.min);
    put_f64s(out, &d.stats.max);
    for &s in &d.starts {
        put_u64(out, s as u64);
    }
}

pub fn to_bytes(key: &str, train: &WindowedDataset, test: &WindowedDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(key.len() as u32).to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    put_dataset(&mut out, train);
    put_dataset(&mut out, test);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("dataset cache truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::Format("dataset cache count out of range".into()));
        }
        Ok(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn dataset(&mut self) -> Result<WindowedDataset> {
        let task = match self.take(1)?[0] {
            0 => Task::Regression,
            1 => Task::Classification,
            t => return Err(Error::Format(format!("unknown task tag {t}"))),
        };
        let n = self.count()?;
        let c = self.count()?;
        let x = Tensor::new(vec![n, PREDICTORS, c], self.f64s(n * PREDICTORS * c)?)?;
        let y = Tensor::new(vec![n, 1], self.f64s(n)?)?;
        let stats = NormStats { min: self.f64s(c)?, max: self.f64s(c)? };
        let starts = (0..n).map(|_| self.u64().map(|s| s as usize)).collect::<Result<_>>()?;
        Ok(WindowedDataset { task, x, y, stats, starts })
    }
}

/// Decode a cache, returning its key with the datasets.
pub fn from_bytes(buf: &[u8]) -> Result<(String, WindowedDataset, WindowedDataset)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a dataset cache".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset cache version {version}")));
    }
    let key_len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
    let key = String::from_utf8(r.take(key_len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let train = r.dataset()?;
    let test = r.dataset()?;
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes in dataset cache".into()));
    }
    Ok((key, train, test))
}

pub fn save(path: &Path, key: &str, train: &WindowedDataset, test: &WindowedDataset) -> Result<()> {
    fs::write(path, to_bytes(key, train, test)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(String, WindowedDataset, WindowedDataset)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
