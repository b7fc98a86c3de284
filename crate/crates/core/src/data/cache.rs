//! Binary dataset cache ("LFDS-DS-1"): parsed samples plus any computed
//! embeddings, round-tripping bit-exactly so datasets are prepared once.

use std::io::Read;
use std::path::Path;

use super::{Dataset, GraphSample};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8] = b"LFDS-DS-1\n";

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    put_str(&mut buf, &ds.name);
    put_u32(&mut buf, ds.num_classes as u32);
    put_u32(&mut buf, ds.feature_dim as u32);
    put_u32(&mut buf, ds.samples.len() as u32);
    for s in &ds.samples {
        put_u64(&mut buf, s.graph_id);
        put_u32(&mut buf, s.num_nodes as u32);
        put_u32(&mut buf, s.label as u32);
        put_u32(&mut buf, s.edges.len() as u32);
        for &(a, b) in &s.edges {
            put_u32(&mut buf, a);
            put_u32(&mut buf, b);
        }
        for &v in &s.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::write_atomic(path, &buf)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor { buf: &buf, pos: 0 };

    let magic = r.take(DATASET_MAGIC.len())?;
    if magic != DATASET_MAGIC {
        return Err(Error::Corrupt {
            what: "dataset cache",
            msg: format!("{} does not start with LFDS-DS-1", path.display()),
        });
    }
    let name = r.get_str()?;
    let num_classes = r.get_u32()? as usize;
    let feature_dim = r.get_u32()? as usize;
    let count = r.get_u32()? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let graph_id = r.get_u64()?;
        let n = r.get_u32()? as usize;
        let label = r.get_u32()? as usize;
        let edge_count = r.get_u32()? as usize;
        let mut edges = Vec::with_capacity(edge_count);
        for _ in 0..edge_count {
            let a = r.get_u32()?;
            let b = r.get_u32()?;
            edges.push((a, b));
        }
        let mut features = Vec::with_capacity(n * feature_dim);
        for _ in 0..n * feature_dim {
            features.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        samples.push(GraphSample::new(
            graph_id,
            n,
            edges,
            features,
            feature_dim,
            label,
        )?);
    }
    let ds = Dataset {
        name,
        num_classes,
        feature_dim,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt {
                what: "dataset cache",
                msg: "unexpected end of file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn get_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn get_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn get_str(&mut self) -> Result<String> {
        let len = self.get_u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Corrupt {
            what: "dataset cache",
            msg: "invalid UTF-8 in name".into(),
        })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}
