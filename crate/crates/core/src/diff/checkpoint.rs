//! Binary model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CBPCKPT\0"
//! version    u32      1
//! manifest   u32 len + UTF-8   one line per layer / model descriptor
//! metadata   u32 count, then (u32 len + key, u32 len + value) pairs
//! params     u32 count, then per parameter:
//!              name (u32 len + UTF-8), group u8 (0 backbone, 1 head),
//!              ndim u32, dims u32 x ndim, adam step u64,
//!              value f32 x n, adam m f32 x n, adam v f32 x n
//! buffers    u32 count, then per buffer:
//!              name, ndim u32, dims u32 x ndim, value f32 x n
//! ```

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use super::params::{ParamGroup, ParamStore};
use super::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CBPCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Vec<String>,
    pub metadata: BTreeMap<String, String>,
    pub store: ParamStore<f32>,
}

fn w_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn w_f32s<W: Write>(w: &mut W, t: &Tensor<f32>) -> io::Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn r_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let n = r_u32(r)? as usize;
    if n > (1 << 28) {
        return Err(CheckpointError::Corrupt(format!("string length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn r_shape<R: Read>(r: &mut R) -> Result<Vec<usize>, CheckpointError> {
    let nd = r_u32(r)? as usize;
    if nd > 8 {
        return Err(CheckpointError::Corrupt(format!("ndim {nd}")));
    }
    (0..nd).map(|_| Ok(r_u32(r)? as usize)).collect()
}

fn r_f32s<R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor<f32>, CheckpointError> {
    let n: usize = shape.iter().product();
    let mut b = vec![0u8; n * 4];
    r.read_exact(&mut b)?;
    let data = b
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape, data))
}

impl Checkpoint {
    pub fn from_store<T: Real>(
        store: &ParamStore<T>,
        manifest: Vec<String>,
        metadata: BTreeMap<String, String>,
    ) -> Self {
        Self {
            manifest,
            metadata,
            store: store.cast(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w_u32(w, VERSION)?;
        w_str(w, &self.manifest.join("\n"))?;
        w_u32(w, self.metadata.len() as u32)?;
        for (k, v) in &self.metadata {
            w_str(w, k)?;
            w_str(w, v)?;
        }
        w_u32(w, self.store.params().len() as u32)?;
        for p in self.store.params() {
            w_str(w, &p.name)?;
            w.write_all(&[match p.group {
                ParamGroup::Backbone => 0,
                ParamGroup::Head => 1,
            }])?;
            w_u32(w, p.value.ndim() as u32)?;
            for &d in p.value.shape() {
                w_u32(w, d as u32)?;
            }
            w.write_all(&p.step.to_le_bytes())?;
            w_f32s(w, &p.value)?;
            w_f32s(w, &p.m)?;
            w_f32s(w, &p.v)?;
        }
        w_u32(w, self.store.buffers().len() as u32)?;
        for b in self.store.buffers() {
            w_str(w, &b.name)?;
            w_u32(w, b.value.ndim() as u32)?;
            for &d in b.value.shape() {
                w_u32(w, d as u32)?;
            }
            w_f32s(w, &b.value)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let manifest_text = r_str(r)?;
        let manifest = if manifest_text.is_empty() {
            Vec::new()
        } else {
            manifest_text.split('\n').map(str::to_string).collect()
        };
        let nmeta = r_u32(r)?;
        let mut metadata = BTreeMap::new();
        for _ in 0..nmeta {
            let k = r_str(r)?;
            let v = r_str(r)?;
            metadata.insert(k, v);
        }
        let mut store = ParamStore::<f32>::new();
        let np = r_u32(r)?;
        for _ in 0..np {
            let name = r_str(r)?;
            let mut g = [0u8; 1];
            r.read_exact(&mut g)?;
            let group = match g[0] {
                0 => ParamGroup::Backbone,
                1 => ParamGroup::Head,
                x => return Err(CheckpointError::Corrupt(format!("group tag {x}"))),
            };
            let shape = r_shape(r)?;
            let step = r_u64(r)?;
            let value = r_f32s(r, &shape)?;
            let m = r_f32s(r, &shape)?;
            let v = r_f32s(r, &shape)?;
            let id = store.push_param(&name, group, value);
            let p = store.param_mut(id);
            p.m = m;
            p.v = v;
            p.step = step;
        }
        let nb = r_u32(r)?;
        for _ in 0..nb {
            let name = r_str(r)?;
            let shape = r_shape(r)?;
            let value = r_f32s(r, &shape)?;
            store.push_buffer(&name, value);
        }
        Ok(Self {
            manifest,
            metadata,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Copies values, Adam state and buffers into a freshly built store of
    /// identical layout.
    pub fn restore_into<T: Real>(&self, target: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        if target.params().len() != self.store.params().len()
            || target.buffers().len() != self.store.buffers().len()
        {
            return Err(CheckpointError::Mismatch(format!(
                "expected {} params / {} buffers, checkpoint has {} / {}",
                target.params().len(),
                target.buffers().len(),
                self.store.params().len(),
                self.store.buffers().len()
            )));
        }
        for (dst, src) in target.params_mut().iter_mut().zip(self.store.params()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "param {} {:?} vs {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.cast();
            dst.m = src.m.cast();
            dst.v = src.v.cast();
            dst.step = src.step;
            dst.group = src.group;
        }
        for (dst, src) in target.buffers_mut().iter_mut().zip(self.store.buffers()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(CheckpointError::Mismatch(format!("buffer {}", dst.name)));
            }
            dst.value = src.value.cast();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::<f32>::new();
        let a = s.push_param(
            "enc.w",
            ParamGroup::Backbone,
            Tensor::new(
                &[2, 3],
                vec![1.5, -0.0, f32::MIN_POSITIVE, 3.3e-7, -2.25, 1e30],
            ),
        );
        s.param_mut(a).m = Tensor::new(&[2, 3], vec![0.1; 6]);
        s.param_mut(a).step = 17;
        s.push_param("head.b", ParamGroup::Head, Tensor::new(&[1], vec![0.125]));
        s.push_buffer("bn.running_var", Tensor::new(&[2], vec![1.0, 0.3]));
        let mut meta = BTreeMap::new();
        meta.insert("arch".to_string(), "fused:concat".to_string());
        let ck = Checkpoint::from_store(&s, vec!["Linear(2,3)".into(), "ReLU".into()], meta);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        assert_eq!(back.metadata, ck.metadata);
        for (x, y) in back.store.params().iter().zip(s.params()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.step, y.step);
            let xb: Vec<u32> = x.value.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
            assert_eq!(x.m, y.m);
        }
        assert_eq!(back.store.buffers()[0].value, s.buffers()[0].value);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = b"NOTACKPT\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            Checkpoint::read_from(&mut bytes.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
    }
}
