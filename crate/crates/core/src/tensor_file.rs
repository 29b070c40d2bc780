//! `PATN` tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes           | content                                   |
//! |-----------------|-------------------------------------------|
//! | 4               | magic `PATN`                              |
//! | 1               | version, currently 1                      |
//! | 1               | dtype: 1 = f32, 2 = f64, 3 = u8           |
//! | 1               | ndim                                      |
//! | 8 * ndim        | dimensions as u64                         |
//! | prod(dims) * sz | row-major payload                         |
//!
//! A file may hold several records back to back; [`TensorFile::read_from`]
//! consumes exactly one.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::geometry::PressureImage;
use crate::acoustic::Sinogram;
use crate::{PatError, Result};

pub const MAGIC: &[u8; 4] = b"PATN";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

fn bad(path: &Path, reason: impl Into<String>) -> PatError {
    PatError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(PatError::InvalidArgument(format!("{} dimensions", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(PatError::shape(format!("{n} elements for {shape:?}"), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_image_f32(img: &PressureImage) -> Self {
        Self {
            shape: vec![img.height, img.width],
            data: TensorData::F32(img.values.iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_sinogram_f32(s: &Sinogram) -> Self {
        Self {
            shape: vec![s.sample_count, s.sensor_count],
            data: TensorData::F32(s.values.iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn to_image(&self) -> Result<PressureImage> {
        match self.shape.as_slice() {
            &[h, w] => PressureImage::from_vec(h, w, self.data.to_f64()),
            other => Err(PatError::shape("2D image", format!("{other:?}"))),
        }
    }

    pub fn to_sinogram(&self) -> Result<Sinogram> {
        match self.shape.as_slice() {
            &[t, s] => Sinogram::from_vec(t, s, self.data.to_f64()),
            other => Err(PatError::shape("2D sinogram", format!("{other:?}"))),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, self.data.dtype() as u8, self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &self.data {
            TensorData::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                w.write_all(&buf)
            }
            TensorData::F64(v) => {
                let mut buf = Vec::with_capacity(v.len() * 8);
                v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                w.write_all(&buf)
            }
            TensorData::U8(v) => w.write_all(v),
        }
    }

    /// Reads one record. `origin` is only used in error messages.
    pub fn read_from<R: Read>(r: &mut R, origin: &Path) -> Result<Self> {
        let io = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                bad(origin, "truncated")
            } else {
                PatError::io(origin, e)
            }
        };
        let mut head = [0u8; 7];
        r.read_exact(&mut head).map_err(io)?;
        if &head[..4] != MAGIC {
            return Err(bad(origin, "missing PATN magic"));
        }
        if head[4] != VERSION {
            return Err(bad(origin, format!("unsupported version {}", head[4])));
        }
        let dtype = DType::from_code(head[5]).ok_or_else(|| bad(origin, format!("unknown dtype code {}", head[5])))?;
        let ndim = head[6] as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            let d = usize::try_from(u64::from_le_bytes(b)).map_err(|_| bad(origin, "dimension too large"))?;
            count = count.checked_mul(d).ok_or_else(|| bad(origin, "element count overflows"))?;
            shape.push(d);
        }
        let bytes = count
            .checked_mul(dtype.size())
            .ok_or_else(|| bad(origin, "payload size overflows"))?;
        let mut payload = Vec::new();
        r.take(bytes as u64).read_to_end(&mut payload).map_err(io)?;
        if payload.len() != bytes {
            return Err(bad(origin, format!("payload has {} of {bytes} bytes", payload.len())));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload),
        };
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| PatError::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| PatError::io(path, e))
    }

    /// Loads a file that holds exactly one record.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| PatError::io(path, e))?;
        let mut r = BufReader::new(f);
        let t = Self::read_from(&mut r, path)?;
        let mut rest = [0u8; 1];
        match r.read(&mut rest) {
            Ok(0) => Ok(t),
            Ok(_) => Err(bad(path, "trailing bytes after the tensor record")),
            Err(e) => Err(PatError::io(path, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let t = TensorFile::new(vec![2, 3], TensorData::U8(vec![1, 2, 3, 4, 5, 6])).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..7], b"PATN\x01\x03\x02");
        assert_eq!(&buf[7..15], &2u64.to_le_bytes());
        assert_eq!(&buf[15..23], &3u64.to_le_bytes());
        assert_eq!(&buf[23..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("mem");
        let t = TensorFile::new(vec![4], TensorData::F64(vec![1.0; 4])).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(TensorFile::read_from(&mut wrong_magic.as_slice(), p).is_err());
        let mut wrong_dtype = buf.clone();
        wrong_dtype[5] = 9;
        assert!(TensorFile::read_from(&mut wrong_dtype.as_slice(), p).is_err());
        let short = &buf[..buf.len() - 1];
        assert!(TensorFile::read_from(&mut &short[..], p).is_err());
        assert!(TensorFile::new(vec![3], TensorData::U8(vec![0; 2])).is_err());
    }

    #[test]
    fn trailing_bytes_rejected_by_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.patn");
        let t = TensorFile::new(vec![1], TensorData::F32(vec![1.0])).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.push(0);
        std::fs::write(&path, &buf).unwrap();
        assert!(TensorFile::load(&path).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = TensorFile> {
        prop::collection::vec(0usize..5, 0..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            let s2 = shape.clone();
            prop_oneof![
                prop::collection::vec(any::<f32>(), n).prop_map(TensorData::F32),
                prop::collection::vec(any::<f64>(), n).prop_map(TensorData::F64),
                prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
            ]
            .prop_map(move |d| TensorFile::new(s2.clone(), d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(t in arb_tensor()) {
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = TensorFile::read_from(&mut buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(&back.shape, &t.shape);
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            prop_assert_eq!(buf, again);
        }
    }
}
