//! Binary field container.
//!
//! ```text
//! offset  size  content
//!      0     4  "DGMF"
//!      4     1  version (1)
//!      5     1  dtype: 1 = f32, 2 = f64, 3 = u16
//!      6     2  channels, u16 LE
//!      8     4  height, u32 LE
//!     12     4  width, u32 LE
//!     16     …  channels·height·width values, channel-major, row-major, LE
//! ```

use std::fs;
use std::path::Path;

use dgm_core::{FeatureMap, LabelMask, ScalarField, VectorField2};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"DGMF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U16 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U16),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl FieldData {
    pub fn dtype(&self) -> DType {
        match self {
            FieldData::F32(_) => DType::F32,
            FieldData::F64(_) => DType::F64,
            FieldData::U16(_) => DType::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FieldData::F32(v) => v.len(),
            FieldData::F64(v) => v.len(),
            FieldData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldFile {
    pub channels: u16,
    pub height: u32,
    pub width: u32,
    pub data: FieldData,
}

fn dim<T: TryFrom<usize>>(what: &str, v: usize) -> CliResult<T> {
    T::try_from(v).map_err(|_| CliError::Usage(format!("{what} {v} does not fit the field header")))
}

impl FieldFile {
    pub fn new(channels: usize, height: usize, width: usize, data: FieldData) -> CliResult<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(CliError::Usage(format!("field payload has {} values, header needs {expected}", data.len())));
        }
        Ok(Self {
            channels: dim("channel count", channels)?,
            height: dim("height", height)?,
            width: dim("width", width)?,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels as usize, self.height as usize, self.width as usize)
    }

    pub fn from_scalar(f: &ScalarField) -> Self {
        Self::new(1, f.height(), f.width(), FieldData::F64(f.data().to_vec())).expect("consistent scalar field")
    }

    pub fn from_vector(f: &VectorField2) -> Self {
        Self::new(2, f.height(), f.width(), FieldData::F64(f.data().to_vec())).expect("consistent vector field")
    }

    pub fn from_features(f: &FeatureMap) -> Self {
        Self::new(f.channels(), f.height(), f.width(), FieldData::F64(f.data().to_vec()))
            .expect("consistent feature map")
    }

    pub fn from_labels(m: &LabelMask) -> Self {
        Self::new(1, m.height(), m.width(), FieldData::U16(m.labels().to_vec())).expect("consistent label mask")
    }

    /// Real values widened to f64. Label files are rejected.
    pub fn real_values(&self) -> CliResult<Vec<f64>> {
        match &self.data {
            FieldData::F32(v) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
            FieldData::F64(v) => Ok(v.clone()),
            FieldData::U16(_) => Err(CliError::Usage("expected a real-valued field, found labels".into())),
        }
    }

    fn expect_channels(&self, what: &str, n: usize) -> CliResult<()> {
        if self.channels as usize != n {
            return Err(CliError::Usage(format!("{what} needs {n} channel(s), file has {}", self.channels)));
        }
        Ok(())
    }

    pub fn to_scalar(&self) -> CliResult<ScalarField> {
        self.expect_channels("scalar field", 1)?;
        Ok(ScalarField::new(self.height as usize, self.width as usize, self.real_values()?)?)
    }

    pub fn to_vector(&self) -> CliResult<VectorField2> {
        self.expect_channels("vector field", 2)?;
        Ok(VectorField2::new(self.height as usize, self.width as usize, self.real_values()?)?)
    }

    pub fn to_features(&self) -> CliResult<FeatureMap> {
        let (c, h, w) = self.dims();
        Ok(FeatureMap::new(c, h, w, self.real_values()?)?)
    }

    pub fn to_labels(&self) -> CliResult<LabelMask> {
        self.expect_channels("label mask", 1)?;
        match &self.data {
            FieldData::U16(v) => Ok(LabelMask::new(self.height as usize, self.width as usize, v.clone())?),
            _ => Err(CliError::Usage("expected a uint16 label field".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * dtype.width());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(dtype.code());
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        match &self.data {
            FieldData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            FieldData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            FieldData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses a field; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let bad = |offset: usize, reason: String| CliError::format(path, offset as u64, reason);
        if bytes.len() < HEADER_LEN {
            return Err(bad(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad(0, "bad magic, expected \"DGMF\"".into()));
        }
        if bytes[4] != VERSION {
            return Err(bad(4, format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5]).ok_or_else(|| bad(5, format!("unknown dtype code {}", bytes[5])))?;
        let channels = u16::from_le_bytes([bytes[6], bytes[7]]);
        let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let width = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
        let count = (channels as u64) * (height as u64) * (width as u64);
        let payload = &bytes[HEADER_LEN..];
        let need = count.checked_mul(dtype.width() as u64);
        if need != Some(payload.len() as u64) {
            let offset = HEADER_LEN + payload.len().min(need.unwrap_or(u64::MAX).min(usize::MAX as u64) as usize);
            return Err(bad(
                offset,
                format!("payload is {} bytes, header implies {count} values of {} bytes", payload.len(), dtype.width()),
            ));
        }
        let data = match dtype {
            DType::F32 => FieldData::F32(
                payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect(),
            ),
            DType::F64 => FieldData::F64(
                payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
            ),
            DType::U16 => FieldData::U16(payload.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect()),
        };
        Ok(Self { channels, height, width, data })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(f: &FieldFile) -> FieldFile {
        FieldFile::from_bytes(&f.to_bytes(), Path::new("mem")).unwrap()
    }

    #[test]
    fn header_layout() {
        let f = FieldFile::new(2, 1, 3, FieldData::U16(vec![1, 2, 3, 4, 5, 6])).unwrap();
        let b = f.to_bytes();
        assert_eq!(&b[..16], &[b'D', b'G', b'M', b'F', 1, 3, 2, 0, 1, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 12);
        assert_eq!(&b[16..18], &[1, 0]);
    }

    #[test]
    fn roundtrip_is_bitwise_for_every_dtype() {
        let f64s = vec![0.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0, -1e300, f64::NAN, f64::INFINITY];
        let f = FieldFile::new(1, 1, 7, FieldData::F64(f64s.clone())).unwrap();
        match roundtrip(&f).data {
            FieldData::F64(v) => assert!(v.iter().zip(&f64s).all(|(a, b)| a.to_bits() == b.to_bits())),
            _ => panic!("dtype changed"),
        }
        let f32s = vec![0.1f32, -0.0, f32::MAX, f32::NAN];
        let f = FieldFile::new(4, 1, 1, FieldData::F32(f32s.clone())).unwrap();
        match roundtrip(&f).data {
            FieldData::F32(v) => assert!(v.iter().zip(&f32s).all(|(a, b)| a.to_bits() == b.to_bits())),
            _ => panic!("dtype changed"),
        }
        let f = FieldFile::new(1, 2, 2, FieldData::U16(vec![0, 255, 65535, 7])).unwrap();
        assert_eq!(roundtrip(&f), f);
    }

    #[test]
    fn garbled_input_reports_offsets() {
        let f = FieldFile::new(1, 2, 2, FieldData::F64(vec![1.0; 4])).unwrap();
        let mut b = f.to_bytes();
        let offset = |b: &[u8]| match FieldFile::from_bytes(b, Path::new("x")) {
            Err(CliError::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(offset(&b[..10]), 10);
        b[5] = 9;
        assert_eq!(offset(&b), 5);
        b[5] = 2;
        b[0] = b'X';
        assert_eq!(offset(&b), 0);
        b[0] = b'D';
        b.pop();
        assert_eq!(offset(&b), 16 + 31);
        b.extend_from_slice(&[0, 0]);
        assert_eq!(offset(&b), 16 + 32);
    }

    #[test]
    fn conversions() {
        let s = ScalarField::new(1, 2, vec![0.5, 1.5]).unwrap();
        assert_eq!(FieldFile::from_scalar(&s).to_scalar().unwrap(), s);
        let v = VectorField2::constant(2, 1, 0.25, -1.0);
        assert_eq!(FieldFile::from_vector(&v).to_vector().unwrap(), v);
        let m = LabelMask::new(1, 3, vec![0, 1, 255]).unwrap();
        assert_eq!(FieldFile::from_labels(&m).to_labels().unwrap(), m);
        assert!(FieldFile::from_labels(&m).to_scalar().is_err());
        assert!(FieldFile::from_vector(&v).to_scalar().is_err());
        let f32s = FieldFile::new(1, 1, 1, FieldData::F32(vec![0.25])).unwrap();
        assert_eq!(f32s.to_scalar().unwrap().data(), &[0.25]);
    }
}
