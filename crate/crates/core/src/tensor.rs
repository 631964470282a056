//! Dense tensors and the `TNSR` container format.
//!
//! Layout of a `.tnsr` stream:
//!
//! ```text
//! "TNSR"            4 bytes magic
//! 0x01              1 byte version
//! L                 u32 little-endian header length
//! header            L bytes of UTF-8 text, `key=value` lines
//! payload           row-major elements, little-endian
//! ```
//!
//! The header holds exactly two keys, `dtype` (`float32`, `uint16` or
//! `uint8`) and `shape` (comma-separated positive integers), each on its own
//! line terminated by `\n`, in that order. See `FORMAT.md` at the repository
//! root for the full grammar.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

/// Upper bound on the header length accepted by the reader.
const MAX_HEADER_LEN: u32 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    U16,
    U8,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "float32",
            DType::U16 => "uint16",
            DType::U8 => "uint8",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "float32" => Ok(DType::F32),
            "uint16" => Ok(DType::U16),
            "uint8" => Ok(DType::U8),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U16(Vec<u16>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U16(_) => DType::U16,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// Row-major tensor with a validated shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor must have at least one dimension".into()));
        }
        if let Some(i) = shape.iter().position(|&s| s == 0) {
            return Err(Error::Shape(format!("dimension {i} has size 0")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_u16(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        Self::new(shape, TensorData::U16(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u16(&self) -> Option<&[u16]> {
        match &self.data {
            TensorData::U16(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    fn header_text(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        format!("dtype={}\nshape={}\n", self.dtype().name(), dims.join(","))
    }

    fn payload_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
        }
    }
}

/// Serializes `t` into `sink`, returning the number of bytes written.
pub fn write_tensor<W: Write>(t: &DenseTensor, sink: &mut W) -> Result<u64> {
    let header = t.header_text();
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Format("header longer than u32::MAX".into()))?;

    let mut offset = 0u64;
    let mut put = |bytes: &[u8], offset: &mut u64| -> Result<()> {
        sink.write_all(bytes).map_err(|e| Error::io(*offset, e))?;
        *offset += bytes.len() as u64;
        Ok(())
    };
    put(MAGIC, &mut offset)?;
    put(&[VERSION], &mut offset)?;
    put(&header_len.to_le_bytes(), &mut offset)?;
    put(header.as_bytes(), &mut offset)?;
    put(&t.payload_bytes(), &mut offset)?;
    sink.flush().map_err(|e| Error::io(offset, e))?;
    Ok(offset)
}

pub fn read_tensor<R: Read>(source: &mut R) -> Result<DenseTensor> {
    let mut prefix = [0u8; 9];
    read_exact_or_format(source, &mut prefix, "preamble")?;
    if &prefix[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"TNSR\"",
            String::from_utf8_lossy(&prefix[..4])
        )));
    }
    if prefix[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", prefix[4])));
    }
    let header_len = u32::from_le_bytes([prefix[5], prefix[6], prefix[7], prefix[8]]);
    if header_len > MAX_HEADER_LEN {
        return Err(Error::Format(format!("header length {header_len} too large")));
    }
    let mut header = vec![0u8; header_len as usize];
    read_exact_or_format(source, &mut header, "header")?;
    let header =
        String::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let (dtype, shape) = parse_header(&header)?;

    let count: usize = shape.iter().product();
    let expected = (count * dtype.size_of()) as u64;
    let mut payload = Vec::with_capacity(expected as usize);
    source
        .take(expected + 1)
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(9 + header_len as u64, e))?;
    if payload.len() as u64 != expected {
        // One extra byte was requested so trailing garbage is caught as well.
        let mut actual = payload.len() as u64;
        if actual > expected {
            actual += std::io::copy(source, &mut std::io::sink()).unwrap_or(0);
        }
        return Err(Error::Corrupt { expected, actual });
    }

    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::U16 => TensorData::U16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload),
    };
    DenseTensor::new(shape, data)
}

fn read_exact_or_format<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("stream ended inside the {what}"))
        } else {
            Error::io(0, e)
        }
    })
}

fn parse_header(header: &str) -> Result<(DType, Vec<usize>)> {
    let mut dtype = None;
    let mut shape = None;
    for line in header.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
        match key {
            "dtype" => dtype = Some(DType::parse(value)?),
            "shape" => {
                let dims = value
                    .split(',')
                    .map(|s| {
                        s.parse::<usize>()
                            .ok()
                            .filter(|&d| d > 0)
                            .ok_or_else(|| Error::Format(format!("bad dimension {s:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(dims);
            }
            other => return Err(Error::Format(format!("unknown header key {other:?}"))),
        }
    }
    match (dtype, shape) {
        (Some(d), Some(s)) => Ok((d, s)),
        _ => Err(Error::Format("header must define dtype and shape".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(t: &DenseTensor) -> Vec<u8> {
        let mut buf = Vec::new();
        let n = write_tensor(t, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        buf
    }

    #[test]
    fn zero_scalar_layout() {
        let t = DenseTensor::from_f32(vec![1], vec![0.0]).unwrap();
        let buf = encode(&t);
        let header = "dtype=float32\nshape=1\n";
        assert_eq!(&buf[..4], b"TNSR");
        assert_eq!(buf[4], 1);
        assert_eq!(u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize, header.len());
        assert_eq!(&buf[9..9 + header.len()], header.as_bytes());
        assert_eq!(buf.len(), 9 + header.len() + 4);
        assert_eq!(&buf[buf.len() - 4..], &[0, 0, 0, 0]);
    }

    #[test]
    fn u16_payload_is_little_endian() {
        let t = DenseTensor::from_u16(vec![2, 2], vec![1, 2, 3, 4]).unwrap();
        let buf = encode(&t);
        assert_eq!(&buf[buf.len() - 8..], &[1, 0, 2, 0, 3, 0, 4, 0]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let t = DenseTensor::from_u8(vec![3], vec![1, 2, 3]).unwrap();
        let mut buf = encode(&t);
        buf[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_names_sizes() {
        let t = DenseTensor::from_f32(vec![2, 3], vec![1.0; 6]).unwrap();
        let buf = encode(&t);
        let cut = &buf[..buf.len() - 5];
        match read_tensor(&mut &cut[..]) {
            Err(Error::Corrupt { expected, actual }) => {
                assert_eq!(expected, 24);
                assert_eq!(actual, 19);
            }
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_corruption() {
        let t = DenseTensor::from_u8(vec![2], vec![7, 8]).unwrap();
        let mut buf = encode(&t);
        buf.extend_from_slice(&[0, 0, 0]);
        match read_tensor(&mut buf.as_slice()) {
            Err(Error::Corrupt { expected, actual }) => assert_eq!((expected, actual), (2, 5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DenseTensor::from_u8(vec![0, 2], vec![]).is_err());
        assert!(DenseTensor::from_u8(vec![], vec![]).is_err());
        assert!(DenseTensor::from_u8(vec![2, 2], vec![1, 2, 3]).is_err());
    }

    struct FailingSink {
        budget: usize,
    }

    impl Write for FailingSink {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            if self.budget == 0 {
                return Err(std::io::Error::other("disk full"));
            }
            let n = buf.len().min(self.budget);
            self.budget -= n;
            Ok(n)
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn sink_failure_reports_offset() {
        let t = DenseTensor::from_f32(vec![4], vec![1.0; 4]).unwrap();
        match write_tensor(&t, &mut FailingSink { budget: 9 }) {
            Err(Error::Io { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
    }

    fn arb_tensor() -> impl Strategy<Value = DenseTensor> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                    .prop_map(TensorData::F32),
                prop::collection::vec(any::<u16>(), n).prop_map(TensorData::U16),
                prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
            ]
            .prop_map(move |data| DenseTensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(t in arb_tensor()) {
            let buf = encode(&t);
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.dtype(), t.dtype());
            prop_assert_eq!(back.payload_bytes(), t.payload_bytes());
        }
    }
}
