//! Dense row-major tensors and their little-endian binary encoding.
//!
//! The on-disk record is:
//!
//! ```text
//! "MSST" | u8 rank | u8 float width (4 or 8) | rank x u32 extent | values
//! ```
//!
//! with every multi-byte field little-endian.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MSST";

/// Floating point element type usable by the tensor kernels.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + AddAssign + Send + Sync + 'static
{
    /// Bytes per value in the binary encoding.
    const WIDTH: u8;

    /// `c = a * b + beta * c` on raw row-major strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`) regions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("float literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float converts to f64")
    }
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major matrix operand for [`gemm`]: `(data, rows, cols, transposed)`.
///
/// When `transposed` is set, `data` is stored as `cols x rows` and read transposed.
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c (+)= a * b` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.data.len(), a.rows * a.cols, "gemm lhs length");
    assert_eq!(b.data.len(), b.rows * b.cols, "gemm rhs length");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output length");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths were checked against the logical shapes above and the
    // output slice is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense N-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extents of a rank-4 `[B, C, H, W]` tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::shape(format!(
                "expected a rank-4 [B,C,H,W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channels `[start, start + len)` of a `[B, C, H, W]` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [b, c, h, w] = self.dims4()?;
        if start + len > c {
            return Err(Error::shape(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let base = (bi * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Self {
            shape: vec![b, len, h, w],
            data,
        })
    }

    /// Item `index` of the batch axis, keeping a leading extent of one.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let [b, c, h, w] = self.dims4()?;
        if index >= b {
            return Err(Error::shape(format!("batch index {index} out of range for {b}")));
        }
        let n = c * h * w;
        Ok(Self {
            shape: vec![1, c, h, w],
            data: self.data[index * n..(index + 1) * n].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list of tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(format!(
                    "cannot stack tensors of shapes {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.rank() + self.numel() * T::WIDTH as usize);
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.rank() as u8);
        out.push(T::WIDTH);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())
    }

    /// Reads one record. Values stored at the other float width are converted.
    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let mut header = [0u8; 6];
        r.read_exact(&mut header)?;
        if &header[..4] != TENSOR_MAGIC {
            return Err(IoError::new(ErrorKind::InvalidData, "bad tensor magic"));
        }
        let rank = header[4] as usize;
        let width = header[5];
        if width != 4 && width != 8 {
            return Err(IoError::new(
                ErrorKind::InvalidData,
                format!("unsupported float width {width}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * width as usize];
        r.read_exact(&mut raw)?;
        let data = if width == T::WIDTH {
            raw.chunks_exact(width as usize).map(T::read_le).collect()
        } else if width == 4 {
            raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect()
        };
        Ok(Self { shape, data })
    }

    pub fn decode(bytes: &[u8]) -> std::io::Result<Self> {
        let mut cursor = bytes;
        Self::read_from(&mut cursor)
    }
}

/// Byte length of the record [`Tensor::encode`] produces for this tensor.
pub fn encoded_len<T: Scalar>(t: &Tensor<T>) -> usize {
    6 + 4 * t.rank() + t.numel() * T::WIDTH as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn encode_layout() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, -2.5]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"MSST");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 4);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), encoded_len(&t));
    }

    #[test]
    fn decode_converts_width() {
        let t = Tensor::<f32>::from_vec(&[1, 3], vec![0.5, 1.5, -4.0]).unwrap();
        let back = Tensor::<f64>::decode(&t.encode()).unwrap();
        assert_eq!(back.shape(), &[1, 3]);
        assert_eq!(back.data(), &[0.5, 1.5, -4.0]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = Tensor::<f64>::zeros(&[2]).encode();
        bytes[0] = b'X';
        assert!(Tensor::<f64>::decode(&bytes).is_err());
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), &mut c, false);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], expect);
            }
        }
        // a^T stored as 3x2 read transposed gives the same 2x3 operand.
        let at: Vec<f64> = (0..3).flat_map(|k| (0..2).map(move |i| (i * 3 + k) as f64)).collect();
        let mut c2 = vec![0.0; 8];
        gemm(MatRef::t(&at, 2, 3), MatRef::new(&b, 3, 4), &mut c2, false);
        assert_eq!(c, c2);
    }

    proptest::proptest! {
        #[test]
        fn encode_decode_roundtrip(dims in proptest::collection::vec(1usize..4, 0..4), seed in 0u64..1000) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 7.0 - 50.0).collect();
            let t = Tensor::from_vec(&dims, data).unwrap();
            let back = Tensor::<f64>::decode(&t.encode()).unwrap();
            proptest::prop_assert_eq!(back, t);
        }
    }
}
