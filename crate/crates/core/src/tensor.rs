//! Flat numeric buffers and the elementwise kernels reductions are built from.
//!
//! Collectives never look at shape: a [`Tensor`] is a named, contiguous run of
//! elements of one [`DType`]. Kernels fan out over rayon when the `parallel`
//! feature is enabled and the slice is long enough to amortize the split; each
//! output element depends on exactly one input pair, so both paths produce
//! identical bits.

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Slices shorter than this stay on the calling thread even with `parallel`.
pub const PARALLEL_MIN_LEN: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::F32, DType::F64, DType::I32, DType::I64];

    pub const fn byte_width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    pub const fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    /// Wire code. `0` is reserved for raw (untyped) payloads.
    pub const fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::I32 => 3,
            DType::I64 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::I32),
            4 => Some(DType::I64),
            _ => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I32 => "i32",
            DType::I64 => "i64",
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A scalar type that can live in a [`Tensor`] and travel over the wire.
pub trait Element: bytemuck::Pod + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    /// Integer addition wraps; callers keep inputs small enough that it never does.
    fn add(self, other: Self) -> Self;

    /// Only meaningful for float types; integer callers are rejected before reaching it.
    fn scale(self, factor: f64) -> Self;

    fn slice(data: &TensorData) -> Option<&[Self]>;
    fn slice_mut(data: &mut TensorData) -> Option<&mut [Self]>;
    fn wrap(values: Vec<Self>) -> TensorData;
}

macro_rules! impl_element {
    ($ty:ty, $variant:ident, add = $add:expr, scale = $scale:expr) => {
        impl Element for $ty {
            const DTYPE: DType = DType::$variant;

            #[inline(always)]
            fn add(self, other: Self) -> Self {
                $add(self, other)
            }

            #[inline(always)]
            fn scale(self, factor: f64) -> Self {
                $scale(self, factor)
            }

            fn slice(data: &TensorData) -> Option<&[Self]> {
                match data {
                    TensorData::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn slice_mut(data: &mut TensorData) -> Option<&mut [Self]> {
                match data {
                    TensorData::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn wrap(values: Vec<Self>) -> TensorData {
                TensorData::$variant(values)
            }
        }
    };
}

impl_element!(f32, F32, add = |a: f32, b: f32| a + b, scale = |a: f32, f: f64| a * f as f32);
impl_element!(f64, F64, add = |a: f64, b: f64| a + b, scale = |a: f64, f: f64| a * f);
impl_element!(i32, I32, add = i32::wrapping_add, scale = |a: i32, f: f64| (a as f64 * f) as i32);
impl_element!(i64, I64, add = i64::wrapping_add, scale = |a: i64, f: f64| (a as f64 * f) as i64);

/// Expands `$body` once per dtype with `$T` bound to the matching element type.
#[macro_export]
macro_rules! with_dtype {
    ($dtype:expr, $T:ident => $body:expr) => {
        match $dtype {
            $crate::tensor::DType::F32 => {
                type $T = f32;
                $body
            }
            $crate::tensor::DType::F64 => {
                type $T = f64;
                $body
            }
            $crate::tensor::DType::I32 => {
                type $T = i32;
                $body
            }
            $crate::tensor::DType::I64 => {
                type $T = i64;
                $body
            }
        }
    };
}

pub fn add_into_seq<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = d.add(*s);
    }
}

#[cfg(feature = "parallel")]
pub fn add_into_par<T: Element>(dst: &mut [T], src: &[T]) {
    use rayon::prelude::*;
    const SPLIT: usize = 1 << 13;
    dst.par_chunks_mut(SPLIT)
        .zip(src.par_chunks(SPLIT))
        .for_each(|(d, s)| add_into_seq(d, s));
}

/// `dst[i] += src[i]` for every element.
pub fn elementwise_add_into<T: Element>(dst: &mut [T], src: &[T]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::ContractViolation(format!(
            "elementwise add over {} and {} elements",
            dst.len(),
            src.len()
        )));
    }
    #[cfg(feature = "parallel")]
    if dst.len() >= PARALLEL_MIN_LEN {
        add_into_par(dst, src);
        return Ok(());
    }
    add_into_seq(dst, src);
    Ok(())
}

pub fn scale_seq<T: Element>(buf: &mut [T], factor: f64) {
    for v in buf {
        *v = v.scale(factor);
    }
}

#[cfg(feature = "parallel")]
pub fn scale_par<T: Element>(buf: &mut [T], factor: f64) {
    use rayon::prelude::*;
    buf.par_chunks_mut(1 << 13).for_each(|c| scale_seq(c, factor));
}

/// Multiplies every element by `factor`. Float dtypes only.
pub fn scale_slice<T: Element>(buf: &mut [T], factor: f64) -> Result<()> {
    if !T::DTYPE.is_float() {
        return Err(Error::Unsupported(format!(
            "scaling {} data; averaging is float-only",
            T::DTYPE
        )));
    }
    #[cfg(feature = "parallel")]
    if buf.len() >= PARALLEL_MIN_LEN {
        scale_par(buf, factor);
        return Ok(());
    }
    scale_seq(buf, factor);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn zeros(dtype: DType, len: usize) -> Self {
        with_dtype!(dtype, T => T::wrap(vec![bytemuck::Zeroable::zeroed(); len]))
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw element bytes in host order (little-endian on every supported target).
    pub fn as_bytes(&self) -> &[u8] {
        match self {
            TensorData::F32(v) => bytemuck::cast_slice(v),
            TensorData::F64(v) => bytemuck::cast_slice(v),
            TensorData::I32(v) => bytemuck::cast_slice(v),
            TensorData::I64(v) => bytemuck::cast_slice(v),
        }
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        match self {
            TensorData::F32(v) => bytemuck::cast_slice_mut(v),
            TensorData::F64(v) => bytemuck::cast_slice_mut(v),
            TensorData::I32(v) => bytemuck::cast_slice_mut(v),
            TensorData::I64(v) => bytemuck::cast_slice_mut(v),
        }
    }
}

macro_rules! impl_from_vec {
    ($($ty:ty),*) => {$(
        impl From<Vec<$ty>> for TensorData {
            fn from(v: Vec<$ty>) -> Self {
                <$ty as Element>::wrap(v)
            }
        }
    )*};
}
impl_from_vec!(f32, f64, i32, i64);

/// A named flat buffer; the unit of reduction. Identity is the name alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, data: impl Into<TensorData>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Usage("tensor name must be non-empty".into()));
        }
        Ok(Tensor {
            name,
            data: data.into(),
        })
    }

    pub fn zeros(name: impl Into<String>, dtype: DType, len: usize) -> Result<Self> {
        Self::new(name, TensorData::zeros(dtype, len))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn byte_size(&self) -> usize {
        self.len() * self.dtype().byte_width()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut TensorData {
        &mut self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn as_slice<T: Element>(&self) -> Option<&[T]> {
        T::slice(&self.data)
    }

    pub fn as_mut_slice<T: Element>(&mut self) -> Option<&mut [T]> {
        T::slice_mut(&mut self.data)
    }

    /// Multiplies every element by `factor`; integer tensors are rejected.
    pub fn scale_in_place(&mut self, factor: f64) -> Result<()> {
        with_dtype!(self.dtype(), T => scale_slice::<T>(T::slice_mut(&mut self.data).unwrap(), factor))
    }

    /// Adds `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dtype() != other.dtype() {
            return Err(Error::ContractViolation(format!(
                "adding {} into {}",
                other.dtype(),
                self.dtype()
            )));
        }
        with_dtype!(self.dtype(), T => elementwise_add_into::<T>(
            T::slice_mut(&mut self.data).unwrap(),
            T::slice(&other.data).unwrap(),
        ))
    }
}
