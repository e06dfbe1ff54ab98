use crate::autodiff::TensorError;
use crate::real::Real;

/// Dense row-major n-dimensional array (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> NdArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Single element of a one-element array.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Spatial extents of a `T×X×Y×Z×C` array.
    pub fn dims5(&self) -> Result<[usize; 5], TensorError> {
        <[usize; 5]>::try_from(self.shape.as_slice()).map_err(|_| {
            TensorError::ShapeMismatch(format!("expected rank-5 array, got {:?}", self.shape))
        })
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Result shape of broadcasting two equal-rank shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "rank mismatch {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(TensorError::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            ))),
        })
        .collect()
}

/// Strides of `shape` seen through `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = row_major_strides(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(base)
        .map(|((&s, &o), st)| if s == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Visit every index of `out_shape` in row-major order, reporting the
/// offsets into each operand given their (broadcast) strides.
fn for_each_offset2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let (ia, ib) = (sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut out = 0usize;
    loop {
        for j in 0..inner {
            f(out + j, oa + j * ia, ob + j * ib);
        }
        out += inner;
        // advance the outer odometer
        let mut axis = last;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            oa -= sa[axis] * idx[axis];
            ob -= sb[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn zip_broadcast<T: Real>(
    a: &NdArray<T>,
    b: &NdArray<T>,
    f: impl Fn(T, T) -> T,
) -> Result<NdArray<T>, TensorError> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(NdArray {
            shape: a.shape.clone(),
            data,
        });
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let n: usize = out_shape.iter().product();
    let mut data = vec![T::zero(); n];
    for_each_offset2(&out_shape, &sa, &sb, |o, ia, ib| {
        data[o] = f(a.data[ia], b.data[ib]);
    });
    Ok(NdArray {
        shape: out_shape,
        data,
    })
}

/// Broadcast `a` up to `out_shape`.
pub fn expand<T: Real>(a: &NdArray<T>, out_shape: &[usize]) -> Result<NdArray<T>, TensorError> {
    if a.shape == out_shape {
        return Ok(a.clone());
    }
    if broadcast_shape(&a.shape, out_shape)? != out_shape {
        return Err(TensorError::ShapeMismatch(format!(
            "cannot expand {:?} to {out_shape:?}",
            a.shape
        )));
    }
    let sa = broadcast_strides(&a.shape, out_shape);
    let zeros = vec![0; out_shape.len()];
    let n: usize = out_shape.iter().product();
    let mut data = vec![T::zero(); n];
    for_each_offset2(out_shape, &sa, &zeros, |o, ia, _| data[o] = a.data[ia]);
    Ok(NdArray {
        shape: out_shape.to_vec(),
        data,
    })
}

/// Sum `a` down to `shape`, the adjoint of [`expand`].
pub fn sum_to_shape<T: Real>(a: &NdArray<T>, shape: &[usize]) -> Result<NdArray<T>, TensorError> {
    if a.shape == shape {
        return Ok(a.clone());
    }
    if broadcast_shape(shape, &a.shape)? != a.shape {
        return Err(TensorError::ShapeMismatch(format!(
            "cannot reduce {:?} to {shape:?}",
            a.shape
        )));
    }
    let st = broadcast_strides(shape, &a.shape);
    let zeros = vec![0; shape.len()];
    let mut out = NdArray::zeros(shape);
    for_each_offset2(&a.shape, &st, &zeros, |o, it, _| out.data[it] += a.data[o]);
    Ok(out)
}
