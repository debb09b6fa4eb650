use crate::float::{gemm, Float, View};

/// Dense row-major matrix. Activations of shape `B x N x F` are stored as
/// `(B*N) x F` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Float> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn view(&self) -> View<'_, T> {
        View::new(&self.data, 0, self.rows, self.cols, self.cols)
    }

    /// `self @ rhs`
    pub fn matmul(&self, rhs: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros(self.rows, rhs.cols);
        gemm(T::one(), self.view(), rhs.view(), T::zero(), &mut out.data, 0, rhs.cols);
        out
    }

    /// `self @ rhs^T`
    pub fn matmul_t(&self, rhs: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros(self.rows, rhs.rows);
        gemm(T::one(), self.view(), rhs.view().t(), T::zero(), &mut out.data, 0, rhs.rows);
        out
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn add(&self, other: &Mat<T>) -> Mat<T> {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type, e.g. f32 pixel data into the model's scalar.
    pub fn cast<U: Float>(&self) -> Mat<U> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }

    /// Copies rows `start..start+count` into a new matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Mat<T> {
        Mat::from_vec(count, self.cols, self.data[start * self.cols..(start + count) * self.cols].to_vec())
    }
}
