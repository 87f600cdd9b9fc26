use crate::error::{contract, Result};

/// Dense row-major array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(contract(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(contract(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Strided matrix operand: (rows stride, column stride).
pub(crate) type Strides = (isize, isize);

/// C ← α·A·B + β·C with A m×k, B k×n, C m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, s: Strides| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * s.0 + (cols - 1) as isize * s.1) as usize + 1
        }
    };
    assert!(a.len() >= extent(m, k, sa), "gemm: A too short");
    assert!(b.len() >= extent(k, n, sb), "gemm: B too short");
    assert!(c.len() >= extent(m, n, sc), "gemm: C too short");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * sc.0 + j as isize * sc.1) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: extents checked above; all strides are non-negative.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.row_len(), 3);
        assert!(t.clone().reshape(vec![3, 2]).is_ok());
        assert!(t.reshape(vec![4]).is_err());
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 4x3, used transposed
        let mut c = vec![1.0; 8];
        gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (1, 3), 2.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 2.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * b[j * 3 + k];
                }
                assert_eq!(c[i * 4 + j], s);
            }
        }
        let mut c = vec![3.0; 4];
        gemm(2, 0, 2, 1.0, &[], (0, 1), &[], (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, vec![0.0; 4]);
    }
}
