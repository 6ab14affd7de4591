//! Dense activation storage, the valid-convolution forward primitive, and
//! conversions between spatial response blocks and flat per-point sample
//! matrices.
//!
//! Everything here is `f64` end to end; 32-bit precision exists only at the
//! file boundary (see [`crate::data`]).

use crate::error::{Error, Result};

/// Dense 4-D activation block laid out row-major as
/// `(n_images, n_filters, height, width)`.
///
/// Also doubles as storage for convolution weight blocks, where the four
/// axes read `(out_filters, in_channels, kernel_h, kernel_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTensor {
    data: Vec<f64>,
    dims: [usize; 4],
}

impl ResponseTensor {
    /// Build a tensor from raw row-major data. Every dim must be >= 1 and the
    /// element count must match the dim product.
    pub fn new(data: Vec<f64>, dims: [usize; 4]) -> Result<Self> {
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::DimMismatch {
                axis: AXIS_NAMES[pos],
                expected: 1,
                actual: 0,
            });
        }
        let count: usize = dims.iter().product();
        if data.len() != count {
            return Err(Error::DimMismatch {
                axis: "element count",
                expected: count,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { data, dims })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        let count: usize = dims.iter().product();
        Self::new(vec![0.0; count], dims)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n_images(&self) -> usize {
        self.dims[0]
    }

    pub fn n_filters(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, image: usize, filter: usize, y: usize, x: usize) -> usize {
        ((image * self.dims[1] + filter) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn get(&self, image: usize, filter: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(image, filter, y, x)]
    }

    #[inline]
    pub fn set(&mut self, image: usize, filter: usize, y: usize, x: usize, v: f64) {
        let i = self.index(image, filter, y, x);
        self.data[i] = v;
    }

    /// Contiguous `height * width` slice holding one filter map.
    pub fn map_slice(&self, image: usize, filter: usize) -> &[f64] {
        let start = self.index(image, filter, 0, 0);
        &self.data[start..start + self.dims[2] * self.dims[3]]
    }

    pub fn map_slice_mut(&mut self, image: usize, filter: usize) -> &mut [f64] {
        let start = self.index(image, filter, 0, 0);
        let len = self.dims[2] * self.dims[3];
        &mut self.data[start..start + len]
    }
}

const AXIS_NAMES: [&str; 4] = ["n_images", "n_filters", "height", "width"];

/// Flat view of a [`ResponseTensor`]: one row per (image, y, x) point, one
/// column per filter. Row order is image-major, then row-major spatial, so
/// predictor/response alignment across filters is positional.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSampleMatrix {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    provenance: Vec<(u32, u32, u32)>,
    source_dims: [usize; 4],
}

impl FilterSampleMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Row-major `n_rows x n_cols` storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    /// (image, y, x) origin of each row.
    pub fn provenance(&self) -> &[(u32, u32, u32)] {
        &self.provenance
    }

    pub fn source_dims(&self) -> [usize; 4] {
        self.source_dims
    }

    /// Copy of column `j` (all response values of filter `j`).
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| self.data[r * self.n_cols + j])
            .collect()
    }

    /// Restrict to the given rows, preserving order.
    pub fn take_rows(&self, rows: &[usize]) -> FilterSampleMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        let mut provenance = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            provenance.push(self.provenance[r]);
        }
        FilterSampleMatrix {
            data,
            n_rows: rows.len(),
            n_cols: self.n_cols,
            provenance,
            source_dims: self.source_dims,
        }
    }
}

/// Valid (no padding) 2-D convolution producing the linear pre-activation
/// response. `kernels` dims read `(out_filters, in_channels, kh, kw)` and the
/// input channel count must equal the input's filter count.
pub fn conv2d_forward(
    input: &ResponseTensor,
    kernels: &ResponseTensor,
    bias: &[f64],
    stride: usize,
) -> Result<ResponseTensor> {
    if stride == 0 {
        return Err(Error::DimMismatch {
            axis: "stride",
            expected: 1,
            actual: 0,
        });
    }
    let [n, c_in, h, w] = input.dims();
    let [c_out, kc, kh, kw] = kernels.dims();
    if kc != c_in {
        return Err(Error::DimMismatch {
            axis: "kernel input channels",
            expected: c_in,
            actual: kc,
        });
    }
    if kh > h {
        return Err(Error::DimMismatch {
            axis: "kernel height",
            expected: h,
            actual: kh,
        });
    }
    if kw > w {
        return Err(Error::DimMismatch {
            axis: "kernel width",
            expected: w,
            actual: kw,
        });
    }
    if bias.len() != c_out {
        return Err(Error::DimMismatch {
            axis: "bias length",
            expected: c_out,
            actual: bias.len(),
        });
    }
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = ResponseTensor::zeros([n, c_out, oh, ow])?;
    for img in 0..n {
        for f in 0..c_out {
            let b = bias[f];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for c in 0..c_in {
                        let in_map = input.map_slice(img, c);
                        let k_map = kernels.map_slice(f, c);
                        for ky in 0..kh {
                            let in_row = (oy * stride + ky) * w + ox * stride;
                            let k_row = ky * kw;
                            let in_s = &in_map[in_row..in_row + kw];
                            let k_s = &k_map[k_row..k_row + kw];
                            for (iv, kv) in in_s.iter().zip(k_s) {
                                acc += iv * kv;
                            }
                        }
                    }
                    out.set(img, f, oy, ox, acc);
                }
            }
        }
    }
    if !out.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("convolution output"));
    }
    Ok(out)
}

/// Flatten a response block into per-point rows. Column `j` holds the
/// flattened filter-`j` map values bit-exactly.
pub fn to_sample_matrix(responses: &ResponseTensor) -> FilterSampleMatrix {
    let [n, p, h, w] = responses.dims();
    let n_rows = n * h * w;
    let mut data = vec![0.0; n_rows * p];
    let mut provenance = Vec::with_capacity(n_rows);
    let mut r = 0;
    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                for f in 0..p {
                    data[r * p + f] = responses.get(img, f, y, x);
                }
                provenance.push((img as u32, y as u32, x as u32));
                r += 1;
            }
        }
    }
    FilterSampleMatrix {
        data,
        n_rows,
        n_cols: p,
        provenance,
        source_dims: responses.dims(),
    }
}

/// Exact inverse of [`to_sample_matrix`]. Rejects matrices whose rows are not
/// in canonical image-major order for `dims`.
pub fn from_sample_matrix(matrix: &FilterSampleMatrix, dims: [usize; 4]) -> Result<ResponseTensor> {
    let [n, p, h, w] = dims;
    if matrix.n_cols != p {
        return Err(Error::DimMismatch {
            axis: "n_filters",
            expected: p,
            actual: matrix.n_cols,
        });
    }
    if matrix.n_rows != n * h * w {
        return Err(Error::DimMismatch {
            axis: "sample rows",
            expected: n * h * w,
            actual: matrix.n_rows,
        });
    }
    let mut r = 0;
    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                if matrix.provenance[r] != (img as u32, y as u32, x as u32) {
                    return Err(Error::BadProvenance);
                }
                r += 1;
            }
        }
    }
    let mut out = ResponseTensor::zeros(dims)?;
    for (r, &(img, y, x)) in matrix.provenance.iter().enumerate() {
        for f in 0..p {
            out.set(
                img as usize,
                f,
                y as usize,
                x as usize,
                matrix.data[r * p + f],
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor_from(vals: &[f64], dims: [usize; 4]) -> ResponseTensor {
        ResponseTensor::new(vals.to_vec(), dims).unwrap()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let input = tensor_from(&[1.0, -2.0, 3.0, 0.5, 4.0, -1.0], [1, 1, 2, 3]);
        let kernel = tensor_from(&[1.0], [1, 1, 1, 1]);
        let out = conv2d_forward(&input, &kernel, &[0.0], 1).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_input_yields_bias() {
        let input = ResponseTensor::zeros([2, 1, 4, 4]).unwrap();
        let kernel = tensor_from(&[0.3, -0.1, 0.7, 0.9], [2, 1, 2, 2]);
        let out = conv2d_forward(&input, &kernel, &[1.5, -2.5], 1).unwrap();
        for img in 0..2 {
            assert!(out.map_slice(img, 0).iter().all(|&v| v == 1.5));
            assert!(out.map_slice(img, 1).iter().all(|&v| v == -2.5));
        }
    }

    #[test]
    fn hand_evaluated_two_by_two_sum() {
        let input = tensor_from(
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
            [1, 1, 3, 3],
        );
        let kernel = tensor_from(&[1.0; 4], [1, 1, 2, 2]);
        let out = conv2d_forward(&input, &kernel, &[0.0], 1).unwrap();
        assert_eq!(out.dims(), [1, 1, 2, 2]);
        assert_eq!(out.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let input = ResponseTensor::zeros([1, 1, 2, 2]).unwrap();
        let kernel = ResponseTensor::zeros([1, 1, 3, 3]).unwrap();
        let err = conv2d_forward(&input, &kernel, &[0.0], 1).unwrap_err();
        assert!(matches!(
            err,
            Error::DimMismatch {
                axis: "kernel height",
                ..
            }
        ));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let input = ResponseTensor::zeros([1, 3, 4, 4]).unwrap();
        let kernel = ResponseTensor::zeros([2, 2, 2, 2]).unwrap();
        let err = conv2d_forward(&input, &kernel, &[0.0, 0.0], 1).unwrap_err();
        assert!(matches!(
            err,
            Error::DimMismatch {
                axis: "kernel input channels",
                ..
            }
        ));
    }

    #[test]
    fn sample_matrix_shape_arithmetic() {
        let t = ResponseTensor::zeros([2, 3, 4, 4]).unwrap();
        let m = to_sample_matrix(&t);
        assert_eq!(m.n_rows(), 32);
        assert_eq!(m.n_cols(), 3);
    }

    #[test]
    fn single_filter_column_is_row_major_map() {
        let t = tensor_from(&[10.0, 20.0, 30.0, 40.0], [1, 1, 2, 2]);
        let m = to_sample_matrix(&t);
        assert_eq!(m.column(0), vec![10.0, 20.0, 30.0, 40.0]);
        assert_eq!(
            m.provenance(),
            &[(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]
        );
    }

    #[test]
    fn single_element_round_trip() {
        let t = tensor_from(&[7.25], [1, 1, 1, 1]);
        let back = from_sample_matrix(&to_sample_matrix(&t), t.dims()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn permuted_rows_are_rejected() {
        let t = tensor_from(&[1.0, 2.0, 3.0, 4.0], [1, 1, 2, 2]);
        let mut m = to_sample_matrix(&t);
        m.provenance.swap(0, 3);
        let err = from_sample_matrix(&m, t.dims()).unwrap_err();
        assert!(matches!(err, Error::BadProvenance));
    }

    #[test]
    fn zero_dim_is_rejected() {
        let err = ResponseTensor::new(vec![], [1, 0, 2, 2]).unwrap_err();
        assert!(matches!(
            err,
            Error::DimMismatch {
                axis: "n_filters",
                ..
            }
        ));
    }

    #[test]
    fn non_finite_data_is_rejected() {
        let err = ResponseTensor::new(vec![1.0, f64::NAN], [1, 1, 1, 2]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            n in 1usize..4,
            p in 1usize..5,
            h in 1usize..6,
            w in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dims = [n, p, h, w];
            let count = n * p * h * w;
            let data: Vec<f64> = (0..count).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let t = ResponseTensor::new(data, dims).unwrap();
            let m = to_sample_matrix(&t);
            let back = from_sample_matrix(&m, dims).unwrap();
            prop_assert_eq!(back.data(), t.data());
            let m2 = to_sample_matrix(&back);
            prop_assert_eq!(m2.data(), m.data());
        }
    }
}
