//! IDX ingestion, stratified validation splits, PCA and the lift of
//! first-layer weights from PCA space back to pixels.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{gemm, Matrix, Scalar};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated file, expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("validation size {requested} cannot be drawn: {reason}")]
    ValTooLarge { requested: usize, reason: String },
    #[error("PCA dimension {requested} exceeds limit {limit} (min of feature count and sample count)")]
    DprimeTooLarge { requested: usize, limit: usize },
    #[error("shape mismatch in {op}: expected {expected} columns, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("eigendecomposition produced non-finite values")]
    NonFinite,
}

/// Images (one per row, pixels in `[0, 1]`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f32> {
    pub name: String,
    pub images: Matrix<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    /// Panics when the label count differs from the image count.
    pub fn new(name: impl Into<String>, images: Matrix<T>, labels: Vec<usize>) -> Self {
        assert_eq!(images.rows(), labels.len(), "Dataset: one label per image");
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        Self {
            name: name.into(),
            images,
            labels,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Self {
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self {
            name: self.name.clone(),
            images: self.images.vstack(&other.images),
            labels,
            classes: self.classes.max(other.classes),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes).map_err(io_err)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::TruncatedFile {
            path: path.to_path_buf(),
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn payload<'b>(bytes: &'b [u8], header: usize, len: usize, path: &Path) -> Result<&'b [u8], DataError> {
    bytes.get(header..header + len).ok_or_else(|| DataError::TruncatedFile {
        path: path.to_path_buf(),
        expected: header + len,
        found: bytes.len(),
    })
}

/// Decodes an IDX image container. `path` is only used in error messages.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    check_magic(bytes, IMAGE_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let pixels = payload(bytes, 16, n * rows * cols, path)?;
    Ok((n, rows, cols, pixels.to_vec()))
}

/// Decodes an IDX label container.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    check_magic(bytes, LABEL_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    Ok(payload(bytes, 8, n, path)?.to_vec())
}

/// Loads an image/label IDX pair; files ending in `.gz` are decompressed.
pub fn load_idx(name: &str, images_path: &Path, labels_path: &Path) -> Result<Dataset<f32>, DataError> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let images = Matrix::from_vec(n, rows * cols, pixels.iter().map(|&p| p as f32 / 255.0).collect());
    Ok(Dataset::new(
        name,
        images,
        labels.into_iter().map(usize::from).collect(),
    ))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, flate2::Compression::fast());
        enc.write_all(bytes).map_err(io_err)?;
        enc.finish().map_err(io_err)?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(io_err)?;
    }
    Ok(())
}

/// Writes `n` images of `rows × cols` bytes as an IDX container.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<(), DataError> {
    assert_eq!(
        pixels.len() % (rows * cols).max(1),
        0,
        "pixel count must be a multiple of rows·cols"
    );
    let n = pixels.len() / (rows * cols).max(1);
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(pixels);
    write_bytes(path, &bytes)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    for v in [LABEL_MAGIC, labels.len() as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(labels);
    write_bytes(path, &bytes)
}

/// Index sets of a stratified split; both sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Draws `val_size` indices with an equal share per class (remainder to
/// the lowest class ids), shuffled per class under `seed`.
pub fn split_indices(labels: &[usize], classes: usize, val_size: usize, seed: u64) -> Result<SplitIndices, DataError> {
    if val_size >= labels.len().max(1) && val_size > 0 {
        return Err(DataError::ValTooLarge {
            requested: val_size,
            reason: format!("only {} examples available", labels.len()),
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let present: Vec<usize> = (0..classes).filter(|&c| !by_class[c].is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = Vec::with_capacity(val_size);
    if val_size > 0 {
        let share = val_size / present.len();
        let extra = val_size % present.len();
        for (rank, &c) in present.iter().enumerate() {
            let quota = share + usize::from(rank < extra);
            let members = &mut by_class[c];
            if quota > members.len() {
                return Err(DataError::ValTooLarge {
                    requested: val_size,
                    reason: format!("class {c} has {} examples but its share is {quota}", members.len()),
                });
            }
            members.shuffle(&mut rng);
            val.extend_from_slice(&members[..quota]);
        }
    }
    val.sort_unstable();
    let mut in_val = vec![false; labels.len()];
    val.iter().for_each(|&i| in_val[i] = true);
    let train = (0..labels.len()).filter(|&i| !in_val[i]).collect();
    Ok(SplitIndices { train, val })
}

pub fn split_train_val<T: Scalar>(
    data: &Dataset<T>,
    val_size: usize,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>), DataError> {
    let idx = split_indices(&data.labels, data.classes, val_size, seed)?;
    Ok((data.subset(&idx.train), data.subset(&idx.val)))
}

/// Mean and leading principal directions of a training matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    mean: Vec<f64>,
    components: Matrix<f64>,
    explained_variance: Vec<f64>,
    total_variance: f64,
}

impl PcaBasis {
    /// A basis from explicit parts; `components` is `d × d′` and should have
    /// orthonormal columns.
    pub fn from_parts(mean: Vec<f64>, components: Matrix<f64>) -> Result<Self, DataError> {
        if mean.len() != components.rows() {
            return Err(DataError::ShapeMismatch {
                op: "PcaBasis::from_parts",
                expected: components.rows(),
                got: mean.len(),
            });
        }
        let k = components.cols();
        Ok(Self {
            mean,
            components,
            explained_variance: vec![f64::NAN; k],
            total_variance: f64::NAN,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `d × d′`, columns orthonormal, ordered by decreasing variance.
    pub fn components(&self) -> &Matrix<f64> {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Share of total variance captured by the retained components.
    pub fn explained_variance_ratio(&self) -> f64 {
        self.explained_variance.iter().sum::<f64>() / self.total_variance
    }

    /// `μᵀU` as a row.
    fn mean_projection(&self) -> Matrix<f64> {
        Matrix::from_vec(1, self.mean.len(), self.mean.clone()).matmul(&self.components)
    }

    /// `(X − 1μᵀ)·U`, computed as `X·U − 1·(μᵀU)`.
    pub fn project<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>, DataError> {
        if x.cols() != self.input_dim() {
            return Err(DataError::ShapeMismatch {
                op: "project",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let u: Matrix<T> = self.components.cast();
        let shift = self.mean_projection();
        let mut z = x.matmul(&u);
        for r in 0..z.rows() {
            for (v, s) in z.row_mut(r).iter_mut().zip(shift.as_slice()) {
                *v = *v - T::from_f64(*s);
            }
        }
        Ok(z)
    }

    /// `Z·Uᵀ + 1μᵀ`: the point in input space whose projection is `Z`.
    pub fn reconstruct<T: Scalar>(&self, z: &Matrix<T>) -> Result<Matrix<T>, DataError> {
        if z.cols() != self.output_dim() {
            return Err(DataError::ShapeMismatch {
                op: "reconstruct",
                expected: self.output_dim(),
                got: z.cols(),
            });
        }
        let mut x = z.cast::<f64>().matmul_nt(&self.components);
        for r in 0..x.rows() {
            for (v, m) in x.row_mut(r).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(x.cast())
    }

    /// Lifts bias-first weights `W_z` ((d′+1) × h) acting on `[1, z]` to
    /// weights ((d+1) × h) acting on `[1, x]`, so that
    /// `[1, x]·W = [1, z]·W_z` with `z = Uᵀ(x − μ)`.
    ///
    /// Pixel rows are `U·W_nb`; the bias row absorbs the mean as
    /// `b − (μᵀU)·W_nb`.
    pub fn back_project_w1<T: Scalar>(&self, w_z: &Matrix<T>) -> Result<Matrix<T>, DataError> {
        if w_z.rows() != self.output_dim() + 1 {
            return Err(DataError::ShapeMismatch {
                op: "back_project_w1",
                expected: self.output_dim() + 1,
                got: w_z.rows(),
            });
        }
        let w = w_z.cast::<f64>();
        let bias = w.row_range(0, 1);
        let body = w.row_range(1, w.rows());
        let pixels = self.components.matmul(&body);
        let bias = bias.sub(&self.mean_projection().matmul(&body));
        Ok(bias.vstack(&pixels).cast())
    }
}

/// Rows per chunk when accumulating the covariance.
const COVARIANCE_CHUNK: usize = 2048;

/// Fits the top `d_out` principal directions of `x` (rows are samples).
///
/// Works from the covariance eigendecomposition in double precision; the
/// eigenvectors of `XcᵀXc` are the right singular vectors of `Xc`. Each
/// component's largest-magnitude entry is made positive.
pub fn pca_fit<T: Scalar>(x: &Matrix<T>, d_out: usize) -> Result<PcaBasis, DataError> {
    let (n, d) = x.shape();
    let limit = d.min(n);
    if d_out > limit {
        return Err(DataError::DprimeTooLarge {
            requested: d_out,
            limit,
        });
    }
    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);

    let mut cov = Matrix::<f64>::zeros(d, d);
    for start in (0..n).step_by(COVARIANCE_CHUNK) {
        let end = (start + COVARIANCE_CHUNK).min(n);
        let mut chunk = Matrix::<f64>::zeros(end - start, d);
        for r in start..end {
            for ((c, v), m) in chunk.row_mut(r - start).iter_mut().zip(x.row(r)).zip(&mean) {
                *c = v.as_f64() - m;
            }
        }
        gemm(1.0, chunk.t(), chunk.view(), 1.0, cov.view_mut());
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = DMatrix::from_fn(d, d, |r, c| 0.5 * (cov[(r, c)] + cov[(c, r)]) / denom);
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFinite);
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order.truncate(d_out);

    let mut components = Matrix::<f64>::zeros(d, d_out);
    let mut explained_variance = Vec::with_capacity(d_out);
    for (j, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = (0..d)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[(i, j)] = sign * col[i];
        }
        explained_variance.push(eig.eigenvalues[src].max(0.0));
    }
    Ok(PcaBasis {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        dims.iter().for_each(|d| b.extend_from_slice(&d.to_be_bytes()));
        b
    }

    #[test]
    fn magic_bytes_are_format_constants() {
        assert_eq!(IMAGE_MAGIC.to_be_bytes(), [0, 0, 8, 3]);
        assert_eq!(LABEL_MAGIC.to_be_bytes(), [0, 0, 8, 1]);
    }

    #[test]
    fn parses_images_and_rejects_label_magic() {
        let mut b = header(IMAGE_MAGIC, &[2, 1, 2]);
        b.extend_from_slice(&[0, 255, 10, 20]);
        let (n, r, c, px) = parse_idx_images(&b, Path::new("x")).unwrap();
        assert_eq!((n, r, c, px), (2, 1, 2, vec![0, 255, 10, 20]));
        b[3] = 1;
        assert!(matches!(
            parse_idx_images(&b, Path::new("x")),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_and_header_are_reported() {
        let mut b = header(IMAGE_MAGIC, &[3, 2, 2]);
        b.extend_from_slice(&[1; 11]);
        assert!(matches!(
            parse_idx_images(&b, Path::new("x")),
            Err(DataError::TruncatedFile {
                expected: 28,
                found: 27,
                ..
            })
        ));
        assert!(matches!(
            parse_idx_labels(&[0, 0, 8], Path::new("x")),
            Err(DataError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn split_is_stratified_and_partitions() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let s = split_indices(&labels, 4, 10, 3).unwrap();
        assert_eq!(s.val.len(), 10);
        assert_eq!(s.train.len(), 90);
        let mut per = [0; 4];
        s.val.iter().for_each(|&i| per[labels[i]] += 1);
        assert_eq!(per, [3, 3, 2, 2]);
        let mut all = [s.train.clone(), s.val.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn zero_validation_keeps_everything() {
        let labels = vec![0, 1, 1, 0];
        let s = split_indices(&labels, 2, 0, 0).unwrap();
        assert!(s.val.is_empty());
        assert_eq!(s.train, vec![0, 1, 2, 3]);
    }

    #[test]
    fn oversized_validation_is_rejected() {
        assert!(matches!(
            split_indices(&[0, 0, 0, 1], 2, 4, 0),
            Err(DataError::ValTooLarge { .. })
        ));
        // shares are 2 and 1, but class 0 has a single member
        assert!(matches!(
            split_indices(&[0, 1, 1, 1], 2, 3, 0),
            Err(DataError::ValTooLarge { .. })
        ));
    }

    #[test]
    fn pca_aligns_with_dominant_axis() {
        // zero-mean cloud stretched along the first axis
        let x = Matrix::<f64>::from_rows(&[
            &[10.0, 0.5, 0.0],
            &[-10.0, -0.5, 0.0],
            &[5.0, -0.5, 0.1],
            &[-5.0, 0.5, -0.1],
        ]);
        let basis = pca_fit(&x, 1).unwrap();
        let u = basis.components();
        assert!((u[(0, 0)] - 1.0).abs() < 1e-3);
        assert!(u[(0, 0)] > 0.0);
    }

    #[test]
    fn dprime_limit_is_enforced() {
        let x = Matrix::<f64>::zeros(3, 5);
        assert!(matches!(
            pca_fit(&x, 4),
            Err(DataError::DprimeTooLarge { limit: 3, .. })
        ));
    }

    #[test]
    fn identity_basis_projects_to_centred_input_and_back_projects_unchanged() {
        let basis = PcaBasis::from_parts(vec![0.0; 3], Matrix::identity(3)).unwrap();
        let x = Matrix::<f64>::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        assert_eq!(basis.project(&x).unwrap(), x);
        let w = Matrix::<f64>::from_fn(4, 2, |r, c| r as f64 - c as f64 * 0.5);
        assert_eq!(basis.back_project_w1(&w).unwrap(), w);
    }

    #[test]
    fn back_projection_hand_example() {
        // d = 2, d′ = 1, u = (0.6, 0.8), μ = (1, 2), W_z = [[b],[w]] = [[0.5],[2]].
        // z = 0.6(x₁−1) + 0.8(x₂−2) so [1,z]W_z = 0.5 + 2z
        //   = (0.5 − 2·(0.6 + 1.6)) + 1.2x₁ + 1.6x₂ = −3.9 + 1.2x₁ + 1.6x₂.
        let basis = PcaBasis::from_parts(vec![1.0, 2.0], Matrix::from_rows(&[&[0.6], &[0.8]])).unwrap();
        let w = basis
            .back_project_w1(&Matrix::<f64>::from_rows(&[&[0.5], &[2.0]]))
            .unwrap();
        let expected = Matrix::from_rows(&[&[-3.9], &[1.2], &[1.6]]);
        assert!(w.sub(&expected).max_abs() < 1e-14);
    }
}
