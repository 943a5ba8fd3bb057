//! Block-based compressive sampling.
//!
//! The image is cut into `block_dim x block_dim` blocks traversed in
//! row-major block order. Each block is vectorized column-major (pixel
//! `(r, c)` of the block lands at index `c * block_dim + r`) and projected
//! by the same row-orthonormal Gaussian matrix. Images whose dimensions are
//! not multiples of `block_dim` are padded by edge replication first.
//!
//! The matrix generator is ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with
//! `seed_from_u64(seed)`; entries are filled row-major with
//! `rand_distr::StandardNormal` and then row-orthonormalized by Householder
//! QR of the transpose, with signs fixed so that the triangular factor has a
//! nonnegative diagonal (the Gram-Schmidt result). Measurement files store
//! the matrix explicitly, so replay never depends on the generator.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{read_file, write_atomic, LeReader, LeWriter};
use crate::error::{Error, Result};
pub use crate::image::Image;

pub const DEFAULT_BLOCK_DIM: usize = 32;

const JCSM_MAGIC: &[u8; 4] = b"JCSM";
const JCSM_VERSION: u32 = 1;

/// Row-orthonormal Gaussian sensing operator shared by every block.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    block_dim: usize,
    subrate: f64,
    seed: u64,
    entries: DMatrix<f64>,
}

impl MeasurementMatrix {
    /// Wraps explicit entries, checking shape and row-orthonormality.
    pub fn from_entries(
        block_dim: usize,
        subrate: f64,
        seed: u64,
        entries: DMatrix<f64>,
    ) -> Result<Self> {
        let n = block_dim * block_dim;
        if entries.ncols() != n || entries.nrows() == 0 || entries.nrows() > n {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {}x{}, expected 1..={n} rows of {n} columns",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let m = Self {
            block_dim,
            subrate,
            seed,
            entries,
        };
        let err = m.orthonormality_error();
        if !(err <= 1e-6) {
            return Err(Error::invalid(format!(
                "measurement matrix rows are not orthonormal (error {err:e})"
            )));
        }
        Ok(m)
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    /// Pixels per block, `block_dim^2`.
    pub fn block_len(&self) -> usize {
        self.entries.ncols()
    }

    pub fn subrate(&self) -> f64 {
        self.subrate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Frobenius norm of `Phi Phi^T - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = &self.entries * self.entries.transpose();
        (gram - DMatrix::identity(self.rows(), self.rows())).norm()
    }

    pub fn is_full_rank_square(&self) -> bool {
        self.rows() == self.block_len()
    }
}

/// Number of measurement rows kept per block for a given subrate.
pub fn measurement_rows(block_dim: usize, subrate: f64) -> usize {
    (subrate * (block_dim * block_dim) as f64).round() as usize
}

pub fn generate_measurement_matrix(
    block_dim: usize,
    subrate: f64,
    seed: u64,
) -> Result<MeasurementMatrix> {
    if block_dim < 2 {
        return Err(Error::invalid(format!("block_dim must be >= 2, got {block_dim}")));
    }
    if !(subrate > 0.0 && subrate <= 1.0) {
        return Err(Error::invalid(format!("subrate must lie in (0, 1], got {subrate}")));
    }
    let n = block_dim * block_dim;
    let rows = measurement_rows(block_dim, subrate);
    if rows == 0 {
        return Err(Error::invalid(format!(
            "subrate {subrate} keeps zero rows for {block_dim}x{block_dim} blocks"
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut gaussian = DMatrix::<f64>::zeros(rows, n);
    for r in 0..rows {
        for c in 0..n {
            gaussian[(r, c)] = StandardNormal.sample(&mut rng);
        }
    }

    // Orthonormalize the rows: QR of the transpose, Q columns become rows.
    let qr = gaussian.transpose().qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..rows {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(MeasurementMatrix {
        block_dim,
        subrate,
        seed,
        entries: q.transpose(),
    })
}

/// Block measurements plus the operator that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    orig_width: usize,
    orig_height: usize,
    padded_width: usize,
    padded_height: usize,
    /// `rows x num_blocks`; column `b` holds the measurements of block `b`.
    blocks: DMatrix<f64>,
    matrix: MeasurementMatrix,
}

impl Measurements {
    pub fn new(
        orig_width: usize,
        orig_height: usize,
        padded_width: usize,
        padded_height: usize,
        blocks: DMatrix<f64>,
        matrix: MeasurementMatrix,
    ) -> Result<Self> {
        let bd = matrix.block_dim();
        if padded_width % bd != 0 || padded_height % bd != 0 {
            return Err(Error::DimensionMismatch(format!(
                "padded size {padded_width}x{padded_height} not a multiple of block size {bd}"
            )));
        }
        if orig_width == 0
            || orig_height == 0
            || orig_width > padded_width
            || orig_height > padded_height
            || padded_width - orig_width >= bd
            || padded_height - orig_height >= bd
        {
            return Err(Error::DimensionMismatch(format!(
                "original size {orig_width}x{orig_height} inconsistent with padded {padded_width}x{padded_height}"
            )));
        }
        let count = (padded_width / bd) * (padded_height / bd);
        if blocks.ncols() != count || blocks.nrows() != matrix.rows() {
            return Err(Error::DimensionMismatch(format!(
                "measurement blocks are {}x{}, expected {}x{count}",
                blocks.nrows(),
                blocks.ncols(),
                matrix.rows()
            )));
        }
        Ok(Self {
            orig_width,
            orig_height,
            padded_width,
            padded_height,
            blocks,
            matrix,
        })
    }

    pub fn orig_width(&self) -> usize {
        self.orig_width
    }

    pub fn orig_height(&self) -> usize {
        self.orig_height
    }

    pub fn padded_width(&self) -> usize {
        self.padded_width
    }

    pub fn padded_height(&self) -> usize {
        self.padded_height
    }

    pub fn matrix(&self) -> &MeasurementMatrix {
        &self.matrix
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.ncols()
    }

    /// Measurement vector of block `b` (row-major block order).
    pub fn block(&self, b: usize) -> DVector<f64> {
        self.blocks.column(b).into_owned()
    }

    pub fn blocks(&self) -> &DMatrix<f64> {
        &self.blocks
    }

    /// Same geometry and operator, different measurement values.
    pub fn with_blocks(&self, blocks: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.orig_width,
            self.orig_height,
            self.padded_width,
            self.padded_height,
            blocks,
            self.matrix.clone(),
        )
    }

    pub fn crop_to_original(&self, img: &Image) -> Image {
        img.crop(self.orig_width, self.orig_height)
    }

    /// Applies `Phi` blockwise to an image of padded size.
    pub fn forward(&self, img: &Image) -> Result<DMatrix<f64>> {
        if img.width() != self.padded_width || img.height() != self.padded_height {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs padded measurement grid {}x{}",
                img.width(),
                img.height(),
                self.padded_width,
                self.padded_height
            )));
        }
        Ok(self.matrix.entries() * image_to_blocks(img, self.matrix.block_dim()))
    }

    /// Applies `Phi^T` blockwise to arbitrary block vectors.
    pub fn adjoint_of(&self, blocks: &DMatrix<f64>) -> Image {
        let cols = self.matrix.entries().tr_mul(blocks);
        blocks_to_image(
            &cols,
            self.matrix.block_dim(),
            self.padded_width,
            self.padded_height,
        )
    }

    /// `Phi^T (Phi x - y)`: gradient of the data term `1/2 |y - Phi x|^2`.
    pub fn data_gradient(&self, img: &Image) -> Result<Image> {
        let residual = self.forward(img)? - &self.blocks;
        Ok(self.adjoint_of(&residual))
    }

    /// Replaces the measured component of `img` by the one implied by `y`:
    /// `x + Phi^T (y - Phi x)`, the closest measurement-consistent image.
    pub fn project_consistent(&self, img: &Image) -> Result<Image> {
        let correction = self.adjoint_of(&(&self.blocks - self.forward(img)?));
        Ok(img.zip_map(&correction, |a, b| a + b))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Serializes to the `.jcsm` layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.matrix.block_len();
        let rows = self.matrix.rows();
        let mut w = LeWriter::with_capacity(56 + 8 * rows * (n + self.num_blocks()));
        w.bytes(JCSM_MAGIC);
        w.u32(JCSM_VERSION);
        w.u32(self.matrix.block_dim() as u32);
        w.u32(rows as u32);
        w.u32(self.orig_width as u32);
        w.u32(self.orig_height as u32);
        w.u32(self.padded_width as u32);
        w.u32(self.padded_height as u32);
        w.u64(self.matrix.seed());
        w.f64(self.matrix.subrate());
        for r in 0..rows {
            for c in 0..n {
                w.f64(self.matrix.entries()[(r, c)]);
            }
        }
        for b in 0..self.num_blocks() {
            for v in self.blocks.column(b).iter() {
                w.f64(*v);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = LeReader::new(bytes);
        if r.bytes(4)? != JCSM_MAGIC {
            return Err("bad magic, expected JCSM".into());
        }
        let version = r.u32()?;
        if version != JCSM_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let block_dim = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let orig_width = r.u32()? as usize;
        let orig_height = r.u32()? as usize;
        let padded_width = r.u32()? as usize;
        let padded_height = r.u32()? as usize;
        let seed = r.u64()?;
        let subrate = r.f64()?;
        if block_dim < 2 || rows == 0 || rows > block_dim * block_dim {
            return Err(format!("bad geometry: block_dim {block_dim}, rows {rows}"));
        }
        if padded_width % block_dim != 0 || padded_height % block_dim != 0 {
            return Err("padded size is not a multiple of the block size".into());
        }
        let n = block_dim * block_dim;
        let num_blocks = (padded_width / block_dim) * (padded_height / block_dim);
        let expected = rows
            .checked_mul(n + num_blocks)
            .and_then(|v| v.checked_mul(8))
            .ok_or("header sizes overflow")?;
        if r.remaining() != expected {
            return Err(format!(
                "payload is {} bytes, header implies {expected}",
                r.remaining()
            ));
        }
        let mut entries = DMatrix::zeros(rows, n);
        for i in 0..rows {
            for j in 0..n {
                entries[(i, j)] = r.f64()?;
            }
        }
        let mut blocks = DMatrix::zeros(rows, num_blocks);
        for b in 0..num_blocks {
            for i in 0..rows {
                blocks[(i, b)] = r.f64()?;
            }
        }
        let matrix = MeasurementMatrix::from_entries(block_dim, subrate, seed, entries)
            .map_err(|e| e.to_string())?;
        Measurements::new(
            orig_width,
            orig_height,
            padded_width,
            padded_height,
            blocks,
            matrix,
        )
        .map_err(|e| e.to_string())
    }
}

fn padded_len(len: usize, block_dim: usize) -> usize {
    len.div_ceil(block_dim) * block_dim
}

/// Vectorizes every block of a padded image into the columns of a
/// `block_dim^2 x num_blocks` matrix (column-major within a block,
/// row-major block order).
pub fn image_to_blocks(img: &Image, block_dim: usize) -> DMatrix<f64> {
    let bw = img.width() / block_dim;
    let bh = img.height() / block_dim;
    let n = block_dim * block_dim;
    let mut out = DMatrix::zeros(n, bw * bh);
    for by in 0..bh {
        for bx in 0..bw {
            let b = by * bw + bx;
            let mut col = out.column_mut(b);
            for c in 0..block_dim {
                for r in 0..block_dim {
                    col[c * block_dim + r] = img.get(by * block_dim + r, bx * block_dim + c);
                }
            }
        }
    }
    out
}

/// Inverse of [`image_to_blocks`].
pub fn blocks_to_image(
    cols: &DMatrix<f64>,
    block_dim: usize,
    width: usize,
    height: usize,
) -> Image {
    let bw = width / block_dim;
    let mut img = Image::zeros(width, height);
    for b in 0..cols.ncols() {
        let (by, bx) = (b / bw, b % bw);
        let col = cols.column(b);
        for c in 0..block_dim {
            for r in 0..block_dim {
                img.set(by * block_dim + r, bx * block_dim + c, col[c * block_dim + r]);
            }
        }
    }
    img
}

/// Pads `img` by edge replication and measures every block with `mat`.
pub fn sample_image(img: &Image, mat: &MeasurementMatrix) -> Result<Measurements> {
    let bd = mat.block_dim();
    let pw = padded_len(img.width(), bd);
    let ph = padded_len(img.height(), bd);
    let padded = img.pad_replicate(pw, ph);
    let blocks = mat.entries() * image_to_blocks(&padded, bd);
    Measurements::new(img.width(), img.height(), pw, ph, blocks, mat.clone())
}

/// `Phi^T y` per block, at padded size.
pub fn adjoint(meas: &Measurements) -> Image {
    meas.adjoint_of(meas.blocks())
}

/// Minimum-energy consistent estimate `Phi^T (Phi Phi^T)^-1 y`, which is
/// `Phi^T y` for a row-orthonormal operator. Returned at padded size.
pub fn initial_estimate(meas: &Measurements) -> Image {
    adjoint(meas)
}
