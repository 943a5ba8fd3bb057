//! Nonlocal patch grouping and weighted aggregation.
//!
//! Patches are addressed by their top-left pixel `(row, col)` and vectorized
//! column-major (pixel `(r, c)` of the patch lands at `c * patch_size + r`).

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::image::Image;

/// Geometry of the grouping step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingParams {
    pub patch_size: usize,
    pub group_size: usize,
    pub stride: usize,
    pub window: usize,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            patch_size: 8,
            group_size: 60,
            stride: 4,
            window: 40,
        }
    }
}

impl GroupingParams {
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::invalid("patch_size must be positive"));
        }
        if self.group_size < 2 {
            return Err(Error::invalid("group_size must be at least 2"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if self.window < self.patch_size {
            return Err(Error::invalid(format!(
                "window {} smaller than patch size {}",
                self.window, self.patch_size
            )));
        }
        Ok(())
    }
}

/// Positions of one group. `members[0]` is the reference patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    pub reference: (usize, usize),
    pub members: Vec<(usize, usize)>,
    pub patch_size: usize,
    /// Set when the search window held too few candidates and the whole
    /// image was searched instead.
    pub widened: bool,
}

impl GroupIndex {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        let p = self.patch_size;
        for &(r, c) in &self.members {
            if p == 0 || r + p > height || c + p > width {
                return Err(Error::invalid(format!(
                    "patch at ({r}, {c}) of size {p} exceeds {width}x{height} image"
                )));
            }
        }
        Ok(())
    }
}

/// `n x m` matrix of vectorized patches, one column per group member.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroup {
    pub data: DMatrix<f64>,
    pub index: GroupIndex,
}

fn axis_positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Row-major grid of reference positions with the given stride. The last
/// valid row and column are always included so every pixel is covered.
pub fn reference_positions(
    width: usize,
    height: usize,
    patch_size: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::invalid("patch_size and stride must be positive"));
    }
    if patch_size > width.min(height) {
        return Err(Error::invalid(format!(
            "patch size {patch_size} exceeds {width}x{height} image"
        )));
    }
    let rows = axis_positions(height, patch_size, stride);
    let cols = axis_positions(width, patch_size, stride);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// Copies the patch at `(row, col)` into `out`, column-major.
#[inline]
pub fn extract_patch(img: &Image, row: usize, col: usize, patch_size: usize, out: &mut [f64]) {
    let w = img.width();
    let px = img.pixels();
    for c in 0..patch_size {
        for r in 0..patch_size {
            out[c * patch_size + r] = px[(row + r) * w + col + c];
        }
    }
}

#[inline]
fn patch_distance(img: &Image, reference: &[f64], row: usize, col: usize, p: usize) -> f64 {
    let w = img.width();
    let px = img.pixels();
    let mut sum = 0.0;
    for c in 0..p {
        let ref_col = &reference[c * p..(c + 1) * p];
        for (r, &rv) in ref_col.iter().enumerate() {
            let d = px[(row + r) * w + col + c] - rv;
            sum += d * d;
        }
    }
    sum
}

/// Inclusive range of top-left coordinates of a `window`-wide search
/// region centered on `center`, clipped to `[0, max]`.
fn window_range(center: usize, window: usize, max: usize) -> (usize, usize) {
    let half = window / 2;
    let lo = center.saturating_sub(half);
    let hi = (center + window - half - 1).min(max);
    (lo, hi)
}

fn rank_candidates(
    img: &Image,
    reference: (usize, usize),
    reference_patch: &[f64],
    p: usize,
    rows: (usize, usize),
    cols: (usize, usize),
) -> Vec<(f64, (usize, usize))> {
    let mut scored = Vec::with_capacity((rows.1 + 1 - rows.0) * (cols.1 + 1 - cols.0));
    for r in rows.0..=rows.1 {
        for c in cols.0..=cols.1 {
            if (r, c) == reference {
                continue;
            }
            scored.push((patch_distance(img, reference_patch, r, c, p), (r, c)));
        }
    }
    scored
}

/// Finds the `group_size - 1` patches closest (squared Euclidean distance)
/// to the reference patch among all fully-inside patches whose top-left lies
/// in the `window x window` region centered on the reference. Ties are
/// broken by row-major candidate order. If the window holds too few
/// candidates the whole image is searched and `widened` is set; an image
/// with fewer patch positions than `group_size` yields a smaller group.
pub fn block_match(
    img: &Image,
    reference: (usize, usize),
    patch_size: usize,
    group_size: usize,
    window: usize,
) -> Result<GroupIndex> {
    let (w, h) = (img.width(), img.height());
    if group_size < 2 {
        return Err(Error::invalid("group_size must be at least 2"));
    }
    if window < patch_size {
        return Err(Error::invalid("window must be at least the patch size"));
    }
    if patch_size == 0 || patch_size > w.min(h) {
        return Err(Error::invalid(format!(
            "patch size {patch_size} does not fit a {w}x{h} image"
        )));
    }
    let (r0, c0) = reference;
    let (max_r, max_c) = (h - patch_size, w - patch_size);
    if r0 > max_r || c0 > max_c {
        return Err(Error::invalid(format!(
            "reference ({r0}, {c0}) outside valid patch positions"
        )));
    }

    let mut reference_patch = vec![0.0; patch_size * patch_size];
    extract_patch(img, r0, c0, patch_size, &mut reference_patch);

    let rows = window_range(r0, window, max_r);
    let cols = window_range(c0, window, max_c);
    let window_count = (rows.1 + 1 - rows.0) * (cols.1 + 1 - cols.0) - 1;
    let widened = window_count < group_size - 1;
    let (rows, cols) = if widened {
        ((0, max_r), (0, max_c))
    } else {
        (rows, cols)
    };

    let mut scored = rank_candidates(img, reference, &reference_patch, patch_size, rows, cols);
    let keep = (group_size - 1).min(scored.len());
    // (row, col) tuples order lexicographically, i.e. row-major.
    if keep < scored.len() {
        scored.select_nth_unstable_by(keep, |a, b| {
            a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
        });
        scored.truncate(keep);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

    let mut members = Vec::with_capacity(keep + 1);
    members.push(reference);
    members.extend(scored.into_iter().map(|(_, pos)| pos));
    Ok(GroupIndex {
        reference,
        members,
        patch_size,
        widened,
    })
}

/// Stacks the member patches as columns of an `n x m` matrix.
pub fn gather_group(img: &Image, idx: &GroupIndex) -> Result<PatchGroup> {
    idx.check_bounds(img.width(), img.height())?;
    let p = idx.patch_size;
    let n = p * p;
    let mut data = DMatrix::zeros(n, idx.len());
    for (j, &(r, c)) in idx.members.iter().enumerate() {
        extract_patch(img, r, c, p, data.column_mut(j).as_mut_slice());
    }
    Ok(PatchGroup {
        data,
        index: idx.clone(),
    })
}

/// Builds the groups for every reference position, in row-major order.
pub fn group_image(img: &Image, params: &GroupingParams) -> Result<Vec<GroupIndex>> {
    params.validate()?;
    reference_positions(img.width(), img.height(), params.patch_size, params.stride)?
        .into_iter()
        .map(|pos| block_match(img, pos, params.patch_size, params.group_size, params.window))
        .collect()
}

/// Result of [`scatter_accumulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub image: Image,
    /// Number of pixels no patch covered; those are returned as 0.
    pub uncovered: usize,
}

/// Averages all patch instances back into an image: each pixel is the sum of
/// the patch values covering it divided by the number of covering patches.
/// Accumulation runs over groups in slice order, members in stored order.
pub fn scatter_accumulate<'a, I>(groups: I, width: usize, height: usize) -> Result<Aggregate>
where
    I: IntoIterator<Item = &'a PatchGroup>,
{
    let mut sum = vec![0.0; width * height];
    let mut count = vec![0u32; width * height];
    for group in groups {
        let idx = &group.index;
        idx.check_bounds(width, height)?;
        let p = idx.patch_size;
        if group.data.nrows() != p * p || group.data.ncols() != idx.len() {
            return Err(Error::DimensionMismatch(format!(
                "group data {}x{} does not match {} patches of size {p}",
                group.data.nrows(),
                group.data.ncols(),
                idx.len()
            )));
        }
        for (j, &(r0, c0)) in idx.members.iter().enumerate() {
            let col = group.data.column(j);
            for c in 0..p {
                for r in 0..p {
                    let k = (r0 + r) * width + c0 + c;
                    sum[k] += col[c * p + r];
                    count[k] += 1;
                }
            }
        }
    }
    let mut uncovered = 0;
    let pixels = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| {
            if n == 0 {
                uncovered += 1;
                0.0
            } else {
                s / f64::from(n)
            }
        })
        .collect();
    Ok(Aggregate {
        image: Image::new(width, height, pixels)?,
        uncovered,
    })
}
