//! Image procedures for masked-face experiments: area rescaling, the 8×8 periocular
//! blackout grid, visual/thermal hybrid construction and a synthetic lower-face occluder.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Raster;

/// Side length of the working resolution every face image is brought to.
pub const FACE_SIZE: u32 = 256;
/// Cells per side of the periocular grid.
pub const GRID_CELLS: u32 = 8;
/// Pixel side of one grid cell at [`FACE_SIZE`].
pub const CELL_SIZE: u32 = FACE_SIZE / GRID_CELLS;
/// Grid cells covering the eye line; never dropped.
pub const PERIOCULAR_REGIONS: std::ops::RangeInclusive<usize> = 25..=30;
/// First pixel row covered by [`occlude_lower_face`].
pub const OCCLUDER_TOP_ROW: u32 = 144;
/// First pixel row taken from the thermal image in [`make_hybrid`].
pub const HYBRID_SEAM_ROW: u32 = FACE_SIZE / 2;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ImagingError {
    #[error("target dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("expected a {expected_w}x{expected_h} image, got {width}x{height}")]
    Dimensions {
        expected_w: u32,
        expected_h: u32,
        width: u32,
        height: u32,
    },
    #[error("coordinate ({x}, {y}) outside the {FACE_SIZE}x{FACE_SIZE} grid")]
    OutOfRange { x: u32, y: u32 },
}

fn require_face_size(img: &Raster) -> Result<(), ImagingError> {
    if img.dimensions() != (FACE_SIZE, FACE_SIZE) {
        return Err(ImagingError::Dimensions {
            expected_w: FACE_SIZE,
            expected_h: FACE_SIZE,
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(())
}

/// Integer overlap weights between output pixels and source pixels along one axis.
///
/// Both axes are measured in units of `1 / (src * dst)` of the image extent, so each source
/// pixel spans `dst` units and each output pixel spans `src` units; every weight is an exact
/// integer and the weights of one output pixel sum to `src`.
fn axis_weights(src: u32, dst: u32) -> Vec<Vec<(usize, u64)>> {
    let (src, dst) = (src as u64, dst as u64);
    (0..dst)
        .map(|o| {
            let lo = o * src;
            let hi = lo + src;
            let first = lo / dst;
            let last = (hi - 1) / dst;
            (first..=last)
                .filter_map(|s| {
                    let s_lo = s * dst;
                    let s_hi = s_lo + dst;
                    let w = hi.min(s_hi).saturating_sub(lo.max(s_lo));
                    (w > 0).then_some((s as usize, w))
                })
                .collect()
        })
        .collect()
}

/// Area-interpolating resize.
///
/// Each output pixel is the area-weighted mean of the source footprint it covers. Weights
/// are exact integers and rounding is half-up, so results are bit-identical on every
/// platform; for integer downscale factors this is the plain block mean.
pub fn rescale_area(src: &Raster, out_w: u32, out_h: u32) -> Result<Raster, ImagingError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::ZeroDimension {
            width: out_w,
            height: out_h,
        });
    }
    if src.dimensions() == (out_w, out_h) {
        return Ok(src.clone());
    }
    let ch = src.channels() as usize;
    let xw = axis_weights(src.width(), out_w);
    let yw = axis_weights(src.height(), out_h);
    let denom = src.width() as u64 * src.height() as u64;
    let src_stride = src.width() as usize * ch;
    let data = src.data();

    let mut out = Vec::with_capacity(out_w as usize * out_h as usize * ch);
    let mut acc = vec![0u64; ch];
    for ys in &yw {
        for xs in &xw {
            acc.iter_mut().for_each(|a| *a = 0);
            for &(sy, wy) in ys {
                let row = &data[sy * src_stride..(sy + 1) * src_stride];
                for &(sx, wx) in xs {
                    let w = wy * wx;
                    let px = &row[sx * ch..(sx + 1) * ch];
                    for (a, &v) in acc.iter_mut().zip(px) {
                        *a += w * v as u64;
                    }
                }
            }
            // half-up: floor(sum / denom + 1/2)
            out.extend(acc.iter().map(|&a| ((2 * a + denom) / (2 * denom)) as u8));
        }
    }
    Ok(Raster::new(out_w, out_h, src.channels(), out).expect("output length matches"))
}

/// Brings any frame to the working resolution, stretching non-square sources.
pub fn rescale_to_face(src: &Raster) -> Raster {
    rescale_area(src, FACE_SIZE, FACE_SIZE).expect("face size is positive")
}

/// Grid cell (0..63, row-major from the top-left) containing pixel `(px, py)`.
pub fn grid_region_of(px: u32, py: u32) -> Result<usize, ImagingError> {
    if px >= FACE_SIZE || py >= FACE_SIZE {
        return Err(ImagingError::OutOfRange { x: px, y: py });
    }
    Ok(((py / CELL_SIZE) * GRID_CELLS + px / CELL_SIZE) as usize)
}

pub fn is_border_region(region: usize) -> bool {
    let (row, col) = (region / 8, region % 8);
    row == 0 || row == 7 || col == 0 || col == 7
}

pub fn is_periocular_region(region: usize) -> bool {
    PERIOCULAR_REGIONS.contains(&region)
}

/// Keep/drop decision per cell of the 8×8 grid; bit `i` set means region `i` is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionMask(u64);

impl RegionMask {
    /// Draws a blackout mask: border cells always dropped, periocular cells always kept,
    /// every other cell kept with probability 1/2. Pure function of `seed`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bits = 0u64;
        for region in 0..64 {
            let keep = if is_border_region(region) {
                false
            } else if is_periocular_region(region) {
                true
            } else {
                rng.random_bool(0.5)
            };
            if keep {
                bits |= 1 << region;
            }
        }
        RegionMask(bits)
    }

    /// Wraps raw bits without enforcing the border/periocular rules.
    pub fn from_bits_unchecked(bits: u64) -> Self {
        RegionMask(bits)
    }

    pub fn all_keep() -> Self {
        RegionMask(u64::MAX)
    }

    pub fn all_drop() -> Self {
        RegionMask(0)
    }

    /// Keeps only the periocular cells.
    pub fn periocular_only() -> Self {
        RegionMask(PERIOCULAR_REGIONS.fold(0, |b, r| b | (1 << r)))
    }

    pub fn bits(&self) -> u64 {
        self.0
    }

    pub fn keeps(&self, region: usize) -> bool {
        region < 64 && self.0 & (1 << region) != 0
    }

    pub fn kept_regions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..64).filter(|&r| self.keeps(r))
    }

    /// Whether the border cells are dropped and the periocular cells kept.
    pub fn satisfies_blackout_rules(&self) -> bool {
        (0..64).all(|r| {
            if is_border_region(r) {
                !self.keeps(r)
            } else if is_periocular_region(r) {
                self.keeps(r)
            } else {
                true
            }
        })
    }
}

impl fmt::Display for RegionMask {
    /// Eight lines of `#` (kept) and `.` (dropped).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in 0..8 {
            for col in 0..8 {
                f.write_str(if self.keeps(row * 8 + col) { "#" } else { "." })?;
            }
            if row < 7 {
                f.write_str("\n")?;
            }
        }
        Ok(())
    }
}

pub fn sample_periocular_mask(seed: u64) -> RegionMask {
    RegionMask::sample(seed)
}

/// Zeroes every channel of the dropped cells; kept cells are copied untouched.
pub fn apply_region_mask(img: &Raster, mask: RegionMask) -> Result<Raster, ImagingError> {
    require_face_size(img)?;
    let mut out = img.clone();
    let ch = img.channels() as usize;
    let span = CELL_SIZE as usize * ch;
    for y in 0..FACE_SIZE {
        let grid_row = (y / CELL_SIZE) as usize;
        let row = out.row_mut(y);
        for col in 0..GRID_CELLS as usize {
            if !mask.keeps(grid_row * 8 + col) {
                row[col * span..(col + 1) * span].fill(0);
            }
        }
    }
    Ok(out)
}

/// Stacks the top half of `visual` over the bottom half of `thermal`.
///
/// A grayscale input is replicated to three channels when the other input is RGB.
pub fn make_hybrid(visual: &Raster, thermal: &Raster) -> Result<Raster, ImagingError> {
    require_face_size(visual)?;
    require_face_size(thermal)?;
    let (visual, thermal) = if visual.channels() == thermal.channels() {
        (visual.clone(), thermal.clone())
    } else {
        (visual.to_rgb(), thermal.to_rgb())
    };
    let stride = FACE_SIZE as usize * visual.channels() as usize;
    let seam = HYBRID_SEAM_ROW as usize * stride;
    let mut data = Vec::with_capacity(visual.data().len());
    data.extend_from_slice(&visual.data()[..seam]);
    data.extend_from_slice(&thermal.data()[seam..]);
    Ok(Raster::new(FACE_SIZE, FACE_SIZE, visual.channels(), data).expect("same geometry"))
}

/// Paints the mouth/chin band (rows from [`OCCLUDER_TOP_ROW`] down) with `fill`.
pub fn occlude_lower_face(img: &Raster, fill: u8) -> Result<Raster, ImagingError> {
    require_face_size(img)?;
    let mut out = img.clone();
    for y in OCCLUDER_TOP_ROW..FACE_SIZE {
        out.row_mut(y).fill(fill);
    }
    Ok(out)
}
