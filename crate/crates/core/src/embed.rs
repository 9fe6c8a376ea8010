//! Feature vectors, the training-free block-mean embedder, precomputed embedding files and
//! distance-threshold calibration.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::imaging::{CELL_SIZE, FACE_SIZE, GRID_CELLS, PERIOCULAR_REGIONS};
use crate::raster::Raster;

#[derive(Error, Debug)]
pub enum EmbedError {
    #[error("grid {grid} does not divide the {width}x{height} image")]
    Grid { grid: u32, width: u32, height: u32 },
    #[error("embedding length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("embedding contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("grid cell {cell} out of range for a {grid}x{grid} grid")]
    Cell { cell: usize, grid: u32 },
    #[error("calibration needs at least one same-subject and one different-subject pair")]
    SingleClass,
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("no precomputed embedding for {0}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    source: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, source: impl Into<String>) -> Result<Self, EmbedError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        Ok(Self {
            values,
            source: source.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

pub fn euclidean(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    euclidean_slices(a.values(), b.values())
}

pub fn euclidean_slices(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::Length(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Anything that maps an image to a feature vector.
pub trait Embedder {
    fn embed(&self, img: &Raster) -> Result<EmbeddingVector, EmbedError>;
    fn describe(&self) -> String;
}

impl<F> Embedder for F
where
    F: Fn(&Raster) -> Result<EmbeddingVector, EmbedError>,
{
    fn embed(&self, img: &Raster) -> Result<EmbeddingVector, EmbedError> {
        self(img)
    }

    fn describe(&self) -> String {
        "custom".to_string()
    }
}

/// Per-cell, per-channel mean intensity on a `grid × grid` partition, scaled to [0, 1],
/// flattened row-major (cells) then by channel.
pub fn embed_blockmean(img: &Raster, grid: u32) -> Result<EmbeddingVector, EmbedError> {
    BlockMeanEmbedder::new(grid).embed(img)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMeanEmbedder {
    grid: u32,
    /// Restrict the output to these cells (row-major indices), in the given order.
    cells: Option<Vec<usize>>,
}

impl BlockMeanEmbedder {
    pub fn new(grid: u32) -> Self {
        Self { grid, cells: None }
    }

    pub fn with_cells(grid: u32, cells: Vec<usize>) -> Result<Self, EmbedError> {
        let n = grid as usize * grid as usize;
        if let Some(&cell) = cells.iter().find(|&&c| c >= n) {
            return Err(EmbedError::Cell { cell, grid });
        }
        Ok(Self {
            grid,
            cells: Some(cells),
        })
    }

    /// Only the cells overlapping the eye band (grid cells 25–30 on the 8×8 grid).
    pub fn periocular(grid: u32) -> Result<Self, EmbedError> {
        Self::with_cells(grid, periocular_cells(grid)?)
    }

    pub fn grid(&self) -> u32 {
        self.grid
    }

    fn cell_means(&self, img: &Raster) -> Result<Vec<f64>, EmbedError> {
        let g = self.grid;
        if g == 0 || img.width() % g != 0 || img.height() % g != 0 {
            return Err(EmbedError::Grid {
                grid: g,
                width: img.width(),
                height: img.height(),
            });
        }
        let ch = img.channels() as usize;
        let (cw, chh) = ((img.width() / g) as usize, (img.height() / g) as usize);
        let mut sums = vec![0u64; g as usize * g as usize * ch];
        for y in 0..img.height() as usize {
            let row = img.row(y as u32);
            let grid_row = y / chh;
            for (x, px) in row.chunks_exact(ch).enumerate() {
                let cell = grid_row * g as usize + x / cw;
                for (c, &v) in px.iter().enumerate() {
                    sums[cell * ch + c] += v as u64;
                }
            }
        }
        let n = (cw * chh) as f64 * 255.0;
        Ok(sums.into_iter().map(|s| s as f64 / n).collect())
    }
}

impl Embedder for BlockMeanEmbedder {
    fn embed(&self, img: &Raster) -> Result<EmbeddingVector, EmbedError> {
        let means = self.cell_means(img)?;
        let values = match &self.cells {
            None => means,
            Some(cells) => {
                let ch = img.channels() as usize;
                cells
                    .iter()
                    .flat_map(|&c| means[c * ch..(c + 1) * ch].iter().copied())
                    .collect()
            }
        };
        EmbeddingVector::new(values, self.describe())
    }

    fn describe(&self) -> String {
        match &self.cells {
            None => format!("blockmean(grid={})", self.grid),
            Some(c) => format!("blockmean(grid={}, cells={:?})", self.grid, c),
        }
    }
}

/// Cells of a `grid × grid` partition of a face image that overlap the periocular band,
/// i.e. the pixel footprint of regions 25–30 of the 8×8 grid.
pub fn periocular_cells(grid: u32) -> Result<Vec<usize>, EmbedError> {
    if grid == 0 || FACE_SIZE % grid != 0 {
        return Err(EmbedError::Grid {
            grid,
            width: FACE_SIZE,
            height: FACE_SIZE,
        });
    }
    let first = *PERIOCULAR_REGIONS.start() as u32;
    let last = *PERIOCULAR_REGIONS.end() as u32;
    let (y0, y1) = ((first / GRID_CELLS) * CELL_SIZE, (first / GRID_CELLS + 1) * CELL_SIZE);
    let (x0, x1) = ((first % GRID_CELLS) * CELL_SIZE, (last % GRID_CELLS + 1) * CELL_SIZE);
    let side = FACE_SIZE / grid;
    let mut cells = Vec::new();
    for row in 0..grid {
        for col in 0..grid {
            let (cy0, cx0) = (row * side, col * side);
            if cy0 < y1 && cy0 + side > y0 && cx0 < x1 && cx0 + side > x0 {
                cells.push((row * grid + col) as usize);
            }
        }
    }
    Ok(cells)
}

/// Embeddings computed elsewhere, keyed by image path.
///
/// CSV layout: header `image_path,v0,v1,...,v{d-1}` declares the dimension `d`.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    by_path: HashMap<String, EmbeddingVector>,
}

impl PrecomputedEmbeddings {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EmbedError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    pub fn from_csv_str(text: &str, origin: &str) -> Result<Self, EmbedError> {
        let fail = |message: String| EmbedError::File {
            path: origin.to_string(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| fail(e.to_string()))?.clone();
        if headers.get(0) != Some("image_path") {
            return Err(fail("first column must be image_path".into()));
        }
        for (i, h) in headers.iter().skip(1).enumerate() {
            if h != format!("v{i}") {
                return Err(fail(format!("expected column v{i}, found {h:?}")));
            }
        }
        let dim = headers.len() - 1;
        if dim == 0 {
            return Err(fail("header declares no embedding columns".into()));
        }
        let source = format!("precomputed({origin})");
        let mut by_path = HashMap::new();
        for record in reader.records() {
            let record = record.map_err(|e| fail(e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != dim + 1 {
                return Err(fail(format!("line {line}: expected {} fields, got {}", dim + 1, record.len())));
            }
            let values = record
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| fail(format!("line {line}: {e}")))?;
            let v = EmbeddingVector::new(values, source.clone()).map_err(|e| fail(format!("line {line}: {e}")))?;
            if by_path.insert(record[0].to_string(), v).is_some() {
                return Err(fail(format!("line {line}: duplicate image_path {:?}", &record[0])));
            }
        }
        Ok(Self { dim, by_path })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.by_path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_path.is_empty()
    }

    pub fn get(&self, image_path: &str) -> Result<&EmbeddingVector, EmbedError> {
        self.by_path
            .get(image_path)
            .ok_or_else(|| EmbedError::Missing(image_path.to_string()))
    }
}

/// Writes embeddings in the precomputed CSV layout.
pub fn embeddings_to_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a EmbeddingVector)>) -> Result<String, EmbedError> {
    let mut rows = rows.into_iter().peekable();
    let dim = rows.peek().map_or(0, |(_, v)| v.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("image_path".to_string())
        .chain((0..dim).map(|i| format!("v{i}")))
        .collect();
    w.write_record(&header).expect("in-memory write");
    for (path, v) in rows {
        if v.len() != dim {
            return Err(EmbedError::Length(dim, v.len()));
        }
        let rec: Vec<String> = std::iter::once(path.to_string())
            .chain(v.values().iter().map(|x| format!("{x:?}")))
            .collect();
        w.write_record(&rec).expect("in-memory write");
    }
    Ok(String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    /// Pairs with distance strictly below this are declared matches.
    pub threshold: f64,
    /// Accuracy of the rule on the calibration pairs.
    pub accuracy: f64,
}

/// Accuracy of "match iff distance < threshold" on labelled pairs (`true` = same subject).
pub fn threshold_accuracy(pairs: &[(f64, bool)], threshold: f64) -> f64 {
    let correct = pairs.iter().filter(|&&(d, same)| (d < threshold) == same).count();
    correct as f64 / pairs.len() as f64
}

/// Picks the distance threshold that maximizes accuracy on `pairs`.
///
/// Candidates are the midpoints between consecutive distinct distances, plus one cut below
/// all distances (reject everything) and one above (accept everything). Ties prefer the
/// larger threshold.
pub fn calibrate_threshold(pairs: &[(f64, bool)]) -> Result<Calibration, EmbedError> {
    if !pairs.iter().any(|p| p.1) || !pairs.iter().any(|p| !p.1) {
        return Err(EmbedError::SingleClass);
    }
    if let Some(i) = pairs.iter().position(|p| !p.0.is_finite()) {
        return Err(EmbedError::NonFinite(i));
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sweep cut-points left to right; below the first distance nothing matches, so every
    // different-subject pair is correct.
    let total = sorted.len() as f64;
    let mut correct = sorted.iter().filter(|p| !p.1).count() as i64;
    let min = sorted[0].0;
    let max = sorted[sorted.len() - 1].0;
    let mut best = Calibration {
        threshold: min,
        accuracy: correct as f64 / total,
    };
    let mut i = 0;
    while i < sorted.len() {
        let d = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == d {
            correct += if sorted[i].1 { 1 } else { -1 };
            i += 1;
        }
        let threshold = if i < sorted.len() {
            (d + sorted[i].0) / 2.0
        } else {
            max + (max - min).max(1.0) / 2.0
        };
        let accuracy = correct as f64 / total;
        if accuracy >= best.accuracy {
            best = Calibration { threshold, accuracy };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), "test").unwrap()
    }

    #[test]
    fn constant_image_blockmean() {
        let img = Raster::filled(256, 256, 1, 128).unwrap();
        let e = embed_blockmean(&img, 8).unwrap();
        assert_eq!(e.len(), 64);
        assert!(e.values().iter().all(|&x| (x - 128.0 / 255.0).abs() < 1e-15));
        assert!((e.values()[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn global_mean_at_grid_one() {
        let img = Raster::from_fn(256, 256, 3, |x, _, c| (x as u8).wrapping_add(c)).unwrap();
        let e = embed_blockmean(&img, 1).unwrap();
        assert_eq!(e.len(), 3);
        let want0 = (0..256).map(|x| x as f64).sum::<f64>() / 256.0 / 255.0;
        assert!((e.values()[0] - want0).abs() < 1e-12);
    }

    #[test]
    fn quadrant_means_by_summation() {
        let img = Raster::from_fn(256, 256, 1, |x, y, _| match (x < 128, y < 128) {
            (true, true) => 10,
            (false, true) => 60,
            (true, false) => (x % 2 * 100) as u8,
            (false, false) => 255,
        })
        .unwrap();
        let e = embed_blockmean(&img, 2).unwrap();
        let mut oracle = [0u64; 4];
        for y in 0..256 {
            for x in 0..256 {
                oracle[((y / 128) * 2 + x / 128) as usize] += img.pixel(x, y)[0] as u64;
            }
        }
        for (got, sum) in e.values().iter().zip(oracle) {
            assert!((got - sum as f64 / (128.0 * 128.0 * 255.0)).abs() < 1e-12);
        }
        assert!((e.values()[2] - 50.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn non_divisor_grid() {
        let img = Raster::filled(256, 256, 1, 0).unwrap();
        assert!(matches!(embed_blockmean(&img, 7), Err(EmbedError::Grid { .. })));
        assert!(matches!(embed_blockmean(&img, 0), Err(EmbedError::Grid { .. })));
    }

    #[test]
    fn periocular_cells_on_standard_grid() {
        assert_eq!(periocular_cells(8).unwrap(), vec![25, 26, 27, 28, 29, 30]);
        // 4x4 grid: 64-px cells; eye band rows 96..128 → grid row 1, cols 32..224 → 0..=3
        assert_eq!(periocular_cells(4).unwrap(), vec![4, 5, 6, 7]);
        let e = BlockMeanEmbedder::periocular(8)
            .unwrap()
            .embed(&Raster::filled(256, 256, 3, 51).unwrap())
            .unwrap();
        assert_eq!(e.len(), 18);
        assert!(BlockMeanEmbedder::with_cells(8, vec![64]).is_err());
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(euclidean(&v(&[0.0, 0.0]), &v(&[3.0, 4.0])).unwrap(), 5.0);
        assert!(matches!(euclidean(&v(&[0.0]), &v(&[3.0, 4.0])), Err(EmbedError::Length(1, 2))));
        assert!(EmbeddingVector::new(vec![f64::NAN], "x").is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut sq = 0.0;
            for i in 0..10 {
                sq += (a[i] - b[i]).powi(2);
            }
            assert!((euclidean(&v(&a), &v(&b)).unwrap() - sq.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn closure_embedder() {
        let f = |img: &Raster| EmbeddingVector::new(vec![img.mean()], "mean");
        let img = Raster::filled(2, 2, 1, 4).unwrap();
        assert_eq!(f.embed(&img).unwrap().values(), &[4.0]);
    }

    #[test]
    fn precomputed_csv() {
        let text = "image_path,v0,v1\na.png,0.5,1\nb.png,-2,3.25\n";
        let p = PrecomputedEmbeddings::from_csv_str(text, "emb.csv").unwrap();
        assert_eq!(p.dim(), 2);
        assert_eq!(p.get("b.png").unwrap().values(), &[-2.0, 3.25]);
        assert!(matches!(p.get("c.png"), Err(EmbedError::Missing(_))));

        let short = "image_path,v0,v1\na.png,0.5\n";
        assert!(PrecomputedEmbeddings::from_csv_str(short, "x").is_err());
        let bad_header = "path,v0\na.png,1\n";
        assert!(PrecomputedEmbeddings::from_csv_str(bad_header, "x").is_err());
        let gap = "image_path,v0,v2\na.png,1,2\n";
        assert!(PrecomputedEmbeddings::from_csv_str(gap, "x").is_err());

        let a = v(&[0.1, 0.2]);
        let csv = embeddings_to_csv([("a.png", &a)]).unwrap();
        let back = PrecomputedEmbeddings::from_csv_str(&csv, "x").unwrap();
        assert_eq!(back.get("a.png").unwrap().values(), a.values());
    }

    #[test]
    fn calibration_separable() {
        let mut pairs = vec![(0.1, true); 5];
        pairs.extend(vec![(0.9, false); 5]);
        let c = calibrate_threshold(&pairs).unwrap();
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.accuracy, 1.0);
    }

    #[test]
    fn calibration_inseparable() {
        let pairs: Vec<_> = [0.1, 0.2, 0.3, 0.4]
            .iter()
            .flat_map(|&d| [(d, true), (d, false)])
            .collect();
        assert_eq!(calibrate_threshold(&pairs).unwrap().accuracy, 0.5);
    }

    #[test]
    fn calibration_single_class() {
        assert!(matches!(calibrate_threshold(&[(0.1, true)]), Err(EmbedError::SingleClass)));
        assert!(matches!(calibrate_threshold(&[]), Err(EmbedError::SingleClass)));
    }

    /// Evaluates every candidate cut-point independently and keeps the best, preferring
    /// larger thresholds on ties.
    fn sweep_oracle(pairs: &[(f64, bool)]) -> (f64, f64) {
        let mut ds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        ds.sort_by(f64::total_cmp);
        ds.dedup();
        let mut candidates = vec![ds[0]];
        candidates.extend(ds.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        candidates.push(ds[ds.len() - 1] + (ds[ds.len() - 1] - ds[0]).max(1.0) / 2.0);
        let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for t in candidates {
            let acc = pairs.iter().filter(|&&(d, s)| (d < t) == s).count() as f64 / pairs.len() as f64;
            if acc > best.1 || (acc == best.1 && t > best.0) {
                best = (t, acc);
            }
        }
        best
    }

    #[test]
    fn calibration_matches_sweep_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..200 {
            let mut pairs: Vec<(f64, bool)> = (0..20)
                .map(|i| {
                    let same = i % 2 == 0;
                    let centre = if same { 0.4 } else { 0.6 };
                    ((centre + rng.random_range(-0.3..0.3f64) * 10.0).round() / 10.0, same)
                })
                .collect();
            pairs.rotate_left(rng.random_range(0..20));
            let c = calibrate_threshold(&pairs).unwrap();
            let (t, acc) = sweep_oracle(&pairs);
            assert_eq!(c.accuracy, acc);
            assert_eq!(c.threshold, t);
            assert_eq!(threshold_accuracy(&pairs, c.threshold), c.accuracy);
        }
    }

    proptest! {
        #[test]
        fn metric_axioms(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 6),
            c in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let (a, b, c) = (v(&a), v(&b), v(&c));
            let ab = euclidean(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, euclidean(&b, &a).unwrap());
            prop_assert!(ab <= euclidean(&a, &c).unwrap() + euclidean(&c, &b).unwrap() + 1e-12);
            prop_assert_eq!(euclidean(&a, &a).unwrap(), 0.0);
        }
    }
}
