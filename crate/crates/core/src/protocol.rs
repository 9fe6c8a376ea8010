//! End-to-end pipelines over a manifest: preprocessing, verification over mask conditions,
//! identification across spectral domains, and checkpoint routing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{calibrate_threshold, euclidean, threshold_accuracy, EmbedError, Embedder, EmbeddingVector, PrecomputedEmbeddings};
use crate::image_io::{load_raster, ImageIoError};
use crate::imaging::{apply_region_mask, make_hybrid, occlude_lower_face, rescale_to_face, sample_periocular_mask, ImagingError};
use crate::losses::{contrastive_loss, ContrastiveSample, LossError};
use crate::manifest::{Manifest, ManifestEntry, MaskState, Spectrum};
use crate::raster::Raster;
use crate::recog::{argmin, build_condition_matrix, ConditionMatrix, FoldResult, RecogError};
use crate::reference::{IDENTIFICATION_DOMAINS, VERIFICATION_CONDITIONS};
use crate::seed::derive_seed;
use crate::splits::{Partition, SplitError, SplitPlan};

#[derive(Error, Debug)]
pub enum ProtocolError {
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Recog(#[from] RecogError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("fold {fold}: no usable condition ({condition}) pairs among {partition} images")]
    MissingCondition {
        condition: String,
        partition: &'static str,
        fold: usize,
    },
    #[error("domain {domain} cannot be derived: {reason}")]
    Underivable { domain: String, reason: String },
    #[error("subject {subject}, frame {frame}: no {missing} image to pair for the hybrid")]
    MissingPair {
        subject: String,
        frame: usize,
        missing: &'static str,
    },
    #[error("masked route requires a thermal image")]
    MissingThermal,
    #[error("unknown {what} {value:?}")]
    Unknown { what: &'static str, value: String },
    #[error("image {0:?} not available")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
}

/// Where pixels for a manifest path come from.
pub trait ImageSource: Sync {
    fn load(&self, path: &str) -> Result<Raster, ProtocolError>;
}

/// Resolves relative manifest paths against a root directory.
#[derive(Debug, Clone)]
pub struct DirSource {
    root: PathBuf,
}

impl DirSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

impl ImageSource for DirSource {
    fn load(&self, path: &str) -> Result<Raster, ProtocolError> {
        Ok(load_raster(self.resolve(path))?)
    }
}

/// In-memory images keyed by manifest path.
#[derive(Debug, Clone, Default)]
pub struct MemorySource(pub BTreeMap<String, Raster>);

impl ImageSource for MemorySource {
    fn load(&self, path: &str) -> Result<Raster, ProtocolError> {
        self.0.get(path).cloned().ok_or_else(|| ProtocolError::NotFound(path.to_string()))
    }
}

/// All images of one subject that share an ordinal, i.e. one capture across spectra and
/// mask states. The ordinal of an entry is its position among the entries with the same
/// subject, spectrum and mask state, in manifest order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Frame {
    pub subject: String,
    pub ordinal: usize,
    pub visual: Option<String>,
    pub visual_masked: Option<String>,
    pub thermal: Option<String>,
    pub thermal_masked: Option<String>,
}

impl Frame {
    pub fn key(&self) -> String {
        format!("{}#{}", self.subject, self.ordinal)
    }

    pub fn path(&self, spectrum: Spectrum, mask: MaskState) -> Option<&str> {
        match (spectrum, mask) {
            (Spectrum::Visual, MaskState::Unmasked) => self.visual.as_deref(),
            (Spectrum::Visual, MaskState::Masked) => self.visual_masked.as_deref(),
            (Spectrum::Thermal, MaskState::Unmasked) => self.thermal.as_deref(),
            (Spectrum::Thermal, MaskState::Masked) => self.thermal_masked.as_deref(),
        }
    }

    /// Top (visual) and bottom (thermal) sources of this frame's hybrid. The top prefers the
    /// masked visual image and the bottom prefers the unmasked thermal image; either falls
    /// back to the other mask state.
    pub fn hybrid_sources(&self) -> Result<(&str, &str), ProtocolError> {
        let missing = |what| ProtocolError::MissingPair {
            subject: self.subject.clone(),
            frame: self.ordinal,
            missing: what,
        };
        let top = self
            .visual_masked
            .as_deref()
            .or(self.visual.as_deref())
            .ok_or_else(|| missing("visual"))?;
        let bottom = self
            .thermal
            .as_deref()
            .or(self.thermal_masked.as_deref())
            .ok_or_else(|| missing("thermal"))?;
        Ok((top, bottom))
    }
}

/// Groups manifest entries into frames, sorted by subject then ordinal.
pub fn index_frames(manifest: &Manifest) -> Vec<Frame> {
    let mut ordinals: BTreeMap<(&str, Spectrum, MaskState), usize> = BTreeMap::new();
    let mut frames: BTreeMap<(String, usize), Frame> = BTreeMap::new();
    for e in manifest.entries() {
        let n = ordinals.entry((&e.subject_id, e.spectrum, e.mask_state)).or_insert(0);
        let frame = frames.entry((e.subject_id.clone(), *n)).or_insert_with(|| Frame {
            subject: e.subject_id.clone(),
            ordinal: *n,
            ..Frame::default()
        });
        *n += 1;
        let slot = match (e.spectrum, e.mask_state) {
            (Spectrum::Visual, MaskState::Unmasked) => &mut frame.visual,
            (Spectrum::Visual, MaskState::Masked) => &mut frame.visual_masked,
            (Spectrum::Thermal, MaskState::Unmasked) => &mut frame.thermal,
            (Spectrum::Thermal, MaskState::Masked) => &mut frame.thermal_masked,
        };
        *slot = Some(e.path.clone());
    }
    frames.into_values().collect()
}

/// Image domains of the identification experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(into = "String")]
pub enum Domain {
    Visual,
    MaskedVisual,
    Thermal,
    MaskedThermal,
    Hybrid,
}

impl Domain {
    pub const ALL: [Domain; 5] = [
        Domain::Visual,
        Domain::MaskedVisual,
        Domain::Thermal,
        Domain::MaskedThermal,
        Domain::Hybrid,
    ];

    pub fn as_str(self) -> &'static str {
        IDENTIFICATION_DOMAINS[self as usize]
    }

    /// The manifest condition a plain domain reads from; `None` for the hybrid.
    pub fn condition(self) -> Option<(Spectrum, MaskState)> {
        match self {
            Domain::Visual => Some((Spectrum::Visual, MaskState::Unmasked)),
            Domain::MaskedVisual => Some((Spectrum::Visual, MaskState::Masked)),
            Domain::Thermal => Some((Spectrum::Thermal, MaskState::Unmasked)),
            Domain::MaskedThermal => Some((Spectrum::Thermal, MaskState::Masked)),
            Domain::Hybrid => None,
        }
    }
}

impl From<Domain> for String {
    fn from(d: Domain) -> Self {
        d.as_str().to_string()
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s.trim())
            .ok_or_else(|| ProtocolError::Unknown {
                what: "domain",
                value: s.to_string(),
            })
    }
}

/// Parses a comma-separated domain list, keeping table order and dropping duplicates.
pub fn parse_domains(list: &str) -> Result<Vec<Domain>, ProtocolError> {
    let mut out: Vec<Domain> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(ProtocolError::Invalid("empty domain list".into()));
    }
    Ok(out)
}

/// How feature vectors are obtained.
pub enum Features<'a> {
    /// Load pixels, rescale to 256×256, expand to three channels, embed. The channel
    /// expansion puts grayscale thermal and colour visual faces in one embedding space.
    Pixels {
        embedder: &'a (dyn Embedder + Sync),
        source: &'a dyn ImageSource,
    },
    /// Look vectors up by manifest path; hybrids by `hybrid:<subject>#<ordinal>`.
    Precomputed(&'a PrecomputedEmbeddings),
}

impl Features<'_> {
    pub fn describe(&self) -> String {
        match self {
            Features::Pixels { embedder, .. } => embedder.describe(),
            Features::Precomputed(p) => format!("precomputed(dim={})", p.dim()),
        }
    }

    fn face(source: &dyn ImageSource, path: &str) -> Result<Raster, ProtocolError> {
        Ok(rescale_to_face(&source.load(path)?).to_rgb())
    }

    pub fn of_path(&self, path: &str) -> Result<EmbeddingVector, ProtocolError> {
        match self {
            Features::Pixels { embedder, source } => Ok(embedder.embed(&Self::face(*source, path)?)?),
            Features::Precomputed(p) => Ok(p.get(path)?.clone()),
        }
    }

    /// Embedding of `frame` in `domain`, or `None` when the frame lacks that domain.
    pub fn of_frame(&self, frame: &Frame, domain: Domain) -> Result<Option<EmbeddingVector>, ProtocolError> {
        if let Some((s, m)) = domain.condition() {
            return frame.path(s, m).map(|p| self.of_path(p)).transpose();
        }
        let Ok((top, bottom)) = frame.hybrid_sources() else {
            return Ok(None);
        };
        match self {
            Features::Pixels { embedder, source } => {
                let hybrid = make_hybrid(&Self::face(*source, top)?, &Self::face(*source, bottom)?)?;
                Ok(Some(embedder.embed(&hybrid)?))
            }
            Features::Precomputed(p) => Ok(Some(p.get(&format!("hybrid:{}", frame.key()))?.clone())),
        }
    }
}

// ---------------------------------------------------------------------------------------
// Preprocessing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PreOp {
    Rescale,
    Periocular,
    Occlude,
    Hybrid,
}

impl PreOp {
    pub fn as_str(self) -> &'static str {
        match self {
            PreOp::Rescale => "rescale",
            PreOp::Periocular => "periocular",
            PreOp::Occlude => "occlude",
            PreOp::Hybrid => "hybrid",
        }
    }
}

impl FromStr for PreOp {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "rescale" => Ok(PreOp::Rescale),
            "periocular" => Ok(PreOp::Periocular),
            "occlude" => Ok(PreOp::Occlude),
            "hybrid" => Ok(PreOp::Hybrid),
            other => Err(ProtocolError::Unknown {
                what: "preprocessing op",
                value: other.to_string(),
            }),
        }
    }
}

pub fn parse_ops(list: &str) -> Result<Vec<PreOp>, ProtocolError> {
    let ops: Vec<PreOp> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if ops.is_empty() {
        return Err(ProtocolError::Invalid("empty op list".into()));
    }
    if ops.iter().filter(|&&o| o == PreOp::Hybrid).count() > 1 {
        return Err(ProtocolError::Invalid("hybrid may appear at most once".into()));
    }
    Ok(ops)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocessOptions {
    pub ops: Vec<PreOp>,
    pub seed: u64,
    pub occlude_fill: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub output: String,
    pub inputs: Vec<String>,
    pub ops: Vec<PreOp>,
    pub seed: u64,
    /// Seed of this image's periocular mask, when one was applied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_bits: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub provenance: Provenance,
    pub raster: Raster,
    /// Manifest entry for the output; hybrids have none.
    pub entry: Option<ManifestEntry>,
}

fn apply_ops(
    mut img: Raster,
    ops: &[PreOp],
    opts: &PreprocessOptions,
    output: &str,
    prov: &mut Provenance,
) -> Result<Raster, ProtocolError> {
    for op in ops {
        img = match op {
            PreOp::Rescale => rescale_to_face(&img),
            PreOp::Occlude => occlude_lower_face(&img, opts.occlude_fill)?,
            PreOp::Periocular => {
                let seed = derive_seed(opts.seed, output);
                let mask = sample_periocular_mask(seed);
                prov.mask_seed = Some(seed);
                prov.mask_bits = Some(format!("{:016x}", mask.bits()));
                apply_region_mask(&img, mask)?
            }
            PreOp::Hybrid => unreachable!("hybrid is split out by the caller"),
        };
    }
    Ok(img)
}

fn png_name(path: &str) -> String {
    Path::new(path).with_extension("png").to_string_lossy().replace('\\', "/")
}

/// Runs the op sequence over every manifest image, or over every frame when the sequence
/// contains `hybrid`. Ops before `hybrid` apply to both halves' source images, ops after it
/// to the composite. Per-image periocular masks are seeded from `(seed, output path)`.
pub fn preprocess(
    manifest: &Manifest,
    source: &dyn ImageSource,
    opts: &PreprocessOptions,
) -> Result<Vec<Preprocessed>, ProtocolError> {
    let split = opts.ops.iter().position(|&o| o == PreOp::Hybrid);
    let provenance = |output: String, inputs: Vec<String>| Provenance {
        output,
        inputs,
        ops: opts.ops.clone(),
        seed: opts.seed,
        mask_seed: None,
        mask_bits: None,
    };
    match split {
        None => manifest
            .entries()
            .par_iter()
            .map(|e| {
                let output = png_name(&e.path);
                let mut prov = provenance(output.clone(), vec![e.path.clone()]);
                let raster = apply_ops(source.load(&e.path)?, &opts.ops, opts, &output, &mut prov)?;
                Ok(Preprocessed {
                    provenance: prov,
                    raster,
                    entry: Some(ManifestEntry::new(output, e.subject_id.clone(), e.spectrum, e.mask_state)),
                })
            })
            .collect(),
        Some(at) => {
            let (before, after) = (&opts.ops[..at], &opts.ops[at + 1..]);
            let frames = index_frames(manifest);
            frames
                .par_iter()
                .map(|f| {
                    let (top, bottom) = f.hybrid_sources()?;
                    let output = format!("hybrid/{}_{:03}.png", f.subject, f.ordinal);
                    let mut prov = provenance(output.clone(), vec![top.to_string(), bottom.to_string()]);
                    let top_img = apply_ops(source.load(top)?, before, opts, &format!("{output}#top"), &mut prov)?;
                    let bottom_img = apply_ops(source.load(bottom)?, before, opts, &format!("{output}#bottom"), &mut prov)?;
                    let hybrid = make_hybrid(&top_img, &bottom_img)?;
                    let raster = apply_ops(hybrid, after, opts, &output, &mut prov)?;
                    Ok(Preprocessed {
                        provenance: prov,
                        raster,
                        entry: None,
                    })
                })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------------------
// Verification

/// Pair conditions: (a) unmasked/unmasked, (b) masked/masked, (c) unmasked/masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(into = "String")]
pub enum PairCondition {
    A,
    B,
    C,
}

impl PairCondition {
    pub const ALL: [PairCondition; 3] = [PairCondition::A, PairCondition::B, PairCondition::C];

    pub fn as_str(self) -> &'static str {
        VERIFICATION_CONDITIONS[self as usize]
    }

    fn sides(self) -> (MaskState, MaskState) {
        match self {
            PairCondition::A => (MaskState::Unmasked, MaskState::Unmasked),
            PairCondition::B => (MaskState::Masked, MaskState::Masked),
            PairCondition::C => (MaskState::Unmasked, MaskState::Masked),
        }
    }
}

impl From<PairCondition> for String {
    fn from(c: PairCondition) -> Self {
        c.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub spectrum: Spectrum,
    pub margin: f64,
    /// Upper bound on pairs per (fold, condition, partition); half genuine, half impostor.
    pub max_pairs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyCell {
    pub test_cond: String,
    pub pairs: usize,
    pub accuracy: f64,
    /// Mean contrastive loss of the evaluation pairs at the configured margin.
    pub mean_contrastive_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyFold {
    pub fold: usize,
    pub train_cond: String,
    pub train_pairs: usize,
    pub threshold: f64,
    pub train_accuracy: f64,
    pub tests: Vec<VerifyCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub spectrum: Spectrum,
    pub features: String,
    pub folds: Vec<VerifyFold>,
    pub fold_results: Vec<FoldResult>,
    pub matrix: ConditionMatrix,
}

struct Item<'a> {
    subject: &'a str,
    mask: MaskState,
    embedding: EmbeddingVector,
}

/// Genuine pairs of `cond` (capped at `max_pairs / 2`) plus as many seeded impostor pairs.
fn condition_pairs(items: &[&Item], cond: PairCondition, max_pairs: usize, seed: u64) -> Result<Vec<(f64, bool)>, ProtocolError> {
    let (ls, rs) = cond.sides();
    let left: Vec<&Item> = items.iter().copied().filter(|i| i.mask == ls).collect();
    let right: Vec<&Item> = items.iter().copied().filter(|i| i.mask == rs).collect();
    let symmetric = ls == rs;
    let mut genuine = Vec::new();
    for (i, a) in left.iter().enumerate() {
        for (j, b) in right.iter().enumerate() {
            if a.subject == b.subject && (!symmetric || i < j) {
                genuine.push((i, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = (max_pairs / 2).max(1);
    if genuine.len() > half {
        genuine.shuffle(&mut rng);
        genuine.truncate(half);
        genuine.sort_unstable();
    }
    let multi_subject = left.iter().any(|a| right.iter().any(|b| a.subject != b.subject));
    let mut impostor = Vec::with_capacity(genuine.len());
    if multi_subject {
        while impostor.len() < genuine.len() {
            let (i, j) = (rng.random_range(0..left.len()), rng.random_range(0..right.len()));
            if left[i].subject != right[j].subject {
                impostor.push((i, j));
            }
        }
    }
    if genuine.is_empty() || impostor.is_empty() {
        return Ok(Vec::new());
    }
    let dist = |&(i, j): &(usize, usize)| euclidean(&left[i].embedding, &right[j].embedding);
    let mut out = Vec::with_capacity(2 * genuine.len());
    for p in &genuine {
        out.push((dist(p)?, true));
    }
    for p in &impostor {
        out.push((dist(p)?, false));
    }
    Ok(out)
}

/// Verification over the three mask conditions: for every plan and training condition a
/// distance threshold is calibrated on training pairs, then scored on the pairs of every
/// condition among the held-out images (validation and test partitions).
pub fn run_verification(
    manifest: &Manifest,
    plans: &[SplitPlan],
    features: &Features,
    opts: &VerifyOptions,
) -> Result<VerificationReport, ProtocolError> {
    if plans.is_empty() {
        return Err(ProtocolError::Invalid("no split plans".into()));
    }
    let entries: Vec<&ManifestEntry> = manifest.entries().iter().filter(|e| e.spectrum == opts.spectrum).collect();
    let embeddings = entries
        .par_iter()
        .map(|e| features.of_path(&e.path))
        .collect::<Result<Vec<_>, _>>()?;
    let items: Vec<Item> = entries
        .iter()
        .zip(embeddings)
        .map(|(e, embedding)| Item {
            subject: &e.subject_id,
            mask: e.mask_state,
            embedding,
        })
        .collect();

    let mut folds = Vec::new();
    let mut fold_results = Vec::new();
    for (fold, plan) in plans.iter().enumerate() {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (e, item) in entries.iter().zip(&items) {
            match plan.partition_of(e) {
                Some(Partition::Train) => train.push(item),
                Some(_) => held.push(item),
                None => {}
            }
        }
        let pairs = |set: &[&Item], cond: PairCondition, part: &'static str| -> Result<Vec<(f64, bool)>, ProtocolError> {
            let seed = derive_seed(opts.seed, &format!("verify/{fold}/{}/{part}", cond.as_str()));
            let p = condition_pairs(set, cond, opts.max_pairs, seed)?;
            if p.is_empty() {
                return Err(ProtocolError::MissingCondition {
                    condition: cond.as_str().to_string(),
                    partition: part,
                    fold,
                });
            }
            Ok(p)
        };
        let mut held_pairs = Vec::new();
        for cond in PairCondition::ALL {
            held_pairs.push(pairs(&held, cond, "held-out")?);
        }
        for train_cond in PairCondition::ALL {
            let train_pairs = pairs(&train, train_cond, "train")?;
            let cal = calibrate_threshold(&train_pairs)?;
            let mut tests = Vec::new();
            for (test_cond, eval) in PairCondition::ALL.into_iter().zip(&held_pairs) {
                let accuracy = threshold_accuracy(eval, cal.threshold);
                let loss = eval
                    .iter()
                    .map(|&(d, same)| Ok(contrastive_loss(&ContrastiveSample::new(same, d, opts.margin)?)))
                    .sum::<Result<f64, LossError>>()?
                    / eval.len() as f64;
                fold_results.push(FoldResult {
                    train_cond: train_cond.as_str().to_string(),
                    test_cond: test_cond.as_str().to_string(),
                    fold,
                    accuracy,
                });
                tests.push(VerifyCell {
                    test_cond: test_cond.as_str().to_string(),
                    pairs: eval.len(),
                    accuracy,
                    mean_contrastive_loss: loss,
                });
            }
            folds.push(VerifyFold {
                fold,
                train_cond: train_cond.as_str().to_string(),
                train_pairs: train_pairs.len(),
                threshold: cal.threshold,
                train_accuracy: cal.accuracy,
                tests,
            });
        }
    }
    let matrix = build_condition_matrix(&fold_results, &VERIFICATION_CONDITIONS, &VERIFICATION_CONDITIONS)?;
    Ok(VerificationReport {
        spectrum: opts.spectrum,
        features: features.describe(),
        folds,
        fold_results,
        matrix,
    })
}

// ---------------------------------------------------------------------------------------
// Identification

/// Assigns each frame to one of `k` folds, stratified by subject: a subject's frames are
/// shuffled and dealt round-robin starting at a subject-dependent offset, so every subject
/// with at least `k` frames has frames on both sides of every fold.
pub fn frame_folds(frames: &[Frame], k: usize, seed: u64) -> Result<BTreeMap<String, usize>, ProtocolError> {
    if k < 2 {
        return Err(SplitError::FoldCount { k, available: frames.len() }.into());
    }
    let mut by_subject: BTreeMap<&str, Vec<&Frame>> = BTreeMap::new();
    for f in frames {
        by_subject.entry(&f.subject).or_default().push(f);
    }
    let mut out = BTreeMap::new();
    for (s, (subject, mut fs)) in by_subject.into_iter().enumerate() {
        fs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("frames/{subject}"))));
        for (i, f) in fs.into_iter().enumerate() {
            out.insert(f.key(), (s + i) % k);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentifyOptions {
    pub domains: Vec<Domain>,
    pub folds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationReport {
    pub domains: Vec<Domain>,
    pub features: String,
    pub folds: usize,
    pub frames: usize,
    pub fold_results: Vec<FoldResult>,
    pub matrix: ConditionMatrix,
}

/// Rank-1 identification for every (gallery domain, probe domain) pair. In fold `f` the
/// gallery holds the frames outside fold `f` rendered in the row domain, and the probes are
/// the frames of fold `f` rendered in the column domain. Folds with no probes or an empty
/// gallery for a cell are skipped.
pub fn run_identification(
    manifest: &Manifest,
    features: &Features,
    opts: &IdentifyOptions,
) -> Result<IdentificationReport, ProtocolError> {
    let frames = index_frames(manifest);
    let assignment = frame_folds(&frames, opts.folds, opts.seed)?;
    let jobs: Vec<(usize, Domain)> = opts
        .domains
        .iter()
        .flat_map(|&d| (0..frames.len()).map(move |i| (i, d)))
        .collect();
    let embedded = jobs
        .par_iter()
        .map(|&(i, d)| features.of_frame(&frames[i], d))
        .collect::<Result<Vec<_>, _>>()?;
    let mut by_domain: BTreeMap<Domain, Vec<(usize, &str, EmbeddingVector)>> = BTreeMap::new();
    for (&(i, d), e) in jobs.iter().zip(embedded) {
        let list = by_domain.entry(d).or_default();
        if let Some(e) = e {
            list.push((assignment[&frames[i].key()], frames[i].subject.as_str(), e));
        }
    }
    for d in &opts.domains {
        if by_domain[d].is_empty() {
            let reason = match d.condition() {
                Some((s, m)) => format!("manifest has no {s}/{m} images"),
                None => "no frame has both a visual and a thermal image".to_string(),
            };
            return Err(ProtocolError::Underivable {
                domain: d.to_string(),
                reason,
            });
        }
    }

    let mut fold_results = Vec::new();
    for &row in &opts.domains {
        for &col in &opts.domains {
            for fold in 0..opts.folds {
                let gallery: Vec<(&str, &EmbeddingVector)> = by_domain[&row]
                    .iter()
                    .filter(|(f, _, _)| *f != fold)
                    .map(|(_, s, e)| (*s, e))
                    .collect();
                let probes: Vec<(&str, &EmbeddingVector)> = by_domain[&col]
                    .iter()
                    .filter(|(f, _, _)| *f == fold)
                    .map(|(_, s, e)| (*s, e))
                    .collect();
                if gallery.is_empty() || probes.is_empty() {
                    continue;
                }
                let mut correct = 0usize;
                for (truth, probe) in &probes {
                    let d = gallery
                        .iter()
                        .map(|(_, g)| euclidean(probe, g))
                        .collect::<Result<Vec<_>, _>>()?;
                    let best = argmin(&d).expect("gallery is non-empty");
                    correct += usize::from(gallery[best].0 == *truth);
                }
                fold_results.push(FoldResult {
                    train_cond: row.to_string(),
                    test_cond: col.to_string(),
                    fold,
                    accuracy: correct as f64 / probes.len() as f64,
                });
            }
        }
    }
    let names: Vec<&str> = opts.domains.iter().map(|d| d.as_str()).collect();
    let matrix = build_condition_matrix(&fold_results, &names, &names)?;
    Ok(IdentificationReport {
        domains: opts.domains.clone(),
        features: features.describe(),
        folds: opts.folds,
        frames: frames.len(),
        fold_results,
        matrix,
    })
}

// ---------------------------------------------------------------------------------------
// Checkpoint routing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Visual,
    Hybrid,
}

/// Enrolled subjects with one embedding per enrolled image.
#[derive(Debug, Clone)]
pub struct Gallery {
    pub domain: Domain,
    pub entries: Vec<(String, EmbeddingVector)>,
}

/// Every frame of `manifest` available in `domain`, in frame order.
pub fn build_gallery(manifest: &Manifest, domain: Domain, features: &Features) -> Result<Gallery, ProtocolError> {
    let frames = index_frames(manifest);
    let embedded = frames
        .par_iter()
        .map(|f| features.of_frame(f, domain))
        .collect::<Result<Vec<_>, _>>()?;
    let entries: Vec<(String, EmbeddingVector)> = frames
        .iter()
        .zip(embedded)
        .filter_map(|(f, e)| e.map(|e| (f.subject.clone(), e)))
        .collect();
    if entries.is_empty() {
        return Err(RecogError::EmptyGallery.into());
    }
    Ok(Gallery { domain, entries })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointTrace {
    pub masked: bool,
    pub route: Route,
    pub thermal_loaded: bool,
    pub hybrid_built: bool,
    /// SHA-256 of the hybrid's samples, when one was built.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hybrid_sha256: Option<String>,
    pub gallery_domain: Domain,
    pub gallery_size: usize,
    pub identity: String,
    pub distance: f64,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CheckpointOutcome {
    pub trace: CheckpointTrace,
    pub hybrid: Option<Raster>,
}

/// Routes one traveller through the checkpoint flow. Unmasked faces are identified from
/// the visual image alone and `thermal` is never called. Masked faces are rebuilt as a
/// hybrid of the visual top half and the thermal bottom half before identification.
/// `gallery` is asked for the gallery matching the chosen route.
pub fn checkpoint(
    visual: &Raster,
    thermal: impl FnOnce() -> Result<Option<Raster>, ProtocolError>,
    masked: bool,
    embedder: &dyn Embedder,
    gallery: impl FnOnce(Route) -> Result<Gallery, ProtocolError>,
) -> Result<CheckpointOutcome, ProtocolError> {
    let mut steps = vec![format!(
        "mask state: {}",
        if masked { "masked" } else { "unmasked" }
    )];
    let visual = rescale_to_face(visual);
    let (route, probe, hybrid) = if masked {
        steps.push("route: hybrid".into());
        let thermal = thermal()?.ok_or(ProtocolError::MissingThermal)?;
        steps.push("thermal image loaded".into());
        let hybrid = make_hybrid(&visual, &rescale_to_face(&thermal))?;
        steps.push("hybrid built: visual rows 0-127 over thermal rows 128-255".into());
        (Route::Hybrid, embedder.embed(&hybrid)?, Some(hybrid))
    } else {
        steps.push("route: visual".into());
        (Route::Visual, embedder.embed(&visual)?, None)
    };
    let gallery = gallery(route)?;
    let distances = gallery
        .entries
        .iter()
        .map(|(_, g)| euclidean(&probe, g))
        .collect::<Result<Vec<_>, _>>()?;
    let best = argmin(&distances).ok_or(RecogError::EmptyGallery)?;
    let identity = gallery.entries[best].0.clone();
    steps.push(format!(
        "identified against {} {} gallery images: {identity} at distance {:.6}",
        gallery.entries.len(),
        gallery.domain,
        distances[best]
    ));
    let hybrid_sha256 = hybrid.as_ref().map(|h| {
        Sha256::digest(h.data())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    });
    Ok(CheckpointOutcome {
        trace: CheckpointTrace {
            masked,
            route,
            thermal_loaded: masked,
            hybrid_built: hybrid.is_some(),
            hybrid_sha256,
            gallery_domain: gallery.domain,
            gallery_size: gallery.entries.len(),
            identity,
            distance: distances[best],
            steps,
        },
        hybrid,
    })
}
