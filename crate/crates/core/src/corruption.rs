//! Target-class corruption.
//!
//! Flagged target-class samples are pulled toward a randomly drawn exemplar
//! of the collateral class while keeping their original label. The result is
//! an overlay on top of the pristine dataset, which stays untouched for
//! evaluation.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::dataset::{FederatedAssignment, LabeledDataset, IMAGE_SIDE, NUM_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum CorruptionError {
    #[error("invalid corruption parameter: {0}")]
    Parameter(String),
    #[error("inconsistent assignment: {0}")]
    Consistency(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionMode {
    /// Linear blend in pixel space with strength `alpha`.
    PixelInterpolation,
    /// Features replaced by the collateral exemplar outright.
    LabelFlip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub target_class: u8,
    pub collateral_class: u8,
    pub alpha: f64,
    pub fraction: f64,
    pub mode: CorruptionMode,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), CorruptionError> {
        if self.target_class as usize >= NUM_CLASSES
            || self.collateral_class as usize >= NUM_CLASSES
        {
            return Err(CorruptionError::Parameter(
                "class ids must lie in 0..10".into(),
            ));
        }
        if self.target_class == self.collateral_class {
            return Err(CorruptionError::Parameter(format!(
                "target and collateral class are both {}",
                self.target_class
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CorruptionError::Parameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(CorruptionError::Parameter(format!(
                "fraction must lie in [0, 1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Builds a corrupted image from a target-class sample and a collateral
/// exemplar. `alpha = 1` must reproduce the collateral exemplar.
pub trait Interpolator {
    fn interpolate(
        &self,
        target: &[f32],
        collateral: &[f32],
        alpha: f64,
    ) -> Result<Vec<f32>, CorruptionError>;
}

/// Pixel-space linear interpolation.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelInterpolator;

impl Interpolator for PixelInterpolator {
    fn interpolate(
        &self,
        target: &[f32],
        collateral: &[f32],
        alpha: f64,
    ) -> Result<Vec<f32>, CorruptionError> {
        interpolate_pixel(target, collateral, alpha)
    }
}

/// `alpha * collateral + (1 - alpha) * target`, clamped to `[0, 1]`.
pub fn interpolate_pixel(
    target: &[f32],
    collateral: &[f32],
    alpha: f64,
) -> Result<Vec<f32>, CorruptionError> {
    if target.len() != collateral.len() {
        return Err(CorruptionError::Parameter(format!(
            "image sizes differ: {} vs {}",
            target.len(),
            collateral.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CorruptionError::Parameter(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(target
        .iter()
        .zip(collateral)
        .map(|(&t, &c)| {
            let v = alpha * c as f64 + (1.0 - alpha) * t as f64;
            v.clamp(0.0, 1.0) as f32
        })
        .collect())
}

/// Replacement images keyed by training-set index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorruptionOverlay {
    replaced: BTreeMap<usize, Vec<f32>>,
    /// Collateral exemplar drawn for each replaced sample.
    exemplars: BTreeMap<usize, usize>,
}

impl CorruptionOverlay {
    pub fn is_empty(&self) -> bool {
        self.replaced.is_empty()
    }

    pub fn len(&self) -> usize {
        self.replaced.len()
    }

    pub fn get(&self, index: usize) -> Option<&[f32]> {
        self.replaced.get(&index).map(Vec::as_slice)
    }

    pub fn exemplar_of(&self, index: usize) -> Option<usize> {
        self.exemplars.get(&index).copied()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.replaced.keys().copied()
    }
}

/// A dataset seen through an optional corruption overlay.
#[derive(Debug, Clone, Copy)]
pub struct DataView<'a> {
    base: &'a LabeledDataset,
    overlay: Option<&'a CorruptionOverlay>,
}

impl<'a> DataView<'a> {
    pub fn new(base: &'a LabeledDataset, overlay: Option<&'a CorruptionOverlay>) -> Self {
        DataView { base, overlay }
    }

    pub fn pristine(base: &'a LabeledDataset) -> Self {
        DataView {
            base,
            overlay: None,
        }
    }

    pub fn image(&self, i: usize) -> &'a [f32] {
        self.overlay
            .and_then(|o| o.get(i))
            .unwrap_or_else(|| self.base.image(i))
    }

    pub fn label(&self, i: usize) -> u8 {
        self.base.label(i)
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }
}

/// Corrupts every flagged index of `assignment` with the pixel interpolator.
pub fn corrupt_assignment<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    assignment: &FederatedAssignment,
    spec: &CorruptionSpec,
    rng: &mut R,
) -> Result<CorruptionOverlay, CorruptionError> {
    corrupt_with(ds, assignment, spec, &PixelInterpolator, rng)
}

/// Corrupts every flagged index using `interpolator` for the blend.
///
/// Each flagged sample draws its own collateral exemplar uniformly from the
/// whole training set. Flags are visited in ascending index order.
pub fn corrupt_with<R: Rng + ?Sized, I: Interpolator + ?Sized>(
    ds: &LabeledDataset,
    assignment: &FederatedAssignment,
    spec: &CorruptionSpec,
    interpolator: &I,
    rng: &mut R,
) -> Result<CorruptionOverlay, CorruptionError> {
    spec.validate()?;
    if assignment.target_class != spec.target_class {
        return Err(CorruptionError::Consistency(format!(
            "assignment targets class {} but corruption targets {}",
            assignment.target_class, spec.target_class
        )));
    }
    let mut flagged: Vec<usize> = assignment
        .nodes
        .iter()
        .flat_map(|n| n.corrupt.iter().copied())
        .collect();
    flagged.sort_unstable();
    let mut overlay = CorruptionOverlay::default();
    if flagged.is_empty() {
        return Ok(overlay);
    }
    let pool = ds.indices_of(spec.collateral_class);
    if pool.is_empty() {
        return Err(CorruptionError::Consistency(format!(
            "no samples of collateral class {} to draw from",
            spec.collateral_class
        )));
    }
    for i in flagged {
        if i >= ds.len() {
            return Err(CorruptionError::Consistency(format!(
                "flagged index {i} beyond dataset"
            )));
        }
        if ds.label(i) != spec.target_class {
            return Err(CorruptionError::Consistency(format!(
                "flagged index {i} has label {}, expected target class {}",
                ds.label(i),
                spec.target_class
            )));
        }
        let exemplar = pool[rng.random_range(0..pool.len())];
        let image = match spec.mode {
            CorruptionMode::PixelInterpolation => {
                interpolator.interpolate(ds.image(i), ds.image(exemplar), spec.alpha)?
            }
            CorruptionMode::LabelFlip => ds.image(exemplar).to_vec(),
        };
        overlay.replaced.insert(i, image);
        overlay.exemplars.insert(i, exemplar);
    }
    Ok(overlay)
}

/// Writes a 28x28 image as a binary PGM.
pub fn write_pgm(path: impl AsRef<Path>, image: &[f32]) -> io::Result<()> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n")?;
    let bytes: Vec<u8> = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()
}
