//! Parameter storage shared by all model components.
//!
//! Values are held as `f64` for graph math but every write commits through
//! `f32`, so the in-memory state always round-trips the 32-bit checkpoint
//! format bit-exactly.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named tensor of model state. `trainable` distinguishes weights that an
/// optimizer may update from fixed buffers (e.g. the text vocabulary table).
#[derive(Debug, Clone)]
pub struct Param {
    data: ArrayD<f64>,
    trainable: bool,
}

impl Param {
    pub fn from_f32(shape: &[usize], values: Vec<f32>, trainable: bool) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let data = ArrayD::from_shape_vec(
            IxDyn(shape),
            values.into_iter().map(f64::from).collect(),
        )
        .unwrap();
        Param { data, trainable }
    }

    pub fn zeros(shape: &[usize], trainable: bool) -> Self {
        Param {
            data: ArrayD::zeros(IxDyn(shape)),
            trainable,
        }
    }

    /// Gaussian init, drawn in `f32` so the stored value is exactly what a
    /// checkpoint would hold.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng, trainable: bool) -> Self {
        let n: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0f64, std).expect("std must be finite positive");
        let values: Vec<f32> = (0..n).map(|_| rng.sample(dist) as f32).collect();
        Param::from_f32(shape, values, trainable)
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Replaces the stored value, rounding through `f32`.
    pub fn commit(&mut self, new: &ArrayD<f64>) {
        assert_eq!(new.shape(), self.data.shape());
        self.data = new.mapv(|x| x as f32 as f64);
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&x| x as f32).collect()
    }

    pub fn load_f32(&mut self, shape: &[usize], values: &[f32]) -> crate::Result<()> {
        if shape != self.data.shape() {
            return Err(crate::Error::ManifestMismatch(format!(
                "shape {:?} does not match expected {:?}",
                shape,
                self.data.shape()
            )));
        }
        self.data = ArrayD::from_shape_vec(
            IxDyn(shape),
            values.iter().map(|&x| f64::from(x)).collect(),
        )
        .unwrap();
        Ok(())
    }

    /// Bitwise equality of the committed `f32` payloads.
    pub fn bits_eq(&self, other: &Param) -> bool {
        self.data.shape() == other.data.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| (*a as f32).to_bits() == (*b as f32).to_bits())
    }
}

/// Which parameters a training stage is allowed to update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeMask {
    /// Stage 1: only the learnable prompt state trains.
    PromptsOnly,
    /// Stage 2: backbone, shape encoder, and classifier heads train; the
    /// prompt state and text encoder stay frozen.
    BackboneAndHeads,
    /// Inference: nothing trains.
    AllFrozen,
}

impl FreezeMask {
    /// Whether the named parameter may be updated under this mask. Buffers
    /// (`trainable == false`) are frozen under every mask.
    pub fn allows(&self, name: &str, param: &Param) -> bool {
        if !param.trainable() {
            return false;
        }
        match self {
            FreezeMask::PromptsOnly => name.starts_with("prompts."),
            FreezeMask::BackboneAndHeads => {
                name.starts_with("backbone.") || name.starts_with("heads.")
            }
            FreezeMask::AllFrozen => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn commit_rounds_through_f32() {
        let mut p = Param::zeros(&[2], true);
        let v = ndarray::arr1(&[0.1f64, 1.0 / 3.0]).into_dyn();
        p.commit(&v);
        assert_eq!(p.value()[[0]], 0.1f32 as f64);
        assert_eq!(p.value()[[1]], (1.0f32 / 3.0) as f64);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = Param::randn(&[4, 4], 0.02, &mut r1, true);
        let b = Param::randn(&[4, 4], 0.02, &mut r2, true);
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn mask_scopes() {
        let p = Param::zeros(&[1], true);
        let buf = Param::zeros(&[1], false);
        assert!(FreezeMask::PromptsOnly.allows("prompts.shape_context", &p));
        assert!(!FreezeMask::PromptsOnly.allows("backbone.trunk.0.w", &p));
        assert!(FreezeMask::BackboneAndHeads.allows("heads.appearance.w", &p));
        assert!(!FreezeMask::BackboneAndHeads.allows("prompts.class_tokens", &p));
        assert!(!FreezeMask::BackboneAndHeads.allows("backbone.stem_visible.w", &buf));
        assert!(!FreezeMask::AllFrozen.allows("backbone.stem_visible.w", &p));
    }
}
