//! Core sample/batch types and the cross-modal identity-balanced sampler.

use crate::{Error, Result};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }
}

/// One sample: pixel grid, modality tag, identity, camera id, optional shape map.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// H x W x 3 intensities in [0, 1].
    pub pixels: Array3<f64>,
    pub modality: Modality,
    pub identity: usize,
    pub camera: usize,
    /// Silhouette rendering, same spatial dims as `pixels`, values in [0, 1].
    pub shape_map: Option<Array3<f64>>,
    /// Source path or synthetic tag, for diagnostics.
    pub source: String,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn validate(&self, num_identities: usize) -> Result<()> {
        if self.identity >= num_identities {
            return Err(Error::UnknownIdentity {
                identity: self.identity,
                num_identities,
            });
        }
        if let Some(sm) = &self.shape_map {
            if sm.shape()[..2] != self.pixels.shape()[..2] {
                return Err(Error::ShapeMismatch {
                    expected: (self.height(), self.width()),
                    got: (sm.shape()[0], sm.shape()[1]),
                });
            }
        }
        Ok(())
    }
}

/// An identity-balanced cross-modal batch: `n_v == n_r`, position i in
/// `visible` pairs with position i in `infrared` and both share an identity.
#[derive(Debug, Clone)]
pub struct Batch {
    pub visible: Vec<ImageRecord>,
    pub infrared: Vec<ImageRecord>,
    /// `pairing[i]` is the infrared position paired with visible position i.
    pub pairing: Vec<usize>,
}

impl Batch {
    pub fn len_per_modality(&self) -> usize {
        self.visible.len()
    }

    pub fn labels_visible(&self) -> Vec<usize> {
        self.visible.iter().map(|r| r.identity).collect()
    }

    pub fn labels_infrared(&self) -> Vec<usize> {
        self.infrared.iter().map(|r| r.identity).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.visible.len() != self.infrared.len() {
            return Err(Error::PairingMismatch(format!(
                "n_v = {} but n_r = {}",
                self.visible.len(),
                self.infrared.len()
            )));
        }
        if self.pairing.len() != self.visible.len() {
            return Err(Error::PairingMismatch("pairing length".into()));
        }
        let mut seen = vec![false; self.pairing.len()];
        for (i, &j) in self.pairing.iter().enumerate() {
            if j >= self.infrared.len() || seen[j] {
                return Err(Error::PairingMismatch(format!("pairing not a bijection at {i}")));
            }
            seen[j] = true;
            if self.visible[i].identity != self.infrared[j].identity {
                return Err(Error::PairingMismatch(format!(
                    "pair ({i}, {j}) identities {} vs {}",
                    self.visible[i].identity, self.infrared[j].identity
                )));
            }
        }
        Ok(())
    }
}

/// Label space over contiguous identities `[0, num_identities)`.
#[derive(Debug, Clone, Copy)]
pub struct LabelSpace {
    pub num_identities: usize,
}

impl LabelSpace {
    pub fn one_hot(&self, y: usize) -> Result<Vec<f64>> {
        if y >= self.num_identities {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_identities: self.num_identities,
            });
        }
        let mut v = vec![0.0; self.num_identities];
        v[y] = 1.0;
        Ok(v)
    }
}

/// Per-identity record indices split by modality, in dataset order.
fn index_by_identity(dataset: &[ImageRecord]) -> BTreeMap<usize, (Vec<usize>, Vec<usize>)> {
    let mut map: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, r) in dataset.iter().enumerate() {
        let entry = map.entry(r.identity).or_default();
        match r.modality {
            Modality::Visible => entry.0.push(i),
            Modality::Infrared => entry.1.push(i),
        }
    }
    map
}

fn draw_k(
    pool: &[usize],
    k: usize,
    identity: usize,
    modality: &'static str,
    allow_replacement: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if pool.len() >= k {
        let mut shuffled = pool.to_vec();
        shuffled.shuffle(rng);
        shuffled.truncate(k);
        Ok(shuffled)
    } else if allow_replacement && !pool.is_empty() {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            out.push(pool[rng.random_range(0..pool.len())]);
        }
        Ok(out)
    } else {
        Err(Error::InsufficientSamples {
            identity,
            modality,
            have: pool.len(),
            need: k,
        })
    }
}

fn build_batch(
    dataset: &[ImageRecord],
    ids: &[usize],
    by_id: &BTreeMap<usize, (Vec<usize>, Vec<usize>)>,
    k: usize,
    allow_replacement: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut visible = Vec::with_capacity(ids.len() * k);
    let mut infrared = Vec::with_capacity(ids.len() * k);
    for &id in ids {
        let (vis_pool, ir_pool) = by_id.get(&id).expect("identity disappeared");
        let vis = draw_k(vis_pool, k, id, "visible", allow_replacement, rng)?;
        let ir = draw_k(ir_pool, k, id, "infrared", allow_replacement, rng)?;
        for (v, r) in vis.into_iter().zip(ir) {
            visible.push(dataset[v].clone());
            infrared.push(dataset[r].clone());
        }
    }
    let pairing = (0..visible.len()).collect();
    Ok(Batch {
        visible,
        infrared,
        pairing,
    })
}

/// Draws one batch of P identities with K records per identity per modality.
/// The k-th sampled visible record of an identity pairs with its k-th sampled
/// infrared record. Deterministic for a fixed seed.
pub fn pk_sample(dataset: &[ImageRecord], p: usize, k: usize, rng_seed: u64) -> Result<Batch> {
    assert!(p > 0 && k > 0, "P and K must be positive");
    let by_id = index_by_identity(dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    if ids.len() < p {
        return Err(Error::InsufficientSamples {
            identity: 0,
            modality: "either",
            have: ids.len(),
            need: p,
        });
    }
    ids.shuffle(&mut rng);
    ids.truncate(p);
    build_batch(dataset, &ids, &by_id, k, false, &mut rng)
}

/// One epoch of identity-balanced batches. Each usable identity appears in at
/// most one batch per epoch and contributes K distinct records per modality,
/// so no record repeats within an epoch when counts permit. Reshuffles across
/// epochs via `seed + epoch`.
pub struct EpochIterator<'a> {
    dataset: &'a [ImageRecord],
    by_id: BTreeMap<usize, (Vec<usize>, Vec<usize>)>,
    id_order: Vec<usize>,
    p: usize,
    k: usize,
    allow_replacement: bool,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl<'a> EpochIterator<'a> {
    pub fn new(
        dataset: &'a [ImageRecord],
        p: usize,
        k: usize,
        allow_replacement: bool,
        seed: u64,
        epoch: usize,
    ) -> Result<Self> {
        assert!(p > 0 && k > 0, "P and K must be positive");
        let by_id = index_by_identity(dataset);
        // An identity is usable when it can fill K slots in both modalities.
        let usable: Vec<usize> = by_id
            .iter()
            .filter(|(_, (v, r))| {
                if allow_replacement {
                    !v.is_empty() && !r.is_empty()
                } else {
                    v.len() >= k && r.len() >= k
                }
            })
            .map(|(id, _)| *id)
            .collect();
        if usable.len() < p {
            return Err(Error::InsufficientSamples {
                identity: 0,
                modality: "either",
                have: usable.len(),
                need: p,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
        let mut id_order = usable;
        id_order.shuffle(&mut rng);
        Ok(EpochIterator {
            dataset,
            by_id,
            id_order,
            p,
            k,
            allow_replacement,
            rng,
            cursor: 0,
        })
    }

    /// Number of batches this epoch will yield.
    pub fn batches_per_epoch(&self) -> usize {
        self.id_order.len() / self.p
    }
}

impl Iterator for EpochIterator<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor + self.p > self.id_order.len() {
            return None;
        }
        let ids = self.id_order[self.cursor..self.cursor + self.p].to_vec();
        self.cursor += self.p;
        Some(build_batch(
            self.dataset,
            &ids,
            &self.by_id,
            self.k,
            self.allow_replacement,
            &mut self.rng,
        ))
    }
}
