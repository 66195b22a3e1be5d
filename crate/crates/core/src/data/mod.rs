//! Datasets: descriptors, samples, importers, augmentation, the synthetic
//! face generator and mixed-dataset batching.

pub mod annotations;
pub mod augment;
pub mod batching;
pub mod imageio;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TufaError};
use crate::geometry::{LandmarkSet, MeanShape};

/// `H × W × 3` image with intensities in `[0, 1]`.
pub type Image = ndarray::Array3<f64>;

/// Which landmarks define the NME normalization distance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormSpec {
    /// Outer eye corners.
    pub ocular: Option<(usize, usize)>,
    /// Landmark sets whose centroids stand in for the pupils.
    pub pupil: Option<(Vec<usize>, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub id: String,
    pub n_landmarks: usize,
    #[serde(default)]
    pub norm: NormSpec,
    /// `flip_perm[i]` is the landmark that lands on slot `i` after a
    /// horizontal flip.
    #[serde(default)]
    pub flip_perm: Option<Vec<usize>>,
    #[serde(default)]
    pub mean_shape: Option<MeanShape>,
}

impl DatasetDescriptor {
    pub fn new(id: impl Into<String>, n_landmarks: usize) -> Self {
        DatasetDescriptor {
            id: id.into(),
            n_landmarks,
            norm: NormSpec::default(),
            flip_perm: None,
            mean_shape: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_landmarks;
        if n == 0 {
            return Err(TufaError::InvalidArgument(format!("dataset `{}` has no landmarks", self.id)));
        }
        let check = |i: usize| {
            if i < n {
                Ok(())
            } else {
                Err(TufaError::IndexOutOfRange { index: i, len: n })
            }
        };
        if let Some((a, b)) = self.norm.ocular {
            check(a)?;
            check(b)?;
        }
        if let Some((l, r)) = &self.norm.pupil {
            if l.is_empty() || r.is_empty() {
                return Err(TufaError::InvalidArgument("empty pupil landmark set".into()));
            }
            l.iter().chain(r).try_for_each(|&i| check(i))?;
        }
        if let Some(perm) = &self.flip_perm {
            if perm.len() != n {
                return Err(TufaError::CountMismatch {
                    expected: n,
                    found: perm.len(),
                    context: format!("flip permutation of `{}`", self.id),
                });
            }
            for (i, &j) in perm.iter().enumerate() {
                check(j)?;
                if perm[j] != i {
                    return Err(TufaError::InvalidArgument(format!(
                        "flip permutation of `{}` is not an involution at {i}",
                        self.id
                    )));
                }
            }
        }
        if let Some(m) = &self.mean_shape {
            if m.len() != n {
                return Err(TufaError::CountMismatch {
                    expected: n,
                    found: m.len(),
                    context: format!("mean shape of `{}`", self.id),
                });
            }
        }
        Ok(())
    }

    pub fn mean_shape(&self) -> Result<&MeanShape> {
        self.mean_shape
            .as_ref()
            .ok_or_else(|| TufaError::InvalidArgument(format!("dataset `{}` has no mean shape", self.id)))
    }

    /// WFLW 98-point layout.
    pub fn wflw() -> Self {
        let mut pairs: Vec<(usize, usize)> = (0..16).map(|i| (i, 32 - i)).collect();
        pairs.extend([
            (33, 46), (34, 45), (35, 44), (36, 43), (37, 42), (38, 50), (39, 49), (40, 48), (41, 47),
            (60, 72), (61, 71), (62, 70), (63, 69), (64, 68), (65, 75), (66, 74), (67, 73),
            (55, 59), (56, 58), (76, 82), (77, 81), (78, 80), (87, 83), (86, 84),
            (88, 92), (89, 91), (95, 93), (96, 97),
        ]);
        let mut d = DatasetDescriptor::new("wflw", 98);
        d.norm = NormSpec {
            ocular: Some((60, 72)),
            pupil: Some(((60..68).collect(), (68..76).collect())),
        };
        d.flip_perm = Some(perm_from_pairs(98, &pairs));
        d
    }

    /// 300W / COFW-68 68-point layout.
    pub fn ibug68(id: &str) -> Self {
        // 1-based mirror pairs of the iBUG scheme
        let one_based = [
            (1, 17), (2, 16), (3, 15), (4, 14), (5, 13), (6, 12), (7, 11), (8, 10),
            (18, 27), (19, 26), (20, 25), (21, 24), (22, 23),
            (32, 36), (33, 35),
            (37, 46), (38, 45), (39, 44), (40, 43), (41, 48), (42, 47),
            (49, 55), (50, 54), (51, 53), (62, 64), (61, 65), (68, 66), (59, 57), (60, 56),
        ];
        let pairs: Vec<(usize, usize)> = one_based.iter().map(|&(a, b)| (a - 1, b - 1)).collect();
        let mut d = DatasetDescriptor::new(id, 68);
        d.norm = NormSpec {
            ocular: Some((36, 45)),
            pupil: Some(((36..42).collect(), (42..48).collect())),
        };
        d.flip_perm = Some(perm_from_pairs(68, &pairs));
        d
    }
}

/// Builds a permutation from disjoint swap pairs; unlisted indices map to themselves.
pub fn perm_from_pairs(n: usize, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for &(a, b) in pairs {
        perm[a] = b;
        perm[b] = a;
    }
    perm
}

/// Ordered set of dataset descriptors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetRegistry {
    datasets: Vec<DatasetDescriptor>,
}

impl DatasetRegistry {
    pub fn new() -> Self {
        DatasetRegistry::default()
    }

    /// Adds or replaces a descriptor (matched by id).
    pub fn register(&mut self, d: DatasetDescriptor) -> Result<()> {
        d.validate()?;
        match self.datasets.iter_mut().find(|e| e.id == d.id) {
            Some(slot) => *slot = d,
            None => self.datasets.push(d),
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&DatasetDescriptor> {
        self.datasets
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| TufaError::UnknownDataset(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut DatasetDescriptor> {
        self.datasets
            .iter_mut()
            .find(|d| d.id == id)
            .ok_or_else(|| TufaError::UnknownDataset(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.datasets.iter().any(|d| d.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetDescriptor> {
        self.datasets.iter()
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

/// One face crop ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Landmarks in the crop frame `[0, 1]²`. Valid points outside the crop
    /// keep their out-of-range values.
    pub landmarks: LandmarkSet,
    pub dataset_id: String,
    pub source: String,
    /// Labeled face box `(width, height)` in crop units.
    pub box_size: (f64, f64),
}

impl Sample {
    /// Valid landmarks that fall outside `[0, 1]²`.
    pub fn out_of_crop(&self) -> Vec<usize> {
        self.landmarks
            .coords()
            .iter()
            .enumerate()
            .filter(|(i, p)| {
                let inside = (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
                self.landmarks.is_valid(*i) && !inside
            })
            .map(|(i, _)| i)
            .collect()
    }
}
