//! Shared domain types: sensor modalities, per-modality labels, and the
//! object-level verdict rule.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three sensor modalities a sample can carry.
///
/// Serialization names double as the dataset directory names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModalityId {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "Infrared")]
    Infrared,
    #[serde(rename = "Pointcloud")]
    Pointcloud,
}

impl ModalityId {
    /// All modalities in canonical order (rgb, infrared, pointcloud).
    pub const ALL: [ModalityId; 3] = [ModalityId::Rgb, ModalityId::Infrared, ModalityId::Pointcloud];

    /// Directory / serialization name.
    pub fn dir_name(self) -> &'static str {
        match self {
            ModalityId::Rgb => "RGB",
            ModalityId::Infrared => "Infrared",
            ModalityId::Pointcloud => "Pointcloud",
        }
    }

    /// Short lowercase tag used in CLI flags and artifact file names.
    pub fn tag(self) -> &'static str {
        match self {
            ModalityId::Rgb => "rgb",
            ModalityId::Infrared => "ir",
            ModalityId::Pointcloud => "pc",
        }
    }

    /// Parse a user-facing tag. Accepts the short tags and the full names,
    /// case-insensitively.
    pub fn parse_tag(s: &str) -> Option<ModalityId> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Some(ModalityId::Rgb),
            "ir" | "infrared" => Some(ModalityId::Infrared),
            "pc" | "pointcloud" | "point_cloud" => Some(ModalityId::Pointcloud),
            _ => None,
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Binary per-modality labels; `None` marks a modality absent from the sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityLabels {
    pub rgb: Option<bool>,
    pub infrared: Option<bool>,
    pub pointcloud: Option<bool>,
}

impl ModalityLabels {
    pub fn new(rgb: Option<bool>, infrared: Option<bool>, pointcloud: Option<bool>) -> Self {
        Self { rgb, infrared, pointcloud }
    }

    pub fn get(&self, modality: ModalityId) -> Option<bool> {
        match modality {
            ModalityId::Rgb => self.rgb,
            ModalityId::Infrared => self.infrared,
            ModalityId::Pointcloud => self.pointcloud,
        }
    }

    pub fn set(&mut self, modality: ModalityId, label: Option<bool>) {
        match modality {
            ModalityId::Rgb => self.rgb = label,
            ModalityId::Infrared => self.infrared = label,
            ModalityId::Pointcloud => self.pointcloud = label,
        }
    }

    /// Iterator over (modality, label) for present modalities only.
    pub fn present(&self) -> impl Iterator<Item = (ModalityId, bool)> + '_ {
        ModalityId::ALL
            .iter()
            .filter_map(move |&m| self.get(m).map(|l| (m, l)))
    }
}

/// Object-level verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectLabel {
    Normal,
    Anomalous,
}

impl ObjectLabel {
    pub fn is_anomalous(self) -> bool {
        matches!(self, ObjectLabel::Anomalous)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("no modality present in labels")]
    NoModalityPresent,
}

/// Derive the object-level verdict from per-modality labels: anomalous iff
/// any present modality is labeled anomalous. Absent modalities are skipped;
/// at least one modality must be present.
pub fn derive_object_label(labels: &ModalityLabels) -> Result<ObjectLabel, LabelError> {
    let mut any_present = false;
    let mut any_positive = false;
    for (_, label) in labels.present() {
        any_present = true;
        any_positive |= label;
    }
    if !any_present {
        return Err(LabelError::NoModalityPresent);
    }
    Ok(if any_positive {
        ObjectLabel::Anomalous
    } else {
        ObjectLabel::Normal
    })
}

/// Mixes a base seed with a textual tag into an independent stream seed
/// (FNV-1a over the tag, xored with the golden-ratio-scrambled base).
/// Used wherever one dataset seed has to fan out into per-sample or
/// per-bank randomness that is stable under reordering and parallelism.
pub fn mix_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Dataset split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Defect-type directory name used for normal samples.
pub const GOOD_DEFECT: &str = "good";

/// Reference to one physical sample: its identity within the dataset plus the
/// per-modality file paths that were found for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub category: String,
    pub split: Split,
    /// Defect-type name; `"good"` for normal samples (always for train).
    pub defect: String,
    pub id: String,
    /// Data file per modality, where captured.
    pub paths: Vec<(ModalityId, PathBuf)>,
    /// Ground-truth annotation per modality (mask image or point-label file),
    /// present only where the anomaly is visible in that modality.
    pub annotations: Vec<(ModalityId, PathBuf)>,
}

impl SampleRef {
    pub fn path(&self, modality: ModalityId) -> Option<&PathBuf> {
        self.paths.iter().find(|(m, _)| *m == modality).map(|(_, p)| p)
    }

    pub fn annotation(&self, modality: ModalityId) -> Option<&PathBuf> {
        self.annotations
            .iter()
            .find(|(m, _)| *m == modality)
            .map(|(_, p)| p)
    }

    pub fn is_normal(&self) -> bool {
        self.defect == GOOD_DEFECT
    }

    /// Per-modality labels implied by annotation presence: a present modality
    /// is positive iff it carries an annotation. Modalities without a data
    /// file are absent.
    pub fn modality_labels(&self) -> ModalityLabels {
        let mut labels = ModalityLabels::default();
        for &(m, _) in &self.paths {
            labels.set(m, Some(self.annotation(m).is_some()));
        }
        labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(rgb: u8, ir: u8, pc: u8) -> ModalityLabels {
        ModalityLabels::new(Some(rgb == 1), Some(ir == 1), Some(pc == 1))
    }

    #[test]
    fn all_negative_is_normal() {
        assert_eq!(derive_object_label(&labels(0, 0, 0)), Ok(ObjectLabel::Normal));
    }

    #[test]
    fn single_positive_is_anomalous() {
        assert_eq!(derive_object_label(&labels(1, 0, 0)), Ok(ObjectLabel::Anomalous));
    }

    #[test]
    fn all_positive_is_anomalous() {
        assert_eq!(derive_object_label(&labels(1, 1, 1)), Ok(ObjectLabel::Anomalous));
    }

    #[test]
    fn absent_modalities_are_skipped() {
        let l = ModalityLabels::new(None, Some(false), None);
        assert_eq!(derive_object_label(&l), Ok(ObjectLabel::Normal));
        let l = ModalityLabels::new(None, None, Some(true));
        assert_eq!(derive_object_label(&l), Ok(ObjectLabel::Anomalous));
    }

    #[test]
    fn no_modality_errors() {
        let l = ModalityLabels::default();
        assert_eq!(derive_object_label(&l), Err(LabelError::NoModalityPresent));
    }

    #[test]
    fn serde_names_are_stable() {
        assert_eq!(serde_json::to_string(&ModalityId::Rgb).unwrap(), "\"RGB\"");
        assert_eq!(serde_json::to_string(&ModalityId::Infrared).unwrap(), "\"Infrared\"");
        assert_eq!(serde_json::to_string(&ModalityId::Pointcloud).unwrap(), "\"Pointcloud\"");
        let back: ModalityId = serde_json::from_str("\"Pointcloud\"").unwrap();
        assert_eq!(back, ModalityId::Pointcloud);
    }

    proptest! {
        // Flipping any present label 0 -> 1 never turns anomalous into normal.
        #[test]
        fn verdict_is_monotone(rgb in proptest::option::of(any::<bool>()),
                               ir in proptest::option::of(any::<bool>()),
                               pc in proptest::option::of(any::<bool>()),
                               which in 0usize..3) {
            let base = ModalityLabels::new(rgb, ir, pc);
            prop_assume!(base.present().next().is_some());
            let before = derive_object_label(&base).unwrap();
            let mut flipped = base;
            let m = ModalityId::ALL[which];
            if flipped.get(m).is_some() {
                flipped.set(m, Some(true));
            }
            let after = derive_object_label(&flipped).unwrap();
            if before == ObjectLabel::Anomalous {
                prop_assert_eq!(after, ObjectLabel::Anomalous);
            }
        }

        // The verdict only depends on the multiset of present labels.
        #[test]
        fn verdict_is_permutation_invariant(rgb in any::<bool>(), ir in any::<bool>(), pc in any::<bool>()) {
            let a = derive_object_label(&ModalityLabels::new(Some(rgb), Some(ir), Some(pc))).unwrap();
            let b = derive_object_label(&ModalityLabels::new(Some(pc), Some(rgb), Some(ir))).unwrap();
            let c = derive_object_label(&ModalityLabels::new(Some(ir), Some(pc), Some(rgb))).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(b, c);
        }
    }
}
