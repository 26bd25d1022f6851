use serde::{Deserialize, Serialize};

use crate::error::{PdseError, Result};

/// The nine coarse lesion types, ids 1..=9.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionType {
    Lung = 1,
    Abdomen = 2,
    Mediastinum = 3,
    Liver = 4,
    Pelvis = 5,
    SoftTissue = 6,
    Kidney = 7,
    Bone = 8,
    Other = 9,
}

impl LesionType {
    pub const ALL: [LesionType; 9] = [
        LesionType::Lung,
        LesionType::Abdomen,
        LesionType::Mediastinum,
        LesionType::Liver,
        LesionType::Pelvis,
        LesionType::SoftTissue,
        LesionType::Kidney,
        LesionType::Bone,
        LesionType::Other,
    ];

    /// Row order used by the report tables.
    pub const REPORT_ORDER: [LesionType; 9] = [
        LesionType::Bone,
        LesionType::Abdomen,
        LesionType::Mediastinum,
        LesionType::Liver,
        LesionType::Lung,
        LesionType::Kidney,
        LesionType::SoftTissue,
        LesionType::Pelvis,
        LesionType::Other,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get((id as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| PdseError::Format(format!("unknown lesion class id {id}")))
    }

    pub fn label(self) -> &'static str {
        match self {
            LesionType::Lung => "Lung",
            LesionType::Abdomen => "Abdomen",
            LesionType::Mediastinum => "Mediastinum",
            LesionType::Liver => "Liver",
            LesionType::Pelvis => "Pelvis",
            LesionType::SoftTissue => "Tissue",
            LesionType::Kidney => "Kidney",
            LesionType::Bone => "Bone",
            LesionType::Other => "Other",
        }
    }
}
