use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// The three degradation families handled by the universal restorer.
///
/// Declaration order is the tie-break order used by classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationLabel {
    Raindrop,
    Haze,
    Noise,
}

impl DegradationLabel {
    pub const ALL: [DegradationLabel; 3] = [
        DegradationLabel::Raindrop,
        DegradationLabel::Haze,
        DegradationLabel::Noise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationLabel::Raindrop => "raindrop",
            DegradationLabel::Haze => "haze",
            DegradationLabel::Noise => "noise",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Parses a comma separated task list such as `noise,haze`.
    pub fn parse_list(s: &str) -> Result<Vec<DegradationLabel>, DataError> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let label: DegradationLabel = part.parse()?;
            if !out.contains(&label) {
                out.push(label);
            }
        }
        if out.is_empty() {
            return Err(DataError::UnknownLabel(s.to_string()));
        }
        Ok(out)
    }
}

impl fmt::Display for DegradationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationLabel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raindrop" => Ok(DegradationLabel::Raindrop),
            "haze" => Ok(DegradationLabel::Haze),
            "noise" => Ok(DegradationLabel::Noise),
            _ => Err(DataError::UnknownLabel(s.to_string())),
        }
    }
}
