use serde::{Deserialize, Serialize};

/// Quality estimate for one (volume, class) label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub volume_id: String,
    pub class_id: u8,
    /// Dice against the reference label, when one exists.
    #[serde(default)]
    pub actual_dsc: Option<f64>,
    pub predicted_dsc: f64,
    /// Per-slice predictions `(z, dsc)`; `predicted_dsc` is their mean.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slices: Vec<(usize, f64)>,
}

impl QualityRecord {
    pub fn from_slices(volume_id: impl Into<String>, class_id: u8, slices: Vec<(usize, f64)>) -> Self {
        let predicted_dsc = if slices.is_empty() {
            f64::NAN
        } else {
            slices.iter().map(|s| s.1).sum::<f64>() / slices.len() as f64
        };
        Self { volume_id: volume_id.into(), class_id, actual_dsc: None, predicted_dsc, slices }
    }

    pub fn with_actual(mut self, actual: f64) -> Self {
        self.actual_dsc = Some(actual);
        self
    }
}

/// Reads QualityRecords from JSON lines, skipping blank lines.
pub fn read_jsonl(text: &str) -> crate::Result<Vec<QualityRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

pub fn write_jsonl(records: &[QualityRecord]) -> crate::Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
