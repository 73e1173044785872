//! JSON-lines feature files: one `{"id": ..., "features": [[...] x 32]}`
//! record per line.

use std::io::{BufRead, Write};

use anyhow::{bail, Context};
use namecap_core::FeatureBlock;
use serde::{Deserialize, Serialize};

use crate::encoder::ROWS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: String,
    pub features: Vec<Vec<f32>>,
}

impl FeatureRecord {
    pub fn from_block(id: impl Into<String>, block: &FeatureBlock) -> Self {
        Self {
            id: id.into(),
            features: block.rows().map(<[f32]>::to_vec).collect(),
        }
    }
}

/// Reads every record, checking the row count and that each row is
/// `dim` wide.
pub fn read_features(reader: impl BufRead, dim: usize) -> anyhow::Result<Vec<(String, FeatureBlock)>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line).with_context(|| format!("feature line {}", n + 1))?;
        if rec.features.len() != ROWS {
            bail!("feature line {}: {} rows, expected {ROWS}", n + 1, rec.features.len());
        }
        if let Some(w) = rec.features.iter().map(Vec::len).find(|&w| w != dim) {
            bail!("feature line {}: row width {w}, expected {dim}", n + 1);
        }
        let block = FeatureBlock::new(rec.features).with_context(|| format!("feature line {}", n + 1))?;
        out.push((rec.id, block));
    }
    Ok(out)
}

pub fn write_features(mut w: impl Write, records: &[FeatureRecord]) -> anyhow::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PseudoEncoder;

    #[test]
    fn round_trip() {
        let enc = PseudoEncoder::new(1, 3);
        let recs: Vec<_> = ["a", "b"]
            .iter()
            .map(|id| FeatureRecord::from_block(*id, &enc.encode(id).unwrap()))
            .collect();
        let mut buf = Vec::new();
        write_features(&mut buf, &recs).unwrap();
        let back = read_features(buf.as_slice(), 3).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, "b");
        assert_eq!(back[1].1, enc.encode("b").unwrap());
    }

    #[test]
    fn shape_errors() {
        let short = r#"{"id":"x","features":[[1.0,2.0]]}"#;
        assert!(read_features(short.as_bytes(), 2).is_err());
        let rows = vec![vec![1.0f32, 0.0]; ROWS];
        let line = serde_json::to_string(&FeatureRecord {
            id: "x".into(),
            features: rows,
        })
        .unwrap();
        assert!(read_features(line.as_bytes(), 3).is_err());
        assert!(read_features(line.as_bytes(), 2).is_ok());
        assert!(read_features(r#"{"id":"x"}"#.as_bytes(), 2).is_err());
    }
}
