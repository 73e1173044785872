//! JSON shapes shared by the CLI and the service. Scores are written as
//! `{:.16e}` decimals: 17 significant digits, enough to round-trip `f64`.

use namecap_core::RetrievalResult;
use serde::Serialize;
use serde_json::value::RawValue;

pub fn float(v: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{v:.16e}")).expect("formatted float is valid JSON")
}

#[derive(Debug, Serialize)]
pub struct WireName {
    pub name: String,
    pub score: Box<RawValue>,
}

#[derive(Debug, Serialize)]
pub struct WireNames {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub names: Vec<WireName>,
}

impl WireNames {
    pub fn new(id: Option<String>, r: &RetrievalResult) -> Self {
        Self {
            id,
            names: r
                .names
                .iter()
                .map(|n| WireName {
                    name: n.name.clone(),
                    score: float(n.score),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire types serialize")
    }
}
