use serde::{Deserialize, Serialize};

use super::{FactorGraph, FactorNode, VariableNode};
use crate::error::{bail, Error, Result};

/// Version tag of the graph JSON format.
pub const PGM_FORMAT: &str = "fgnn-pgm-v1";

/// On-disk form of a [`FactorGraph`]:
///
/// ```json
/// {"format":"fgnn-pgm-v1",
///  "variables":[{"id":0,"cardinality":2,"log_potential":[0.1,0.7]}],
///  "factors":[{"id":0,"scope":[0,1],"log_potential":{"shape":[2,2],"values":[0,0.1,0.2,1]}}]}
/// ```
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphFile {
    pub format: String,
    pub variables: Vec<VariableNode>,
    pub factors: Vec<FactorNode>,
}

impl From<&FactorGraph> for GraphFile {
    fn from(g: &FactorGraph) -> Self {
        GraphFile {
            format: PGM_FORMAT.to_string(),
            variables: g.variables().to_vec(),
            factors: g.factors().to_vec(),
        }
    }
}

impl TryFrom<GraphFile> for FactorGraph {
    type Error = Error;

    fn try_from(file: GraphFile) -> Result<Self> {
        if file.format != PGM_FORMAT {
            bail!(Format, "expected format {PGM_FORMAT}, found {}", file.format);
        }
        FactorGraph::new(file.variables, file.factors)
    }
}

impl Serialize for FactorGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GraphFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for FactorGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = GraphFile::deserialize(d)?;
        FactorGraph::try_from(file).map_err(serde::de::Error::custom)
    }
}

impl FactorGraph {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgm::two_var_graph;

    #[test]
    fn json_layout() {
        let g = two_var_graph();
        let v: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        assert_eq!(v["format"], PGM_FORMAT);
        assert_eq!(v["variables"][1]["cardinality"], 2);
        assert_eq!(v["factors"][0]["scope"], serde_json::json!([0, 1]));
        assert_eq!(v["factors"][0]["log_potential"]["shape"], serde_json::json!([2, 2]));
        assert_eq!(
            v["factors"][0]["log_potential"]["values"],
            serde_json::json!([0.0, 0.1, 0.2, 1.0])
        );
        assert_eq!(FactorGraph::from_json(&g.to_json().unwrap()).unwrap(), g);
    }

    #[test]
    fn rejects_wrong_version_and_bad_tables() {
        let g = two_var_graph();
        let text = g.to_json().unwrap().replace(PGM_FORMAT, "fgnn-pgm-v0");
        assert!(FactorGraph::from_json(&text).is_err());

        let bad = r#"{"format":"fgnn-pgm-v1","variables":[{"id":0,"cardinality":2,"log_potential":[0,1]}],
            "factors":[{"id":0,"scope":[0],"log_potential":{"shape":[2],"values":[1]}}]}"#;
        assert!(FactorGraph::from_json(bad).is_err());
    }
}
