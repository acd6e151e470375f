//! JSON checkpoints for [`Mlp`] weights.
//!
//! Weights are written row-major per layer with 17 significant digits, which
//! round-trips every finite `f64` exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::Mlp;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    /// [`crate::data::Dataset::fingerprint`] of the training set.
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    /// Free-form description of the run that produced the weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct Encoded<'a> {
    dims: &'a [usize],
    weights: Vec<Vec<Box<RawValue>>>,
    meta: &'a CheckpointMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Decoded {
    dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    #[serde(default)]
    meta: CheckpointMeta,
}

fn encode_float(v: f64) -> Result<Box<RawValue>> {
    if !v.is_finite() {
        return Err(Error::Checkpoint(format!("cannot store non-finite weight {v}")));
    }
    RawValue::from_string(format!("{v:.16e}")).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn to_json(net: &Mlp, meta: &CheckpointMeta) -> Result<String> {
    let weights = net
        .weights()
        .iter()
        .map(|w| w.as_slice().iter().map(|&v| encode_float(v)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let encoded = Encoded { dims: net.dims(), weights, meta };
    serde_json::to_string(&encoded).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_json(text: &str) -> Result<(Mlp, CheckpointMeta)> {
    let decoded: Decoded = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if decoded.dims.len() < 2 {
        return Err(Error::Checkpoint(format!("need at least two dims, found {}", decoded.dims.len())));
    }
    let depth = decoded.dims.len() - 1;
    if decoded.weights.len() != depth {
        return Err(Error::Checkpoint(format!("{} weight arrays for {depth} layers", decoded.weights.len())));
    }
    let mut weights = Vec::with_capacity(depth);
    for (d, values) in decoded.weights.into_iter().enumerate() {
        let (rows, cols) = (decoded.dims[d + 1], decoded.dims[d]);
        if values.len() != rows * cols {
            return Err(Error::Checkpoint(format!(
                "layer {d}: {} values for a {rows}x{cols} weight",
                values.len()
            )));
        }
        weights.push(Matrix::new(rows, cols, values)?);
    }
    let net = Mlp::new(decoded.dims, weights).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((net, decoded.meta))
}

pub fn save(path: &Path, net: &Mlp, meta: &CheckpointMeta) -> Result<()> {
    let text = to_json(net, meta)?;
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<(Mlp, CheckpointMeta)> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    fn sample_net() -> Mlp {
        Mlp::init(&[3, 4, 2], &mut Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let net = sample_net();
        let meta = CheckpointMeta {
            seed: Some(5),
            epochs: Some(3),
            dataset: Some("abcd".into()),
            format: Some("v1".into()),
            config: Some(serde_json::json!({"lr": 0.1})),
        };
        let (back, meta_back) = from_json(&to_json(&net, &meta).unwrap()).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn floats_carry_seventeen_digits() {
        let net = Mlp::new(vec![1, 1], vec![Matrix::new(1, 1, vec![0.1]).unwrap()]).unwrap();
        let text = to_json(&net, &CheckpointMeta::default()).unwrap();
        assert!(text.contains("1.0000000000000001e-1"), "{text}");
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let bad = [
            r#"{"dims":[2,1],"weights":[[1.0]],"meta":{}}"#,
            r#"{"dims":[2,1],"weights":[[1.0,2.0],[3.0]],"meta":{}}"#,
            r#"{"dims":[2],"weights":[],"meta":{}}"#,
            r#"{"dims":[2,1],"weights":[[1.0,"x"]],"meta":{}}"#,
        ];
        for text in bad {
            assert!(matches!(from_json(text), Err(Error::Checkpoint(_))), "{text}");
        }
        assert!(from_json(r#"{"dims":[2,1],"weights":[[1.0,2.0]],"meta":{}}"#).is_ok());
    }

    #[test]
    fn rejects_non_finite_weights() {
        let net = Mlp::new(vec![1, 1], vec![Matrix::new(1, 1, vec![f64::NAN]).unwrap()]).unwrap();
        assert!(to_json(&net, &CheckpointMeta::default()).is_err());
    }
}
