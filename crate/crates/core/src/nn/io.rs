//! JSON model files. Every real is stored as its hex bit pattern, so loading a
//! saved model reproduces it exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActivationKind, DenseLayer, Mlp};
use crate::codec;
use crate::error::{invalid, Result};
use crate::linalg::Matrix;

pub const FORMAT: &str = "nsm-mlp";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationDoc {
    Identity,
    LeakyRelu {
        #[serde(with = "codec::scalar")]
        slope: f64,
    },
    Sigmoid,
}

impl From<ActivationKind> for ActivationDoc {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Identity => ActivationDoc::Identity,
            ActivationKind::LeakyRelu { slope } => ActivationDoc::LeakyRelu { slope },
            ActivationKind::Sigmoid => ActivationDoc::Sigmoid,
        }
    }
}

impl From<ActivationDoc> for ActivationKind {
    fn from(a: ActivationDoc) -> Self {
        match a {
            ActivationDoc::Identity => ActivationKind::Identity,
            ActivationDoc::LeakyRelu { slope } => ActivationKind::LeakyRelu { slope },
            ActivationDoc::Sigmoid => ActivationKind::Sigmoid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDoc {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: ActivationDoc,
    /// Row-major, `out_dim x in_dim`.
    #[serde(with = "codec::vec")]
    pub weights: Vec<f64>,
    #[serde(with = "codec::vec")]
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerDoc>,
}

impl From<&Mlp> for ModelDoc {
    fn from(m: &Mlp) -> Self {
        ModelDoc {
            format: FORMAT.into(),
            version: VERSION,
            layers: m
                .layers()
                .iter()
                .map(|l| LayerDoc {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: l.activation.into(),
                    weights: l.weights.data().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }
}

impl ModelDoc {
    pub fn into_model(self) -> Result<Mlp> {
        if self.format != FORMAT {
            return Err(invalid(format!("unknown model format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(invalid(format!("unsupported model version {}", self.version)));
        }
        let layers = self
            .layers
            .into_iter()
            .map(|l| {
                let w = Matrix::new(l.out_dim, l.in_dim, l.weights)?;
                DenseLayer::new(w, l.bias, l.activation.into())
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }
}

pub fn to_json(model: &Mlp) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelDoc::from(model))?)
}

pub fn from_json(text: &str) -> Result<Mlp> {
    serde_json::from_str::<ModelDoc>(text)?.into_model()
}

pub fn save(model: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Mlp> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::default_architecture;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = default_architecture(7).unwrap();
        m.initialize(42);
        let mut p = m.parameters();
        p[0] = 1.0 / 3.0;
        p[1] = -0.0;
        p[2] = f64::MIN_POSITIVE / 2.0;
        m.set_parameters(&p).unwrap();
        let back = from_json(&to_json(&m).unwrap()).unwrap();
        let bits = |m: &Mlp| m.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(back.layers()[1].activation, m.layers()[1].activation);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = default_architecture(3).unwrap();
        m.initialize(1);
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }

    #[test]
    fn rejects_inconsistent_documents() {
        let m = default_architecture(2).unwrap();
        let mut doc = ModelDoc::from(&m);
        doc.layers[0].weights.pop();
        assert!(doc.into_model().is_err());
        let mut doc = ModelDoc::from(&m);
        doc.format = "other".into();
        assert!(doc.into_model().is_err());
        assert!(from_json("{}").is_err());
    }
}
