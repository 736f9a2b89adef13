//! Versioned model checkpoints: a flat record of named tensors with shapes.
//!
//! JSON with a `format_version` field; tensors appear in a fixed order
//! (`layer{l}.router`, then per expert `w1/b1/w2/b2`, then `head.w`,
//! `head.b`). Initialization is deterministic in a 64-bit seed (one ChaCha8
//! stream consumed in the same order), so a checkpoint can be reproduced
//! from `(dims, seed)` alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::{ModelDims, ToyLm};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    dims: ModelDims,
    tensors: Vec<TensorRecord>,
}

fn mat_record(name: String, m: &Mat) -> TensorRecord {
    TensorRecord {
        name,
        shape: vec![m.n_rows(), m.n_cols()],
        data: m.data().to_vec(),
    }
}

fn vec_record(name: String, v: &[f64]) -> TensorRecord {
    TensorRecord {
        name,
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

pub fn model_to_json(model: &ToyLm) -> String {
    let mut tensors = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        tensors.push(mat_record(format!("layer{}.router", l), &layer.router));
        for (e, expert) in layer.experts.iter().enumerate() {
            tensors.push(mat_record(format!("layer{}.expert{}.w1", l, e), &expert.w1));
            tensors.push(vec_record(format!("layer{}.expert{}.b1", l, e), &expert.b1));
            tensors.push(mat_record(format!("layer{}.expert{}.w2", l, e), &expert.w2));
            tensors.push(vec_record(format!("layer{}.expert{}.b2", l, e), &expert.b2));
        }
    }
    tensors.push(mat_record("head.w".into(), &model.head_w));
    tensors.push(vec_record("head.b".into(), &model.head_b));
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dims: model.dims,
        tensors,
    };
    serde_json::to_string(&ckpt).expect("checkpoint serializes")
}

pub fn model_from_json(text: &str) -> Result<ToyLm> {
    let ckpt: Checkpoint =
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            ckpt.format_version
        )));
    }
    ckpt.dims.validate()?;

    // Rebuild through the flat-parameter path: tensors must appear in the
    // canonical order with the canonical shapes.
    let mut model = ToyLm::init(ckpt.dims, 0)?;
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    let d = ckpt.dims;
    for l in 0..d.n_layers {
        expected.push((format!("layer{}.router", l), vec![d.n_experts, d.d_model]));
        for e in 0..d.n_experts {
            expected.push((format!("layer{}.expert{}.w1", l, e), vec![d.d_hidden, d.d_model]));
            expected.push((format!("layer{}.expert{}.b1", l, e), vec![d.d_hidden]));
            expected.push((format!("layer{}.expert{}.w2", l, e), vec![d.d_model, d.d_hidden]));
            expected.push((format!("layer{}.expert{}.b2", l, e), vec![d.d_model]));
        }
    }
    expected.push(("head.w".into(), vec![d.vocab, d.d_model]));
    expected.push(("head.b".into(), vec![d.vocab]));

    if ckpt.tensors.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, expected {}",
            ckpt.tensors.len(),
            expected.len()
        )));
    }
    let mut flat = Vec::new();
    for (tensor, (name, shape)) in ckpt.tensors.iter().zip(&expected) {
        if &tensor.name != name || &tensor.shape != shape {
            return Err(Error::Format(format!(
                "unexpected tensor '{}' {:?} (expected '{}' {:?})",
                tensor.name, tensor.shape, name, shape
            )));
        }
        let numel: usize = shape.iter().product();
        if tensor.data.len() != numel {
            return Err(Error::Format(format!(
                "tensor '{}' has {} values, shape needs {}",
                tensor.name,
                tensor.data.len(),
                numel
            )));
        }
        if tensor.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "tensor '{}' contains non-finite values",
                tensor.name
            )));
        }
        flat.extend_from_slice(&tensor.data);
    }
    model.from_flat(&flat)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            d_model: 6,
            d_hidden: 8,
            n_experts: 3,
            n_layers: 2,
            vocab: 4,
        }
    }

    #[test]
    fn round_trip_preserves_model() {
        let model = ToyLm::init(dims(), 77).unwrap();
        let json = model_to_json(&model);
        let restored = model_from_json(&json).unwrap();
        assert_eq!(model, restored);
        assert_eq!(json, model_to_json(&restored));
    }

    #[test]
    fn rejects_wrong_version() {
        let model = ToyLm::init(dims(), 1).unwrap();
        let json = model_to_json(&model).replace("\"format_version\":1", "\"format_version\":9");
        assert!(model_from_json(&json).is_err());
    }

    #[test]
    fn rejects_missing_tensor() {
        let model = ToyLm::init(dims(), 1).unwrap();
        let json = model_to_json(&model).replace("layer0.router", "layer0.gate");
        assert!(model_from_json(&json).is_err());
    }
}
