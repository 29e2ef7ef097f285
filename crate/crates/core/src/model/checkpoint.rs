use std::path::Path;

use serde_json::{Map, Value};

use super::{param_specs, ArchitectureConfig, ModelParams, Variant};
use crate::container::{self, RawContainer};
use crate::error::{Error, Result};
use crate::geomfeat::ScalerParams;
use crate::tensor::Tensor;

const KIND: &str = "fusion_model";
const SCALER_MEAN: &str = "scaler.mean";
const SCALER_STD: &str = "scaler.std";

/// A trained network together with the feature scaler it was trained behind.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub scaler: ScalerParams,
}

pub fn encode_checkpoint(model: &ModelParams, scaler: &ScalerParams) -> Result<Vec<u8>> {
    model.validate()?;
    let mut meta = Map::new();
    meta.insert("kind".into(), Value::from(KIND));
    meta.insert("variant".into(), serde_json::to_value(model.variant)?);
    meta.insert("config".into(), serde_json::to_value(&model.config)?);
    meta.insert("scaler_flagged".into(), serde_json::to_value(&scaler.flagged)?);
    let mean = Tensor::vector(scaler.mean.clone());
    let std = Tensor::vector(scaler.std.clone());
    let tensors = model
        .tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .chain([(SCALER_MEAN, &mean), (SCALER_STD, &std)]);
    container::encode(meta, tensors)
}

pub fn save_checkpoint(model: &ModelParams, scaler: &ScalerParams, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, scaler)?;
    container::write_atomic(path, &bytes)
}

pub fn decode_checkpoint(bytes: Vec<u8>) -> Result<Checkpoint> {
    let raw = RawContainer::parse(bytes)?;
    match raw.meta.get("kind").and_then(Value::as_str) {
        Some(KIND) => {}
        other => {
            return Err(Error::Format(format!(
                "expected a {KIND} container, found kind {other:?}"
            )))
        }
    }
    let config: ArchitectureConfig = serde_json::from_value(
        raw.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint has no config".into()))?,
    )
    .map_err(|e| Error::Format(format!("bad config: {e}")))?;
    let variant: Variant = serde_json::from_value(
        raw.meta
            .get("variant")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint has no variant".into()))?,
    )
    .map_err(|e| Error::Format(format!("bad variant: {e}")))?;
    let flagged: Vec<usize> = match raw.meta.get("scaler_flagged") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("bad scaler flags: {e}")))?,
        None => Vec::new(),
    };

    // Declared shapes are checked against the config before any payload is decoded.
    let specs = param_specs(&config, variant)?;
    let width = config.features;
    let mut expected: Vec<(String, Vec<usize>)> = specs.into_iter().map(|s| (s.name, s.shape)).collect();
    expected.push((SCALER_MEAN.into(), vec![width]));
    expected.push((SCALER_STD.into(), vec![width]));
    if raw.entries.len() != expected.len() {
        return Err(Error::Validation(format!(
            "{variant} checkpoint should hold {} tensors, header lists {}",
            expected.len(),
            raw.entries.len()
        )));
    }
    for (entry, (name, shape)) in raw.entries.iter().zip(&expected) {
        if &entry.name != name {
            return Err(Error::Validation(format!(
                "expected layer {name}, header lists {}",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(Error::Validation(format!(
                "layer {name} declared as {:?}, config implies {shape:?}",
                entry.shape
            )));
        }
    }

    let (_, mut tensors) = raw.into_tensors()?;
    let std = tensors.shift_remove(SCALER_STD).unwrap().into_data();
    let mean = tensors.shift_remove(SCALER_MEAN).unwrap().into_data();
    let model = ModelParams {
        config,
        variant,
        tensors,
    };
    model.validate()?;
    Ok(Checkpoint {
        model,
        scaler: ScalerParams { mean, std, flagged },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_variant;

    fn scaler() -> ScalerParams {
        ScalerParams {
            mean: (0..29).map(|i| i as f64 * 0.1).collect(),
            std: (0..29).map(|i| 1.0 + i as f64).collect(),
            flagged: vec![3],
        }
    }

    #[test]
    fn roundtrip_every_variant() {
        let cfg = ArchitectureConfig::default().with_image_size(32);
        for v in Variant::ALL {
            let model = build_variant(v, &cfg, 42).unwrap();
            let bytes = encode_checkpoint(&model, &scaler()).unwrap();
            let back = decode_checkpoint(bytes).unwrap();
            assert_eq!(back.model, model);
            assert_eq!(back.scaler, scaler());
            for (a, b) in model.tensors.values().zip(back.model.tensors.values()) {
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let cfg = ArchitectureConfig::default().with_image_size(32);
        let model = build_variant(Variant::FeaturesOnly, &cfg, 1).unwrap();
        let bytes = encode_checkpoint(&model, &scaler()).unwrap();
        let cut = bytes[..bytes.len() - 13].to_vec();
        assert!(matches!(decode_checkpoint(cut), Err(Error::Format(_))));
    }

    #[test]
    fn tampered_shape_names_the_layer() {
        let cfg = ArchitectureConfig::default().with_image_size(32);
        let model = build_variant(Variant::Full, &cfg, 1).unwrap();
        let bytes = encode_checkpoint(&model, &scaler()).unwrap();
        let meta_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[12..12 + meta_len]).unwrap();
        let tampered = text.replace(
            r#"{"name":"cnn_dense1.weight","shape":[80,1024]}"#,
            r#"{"name":"cnn_dense1.weight","shape":[1024,80]}"#,
        );
        assert_ne!(tampered, text);
        let mut out = bytes[..4].to_vec();
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[12 + meta_len..]);
        let err = decode_checkpoint(out).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("cnn_dense1.weight"), "{err}");
    }
}
