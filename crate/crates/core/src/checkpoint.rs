//! Single-file checkpoints: named f32 parameter arrays in safetensors format
//! with the full configuration as TOML in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::FdrnConfig;
use crate::error::{Error, Result};
use crate::model::FdrnModel;

const CONFIG_KEY: &str = "fdrn.config";

pub fn to_bytes(model: &FdrnModel, config: &FdrnConfig) -> Result<Vec<u8>> {
    if &config.model != model.config() {
        return Err(Error::Checkpoint("configuration does not describe this model".into()));
    }
    let mut raw: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in model.params().vars() {
        let v: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        raw.push((name.clone(), var.dims().to_vec(), v.iter().flat_map(|x| x.to_le_bytes()).collect()));
    }
    let views = raw
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(CONFIG_KEY.to_string(), config.to_toml_string())]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(model: &FdrnModel, config: &FdrnConfig, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model, config)?)?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<(FdrnModel, FdrnConfig)> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let toml = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CONFIG_KEY))
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no configuration".into()))?;
    let config = FdrnConfig::from_toml_str(toml)?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32, found {:?}", view.dtype())));
        }
        let v: Vec<f32> = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        tensors.insert(name, Tensor::from_vec(v, view.shape(), device)?);
    }
    let model = FdrnModel::new(&config.model, 0, DType::F32, device)?;
    model.load_params(&tensors)?;
    Ok((model, config))
}

pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<(FdrnModel, FdrnConfig)> {
    from_bytes(&std::fs::read(path)?, device)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn round_trip_restores_parameters() {
        let config = FdrnConfig { model: ModelConfig::tiny(), ..FdrnConfig::default() };
        let model = FdrnModel::new(&config.model, 9, DType::F32, &Device::Cpu).unwrap();
        let bytes = to_bytes(&model, &config).unwrap();
        let (loaded, cfg2) = from_bytes(&bytes, &Device::Cpu).unwrap();
        assert_eq!(cfg2, config);
        for (name, var) in model.params().vars() {
            let a: Vec<f32> = var.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = loaded.params().get(name).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let config = FdrnConfig::default();
        let model = FdrnModel::new(&ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(to_bytes(&model, &config), Err(Error::Checkpoint(_))));
    }
}
