use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerKind, NetworkSpec, WeightStore};
use crate::blob::BlobRef;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_VERSION: u32 = 1;

fn default_version() -> u32 {
    MANIFEST_VERSION
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    #[serde(default = "default_version")]
    format_version: u32,
    input_shape: Vec<usize>,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exit_eligible: Option<Vec<usize>>,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    #[serde(flatten)]
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    weight_refs: BTreeMap<String, BlobRef>,
}

/// Writes `manifest_path` plus one blob per tensor next to it.
pub fn save_model<T: Scalar>(manifest_path: &Path, net: &NetworkSpec, weights: &WeightStore<T>) -> Result<()> {
    weights.validate(net)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(net.layers().len());
    for (index, layer) in net.layers().iter().enumerate() {
        let mut weight_refs = BTreeMap::new();
        for role in layer.kind.param_roles(&layer.input_shape) {
            let file = format!("layer{index:02}.{role}.exwt");
            weight_refs.insert(role.to_string(), BlobRef::store(dir, file, weights.get(index, role)?)?);
        }
        layers.push(LayerEntry {
            kind: layer.kind,
            weight_refs,
        });
    }
    let manifest = ModelManifest {
        format_version: MANIFEST_VERSION,
        input_shape: net.input_shape().to_vec(),
        num_classes: net.num_classes(),
        exit_eligible: Some(net.exit_eligible().to_vec()),
        layers,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}

/// Loads and validates a model; every blob is checked before returning.
pub fn load_model<T: Scalar>(manifest_path: &Path) -> Result<(NetworkSpec, WeightStore<T>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::format(
            "model manifest",
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let net = NetworkSpec::new(
        manifest.input_shape,
        manifest.num_classes,
        manifest.layers.iter().map(|l| l.kind).collect(),
        manifest.exit_eligible,
    )?;
    let mut weights = WeightStore::new();
    for (index, (entry, layer)) in manifest.layers.iter().zip(net.layers()).enumerate() {
        for role in layer.kind.param_roles(&layer.input_shape) {
            let blob = entry
                .weight_refs
                .get(role)
                .ok_or_else(|| Error::format("model manifest", format!("layer {index} lacks weight_ref '{role}'")))?;
            weights.insert(index, role, blob.load(dir, &format!("layer {index} {role}"))?);
        }
    }
    weights.validate(&net)?;
    Ok((net, weights))
}
