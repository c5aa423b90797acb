use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExitHead, HeadConfig, HeadSet};
use crate::blob::BlobRef;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct HeadsManifest {
    format_version: u32,
    num_classes: usize,
    config: HeadConfig,
    #[serde(default)]
    classifier_mu: Option<f64>,
    heads: Vec<HeadEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadEntry {
    position: usize,
    layer_index: usize,
    #[serde(default)]
    mu: Option<f64>,
    weight_refs: BTreeMap<String, BlobRef>,
}

const ROLES: [&str; 3] = ["codebook", "fc_weight", "fc_bias"];

pub fn save_heads<T: Scalar>(manifest_path: &Path, set: &HeadSet<T>) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut heads = Vec::with_capacity(set.heads.len());
    for h in &set.heads {
        let mut weight_refs = BTreeMap::new();
        for (role, t) in ROLES.iter().zip([&h.codebook, &h.fc_weight, &h.fc_bias]) {
            let file = format!("head{:02}.{role}.exwt", h.position);
            weight_refs.insert(role.to_string(), BlobRef::store(dir, file, t)?);
        }
        heads.push(HeadEntry {
            position: h.position,
            layer_index: h.layer_index,
            mu: h.mu().map(Scalar::widen),
            weight_refs,
        });
    }
    let manifest = HeadsManifest {
        format_version: VERSION,
        num_classes: set.num_classes,
        config: set.config,
        classifier_mu: set.classifier_mu.map(Scalar::widen),
        heads,
    };
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(manifest_path, e))
}

pub fn load_heads<T: Scalar>(manifest_path: &Path) -> Result<HeadSet<T>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: HeadsManifest = serde_json::from_str(&text)?;
    if manifest.format_version != VERSION {
        return Err(Error::format(
            "heads manifest",
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut heads = Vec::with_capacity(manifest.heads.len());
    for entry in &manifest.heads {
        let load = |role: &str| {
            entry
                .weight_refs
                .get(role)
                .ok_or_else(|| Error::format("heads manifest", format!("head {} lacks '{role}'", entry.position)))?
                .load::<T>(dir, &format!("head {} {role}", entry.position))
        };
        let mut head = ExitHead::new(
            entry.position,
            entry.layer_index,
            load("codebook")?,
            T::narrow(manifest.config.sigma),
            load("fc_weight")?,
            load("fc_bias")?,
            manifest.config.raw_logits,
        )?;
        if let Some(mu) = entry.mu {
            head.set_mu(T::narrow(mu))?;
        }
        heads.push(head);
    }
    Ok(HeadSet {
        config: manifest.config,
        num_classes: manifest.num_classes,
        heads,
        classifier_mu: manifest.classifier_mu.map(T::narrow),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::reference_network;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_keeps_mu_and_tensors() {
        let net = reference_network();
        let mut set = HeadSet::<f32>::init(&net, HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        set.heads[2].set_mu(0.25).unwrap();
        set.classifier_mu = Some(0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heads/heads.json");
        save_heads(&path, &set).unwrap();
        let back = load_heads::<f32>(&path).unwrap();
        assert_eq!(back, set);
        back.validate(&net).unwrap();
        assert_eq!(back.l_total(), net.l_total());
        assert!(!back.is_calibrated());
    }
}
