//! Parameter archives: flat named-array JSON for a single parameter group,
//! and a composed model archive that unions per-component sub-archives under
//! a manifest recording the composition topology.
//!
//! The payload is textual JSON. `f64` values survive the round trip exactly —
//! the serializer emits the shortest decimal that parses back to the same
//! bits — so a reloaded model reproduces its predictions bit for bit.
//! Non-finite values are rejected at archive time (JSON cannot carry them,
//! and a trained model should never contain them).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

// ── Flat named-array archive ────────────────────────────────────────────────

/// One named parameter tensor: shape plus row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// An ordered, flat collection of named arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamArchive {
    pub arrays: Vec<NamedArray>,
}

fn check_array(name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != values.len() {
        return Err(Error::Archive(format!(
            "array `{name}` declares shape {shape:?} ({numel} values) but holds {}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Archive(format!(
            "array `{name}` contains the non-finite value {v}"
        )));
    }
    Ok(())
}

impl ParamArchive {
    /// Snapshots named parameter tensors. Duplicate names and non-finite
    /// values are rejected.
    pub fn from_params(params: &[(String, Tensor)]) -> Result<ParamArchive> {
        let mut arrays = Vec::with_capacity(params.len());
        for (name, t) in params {
            let (shape, values) = (t.shape(), t.to_vec());
            check_array(name, &shape, &values)?;
            if arrays.iter().any(|a: &NamedArray| &a.name == name) {
                return Err(Error::Archive(format!("duplicate array name `{name}`")));
            }
            arrays.push(NamedArray {
                name: name.clone(),
                shape,
                values,
            });
        }
        Ok(ParamArchive { arrays })
    }

    /// Writes the archived values back into matching tensors. Every tensor
    /// must find an array of the same name and shape, and every array must be
    /// consumed — a partial load would leave a silently mixed model.
    pub fn load_into(&self, params: &[(String, Tensor)]) -> Result<()> {
        if self.arrays.len() != params.len() {
            return Err(Error::Archive(format!(
                "archive holds {} arrays but the model has {} parameter tensors",
                self.arrays.len(),
                params.len()
            )));
        }
        for (name, t) in params {
            let found = self
                .arrays
                .iter()
                .find(|a| &a.name == name)
                .ok_or_else(|| Error::Archive(format!("archive has no array named `{name}`")))?;
            if found.shape != t.shape() {
                return Err(Error::Archive(format!(
                    "array `{name}` has shape {:?} but the model tensor expects {:?}",
                    found.shape,
                    t.shape()
                )));
            }
            t.set_values(&found.values);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        for a in &self.arrays {
            check_array(&a.name, &a.shape, &a.values)?;
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<ParamArchive> {
        let archive: ParamArchive = serde_json::from_str(text)?;
        for a in &archive.arrays {
            check_array(&a.name, &a.shape, &a.values)?;
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamArchive> {
        ParamArchive::from_json(&fs::read_to_string(path)?)
    }
}

// ── Composed model archive ──────────────────────────────────────────────────

/// How the components of an archived model fit together. The component list
/// is ordered the way the forward pass composes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    /// "multi-fidelity" or "single-fidelity".
    pub kind: String,
    /// Network family of the trained blocks ("mlp", "siren", "kan").
    pub family: String,
    /// Complexity tier (1–3).
    pub tier: usize,
    /// Encoder mode ("none", "linear", "nonlinear") or "sf" for baselines.
    pub encoding: String,
    /// Seed the model was initialized from.
    pub seed: u64,
    /// Sub-archive names in composition order, e.g. ["lf0", "enc0", "lin", "nl"].
    pub components: Vec<String>,
}

/// Union of per-component sub-archives plus the topology manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub manifest: ModelManifest,
    /// Sub-archives keyed by component name, same order as the manifest.
    pub sub_archives: Vec<(String, ParamArchive)>,
}

fn split_component(name: &str) -> Result<(&str, &str)> {
    name.split_once('.').ok_or_else(|| {
        Error::Archive(format!(
            "parameter name `{name}` has no `component.rest` structure"
        ))
    })
}

impl ModelArchive {
    /// Groups flat `component.rest`-named parameters into sub-archives. The
    /// manifest's component list is derived from the names in first-seen
    /// order, so it reflects the model's own parameter ordering.
    pub fn from_params(
        kind: &str,
        family: &str,
        tier: usize,
        encoding: &str,
        seed: u64,
        params: &[(String, Tensor)],
    ) -> Result<ModelArchive> {
        let mut sub: Vec<(String, Vec<(String, Tensor)>)> = Vec::new();
        for (name, t) in params {
            let (component, rest) = split_component(name)?;
            let entry = match sub.iter_mut().find(|(c, _)| c == component) {
                Some(e) => e,
                None => {
                    sub.push((component.to_string(), Vec::new()));
                    sub.last_mut().expect("just pushed")
                }
            };
            entry.1.push((rest.to_string(), t.clone()));
        }
        let mut sub_archives = Vec::with_capacity(sub.len());
        let mut components = Vec::with_capacity(sub.len());
        for (component, group) in &sub {
            sub_archives.push((component.clone(), ParamArchive::from_params(group)?));
            components.push(component.clone());
        }
        Ok(ModelArchive {
            manifest: ModelManifest {
                kind: kind.to_string(),
                family: family.to_string(),
                tier,
                encoding: encoding.to_string(),
                seed,
                components,
            },
            sub_archives,
        })
    }

    /// Rejoins the sub-archives into the flat `component.rest` name space.
    pub fn flat(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (component, archive) in &self.sub_archives {
            for a in &archive.arrays {
                out.push((format!("{component}.{}", a.name), a.values.clone()));
            }
        }
        out
    }

    /// Loads every archived value into a freshly built model's parameters
    /// (same flat names as `from_params` consumed).
    pub fn load_into(&self, params: &[(String, Tensor)]) -> Result<()> {
        let total: usize = self.sub_archives.iter().map(|(_, a)| a.arrays.len()).sum();
        if total != params.len() {
            return Err(Error::Archive(format!(
                "archive holds {total} arrays but the model has {} parameter tensors",
                params.len()
            )));
        }
        for (name, t) in params {
            let (component, rest) = split_component(name)?;
            let archive = self
                .sub_archives
                .iter()
                .find(|(c, _)| c == component)
                .map(|(_, a)| a)
                .ok_or_else(|| {
                    Error::Archive(format!("archive has no component `{component}`"))
                })?;
            let found = archive
                .arrays
                .iter()
                .find(|a| a.name == rest)
                .ok_or_else(|| {
                    Error::Archive(format!("component `{component}` has no array `{rest}`"))
                })?;
            if found.shape != t.shape() {
                return Err(Error::Archive(format!(
                    "array `{name}` has shape {:?} but the model tensor expects {:?}",
                    found.shape,
                    t.shape()
                )));
            }
            t.set_values(&found.values);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<ModelArchive> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelArchive> {
        ModelArchive::from_json(&fs::read_to_string(path)?)
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::make_problem;
    use crate::encoding::EncoderMode;
    use crate::mfmodel::{build_mf_model, MfModelSpec, Tier};
    use crate::network::NetworkKind;
    use crate::sampling::{build_datasets, fit_normalizers, DesignSpec};

    fn awkward_values() -> Vec<f64> {
        vec![
            0.1,
            -0.0,
            1e-300,
            1e300,
            std::f64::consts::PI,
            f64::MIN_POSITIVE, // smallest normal
            5e-324,            // smallest subnormal
            -2.225_073_858_507_201e-308,
        ]
    }

    #[test]
    fn json_round_trip_is_bit_exact_for_awkward_doubles() {
        let t = Tensor::matrix(2, 4, awkward_values()).unwrap();
        let params = vec![("w".to_string(), t)];
        let archive = ParamArchive::from_params(&params).unwrap();
        let text = archive.to_json().unwrap();
        let back = ParamArchive::from_json(&text).unwrap();
        assert_eq!(archive, back);
        let bits: Vec<u64> = back.arrays[0].values.iter().map(|v| v.to_bits()).collect();
        let expect: Vec<u64> = awkward_values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, expect, "values drifted through JSON");
        // Serialization itself is deterministic.
        assert_eq!(text, back.to_json().unwrap());
    }

    #[test]
    fn file_round_trip_restores_a_zeroed_clone() {
        let problem = make_problem("k1").unwrap();
        let design = DesignSpec::for_problem(&problem, 8, 3, 0);
        let data = build_datasets(&problem, &design).unwrap();
        let norms = fit_normalizers(&data);
        let spec = MfModelSpec {
            family: NetworkKind::Siren,
            tier: Tier::Two,
            encoder_mode: EncoderMode::Linear,
            seed: 42,
        };
        let model = build_mf_model(&problem, &norms, &spec).unwrap();
        let params = model.trainable_parameters().all();
        let saved: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.to_vec()).collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let archive = ModelArchive::from_params("multi-fidelity", "siren", 2, "linear", 42, &params)
            .unwrap();
        archive.save(&path).unwrap();

        for (_, t) in &params {
            t.set_values(&vec![0.0; t.numel()]);
        }
        let loaded = ModelArchive::load(&path).unwrap();
        loaded.load_into(&params).unwrap();
        for ((_, t), orig) in params.iter().zip(&saved) {
            assert_eq!(&t.to_vec(), orig);
        }
        assert_eq!(loaded.manifest.components, vec!["enc0", "lin", "nl"]);
        assert_eq!(loaded.manifest.encoding, "linear");
    }

    #[test]
    fn mismatches_are_rejected_with_archive_errors() {
        let t = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let params = vec![("a.w".to_string(), t.clone())];
        let archive = ParamArchive::from_params(&[("w".to_string(), t.clone())]).unwrap();

        // Wrong name.
        let other = vec![("v".to_string(), t.clone())];
        let err = archive.load_into(&other).unwrap_err();
        assert!(matches!(err, Error::Archive(_)), "got {err}");

        // Wrong shape.
        let wide = vec![("w".to_string(), Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap())];
        let err = archive.load_into(&wide).unwrap_err();
        assert!(err.to_string().contains("shape"), "got {err}");

        // Wrong cardinality.
        let err = archive.load_into(&[]).unwrap_err();
        assert!(err.to_string().contains("1 arrays"), "got {err}");

        // Name without a component prefix cannot enter a model archive.
        let err =
            ModelArchive::from_params("single-fidelity", "mlp", 1, "sf", 0, &[("w".into(), t)])
                .unwrap_err();
        assert!(err.to_string().contains("component"), "got {err}");

        // Model archive missing a component.
        let model = ModelArchive::from_params("single-fidelity", "mlp", 1, "sf", 0, &params)
            .unwrap();
        let foreign = vec![("b.w".to_string(), Tensor::matrix(1, 2, vec![0.0; 2]).unwrap())];
        let err = model.load_into(&foreign).unwrap_err();
        assert!(err.to_string().contains("no component"), "got {err}");
    }

    #[test]
    fn non_finite_and_duplicate_arrays_are_rejected() {
        let bad = Tensor::vector(vec![1.0, f64::NAN]);
        let err = ParamArchive::from_params(&[("w".into(), bad)]).unwrap_err();
        assert!(matches!(err, Error::Archive(_)), "got {err}");

        let t = Tensor::vector(vec![1.0]);
        let err = ParamArchive::from_params(&[("w".into(), t.clone()), ("w".into(), t)])
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "got {err}");
    }

    #[test]
    fn flat_names_rejoin_component_and_array() {
        let problem = make_problem("k4u").unwrap();
        let design = DesignSpec::for_problem(&problem, 8, 3, 0);
        let data = build_datasets(&problem, &design).unwrap();
        let norms = fit_normalizers(&data);
        let spec = MfModelSpec {
            family: NetworkKind::Mlp,
            tier: Tier::Three,
            encoder_mode: EncoderMode::Nonlinear,
            seed: 7,
        };
        let model = build_mf_model(&problem, &norms, &spec).unwrap();
        let params = model.trainable_parameters().all();
        let archive =
            ModelArchive::from_params("multi-fidelity", "mlp", 3, "nonlinear", 7, &params).unwrap();
        let flat = archive.flat();
        assert_eq!(flat.len(), params.len());
        for ((name, values), (orig_name, t)) in flat.iter().zip(&params) {
            assert_eq!(name, orig_name);
            assert_eq!(values, &t.to_vec());
        }
        // Learned LF sources and encoders appear as their own components.
        assert!(archive.manifest.components.iter().any(|c| c.starts_with("lf")));
        assert!(archive.manifest.components.iter().any(|c| c.starts_with("enc")));
    }
}
