//! Artifact persistence: a small versioned binary container (JSON header +
//! raw little-endian sections) shared by model checkpoints, detector banks
//! and adversarial batches, plus sha256 fingerprints and the per-run
//! manifest. Writes are atomic (temp file + rename) and byte-deterministic
//! so identical runs produce identical hashes.

use crate::error::{Error, Result};
use crate::logit_probe::{AugmentTrainMeta, AugmentationBank};
use crate::model::{ArchDef, ClassifierNet, ClassifierState, TrainConfig, TrainMetrics};
use crate::nn::Mlp;
use crate::recovery::{RecoveryBank, RecoveryTrainMeta};
use crate::rng::SeedStream;
use crate::scalar::Real;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"LSCT1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionInfo {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    len_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    schema_version: u32,
    meta: serde_json::Value,
    sections: Vec<SectionInfo>,
}

/// Binary container: typed metadata plus named raw tensors.
#[derive(Debug)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    sections: Vec<(SectionInfo, Vec<u8>)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            meta: serde_json::Value::Null,
            sections: Vec::new(),
        }
    }

    pub fn set_meta<T: Serialize>(&mut self, meta: &T) -> Result<()> {
        self.meta = serde_json::to_value(meta)?;
        Ok(())
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn push_section<F: Real>(&mut self, name: &str, shape: &[usize], data: &[F]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut bytes = Vec::new();
        F::write_le(data, &mut bytes);
        self.sections.push((
            SectionInfo {
                name: name.to_string(),
                dtype: F::DTYPE.to_string(),
                shape: shape.to_vec(),
                len_bytes: bytes.len(),
            },
            bytes,
        ));
    }

    pub fn push_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.sections.push((
            SectionInfo {
                name: name.to_string(),
                dtype: "u8".into(),
                shape: vec![bytes.len()],
                len_bytes: bytes.len(),
            },
            bytes,
        ));
    }

    pub fn section_names(&self) -> Vec<&str> {
        self.sections.iter().map(|(i, _)| i.name.as_str()).collect()
    }

    fn find(&self, name: &str) -> Result<&(SectionInfo, Vec<u8>)> {
        self.sections
            .iter()
            .find(|(i, _)| i.name == name)
            .ok_or_else(|| Error::Validation(format!("container missing section {name}")))
    }

    pub fn section<F: Real>(&self, name: &str) -> Result<Vec<F>> {
        let (info, bytes) = self.find(name)?;
        if info.dtype != F::DTYPE {
            return Err(Error::Validation(format!(
                "section {name} has dtype {}, expected {}",
                info.dtype,
                F::DTYPE
            )));
        }
        F::read_le(bytes)
    }

    pub fn section_bytes(&self, name: &str) -> Result<&[u8]> {
        Ok(&self.find(name)?.1)
    }

    pub fn section_shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.find(name)?.0.shape)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            schema_version: crate::SCHEMA_VERSION,
            meta: self.meta.clone(),
            sections: self.sections.iter().map(|(i, _)| i.clone()).collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(
            MAGIC.len() + 4 + header_json.len()
                + self.sections.iter().map(|(_, b)| b.len()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, bytes) in &self.sections {
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Validation("not a container file".into()));
        }
        let mut off = MAGIC.len();
        let hlen = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
            as usize;
        off += 4;
        if bytes.len() < off + hlen {
            return Err(Error::Validation("truncated container header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[off..off + hlen])?;
        if header.schema_version != crate::SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "container schema {} unsupported (expected {})",
                header.schema_version,
                crate::SCHEMA_VERSION
            )));
        }
        off += hlen;
        let mut sections = Vec::with_capacity(header.sections.len());
        for info in header.sections {
            if bytes.len() < off + info.len_bytes {
                return Err(Error::Validation(format!(
                    "truncated section {}",
                    info.name
                )));
            }
            let data = bytes[off..off + info.len_bytes].to_vec();
            off += info.len_bytes;
            sections.push((info, data));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            sections,
        })
    }

    /// Atomic write; returns the sha256 fingerprint of the bytes.
    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(sha256_hex(&bytes))
}

/// Serialize any value as deterministic pretty JSON, atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

// ---------------------------------------------------------------------------
// Classifier checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierMeta {
    arch: ArchDef,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    training: TrainConfig,
    metrics: TrainMetrics,
}

fn classifier_container<F: Real>(state: &ClassifierState<F>) -> Result<Container> {
    let mut c = Container::new("classifier");
    c.set_meta(&ClassifierMeta {
        arch: state.net.arch.clone(),
        input_shape: state.net.input_shape,
        num_classes: state.net.num_classes,
        training: state.training.clone(),
        metrics: state.metrics.clone(),
    })?;
    for (name, shape, data) in state.net.param_tensors() {
        c.push_section(&name, &shape, data);
    }
    Ok(c)
}

pub fn save_classifier<F: Real>(state: &ClassifierState<F>, path: &Path) -> Result<String> {
    classifier_container(state)?.write(path)
}

/// Fingerprint of the checkpoint bytes without touching disk; equals the
/// hash returned by [`save_classifier`].
pub fn classifier_fingerprint<F: Real>(state: &ClassifierState<F>) -> Result<String> {
    Ok(sha256_hex(&classifier_container(state)?.to_bytes()?))
}

pub fn load_classifier<F: Real>(path: &Path) -> Result<(ClassifierState<F>, String)> {
    let c = Container::read(path)?;
    if c.kind != "classifier" {
        return Err(Error::Validation(format!(
            "expected a classifier container, found {}",
            c.kind
        )));
    }
    let meta: ClassifierMeta = c.meta_as()?;
    let mut rng = SeedStream::new(0, "load");
    let mut net = ClassifierNet::new(&meta.arch, meta.input_shape, meta.num_classes, &mut rng)?;
    let mut tensors: BTreeMap<String, Vec<F>> = BTreeMap::new();
    for name in c.section_names() {
        tensors.insert(name.to_string(), c.section::<F>(name)?);
    }
    net.load_param_tensors(&tensors)?;
    let state = ClassifierState {
        net,
        training: meta.training,
        metrics: meta.metrics,
    };
    let fp = file_fingerprint(path)?;
    Ok((state, fp))
}

// ---------------------------------------------------------------------------
// Recovery bank
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RecoveryMeta {
    k_rt: usize,
    depth: usize,
    hidden_dim: usize,
    layer_dims: Vec<usize>,
    benign_error_scale: Vec<f64>,
    train: RecoveryTrainMeta,
    model_fingerprint: String,
}

pub fn save_recovery<F: Real>(bank: &RecoveryBank<F>, path: &Path) -> Result<String> {
    let mut c = Container::new("recovery_bank");
    c.set_meta(&RecoveryMeta {
        k_rt: bank.k_rt,
        depth: bank.depth,
        hidden_dim: bank.hidden_dim,
        layer_dims: bank.layer_dims.clone(),
        benign_error_scale: bank.benign_error_scale.clone(),
        train: bank.meta.clone(),
        model_fingerprint: bank.model_fingerprint.clone(),
    })?;
    for (k, head) in bank.heads.iter() {
        for (name, shape, data) in head.param_tensors() {
            c.push_section(&format!("head{k}.{name}"), &shape, data);
        }
    }
    c.write(path)
}

pub fn load_recovery<F: Real>(path: &Path) -> Result<RecoveryBank<F>> {
    let c = Container::read(path)?;
    if c.kind != "recovery_bank" {
        return Err(Error::Validation(format!(
            "expected a recovery bank container, found {}",
            c.kind
        )));
    }
    let meta: RecoveryMeta = c.meta_as()?;
    let l = meta.layer_dims.len();
    let d_last = *meta.layer_dims.last().ok_or_else(|| {
        Error::Validation("recovery bank with empty layer dims".into())
    })?;
    let mut heads = BTreeMap::new();
    for k in meta.k_rt..l {
        let mut rng = SeedStream::new(0, "load");
        let mut head: Mlp<F> = Mlp::new(
            d_last,
            meta.layer_dims[k - 1],
            meta.hidden_dim,
            meta.depth,
            &mut rng,
        );
        for (li, layer) in head.layers.iter_mut().enumerate() {
            let w = c.section::<F>(&format!("head{k}.l{li}.w"))?;
            let b = c.section::<F>(&format!("head{k}.l{li}.b"))?;
            if w.len() != layer.w.len() || b.len() != layer.b.len() {
                return Err(Error::Validation(format!(
                    "head {k} layer {li} has unexpected size"
                )));
            }
            layer.w.value.copy_from_slice(&w);
            layer.b.value.copy_from_slice(&b);
        }
        heads.insert(k, head);
    }
    Ok(RecoveryBank {
        heads,
        k_rt: meta.k_rt,
        depth: meta.depth,
        hidden_dim: meta.hidden_dim,
        layer_dims: meta.layer_dims,
        benign_error_scale: meta.benign_error_scale,
        meta: meta.train,
        model_fingerprint: meta.model_fingerprint,
    })
}

// ---------------------------------------------------------------------------
// Augmentation bank
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct AugmentMeta {
    g: usize,
    k_lt: usize,
    lambda: f64,
    input_dim: usize,
    train: AugmentTrainMeta,
    model_fingerprint: String,
}

pub fn save_augmentations<F: Real>(bank: &AugmentationBank<F>, path: &Path) -> Result<String> {
    let mut c = Container::new("augmentation_bank");
    c.set_meta(&AugmentMeta {
        g: bank.g,
        k_lt: bank.k_lt,
        lambda: bank.lambda,
        input_dim: bank.input_dim,
        train: bank.meta.clone(),
        model_fingerprint: bank.model_fingerprint.clone(),
    })?;
    for (gi, op) in bank.ops.iter().enumerate() {
        c.push_section(&format!("op{gi}"), &[bank.input_dim, bank.input_dim], op);
    }
    c.write(path)
}

pub fn load_augmentations<F: Real>(path: &Path) -> Result<AugmentationBank<F>> {
    let c = Container::read(path)?;
    if c.kind != "augmentation_bank" {
        return Err(Error::Validation(format!(
            "expected an augmentation bank container, found {}",
            c.kind
        )));
    }
    let meta: AugmentMeta = c.meta_as()?;
    let mut ops = Vec::with_capacity(meta.g);
    for gi in 0..meta.g {
        let op = c.section::<F>(&format!("op{gi}"))?;
        if op.len() != meta.input_dim * meta.input_dim {
            return Err(Error::Validation(format!("operator {gi} has wrong size")));
        }
        ops.push(op);
    }
    Ok(AugmentationBank {
        ops,
        input_dim: meta.input_dim,
        g: meta.g,
        k_lt: meta.k_lt,
        lambda: meta.lambda,
        meta: meta.train,
        model_fingerprint: meta.model_fingerprint,
    })
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: String,
    pub kind: String,
    pub sha256: String,
}

/// Content manifest of one run directory: every deterministic artifact with
/// its fingerprint. Volatile sidecars (timings) are excluded by design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub artifacts: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn new(config_fingerprint: &str) -> Self {
        RunManifest {
            schema_version: crate::SCHEMA_VERSION,
            config_fingerprint: config_fingerprint.to_string(),
            artifacts: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, path: &str, kind: &str, sha256: String) {
        self.artifacts.push(ManifestEntry {
            name: name.to_string(),
            path: path.to_string(),
            kind: kind.to_string(),
            sha256,
        });
    }

    /// Hash of the manifest content itself: one digest for the whole run.
    pub fn combined_hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetSource, SyntheticSpec};
    use crate::logit_probe::{init_augmentations, AugmentConfig};
    use crate::model::train_classifier;
    use crate::recovery::{train_recovery_bank, RecoveryConfig};
    use crate::tensor::Tensor;

    #[test]
    fn container_roundtrip_bitwise() {
        let mut c = Container::new("demo");
        c.set_meta(&serde_json::json!({"a": 1, "b": [1.5, 2.5]})).unwrap();
        c.push_section::<f32>("x", &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        c.push_section::<f64>("y", &[3], &[0.1, -0.2, 5e-300]);
        c.push_bytes("raw", vec![1, 2, 3]);
        let bytes = c.to_bytes().unwrap();
        let c2 = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c2.kind, "demo");
        assert_eq!(c2.section::<f32>("x").unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c2.section::<f64>("y").unwrap(), vec![0.1, -0.2, 5e-300]);
        assert_eq!(c2.section_bytes("raw").unwrap(), &[1, 2, 3]);
        assert_eq!(c2.section_shape("x").unwrap(), &[2, 2]);
        // Re-serialization is byte-identical.
        assert_eq!(c2.to_bytes().unwrap(), bytes);
        // Wrong dtype rejected.
        assert!(c2.section::<f64>("x").is_err());
    }

    #[test]
    fn corrupt_container_rejected() {
        assert!(Container::from_bytes(b"nope").is_err());
        let mut c = Container::new("demo");
        c.push_section::<f32>("x", &[1], &[1.0]);
        let mut bytes = c.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(Container::from_bytes(&bytes).is_err());
    }

    fn small_dataset() -> crate::data::LoadedDataset<f32> {
        load_dataset(&DatasetSource::Synthetic(SyntheticSpec {
            n: 120,
            classes: 2,
            h: 6,
            w: 6,
            seed: 0,
            channels: 3,
            template_amp: 0.45,
            noise_sd: 0.1,
            split: Some((80, 24, 16)),
        }))
        .unwrap()
    }

    #[test]
    fn classifier_checkpoint_roundtrip() {
        let ds = small_dataset();
        let cfg = crate::model::TrainConfig {
            architecture: "plain3".into(),
            epochs: 2,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 1,
            augment: false,
        };
        let state = train_classifier(&ds.train, Some(&ds.test), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lsct");
        let fp1 = save_classifier(&state, &path).unwrap();
        let (loaded, fp2) = load_classifier::<f32>(&path).unwrap();
        assert_eq!(fp1, fp2);
        // Forward outputs identical bit-for-bit.
        let x = ds.test.images.gather(&[0, 1, 2]);
        let a = state.forward_trace(&x).unwrap();
        let b = loaded.forward_trace(&x).unwrap();
        for (ta, tb) in a.iter().zip(b.iter()) {
            assert_eq!(ta.logits, tb.logits);
            assert_eq!(ta.z, tb.z);
        }
        // Saving again gives the same fingerprint.
        let path2 = dir.path().join("model2.lsct");
        let fp3 = save_classifier(&loaded, &path2).unwrap();
        assert_eq!(fp1, fp3);
    }

    #[test]
    fn bank_checkpoints_roundtrip() {
        let ds = small_dataset();
        let cfg = crate::model::TrainConfig {
            architecture: "plain3".into(),
            epochs: 2,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 1,
            augment: false,
        };
        let state = train_classifier(&ds.train, None, &cfg).unwrap();
        let traces = state.forward_trace(&ds.calibration.images).unwrap();
        let rcfg = RecoveryConfig {
            depth: 1,
            hidden_dim: 8,
            epochs: 2,
            ..Default::default()
        };
        let mut bank = train_recovery_bank(&traces, &rcfg).unwrap();
        bank.model_fingerprint = "mfp".into();
        let dir = tempfile::tempdir().unwrap();
        let rpath = dir.path().join("recovery.lsct");
        save_recovery(&bank, &rpath).unwrap();
        let loaded = load_recovery::<f32>(&rpath).unwrap();
        assert_eq!(loaded.model_fingerprint, "mfp");
        let t = &traces[0];
        let e1 = crate::recovery::layer_errors(t, &bank).unwrap();
        let e2 = crate::recovery::layer_errors(t, &loaded).unwrap();
        assert_eq!(e1.e, e2.e);

        let acfg = AugmentConfig {
            g: 2,
            ..Default::default()
        };
        let dim = 6 * 6 * 3;
        let mut abank = init_augmentations::<f32>(dim, &acfg).unwrap();
        abank.model_fingerprint = "mfp".into();
        let apath = dir.path().join("augment.lsct");
        save_augmentations(&abank, &apath).unwrap();
        let aloaded = load_augmentations::<f32>(&apath).unwrap();
        assert_eq!(aloaded.ops, abank.ops);
        assert_eq!(aloaded.k_lt, abank.k_lt);
    }

    #[test]
    fn json_roundtrip_and_fingerprint_stability() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.json");
        let value = serde_json::json!({"thresholds": [1.0, 2.0], "n": 7});
        let fp1 = write_json(&path, &value).unwrap();
        let fp2 = file_fingerprint(&path).unwrap();
        assert_eq!(fp1, fp2);
        let loaded: serde_json::Value = read_json(&path).unwrap();
        assert_eq!(loaded, value);
    }

    #[test]
    fn tensor_cast_is_exact_for_f32_values() {
        let t = Tensor::from_vec(&[2], vec![0.5f32, -1.25]);
        let d = t.cast::<f64>();
        assert_eq!(d.data(), &[0.5f64, -1.25]);
    }
}
