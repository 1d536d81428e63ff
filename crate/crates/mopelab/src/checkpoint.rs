//! Checkpoint container: a magic header followed by a JSON body holding
//! the model config, seed, trainable parameter values, and mapper running
//! statistics. Frozen encoder weights and routing keys are derived
//! deterministically from (config, seed), so they are not stored.

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MOPELAB1";

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl StoredTensor {
    fn from_tensor(t: &Tensor) -> Self {
        StoredTensor {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct Body {
    seed: u64,
    data_dy: usize,
    config: FusionConfig,
    params: BTreeMap<String, StoredTensor>,
    running_mean: Option<StoredTensor>,
    running_var: Option<StoredTensor>,
}

pub fn save(model: &FusionModel, path: &Path) -> Result<()> {
    let mut params = BTreeMap::new();
    for (_, p) in model.store.iter() {
        params.insert(p.name.clone(), StoredTensor::from_tensor(&p.value));
    }
    let (running_mean, running_var) = match model.mapper_running_stats() {
        Some((m, v)) => (
            Some(StoredTensor::from_tensor(m)),
            Some(StoredTensor::from_tensor(v)),
        ),
        None => (None, None),
    };
    let body = Body {
        seed: model.seed,
        data_dy: model.data_dy,
        config: model.cfg.clone(),
        params,
        running_mean,
        running_var,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    serde_json::to_writer(&mut f, &body)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FusionModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Data(format!("{}: truncated checkpoint", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad checkpoint magic {:?}",
            path.display(),
            magic
        )));
    }
    let body: Body = serde_json::from_reader(&mut f)?;
    let mut model = FusionModel::new(&body.config, body.data_dy, body.seed)?;
    let ids: Vec<(usize, String, Vec<usize>)> = model
        .store
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (id, name, shape) in ids {
        let stored = body.params.get(&name).ok_or_else(|| {
            Error::Data(format!("checkpoint missing parameter '{name}'"))
        })?;
        let t = stored.to_tensor()?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint parameter '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        model.store.set_value(id, t);
    }
    if body.params.len() != model.store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} parameters, model expects {}",
            body.params.len(),
            model.store.len()
        )));
    }
    if let (Some(m), Some(v)) = (&body.running_mean, &body.running_var) {
        model.set_mapper_running_stats(m.to_tensor()?, v.to_tensor()?)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};
    use crate::fusion::Mode;
    use crate::params::Binder;
    use crate::tensor::Tape;
    use crate::trainer::{train, TrainConfig};

    fn setup() -> (FusionModel, crate::data::Dataset) {
        let ds = generate(&SyntheticConfig {
            train_size: 16,
            val_size: 8,
            test_size: 8,
            ..Default::default()
        })
        .unwrap();
        let cfg = FusionConfig {
            mope: crate::fusion::MopeSettings {
                experts: 3,
                prompt_len: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        (FusionModel::new(&cfg, ds.config.d_y, 11).unwrap(), ds)
    }

    #[test]
    fn round_trip_preserves_eval_logits() {
        let (mut model, ds) = setup();
        // train a little so params and running stats are non-trivial
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        train(&mut model, &ds.train, &ds.val, &tc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&model, &path).unwrap();
        let mut loaded = load(&path).unwrap();
        let batch: Vec<&_> = ds.test.iter().take(4).collect();
        let logits = |m: &mut FusionModel| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&m.store);
            let out = m
                .forward_batch(&mut tape, &mut binder, &batch, Mode::Eval, None)
                .unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(logits(&mut model), logits(&mut loaded));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTMAGIC{}").unwrap();
        assert!(matches!(load(&path), Err(Error::Data(_))));
    }

    #[test]
    fn missing_param_rejected() {
        let (model, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&model, &path).unwrap();
        // corrupt: drop one parameter from the JSON body
        let bytes = std::fs::read(&path).unwrap();
        let json = String::from_utf8(bytes[8..].to_vec()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let params = v["params"].as_object_mut().unwrap();
        let key = params.keys().next().unwrap().clone();
        params.remove(&key);
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&v).unwrap());
        std::fs::write(&path, out).unwrap();
        assert!(matches!(load(&path), Err(Error::Data(_))));
    }
}
