use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::StructuredClassifier;
use crate::error::{Error, Result};
use crate::hierarchy::HierarchySpec;
use crate::model::{Backbone, CfsgModel, DenseLayer, Gtl, PartitionSpec};
use crate::numkernel::Tensor;
use crate::subcentroid::SubCentroidBank;

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Everything needed to reproduce evaluation outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CfsgModel,
    pub hierarchy: HierarchySpec,
    pub bank: Option<SubCentroidBank>,
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheckpoint {
    schema: u32,
    partition: PartitionSpec,
    hierarchy: HierarchySpec,
    tensors: BTreeMap<String, RawTensor>,
    bank: Option<SubCentroidBank>,
    step: u64,
    seed: u64,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

struct TensorPool(BTreeMap<String, RawTensor>);

impl TensorPool {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        match self.0.remove(name) {
            Some(t) => Tensor::new(t.shape, t.data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}"))),
            None => corrupt(format!("missing tensor {name}")),
        }
    }

    fn take_opt(&mut self, name: &str) -> Result<Option<Tensor>> {
        if self.0.contains_key(name) {
            self.take(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn backbone(&mut self, name: &str, raw_channels: usize) -> Result<Option<Backbone>> {
        let mut layers = Vec::new();
        while let Some(weight) = self.take_opt(&format!("backbone.{name}.{}.weight", layers.len()))? {
            let bias = self.take(&format!("backbone.{name}.{}.bias", layers.len()))?;
            layers.push(DenseLayer { weight, bias });
        }
        if layers.is_empty() {
            return Ok(None);
        }
        let out = layers.last().map_or(0, |l| l.weight.cols());
        if raw_channels == 0 || out % raw_channels != 0 {
            return corrupt(format!("{name} extractor output {out} is not a multiple of {raw_channels} channels"));
        }
        Ok(Some(Backbone {
            layers,
            spatial_len: out / raw_channels,
        }))
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .model
            .tensors()
            .into_iter()
            .map(|(name, t, _)| {
                t.ensure_finite(&name)?;
                Ok((
                    name,
                    RawTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                ))
            })
            .collect::<Result<_>>()?;
        let raw = RawCheckpoint {
            schema: CHECKPOINT_SCHEMA,
            partition: self.model.partition,
            hierarchy: self.hierarchy.clone(),
            tensors,
            bank: self.bank.clone(),
            step: self.step,
            seed: self.seed,
        };
        Ok(serde_json::to_string(&raw)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not a JSON document: {e}")))?;
        match value.get("schema").and_then(|s| s.as_u64()) {
            Some(s) if s == u64::from(CHECKPOINT_SCHEMA) => {}
            Some(s) => return corrupt(format!("schema: version {s} is not supported (expected {CHECKPOINT_SCHEMA})")),
            None => return corrupt("schema: field missing"),
        }
        let raw: RawCheckpoint = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let levels = raw.hierarchy.levels();
        let mut pool = TensorPool(raw.tensors);

        let mut gtls = Vec::with_capacity(levels);
        for g in 0..levels {
            gtls.push(Gtl {
                weight: pool.take(&format!("gtl.{g}.weight"))?,
                gamma: pool.take(&format!("gtl.{g}.gamma"))?,
                beta: pool.take(&format!("gtl.{g}.beta"))?,
                running_mean: pool.take(&format!("gtl.{g}.running_mean"))?,
                running_var: pool.take(&format!("gtl.{g}.running_var"))?,
            });
        }
        let raw_channels = gtls[0].weight.shape().first().copied().unwrap_or(0);
        let fine_backbone = pool
            .backbone("fine", raw_channels)?
            .ok_or_else(|| Error::Checkpoint("missing tensor backbone.fine.0.weight".into()))?;
        let coarse_backbone = pool.backbone("coarse", raw_channels)?;
        let mut classifiers = Vec::with_capacity(levels);
        for g in 0..levels {
            let w = pool.take(&format!("classifier.{g}.weight"))?;
            let b = pool.take(&format!("classifier.{g}.bias"))?;
            classifiers.push(
                StructuredClassifier::new(w, b, raw.partition)
                    .map_err(|e| Error::Checkpoint(format!("classifier.{g}: {e}")))?,
            );
        }
        let lambda_log = pool.take_opt("lambda.log")?;
        if let Some(name) = pool.0.keys().next() {
            return corrupt(format!("unexpected tensor {name}"));
        }
        let model = CfsgModel {
            partition: raw.partition,
            fine_backbone,
            coarse_backbone,
            gtls,
            classifiers,
            lambda_log,
        };
        model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if model.class_counts() != raw.hierarchy.class_counts() {
            return corrupt(format!(
                "classifier class counts {:?} disagree with hierarchy {:?}",
                model.class_counts(),
                raw.hierarchy.class_counts()
            ));
        }
        if let Some(bank) = &raw.bank {
            let counts: Vec<usize> = bank.levels.iter().map(Vec::len).collect();
            if counts != raw.hierarchy.class_counts() {
                return corrupt(format!("bank class counts {counts:?} disagree with hierarchy"));
            }
        }
        Ok(Self {
            model,
            hierarchy: raw.hierarchy,
            bank: raw.bank,
            step: raw.step,
            seed: raw.seed,
        })
    }
}

/// Writes the checkpoint through a temporary file renamed into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = ckpt.to_json()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}
