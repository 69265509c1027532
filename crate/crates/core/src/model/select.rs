use serde::{Deserialize, Serialize};

use super::{LoraAdapterSet, LoraTarget, ModelError, ModelParams, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2Full,
    Stage2Lora,
}

/// A trainable tensor, optionally restricted to a subset of its rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedTensor {
    pub name: String,
    pub rows: Option<Vec<usize>>,
}

/// The set of trainable tensors for one training stage; everything else is
/// frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub stage: Stage,
    pub tensors: Vec<SelectedTensor>,
}

impl Selection {
    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&SelectedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }

    /// Adds embedding rows (used when stage 2 keeps training placeholders).
    pub fn with_rows(mut self, name: &str, rows: &[usize]) -> Self {
        self.tensors.push(SelectedTensor {
            name: name.to_string(),
            rows: Some(rows.to_vec()),
        });
        self
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self, params: &ModelParams, adapters: Option<&LoraAdapterSet>) -> Result<usize> {
        let mut total = 0;
        for t in &self.tensors {
            let tensor = match params.get(&t.name) {
                Ok(x) => x,
                Err(_) => adapters
                    .and_then(|a| a.named().into_iter().find(|(n, _)| *n == t.name).map(|(_, x)| x))
                    .ok_or_else(|| ModelError::UnknownParam(t.name.clone()))?,
            };
            total += match &t.rows {
                Some(r) => r.len() * tensor.cols(),
                None => tensor.len(),
            };
        }
        Ok(total)
    }
}

/// Picks the trainable tensors for `stage`. `placeholder_rows` are the
/// embedding rows of `[V]` and every per-image token.
pub fn select_trainable(
    params: &ModelParams,
    adapters: Option<&LoraAdapterSet>,
    stage: Stage,
    placeholder_rows: &[usize],
) -> Result<Selection> {
    let whole = |name: String| SelectedTensor { name, rows: None };
    let tensors = match stage {
        Stage::Pretrain => params.named().into_iter().map(|(n, _)| whole(n)).collect(),
        Stage::Stage1 => {
            if placeholder_rows.is_empty() {
                return Err(ModelError::Config("stage 1 needs registered placeholders".into()));
            }
            let vocab = params.config.vocab_size;
            if let Some(&bad) = placeholder_rows.iter().find(|&&r| r >= vocab) {
                return Err(ModelError::BadToken {
                    id: bad as u32,
                    size: vocab,
                });
            }
            vec![SelectedTensor {
                name: "tok_emb".into(),
                rows: Some(placeholder_rows.to_vec()),
            }]
        }
        Stage::Stage2Full => (0..params.layers.len())
            .flat_map(|l| LoraTarget::ALL.map(|t| whole(t.weight_name(l))))
            .collect(),
        Stage::Stage2Lora => {
            let set = adapters.ok_or(ModelError::MissingAdapters)?;
            set.named().into_iter().map(|(n, _)| whole(n)).collect()
        }
    };
    Ok(Selection { stage, tensors })
}
