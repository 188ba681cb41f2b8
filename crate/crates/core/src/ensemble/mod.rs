//! K-fold cross-training, probability bagging, a bag-of-words boosted-tree
//! baseline and a stacking meta-model.

mod bag;
mod bow;
mod gbm;
mod stack;

pub use bag::{bag_models, bag_predict, BagSpace};
pub use bow::{bow_counts, bow_features, bow_text_features, SparseVec};
pub use gbm::{gbm_predict, gbm_train, BoostedBowModel, GbmConfig, Tree};
pub use stack::{check_leakage, stack_predict, stack_train, StackConfig, StackModel, StackRow};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedEssay;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::mix_seed;
use crate::training::{eval_loss, TrainConfig, Trainer};

/// Essay-level fold map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub num_folds: usize,
    pub seed: u64,
    pub folds: BTreeMap<String, usize>,
}

/// Shuffles essay ids with `seed`, then deals them round-robin into folds.
pub fn assign_folds<S: AsRef<str>>(essay_ids: &[S], num_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if num_folds == 0 || essay_ids.len() < num_folds {
        return Err(Error::contract(format!(
            "{} essays cannot fill {num_folds} folds",
            essay_ids.len()
        )));
    }
    let mut ids: Vec<&str> = essay_ids.iter().map(AsRef::as_ref).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("essay ids must be unique for fold assignment"));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % num_folds))
        .collect();
    Ok(FoldAssignment { num_folds, seed, folds })
}

impl FoldAssignment {
    pub fn fold_of(&self, essay_id: &str) -> Option<usize> {
        self.folds.get(essay_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// `(train, held_out)` split of `essays` for fold `f`.
    pub fn split<'e>(&self, essays: &'e [EncodedEssay], f: usize) -> Result<(Vec<&'e EncodedEssay>, Vec<&'e EncodedEssay>)> {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for e in essays {
            match self.fold_of(&e.essay_id) {
                Some(g) if g == f => held.push(e),
                Some(_) => train.push(e),
                None => {
                    return Err(Error::contract(format!("essay {} has no fold", e.essay_id)));
                }
            }
        }
        Ok((train, held))
    }
}

/// One trained fold member.
#[derive(Debug, Clone)]
pub struct FoldMember {
    pub fold: usize,
    pub seed: u64,
    pub model: ModelParams,
    /// Eval-mode token loss on the held-out fold, used as validation.
    pub validation_loss: Option<f64>,
}

/// Trains one member per fold on every other fold. Members are independent
/// and run concurrently; member `f` uses seed `mix_seed(train.seed, f)`.
pub fn fold_train(
    essays: &[EncodedEssay],
    folds: &FoldAssignment,
    model: &ModelConfig,
    train: &TrainConfig,
    exec: Exec,
) -> Result<Vec<FoldMember>> {
    let results = exec.map_range(folds.num_folds, |f| -> Result<FoldMember> {
        let (tr, held) = folds.split(essays, f)?;
        let tr: Vec<EncodedEssay> = tr.into_iter().cloned().collect();
        let held: Vec<EncodedEssay> = held.into_iter().cloned().collect();
        let seed = mix_seed(train.seed, f as u64);
        let model = ModelParams::new(
            ModelConfig {
                seed,
                ..model.clone()
            },
            f as u32,
        )?;
        let cfg = TrainConfig {
            seed,
            ..train.clone()
        };
        let mut trainer = Trainer::new(model, cfg, Exec::Sequential)?;
        trainer.fit(&tr, &mut |_| {})?;
        let validation_loss = eval_loss(&trainer.model, &held, Exec::Sequential)?;
        Ok(FoldMember {
            fold: f,
            seed,
            model: trainer.model,
            validation_loss,
        })
    });
    results.into_iter().collect()
}

/// Member checkpoints, fold map and optional second-level models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<ManifestMember>,
    pub folds: FoldAssignment,
    pub gbm: Option<PathBuf>,
    pub stack: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMember {
    pub path: PathBuf,
    pub fold: usize,
    pub seed: u64,
}

impl EnsembleManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let m: EnsembleManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if m.members.is_empty() {
            return Err(Error::contract("ensemble manifest lists no members"));
        }
        Ok(m)
    }

    /// Member paths are resolved relative to the manifest's directory.
    pub fn resolve(&self, manifest_path: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}
