//! Experiment configuration, self-training augmentation and the synthetic
//! replication run (baseline vs. augmentation vs. adversarial pairing).

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::synth::{generate_synthetic, SynthSizes, SyntheticCorpus, SyntheticGrammar};
use crate::corpus::{LabeledExample, Origin, Utterance};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::pairing::PairingConfig;
use crate::paraphraser::{normalize, rule_paraphrase, AutoencoderConfig, ParaphraseSet, Source};
use crate::report::{make_report, EvalReport, TestSet, Variant};
use crate::seed;
use crate::tagger::{self_train_tag, train, TaggerConfig, TaggerModel, TrainInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Files { train: PathBuf, dev: PathBuf, test: PathBuf },
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grammar: Option<PathBuf>,
        sizes: SynthSizes,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Paraphrase sources used for augmentation and adversarial pairing.
    pub sources: Vec<Source>,
    /// Adapter command line for back-translation sources.
    pub adapter_command: Option<String>,
    pub seq2seq: Option<AutoencoderConfig>,
    /// Beams kept per original and source.
    pub k: usize,
    /// Loss weight of augmented examples.
    pub weight: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sources: Vec::new(),
            adapter_command: None,
            seq2seq: None,
            k: 5,
            weight: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSetSpec {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    #[serde(default)]
    pub tagger: TaggerConfig,
    /// `None` trains without pairing terms.
    #[serde(default)]
    pub pairing: Option<PairingConfig>,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub eval_sets: Vec<EvalSetSpec>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

pub const FROZEN_CONFIG: &str = "config.resolved.json";

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Validation {
            field: what.into(),
            message: format!("{} does not exist", path.display()),
        })
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSpec::Files { train, dev, test } => {
                require(train, "data.train")?;
                require(dev, "data.dev")?;
                require(test, "data.test")?;
            }
            DataSpec::Synthetic { grammar, sizes } => {
                if let Some(g) = grammar {
                    require(g, "data.grammar")?;
                }
                if sizes.train == 0 || sizes.test == 0 {
                    return Err(Error::Validation {
                        field: "data.sizes".into(),
                        message: "train and test sizes must be positive".into(),
                    });
                }
            }
        }
        for s in &self.eval_sets {
            require(&s.path, &format!("eval_sets.{}", s.name))?;
        }
        self.tagger.validate()?;
        if let Some(p) = &self.pairing {
            p.validate()?;
        }
        if let Some(a) = &self.augment.seq2seq {
            a.validate()?;
        }
        if self.augment.k == 0 {
            return Err(Error::Validation {
                field: "augment.k".into(),
                message: "k must be positive".into(),
            });
        }
        if !(self.augment.weight > 0.0) {
            return Err(Error::Validation {
                field: "augment.weight".into(),
                message: "weight must be positive".into(),
            });
        }
        Ok(())
    }

    /// Copy with every component seed derived from the top-level seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.tagger.seed = seed::derive(self.seed, &[1]);
        if let Some(p) = &mut c.pairing {
            p.seed = seed::derive(self.seed, &[2]);
        }
        if let Some(a) = &mut c.augment.seq2seq {
            a.seed = seed::derive(self.seed, &[3]);
        }
        c
    }

    /// Writes the resolved config into `dir`.
    pub fn freeze(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.as_ref())?;
        let path = dir.as_ref().join(FROZEN_CONFIG);
        std::fs::write(&path, serde_json::to_string_pretty(&self.resolved())? + "\n")?;
        Ok(path)
    }
}

/// Self-tagged paraphrases, flat and grouped by original.
#[derive(Clone, Debug, Default)]
pub struct Augmentation {
    pub examples: Vec<LabeledExample>,
    /// `per_original[i]` holds the paraphrases of `originals[i]`.
    pub per_original: Vec<Vec<LabeledExample>>,
}

/// Lowercased token-normalised texts of a dataset.
pub fn text_index(examples: &[LabeledExample]) -> HashSet<String> {
    examples.iter().map(|e| normalize(&e.utterance.text)).collect()
}

/// Removes paraphrases found in `reference`, labels the rest by
/// self-training (gold intent of the original, slots from `model`) and
/// gives them `weight`. Sets for unknown originals are skipped.
pub fn self_train_augment(
    model: &TaggerModel,
    originals: &[LabeledExample],
    sets: &[ParaphraseSet],
    reference: &HashSet<String>,
    weight: f32,
    exec: Execution,
) -> Result<Augmentation> {
    let by_id: HashMap<&str, usize> = originals.iter().enumerate().map(|(i, e)| (e.utterance.id.as_str(), i)).collect();
    let mut jobs: Vec<(usize, Utterance)> = Vec::new();
    for set in sets {
        let Some(&i) = by_id.get(set.original_id.as_str()) else {
            log::warn!("paraphrases of unknown original `{}` skipped", set.original_id);
            continue;
        };
        let mut set = set.clone();
        set.dedupe_against(reference);
        for (b, beam) in set.beams.iter().enumerate() {
            if let Ok(u) = Utterance::new(format!("{}~{}~{b}", set.original_id, set.source), beam.text.clone()) {
                jobs.push((i, u));
            }
        }
    }
    let labeled = exec.map(&jobs, |(i, u)| -> Result<LabeledExample> {
        let ann = self_train_tag(model, u, &originals[*i])?;
        LabeledExample::new(u.clone(), ann, Origin::Augmented, weight)
    });
    let mut out = Augmentation {
        examples: Vec::with_capacity(jobs.len()),
        per_original: vec![Vec::new(); originals.len()],
    };
    for ((i, _), ex) in jobs.iter().zip(labeled) {
        let ex = ex?;
        out.per_original[*i].push(ex.clone());
        out.examples.push(ex);
    }
    Ok(out)
}

/// Settings of the synthetic replication run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicationConfig {
    pub sizes: SynthSizes,
    pub seed: u64,
    pub tagger: TaggerConfig,
    /// Rule paraphrases per training sentence.
    pub k: usize,
    pub aug_weight: f32,
    pub alp: PairingConfig,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        ReplicationConfig {
            sizes: SynthSizes {
                train: 2000,
                dev: 200,
                test: 500,
            },
            seed: 0,
            tagger: TaggerConfig {
                hidden_size: 32,
                num_layers: 1,
                embedding_dim: 32,
                epochs: 8,
                ..TaggerConfig::default()
            },
            k: 3,
            aug_weight: 0.1,
            alp: PairingConfig {
                lambda_sf: 0.0,
                lambda_a: 0.1,
                ..PairingConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Replication {
    pub corpus: SyntheticCorpus,
    pub report: EvalReport,
    pub augmented: usize,
    pub seconds: f64,
}

pub const BASELINE: &str = "baseline";
pub const AUGMENTATION: &str = "augmentation";
pub const ALP: &str = "alp";

/// Trains the baseline, an augmented model and an adversarially paired model
/// on the builtin synthetic grammar with rule paraphrases standing in for
/// back-translation, and scores all three on the clean test split and the
/// held-out perturbation set.
pub fn run_replication(cfg: &ReplicationConfig, exec: Execution) -> Result<Replication> {
    run_replication_with(&SyntheticGrammar::builtin(), cfg, exec)
}

/// [`run_replication`] on a custom grammar.
pub fn run_replication_with(grammar: &SyntheticGrammar, cfg: &ReplicationConfig, exec: Execution) -> Result<Replication> {
    let start = Instant::now();
    let corpus = generate_synthetic(grammar, cfg.seed, cfg.sizes)?;
    let tagger = TaggerConfig {
        seed: seed::derive(cfg.seed, &[1]),
        ..cfg.tagger.clone()
    };
    let base_inputs = TrainInputs {
        dev: &corpus.dev,
        labels: Some(&corpus.label_space),
        ..TrainInputs::new(&corpus.train)
    };
    let (baseline, _) = train(base_inputs, &tagger, None, exec)?;

    let rule_seed = seed::derive(cfg.seed, &[2]);
    let sets: Vec<ParaphraseSet> = exec.map_indexed(&corpus.train, |i, e| rule_paraphrase(&e.utterance, &grammar.rules, seed::derive(rule_seed, &[i as u64]), cfg.k));
    let reference = text_index(&corpus.train);
    let aug = self_train_augment(&baseline, &corpus.train, &sets, &reference, cfg.aug_weight, exec)?;

    let (augmented, _) = train(
        TrainInputs {
            augmented: &aug.examples,
            ..base_inputs
        },
        &tagger,
        None,
        exec,
    )?;
    let alp_cfg = PairingConfig {
        seed: seed::derive(cfg.seed, &[3]),
        ..cfg.alp.clone()
    };
    let (alp, _) = train(
        TrainInputs {
            paraphrases: Some(&aug.per_original),
            ..base_inputs
        },
        &tagger,
        Some(&alp_cfg),
        exec,
    )?;

    let variants = [(BASELINE, &baseline), (AUGMENTATION, &augmented), (ALP, &alp)].map(|(name, m)| Variant {
        name: name.to_string(),
        models: vec![m],
    });
    let mut report = make_report(
        &variants,
        TestSet {
            name: "clean",
            examples: &corpus.test,
        },
        &[TestSet {
            name: "perturbed",
            examples: &corpus.perturbed,
        }],
        exec,
    )?;
    for row in &mut report.rows {
        row.meta.insert("seed".into(), cfg.seed.to_string());
        row.meta.insert("train".into(), corpus.train.len().to_string());
    }
    Ok(Replication {
        augmented: aug.examples.len(),
        corpus,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}
