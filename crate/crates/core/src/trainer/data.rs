//! Synthetic multiple-choice task: concept centroids on the unit sphere,
//! inputs and option texts scattered around them, and per-option cues.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::cues::{
    load_cue_table, regenerate_if_uncertain, save_cue_table, synthesize_cues, CueSet, CueTable, UncertaintyMode,
};
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Embedding, SeededRng, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionEntry {
    pub text: Embedding,
    #[serde(skip)]
    pub cues: Option<CueSet>,
}

/// One multiple-choice instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub input: Embedding,
    pub options: Vec<OptionEntry>,
    pub correct: usize,
    pub category: String,
}

impl Sample {
    pub fn cues(&self, option: usize) -> Result<&CueSet> {
        self.options
            .get(option)
            .and_then(|o| o.cues.as_ref())
            .ok_or_else(|| Error::MissingCue {
                sample_id: self.id.clone(),
                option,
            })
    }

    pub fn dim(&self) -> usize {
        self.input.dim()
    }

    fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::Consistency(format!("sample {} has fewer than 2 options", self.id)));
        }
        if self.correct >= self.options.len() {
            return Err(Error::InvalidLabel {
                label: self.correct,
                options: self.options.len(),
            });
        }
        for o in &self.options {
            if o.text.dim() != self.dim() {
                return Err(Error::Consistency(format!("sample {} mixes embedding dims", self.id)));
            }
            if let Some(c) = &o.cues {
                if c.dim() != self.dim() {
                    return Err(Error::Consistency(format!("sample {} cue dim mismatch", self.id)));
                }
            }
        }
        Ok(())
    }
}

/// Train and held-out splits drawn from the same concepts.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

fn with_norm(v: Vec<f64>, target: f64) -> Result<Embedding> {
    let n = crate::numerics::norm(&v);
    if n == 0.0 {
        return Err(Error::DegenerateVector("concept centroid"));
    }
    Vector::new(v.into_iter().map(|x| x * target / n).collect())
}

/// `base` plus isotropic noise of expected norm `noise · |base|`.
fn jitter(base: &Embedding, noise: f64, rng: &mut SeededRng) -> Result<Embedding> {
    let scale = noise * base.norm() / (base.dim() as f64).sqrt();
    let offsets = rng.normal_vec(base.dim(), scale);
    Vector::new(base.iter().zip(offsets).map(|(b, o)| b + o).collect())
}

/// Index in `0..n` different from `avoid`.
fn other_index(n: usize, avoid: usize, rng: &mut SeededRng) -> usize {
    let k = rng.index(n - 1);
    if k >= avoid {
        k + 1
    } else {
        k
    }
}

struct Generator<'a> {
    config: &'a TrainConfig,
    centroids: Vec<Embedding>,
    mode: UncertaintyMode,
}

impl Generator<'_> {
    fn cues_for(&self, concept: usize, image: &Embedding, rng: &mut SeededRng) -> Result<CueSet> {
        let data = &self.config.data;
        let per_coord =
            data.cue_noise * data.cue_prompt.noise_multiplier() * data.embedding_scale / (self.config.d as f64).sqrt();
        let draw = |rng: &mut SeededRng| {
            let negative = other_index(self.centroids.len(), concept, rng);
            synthesize_cues(
                &self.centroids[concept],
                &self.centroids[negative],
                per_coord,
                data.variant_count,
                rng,
            )
        };
        let first = draw(rng)?;
        let regenerated = regenerate_if_uncertain(
            first,
            image,
            self.config.unc_threshold,
            self.mode,
            self.config.max_regen_rounds,
            || draw(rng),
        )?;
        Ok(regenerated.cues)
    }

    fn sample(&self, id: String, correct: usize, rng: &mut SeededRng) -> Result<Sample> {
        let data = &self.config.data;
        let concepts = self.centroids.len();
        let concept = rng.index(concepts);
        let input = jitter(&self.centroids[concept], data.input_noise, rng)?;

        let mut others: Vec<usize> = (0..concepts).filter(|c| *c != concept).collect();
        rng.shuffle(&mut others);
        let mut distractors = others.into_iter();
        let option_concepts: Vec<usize> = (0..self.config.option_count)
            .map(|j| {
                if j == correct {
                    concept
                } else {
                    distractors.next().expect("option_count <= concepts")
                }
            })
            .collect();

        let options = option_concepts
            .iter()
            .map(|&c| {
                let text = jitter(&self.centroids[c], data.text_noise, rng)?;
                let cues = self.cues_for(c, &input, rng)?;
                Ok(OptionEntry { text, cues: Some(cues) })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample {
            id,
            input,
            options,
            correct,
            category: format!("concept{concept}"),
        })
    }

    fn split(&self, name: &str, size: usize, rng: &mut SeededRng) -> Result<Vec<Sample>> {
        let mut samples = (0..size)
            .map(|i| self.sample(format!("{name}-{i:05}"), i % self.config.option_count, rng))
            .collect::<Result<Vec<_>>>()?;
        rng.shuffle(&mut samples);
        Ok(samples)
    }
}

/// Deterministic train/held-out splits for `config`. Correct positions are
/// balanced by construction; categories are drawn uniformly.
pub fn generate_dataset(config: &TrainConfig, seed: u64) -> Result<SplitData> {
    config.validate()?;
    let data = &config.data;
    if config.option_count > data.concepts {
        return Err(Error::InsufficientConcepts {
            options: config.option_count,
            concepts: data.concepts,
        });
    }
    let mut rng = seeded_rng(seed);
    let centroids = (0..data.concepts)
        .map(|_| with_norm(rng.normal_vec(config.d, 1.0), data.embedding_scale))
        .collect::<Result<Vec<_>>>()?;
    let mode = if config.ablation.only_variance {
        UncertaintyMode::OnlyVariance
    } else {
        UncertaintyMode::Full
    };
    let generator = Generator {
        config,
        centroids,
        mode,
    };
    let mut train_rng = rng.fork();
    let mut heldout_rng = rng.fork();
    Ok(SplitData {
        train: generator.split("train", data.train_size, &mut train_rng)?,
        heldout: generator.split("heldout", data.heldout_size, &mut heldout_rng)?,
    })
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const TRAIN_CUES_FILE: &str = "train_cues.jsonl";
pub const HELDOUT_CUES_FILE: &str = "heldout_cues.jsonl";

/// Writes samples (without cues) as JSON lines and their cues as a cue file.
pub fn save_split(samples: &[Sample], samples_path: &Path, cues_path: &Path) -> Result<()> {
    let file = File::create(samples_path).map_err(|e| Error::io(samples_path, e))?;
    let mut out = BufWriter::new(file);
    let dim = samples.first().map(Sample::dim).unwrap_or(0);
    let mut table = CueTable::new(dim);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io(samples_path, e))?;
        for (j, o) in s.options.iter().enumerate() {
            if let Some(c) = &o.cues {
                table.insert(s.id.clone(), j, c.clone())?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(samples_path, e))?;
    save_cue_table(&table, cues_path)
}

/// Reads samples and, when `cues_path` exists, attaches their cues.
pub fn load_split(samples_path: &Path, cues_path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(samples_path).map_err(|e| Error::io(samples_path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(samples_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: samples_path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    if cues_path.exists() {
        let table = load_cue_table(cues_path)?;
        for s in &mut samples {
            for (j, o) in s.options.iter_mut().enumerate() {
                o.cues = table.get(&s.id, j).cloned();
            }
        }
    }
    for s in &samples {
        s.validate()?;
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(samples)
}

pub fn save_dataset(data: &SplitData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_split(&data.train, &dir.join(TRAIN_FILE), &dir.join(TRAIN_CUES_FILE))?;
    save_split(&data.heldout, &dir.join(HELDOUT_FILE), &dir.join(HELDOUT_CUES_FILE))
}

pub fn load_dataset(dir: &Path) -> Result<SplitData> {
    Ok(SplitData {
        train: load_split(&dir.join(TRAIN_FILE), &dir.join(TRAIN_CUES_FILE))?,
        heldout: load_split(&dir.join(HELDOUT_FILE), &dir.join(HELDOUT_CUES_FILE))?,
    })
}
