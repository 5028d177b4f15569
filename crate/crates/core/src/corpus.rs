//! Opcode corpus handling: on-disk ingestion, vocabulary construction, class
//! filtering, stratified train/test splitting with short-sample dropping, and
//! a synthetic corpus generator with known per-family ground-truth models.
//!
//! On-disk layout is `<root>/<family>/<sample>.opseq`: UTF-8 text, one opcode
//! mnemonic per line, blank lines ignored. Mnemonics are normalized to
//! trimmed ASCII uppercase.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hmm::HmmModel;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Bidirectional mnemonic <-> id mapping. Ids are dense in `[0, M)`, assigned
/// by descending training frequency with lexicographic tie-break, so id 0 is
/// the most frequent mnemonic. Built from training data only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpcodeVocabulary {
    mnemonics: Vec<String>,
    index: HashMap<String, usize>,
}

impl OpcodeVocabulary {
    fn from_ordered(mnemonics: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(mnemonics.len());
        for (id, m) in mnemonics.iter().enumerate() {
            if index.insert(m.clone(), id).is_some() {
                return Err(Error::Encoding(format!("duplicate mnemonic {m:?}")));
            }
        }
        if mnemonics.is_empty() {
            return Err(Error::Encoding("vocabulary is empty".into()));
        }
        Ok(Self { mnemonics, index })
    }

    /// Number of distinct mnemonics (the model alphabet size M).
    pub fn size(&self) -> usize {
        self.mnemonics.len()
    }

    pub fn id_of(&self, mnemonic: &str) -> Option<usize> {
        self.index.get(mnemonic).copied()
    }

    pub fn mnemonic(&self, id: usize) -> Option<&str> {
        self.mnemonics.get(id).map(|s| s.as_str())
    }

    /// Mnemonics in id order.
    pub fn mnemonics(&self) -> &[String] {
        &self.mnemonics
    }

    /// Trimmed ASCII-uppercase form used for all lookups.
    pub fn normalize(raw: &str) -> String {
        raw.trim().to_ascii_uppercase()
    }

    /// SHA-256 over the id-ordered mnemonic list; identifies the encoding a
    /// model was trained with.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.mnemonics {
            hasher.update(m.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }
}

impl Serialize for OpcodeVocabulary {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.mnemonics.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for OpcodeVocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let mnemonics = Vec::<String>::deserialize(deserializer)?;
        OpcodeVocabulary::from_ordered(mnemonics).map_err(serde::de::Error::custom)
    }
}

/// Build a vocabulary from training sequences: ids by descending frequency,
/// ties broken lexicographically.
pub fn build_vocabulary(training: &[RawSequence]) -> Result<OpcodeVocabulary> {
    if training.is_empty() {
        return Err(Error::Argument(
            "cannot build a vocabulary from zero sequences".into(),
        ));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for seq in training {
        for m in &seq.mnemonics {
            *counts.entry(m.as_str()).or_insert(0) += 1;
        }
    }
    let mut ordered: Vec<(&str, u64)> = counts.into_iter().collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    OpcodeVocabulary::from_ordered(ordered.into_iter().map(|(m, _)| m.to_string()).collect())
}

/// Encode mnemonics to ids. Mnemonics absent from the vocabulary map to id 0
/// (the most frequent training mnemonic); the second return value counts them.
pub fn encode(vocabulary: &OpcodeVocabulary, mnemonics: &[String]) -> (Vec<usize>, usize) {
    let mut unseen = 0;
    let symbols = mnemonics
        .iter()
        .map(|m| match vocabulary.id_of(m) {
            Some(id) => id,
            None => {
                unseen += 1;
                0
            }
        })
        .collect();
    (symbols, unseen)
}

// ---------------------------------------------------------------------------
// Sequences and splits
// ---------------------------------------------------------------------------

/// A sample as loaded from disk: normalized mnemonics, not yet encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSequence {
    pub sample_id: String,
    pub family: String,
    pub mnemonics: Vec<String>,
}

/// An encoded, labeled opcode sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub sample_id: String,
    pub family: String,
    pub symbols: Vec<usize>,
    /// Mnemonics that fell back to id 0 because the training vocabulary
    /// lacked them.
    pub unseen: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSample {
    pub sample_id: String,
    pub family: String,
    pub length: usize,
    pub reason: String,
}

/// Stratified train/test split with its training-only vocabulary and the
/// samples dropped for being shorter than the truncation length.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
    pub vocabulary: OpcodeVocabulary,
    pub dropped: Vec<DroppedSample>,
}

/// Load every `<root>/<family>/<sample>.opseq` file. Families and samples are
/// visited in sorted order so corpus order is stable across platforms. Empty
/// files and empty family directories are reported in `warnings` and skipped.
pub fn load_corpus(root: &Path) -> Result<LoadedCorpus> {
    let entries = fs::read_dir(root).map_err(|e| Error::Ingestion {
        path: root.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut family_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    family_dirs.sort();

    let mut sequences = Vec::new();
    let mut warnings = Vec::new();
    for dir in family_dirs {
        let family = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::Ingestion {
                path: dir.clone(),
                message: e.to_string(),
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "opseq"))
            .collect();
        files.sort();
        if files.is_empty() {
            warnings.push(format!("family directory {} holds no .opseq files", dir.display()));
            continue;
        }
        for file in files {
            let text = fs::read_to_string(&file).map_err(|e| Error::Ingestion {
                path: file.clone(),
                message: e.to_string(),
            })?;
            let mnemonics: Vec<String> = text
                .lines()
                .map(OpcodeVocabulary::normalize)
                .filter(|m| !m.is_empty())
                .collect();
            if mnemonics.is_empty() {
                warnings.push(format!("empty sample file {}", file.display()));
                continue;
            }
            let stem = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            sequences.push(RawSequence {
                sample_id: format!("{family}/{stem}"),
                family: family.clone(),
                mnemonics,
            });
        }
    }
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no opcode sequences found under {}",
            root.display()
        )));
    }
    Ok(LoadedCorpus { sequences, warnings })
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub sequences: Vec<RawSequence>,
    pub warnings: Vec<String>,
}

/// Drop every family with fewer than `min_samples` samples.
pub fn filter_small_classes(
    sequences: Vec<RawSequence>,
    min_samples: usize,
) -> Result<Vec<RawSequence>> {
    if min_samples == 0 {
        return Err(Error::Argument("min_samples must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &sequences {
        *counts.entry(s.family.as_str()).or_insert(0) += 1;
    }
    let keep: Vec<bool> = sequences
        .iter()
        .map(|s| counts[s.family.as_str()] >= min_samples)
        .collect();
    let filtered: Vec<RawSequence> = sequences
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect();
    if filtered.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "no family has at least {min_samples} samples"
        )));
    }
    Ok(filtered)
}

/// Drop samples shorter than `l`, then split each family `(1 - test_fraction)
/// : test_fraction` with a seeded shuffle, and build the vocabulary from the
/// resulting training split only.
///
/// Dropping happens before splitting so the drop counts do not depend on the
/// seed. Families are processed in lexicographic order; within each split,
/// samples keep their input order.
pub fn split_corpus(
    sequences: &[RawSequence],
    test_fraction: f64,
    l: usize,
    seed: u64,
) -> Result<CorpusSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    let mut dropped = Vec::new();
    let mut retained: Vec<(usize, &RawSequence)> = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        if seq.mnemonics.len() < l {
            dropped.push(DroppedSample {
                sample_id: seq.sample_id.clone(),
                family: seq.family.clone(),
                length: seq.mnemonics.len(),
                reason: "short".into(),
            });
        } else {
            retained.push((i, seq));
        }
    }
    if retained.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "every sample is shorter than L = {l}"
        )));
    }

    let mut by_family: BTreeMap<&str, Vec<(usize, &RawSequence)>> = BTreeMap::new();
    for entry in &retained {
        by_family.entry(entry.1.family.as_str()).or_default().push(*entry);
    }
    // Families that lost all or all-but-one samples cannot be stratified.
    for seq in sequences {
        let left = by_family.get(seq.family.as_str()).map_or(0, |v| v.len());
        if left < 2 {
            return Err(Error::Stratification(format!(
                "family {:?} has {left} samples of length >= {l}, need at least 2",
                seq.family
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for members in by_family.values() {
        let k = members.len();
        let n_test = ((k as f64 * test_fraction).round() as usize).clamp(1, k - 1);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        for (rank, &pos) in order.iter().enumerate() {
            let global = members[pos].0;
            if rank < n_test {
                test_idx.push(global);
            } else {
                train_idx.push(global);
            }
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let train_raw: Vec<&RawSequence> = train_idx.iter().map(|&i| &sequences[i]).collect();
    let vocabulary = build_vocabulary_refs(&train_raw)?;

    let encode_all = |idx: &[usize]| -> Vec<LabeledSequence> {
        idx.iter()
            .map(|&i| {
                let seq = &sequences[i];
                let (symbols, unseen) = encode(&vocabulary, &seq.mnemonics);
                LabeledSequence {
                    sample_id: seq.sample_id.clone(),
                    family: seq.family.clone(),
                    symbols,
                    unseen,
                }
            })
            .collect()
    };
    Ok(CorpusSplit {
        train: encode_all(&train_idx),
        test: encode_all(&test_idx),
        vocabulary,
        dropped,
    })
}

fn build_vocabulary_refs(training: &[&RawSequence]) -> Result<OpcodeVocabulary> {
    let owned: Vec<RawSequence> = training.iter().map(|&s| s.clone()).collect();
    build_vocabulary(&owned)
}

/// Carve a stratified, seeded fraction of the samples into a final holdout,
/// returning `(kept, holdout)`. Used for three-way protocols where model
/// selection must not touch the set it is finally reported on. Dropping by
/// length is left to the later split of the kept part.
pub fn carve_holdout(
    sequences: &[RawSequence],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<RawSequence>, Vec<RawSequence>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!(
            "holdout fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    let mut by_family: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, seq) in sequences.iter().enumerate() {
        by_family.entry(seq.family.as_str()).or_default().push(i);
    }
    for (family, members) in &by_family {
        if members.len() < 3 {
            return Err(Error::Stratification(format!(
                "family {family:?} has {} samples, need at least 3 to carve a holdout",
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::util::derive_seed(seed, 0x484F_4C44));
    let mut holdout_idx = Vec::new();
    let mut kept_idx = Vec::new();
    for members in by_family.values() {
        let k = members.len();
        // Leave at least two kept samples so the later split can stratify.
        let n_holdout = ((k as f64 * fraction).round() as usize).clamp(1, k - 2);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        for (rank, &pos) in order.iter().enumerate() {
            if rank < n_holdout {
                holdout_idx.push(members[pos]);
            } else {
                kept_idx.push(members[pos]);
            }
        }
    }
    holdout_idx.sort_unstable();
    kept_idx.sort_unstable();
    Ok((
        kept_idx.into_iter().map(|i| sequences[i].clone()).collect(),
        holdout_idx.into_iter().map(|i| sequences[i].clone()).collect(),
    ))
}

/// Write the drop report: one row per dropped sample.
pub fn write_dropped_csv(path: &Path, dropped: &[DroppedSample]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    writer
        .write_record(["sample_id", "family", "length", "reason"])
        .and_then(|_| {
            for d in dropped {
                writer.write_record([
                    d.sample_id.as_str(),
                    d.family.as_str(),
                    &d.length.to_string(),
                    d.reason.as_str(),
                ])?;
            }
            writer.flush()?;
            Ok(())
        })
        .map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Read back a drop report written by [`write_dropped_csv`].
pub fn read_dropped_csv(path: &Path) -> Result<Vec<DroppedSample>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if record.len() != 4 {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                message: format!("expected 4 columns, got {}", record.len()),
            });
        }
        rows.push(DroppedSample {
            sample_id: record[0].to_string(),
            family: record[1].to_string(),
            length: record[2].parse().map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                message: format!("bad length column: {e}"),
            })?,
            reason: record[3].to_string(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Planted corpus generation
// ---------------------------------------------------------------------------

/// Settings for the synthetic corpus sampled from known per-family models.
///
/// `separation` in `[0, 1]` controls how far apart the family emission rows
/// are: each family's emissions are `(1 - separation) * shared + separation *
/// own-block`, where the per-family blocks partition the symbol set. The
/// total-variation distance between two families' corresponding emission rows
/// is exactly `separation`; at 1.0 the supports are disjoint, at 0.0 every
/// family shares one distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCorpusConfig {
    pub n_families: usize,
    pub n_states: usize,
    pub n_symbols: usize,
    pub samples_per_family: usize,
    pub length_range: (usize, usize),
    pub separation: f64,
    pub seed: u64,
}

impl PlantedCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_families == 0 || self.n_states == 0 || self.samples_per_family == 0 {
            return Err(Error::Config(
                "families, states, and samples per family must all be positive".into(),
            ));
        }
        if self.n_symbols < self.n_families {
            return Err(Error::Config(format!(
                "need at least one symbol per family: {} symbols < {} families",
                self.n_symbols, self.n_families
            )));
        }
        let (lo, hi) = self.length_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "invalid length range {lo}:{hi}"
            )));
        }
        if !(0.0..=1.0).contains(&self.separation) {
            return Err(Error::Config(format!(
                "separation {} outside [0, 1]",
                self.separation
            )));
        }
        Ok(())
    }
}

/// Ground truth stored beside a generated corpus as `_planted.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedGroundTruth {
    pub config: PlantedCorpusConfig,
    pub families: Vec<String>,
    pub models: Vec<HmmModel>,
}

#[derive(Debug, Clone)]
pub struct PlantedCorpusSummary {
    pub families: Vec<String>,
    pub total_samples: usize,
    pub total_symbols: usize,
    pub ground_truth_path: PathBuf,
}

/// Name of the ground-truth file written at the corpus root.
pub const GROUND_TRUTH_FILE: &str = "_planted.json";

fn dirichlet_row<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        return vec![1.0 / len as f64; len];
    }
    for p in &mut row {
        *p /= sum;
    }
    row
}

fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Construct the planted family models for a config. All families share the
/// initial distribution and transition matrix; only emissions differ, blended
/// per `separation`. Deterministic per seed.
pub fn planted_models(config: &PlantedCorpusConfig) -> Result<(Vec<String>, Vec<HmmModel>)> {
    config.validate()?;
    let n = config.n_states;
    let m = config.n_symbols;
    let k = config.n_families;
    let s = config.separation;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let initial = dirichlet_row(&mut rng, n);
    let transition: Vec<f64> = (0..n).flat_map(|_| dirichlet_row(&mut rng, n)).collect();
    let base_emission: Vec<Vec<f64>> = (0..n).map(|_| dirichlet_row(&mut rng, m)).collect();

    let mut families = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    for f in 0..k {
        families.push(format!("fam{f:02}"));
        let block = (f * m / k)..((f + 1) * m / k);
        let mut emission = vec![0.0; n * m];
        for i in 0..n {
            let own = dirichlet_row(&mut rng, block.len());
            for j in 0..m {
                emission[i * m + j] = (1.0 - s) * base_emission[i][j];
            }
            for (offset, j) in block.clone().enumerate() {
                emission[i * m + j] += s * own[offset];
            }
            // Blend weights sum to 1; absorb rounding into the row.
            let sum: f64 = emission[i * m..(i + 1) * m].iter().sum();
            for j in 0..m {
                emission[i * m + j] /= sum;
            }
        }
        models.push(HmmModel::new(
            n,
            m,
            initial.clone(),
            transition.clone(),
            emission,
        )?);
    }
    Ok((families, models))
}

/// Generate a corpus under `out_root`: one directory per family, one `.opseq`
/// file per sample, plus the ground-truth JSON. Sequences are sampled by
/// drawing an initial state from pi, then alternating an emission draw from B
/// with a transition draw from A. Byte-identical output per config.
pub fn generate_planted_corpus(
    config: &PlantedCorpusConfig,
    out_root: &Path,
) -> Result<PlantedCorpusSummary> {
    let (families, models) = planted_models(config)?;
    // The model rng consumed a config-determined number of draws; sampling
    // continues on a fresh stream so sequence draws stay aligned.
    let mut rng = ChaCha8Rng::seed_from_u64(crate::util::derive_seed(config.seed, 1));

    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let (lo, hi) = config.length_range;
    let mut total_symbols = 0usize;
    for (family, model) in families.iter().zip(&models) {
        let dir = out_root.join(family);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n = model.n_states();
        let m = model.n_symbols();
        for sample in 0..config.samples_per_family {
            let length = rng.random_range(lo..=hi);
            let mut lines = String::with_capacity(length * 6);
            let mut state = sample_categorical(&mut rng, model.initial());
            for step in 0..length {
                let row = &model.emission()[state * m..(state + 1) * m];
                let symbol = sample_categorical(&mut rng, row);
                lines.push_str(&format!("OP{symbol:03}\n"));
                if step + 1 < length {
                    let row = &model.transition()[state * n..(state + 1) * n];
                    state = sample_categorical(&mut rng, row);
                }
            }
            total_symbols += length;
            let path = dir.join(format!("s{sample:04}.opseq"));
            fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
        }
    }

    let ground_truth = PlantedGroundTruth {
        config: config.clone(),
        families: families.clone(),
        models,
    };
    let ground_truth_path = out_root.join(GROUND_TRUTH_FILE);
    fs::write(
        &ground_truth_path,
        serde_json::to_string_pretty(&ground_truth)?,
    )
    .map_err(|e| Error::io(&ground_truth_path, e))?;

    Ok(PlantedCorpusSummary {
        total_samples: config.n_families * config.samples_per_family,
        families,
        total_symbols,
        ground_truth_path,
    })
}

// ===========================================================================
// Tests
// ===========================================================================
