//! The hybrid classification pipeline: one HMM per family trained on that
//! family's opcode sequences, hidden-state sequences decoded against every
//! family model as engineered features, standard scaling, and a random forest
//! over the concatenated vectors.
//!
//! A sample's feature vector is built by truncating it to its first `L`
//! symbols, posterior-decoding that prefix against each of the `n` family
//! models, and concatenating the `n` state sequences in family order, giving
//! `n * L` features. The raw-opcode baseline skips the HMMs and the scaler
//! and feeds the first `L` symbol ids to the forest directly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, LabeledSequence, OpcodeVocabulary};
use crate::error::{Error, Result};
use crate::forest::{train_forest, ForestConfig, ForestModel};
use crate::hmm::{baum_welch, posterior_decode, HmmModel, TrainingConfig};

/// Default cap on the concatenated training symbols per family, keeping
/// training interactive at desk scale.
pub const DEFAULT_MAX_TRAIN_SYMBOLS: usize = 50_000;

/// Version tag of the serialized hybrid pipeline model.
pub const PIPELINE_MODEL_VERSION: &str = "hmmrf-1";

/// Version tag of the serialized raw-opcode baseline model.
pub const RAW_MODEL_VERSION: &str = "rawrf-1";

// ---------------------------------------------------------------------------
// Family models
// ---------------------------------------------------------------------------

/// One trained HMM per family, in persisted lexicographic family order. All
/// models share the vocabulary alphabet size.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyModels {
    families: Vec<String>,
    models: Vec<HmmModel>,
}

impl FamilyModels {
    pub fn new(families: Vec<String>, models: Vec<HmmModel>) -> Result<Self> {
        if families.is_empty() || families.len() != models.len() {
            return Err(Error::Argument(format!(
                "{} family names for {} models",
                families.len(),
                models.len()
            )));
        }
        if families.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(
                "family names must be strictly increasing".into(),
            ));
        }
        let m = models[0].n_symbols();
        if models.iter().any(|model| model.n_symbols() != m) {
            return Err(Error::Argument(
                "family models must share one symbol alphabet".into(),
            ));
        }
        Ok(Self { families, models })
    }

    pub fn families(&self) -> &[String] {
        &self.families
    }

    pub fn models(&self) -> &[HmmModel] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn family_index(&self, family: &str) -> Option<usize> {
        self.families.binary_search_by(|f| f.as_str().cmp(family)).ok()
    }
}

/// Train one HMM per family on the concatenation of that family's training
/// sequences (in corpus order), truncated at `max_train_symbols`.
///
/// Family `i` (lexicographic order) trains with seed `config.seed + i`, so a
/// single-family corpus reproduces a direct [`baum_welch`] call exactly.
pub fn train_family_hmms(
    train: &[LabeledSequence],
    config: &TrainingConfig,
    n_symbols: usize,
    max_train_symbols: usize,
) -> Result<FamilyModels> {
    if train.is_empty() {
        return Err(Error::Training("no training sequences".into()));
    }
    if max_train_symbols < 2 {
        return Err(Error::Config(format!(
            "max_train_symbols must be at least 2, got {max_train_symbols}"
        )));
    }
    let mut families: Vec<String> = train.iter().map(|s| s.family.clone()).collect();
    families.sort();
    families.dedup();

    let concatenated: Vec<Vec<usize>> = families
        .iter()
        .map(|family| {
            let mut obs = Vec::new();
            for seq in train.iter().filter(|s| &s.family == family) {
                let room = max_train_symbols - obs.len();
                obs.extend(seq.symbols.iter().take(room));
                if obs.len() >= max_train_symbols {
                    break;
                }
            }
            obs
        })
        .collect();

    let models: Vec<HmmModel> = families
        .par_iter()
        .zip(concatenated.par_iter())
        .enumerate()
        .map(|(index, (family, obs))| {
            let family_config = TrainingConfig {
                seed: config.seed.wrapping_add(index as u64),
                ..config.clone()
            };
            let (model, _) = baum_welch(obs, n_symbols, &family_config)
                .map_err(|e| Error::Training(format!("family {family:?}: {e}")))?;
            Ok(model)
        })
        .collect::<Result<_>>()?;

    FamilyModels::new(families, models)
}

/// Posterior-decode the first `l` symbols of a sample against every family
/// model and concatenate the state sequences (cast to reals) in family order.
pub fn extract_features(models: &FamilyModels, symbols: &[usize], l: usize) -> Result<Vec<f64>> {
    if l == 0 {
        return Err(Error::Argument("truncation length L must be positive".into()));
    }
    if symbols.len() < l {
        return Err(Error::ShortSample {
            length: symbols.len(),
            required: l,
        });
    }
    let prefix = &symbols[..l];
    let mut features = Vec::with_capacity(models.len() * l);
    for model in models.models() {
        let states = posterior_decode(model, prefix)?;
        features.extend(states.into_iter().map(|s| s as f64));
    }
    Ok(features)
}

// ---------------------------------------------------------------------------
// Scaler
// ---------------------------------------------------------------------------

/// Per-coordinate standardization fitted on training features only. Uses the
/// population standard deviation; zero-variance coordinates keep std 1 so the
/// transform is total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl StandardScaler {
    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    /// `(x - mean) / std`, coordinate-wise.
    pub fn transform(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.means.len() {
            return Err(Error::Argument(format!(
                "feature length {} != scaler width {}",
                features.len(),
                self.means.len()
            )));
        }
        Ok(features
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(x, (mean, std))| (x - mean) / std)
            .collect())
    }
}

/// Fit a [`StandardScaler`] on at least two equal-length feature vectors.
pub fn fit_scaler(vectors: &[Vec<f64>]) -> Result<StandardScaler> {
    if vectors.len() < 2 {
        return Err(Error::ScalerFit(format!(
            "need at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    let width = vectors[0].len();
    if vectors.iter().any(|v| v.len() != width) {
        return Err(Error::ScalerFit("feature vectors differ in length".into()));
    }
    let n = vectors.len() as f64;
    let mut means = vec![0.0; width];
    for v in vectors {
        for (m, x) in means.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut stds = vec![0.0; width];
    for v in vectors {
        for ((s, x), m) in stds.iter_mut().zip(v).zip(&means) {
            *s += (x - m) * (x - m);
        }
    }
    for s in &mut stds {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    Ok(StandardScaler { means, stds })
}

// ---------------------------------------------------------------------------
// Classifier trait
// ---------------------------------------------------------------------------

/// Anything that maps an encoded opcode sequence to a family, by index into
/// its ordered family list.
pub trait SequenceClassifier: Sync {
    fn families(&self) -> &[String];

    /// Minimum (and used) sequence length L.
    fn truncation_length(&self) -> usize;

    fn vocabulary(&self) -> &OpcodeVocabulary;

    /// Classify, returning the family index and the per-family vote counts.
    fn classify_encoded(&self, symbols: &[usize]) -> Result<(usize, Vec<u32>)>;

    /// Classify, returning the family name and the per-family vote counts.
    fn classify(&self, symbols: &[usize]) -> Result<(String, Vec<u32>)> {
        let (index, votes) = self.classify_encoded(symbols)?;
        Ok((self.families()[index].clone(), votes))
    }
}

// ---------------------------------------------------------------------------
// Hybrid pipeline model
// ---------------------------------------------------------------------------

/// The trained hybrid model: family HMMs, scaler, forest, truncation length,
/// and the vocabulary everything was encoded with.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel {
    family_models: FamilyModels,
    scaler: StandardScaler,
    forest: ForestModel,
    l: usize,
    vocabulary: OpcodeVocabulary,
}

impl PipelineModel {
    pub fn family_models(&self) -> &FamilyModels {
        &self.family_models
    }

    pub fn scaler(&self) -> &StandardScaler {
        &self.scaler
    }

    pub fn forest(&self) -> &ForestModel {
        &self.forest
    }

    pub fn to_json_string(&self) -> Result<String> {
        let repr = PipelineModelRepr {
            version: PIPELINE_MODEL_VERSION.to_string(),
            l: self.l,
            families: self.family_models.families().to_vec(),
            family_models: self.family_models.models().to_vec(),
            scaler: self.scaler.clone(),
            forest: self.forest.clone(),
            vocabulary: self.vocabulary.clone(),
            vocabulary_hash: self.vocabulary.content_hash(),
        };
        Ok(serde_json::to_string_pretty(&repr)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let repr: PipelineModelRepr = serde_json::from_str(s)?;
        if repr.version != PIPELINE_MODEL_VERSION {
            return Err(Error::Config(format!(
                "model version {:?} is not {PIPELINE_MODEL_VERSION:?}",
                repr.version
            )));
        }
        if repr.vocabulary_hash != repr.vocabulary.content_hash() {
            return Err(Error::Config(
                "vocabulary hash does not match the embedded vocabulary".into(),
            ));
        }
        repr.forest.validate()?;
        let family_models = FamilyModels::new(repr.families, repr.family_models)?;
        let n_features = family_models.len() * repr.l;
        if repr.forest.n_features() != n_features {
            return Err(Error::Config(format!(
                "forest expects {} features but families * L = {n_features}",
                repr.forest.n_features()
            )));
        }
        if family_models.models()[0].n_symbols() != repr.vocabulary.size() {
            return Err(Error::Config(
                "family models and vocabulary disagree on alphabet size".into(),
            ));
        }
        Ok(Self {
            family_models,
            scaler: repr.scaler,
            forest: repr.forest,
            l: repr.l,
            vocabulary: repr.vocabulary,
        })
    }
}

impl SequenceClassifier for PipelineModel {
    fn families(&self) -> &[String] {
        self.family_models.families()
    }

    fn truncation_length(&self) -> usize {
        self.l
    }

    fn vocabulary(&self) -> &OpcodeVocabulary {
        &self.vocabulary
    }

    fn classify_encoded(&self, symbols: &[usize]) -> Result<(usize, Vec<u32>)> {
        let features = extract_features(&self.family_models, symbols, self.l)?;
        let scaled = self.scaler.transform(&features)?;
        self.forest.predict(&scaled)
    }
}

#[derive(Serialize, Deserialize)]
struct PipelineModelRepr {
    version: String,
    #[serde(rename = "L")]
    l: usize,
    families: Vec<String>,
    family_models: Vec<HmmModel>,
    scaler: StandardScaler,
    forest: ForestModel,
    vocabulary: OpcodeVocabulary,
    vocabulary_hash: String,
}

/// Train the full pipeline on the training half of a split: family HMMs,
/// per-sample hidden-state features, scaler (training features only), and
/// the forest.
pub fn train_pipeline(
    split: &CorpusSplit,
    hmm_config: &TrainingConfig,
    forest_config: &ForestConfig,
    l: usize,
    max_train_symbols: usize,
) -> Result<PipelineModel> {
    let family_models = train_family_hmms(
        &split.train,
        hmm_config,
        split.vocabulary.size(),
        max_train_symbols,
    )?;
    if family_models.len() < 2 {
        return Err(Error::Training(format!(
            "need at least 2 families to classify, got {}",
            family_models.len()
        )));
    }
    let features = extract_training_features(&family_models, &split.train, l)?;
    let labels = training_labels(family_models.families(), &split.train)?;
    let scaler = fit_scaler(&features)?;
    let scaled: Vec<Vec<f64>> = features
        .iter()
        .map(|f| scaler.transform(f))
        .collect::<Result<_>>()?;
    let forest = train_forest(&scaled, &labels, forest_config)
        .map_err(|e| Error::Training(format!("forest stage: {e}")))?;
    Ok(PipelineModel {
        family_models,
        scaler,
        forest,
        l,
        vocabulary: split.vocabulary.clone(),
    })
}

fn extract_training_features(
    models: &FamilyModels,
    train: &[LabeledSequence],
    l: usize,
) -> Result<Vec<Vec<f64>>> {
    train
        .par_iter()
        .map(|seq| {
            extract_features(models, &seq.symbols, l).map_err(|e| {
                Error::Training(format!("feature extraction for sample {}: {e}", seq.sample_id))
            })
        })
        .collect()
}

fn training_labels(families: &[String], train: &[LabeledSequence]) -> Result<Vec<usize>> {
    train
        .iter()
        .map(|seq| {
            families
                .binary_search_by(|f| f.as_str().cmp(&seq.family))
                .map_err(|_| Error::Training(format!("unknown family {:?}", seq.family)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Raw-opcode baseline
// ---------------------------------------------------------------------------

/// Baseline forest trained directly on the first `L` opcode ids, with no HMM
/// stage and no scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBaselineModel {
    families: Vec<String>,
    forest: ForestModel,
    l: usize,
    vocabulary: OpcodeVocabulary,
}

impl RawBaselineModel {
    pub fn forest(&self) -> &ForestModel {
        &self.forest
    }

    pub fn to_json_string(&self) -> Result<String> {
        let repr = RawBaselineModelRepr {
            version: RAW_MODEL_VERSION.to_string(),
            l: self.l,
            families: self.families.clone(),
            forest: self.forest.clone(),
            vocabulary: self.vocabulary.clone(),
            vocabulary_hash: self.vocabulary.content_hash(),
        };
        Ok(serde_json::to_string_pretty(&repr)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let repr: RawBaselineModelRepr = serde_json::from_str(s)?;
        if repr.version != RAW_MODEL_VERSION {
            return Err(Error::Config(format!(
                "model version {:?} is not {RAW_MODEL_VERSION:?}",
                repr.version
            )));
        }
        if repr.vocabulary_hash != repr.vocabulary.content_hash() {
            return Err(Error::Config(
                "vocabulary hash does not match the embedded vocabulary".into(),
            ));
        }
        repr.forest.validate()?;
        if repr.forest.n_features() != repr.l {
            return Err(Error::Config(format!(
                "baseline forest expects {} features but L = {}",
                repr.forest.n_features(),
                repr.l
            )));
        }
        Ok(Self {
            families: repr.families,
            forest: repr.forest,
            l: repr.l,
            vocabulary: repr.vocabulary,
        })
    }
}

impl SequenceClassifier for RawBaselineModel {
    fn families(&self) -> &[String] {
        &self.families
    }

    fn truncation_length(&self) -> usize {
        self.l
    }

    fn vocabulary(&self) -> &OpcodeVocabulary {
        &self.vocabulary
    }

    fn classify_encoded(&self, symbols: &[usize]) -> Result<(usize, Vec<u32>)> {
        if symbols.len() < self.l {
            return Err(Error::ShortSample {
                length: symbols.len(),
                required: self.l,
            });
        }
        let features: Vec<f64> = symbols[..self.l].iter().map(|&s| s as f64).collect();
        self.forest.predict(&features)
    }
}

#[derive(Serialize, Deserialize)]
struct RawBaselineModelRepr {
    version: String,
    #[serde(rename = "L")]
    l: usize,
    families: Vec<String>,
    forest: ForestModel,
    vocabulary: OpcodeVocabulary,
    vocabulary_hash: String,
}

/// Train the raw-opcode baseline on the training half of a split.
pub fn train_raw_baseline(
    split: &CorpusSplit,
    forest_config: &ForestConfig,
    l: usize,
) -> Result<RawBaselineModel> {
    if l == 0 {
        return Err(Error::Argument("truncation length L must be positive".into()));
    }
    let mut families: Vec<String> = split.train.iter().map(|s| s.family.clone()).collect();
    families.sort();
    families.dedup();
    if families.len() < 2 {
        return Err(Error::Training(format!(
            "need at least 2 families to classify, got {}",
            families.len()
        )));
    }
    let features: Vec<Vec<f64>> = split
        .train
        .iter()
        .map(|seq| {
            if seq.symbols.len() < l {
                return Err(Error::Training(format!(
                    "feature extraction for sample {}: short sample: length {} < required {l}",
                    seq.sample_id,
                    seq.symbols.len()
                )));
            }
            Ok(seq.symbols[..l].iter().map(|&s| s as f64).collect())
        })
        .collect::<Result<_>>()?;
    let labels = training_labels(&families, &split.train)?;
    let forest = train_forest(&features, &labels, forest_config)
        .map_err(|e| Error::Training(format!("forest stage: {e}")))?;
    Ok(RawBaselineModel {
        families,
        forest,
        l,
        vocabulary: split.vocabulary.clone(),
    })
}

// ---------------------------------------------------------------------------
// Trained-model dispatch
// ---------------------------------------------------------------------------

/// Either flavor of trained model, dispatched by the JSON `version` field.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    HmmRf(PipelineModel),
    RawRf(RawBaselineModel),
}

impl TrainedModel {
    pub fn to_json_string(&self) -> Result<String> {
        match self {
            TrainedModel::HmmRf(m) => m.to_json_string(),
            TrainedModel::RawRf(m) => m.to_json_string(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(s)?;
        match value.get("version").and_then(|v| v.as_str()) {
            Some(PIPELINE_MODEL_VERSION) => Ok(TrainedModel::HmmRf(PipelineModel::from_json_str(s)?)),
            Some(RAW_MODEL_VERSION) => Ok(TrainedModel::RawRf(RawBaselineModel::from_json_str(s)?)),
            Some(other) => Err(Error::Config(format!("unknown model version {other:?}"))),
            None => Err(Error::Config("model JSON lacks a version field".into())),
        }
    }

    pub fn as_classifier(&self) -> &dyn SequenceClassifier {
        match self {
            TrainedModel::HmmRf(m) => m,
            TrainedModel::RawRf(m) => m,
        }
    }
}

// ===========================================================================
// Tests
// ===========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_planted_corpus, load_corpus, split_corpus, PlantedCorpusConfig};
    use crate::forest::{MaxFeatures, SplitCriterion};
    use approx::assert_relative_eq;

    fn seq(family: &str, id: &str, symbols: Vec<usize>) -> LabeledSequence {
        LabeledSequence {
            sample_id: format!("{family}/{id}"),
            family: family.into(),
            symbols,
            unseen: 0,
        }
    }

    // -- scaler -----------------------------------------------------------------

    #[test]
    fn scaler_hand_values() {
        let scaler = fit_scaler(&[vec![0.0, 2.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(scaler.means(), &[1.0, 2.0]);
        // Population std of {0, 2} is 1; the constant coordinate gets std 1.
        assert_eq!(scaler.stds(), &[1.0, 1.0]);
        assert_eq!(scaler.transform(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(scaler.transform(&[3.0, 2.0]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn scaler_standardizes_training_set() {
        let data: Vec<Vec<f64>> = (0..7)
            .map(|i| vec![i as f64, 3.0 * i as f64 + 1.0, 5.0])
            .collect();
        let scaler = fit_scaler(&data).unwrap();
        let transformed: Vec<Vec<f64>> = data.iter().map(|v| scaler.transform(v).unwrap()).collect();
        for c in 0..3 {
            let mean: f64 = transformed.iter().map(|v| v[c]).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-9);
            let var: f64 = transformed.iter().map(|v| v[c] * v[c]).sum::<f64>() / 7.0;
            if c < 2 {
                assert!((var.sqrt() - 1.0).abs() < 1e-9);
            } else {
                assert_eq!(var, 0.0); // constant coordinate collapses to zero
            }
        }
    }

    #[test]
    fn scaler_identical_vectors_map_to_zero() {
        let scaler = fit_scaler(&[vec![4.0, 4.0], vec![4.0, 4.0], vec![4.0, 4.0]]).unwrap();
        assert_eq!(scaler.transform(&[4.0, 4.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn scaler_rejects_degenerate_input() {
        assert!(matches!(fit_scaler(&[vec![1.0]]), Err(Error::ScalerFit(_))));
        assert!(fit_scaler(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let scaler = fit_scaler(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(
            scaler.transform(&[1.0, 2.0]),
            Err(Error::Argument(_))
        ));
    }

    // -- family HMM training -------------------------------------------------------

    #[test]
    fn single_family_matches_direct_baum_welch() {
        let symbols: Vec<usize> = (0..120).map(|t| t % 3).collect();
        let train = vec![seq("only", "s0", symbols.clone())];
        let config = TrainingConfig::new(2, 42);
        let family = train_family_hmms(&train, &config, 3, 10_000).unwrap();
        let (direct, _) = baum_welch(&symbols, 3, &config).unwrap();
        assert_eq!(family.models()[0], direct);
    }

    #[test]
    fn families_come_out_sorted_with_configured_states() {
        let mk = |family: &str, bias: usize| {
            seq(family, "s0", (0..80).map(|t| (t + bias) % 4).collect())
        };
        let train = vec![mk("zeta", 1), mk("alpha", 0), mk("mid", 2)];
        let config = TrainingConfig::new(3, 7);
        let models = train_family_hmms(&train, &config, 4, 10_000).unwrap();
        assert_eq!(models.families(), &["alpha", "mid", "zeta"]);
        assert!(models.models().iter().all(|m| m.n_states() == 3));
        assert_eq!(models.family_index("mid"), Some(1));
        assert_eq!(models.family_index("nope"), None);
    }

    #[test]
    fn one_model_per_family() {
        let train: Vec<LabeledSequence> = (0..7)
            .map(|f| seq(&format!("fam{f}"), "s0", (0..60).map(|t| (t + f) % 5).collect()))
            .collect();
        let models = train_family_hmms(&train, &TrainingConfig::new(2, 11), 5, 10_000).unwrap();
        assert_eq!(models.len(), 7);
        assert!(models.models().iter().all(|m| m.n_symbols() == 5));
    }

    #[test]
    fn concatenation_respects_symbol_cap() {
        // Two 60-symbol sequences, cap at 70: training sees 70 symbols. A cap
        // that small changes the trained model versus the uncapped run.
        let s: Vec<usize> = (0..60).map(|t| t % 2).collect();
        let train = vec![seq("a", "s0", s.clone()), seq("a", "s1", s.clone())];
        let config = TrainingConfig::new(2, 1);
        let capped = train_family_hmms(&train, &config, 2, 70).unwrap();
        let full = train_family_hmms(&train, &config, 2, 500).unwrap();
        let (direct_70, _) = baum_welch(&[&s[..], &s[..10]].concat(), 2, &config).unwrap();
        assert_eq!(capped.models()[0], direct_70);
        assert_ne!(capped.models()[0], full.models()[0]);
    }

    #[test]
    fn family_with_too_few_symbols_errors_with_name() {
        let train = vec![seq("tiny", "s0", vec![0])];
        let config = TrainingConfig::new(2, 1);
        match train_family_hmms(&train, &config, 2, 1000) {
            Err(Error::Training(msg)) => assert!(msg.contains("tiny"), "message: {msg}"),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    // -- feature extraction ----------------------------------------------------------

    #[test]
    fn features_have_length_families_times_l() {
        let symbols: Vec<usize> = (0..90).map(|t| t % 3).collect();
        let train = vec![
            seq("a", "s0", symbols.clone()),
            seq("b", "s0", symbols.iter().map(|&s| (s + 1) % 3).collect()),
        ];
        let models = train_family_hmms(&train, &TrainingConfig::new(2, 3), 3, 10_000).unwrap();
        let features = extract_features(&models, &symbols, 30).unwrap();
        assert_eq!(features.len(), 2 * 30);
        assert!(features.iter().all(|&f| f == 0.0 || f == 1.0));
        // Determinism: identical samples give identical vectors.
        assert_eq!(features, extract_features(&models, &symbols, 30).unwrap());
    }

    #[test]
    fn single_state_model_yields_zero_features() {
        let symbols: Vec<usize> = (0..40).map(|t| t % 2).collect();
        let train = vec![seq("a", "s0", symbols.clone())];
        let models = train_family_hmms(&train, &TrainingConfig::new(1, 5), 2, 10_000).unwrap();
        let features = extract_features(&models, &symbols, symbols.len()).unwrap();
        assert_eq!(features, vec![0.0; symbols.len()]);
    }

    #[test]
    fn short_sample_is_rejected() {
        let symbols: Vec<usize> = (0..50).map(|t| t % 2).collect();
        let train = vec![seq("a", "s0", symbols)];
        let models = train_family_hmms(&train, &TrainingConfig::new(2, 5), 2, 10_000).unwrap();
        assert!(matches!(
            extract_features(&models, &[0, 1, 0], 10),
            Err(Error::ShortSample {
                length: 3,
                required: 10
            })
        ));
    }

    // -- end-to-end pipeline -----------------------------------------------------------

    fn planted_split(separation: f64, seed: u64) -> CorpusSplit {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PlantedCorpusConfig {
            n_families: 2,
            n_states: 3,
            n_symbols: 14,
            samples_per_family: 16,
            length_range: (40, 80),
            separation,
            seed,
        };
        generate_planted_corpus(&cfg, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        split_corpus(&loaded.sequences, 0.2, 25, seed).unwrap()
    }

    fn small_hmm_config(seed: u64) -> TrainingConfig {
        TrainingConfig {
            n_states: 3,
            min_iterations: 5,
            epsilon: 1e-3,
            max_iterations: 50,
            seed,
            init_jitter: 0.01,
        }
    }

    #[test]
    fn pipeline_separates_well_separated_families() {
        let split = planted_split(1.0, 9);
        let forest_config = ForestConfig::new(30, SplitCriterion::Gini, MaxFeatures::Sqrt, 9);
        let model =
            train_pipeline(&split, &small_hmm_config(9), &forest_config, 25, 50_000).unwrap();

        let mut hits = 0;
        for sample in &split.test {
            let (family, votes) = model.classify(&sample.symbols).unwrap();
            assert_eq!(votes.iter().sum::<u32>(), 30);
            if family == sample.family {
                hits += 1;
            }
        }
        let accuracy = hits as f64 / split.test.len() as f64;
        assert!(accuracy >= 0.95, "held-out accuracy {accuracy}");
    }

    #[test]
    fn classify_accepts_exactly_l_symbols_and_is_stable() {
        let split = planted_split(1.0, 4);
        let forest_config = ForestConfig::new(10, SplitCriterion::Gini, MaxFeatures::Sqrt, 4);
        let model =
            train_pipeline(&split, &small_hmm_config(4), &forest_config, 25, 50_000).unwrap();
        let sample = &split.train[0];
        let exact = &sample.symbols[..25];
        let a = model.classify(exact).unwrap();
        let b = model.classify(exact).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            model.classify(&sample.symbols[..10]),
            Err(Error::ShortSample { .. })
        ));
    }

    #[test]
    fn pipeline_serialization_round_trips_and_is_deterministic() {
        let forest_config = ForestConfig::new(5, SplitCriterion::Gini, MaxFeatures::Sqrt, 2);
        let run = || {
            let split = planted_split(0.9, 2);
            let model =
                train_pipeline(&split, &small_hmm_config(2), &forest_config, 25, 50_000).unwrap();
            model.to_json_string().unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed must give byte-identical model JSON");

        let model = PipelineModel::from_json_str(&a).unwrap();
        assert_eq!(model.to_json_string().unwrap(), a);
        assert_eq!(model.truncation_length(), 25);

        // Version gate.
        let tampered = a.replace("hmmrf-1", "hmmrf-9");
        assert!(PipelineModel::from_json_str(&tampered).is_err());
    }

    #[test]
    fn raw_baseline_uses_first_l_ids() {
        let split = planted_split(1.0, 6);
        let forest_config = ForestConfig::new(20, SplitCriterion::Gini, MaxFeatures::Sqrt, 6);
        let baseline = train_raw_baseline(&split, &forest_config, 25).unwrap();
        assert_eq!(baseline.forest().n_features(), 25);

        let mut hits = 0;
        for sample in &split.test {
            let (family, _) = baseline.classify(&sample.symbols).unwrap();
            if family == sample.family {
                hits += 1;
            }
        }
        // Disjoint emission supports: raw ids are informative too.
        let accuracy = hits as f64 / split.test.len() as f64;
        assert!(accuracy > 0.5, "baseline accuracy {accuracy} not above chance");

        let json = baseline.to_json_string().unwrap();
        let back = RawBaselineModel::from_json_str(&json).unwrap();
        assert_eq!(baseline, back);
    }

    #[test]
    fn trained_model_dispatches_on_version() {
        let split = planted_split(1.0, 8);
        let forest_config = ForestConfig::new(5, SplitCriterion::Gini, MaxFeatures::Sqrt, 8);
        let pipeline =
            train_pipeline(&split, &small_hmm_config(8), &forest_config, 25, 50_000).unwrap();
        let baseline = train_raw_baseline(&split, &forest_config, 25).unwrap();

        let p = TrainedModel::from_json_str(&pipeline.to_json_string().unwrap()).unwrap();
        assert!(matches!(p, TrainedModel::HmmRf(_)));
        let b = TrainedModel::from_json_str(&baseline.to_json_string().unwrap()).unwrap();
        assert!(matches!(b, TrainedModel::RawRf(_)));
        assert!(TrainedModel::from_json_str("{}").is_err());

        let (name, _) = p.as_classifier().classify(&split.test[0].symbols).unwrap();
        assert!(split.test.iter().any(|s| s.family == name) || p.as_classifier().families().contains(&name));
    }

    #[test]
    fn scaled_transform_preserves_per_coordinate_order() {
        // The scaler is a strictly monotone affine map per coordinate, so the
        // ordering of any coordinate across samples is preserved.
        let vectors = vec![
            vec![0.0, 5.0, 1.0],
            vec![1.0, 3.0, 1.0],
            vec![2.0, 4.0, 1.0],
        ];
        let scaler = fit_scaler(&vectors).unwrap();
        let scaled: Vec<Vec<f64>> = vectors.iter().map(|v| scaler.transform(v).unwrap()).collect();
        for c in 0..3 {
            for i in 0..vectors.len() {
                for j in 0..vectors.len() {
                    let raw = vectors[i][c].partial_cmp(&vectors[j][c]).unwrap();
                    let post = scaled[i][c].partial_cmp(&scaled[j][c]).unwrap();
                    assert_eq!(raw, post);
                }
            }
        }
        assert_relative_eq!(scaler.stds()[2], 1.0); // constant coordinate
    }
}
