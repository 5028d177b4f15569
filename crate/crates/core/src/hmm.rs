//! Discrete hidden Markov models: representation, scoring, decoding, and
//! Baum-Welch training.
//!
//! A model is the triple (A, B, pi) over `N` hidden states and `M` observation
//! symbols. Every row of the transition matrix A, the emission matrix B, and
//! the initial distribution pi is a discrete probability distribution.
//!
//! The forward and backward passes use per-step scaling so that sequences of
//! tens of thousands of symbols do not underflow; the log-likelihood is
//! recovered from the scale factors. Viterbi decoding runs in log space.
//!
//! # Quick start
//!
//! ```
//! use hmmrf_core::hmm::{forward, posterior_decode, HmmModel};
//!
//! // 2-state model: state 0 favors symbol 0, state 1 favors symbol 1.
//! let model = HmmModel::new(
//!     2,
//!     2,
//!     vec![0.6, 0.4],
//!     vec![0.7, 0.3, 0.4, 0.6],
//!     vec![0.9, 0.1, 0.2, 0.8],
//! )
//! .unwrap();
//!
//! let obs = [0, 1, 0];
//! assert_eq!(posterior_decode(&model, &obs).unwrap(), vec![0, 1, 0]);
//! assert!(forward(&model, &obs).unwrap().log_likelihood < 0.0);
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the row-stochasticity invariant.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Emission probability floor applied at decode time so that symbols unseen
/// during a family's training never zero out the posterior. Training itself
/// uses exact re-estimation without flooring.
pub const DECODE_EMISSION_FLOOR: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A discrete HMM. Matrices are stored row-major: `transition` is N&times;N,
/// `emission` is N&times;M, `initial` has length N.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    n_states: usize,
    n_symbols: usize,
    initial: Vec<f64>,
    transition: Vec<f64>,
    emission: Vec<f64>,
}

impl HmmModel {
    /// Build a model after validating dimensions, entry ranges, and row sums.
    pub fn new(
        n_states: usize,
        n_symbols: usize,
        initial: Vec<f64>,
        transition: Vec<f64>,
        emission: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_symbols == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive, got N={n_states}, M={n_symbols}"
            )));
        }
        if initial.len() != n_states {
            return Err(Error::Config(format!(
                "initial length {} != N={n_states}",
                initial.len()
            )));
        }
        if transition.len() != n_states * n_states {
            return Err(Error::Config(format!(
                "transition length {} != N*N={}",
                transition.len(),
                n_states * n_states
            )));
        }
        if emission.len() != n_states * n_symbols {
            return Err(Error::Config(format!(
                "emission length {} != N*M={}",
                emission.len(),
                n_states * n_symbols
            )));
        }
        let model = Self {
            n_states,
            n_symbols,
            initial,
            transition,
            emission,
        };
        model.check_stochastic()?;
        Ok(model)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    /// Initial distribution pi, length N.
    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    /// Transition matrix A, row-major N&times;N.
    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    /// Emission matrix B, row-major N&times;M.
    pub fn emission(&self) -> &[f64] {
        &self.emission
    }

    #[inline]
    pub fn pi(&self, i: usize) -> f64 {
        self.initial[i]
    }

    /// Transition probability from state `i` to state `j`.
    #[inline]
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.transition[i * self.n_states + j]
    }

    /// Probability of emitting symbol `k` in state `i`.
    #[inline]
    pub fn b(&self, i: usize, k: usize) -> f64 {
        self.emission[i * self.n_symbols + k]
    }

    fn check_stochastic(&self) -> Result<()> {
        let check_row = |row: &[f64], what: &str| -> Result<()> {
            let mut sum = 0.0;
            for &p in row {
                if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                    return Err(Error::Config(format!(
                        "{what} contains entry {p} outside [0, 1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Config(format!("{what} sums to {sum}, expected 1")));
            }
            Ok(())
        };
        check_row(&self.initial, "initial distribution")?;
        for i in 0..self.n_states {
            check_row(
                &self.transition[i * self.n_states..(i + 1) * self.n_states],
                &format!("transition row {i}"),
            )?;
        }
        for i in 0..self.n_states {
            check_row(
                &self.emission[i * self.n_symbols..(i + 1) * self.n_symbols],
                &format!("emission row {i}"),
            )?;
        }
        Ok(())
    }

    fn validate_observations(&self, obs: &[usize]) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::Argument("observation sequence is empty".into()));
        }
        for (t, &o) in obs.iter().enumerate() {
            if o >= self.n_symbols {
                return Err(Error::Encoding(format!(
                    "symbol {o} at position {t} out of range (M = {})",
                    self.n_symbols
                )));
            }
        }
        Ok(())
    }

    /// Copy of the model with every emission entry raised to at least `floor`.
    /// Rows are not renormalized; argmax-based decoding is unaffected.
    fn with_emission_floor(&self, floor: f64) -> Self {
        let mut floored = self.clone();
        for p in &mut floored.emission {
            if *p < floor {
                *p = floor;
            }
        }
        floored
    }

    /// Serialize to the interchange JSON document.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&HmmModelRepr::from(self))?)
    }

    /// Deserialize from the interchange JSON document, re-validating all
    /// invariants.
    pub fn from_json(s: &str) -> Result<Self> {
        let repr: HmmModelRepr = serde_json::from_str(s)?;
        repr.into_model()
    }
}

/// On-disk form: flat row-major arrays of decimal floats.
#[derive(Serialize, Deserialize)]
struct HmmModelRepr {
    n_states: usize,
    n_symbols: usize,
    initial: Vec<f64>,
    transition: Vec<f64>,
    emission: Vec<f64>,
}

impl From<&HmmModel> for HmmModelRepr {
    fn from(m: &HmmModel) -> Self {
        Self {
            n_states: m.n_states,
            n_symbols: m.n_symbols,
            initial: m.initial.clone(),
            transition: m.transition.clone(),
            emission: m.emission.clone(),
        }
    }
}

impl HmmModelRepr {
    fn into_model(self) -> Result<HmmModel> {
        HmmModel::new(
            self.n_states,
            self.n_symbols,
            self.initial,
            self.transition,
            self.emission,
        )
    }
}

impl Serialize for HmmModel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        HmmModelRepr::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HmmModel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = HmmModelRepr::deserialize(deserializer)?;
        repr.into_model().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Build a near-uniform model: every entry starts at 1/N (or 1/M for
/// emissions), is perturbed multiplicatively by a seeded uniform factor in
/// `[1 - jitter, 1 + jitter]`, and each row is renormalized. Deterministic for
/// a fixed seed; `jitter = 0` yields the exactly uniform model.
///
/// Exact uniformity is a fixed point of Baum-Welch re-estimation, so training
/// starts from a jittered model in practice.
pub fn init_model(n_states: usize, n_symbols: usize, seed: u64, jitter: f64) -> Result<HmmModel> {
    if n_states == 0 || n_symbols == 0 {
        return Err(Error::Config(format!(
            "model dimensions must be positive, got N={n_states}, M={n_symbols}"
        )));
    }
    if !(0.0..=0.05).contains(&jitter) {
        return Err(Error::Config(format!(
            "init jitter {jitter} outside [0, 0.05]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill_row = |row: &mut [f64]| {
        let uniform = 1.0 / row.len() as f64;
        for p in row.iter_mut() {
            let factor = 1.0 + jitter * (2.0 * rng.random::<f64>() - 1.0);
            *p = uniform * factor;
        }
        let sum: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= sum;
        }
    };

    // Draw order: pi, then transition rows, then emission rows.
    let mut initial = vec![0.0; n_states];
    fill_row(&mut initial);
    let mut transition = vec![0.0; n_states * n_states];
    for i in 0..n_states {
        fill_row(&mut transition[i * n_states..(i + 1) * n_states]);
    }
    let mut emission = vec![0.0; n_states * n_symbols];
    for i in 0..n_states {
        fill_row(&mut emission[i * n_symbols..(i + 1) * n_symbols]);
    }
    HmmModel::new(n_states, n_symbols, initial, transition, emission)
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Joint probability of a specific state path and observation sequence:
/// `pi[x0] * b[x0](O0) * prod_t a[x(t-1), xt] * b[xt](Ot)`.
///
/// Exponentially small for long sequences; intended as a brute-force kernel
/// on tiny instances.
pub fn joint_path_probability(model: &HmmModel, states: &[usize], obs: &[usize]) -> Result<f64> {
    if states.len() != obs.len() {
        return Err(Error::Argument(format!(
            "state sequence length {} != observation length {}",
            states.len(),
            obs.len()
        )));
    }
    model.validate_observations(obs)?;
    for (t, &x) in states.iter().enumerate() {
        if x >= model.n_states {
            return Err(Error::Argument(format!(
                "state {x} at position {t} out of range (N = {})",
                model.n_states
            )));
        }
    }
    let mut p = model.pi(states[0]) * model.b(states[0], obs[0]);
    for t in 1..obs.len() {
        p *= model.a(states[t - 1], states[t]) * model.b(states[t], obs[t]);
    }
    Ok(p)
}

/// Result of the scaled forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Scaled alpha, row-major T&times;N; each time-step row sums to 1.
    pub alpha: Vec<f64>,
    /// Per-step scale factors `c_t` (the reciprocal of each unscaled row sum).
    pub scale: Vec<f64>,
    /// `log P(O | lambda)`, recovered as `-sum_t ln(c_t)`.
    pub log_likelihood: f64,
    n_states: usize,
}

impl ForwardPass {
    #[inline]
    pub fn alpha_at(&self, t: usize, i: usize) -> f64 {
        self.alpha[t * self.n_states + i]
    }
}

/// Scaled forward algorithm.
pub fn forward(model: &HmmModel, obs: &[usize]) -> Result<ForwardPass> {
    model.validate_observations(obs)?;
    let n = model.n_states;
    let t_len = obs.len();
    let mut alpha = vec![0.0; t_len * n];
    let mut scale = vec![0.0; t_len];

    let mut sum = 0.0;
    for i in 0..n {
        let v = model.pi(i) * model.b(i, obs[0]);
        alpha[i] = v;
        sum += v;
    }
    if sum <= 0.0 {
        return Err(Error::DegenerateObservation {
            position: 0,
            symbol: obs[0],
        });
    }
    scale[0] = 1.0 / sum;
    for i in 0..n {
        alpha[i] *= scale[0];
    }

    for t in 1..t_len {
        let ot = obs[t];
        let (prev, cur) = alpha.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        let cur = &mut cur[..n];
        let mut sum = 0.0;
        for (j, slot) in cur.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &ap) in prev.iter().enumerate() {
                acc += ap * model.a(i, j);
            }
            let v = acc * model.b(j, ot);
            *slot = v;
            sum += v;
        }
        if sum <= 0.0 {
            return Err(Error::DegenerateObservation {
                position: t,
                symbol: ot,
            });
        }
        scale[t] = 1.0 / sum;
        for v in cur.iter_mut() {
            *v *= scale[t];
        }
    }

    let log_likelihood = -scale.iter().map(|c| c.ln()).sum::<f64>();
    Ok(ForwardPass {
        alpha,
        scale,
        log_likelihood,
        n_states: n,
    })
}

/// Scaled backward pass using the scale factors produced by [`forward`] on
/// the same model and observations. Returns beta, row-major T&times;N.
///
/// With this pairing, `gamma_t(i) = alpha_t(i) * beta_t(i) / c_t` and the
/// pairwise posteriors `xi_t(i, j) = alpha_t(i) a_ij b_j(O_{t+1})
/// beta_{t+1}(j)` need no further normalization.
pub fn backward(model: &HmmModel, obs: &[usize], scale: &[f64]) -> Result<Vec<f64>> {
    model.validate_observations(obs)?;
    if scale.len() != obs.len() {
        return Err(Error::Argument(format!(
            "scale factor length {} != observation length {}",
            scale.len(),
            obs.len()
        )));
    }
    let n = model.n_states;
    let t_len = obs.len();
    let mut beta = vec![0.0; t_len * n];
    for i in 0..n {
        beta[(t_len - 1) * n + i] = scale[t_len - 1];
    }
    for t in (0..t_len - 1).rev() {
        let ot1 = obs[t + 1];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += model.a(i, j) * model.b(j, ot1) * beta[(t + 1) * n + j];
            }
            beta[t * n + i] = acc * scale[t];
        }
    }
    Ok(beta)
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Decode the state at each position as the argmax of its marginal posterior
/// `gamma_t(i)`, maximizing the expected number of per-position correct
/// states. This differs in general from the single best path of [`viterbi`].
///
/// Emissions are floored at [`DECODE_EMISSION_FLOOR`] first, so symbols a
/// model never saw in training cannot produce a degenerate posterior. Ties
/// break toward the lowest state index.
pub fn posterior_decode(model: &HmmModel, obs: &[usize]) -> Result<Vec<usize>> {
    let floored = model.with_emission_floor(DECODE_EMISSION_FLOOR);
    let fwd = forward(&floored, obs)?;
    let beta = backward(&floored, obs, &fwd.scale)?;
    let n = floored.n_states;
    let mut path = Vec::with_capacity(obs.len());
    for t in 0..obs.len() {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for i in 0..n {
            // The 1/c_t factor is constant across states; skip it.
            let g = fwd.alpha_at(t, i) * beta[t * n + i];
            if g > best_val {
                best_val = g;
                best = i;
            }
        }
        path.push(best);
    }
    Ok(path)
}

/// Most probable single state path (log-space dynamic program) and its log
/// joint probability. Ties break toward the lowest state index, both at each
/// step and at the final state.
pub fn viterbi(model: &HmmModel, obs: &[usize]) -> Result<(Vec<usize>, f64)> {
    model.validate_observations(obs)?;
    let n = model.n_states;
    let t_len = obs.len();
    let ln = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };

    let mut delta = vec![f64::NEG_INFINITY; t_len * n];
    let mut back = vec![0usize; t_len * n];
    for i in 0..n {
        delta[i] = ln(model.pi(i)) + ln(model.b(i, obs[0]));
    }
    for t in 1..t_len {
        let ot = obs[t];
        for j in 0..n {
            let mut best_i = 0;
            let mut best_val = f64::NEG_INFINITY;
            for i in 0..n {
                let v = delta[(t - 1) * n + i] + ln(model.a(i, j));
                if v > best_val {
                    best_val = v;
                    best_i = i;
                }
            }
            delta[t * n + j] = best_val + ln(model.b(j, ot));
            back[t * n + j] = best_i;
        }
    }

    let mut last = 0;
    let mut best_val = f64::NEG_INFINITY;
    for i in 0..n {
        let v = delta[(t_len - 1) * n + i];
        if v > best_val {
            best_val = v;
            last = i;
        }
    }
    let mut path = vec![0usize; t_len];
    path[t_len - 1] = last;
    for t in (0..t_len - 1).rev() {
        path[t] = back[(t + 1) * n + path[t + 1]];
    }
    Ok((path, best_val))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Baum-Welch schedule. `epsilon` is the threshold on the change in raw
/// log-likelihood between successive iterations; the stop test is not applied
/// before `min_iterations` re-estimation steps have run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub n_states: usize,
    pub min_iterations: usize,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub init_jitter: f64,
}

impl TrainingConfig {
    /// Schedule with the standard stopping protocol: at least 10 iterations,
    /// epsilon 0.001, a safety cap of 200, and 1% initialization jitter.
    pub fn new(n_states: usize, seed: u64) -> Self {
        Self {
            n_states,
            min_iterations: 10,
            epsilon: 1e-3,
            max_iterations: 200,
            seed,
            init_jitter: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::Config("n_states must be positive".into()));
        }
        if self.min_iterations == 0 || self.min_iterations > self.max_iterations {
            return Err(Error::Config(format!(
                "need 1 <= min_iterations <= max_iterations, got {} and {}",
                self.min_iterations, self.max_iterations
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(0.0..=0.05).contains(&self.init_jitter) {
            return Err(Error::Config(format!(
                "init jitter {} outside [0, 0.05]",
                self.init_jitter
            )));
        }
        Ok(())
    }
}

/// Train a model on one observation sequence by Baum-Welch re-estimation,
/// starting from a seeded near-uniform model.
///
/// Returns the trained model and the per-iteration log-likelihood history;
/// `history[k]` is the score of the model entering iteration `k`, so the
/// history is non-decreasing up to floating-point slack. Deterministic for
/// identical `(obs, config)`.
pub fn baum_welch(
    obs: &[usize],
    n_symbols: usize,
    config: &TrainingConfig,
) -> Result<(HmmModel, Vec<f64>)> {
    baum_welch_observed(obs, n_symbols, config, |_, _| {})
}

/// [`baum_welch`] with a per-iteration observer, called with each model and
/// its log-likelihood (including the initial model) before re-estimation.
pub fn baum_welch_observed(
    obs: &[usize],
    n_symbols: usize,
    config: &TrainingConfig,
    mut observer: impl FnMut(&HmmModel, f64),
) -> Result<(HmmModel, Vec<f64>)> {
    config.validate()?;
    if obs.len() < 2 {
        return Err(Error::Training(format!(
            "observation sequence of length {} is too short to train on (need >= 2)",
            obs.len()
        )));
    }
    let mut model = init_model(config.n_states, n_symbols, config.seed, config.init_jitter)?;
    model.validate_observations(obs)?;

    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0usize;
    loop {
        let fwd = forward(&model, obs).map_err(|e| match e {
            Error::DegenerateObservation { position, symbol } => Error::Numerical(format!(
                "likelihood degenerated at iteration {iterations}: symbol {symbol} at position {position} became unemittable"
            )),
            other => other,
        })?;
        let ll = fwd.log_likelihood;
        if !ll.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite log-likelihood {ll} at iteration {iterations}"
            )));
        }
        let stop = match history.last() {
            Some(&prev) => iterations >= config.min_iterations && (ll - prev).abs() < config.epsilon,
            None => false,
        };
        history.push(ll);
        observer(&model, ll);
        if stop || iterations >= config.max_iterations {
            return Ok((model, history));
        }
        let beta = backward(&model, obs, &fwd.scale)?;
        model = reestimate(&model, obs, &fwd, &beta)?;
        iterations += 1;
    }
}

/// One exact re-estimation step from the scaled forward/backward quantities.
fn reestimate(model: &HmmModel, obs: &[usize], fwd: &ForwardPass, beta: &[f64]) -> Result<HmmModel> {
    let n = model.n_states;
    let m = model.n_symbols;
    let t_len = obs.len();

    let mut pi_new = vec![0.0; n];
    let mut trans_num = vec![0.0; n * n];
    let mut trans_den = vec![0.0; n];
    let mut emit_num = vec![0.0; n * m];
    let mut emit_den = vec![0.0; n];
    let mut gamma = vec![0.0; n];

    for t in 0..t_len {
        let inv_c = 1.0 / fwd.scale[t];
        for i in 0..n {
            gamma[i] = fwd.alpha_at(t, i) * beta[t * n + i] * inv_c;
        }
        if t == 0 {
            pi_new.copy_from_slice(&gamma);
        }
        let ot = obs[t];
        for i in 0..n {
            emit_num[i * m + ot] += gamma[i];
            emit_den[i] += gamma[i];
        }
        if t + 1 < t_len {
            let ot1 = obs[t + 1];
            for i in 0..n {
                trans_den[i] += gamma[i];
                let ai = fwd.alpha_at(t, i);
                for j in 0..n {
                    trans_num[i * n + j] += ai * model.a(i, j) * model.b(j, ot1) * beta[(t + 1) * n + j];
                }
            }
        }
    }

    // Posteriors are mathematically in [0, 1]; shave off rounding excess so
    // the model invariants hold exactly.
    let snap = |p: f64| {
        if p > 1.0 && p < 1.0 + ROW_SUM_TOLERANCE {
            1.0
        } else {
            p
        }
    };
    let mut transition = vec![0.0; n * n];
    let mut emission = vec![0.0; n * m];
    for i in 0..n {
        if trans_den[i] <= 0.0 || emit_den[i] <= 0.0 {
            return Err(Error::Numerical(format!(
                "state {i} received zero posterior mass during re-estimation"
            )));
        }
        for j in 0..n {
            transition[i * n + j] = snap(trans_num[i * n + j] / trans_den[i]);
        }
        for k in 0..m {
            emission[i * m + k] = snap(emit_num[i * m + k] / emit_den[i]);
        }
    }
    for p in &mut pi_new {
        *p = snap(*p);
    }
    HmmModel::new(n, m, pi_new, transition, emission).map_err(|e| match e {
        Error::Config(msg) => Error::Numerical(format!("re-estimated model invalid: {msg}")),
        other => other,
    })
}

// ===========================================================================
// Tests
// ===========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// The 2-state, 2-symbol model used across the hand-derived cases.
    fn toy_model() -> HmmModel {
        HmmModel::new(
            2,
            2,
            vec![0.6, 0.4],
            vec![0.7, 0.3, 0.4, 0.6],
            vec![0.9, 0.1, 0.2, 0.8],
        )
        .unwrap()
    }

    // -- brute-force oracles (path enumeration, independent of the scaled
    //    implementation) ----------------------------------------------------

    fn all_paths(n_states: usize, t_len: usize) -> Vec<Vec<usize>> {
        let mut paths = vec![vec![]];
        for _ in 0..t_len {
            let mut next = Vec::with_capacity(paths.len() * n_states);
            for p in &paths {
                for s in 0..n_states {
                    let mut q = p.clone();
                    q.push(s);
                    next.push(q);
                }
            }
            paths = next;
        }
        paths
    }

    fn brute_force_likelihood(model: &HmmModel, obs: &[usize]) -> f64 {
        all_paths(model.n_states(), obs.len())
            .iter()
            .map(|p| joint_path_probability(model, p, obs).unwrap())
            .sum()
    }

    fn brute_force_gamma(model: &HmmModel, obs: &[usize]) -> Vec<Vec<f64>> {
        let total = brute_force_likelihood(model, obs);
        let mut gamma = vec![vec![0.0; model.n_states()]; obs.len()];
        for p in all_paths(model.n_states(), obs.len()) {
            let w = joint_path_probability(model, &p, obs).unwrap();
            for (t, &s) in p.iter().enumerate() {
                gamma[t][s] += w / total;
            }
        }
        gamma
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize, m: usize) -> HmmModel {
        let mut row = |len: usize| {
            let mut v: Vec<f64> = (0..len).map(|_| 0.05 + rng.random::<f64>()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|p| *p /= s);
            v
        };
        let initial = row(n);
        let transition: Vec<f64> = (0..n).flat_map(|_| row(n)).collect();
        let emission: Vec<f64> = (0..n).flat_map(|_| row(m)).collect();
        HmmModel::new(n, m, initial, transition, emission).unwrap()
    }

    // -- init_model ---------------------------------------------------------

    #[test]
    fn init_zero_jitter_is_exactly_uniform() {
        let m = init_model(2, 3, 17, 0.0).unwrap();
        assert_eq!(m.initial(), &[0.5, 0.5]);
        assert_eq!(m.transition(), &[0.5, 0.5, 0.5, 0.5]);
        for &p in m.emission() {
            assert_relative_eq!(p, 1.0 / 3.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn init_rows_sum_to_one_at_paper_scale() {
        let m = init_model(20, 426, 42, 0.01).unwrap();
        let sum_row = |row: &[f64]| row.iter().sum::<f64>();
        assert!((sum_row(m.initial()) - 1.0).abs() < 1e-12);
        for i in 0..20 {
            assert!((sum_row(&m.transition()[i * 20..(i + 1) * 20]) - 1.0).abs() < 1e-12);
            assert!((sum_row(&m.emission()[i * 426..(i + 1) * 426]) - 1.0).abs() < 1e-12);
        }
        // Jitter actually perturbed the entries.
        assert!(m.emission().iter().any(|&p| (p - 1.0 / 426.0).abs() > 1e-6));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(5, 7, 99, 0.02).unwrap();
        let b = init_model(5, 7, 99, 0.02).unwrap();
        assert_eq!(a, b);
        let c = init_model(5, 7, 100, 0.02).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_schedule_matches_stopping_protocol() {
        let config = TrainingConfig::new(20, 0);
        assert_eq!(config.min_iterations, 10);
        assert_eq!(config.epsilon, 1e-3);
        assert_eq!(config.max_iterations, 200);
        assert_eq!(config.init_jitter, 0.01);
        assert!(config.validate().is_ok());
    }

    #[test]
    fn init_rejects_bad_arguments() {
        assert!(init_model(0, 3, 1, 0.0).is_err());
        assert!(init_model(3, 0, 1, 0.0).is_err());
        assert!(init_model(3, 3, 1, 0.06).is_err());
        assert!(init_model(3, 3, 1, -0.01).is_err());
    }

    // -- joint path probability ---------------------------------------------

    #[test]
    fn joint_path_probability_hand_value() {
        let m = toy_model();
        // 0.6 * 0.9 * 0.3 * 0.8 * 0.4 * 0.9
        let p = joint_path_probability(&m, &[0, 1, 0], &[0, 1, 0]).unwrap();
        assert_relative_eq!(p, 0.046656, max_relative = 1e-12);
    }

    #[test]
    fn joint_path_probability_single_state_is_emission_product() {
        let m = HmmModel::new(1, 2, vec![1.0], vec![1.0], vec![0.3, 0.7]).unwrap();
        let obs = [0, 1, 1, 0, 1];
        let p = joint_path_probability(&m, &[0; 5], &obs).unwrap();
        assert_relative_eq!(p, 0.3 * 0.7 * 0.7 * 0.3 * 0.7, max_relative = 1e-12);
    }

    #[test]
    fn joint_path_probability_zero_transition_gives_zero() {
        let m = HmmModel::new(
            2,
            2,
            vec![1.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.5, 0.5, 0.5, 0.5],
        )
        .unwrap();
        // 0 -> 1 has probability zero.
        let p = joint_path_probability(&m, &[0, 1], &[0, 0]).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn joint_path_probability_rejects_length_mismatch() {
        let m = toy_model();
        assert!(matches!(
            joint_path_probability(&m, &[0, 1], &[0, 1, 0]),
            Err(Error::Argument(_))
        ));
    }

    // -- forward ------------------------------------------------------------

    #[test]
    fn forward_matches_enumerated_path_sum_on_toy() {
        let m = toy_model();
        let obs = [0, 1, 0];
        let fwd = forward(&m, &obs).unwrap();
        // Frozen from the eight-path enumeration below.
        assert_relative_eq!(fwd.log_likelihood.exp(), 0.10893, max_relative = 1e-9);
        assert_relative_eq!(
            fwd.log_likelihood.exp(),
            brute_force_likelihood(&m, &obs),
            max_relative = 1e-9
        );
    }

    #[test]
    fn forward_scaled_rows_sum_to_one() {
        let m = toy_model();
        let obs = [0, 1, 1, 0, 0, 1, 0];
        let fwd = forward(&m, &obs).unwrap();
        for t in 0..obs.len() {
            let s: f64 = (0..2).map(|i| fwd.alpha_at(t, i)).sum();
            assert!((s - 1.0).abs() < 1e-9, "row {t} sums to {s}");
        }
    }

    #[test]
    fn forward_single_state_iid() {
        let m = HmmModel::new(1, 2, vec![1.0], vec![1.0], vec![0.5, 0.5]).unwrap();
        let obs = [0; 10];
        let fwd = forward(&m, &obs).unwrap();
        assert_relative_eq!(fwd.log_likelihood, 10.0 * 0.5f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn forward_length_one_is_initial_marginal() {
        let m = toy_model();
        let fwd = forward(&m, &[1]).unwrap();
        // sum_i pi_i * b_i(1)
        assert_relative_eq!(
            fwd.log_likelihood.exp(),
            0.6 * 0.1 + 0.4 * 0.8,
            max_relative = 1e-12
        );
    }

    #[test]
    fn forward_rejects_out_of_range_symbol() {
        let m = toy_model();
        assert!(matches!(forward(&m, &[0, 2]), Err(Error::Encoding(_))));
        assert!(matches!(forward(&m, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn forward_reports_degenerate_observation() {
        // State 0 is the only reachable state and cannot emit symbol 1.
        let m = HmmModel::new(
            2,
            2,
            vec![1.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.5, 0.5],
        )
        .unwrap();
        match forward(&m, &[0, 1]) {
            Err(Error::DegenerateObservation { position, symbol }) => {
                assert_eq!((position, symbol), (1, 1));
            }
            other => panic!("expected degenerate-observation error, got {other:?}"),
        }
    }

    // -- backward and forward-backward consistency ---------------------------

    #[test]
    fn backward_unscaled_base_case_and_invariant() {
        // Compute unscaled alpha/beta directly on a tiny instance and check
        // sum_i alpha_t(i) beta_t(i) = P(O) for every t.
        let m = toy_model();
        let obs = [0, 1, 0, 1];
        let n = m.n_states();
        let t_len = obs.len();

        let mut alpha = vec![vec![0.0; n]; t_len];
        for i in 0..n {
            alpha[0][i] = m.pi(i) * m.b(i, obs[0]);
        }
        for t in 1..t_len {
            for j in 0..n {
                alpha[t][j] =
                    (0..n).map(|i| alpha[t - 1][i] * m.a(i, j)).sum::<f64>() * m.b(j, obs[t]);
            }
        }
        let mut beta = vec![vec![0.0; n]; t_len];
        for i in 0..n {
            beta[t_len - 1][i] = 1.0; // unscaled base case
        }
        for t in (0..t_len - 1).rev() {
            for i in 0..n {
                beta[t][i] = (0..n)
                    .map(|j| m.a(i, j) * m.b(j, obs[t + 1]) * beta[t + 1][j])
                    .sum();
            }
        }
        let p = brute_force_likelihood(&m, &obs);
        for t in 0..t_len {
            let s: f64 = (0..n).map(|i| alpha[t][i] * beta[t][i]).sum();
            assert_relative_eq!(s, p, max_relative = 1e-9);
        }

        // The scaled implementation recovers the same posteriors: gamma from
        // scaled quantities equals the unscaled ratio.
        let fwd = forward(&m, &obs).unwrap();
        let sbeta = backward(&m, &obs, &fwd.scale).unwrap();
        for t in 0..t_len {
            for i in 0..n {
                let scaled = fwd.alpha_at(t, i) * sbeta[t * n + i] / fwd.scale[t];
                let unscaled = alpha[t][i] * beta[t][i] / p;
                assert_relative_eq!(scaled, unscaled, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn backward_rejects_scale_length_mismatch() {
        let m = toy_model();
        assert!(matches!(
            backward(&m, &[0, 1, 0], &[1.0, 1.0]),
            Err(Error::Argument(_))
        ));
    }

    // -- posterior decoding --------------------------------------------------

    #[test]
    fn posterior_decode_toy_sequence() {
        let m = toy_model();
        // Frozen from brute-force gamma: posterior mass favors 0, 1, 0.
        assert_eq!(posterior_decode(&m, &[0, 1, 0]).unwrap(), vec![0, 1, 0]);
        let gamma = brute_force_gamma(&m, &[0, 1, 0]);
        for (t, g) in gamma.iter().enumerate() {
            let expect = if t == 1 { 1 } else { 0 };
            assert!(g[expect] > g[1 - expect]);
        }
    }

    #[test]
    fn posterior_decode_single_state_is_all_zero() {
        let m = HmmModel::new(1, 3, vec![1.0], vec![1.0], vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(posterior_decode(&m, &[2, 0, 1, 1]).unwrap(), vec![0; 4]);
    }

    #[test]
    fn posterior_decode_breaks_ties_toward_lowest_state() {
        // Identical rows everywhere: every gamma column is tied.
        let m = HmmModel::new(
            3,
            2,
            vec![1.0 / 3.0; 3],
            vec![1.0 / 3.0; 9],
            vec![0.5; 6],
        )
        .unwrap();
        assert_eq!(posterior_decode(&m, &[0, 1, 0]).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn posterior_decode_survives_unemittable_symbol() {
        // Without the decode-time floor this observation is degenerate.
        let m = HmmModel::new(
            2,
            2,
            vec![1.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.5, 0.5],
        )
        .unwrap();
        let path = posterior_decode(&m, &[0, 1, 0]).unwrap();
        assert_eq!(path.len(), 3);
    }

    // -- viterbi ---------------------------------------------------------------

    #[test]
    fn viterbi_toy_matches_enumeration() {
        let m = toy_model();
        let obs = [0, 1, 0];
        let (path, log_p) = viterbi(&m, &obs).unwrap();
        let best = all_paths(2, 3)
            .into_iter()
            .map(|p| {
                let w = joint_path_probability(&m, &p, &obs).unwrap();
                (p, w)
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(path, best.0);
        assert_relative_eq!(log_p, best.1.ln(), max_relative = 1e-9);
        assert_relative_eq!(
            joint_path_probability(&m, &path, &obs).unwrap(),
            0.046656,
            max_relative = 1e-12
        );
    }

    #[test]
    fn viterbi_single_state() {
        let m = HmmModel::new(1, 2, vec![1.0], vec![1.0], vec![0.25, 0.75]).unwrap();
        let obs = [1, 1, 0, 1];
        let (path, log_p) = viterbi(&m, &obs).unwrap();
        assert_eq!(path, vec![0; 4]);
        let expect: f64 = obs.iter().map(|&o| m.b(0, o).ln()).sum();
        assert_relative_eq!(log_p, expect, max_relative = 1e-12);
    }

    #[test]
    fn viterbi_deterministic_model_recovers_unique_path() {
        // 0 -> 1 -> 0 -> 1 ... with state i forced to emit symbol i.
        let m = HmmModel::new(
            2,
            2,
            vec![1.0, 0.0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let (path, log_p) = viterbi(&m, &[0, 1, 0, 1]).unwrap();
        assert_eq!(path, vec![0, 1, 0, 1]);
        assert_relative_eq!(log_p, 0.0, epsilon = 1e-12);
    }

    // -- baum-welch ------------------------------------------------------------

    #[test]
    fn baum_welch_improves_over_initial_model() {
        // Deterministic 2-state alternator output.
        let obs: Vec<usize> = (0..60).map(|t| t % 2).collect();
        let config = TrainingConfig::new(2, 7);
        let (trained, history) = baum_welch(&obs, 2, &config).unwrap();
        let initial = init_model(2, 2, config.seed, config.init_jitter).unwrap();
        let ll_init = forward(&initial, &obs).unwrap().log_likelihood;
        let ll_trained = forward(&trained, &obs).unwrap().log_likelihood;
        assert!(
            ll_trained > ll_init,
            "training did not improve: {ll_init} -> {ll_trained}"
        );
        assert_relative_eq!(ll_trained, *history.last().unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn baum_welch_history_is_monotone_and_rows_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let config = TrainingConfig {
            n_states: 3,
            min_iterations: 10,
            epsilon: 1e-3,
            max_iterations: 200,
            seed: 11,
            init_jitter: 0.01,
        };
        let mut iterations = 0;
        let (model, history) = baum_welch_observed(&obs, 4, &config, |m, _| {
            iterations += 1;
            for i in 0..m.n_states() {
                let row: f64 = (0..m.n_states()).map(|j| m.a(i, j)).sum();
                assert!((row - 1.0).abs() < 1e-9);
                let row: f64 = (0..m.n_symbols()).map(|k| m.b(i, k)).sum();
                assert!((row - 1.0).abs() < 1e-9);
            }
        })
        .unwrap();
        assert!(history.len() >= config.min_iterations);
        assert_eq!(iterations, history.len());
        for w in history.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "history decreased: {} -> {}", w[0], w[1]);
        }
        assert_eq!(model.n_symbols(), 4);
    }

    #[test]
    fn baum_welch_is_deterministic() {
        let obs: Vec<usize> = (0..80).map(|t| (t / 3) % 3).collect();
        let config = TrainingConfig::new(2, 42);
        let (a, ha) = baum_welch(&obs, 3, &config).unwrap();
        let (b, hb) = baum_welch(&obs, 3, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn baum_welch_rejects_short_sequences() {
        let config = TrainingConfig::new(2, 1);
        assert!(matches!(
            baum_welch(&[0], 2, &config),
            Err(Error::Training(_))
        ));
    }

    // -- serialization -----------------------------------------------------------

    #[test]
    fn model_json_round_trip_is_exact() {
        let obs: Vec<usize> = (0..50).map(|t| (t * t) % 3).collect();
        let (model, _) = baum_welch(&obs, 3, &TrainingConfig::new(3, 5)).unwrap();
        let json = model.to_json().unwrap();
        let back = HmmModel::from_json(&json).unwrap();
        assert_eq!(model, back);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["n_states", "n_symbols", "initial", "transition", "emission"] {
            assert!(value.get(key).is_some(), "missing key {key}");
        }
    }

    #[test]
    fn model_json_rejects_non_stochastic_input() {
        let json = r#"{"n_states":1,"n_symbols":2,"initial":[1.0],"transition":[1.0],"emission":[0.7,0.7]}"#;
        assert!(HmmModel::from_json(json).is_err());
    }

    // -- property tests -----------------------------------------------------------

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_forward_matches_brute_force(seed in 0u64..1000, n in 1usize..=3, m in 1usize..=4, t in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = random_model(&mut rng, n, m);
            let obs: Vec<usize> = (0..t).map(|_| rng.random_range(0..m)).collect();
            let fwd = forward(&model, &obs).unwrap();
            let brute = brute_force_likelihood(&model, &obs);
            prop_assert!((fwd.log_likelihood.exp() - brute).abs() <= 1e-9 * brute.abs());
            for step in 0..t {
                let s: f64 = (0..n).map(|i| fwd.alpha_at(step, i)).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn prop_posterior_decode_matches_brute_force(seed in 0u64..500, n in 1usize..=3, m in 1usize..=3, t in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
            let model = random_model(&mut rng, n, m);
            let obs: Vec<usize> = (0..t).map(|_| rng.random_range(0..m)).collect();
            let decoded = posterior_decode(&model, &obs).unwrap();
            let gamma = brute_force_gamma(&model, &obs);
            for (step, g) in gamma.iter().enumerate() {
                let mut best = 0;
                for i in 1..n {
                    if g[i] > g[best] {
                        best = i;
                    }
                }
                prop_assert_eq!(decoded[step], best);
            }
        }

        #[test]
        fn prop_em_history_non_decreasing(seed in 0u64..200, n in 1usize..=3, t in 8usize..=40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(97).wrapping_add(13));
            let m = 3;
            let obs: Vec<usize> = (0..t).map(|_| rng.random_range(0..m)).collect();
            let config = TrainingConfig {
                n_states: n,
                min_iterations: 3,
                epsilon: 1e-4,
                max_iterations: 25,
                seed,
                init_jitter: 0.01,
            };
            let (_, history) = baum_welch(&obs, m, &config).unwrap();
            for w in history.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-10);
            }
        }
    }
}
