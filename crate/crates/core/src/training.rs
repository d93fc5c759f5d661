//! Training objective and optimizer.
//!
//! The loss of one sequence conditions on its first event: events `1..n` are
//! scored under the regime of the event before them and the compensator runs
//! over `[t_0, T]`. The full objective adds `gamma * KL(E_hat || A_hat)` where
//! `A = H Omega H^T` and both matrices are mapped to distributions by
//! `softplus` (for `A` only), `+ 1e-8` and normalization.
//!
//! The objective minimized is `NLL + gamma * KL`. Read literally, the
//! published objective negates the NLL term, which would maximize it.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventstore::{estimate_connection_matrix, Dataset, EventSequence};
use crate::model::{Ablation, Dropout, GrppModel, ModelConfig, ModelError, Regime, RegimeValues};
use crate::numerics::{self, NumericsError, ParamVector, ScalarObjective, Tape, Var};

/// Additive smoothing applied to both arguments of the KL regularizer.
pub const KL_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sequence {sequence}: non-finite loss on interval {interval} [{start}, {end}]")]
    NonFiniteInterval {
        sequence: usize,
        interval: usize,
        start: f64,
        end: f64,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{0} has no sequence with at least two events")]
    NothingToScore(&'static str),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::Numerics(e))
    }
}

/// How the KL regularizer turns matrices into distributions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlNormalization {
    /// One distribution over all `K^2` entries.
    #[default]
    Global,
    /// One distribution per row, KL averaged over rows.
    Row,
}

impl FromStr for KlNormalization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Self::Global),
            "row" => Ok(Self::Row),
            _ => Err(format!("expected `global` or `row`, got `{s}`")),
        }
    }
}

impl KlNormalization {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Row => "row",
        }
    }
}

/// Compensator approximation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Integration {
    /// `samples` uniform draws per inter-event interval.
    MonteCarlo { samples: usize, seed: u64 },
    /// Trapezoid rule with `points` nodes per interval (endpoints included).
    Trapezoid { points: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub gamma: f64,
    pub integral_samples: usize,
    pub eval_points: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub disable_graph_propagation: bool,
    pub disable_history_attention: bool,
    pub patience: usize,
    pub kl_normalization: KlNormalization,
    pub m: usize,
    pub d: usize,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            learning_rate: 0.001,
            dropout: 0.2,
            gamma: 0.01,
            integral_samples: 5,
            eval_points: 50,
            clip_norm: 5.0,
            seed: 0,
            disable_graph_propagation: false,
            disable_history_attention: false,
            patience: 10,
            kl_normalization: KlNormalization::Global,
            m: 128,
            d: 128,
            tau: 0.0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| TrainError::Config {
        key: key.to_string(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

impl TrainConfig {
    pub const KEYS: [&'static str; 16] = [
        "epochs",
        "batch_size",
        "learning_rate",
        "dropout",
        "gamma",
        "integral_samples",
        "eval_points",
        "clip_norm",
        "seed",
        "disable_graph_propagation",
        "disable_history_attention",
        "patience",
        "kl_normalization",
        "m",
        "d",
        "tau",
    ];

    /// Overrides one field. Unknown keys and unparsable values are errors
    /// naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let value = value.trim();
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "integral_samples" => self.integral_samples = parse_value(key, value)?,
            "eval_points" => self.eval_points = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "disable_graph_propagation" => self.disable_graph_propagation = parse_value(key, value)?,
            "disable_history_attention" => self.disable_history_attention = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "kl_normalization" => self.kl_normalization = parse_value(key, value)?,
            "m" => self.m = parse_value(key, value)?,
            "d" => self.d = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            _ => {
                return Err(TrainError::Config {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Applies a flat `key = value` text on top of the current values.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| TrainError::Config {
                key: line.to_string(),
                message: format!("line {} is not `key = value`", n + 1),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key: &str, message: &str| {
            Err(TrainError::Config {
                key: key.to_string(),
                message: message.to_string(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be >= 0");
        }
        if self.integral_samples == 0 {
            return bad("integral_samples", "must be >= 1");
        }
        if self.eval_points < 2 {
            return bad("eval_points", "must be >= 2");
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm", "must be positive");
        }
        if self.patience == 0 {
            return bad("patience", "must be >= 1");
        }
        if self.m == 0 {
            return bad("m", "must be >= 1");
        }
        if self.d == 0 {
            return bad("d", "must be >= 1");
        }
        if !self.tau.is_finite() {
            return bad("tau", "must be finite");
        }
        Ok(())
    }

    /// Flat `key = value` text covering every field, readable by
    /// [`TrainConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "integral_samples = {}", self.integral_samples);
        let _ = writeln!(s, "eval_points = {}", self.eval_points);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "disable_graph_propagation = {}", self.disable_graph_propagation);
        let _ = writeln!(s, "disable_history_attention = {}", self.disable_history_attention);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "kl_normalization = {}", self.kl_normalization.as_str());
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "tau = {}", self.tau);
        s
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            disable_graph_propagation: self.disable_graph_propagation,
            disable_history_attention: self.disable_history_attention,
        }
    }

    /// The graph regularizer is switched off together with graph propagation.
    pub fn effective_gamma(&self) -> f64 {
        if self.disable_graph_propagation {
            0.0
        } else {
            self.gamma
        }
    }

    pub fn model_config(&self, k: usize) -> ModelConfig {
        ModelConfig {
            k,
            m: self.m,
            d: self.d,
            tau: self.tau,
            ablation: self.ablation(),
        }
    }
}

/// Mixes a base seed with indices into an independent stream seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fresh model for `train`: connection matrix from the training split, head
/// bias at the empirical per-node rates, time scale at the mean gap.
pub fn initial_model(train: &Dataset, cfg: &TrainConfig) -> Result<GrppModel, TrainError> {
    cfg.validate()?;
    let e = estimate_connection_matrix(train);
    let mut model = GrppModel::init(cfg.model_config(train.k), e, cfg.seed)?;
    let exposure: f64 = train
        .sequences
        .iter()
        .filter_map(|s| s.events.first().map(|f| s.horizon - f.t))
        .sum();
    if exposure > 0.0 {
        let rates: Vec<f64> = train
            .node_counts()
            .iter()
            .map(|&c| c as f64 / exposure)
            .collect();
        model.set_base_rates(&rates);
    }
    if let Some(gap) = train.mean_inter_event_time() {
        model.time_scale = gap;
    }
    Ok(model)
}

fn total_intensity_on_tape(
    model: &GrppModel,
    tape: &mut Tape<'_>,
    regime: &Regime,
    t: f64,
) -> Result<Var, ModelError> {
    let latent = model.latent_intensity(tape, regime, t)?;
    let lam = model.event_intensity(tape, latent);
    Ok(tape.sum(lam))
}

/// Sequence NLL recorded on `tape`. `sequence` only labels errors.
pub fn sequence_nll_on_tape(
    model: &GrppModel,
    tape: &mut Tape<'_>,
    seq: &EventSequence,
    integration: Integration,
    dropout: Option<Dropout>,
    sequence: usize,
) -> Result<Var, TrainError> {
    if seq.len() < 2 {
        return Err(TrainError::NothingToScore("sequence"));
    }
    let trace = model.forward(tape, seq, dropout)?;
    let n = seq.len();
    let mut rng = match integration {
        Integration::MonteCarlo { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Integration::Trapezoid { .. } => None,
    };
    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..n {
        let regime = &trace.regimes[i];
        let a = seq.events[i].t;
        let b = if i + 1 < n { seq.events[i + 1].t } else { seq.horizon };
        let mut parts = Vec::new();
        if i + 1 < n {
            let latent = model.latent_intensity(tape, regime, b)?;
            let lam = model.event_intensity(tape, latent);
            let own = tape.slice(lam, seq.events[i + 1].node, 1);
            let log = tape.log(own);
            parts.push(tape.scale(log, -1.0));
        }
        let len = b - a;
        if len > 0.0 {
            match (integration, rng.as_mut()) {
                (Integration::MonteCarlo { samples, .. }, Some(r)) => {
                    let w = len / samples as f64;
                    for _ in 0..samples {
                        let t = a + len * r.random::<f64>();
                        let lam = total_intensity_on_tape(model, tape, regime, t)?;
                        parts.push(tape.scale(lam, w));
                    }
                }
                (Integration::Trapezoid { points }, _) => {
                    let points = points.max(2);
                    let h = len / (points - 1) as f64;
                    for p in 0..points {
                        let t = if p + 1 == points { b } else { a + h * p as f64 };
                        let w = if p == 0 || p + 1 == points { 0.5 * h } else { h };
                        let lam = total_intensity_on_tape(model, tape, regime, t)?;
                        parts.push(tape.scale(lam, w));
                    }
                }
                _ => unreachable!("rng exists exactly for Monte Carlo"),
            }
        }
        if parts.is_empty() {
            continue;
        }
        let interval = tape.concat(&parts);
        let interval = tape.sum(interval);
        if !tape.scalar(interval).is_finite() {
            return Err(TrainError::NonFiniteInterval {
                sequence,
                interval: i,
                start: a,
                end: b,
            });
        }
        terms.push(interval);
    }
    let all = tape.concat(&terms);
    Ok(tape.sum(all))
}

/// Trapezoid compensator of one regime over `[a, b]`.
fn trapezoid_compensator(model: &GrppModel, regime: &RegimeValues, a: f64, b: f64, points: usize) -> f64 {
    let len = b - a;
    if len <= 0.0 {
        return 0.0;
    }
    let ri = model.regime_intensity(regime);
    let mut lam = vec![0.0; model.k()];
    let points = points.max(2);
    let h = len / (points - 1) as f64;
    let mut acc = 0.0;
    for p in 0..points {
        let t = if p + 1 == points { b } else { a + h * p as f64 };
        ri.intensities(t, &mut lam);
        let w = if p == 0 || p + 1 == points { 0.5 } else { 1.0 };
        acc += w * lam.iter().sum::<f64>();
    }
    acc * h
}

/// Gradient-free sequence NLL with a trapezoid compensator.
pub fn sequence_nll(model: &GrppModel, seq: &EventSequence, points: usize) -> Result<f64, TrainError> {
    if seq.len() < 2 {
        return Err(TrainError::NothingToScore("sequence"));
    }
    let regimes = model.regimes(seq)?;
    let n = seq.len();
    let mut lam = vec![0.0; model.k()];
    let mut total = 0.0;
    for i in 0..n {
        let a = seq.events[i].t;
        let b = if i + 1 < n { seq.events[i + 1].t } else { seq.horizon };
        let mut interval = trapezoid_compensator(model, &regimes[i], a, b, points);
        if i + 1 < n {
            model.regime_intensity(&regimes[i]).intensities(b, &mut lam);
            interval -= lam[seq.events[i + 1].node].ln();
        }
        if !interval.is_finite() {
            return Err(TrainError::NonFiniteInterval {
                sequence: 0,
                interval: i,
                start: a,
                end: b,
            });
        }
        total += interval;
    }
    Ok(total)
}

/// Monte Carlo compensator over `[t_0, T]` with its standard error.
pub fn monte_carlo_compensator(
    model: &GrppModel,
    seq: &EventSequence,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    let regimes = model.regimes(seq)?;
    let n = seq.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lam = vec![0.0; model.k()];
    let (mut est, mut var) = (0.0, 0.0);
    for i in 0..n {
        let a = seq.events[i].t;
        let b = if i + 1 < n { seq.events[i + 1].t } else { seq.horizon };
        let len = b - a;
        if len <= 0.0 {
            continue;
        }
        let ri = model.regime_intensity(&regimes[i]);
        let draws: Vec<f64> = (0..samples)
            .map(|_| {
                ri.intensities(a + len * rng.random::<f64>(), &mut lam);
                len * lam.iter().sum::<f64>()
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / samples as f64;
        let s2 = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples as f64 - 1.0).max(1.0);
        est += mean;
        var += s2 / samples as f64;
    }
    Ok((est, var.sqrt()))
}

fn smoothed(e: &[f64]) -> Vec<f64> {
    e.iter().map(|x| x.max(0.0) + KL_EPS).collect()
}

/// `KL(E_hat || A_hat)` for row-major `K x K` matrices.
pub fn graph_reg(a: &[f64], e: &[f64], k: usize, norm: KlNormalization) -> f64 {
    let a: Vec<f64> = a.iter().map(|&x| numerics::softplus(x) + KL_EPS).collect();
    let e = smoothed(e);
    let kl = |p: &[f64], q: &[f64]| {
        let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
        p.iter()
            .zip(q)
            .map(|(x, y)| {
                let (x, y) = (x / sp, y / sq);
                x * (x / y).ln()
            })
            .sum::<f64>()
    };
    let v = match norm {
        KlNormalization::Global => kl(&e, &a),
        KlNormalization::Row => {
            (0..k)
                .map(|i| kl(&e[i * k..(i + 1) * k], &a[i * k..(i + 1) * k]))
                .sum::<f64>()
                / k as f64
        }
    };
    // nonnegative in exact arithmetic; clip rounding noise
    v.max(0.0)
}

/// `graph_reg` on the tape for `a` holding `A` column-major. `e` is row-major.
pub fn graph_reg_on_tape(tape: &mut Tape<'_>, a: Var, e: &[f64], k: usize, norm: KlNormalization) -> Var {
    let e = smoothed(e);
    // p_hat column-major, plus the constant sum p log p
    let mut p = vec![0.0; k * k];
    let mut constant = 0.0;
    match norm {
        KlNormalization::Global => {
            let s: f64 = e.iter().sum();
            for i in 0..k {
                for j in 0..k {
                    p[j * k + i] = e[i * k + j] / s;
                }
            }
        }
        KlNormalization::Row => {
            for i in 0..k {
                let s: f64 = e[i * k..(i + 1) * k].iter().sum();
                for j in 0..k {
                    p[j * k + i] = e[i * k + j] / s;
                }
            }
        }
    }
    for &x in &p {
        constant += x * x.ln();
    }
    let sp = tape.softplus(a);
    let eps = tape.constant(vec![KL_EPS]);
    let q = tape.add(sp, eps);
    let log_q = tape.log(q);
    let pc = tape.constant(p);
    let cross = tape.dot(pc, log_q);
    let log_norm = match norm {
        KlNormalization::Global => {
            let s = tape.sum(q);
            tape.log(s)
        }
        KlNormalization::Row => {
            let mut rows = tape.slice(q, 0, k);
            for j in 1..k {
                let col = tape.slice(q, j * k, k);
                rows = tape.add(rows, col);
            }
            let logs = tape.log(rows);
            tape.sum(logs)
        }
    };
    let c = tape.constant(vec![constant]);
    let neg = tape.scale(cross, -1.0);
    let kl = tape.add(c, neg);
    let kl = tape.add(kl, log_norm);
    match norm {
        KlNormalization::Global => kl,
        KlNormalization::Row => tape.scale(kl, 1.0 / k as f64),
    }
}

/// Regularizer of the model's current infectivity against its connection matrix.
pub fn model_graph_reg(model: &GrppModel, norm: KlNormalization) -> f64 {
    graph_reg(&model.infectivity(), &model.connection.entries, model.k(), norm)
}

/// `mean_s NLL(s) + gamma * graph_reg` recorded on `tape`.
pub fn total_loss_on_tape(
    model: &GrppModel,
    tape: &mut Tape<'_>,
    batch: &[EventSequence],
    gamma: f64,
    integration: Integration,
    norm: KlNormalization,
) -> Result<Var, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::NothingToScore("batch"));
    }
    let mut nlls = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        nlls.push(sequence_nll_on_tape(model, tape, s, integration, None, i)?);
    }
    let all = tape.concat(&nlls);
    let sum = tape.sum(all);
    let mean = tape.scale(sum, 1.0 / batch.len() as f64);
    if gamma == 0.0 {
        return Ok(mean);
    }
    let a = model.infectivity_on_tape(tape);
    let reg = graph_reg_on_tape(tape, a, &model.connection.entries, model.k(), norm);
    let reg = tape.scale(reg, gamma);
    Ok(tape.add(mean, reg))
}

/// Gradient-free total loss with a trapezoid compensator.
pub fn total_loss(
    model: &GrppModel,
    batch: &[EventSequence],
    gamma: f64,
    points: usize,
    norm: KlNormalization,
) -> Result<f64, TrainError> {
    let nll = mean_nll(model, batch, points)?;
    if gamma == 0.0 {
        return Ok(nll);
    }
    Ok(nll + gamma * model_graph_reg(model, norm))
}

/// Mean trapezoid NLL over `seqs`, evaluated in parallel and summed in order.
pub fn mean_nll(model: &GrppModel, seqs: &[EventSequence], points: usize) -> Result<f64, TrainError> {
    if seqs.is_empty() {
        return Err(TrainError::NothingToScore("batch"));
    }
    let values: Vec<f64> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            sequence_nll(model, s, points).map_err(|e| match e {
                TrainError::NonFiniteInterval {
                    interval, start, end, ..
                } => TrainError::NonFiniteInterval {
                    sequence: i,
                    interval,
                    start,
                    end,
                },
                other => other,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(values.iter().sum::<f64>() / seqs.len() as f64)
}

/// [`total_loss_on_tape`] as a function of the parameter vector, for
/// gradient checks.
pub struct TotalLossObjective<'a> {
    pub model: &'a GrppModel,
    pub batch: &'a [EventSequence],
    pub gamma: f64,
    pub integration: Integration,
    pub norm: KlNormalization,
}

impl TotalLossObjective<'_> {
    fn record<'p>(&self, tape: &mut Tape<'p>) -> Result<Var, NumericsError> {
        total_loss_on_tape(self.model, tape, self.batch, self.gamma, self.integration, self.norm)
            .map_err(|e| NumericsError::Objective(e.to_string()))
    }
}

impl ScalarObjective for TotalLossObjective<'_> {
    fn value(&self, x: &ParamVector) -> Result<f64, NumericsError> {
        let mut tape = Tape::new(x);
        let out = self.record(&mut tape)?;
        tape.check()?;
        Ok(tape.scalar(out))
    }

    fn value_and_gradient(&self, x: &ParamVector) -> Result<numerics::GradientRecord, NumericsError> {
        numerics::evaluate_with_gradients(|t: &mut Tape<'_>| self.record(t), x)
    }
}

/// One row of the training report. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_nll: f64,
    pub valid_graph_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub ablation: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_nll: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    /// CSV with columns `epoch,train_loss,valid_nll,valid_graph_loss,seconds`.
    /// With `timings` off the seconds column is written as 0 so runs can be
    /// compared byte for byte.
    pub fn to_csv(&self, timings: bool) -> String {
        let mut s = String::from("epoch,train_loss,valid_nll,valid_graph_loss,seconds\n");
        for r in &self.epochs {
            let secs = if timings { r.seconds } else { 0.0 };
            let _ = writeln!(
                s,
                "{},{:.17e},{:.17e},{:.17e},{:.3}",
                r.epoch, r.train_loss, r.valid_nll, r.valid_graph_loss, secs
            );
        }
        s
    }
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation NLL.
    pub model: GrppModel,
    pub report: TrainReport,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Rescales `g` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

fn batch_gradient(
    model: &GrppModel,
    seqs: &[&EventSequence],
    ids: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    let per_seq: Vec<(f64, Vec<f64>)> = seqs
        .par_iter()
        .zip(ids.par_iter())
        .map(|(s, &id)| {
            let mut tape = Tape::new(&model.params);
            let integration = Integration::MonteCarlo {
                samples: cfg.integral_samples,
                seed: derive_seed(cfg.seed, epoch as u64, 2 * id as u64),
            };
            let dropout = (cfg.dropout > 0.0).then(|| Dropout {
                rate: cfg.dropout,
                seed: derive_seed(cfg.seed, epoch as u64, 2 * id as u64 + 1),
            });
            let out = sequence_nll_on_tape(model, &mut tape, s, integration, dropout, id)?;
            tape.check()?;
            Ok((tape.scalar(out), tape.backward(out)))
        })
        .collect::<Result<_, TrainError>>()?;
    let n = seqs.len() as f64;
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    for (l, g) in &per_seq {
        loss += l / n;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / n;
        }
    }
    let gamma = cfg.effective_gamma();
    if gamma > 0.0 {
        let mut tape = Tape::new(&model.params);
        let a = model.infectivity_on_tape(&mut tape);
        let reg = graph_reg_on_tape(&mut tape, a, &model.connection.entries, model.k(), cfg.kl_normalization);
        tape.check()?;
        loss += gamma * tape.scalar(reg);
        for (a, b) in grad.iter_mut().zip(tape.backward(reg)) {
            *a += gamma * b;
        }
    }
    Ok((loss, grad))
}

/// Adam on mini-batches of the training sequences with early stopping on
/// validation NLL. Sequences with fewer than two events are skipped. The
/// result is bit-reproducible for a fixed seed regardless of thread count:
/// per-sequence gradients are reduced in batch order.
pub fn train(
    model: GrppModel,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_seqs: Vec<&EventSequence> = train.sequences.iter().filter(|s| s.len() >= 2).collect();
    let valid_seqs: Vec<EventSequence> = valid.sequences.iter().filter(|s| s.len() >= 2).cloned().collect();
    if train_seqs.is_empty() {
        return Err(TrainError::NothingToScore("training set"));
    }
    if valid_seqs.is_empty() {
        return Err(TrainError::NothingToScore("validation set"));
    }
    let mut model = model;
    let gamma = cfg.effective_gamma();
    let norm = cfg.kl_normalization;
    let start = Instant::now();
    let owned_train: Vec<EventSequence> = train_seqs.iter().map(|s| (*s).clone()).collect();
    let row0 = EpochRecord {
        epoch: 0,
        train_loss: total_loss(&model, &owned_train, gamma, cfg.eval_points, norm)?,
        valid_nll: mean_nll(&model, &valid_seqs, cfg.eval_points)?,
        valid_graph_loss: model_graph_reg(&model, norm),
        seconds: start.elapsed().as_secs_f64(),
    };
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_valid = row0.valid_nll;
    let mut records = vec![row0];
    let mut adam = Adam::new(model.params.len(), cfg.learning_rate);
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, ids) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<&EventSequence> = ids.iter().map(|&i| train_seqs[i]).collect();
            let (loss, mut grad) = batch_gradient(&model, &seqs, ids, cfg, epoch).map_err(|e| match e {
                TrainError::Model(ModelError::Numerics(_)) => TrainError::NonFiniteLoss { epoch, batch: b },
                other => other,
            })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            clip_global_norm(&mut grad, cfg.clip_norm);
            adam.step(model.params.values_mut(), &grad);
            epoch_loss += loss * ids.len() as f64;
        }
        let valid_nll = mean_nll(&model, &valid_seqs, cfg.eval_points)?;
        records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train_seqs.len() as f64,
            valid_nll,
            valid_graph_loss: model_graph_reg(&model, norm),
            seconds: start.elapsed().as_secs_f64(),
        });
        if valid_nll < best_valid {
            best_valid = valid_nll;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        report: TrainReport {
            ablation: cfg.ablation().tag().to_string(),
            epochs: records,
            best_epoch,
            best_valid_nll: best_valid,
            stopped_early,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventstore::{ConnectionMatrix, Event};
    use crate::numerics::finite_difference_check;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Exp};

    fn seq(events: &[(f64, usize)], horizon: f64) -> EventSequence {
        EventSequence::new(events.iter().map(|&(t, n)| Event::new(t, n)).collect(), horizon)
    }

    fn small_model(k: usize, d: usize, seed: u64, gp: bool) -> GrppModel {
        let mut e = ConnectionMatrix::zeros(k);
        for i in 0..k {
            e.entries[i * k + (i + 1) % k] = 1.0;
            e.entries[i * k + i] = 0.5;
        }
        let cfg = ModelConfig {
            k,
            m: d,
            d,
            tau: 0.1,
            ablation: Ablation {
                disable_graph_propagation: !gp,
                disable_history_attention: false,
            },
        };
        GrppModel::init(cfg, e, seed).unwrap()
    }

    fn random_sequence(k: usize, n: usize, seed: u64) -> EventSequence {
        random_sequence_at_rate(k, n, seed, 1.0)
    }

    fn random_sequence_at_rate(k: usize, n: usize, seed: u64, rate: f64) -> EventSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gap = Exp::new(rate).unwrap();
        let mut t = 0.0;
        let mut ev = Vec::new();
        for _ in 0..n {
            t += (0.05 + gap.sample(&mut rng)) / rate.max(1.0);
            ev.push(Event::new(t, rng.random_range(0..k)));
        }
        EventSequence::new(ev, t + 1.0 / rate)
    }

    fn poisson_dataset(rates: &[f64], n: usize, horizon: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: f64 = rates.iter().sum();
        let gap = Exp::new(total).unwrap();
        let seqs = (0..n)
            .map(|_| {
                let mut t = gap.sample(&mut rng);
                let mut ev = Vec::new();
                while t < horizon {
                    let mut u = rng.random::<f64>() * total;
                    let mut node = 0;
                    while u > rates[node] && node + 1 < rates.len() {
                        u -= rates[node];
                        node += 1;
                    }
                    ev.push(Event::new(t, node));
                    t += gap.sample(&mut rng);
                }
                EventSequence::new(ev, horizon)
            })
            .collect();
        Dataset::new(rates.len(), seqs).unwrap()
    }

    #[test]
    fn rigged_constant_intensity_matches_closed_form() {
        let mut m = small_model(1, 4, 1, true);
        let c = 0.7;
        m.rig_constant_intensity(&[c]);
        let s = seq(&[(0.5, 0), (1.2, 0), (3.0, 0), (3.1, 0)], 6.0);
        let expected = -3.0 * c.ln() + c * (6.0 - 0.5);
        let plain = sequence_nll(&m, &s, 50).unwrap();
        assert!((plain - expected).abs() < 1e-9, "{plain} vs {expected}");
        let mut tape = Tape::new(&m.params);
        let v = sequence_nll_on_tape(&m, &mut tape, &s, Integration::Trapezoid { points: 7 }, None, 0).unwrap();
        assert!((tape.scalar(v) - expected).abs() < 1e-9);
        let mut tape = Tape::new(&m.params);
        let mc = Integration::MonteCarlo { samples: 3, seed: 4 };
        let v = sequence_nll_on_tape(&m, &mut tape, &s, mc, None, 0).unwrap();
        assert!((tape.scalar(v) - expected).abs() < 1e-9);
    }

    #[test]
    fn tape_and_plain_nll_agree() {
        let m = small_model(3, 6, 9, true);
        let s = random_sequence(3, 7, 2);
        let plain = sequence_nll(&m, &s, 30).unwrap();
        let mut tape = Tape::new(&m.params);
        let v = sequence_nll_on_tape(&m, &mut tape, &s, Integration::Trapezoid { points: 30 }, None, 0).unwrap();
        assert!((tape.scalar(v) - plain).abs() < 1e-10 * plain.abs().max(1.0));
    }

    #[test]
    fn trapezoid_self_consistency() {
        let m = small_model(3, 8, 5, true);
        let s = random_sequence(3, 6, 8);
        let coarse = sequence_nll(&m, &s, 10_000).unwrap();
        let fine = sequence_nll(&m, &s, 100_000).unwrap();
        assert!((coarse - fine).abs() / fine.abs() < 1e-4);
    }

    #[test]
    fn monte_carlo_within_three_standard_errors() {
        let m = small_model(3, 8, 5, true);
        let s = random_sequence(3, 6, 8);
        let (mc, se) = monte_carlo_compensator(&m, &s, 1000, 17).unwrap();
        let mut rigged = m.clone();
        // compensator alone: remove the event term by comparing to the trapezoid NLL
        let regimes = rigged.regimes(&s).unwrap();
        let mut trap = 0.0;
        for i in 0..s.len() {
            let b = if i + 1 < s.len() { s.events[i + 1].t } else { s.horizon };
            trap += trapezoid_compensator(&rigged, &regimes[i], s.events[i].t, b, 2000);
        }
        assert!((mc - trap).abs() < 3.0 * se, "mc {mc} trap {trap} se {se}");
        rigged.rig_constant_intensity(&[0.1, 0.2, 0.3]);
        let (c, se0) = monte_carlo_compensator(&rigged, &s, 10, 1).unwrap();
        assert!((c - 0.6 * (s.horizon - s.events[0].t)).abs() < 1e-9);
        assert!(se0 < 1e-9);
    }

    #[test]
    fn sequences_need_two_events() {
        let m = small_model(2, 4, 1, true);
        let s = seq(&[(1.0, 0)], 3.0);
        assert!(matches!(sequence_nll(&m, &s, 10), Err(TrainError::NothingToScore(_))));
    }

    #[test]
    fn non_finite_loss_names_interval() {
        let mut m = small_model(2, 4, 1, true);
        m.rig_constant_intensity(&[1.0, 1.0]);
        let id = m.param_id("head_bias").unwrap();
        m.params.slice_mut(id)[1] = -1e6;
        let s = seq(&[(0.0, 0), (1.0, 0), (2.0, 1)], 3.0);
        match sequence_nll(&m, &s, 10) {
            Err(TrainError::NonFiniteInterval { interval, start, end, .. }) => {
                assert_eq!(interval, 1);
                assert_eq!((start, end), (1.0, 2.0));
            }
            other => panic!("{other:?}"),
        }
    }

    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter().zip(q).map(|(a, b)| a / sp * ((a / sp) / (b / sq)).ln()).sum()
    }

    #[test]
    fn graph_reg_uniform_against_point_mass() {
        let k = 3;
        let e = vec![1.0; k * k];
        let mut a = vec![-40.0; k * k];
        a[4] = 5.0;
        let q: Vec<f64> = a.iter().map(|&x| numerics::softplus(x) + KL_EPS).collect();
        let p: Vec<f64> = e.iter().map(|x| x + KL_EPS).collect();
        let expected = kl_oracle(&p, &q);
        let got = graph_reg(&a, &e, k, KlNormalization::Global);
        assert!((got - expected).abs() < 1e-9 * expected);
        // uniform p: KL = -log(K^2) - mean log q_hat
        let sq: f64 = q.iter().sum();
        let direct = -((k * k) as f64).ln() - q.iter().map(|x| (x / sq).ln()).sum::<f64>() / (k * k) as f64;
        assert!((got - direct).abs() < 1e-9 * direct);
    }

    #[test]
    fn graph_reg_tape_matches_plain_and_gradient() {
        let k = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..k * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e: Vec<f64> = (0..k * k).map(|_| rng.random_range(0.0..1.0)).collect();
        for norm in [KlNormalization::Global, KlNormalization::Row] {
            let mut p = ParamVector::new();
            let id = p.register("a", 1, k * k).unwrap();
            // tape expects column-major A
            for i in 0..k {
                for j in 0..k {
                    p.slice_mut(id)[j * k + i] = a[i * k + j];
                }
            }
            let f = numerics::TapeObjective(|t: &mut Tape<'_>| {
                let x = t.param(id);
                Ok(graph_reg_on_tape(t, x, &e, k, norm))
            });
            let v = f.value(&p).unwrap();
            assert!((v - graph_reg(&a, &e, k, norm)).abs() < 1e-12, "{norm:?}");
            assert!(finite_difference_check(&f, &p, 1e-6).unwrap() < 1e-6);
        }
    }

    #[test]
    fn model_graph_reg_tape_matches_plain() {
        let m = small_model(4, 6, 2, true);
        for norm in [KlNormalization::Global, KlNormalization::Row] {
            let mut tape = Tape::new(&m.params);
            let a = m.infectivity_on_tape(&mut tape);
            let v = graph_reg_on_tape(&mut tape, a, &m.connection.entries, 4, norm);
            assert!((tape.scalar(v) - model_graph_reg(&m, norm)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn graph_reg_identity_after_transform(x in prop::collection::vec(-5.0f64..5.0, 9)) {
            let e: Vec<f64> = x.iter().map(|&v| numerics::softplus(v)).collect();
            prop_assert!(graph_reg(&x, &e, 3, KlNormalization::Global) < 1e-9);
            prop_assert!(graph_reg(&x, &e, 3, KlNormalization::Row) < 1e-9);
        }

        #[test]
        fn graph_reg_nonnegative(
            a in prop::collection::vec(-10.0f64..10.0, 16),
            e in prop::collection::vec(0.0f64..3.0, 16),
        ) {
            prop_assert!(graph_reg(&a, &e, 4, KlNormalization::Global) >= 0.0);
            prop_assert!(graph_reg(&a, &e, 4, KlNormalization::Row) >= 0.0);
        }
    }

    fn batch() -> Vec<EventSequence> {
        vec![random_sequence(4, 6, 11), random_sequence(4, 6, 12)]
    }

    #[test]
    fn total_loss_gamma_zero_is_mean_nll() {
        let m = small_model(4, 8, 3, true);
        let b = batch();
        let mean = mean_nll(&m, &b, 50).unwrap();
        assert_eq!(total_loss(&m, &b, 0.0, 50, KlNormalization::Global).unwrap(), mean);
        let reg = model_graph_reg(&m, KlNormalization::Global);
        let with = total_loss(&m, &b, 0.01, 50, KlNormalization::Global).unwrap();
        assert!((with - (mean + 0.01 * reg)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_ignores_gamma_when_graph_matches() {
        let mut m = small_model(4, 8, 3, true);
        let a = m.infectivity();
        m.connection.entries = a.iter().map(|&x| numerics::softplus(x)).collect();
        let b = batch();
        let l0 = total_loss(&m, &b, 0.0, 20, KlNormalization::Global).unwrap();
        let l1 = total_loss(&m, &b, 0.5, 20, KlNormalization::Global).unwrap();
        assert!((l0 - l1).abs() < 1e-9);
    }

    #[test]
    fn total_loss_gradient_check() {
        for seed in 0..3u64 {
            let b = vec![
                random_sequence_at_rate(4, 6, 11 + 7 * seed, 4.0),
                random_sequence_at_rate(4, 6, 12 + 7 * seed, 4.0),
            ];
            for gp in [true, false] {
                let cfg = TrainConfig {
                    m: 8,
                    d: 8,
                    seed: 21 + seed,
                    disable_graph_propagation: !gp,
                    ..TrainConfig::default()
                };
                let m = initial_model(&Dataset::new(4, b.clone()).unwrap(), &cfg).unwrap();
                let f = TotalLossObjective {
                    model: &m,
                    batch: &b,
                    gamma: 0.01,
                    integration: Integration::Trapezoid { points: 20 },
                    norm: KlNormalization::Global,
                };
                // woGP drives the cell harder, so its curvature needs a smaller
                // step than the tiny attention gradients tolerate at 1e-4
                let (step, tol) = if gp { (3e-3, 1e-4) } else { (1e-3, 1e-3) };
                let err = finite_difference_check(&f, &m.params, step).unwrap();
                assert!(err < tol, "seed={seed} gp={gp} err={err}");
                let tape_value = f.value(&m.params).unwrap();
                let plain = total_loss(&m, &b, 0.01, 20, KlNormalization::Global).unwrap();
                assert!((tape_value - plain).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn config_defaults_and_overrides() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.learning_rate, c.dropout, c.gamma), (256, 0.001, 0.2, 0.01));
        assert_eq!((c.m, c.d, c.patience, c.integral_samples), (128, 128, 10, 5));
        let mut c2 = c.clone();
        c2.apply_text("# comment\n\nepochs = 3\nkl_normalization=row\n disable_history_attention = true \n")
            .unwrap();
        assert_eq!(c2.epochs, 3);
        assert_eq!(c2.kl_normalization, KlNormalization::Row);
        assert!(c2.disable_history_attention);
        let mut back = TrainConfig::default();
        back.apply_text(&c2.to_text()).unwrap();
        assert_eq!(back, c2);
        match c2.clone().set("learning_rte", "1") {
            Err(TrainError::Config { key, .. }) => assert_eq!(key, "learning_rte"),
            other => panic!("{other:?}"),
        }
        match c2.clone().set("dropout", "lots") {
            Err(TrainError::Config { key, .. }) => assert_eq!(key, "dropout"),
            other => panic!("{other:?}"),
        }
        let mut neg = c2.clone();
        neg.set("gamma", "-1").unwrap();
        assert!(matches!(neg.validate(), Err(TrainError::Config { key, .. }) if key == "gamma"));
        assert!(c2.apply_text("no equals sign").is_err());
    }

    #[test]
    fn wogp_turns_off_regularizer() {
        let mut c = TrainConfig::default();
        assert_eq!(c.effective_gamma(), 0.01);
        c.disable_graph_propagation = true;
        assert_eq!(c.effective_gamma(), 0.0);
        assert_eq!(c.ablation().tag(), "woGP");
    }

    #[test]
    fn clip_scales_to_bound() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut h = vec![0.1, 0.1];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h, vec![0.1, 0.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(2, 0.1);
        let mut x = vec![1.0, 1.0];
        a.step(&mut x, &[2.0, -0.5]);
        assert!((x[0] - 0.9).abs() < 1e-7 && (x[1] - 1.1).abs() < 1e-7);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.01,
            m: 8,
            d: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_smoke() {
        let seqs: Vec<EventSequence> = (0..10).map(|i| random_sequence(4, 5, 100 + i)).collect();
        let train_set = Dataset::new(4, seqs.clone()).unwrap();
        let valid = Dataset::new(4, seqs[..3].to_vec()).unwrap();
        let cfg = tiny_config();
        let out = train(initial_model(&train_set, &cfg).unwrap(), &train_set, &valid, &cfg).unwrap();
        assert_eq!(out.report.epochs.len(), 2);
        assert!(out.report.epochs.iter().all(|r| r.valid_nll.is_finite() && r.train_loss.is_finite()));
        assert_eq!(out.report.ablation, "full");
        let csv = out.report.to_csv(false);
        assert!(csv.starts_with("epoch,train_loss,valid_nll,valid_graph_loss,seconds\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn training_is_reproducible_across_thread_counts() {
        let seqs: Vec<EventSequence> = (0..12).map(|i| random_sequence(3, 6, 200 + i)).collect();
        let data = Dataset::new(3, seqs.clone()).unwrap();
        let valid = Dataset::new(3, seqs[..4].to_vec()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_config()
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let out = train(initial_model(&data, &cfg).unwrap(), &data, &valid, &cfg).unwrap();
                (out.report.to_csv(false), out.model.params.values().to_vec())
            })
        };
        let (a, pa) = run(1);
        let (b, pb) = run(4);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn wo_at_runs_end_to_end() {
        let seqs: Vec<EventSequence> = (0..8).map(|i| random_sequence(3, 6, 300 + i)).collect();
        let data = Dataset::new(3, seqs.clone()).unwrap();
        let cfg = TrainConfig {
            disable_history_attention: true,
            ..tiny_config()
        };
        let out = train(initial_model(&data, &cfg).unwrap(), &data, &data, &cfg).unwrap();
        assert_eq!(out.report.ablation, "woAT");
        assert!(out.report.best_valid_nll.is_finite());
    }

    #[test]
    fn converges_on_poisson_data_with_ablations() {
        let rates = [0.3, 0.15];
        let data = poisson_dataset(&rates, 40, 60.0, 5);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.01,
            dropout: 0.0,
            gamma: 0.0,
            m: 4,
            d: 4,
            disable_graph_propagation: true,
            disable_history_attention: true,
            patience: 30,
            ..TrainConfig::default()
        };
        let out = train(initial_model(&data, &cfg).unwrap(), &data, &data, &cfg).unwrap();
        let seqs: Vec<EventSequence> = data.sequences.iter().filter(|s| s.len() >= 2).cloned().collect();
        let exposure: f64 = seqs.iter().map(|s| s.horizon - s.events[0].t).sum();
        let mut counts = [0.0; 2];
        for s in &seqs {
            for e in &s.events[1..] {
                counts[e.node] += 1.0;
            }
        }
        let n: f64 = counts.iter().sum();
        let optimum = counts.iter().map(|&c| -c * (c / exposure).ln()).sum::<f64>() + n;
        let fitted = mean_nll(&out.model, &seqs, 50).unwrap() * seqs.len() as f64;
        assert!((fitted - optimum).abs() / optimum.abs() < 0.02, "fitted {fitted} optimum {optimum}");
    }
}
