//! Next-event prediction by quadrature of the density
//! `p(t) = lambda(t) exp(-int_{t_i}^t lambda)` after the last observed event.
//!
//! The grid spacing is `time_scale / points_per_scale`. The horizon starts at
//! one `time_scale` and doubles until the survival drops below
//! `survival_tol`. If it is still above `fail_tol` once the horizon reaches
//! `max_scale_multiple * time_scale`, the tail is treated as non-integrable.
//!
//! On each grid step the survival is updated exactly for the trapezoid
//! cumulative hazard, so the step's probability mass is `S_n - S_{n+1}` and the
//! per-node masses (shares `lambda_k / lambda` averaged over the two
//! endpoints) add up to the captured mass `1 - S_end`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventstore::{Dataset, Event, EventSequence};
use crate::hawkes::MhpParams;
use crate::model::{GrppModel, ModelError, RegimeIntensity};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("query time {t} precedes last event at {start}")]
    TimeBeforeHistory { t: f64, start: f64 },
    #[error("survival still {survival:.3e} at horizon {horizon} (non-integrable tail)")]
    NonIntegrableTail { survival: f64, horizon: f64 },
    #[error("intensity is zero or non-finite at t={t}")]
    BadIntensity { t: f64 },
    #[error("history is empty")]
    EmptyHistory,
    #[error("invalid prediction config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-node intensities after the last event of some history.
pub trait IntensityModel {
    fn num_nodes(&self) -> usize;
    /// Time of the last history event.
    fn start(&self) -> f64;
    fn intensities(&self, t: f64, out: &mut [f64]);
}

impl IntensityModel for RegimeIntensity<'_> {
    fn num_nodes(&self) -> usize {
        RegimeIntensity::num_nodes(self)
    }

    fn start(&self) -> f64 {
        RegimeIntensity::start(self)
    }

    fn intensities(&self, t: f64, out: &mut [f64]) {
        RegimeIntensity::intensities(self, t, out)
    }
}

/// Time-invariant rates, for closed-form checks.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantIntensity {
    pub start: f64,
    pub rates: Vec<f64>,
}

impl IntensityModel for ConstantIntensity {
    fn num_nodes(&self) -> usize {
        self.rates.len()
    }

    fn start(&self) -> f64 {
        self.start
    }

    fn intensities(&self, _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.rates);
    }
}

/// Hawkes intensity after a history, in the recursive form
/// `lambda_k(t) = mu_k + r_k exp(-omega (t - t_last))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhpIntensity<'a> {
    params: &'a MhpParams,
    start: f64,
    excitation: Vec<f64>,
}

impl<'a> MhpIntensity<'a> {
    pub fn new(params: &'a MhpParams, history: &[Event]) -> Result<Self, InferenceError> {
        let last = history.last().ok_or(InferenceError::EmptyHistory)?;
        let k = params.k;
        let mut excitation = vec![0.0; k];
        let mut prev = history[0].t;
        for e in history {
            let decay = (-params.omega * (e.t - prev)).exp();
            for (r, row) in excitation.iter_mut().zip(0..k) {
                *r = *r * decay + params.alpha(row, e.node);
            }
            prev = e.t;
        }
        Ok(Self {
            params,
            start: last.t,
            excitation,
        })
    }
}

impl IntensityModel for MhpIntensity<'_> {
    fn num_nodes(&self) -> usize {
        self.params.k
    }

    fn start(&self) -> f64 {
        self.start
    }

    fn intensities(&self, t: f64, out: &mut [f64]) {
        let decay = (-self.params.omega * (t - self.start)).exp();
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.params.mu[k] + self.excitation[k] * decay;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    /// Mean inter-event time; sets the grid spacing and the horizon cap.
    pub time_scale: f64,
    pub points_per_scale: usize,
    pub survival_tol: f64,
    pub fail_tol: f64,
    pub max_scale_multiple: f64,
}

impl PredictionConfig {
    pub fn new(time_scale: f64) -> Self {
        Self {
            time_scale,
            points_per_scale: 200,
            survival_tol: 1e-4,
            fail_tol: 1e-2,
            max_scale_multiple: 100.0,
        }
    }

    pub fn step(&self) -> f64 {
        self.time_scale / self.points_per_scale as f64
    }

    fn validate(&self) -> Result<(), InferenceError> {
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(InferenceError::Config(format!("time_scale {}", self.time_scale)));
        }
        if self.points_per_scale == 0 {
            return Err(InferenceError::Config("points_per_scale must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub t_hat: f64,
    pub k_hat: usize,
    /// Survival probability left beyond the truncation horizon.
    pub truncation_mass: f64,
    /// `int lambda_k / lambda * p` over the grid, per node.
    pub node_mass: Vec<f64>,
    /// End of the integration window.
    pub horizon: f64,
}

impl Prediction {
    pub fn captured_mass(&self) -> f64 {
        1.0 - self.truncation_mass
    }
}

fn total(m: &dyn IntensityModel, t: f64, buf: &mut [f64]) -> Result<f64, InferenceError> {
    m.intensities(t, buf);
    let s: f64 = buf.iter().sum();
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(InferenceError::BadIntensity { t })
    }
}

/// `p(t) = lambda(t) exp(-int_{start}^t lambda)` with the inner integral by
/// trapezoid on the prediction grid (the last cell is shortened to end at `t`).
pub fn next_event_density(
    m: &dyn IntensityModel,
    t: f64,
    cfg: &PredictionConfig,
) -> Result<f64, InferenceError> {
    cfg.validate()?;
    let start = m.start();
    if t < start {
        return Err(InferenceError::TimeBeforeHistory { t, start });
    }
    let mut buf = vec![0.0; m.num_nodes()];
    let cells = ((t - start) / cfg.step()).ceil() as usize;
    let h = if cells == 0 { 0.0 } else { (t - start) / cells as f64 };
    let mut prev = total(m, start, &mut buf)?;
    let mut hazard = 0.0;
    for n in 1..=cells {
        let x = if n == cells { t } else { start + h * n as f64 };
        let cur = total(m, x, &mut buf)?;
        hazard += 0.5 * h * (prev + cur);
        prev = cur;
    }
    Ok(prev * (-hazard).exp())
}

/// Time and node prediction from the same grid. The time estimate is the
/// mean gap over the captured mass added to the start time.
pub fn predict(m: &dyn IntensityModel, cfg: &PredictionConfig) -> Result<Prediction, InferenceError> {
    cfg.validate()?;
    let k = m.num_nodes();
    let start = m.start();
    let h = cfg.step();
    let per_scale = cfg.points_per_scale;
    let max_steps = (cfg.max_scale_multiple * per_scale as f64).ceil() as usize;
    let mut buf = vec![0.0; k];
    let mut node_mass = vec![0.0; k];
    let mut lam0 = total(m, start, &mut buf)?;
    let mut share0: Vec<f64> = buf.iter().map(|x| x / lam0).collect();
    let mut share1 = vec![0.0; k];
    let mut survival = 1.0;
    let mut moment = 0.0;
    let mut steps = 0usize;
    let mut boundary = per_scale;
    loop {
        while steps < boundary {
            let a = h * steps as f64;
            let b = h * (steps + 1) as f64;
            let lam1 = total(m, start + b, &mut buf)?;
            for (s, x) in share1.iter_mut().zip(&buf) {
                *s = x / lam1;
            }
            let next = survival * (-0.5 * h * (lam0 + lam1)).exp();
            let mass = survival - next;
            for kk in 0..k {
                node_mass[kk] += mass * 0.5 * (share0[kk] + share1[kk]);
            }
            moment += mass * 0.5 * (a + b);
            survival = next;
            lam0 = lam1;
            std::mem::swap(&mut share0, &mut share1);
            steps += 1;
        }
        if survival < cfg.survival_tol {
            break;
        }
        if boundary >= max_steps {
            if survival >= cfg.fail_tol {
                return Err(InferenceError::NonIntegrableTail {
                    survival,
                    horizon: start + h * steps as f64,
                });
            }
            break;
        }
        boundary = (2 * boundary).min(max_steps);
    }
    let captured = 1.0 - survival;
    let mut k_hat = 0;
    for kk in 1..k {
        if node_mass[kk] > node_mass[k_hat] {
            k_hat = kk;
        }
    }
    Ok(Prediction {
        t_hat: start + moment / captured,
        k_hat,
        truncation_mass: survival,
        node_mass,
        horizon: start + h * steps as f64,
    })
}

pub fn predict_time(m: &dyn IntensityModel, cfg: &PredictionConfig) -> Result<f64, InferenceError> {
    predict(m, cfg).map(|p| p.t_hat)
}

pub fn predict_node(m: &dyn IntensityModel, cfg: &PredictionConfig) -> Result<usize, InferenceError> {
    predict(m, cfg).map(|p| p.k_hat)
}

/// Something that predicts event `i` of a sequence from events `0..i`.
pub trait NextEventPredictor: Sync {
    /// Predictions for events `1..n`, in order.
    fn predict_sequence(&self, seq: &EventSequence) -> Result<Vec<Prediction>, InferenceError>;
}

pub struct GrppPredictor<'a> {
    pub model: &'a GrppModel,
    pub config: PredictionConfig,
}

impl<'a> GrppPredictor<'a> {
    pub fn new(model: &'a GrppModel) -> Self {
        Self {
            model,
            config: PredictionConfig::new(model.time_scale),
        }
    }
}

impl NextEventPredictor for GrppPredictor<'_> {
    fn predict_sequence(&self, seq: &EventSequence) -> Result<Vec<Prediction>, InferenceError> {
        if seq.len() < 2 {
            return Ok(Vec::new());
        }
        // regime i only depends on events 0..=i
        let regimes = self.model.regimes(seq)?;
        regimes[..seq.len() - 1]
            .iter()
            .map(|r| predict(&self.model.regime_intensity(r), &self.config))
            .collect()
    }
}

pub struct MhpPredictor<'a> {
    pub params: &'a MhpParams,
    pub config: PredictionConfig,
}

impl NextEventPredictor for MhpPredictor<'_> {
    fn predict_sequence(&self, seq: &EventSequence) -> Result<Vec<Prediction>, InferenceError> {
        (1..seq.len())
            .map(|i| predict(&MhpIntensity::new(self.params, &seq.events[..i])?, &self.config))
            .collect()
    }
}

/// Most frequent training node and mean training gap, ignoring history.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalPredictor {
    pub node: usize,
    pub mean_gap: f64,
    pub k: usize,
}

impl MarginalPredictor {
    pub fn fit(train: &Dataset) -> Option<Self> {
        let counts = train.node_counts();
        let mut node = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[node] {
                node = i;
            }
        }
        Some(Self {
            node,
            mean_gap: train.mean_inter_event_time()?,
            k: train.k,
        })
    }
}

impl NextEventPredictor for MarginalPredictor {
    fn predict_sequence(&self, seq: &EventSequence) -> Result<Vec<Prediction>, InferenceError> {
        Ok(seq.events[..seq.len().saturating_sub(1)]
            .iter()
            .map(|e| {
                let mut node_mass = vec![0.0; self.k];
                node_mass[self.node] = 1.0;
                Prediction {
                    t_hat: e.t + self.mean_gap,
                    k_hat: self.node,
                    truncation_mass: 0.0,
                    node_mass,
                    horizon: e.t + self.mean_gap,
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub accuracy: f64,
    pub n_events: usize,
    pub truncation_mass_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub seq_id: String,
    pub index: usize,
    pub t_true: f64,
    pub t_hat: f64,
    pub k_true: usize,
    pub k_hat: usize,
}

/// Scores every event after the first of each sequence with at least two
/// events. Sequences run in parallel; sums are taken in sequence order.
pub fn evaluate(
    predictor: &dyn NextEventPredictor,
    test: &Dataset,
) -> Result<(Metrics, Vec<PredictionRow>), InferenceError> {
    let per_seq: Vec<Vec<(PredictionRow, f64)>> = test
        .sequences
        .par_iter()
        .enumerate()
        .map(|(si, s)| {
            let preds = predictor.predict_sequence(s)?;
            Ok(preds
                .into_iter()
                .enumerate()
                .map(|(j, p)| {
                    let e = s.events[j + 1];
                    (
                        PredictionRow {
                            seq_id: s.display_id(si),
                            index: j + 1,
                            t_true: e.t,
                            t_hat: p.t_hat,
                            k_true: e.node,
                            k_hat: p.k_hat,
                        },
                        p.truncation_mass,
                    )
                })
                .collect())
        })
        .collect::<Result<_, InferenceError>>()?;
    let mut sq = 0.0;
    let mut correct = 0usize;
    let mut trunc = 0.0f64;
    let mut rows = Vec::new();
    for (row, tm) in per_seq.into_iter().flatten() {
        sq += (row.t_hat - row.t_true).powi(2);
        correct += usize::from(row.k_hat == row.k_true);
        trunc = trunc.max(tm);
        rows.push(row);
    }
    let n = rows.len();
    let metrics = Metrics {
        rmse: if n == 0 { 0.0 } else { (sq / n as f64).sqrt() },
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        n_events: n,
        truncation_mass_max: trunc,
    };
    Ok((metrics, rows))
}

/// `seq_id,index,t_true,t_hat,k_true,k_hat`
pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut s = String::from("seq_id,index,t_true,t_hat,k_true,k_hat\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.seq_id, r.index, r.t_true, r.t_hat,
            r.k_true,
            r.k_hat
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hawkes::mhp_intensity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(rates: &[f64]) -> ConstantIntensity {
        ConstantIntensity {
            start: 3.0,
            rates: rates.to_vec(),
        }
    }

    fn cfg_for(rate: f64) -> PredictionConfig {
        PredictionConfig::new(1.0 / rate)
    }

    fn random_mhp(k: usize, seed: u64) -> (MhpParams, Vec<Event>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = (0..k).map(|_| rng.random_range(0.05..0.5)).collect();
        let a = (0..k * k).map(|_| rng.random_range(0.0..0.8 / k as f64)).collect();
        let p = MhpParams::new(mu, a, 1.3).unwrap();
        let mut t = 0.0;
        let hist = (0..6)
            .map(|_| {
                t += rng.random_range(0.1..1.0);
                Event::new(t, rng.random_range(0..k))
            })
            .collect();
        (p, hist)
    }

    #[test]
    fn constant_rate_expectation() {
        for (rate, tol) in [(2.0, 1e-3), (0.1, 1e-3)] {
            let m = constant(&[rate]);
            let p = predict(&m, &cfg_for(rate)).unwrap();
            assert!((p.t_hat - (3.0 + 1.0 / rate)).abs() < tol, "{rate}: {}", p.t_hat);
            assert!(p.truncation_mass < 1e-4);
            assert_eq!(p.k_hat, 0);
        }
    }

    #[test]
    fn density_closed_form() {
        let m = constant(&[0.5, 1.0]);
        let c = PredictionConfig::new(1.0);
        assert!((next_event_density(&m, 3.0, &c).unwrap() - 1.5).abs() < 1e-15);
        let p = next_event_density(&m, 4.2, &c).unwrap();
        assert!((p - 1.5 * (-1.5f64 * 1.2).exp()).abs() < 1e-12);
        assert!(matches!(
            next_event_density(&m, 2.0, &c),
            Err(InferenceError::TimeBeforeHistory { .. })
        ));
    }

    #[test]
    fn density_integrates_to_captured_mass() {
        let (params, hist) = random_mhp(3, 4);
        let m = MhpIntensity::new(&params, &hist).unwrap();
        let c = PredictionConfig::new(1.0);
        let pred = predict(&m, &c).unwrap();
        // integrate the density on a grid independent of the predictor's
        let n = 20_000;
        let h = (pred.horizon - m.start()) / n as f64;
        let mut prev = next_event_density(&m, m.start(), &c).unwrap();
        let mut integral = 0.0;
        let mut hazard = 0.0;
        let mut buf = vec![0.0; 3];
        let mut lam_prev = total(&m, m.start(), &mut buf).unwrap();
        for i in 1..=n {
            let t = m.start() + h * i as f64;
            let lam = total(&m, t, &mut buf).unwrap();
            hazard += 0.5 * h * (lam + lam_prev);
            lam_prev = lam;
            let cur = lam * (-hazard).exp();
            integral += 0.5 * h * (prev + cur);
            prev = cur;
        }
        assert!(integral >= 0.9999, "{integral}");
        assert!((integral - pred.captured_mass()).abs() < 1e-6);
    }

    #[test]
    fn node_shares_for_constant_rates() {
        let m = constant(&[0.1, 0.3, 0.6]);
        let p = predict(&m, &cfg_for(1.0)).unwrap();
        assert_eq!(p.k_hat, 2);
        for (got, want) in p.node_mass.iter().zip([0.1, 0.3, 0.6]) {
            assert!((got - want * p.captured_mass()).abs() < 1e-12);
        }
        let one = predict(&constant(&[0.7]), &cfg_for(0.7)).unwrap();
        assert_eq!(one.k_hat, 0);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let p = predict(&constant(&[0.2, 0.4, 0.4]), &cfg_for(1.0)).unwrap();
        assert_eq!(p.k_hat, 1);
    }

    #[test]
    fn node_masses_sum_to_captured_mass() {
        for seed in 0..10 {
            let (params, hist) = random_mhp(4, seed);
            let m = MhpIntensity::new(&params, &hist).unwrap();
            let p = predict(&m, &PredictionConfig::new(0.7)).unwrap();
            assert!(p.node_mass.iter().all(|&x| x >= 0.0));
            let s: f64 = p.node_mass.iter().sum();
            assert!((s - p.captured_mass()).abs() < 1e-6);
        }
    }

    #[test]
    fn grid_refinement_converges_at_second_order() {
        let (params, hist) = random_mhp(3, 9);
        let m = MhpIntensity::new(&params, &hist).unwrap();
        let t = |points: usize| {
            let mut c = PredictionConfig::new(1.0);
            c.points_per_scale = points;
            predict(&m, &c).unwrap().t_hat
        };
        let (a, b, c) = (t(25), t(50), t(100));
        assert!((t(200) - t(400)).abs() / t(400) < 1e-4);
        let ratio = (a - b) / (b - c);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn vanishing_intensity_is_rejected() {
        let p = MhpParams::new(vec![0.0, 0.0], vec![0.1, 0.0, 0.0, 0.1], 1.0).unwrap();
        let m = MhpIntensity::new(&p, &[Event::new(1.0, 0)]).unwrap();
        assert!(matches!(
            predict(&m, &PredictionConfig::new(1.0)),
            Err(InferenceError::NonIntegrableTail { .. })
        ));
    }

    #[test]
    fn mhp_intensity_recursion_matches_direct_sum() {
        let (params, hist) = random_mhp(3, 2);
        let m = MhpIntensity::new(&params, &hist).unwrap();
        let mut out = vec![0.0; 3];
        for dt in [0.0, 0.3, 2.0] {
            let t = hist.last().unwrap().t + dt;
            m.intensities(t, &mut out);
            for (k, &o) in out.iter().enumerate() {
                let direct = params.mu[k]
                    + hist
                        .iter()
                        .map(|e| params.alpha(k, e.node) * (-params.omega * (t - e.t)).exp())
                        .sum::<f64>();
                assert!((o - direct).abs() < 1e-12);
                if dt > 0.0 {
                    assert!((o - mhp_intensity(&params, &hist, t, k).unwrap()).abs() < 1e-12);
                }
            }
        }
    }

    struct Oracle;
    impl NextEventPredictor for Oracle {
        fn predict_sequence(&self, s: &EventSequence) -> Result<Vec<Prediction>, InferenceError> {
            Ok(s.events[1..]
                .iter()
                .map(|e| Prediction {
                    t_hat: e.t,
                    k_hat: e.node,
                    truncation_mass: 0.0,
                    node_mass: vec![],
                    horizon: e.t,
                })
                .collect())
        }
    }

    struct RandomNode(u64);
    impl NextEventPredictor for RandomNode {
        fn predict_sequence(&self, s: &EventSequence) -> Result<Vec<Prediction>, InferenceError> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.0 ^ s.events[0].t.to_bits());
            Ok(s.events[1..]
                .iter()
                .map(|e| Prediction {
                    t_hat: e.t + 1.0,
                    k_hat: rng.random_range(0..10),
                    truncation_mass: 0.0,
                    node_mass: vec![],
                    horizon: e.t,
                })
                .collect())
        }
    }

    fn uniform_data(seqs: usize, len: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..seqs)
            .map(|_| {
                let mut t = rng.random::<f64>();
                let ev = (0..len)
                    .map(|_| {
                        t += rng.random_range(0.1..2.0);
                        Event::new(t, rng.random_range(0..10))
                    })
                    .collect();
                EventSequence::new(ev, t + 1.0)
            })
            .collect();
        Dataset::new(10, s).unwrap()
    }

    #[test]
    fn perfect_oracle_scores_perfectly() {
        let d = uniform_data(5, 8, 1);
        let (m, rows) = evaluate(&Oracle, &d).unwrap();
        assert_eq!((m.rmse, m.accuracy, m.n_events), (0.0, 1.0, 35));
        assert_eq!(rows.len(), 35);
        assert_eq!(rows[0].index, 1);
        let csv = predictions_csv(&rows);
        assert!(csv.starts_with("seq_id,index,t_true,t_hat,k_true,k_hat\n"));
    }

    #[test]
    fn random_node_accuracy_is_about_one_tenth() {
        let d = uniform_data(100, 41, 2);
        let (m, _) = evaluate(&RandomNode(5), &d).unwrap();
        let n = m.n_events as f64;
        let sd = (0.1 * 0.9 / n).sqrt();
        assert!((m.accuracy - 0.1).abs() < 4.0 * sd, "{}", m.accuracy);
        assert!((m.rmse - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_repeatable() {
        let d = uniform_data(6, 5, 3);
        let (params, _) = random_mhp(10, 1);
        let pred = MhpPredictor {
            params: &params,
            config: PredictionConfig::new(1.0),
        };
        let a = evaluate(&pred, &d).unwrap();
        let b = evaluate(&pred, &d).unwrap();
        assert_eq!(a, b);
        assert!(a.0.accuracy >= 0.0 && a.0.accuracy <= 1.0 && a.0.rmse.is_finite());
    }

    #[test]
    fn marginal_predictor_uses_mode_and_mean_gap() {
        let d = Dataset::new(
            3,
            vec![EventSequence::new(
                vec![Event::new(0.0, 2), Event::new(1.0, 2), Event::new(3.0, 0)],
                4.0,
            )],
        )
        .unwrap();
        let m = MarginalPredictor::fit(&d).unwrap();
        assert_eq!((m.node, m.mean_gap), (2, 1.5));
        let p = m.predict_sequence(&d.sequences[0]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!((p[1].t_hat, p[1].k_hat), (2.5, 2));
    }
}
