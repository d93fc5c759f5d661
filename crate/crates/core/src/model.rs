//! The GRPP forward pass.
//!
//! Per event `i` at node `v` (previous event at node `u`):
//!
//! 1. positional encoding `d_i = LSTM([d_{i-1}; x_v])`,
//! 2. neighbourhood attention `s_u = sum_z q_z h_z` over `N_u`,
//! 3. node update `h_v <- tanh(W1 s_u + W2 h_v + W3 d_i)` (only row `v` of `H` changes),
//! 4. regime `i` on `[t_i, t_{i+1})`: anchor `h_i`, base `mu_i = sigmoid(Wmu h_i + bmu)`,
//!    attention `beta_{j,i} = softmax_j(V tanh(Wom [h_i; h_j]))` over earlier events,
//!    excitation `alpha_{j,i} = beta_{j,i} h_j`, decay `delta_{j,i} = sigmoid(Wdel [h_j; h_i] + bdel)`.
//!
//! The latent intensity in regime `i` is
//! `lambda^h(t) = sum_{j<i} alpha_{j,i} * exp(-delta_{j,i} (t - t_j)) + mu_i`
//! and the per-node intensity is `softplus(W_head lambda^h + b_head)`.
//!
//! Everything is recorded on a [`Tape`]; [`SequenceTrace::regime_values`] copies
//! the regimes out for gradient-free evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventstore::{neighborhoods, ConnectionMatrix, EventSequence};
use crate::numerics::{self, NumericsError, ParamId, ParamSpec, ParamVector, Tape, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("event {index}: node {node} out of range for K={k}")]
    InvalidNode { index: usize, node: usize, k: usize },
    #[error("sequence has no events")]
    EmptySequence,
    #[error("query time {t} precedes regime start {start}")]
    TimeBeforeRegime { t: f64, start: f64 },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Switches for the two ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Skip the node update entirely: the positional encoding is the anchor.
    pub disable_graph_propagation: bool,
    /// Keep only the most recent history term with unit weight.
    pub disable_history_attention: bool,
}

impl Ablation {
    pub fn tag(&self) -> &'static str {
        match (self.disable_graph_propagation, self.disable_history_attention) {
            (false, false) => "full",
            (true, false) => "woGP",
            (false, true) => "woAT",
            (true, true) => "woGP+woAT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    /// Event-type embedding width.
    pub m: usize,
    /// Hidden width shared by the encoder, node embeddings and latent intensity.
    pub d: usize,
    /// Neighbourhood threshold on the connection matrix.
    pub tau: f64,
    pub ablation: Ablation,
}

/// Handles into the parameter registry.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embedding: ParamId,
    lstm_weight: ParamId,
    lstm_bias: ParamId,
    w1: ParamId,
    w2: ParamId,
    w3: ParamId,
    attn_score: ParamId,
    w_mu: ParamId,
    b_mu: ParamId,
    v_omega: ParamId,
    w_omega: ParamId,
    w_delta: ParamId,
    b_delta: ParamId,
    head_weight: ParamId,
    head_bias: ParamId,
    omega: ParamId,
    node_embedding: ParamId,
}

impl Layout {
    fn register(p: &mut ParamVector, c: &ModelConfig) -> Result<Self, NumericsError> {
        let (k, m, d) = (c.k, c.m, c.d);
        Ok(Self {
            embedding: p.register("event_embedding", k, m)?,
            lstm_weight: p.register("lstm_weight", 4 * d, d + m)?,
            lstm_bias: p.register("lstm_bias", 1, 4 * d)?,
            w1: p.register("w1", d, d)?,
            w2: p.register("w2", d, d)?,
            w3: p.register("w3", d, d)?,
            attn_score: p.register("attn_score", d, d)?,
            w_mu: p.register("w_mu", d, d)?,
            b_mu: p.register("b_mu", 1, d)?,
            v_omega: p.register("v_omega", 1, d)?,
            w_omega: p.register("w_omega", d, 2 * d)?,
            w_delta: p.register("w_delta", d, 2 * d)?,
            b_delta: p.register("b_delta", 1, d)?,
            head_weight: p.register("head_weight", k, d)?,
            head_bias: p.register("head_bias", 1, k)?,
            omega: p.register("omega", d, d)?,
            node_embedding: p.register("node_embedding", k, d)?,
        })
    }

    fn resolve(p: &ParamVector) -> Result<Self, NumericsError> {
        Ok(Self {
            embedding: p.id("event_embedding")?,
            lstm_weight: p.id("lstm_weight")?,
            lstm_bias: p.id("lstm_bias")?,
            w1: p.id("w1")?,
            w2: p.id("w2")?,
            w3: p.id("w3")?,
            attn_score: p.id("attn_score")?,
            w_mu: p.id("w_mu")?,
            b_mu: p.id("b_mu")?,
            v_omega: p.id("v_omega")?,
            w_omega: p.id("w_omega")?,
            w_delta: p.id("w_delta")?,
            b_delta: p.id("b_delta")?,
            head_weight: p.id("head_weight")?,
            head_bias: p.id("head_bias")?,
            omega: p.id("omega")?,
            node_embedding: p.id("node_embedding")?,
        })
    }
}

/// All learnable tensors of the model plus the fixed graph prior.
#[derive(Clone, Debug, PartialEq)]
pub struct GrppModel {
    pub config: ModelConfig,
    pub params: ParamVector,
    pub seed: u64,
    /// Connection matrix the neighbourhoods were derived from.
    pub connection: ConnectionMatrix,
    /// Mean inter-event time of the training data; sets the prediction grid.
    pub time_scale: f64,
    neighbors: Vec<Vec<usize>>,
    layout: Layout,
}

/// Node-embedding matrix `H` as one tape node per row, plus the time each row
/// was last touched.
#[derive(Clone, Debug)]
pub struct NodeEmbeddings {
    pub rows: Vec<Var>,
    pub last_update: Vec<f64>,
    /// Cached `W_s h_z` per row, invalidated when the row changes.
    score_proj: Vec<Option<Var>>,
}

/// Recurrent state of the positional encoder. The emitted positional encoding
/// doubles as the hidden state.
#[derive(Clone, Copy, Debug)]
pub struct EncoderState {
    pub hidden: Var,
    pub cell: Var,
}

impl EncoderState {
    pub fn positional(&self) -> Var {
        self.hidden
    }
}

#[derive(Clone, Debug)]
pub struct HistoryEntry {
    pub t: f64,
    pub node: usize,
    pub h: Var,
    /// `Wom[:, d..2d] h_j`
    omega_proj: Var,
    /// `Wdel[:, 0..d] h_j`
    delta_proj: Var,
}

/// Snapshots of the updated node embedding for every processed event.
#[derive(Clone, Debug, Default)]
pub struct HistoryCache {
    pub entries: Vec<HistoryEntry>,
}

#[derive(Clone, Copy, Debug)]
pub struct ExcitationTerm {
    pub alpha: Var,
    pub delta: Var,
    pub t: f64,
}

/// Everything needed to evaluate the intensity on `[start, next event)`.
#[derive(Clone, Debug)]
pub struct Regime {
    pub start: f64,
    pub anchor: Var,
    pub mu: Var,
    pub terms: Vec<ExcitationTerm>,
}

#[derive(Clone, Debug)]
pub struct SequenceTrace {
    pub regimes: Vec<Regime>,
}

/// Dropout on the recurrent-cell inputs.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

/// Inverse of softplus, `log(e^y - 1)`, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl GrppModel {
    /// Weights uniform on `[-1/sqrt(d), 1/sqrt(d)]`, node embeddings uniform on
    /// `[-0.1, 0.1]`.
    pub fn init(
        config: ModelConfig,
        connection: ConnectionMatrix,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if config.k == 0 || config.m == 0 || config.d == 0 {
            return Err(ModelError::Config("K, m and d must all be >= 1".into()));
        }
        if connection.k != config.k {
            return Err(ModelError::Config(format!(
                "connection matrix is {}x{} but K={}",
                connection.k, connection.k, config.k
            )));
        }
        let mut params = ParamVector::new();
        let layout = Layout::register(&mut params, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.d as f64).sqrt();
        let emb = params.spec(layout.node_embedding).clone();
        for (i, v) in params.values_mut().iter_mut().enumerate() {
            *v = if (emb.offset..emb.offset + emb.len()).contains(&i) {
                rng.random_range(-0.1..0.1)
            } else {
                rng.random_range(-bound..bound)
            };
        }
        let neighbors = neighborhoods(&connection, config.tau);
        Ok(Self {
            config,
            params,
            seed,
            connection,
            time_scale: 1.0,
            neighbors,
            layout,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn param_id(&self, name: &str) -> Result<ParamId, NumericsError> {
        self.params.id(name)
    }

    /// Sets the head bias to `softplus^-1(rate_k)` so the untrained model
    /// starts near the empirical per-node rates.
    pub fn set_base_rates(&mut self, rates: &[f64]) {
        let b = self.params.slice_mut(self.layout.head_bias);
        for (x, &r) in b.iter_mut().zip(rates) {
            *x = inverse_softplus(r.max(1e-8));
        }
    }

    /// Zero every weight, then set the head bias so each node has intensity
    /// `rates[k]` at all times. Used to rig closed-form test cases.
    pub fn rig_constant_intensity(&mut self, rates: &[f64]) {
        self.params.values_mut().iter_mut().for_each(|x| *x = 0.0);
        self.set_base_rates(rates);
    }

    fn hidden(&self) -> usize {
        self.config.d
    }

    fn head_weight_values(&self) -> &[f64] {
        self.params.slice(self.layout.head_weight)
    }

    fn head_bias_values(&self) -> &[f64] {
        self.params.slice(self.layout.head_bias)
    }

    /// Initial embeddings `H` (the learnable `node_embedding` rows).
    pub fn initial_embeddings(&self, tape: &mut Tape<'_>) -> NodeEmbeddings {
        let rows = (0..self.k())
            .map(|r| tape.param_row(self.layout.node_embedding, r))
            .collect();
        NodeEmbeddings {
            rows,
            last_update: vec![0.0; self.k()],
            score_proj: vec![None; self.k()],
        }
    }

    pub fn initial_encoder(&self, tape: &mut Tape<'_>) -> EncoderState {
        let d = self.hidden();
        EncoderState {
            hidden: tape.constant(vec![0.0; d]),
            cell: tape.constant(vec![0.0; d]),
        }
    }

    /// One step of the positional encoder on event type `node`.
    pub fn encode_event(
        &self,
        tape: &mut Tape<'_>,
        state: &EncoderState,
        node: usize,
        dropout_mask: Option<&[f64]>,
    ) -> EncoderState {
        let d = self.hidden();
        let x = tape.param_row(self.layout.embedding, node);
        let mut z = tape.concat(&[state.hidden, x]);
        if let Some(mask) = dropout_mask {
            let m = tape.constant(mask.to_vec());
            z = tape.mul(z, m);
        }
        let wz = tape.matvec(self.layout.lstm_weight, z);
        let b = tape.param(self.layout.lstm_bias);
        let gates = tape.add(wz, b);
        let gi = tape.slice(gates, 0, d);
        let gf = tape.slice(gates, d, d);
        let gg = tape.slice(gates, 2 * d, d);
        let go = tape.slice(gates, 3 * d, d);
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let g = tape.tanh(gg);
        let o = tape.sigmoid(go);
        let keep = tape.mul(f, state.cell);
        let write = tape.mul(i, g);
        let cell = tape.add(keep, write);
        let tc = tape.tanh(cell);
        let hidden = tape.mul(o, tc);
        EncoderState { hidden, cell }
    }

    fn score_projection(&self, tape: &mut Tape<'_>, h: &mut NodeEmbeddings, z: usize) -> Var {
        if let Some(v) = h.score_proj[z] {
            return v;
        }
        let v = tape.matvec(self.layout.attn_score, h.rows[z]);
        h.score_proj[z] = Some(v);
        v
    }

    /// Attention weights `q_z` over `neighbors` with the bilinear score
    /// `h_u^T W_s h_z`.
    pub fn neighbor_weights(
        &self,
        tape: &mut Tape<'_>,
        h: &mut NodeEmbeddings,
        u: usize,
        neighbors: &[usize],
    ) -> Var {
        let scores: Vec<Var> = neighbors
            .iter()
            .map(|&z| {
                let p = self.score_projection(tape, h, z);
                tape.dot(h.rows[u], p)
            })
            .collect();
        let s = tape.concat(&scores);
        tape.softmax(s)
    }

    /// `s_u = sum_{z in N_u} q_z h_z`.
    pub fn aggregate_neighbors(
        &self,
        tape: &mut Tape<'_>,
        h: &mut NodeEmbeddings,
        u: usize,
        neighbors: &[usize],
    ) -> Var {
        if let [only] = neighbors {
            return h.rows[*only];
        }
        let q = self.neighbor_weights(tape, h, u, neighbors);
        let mut acc: Option<Var> = None;
        for (idx, &z) in neighbors.iter().enumerate() {
            let qz = tape.slice(q, idx, 1);
            let term = tape.mul(h.rows[z], qz);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        acc.expect("neighbourhood is never empty")
    }

    /// Node update for the target of an event. Only row `v` changes.
    pub fn propagate(
        &self,
        tape: &mut Tape<'_>,
        h: &mut NodeEmbeddings,
        source_summary: Option<Var>,
        v: usize,
        positional: Var,
        t: f64,
    ) -> Var {
        let self_term = tape.matvec(self.layout.w2, h.rows[v]);
        let exo = tape.matvec(self.layout.w3, positional);
        let mut pre = tape.add(self_term, exo);
        if let Some(s) = source_summary {
            let local = tape.matvec(self.layout.w1, s);
            pre = tape.add(local, pre);
        }
        let new_row = tape.tanh(pre);
        h.rows[v] = new_row;
        h.last_update[v] = t;
        h.score_proj[v] = None;
        new_row
    }

    fn history_entry(&self, tape: &mut Tape<'_>, t: f64, node: usize, h: Var) -> HistoryEntry {
        let d = self.hidden();
        HistoryEntry {
            t,
            node,
            h,
            omega_proj: tape.matvec_block(self.layout.w_omega, d, h),
            delta_proj: tape.matvec_block(self.layout.w_delta, 0, h),
        }
    }

    /// Softmax attention `beta_{j,i}` of the anchor over every cached event.
    pub fn history_attention(
        &self,
        tape: &mut Tape<'_>,
        anchor: Var,
        cache: &HistoryCache,
    ) -> Var {
        let anchor_proj = tape.matvec_block(self.layout.w_omega, 0, anchor);
        let scores: Vec<Var> = cache
            .entries
            .iter()
            .map(|e| {
                let pre = tape.add(anchor_proj, e.omega_proj);
                let act = tape.tanh(pre);
                tape.matvec(self.layout.v_omega, act)
            })
            .collect();
        let s = tape.concat(&scores);
        tape.softmax(s)
    }

    /// `(alpha_{j,i}, delta_{j,i})` for history entry `entry` and anchor `h_i`.
    /// `beta` is a length-1 node.
    pub fn excitation_and_decay(
        &self,
        tape: &mut Tape<'_>,
        entry: &HistoryEntry,
        anchor: Var,
        beta: Var,
    ) -> (Var, Var) {
        let d = self.hidden();
        let alpha = tape.mul(entry.h, beta);
        let anchor_proj = tape.matvec_block(self.layout.w_delta, d, anchor);
        let b = tape.param(self.layout.b_delta);
        let pre = tape.add(entry.delta_proj, anchor_proj);
        let pre = tape.add(pre, b);
        (alpha, tape.sigmoid(pre))
    }

    fn build_regime(
        &self,
        tape: &mut Tape<'_>,
        t: f64,
        anchor: Var,
        cache: &HistoryCache,
    ) -> Regime {
        let wmu = tape.matvec(self.layout.w_mu, anchor);
        let bmu = tape.param(self.layout.b_mu);
        let pre = tape.add(wmu, bmu);
        let mu = tape.sigmoid(pre);
        let mut terms = Vec::new();
        if !cache.entries.is_empty() {
            if self.config.ablation.disable_history_attention {
                let last = cache.entries.last().unwrap();
                let one = tape.constant(vec![1.0]);
                let (alpha, delta) = self.excitation_and_decay(tape, last, anchor, one);
                terms.push(ExcitationTerm {
                    alpha,
                    delta,
                    t: last.t,
                });
            } else {
                let beta = self.history_attention(tape, anchor, cache);
                // anchor-side decay projection is shared by every term
                let d = self.hidden();
                let anchor_proj = tape.matvec_block(self.layout.w_delta, d, anchor);
                let b = tape.param(self.layout.b_delta);
                let shared = tape.add(anchor_proj, b);
                for (j, e) in cache.entries.iter().enumerate() {
                    let bj = tape.slice(beta, j, 1);
                    let alpha = tape.mul(e.h, bj);
                    let pre = tape.add(e.delta_proj, shared);
                    let delta = tape.sigmoid(pre);
                    terms.push(ExcitationTerm { alpha, delta, t: e.t });
                }
            }
        }
        Regime {
            start: t,
            anchor,
            mu,
            terms,
        }
    }

    /// Runs the encoder, node propagation and regime construction over every
    /// event of `seq`. Regime `i` covers `[t_i, t_{i+1})` and only depends on
    /// events `0..=i`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        seq: &EventSequence,
        dropout: Option<Dropout>,
    ) -> Result<SequenceTrace, ModelError> {
        let k = self.k();
        for (index, e) in seq.events.iter().enumerate() {
            if e.node >= k {
                return Err(ModelError::InvalidNode {
                    index,
                    node: e.node,
                    k,
                });
            }
        }
        let use_graph = !self.config.ablation.disable_graph_propagation;
        let mut rng = dropout.map(|d| ChaCha8Rng::seed_from_u64(d.seed));
        let width = self.config.m + self.config.d;
        let mut enc = self.initial_encoder(tape);
        let mut h = use_graph.then(|| self.initial_embeddings(tape));
        let mut cache = HistoryCache::default();
        let mut regimes = Vec::with_capacity(seq.len());
        let mut prev_node: Option<usize> = None;
        let mut mask = vec![0.0; width];
        for e in &seq.events {
            let m = match (dropout, rng.as_mut()) {
                (Some(d), Some(r)) if d.rate > 0.0 => {
                    let keep = 1.0 / (1.0 - d.rate);
                    for x in mask.iter_mut() {
                        *x = if r.random::<f64>() < d.rate { 0.0 } else { keep };
                    }
                    Some(mask.as_slice())
                }
                _ => None,
            };
            enc = self.encode_event(tape, &enc, e.node, m);
            let anchor = match h.as_mut() {
                Some(h) => {
                    let summary = prev_node.map(|u| {
                        self.aggregate_neighbors(tape, h, u, &self.neighbors[u])
                    });
                    self.propagate(tape, h, summary, e.node, enc.positional(), e.t)
                }
                None => enc.positional(),
            };
            regimes.push(self.build_regime(tape, e.t, anchor, &cache));
            let entry = self.history_entry(tape, e.t, e.node, anchor);
            cache.entries.push(entry);
            prev_node = Some(e.node);
        }
        Ok(SequenceTrace { regimes })
    }

    /// `lambda^h(t)` inside `regime`.
    pub fn latent_intensity(
        &self,
        tape: &mut Tape<'_>,
        regime: &Regime,
        t: f64,
    ) -> Result<Var, ModelError> {
        if t < regime.start {
            return Err(ModelError::TimeBeforeRegime {
                t,
                start: regime.start,
            });
        }
        let mut acc = regime.mu;
        for term in &regime.terms {
            let scaled = tape.scale(term.delta, -(t - term.t));
            let decay = tape.exp(scaled);
            let contrib = tape.mul(term.alpha, decay);
            acc = tape.add(acc, contrib);
        }
        Ok(acc)
    }

    /// Per-node intensities `softplus(W_head lambda^h + b_head)`.
    pub fn event_intensity(&self, tape: &mut Tape<'_>, latent: Var) -> Var {
        let w = tape.matvec(self.layout.head_weight, latent);
        let b = tape.param(self.layout.head_bias);
        let pre = tape.add(w, b);
        tape.softplus(pre)
    }

    /// Entries of `A = H Omega H^T` in column-major order, recorded on the tape.
    pub fn infectivity_on_tape(&self, tape: &mut Tape<'_>) -> Var {
        let cols: Vec<Var> = (0..self.k())
            .map(|j| {
                let hj = tape.param_row(self.layout.node_embedding, j);
                let y = tape.matvec(self.layout.omega, hj);
                tape.matvec(self.layout.node_embedding, y)
            })
            .collect();
        tape.concat(&cols)
    }

    /// `A = H Omega H^T`, row-major.
    pub fn infectivity(&self) -> Vec<f64> {
        infectivity(
            self.params.slice(self.layout.node_embedding),
            self.params.slice(self.layout.omega),
            self.k(),
            self.hidden(),
        )
    }

    pub fn node_embedding_id(&self) -> ParamId {
        self.layout.node_embedding
    }

    pub fn omega_id(&self) -> ParamId {
        self.layout.omega
    }

    /// Copies the regimes off the tape.
    pub fn regime_values(&self, tape: &Tape<'_>, trace: &SequenceTrace) -> Vec<RegimeValues> {
        trace
            .regimes
            .iter()
            .map(|r| RegimeValues {
                start: r.start,
                mu: tape.value(r.mu).to_vec(),
                alpha: r.terms.iter().map(|t| tape.value(t.alpha).to_vec()).collect(),
                delta: r.terms.iter().map(|t| tape.value(t.delta).to_vec()).collect(),
                times: r.terms.iter().map(|t| t.t).collect(),
            })
            .collect()
    }

    /// Gradient-free forward pass returning every regime.
    pub fn regimes(&self, seq: &EventSequence) -> Result<Vec<RegimeValues>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let trace = self.forward(&mut tape, seq, None)?;
        tape.check()?;
        Ok(self.regime_values(&tape, &trace))
    }

    /// Intensity evaluator for one regime.
    pub fn regime_intensity<'a>(&'a self, regime: &'a RegimeValues) -> RegimeIntensity<'a> {
        RegimeIntensity {
            regime,
            head_weight: self.head_weight_values(),
            head_bias: self.head_bias_values(),
            k: self.k(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            k: self.config.k,
            m: self.config.m,
            d: self.config.d,
            seed: self.seed,
            tau: self.config.tau,
            ablation: self.config.ablation,
            time_scale: self.time_scale,
            connection: self.connection.entries.clone(),
            specs: self.params.specs().to_vec(),
            values: self.params.values().to_vec(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self, ModelError> {
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "format version {} not supported (expected {})",
                c.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let config = ModelConfig {
            k: c.k,
            m: c.m,
            d: c.d,
            tau: c.tau,
            ablation: c.ablation,
        };
        let params = ParamVector::from_parts(c.specs, c.values)?;
        // the registry must match what this configuration would register
        let mut expected = ParamVector::new();
        Layout::register(&mut expected, &config)?;
        if expected.specs() != params.specs() {
            return Err(ModelError::Checkpoint(
                "parameter registry does not match K, m, d".into(),
            ));
        }
        if c.connection.len() != c.k * c.k {
            return Err(ModelError::Checkpoint("connection matrix has wrong size".into()));
        }
        let layout = Layout::resolve(&params)?;
        let connection = ConnectionMatrix {
            k: c.k,
            entries: c.connection,
        };
        let neighbors = neighborhoods(&connection, config.tau);
        Ok(Self {
            config,
            params,
            seed: c.seed,
            connection,
            time_scale: c.time_scale,
            neighbors,
            layout,
        })
    }
}

/// `H Omega H^T` for row-major `H` (`k x d`) and `Omega` (`d x d`).
pub fn infectivity(h: &[f64], omega: &[f64], k: usize, d: usize) -> Vec<f64> {
    let mut h_omega = vec![0.0; k * d];
    for i in 0..k {
        for c in 0..d {
            h_omega[i * d + c] = (0..d).map(|r| h[i * d + r] * omega[r * d + c]).sum();
        }
    }
    let mut a = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            a[i * k + j] = numerics::dot(&h_omega[i * d..(i + 1) * d], &h[j * d..(j + 1) * d]);
        }
    }
    a
}

/// Serialized model: shape registry, flat values and the data-derived state
/// needed to reproduce the forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub seed: u64,
    pub tau: f64,
    pub ablation: Ablation,
    pub time_scale: f64,
    pub connection: Vec<f64>,
    pub specs: Vec<ParamSpec>,
    pub values: Vec<f64>,
}

/// Plain-value copy of a [`Regime`].
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeValues {
    pub start: f64,
    pub mu: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub times: Vec<f64>,
}

impl RegimeValues {
    pub fn latent(&self, t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.mu);
        for ((a, dl), &tj) in self.alpha.iter().zip(&self.delta).zip(&self.times) {
            let dt = t - tj;
            for c in 0..out.len() {
                out[c] += a[c] * (-dl[c] * dt).exp();
            }
        }
    }
}

/// Evaluates per-node intensities of a trained model inside one regime.
pub struct RegimeIntensity<'a> {
    regime: &'a RegimeValues,
    head_weight: &'a [f64],
    head_bias: &'a [f64],
    k: usize,
}

impl RegimeIntensity<'_> {
    pub fn start(&self) -> f64 {
        self.regime.start
    }

    pub fn num_nodes(&self) -> usize {
        self.k
    }

    pub fn intensities(&self, t: f64, out: &mut [f64]) {
        let d = self.regime.mu.len();
        let mut latent = vec![0.0; d];
        self.regime.latent(t, &mut latent);
        for (kk, o) in out.iter_mut().enumerate() {
            let w = &self.head_weight[kk * d..(kk + 1) * d];
            *o = numerics::softplus(numerics::dot(w, &latent) + self.head_bias[kk]);
        }
    }
}
