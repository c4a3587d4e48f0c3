//! The non-stationary transformer network: series stationarization, linear
//! embedding with learned positions, de-stationary multi-head attention
//! blocks, a reconstruction decoder with de-normalization, and a GRU
//! classification head.
//!
//! Everything is expressed as [`Graph`] builders so the same definitions run
//! at f32 for training and f64 for verification. The plain-`Array` operations
//! in this module (`stationarize`, `destationary_attention`, `encode`, ...)
//! are thin wrappers that build, bind, and evaluate the corresponding graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::numerics::{Array, Evaluator, Graph, NodeId, NumericsError, Scalar};
use crate::rng;

/// Per-window std floor inside stationarization (looser than the dataset
/// z-score floor: window stats pool only 120 samples).
pub const STATION_FLOOR: f64 = 1e-5;

/// Layer-norm epsilon.
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Error)]
pub enum ModelError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tau must be positive (got {0})")]
    NonPositiveTau(f64),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Whether the network keeps the stationarization + de-stationary attention
/// machinery or falls back to a standard transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelArm {
    Ns,
    Vanilla,
}

impl ModelArm {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelArm::Ns => "ns",
            ModelArm::Vanilla => "vanilla",
        }
    }
}

/// Architecture hyperparameters. All sizes are config-overridable; defaults
/// target a light-weight encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub seq_len: usize,
    pub input_features: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub projector_hidden: usize,
    pub dropout: f64,
    pub gru_hidden: usize,
    pub arm: ModelArm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seq_len: 120,
            input_features: 6,
            hidden: 72,
            layers: 4,
            heads: 4,
            ffn: 144,
            projector_hidden: 64,
            dropout: 0.1,
            gru_hidden: 32,
            arm: ModelArm::Ns,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("seq_len", self.seq_len),
            ("input_features", self.input_features),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("projector_hidden", self.projector_hidden),
            ("gru_hidden", self.gru_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.seq_len < 2 {
            return Err(ModelError::BadConfig("seq_len must be at least 2".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "hidden ({}) not divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-window stationarization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StationStats {
    pub mu: Vec<f64>,
    /// Per-feature std over time, floored via sqrt(var + FLOOR^2) > 0.
    pub sigma: Vec<f64>,
}

/// Named parameter arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T>(pub BTreeMap<String, Array<T>>);

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>, ModelError> {
        self.0.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: &str, value: Array<T>) {
        self.0.insert(name.to_string(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(|a| a.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet(self.0.iter().map(|(k, v)| (k.clone(), v.cast())).collect())
    }

    /// Bind every parameter the graph declares; errors if one is missing or
    /// mis-shaped.
    pub fn bind_into(&self, ev: &mut Evaluator<T>) -> Result<(), ModelError> {
        let names: Vec<String> = ev.graph().param_names().map(|s| s.to_string()).collect();
        for name in names {
            let value = self.get(&name)?;
            ev.bind(&name, value)?;
        }
        Ok(())
    }
}

/// True for parameters of the classification head (everything else belongs
/// to the encoder/decoder and freezes when the encoder freezes).
pub fn is_classifier_param(name: &str) -> bool {
    name.starts_with("cls.")
}

// ── graph builder helpers ───────────────────────────────────────────────────

/// x . W + b with freshly declared parameters.
fn linear(g: &mut Graph, x: NodeId, prefix: &str, din: usize, dout: usize) -> NodeId {
    let rows = g.shape(x).0;
    let w = g.param(&format!("{prefix}.w"), din, dout);
    let b = g.param(&format!("{prefix}.b"), 1, dout);
    let xw = g.matmul(x, w);
    let bb = g.broadcast_rows(b, rows);
    g.add(xw, bb)
}

/// GELU via the tanh approximation, composed from primitives.
fn gelu(g: &mut Graph, x: NodeId) -> NodeId {
    let x2 = g.mul(x, x);
    let x3 = g.mul(x2, x);
    let inner_poly = g.scale(x3, 0.044715);
    let sum = g.add(x, inner_poly);
    let scaled = g.scale(sum, 0.7978845608028654); // sqrt(2/pi)
    let t = g.tanh(scaled);
    let one_plus = g.add_scalar(t, 1.0);
    let half_x = g.scale(x, 0.5);
    g.mul(half_x, one_plus)
}

/// Post-norm layer normalization over features with learned gain/bias.
fn layer_norm(g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
    let (rows, cols) = g.shape(x);
    let gamma = g.param(&format!("{prefix}.gamma"), 1, cols);
    let beta = g.param(&format!("{prefix}.beta"), 1, cols);
    let mu = g.mean_cols(x);
    let mub = g.broadcast_cols(mu, cols);
    let centered = g.sub(x, mub);
    let var = g.var_cols(x);
    let var_eps = g.add_scalar(var, LN_EPS);
    let sd = g.sqrt(var_eps);
    let sdb = g.broadcast_cols(sd, cols);
    let normed = g.div(centered, sdb);
    let gb = g.broadcast_rows(gamma, rows);
    let bb = g.broadcast_rows(beta, rows);
    let scaled = g.mul(normed, gb);
    g.add(scaled, bb)
}

/// Multiply by a named dropout mask input (present only in train mode).
fn dropout(g: &mut Graph, x: NodeId, name: &str, active: bool) -> NodeId {
    if !active {
        return x;
    }
    let (rows, cols) = g.shape(x);
    let mask = g.input(name, rows, cols);
    g.mul(x, mask)
}

/// Scaled dot-product attention for one head, optionally de-stationarized by
/// prebroadcast SxS tau and delta terms: softmax((tau o QK^T + delta)/sqrt(d)) V.
fn attend(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    tau_delta: Option<(NodeId, NodeId)>,
    d: usize,
) -> NodeId {
    let kt = g.transpose(k);
    let qk = g.matmul(q, kt);
    let scored = match tau_delta {
        Some((taub, deltab)) => {
            let scaled = g.mul(qk, taub);
            g.add(scaled, deltab)
        }
        None => qk,
    };
    let scaled = g.scale(scored, 1.0 / (d as f64).sqrt());
    let attn = g.row_softmax(scaled);
    g.matmul(attn, v)
}

/// Two-layer tanh MLP used by the tau/delta projectors.
fn projector(g: &mut Graph, input: NodeId, prefix: &str, din: usize, hidden: usize) -> NodeId {
    let h = linear(g, input, &format!("{prefix}.l1"), din, hidden);
    let t = g.tanh(h);
    linear(g, t, &format!("{prefix}.l2"), hidden, 1)
}

/// Stationarization nodes: (x_normed, mu 1xE, sigma 1xE).
fn build_stationarize(g: &mut Graph, x: NodeId) -> (NodeId, NodeId, NodeId) {
    let (s, e) = g.shape(x);
    let mu = g.mean_rows(x);
    let var = g.var_rows(x);
    let var_floored = g.add_scalar(var, STATION_FLOOR * STATION_FLOOR);
    let sigma = g.sqrt(var_floored);
    let mub = g.broadcast_rows(mu, s);
    let sigb = g.broadcast_rows(sigma, s);
    let centered = g.sub(x, mub);
    let xn = g.div(centered, sigb);
    let _ = e;
    (xn, mu, sigma)
}

/// tau (1x1, positive) and delta (Sx1) from window stats and raw input.
fn build_tau_delta(
    g: &mut Graph,
    cfg: &EncoderConfig,
    x_raw: NodeId,
    mu: NodeId,
    sigma: NodeId,
) -> (NodeId, NodeId) {
    let (s, e) = g.shape(x_raw);
    let p = cfg.projector_hidden;
    // tau: exp(MLP([sigma, pooled raw])) — pooled raw over time is mu itself
    let tin = g.concat_cols(&[sigma, mu]);
    let tau_log = projector(g, tin, "enc.proj.tau", 2 * e, p);
    let tau = g.exp(tau_log);
    g.name_node(tau, "tau");
    // delta: per-timestep MLP([mu, raw row])
    let mub = g.broadcast_rows(mu, s);
    let din = g.concat_cols(&[mub, x_raw]);
    let delta = projector(g, din, "enc.proj.delta", 2 * e, p);
    g.name_node(delta, "delta");
    (tau, delta)
}

/// Nodes the encoder exposes to downstream builders.
pub struct EncoderNodes {
    pub hidden: NodeId,
    /// Stationarization stats (None on the vanilla arm).
    pub stats: Option<(NodeId, NodeId)>,
}

/// Full encoder stack on input node `x` (SxE). Dropout mask inputs
/// (`drop.*`) are declared only when `train_mode` and cfg.dropout > 0.
pub fn build_encoder(g: &mut Graph, cfg: &EncoderConfig, x: NodeId, train_mode: bool) -> EncoderNodes {
    let (s, e) = g.shape(x);
    assert_eq!((s, e), (cfg.seq_len, cfg.input_features), "encoder input shape");
    let h = cfg.hidden;
    let d = h / cfg.heads;
    let drop = train_mode && cfg.dropout > 0.0;

    let (xin, stats) = match cfg.arm {
        ModelArm::Ns => {
            let (xn, mu, sigma) = build_stationarize(g, x);
            (xn, Some((mu, sigma)))
        }
        ModelArm::Vanilla => (x, None),
    };

    // de-stationary factors, shared across layers and heads
    let tau_delta = stats.map(|(mu, sigma)| {
        let (tau, delta) = build_tau_delta(g, cfg, x, mu, sigma);
        let tau_col = g.broadcast_rows(tau, s); // 1x1 -> Sx1
        let taub = g.broadcast_cols(tau_col, s); // Sx1 -> SxS
        let delta_row = g.transpose(delta); // Sx1 -> 1xS
        let deltab = g.broadcast_rows(delta_row, s); // delta[j] at column j
        (taub, deltab)
    });

    // embedding + learned positions
    let emb = linear(g, xin, "enc.embed", e, h);
    let pos = g.param("enc.pos", s, h);
    let h0 = g.add(emb, pos);
    let mut x_cur = dropout(g, h0, "drop.embed", drop);

    for l in 0..cfg.layers {
        let q = linear(g, x_cur, &format!("enc.l{l}.attn.q"), h, h);
        let k = linear(g, x_cur, &format!("enc.l{l}.attn.k"), h, h);
        let v = linear(g, x_cur, &format!("enc.l{l}.attn.v"), h, h);
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = g.slice_cols(q, hd * d, d);
            let kh = g.slice_cols(k, hd * d, d);
            let vh = g.slice_cols(v, hd * d, d);
            heads.push(attend(g, qh, kh, vh, tau_delta, d));
        }
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let proj = linear(g, ctx, &format!("enc.l{l}.attn.out"), h, h);
        let proj = dropout(g, proj, &format!("drop.l{l}.attn"), drop);
        let res1 = g.add(x_cur, proj);
        let normed1 = layer_norm(g, res1, &format!("enc.l{l}.ln1"));

        let f1 = linear(g, normed1, &format!("enc.l{l}.ffn.in"), h, cfg.ffn);
        let act = gelu(g, f1);
        let f2 = linear(g, act, &format!("enc.l{l}.ffn.out"), cfg.ffn, h);
        let f2 = dropout(g, f2, &format!("drop.l{l}.ffn"), drop);
        let res2 = g.add(normed1, f2);
        x_cur = layer_norm(g, res2, &format!("enc.l{l}.ln2"));
    }
    g.name_node(x_cur, "hidden");
    EncoderNodes { hidden: x_cur, stats }
}

/// Reconstruction head: linear H->E, then de-normalization when stats exist.
pub fn build_decoder(
    g: &mut Graph,
    cfg: &EncoderConfig,
    hidden: NodeId,
    stats: Option<(NodeId, NodeId)>,
) -> NodeId {
    let s = g.shape(hidden).0;
    let y = linear(g, hidden, "dec", cfg.hidden, cfg.input_features);
    match stats {
        Some((mu, sigma)) => {
            let sigb = g.broadcast_rows(sigma, s);
            let mub = g.broadcast_rows(mu, s);
            let scaled = g.mul(y, sigb);
            g.add(scaled, mub)
        }
        None => y,
    }
}

/// Single-layer GRU over the S hidden rows (update/reset gates, tanh
/// candidate, last state), then a linear readout to `num_classes` logits.
///
/// Gate packing: `cls.gru.wx`/`bx` hold the input projections for (z, r, n)
/// side by side; `cls.gru.uzr` holds the recurrent (z, r) projections and
/// `cls.gru.un` the candidate's recurrent projection.
pub fn build_classifier(g: &mut Graph, cfg: &EncoderConfig, hidden: NodeId, num_classes: usize) -> NodeId {
    let (s, h) = g.shape(hidden);
    let gh = cfg.gru_hidden;
    let wx = g.param("cls.gru.wx", h, 3 * gh);
    let bx = g.param("cls.gru.bx", 1, 3 * gh);
    let uzr = g.param("cls.gru.uzr", gh, 2 * gh);
    let un = g.param("cls.gru.un", gh, gh);
    let xw = g.matmul(hidden, wx);
    let bb = g.broadcast_rows(bx, s);
    let xproj = g.add(xw, bb); // S x 3G, all steps at once

    let mut state: Option<NodeId> = None;
    for t in 0..s {
        let row = g.slice_rows(xproj, t, 1);
        let xz = g.slice_cols(row, 0, gh);
        let xr = g.slice_cols(row, gh, gh);
        let xn = g.slice_cols(row, 2 * gh, gh);
        state = Some(match state {
            None => {
                // h0 = 0: z = sigmoid(xz), candidate = tanh(xn), h1 = z*n
                let z = g.sigmoid(xz);
                let n = g.tanh(xn);
                g.mul(z, n)
            }
            Some(prev) => {
                let rec = g.matmul(prev, uzr); // 1 x 2G
                let rz = g.slice_cols(rec, 0, gh);
                let rr = g.slice_cols(rec, gh, gh);
                let z_in = g.add(xz, rz);
                let z = g.sigmoid(z_in);
                let r_in = g.add(xr, rr);
                let r = g.sigmoid(r_in);
                let gated = g.mul(r, prev);
                let rec_n = g.matmul(gated, un);
                let n_in = g.add(xn, rec_n);
                let n = g.tanh(n_in);
                // h' = (1 - z) * prev + z * n = prev - z*prev + z*n
                let zp = g.mul(z, prev);
                let zn = g.mul(z, n);
                let keep = g.sub(prev, zp);
                g.add(keep, zn)
            }
        });
    }
    let last = state.expect("seq_len >= 1");
    g.name_node(last, "gru_state");
    linear(g, last, "cls.out", gh, num_classes)
}

/// Attach the masked-MSE reconstruction loss: inputs `target` (SxE) and
/// `mask_w` (Sx1, prescaled row weights); output `loss` plus `recon`.
fn attach_recon_loss(g: &mut Graph, cfg: &EncoderConfig, recon: NodeId) {
    let (s, e) = (cfg.seq_len, cfg.input_features);
    let target = g.input("target", s, e);
    let mask_w = g.input("mask_w", s, 1);
    let diff = g.sub(recon, target);
    let sq = g.mul(diff, diff);
    let mw = g.broadcast_cols(mask_w, e);
    let weighted = g.mul(sq, mw);
    let loss = g.sum_all(weighted);
    g.mark_output("recon", recon);
    g.mark_output("loss", loss);
}

/// Attach the cross-entropy loss: input `label` (1xC one-hot); outputs
/// `loss` and `probs`.
fn attach_ce_loss(g: &mut Graph, logits: NodeId, num_classes: usize) {
    let label = g.input("label", 1, num_classes);
    let logp = g.row_log_softmax(logits);
    let picked = g.mul(logp, label);
    let sum = g.sum_all(picked);
    let loss = g.scale(sum, -1.0);
    let probs = g.row_softmax(logits);
    g.mark_output("probs", probs);
    g.mark_output("loss", loss);
}

/// Masked-reconstruction pretraining graph: input `x` -> encoder -> decoder
/// -> masked MSE against `target`.
pub fn build_pretrain_graph(cfg: &EncoderConfig, train_mode: bool) -> Graph {
    let mut g = Graph::new();
    let x = g.input("x", cfg.seq_len, cfg.input_features);
    let enc = build_encoder(&mut g, cfg, x, train_mode);
    let recon = build_decoder(&mut g, cfg, enc.hidden, enc.stats);
    g.mark_output("hidden", enc.hidden);
    attach_recon_loss(&mut g, cfg, recon);
    g
}

/// Supervised finetuning graph: input `x` -> encoder -> GRU classifier ->
/// cross-entropy against `label`.
pub fn build_finetune_graph(cfg: &EncoderConfig, num_classes: usize, train_mode: bool) -> Graph {
    let mut g = Graph::new();
    let x = g.input("x", cfg.seq_len, cfg.input_features);
    let enc = build_encoder(&mut g, cfg, x, train_mode);
    let logits = build_classifier(&mut g, cfg, enc.hidden, num_classes);
    g.mark_output("hidden", enc.hidden);
    attach_ce_loss(&mut g, logits, num_classes);
    g
}

/// Encoder-only graph (feature extraction; no dropout).
pub fn build_feature_graph(cfg: &EncoderConfig) -> Graph {
    let mut g = Graph::new();
    let x = g.input("x", cfg.seq_len, cfg.input_features);
    let enc = build_encoder(&mut g, cfg, x, false);
    g.mark_output("hidden", enc.hidden);
    g
}

/// Classifier-only graph on precomputed features (frozen-encoder fast path).
pub fn build_head_graph(cfg: &EncoderConfig, num_classes: usize) -> Graph {
    let mut g = Graph::new();
    let hidden = g.input("hidden", cfg.seq_len, cfg.hidden);
    let logits = build_classifier(&mut g, cfg, hidden, num_classes);
    attach_ce_loss(&mut g, logits, num_classes);
    g
}

// ── initialization ──────────────────────────────────────────────────────────

/// Initialize every parameter a graph declares. Weights are Xavier-uniform,
/// biases and projector output layers zero (so tau = exp(0) = 1 and delta = 0
/// at the start: the de-stationary model begins exactly at the vanilla one),
/// layer norms at gain 1 / bias 0, positions N(0, 0.02). Each parameter
/// draws from its own name-derived stream, so init is independent of
/// declaration order.
pub fn init_for_graph<T: Scalar>(graph: &Graph, seed: u64) -> ParamSet<T> {
    let mut out = ParamSet::new();
    for name in graph.param_names() {
        let id = graph.param_node(name).expect("listed param exists");
        let (rows, cols) = graph.shape(id);
        let mut r = rng::stream(seed, &format!("init:{name}"));
        let arr: Array<f64> = if name.ends_with(".gamma") {
            Array::filled(rows, cols, 1.0)
        } else if name.ends_with(".beta") || name.ends_with(".b") || name.ends_with(".bx") {
            Array::zeros(rows, cols)
        } else if name == "enc.pos" {
            let normal = Normal::new(0.0, 0.02).expect("valid sigma");
            Array::from_fn(rows, cols, |_, _| normal.sample(&mut r))
        } else if name.starts_with("enc.proj.") && name.contains(".l2.") {
            Array::zeros(rows, cols)
        } else if name == "cls.out.w" {
            // zero readout: uniform initial class probabilities, and training
            // is exactly equivariant under class relabeling
            Array::zeros(rows, cols)
        } else {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Array::from_fn(rows, cols, |_, _| r.gen_range(-a..a))
        };
        out.insert(name, arr.cast());
    }
    out
}

/// Sample inverted-dropout masks for every `drop.*` input of a graph:
/// elements are 0 with probability p, else 1/(1-p).
pub fn dropout_masks<T: Scalar>(
    graph: &Graph,
    p: f64,
    rng: &mut impl Rng,
) -> Vec<(String, Array<T>)> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mut out = Vec::new();
    let names: Vec<String> = graph
        .input_names()
        .filter(|n| n.starts_with("drop."))
        .map(|s| s.to_string())
        .collect();
    for name in names {
        let nid = graph.input_node(&name).expect("listed input exists");
        let (rows, cols) = graph.shape(nid);
        let arr = Array::from_fn(rows, cols, |_, _| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        out.push((name, arr));
    }
    out
}

// ── plain-array operations (f64 wrappers over the builders) ────────────────

/// Per-window normalization: X' = (X - mu) / sigma per feature, with
/// sigma = sqrt(population var + FLOOR^2).
pub fn stationarize(x: &Array<f64>) -> (Array<f64>, StationStats) {
    let (s, e) = x.shape();
    let mut mu = vec![0.0; e];
    for i in 0..s {
        for (c, m) in mu.iter_mut().enumerate() {
            *m += x.get(i, c);
        }
    }
    for m in mu.iter_mut() {
        *m /= s as f64;
    }
    let mut var = vec![0.0; e];
    for i in 0..s {
        for (c, v) in var.iter_mut().enumerate() {
            let d = x.get(i, c) - mu[c];
            *v += d * d;
        }
    }
    let sigma: Vec<f64> =
        var.iter().map(|v| (v / s as f64 + STATION_FLOOR * STATION_FLOOR).sqrt()).collect();
    let mut xn = x.clone();
    for i in 0..s {
        for c in 0..e {
            xn.set(i, c, (x.get(i, c) - mu[c]) / sigma[c]);
        }
    }
    (xn, StationStats { mu, sigma })
}

/// Eq-4-style de-normalization: sigma ⊙ y' + mu per row.
pub fn destationarize(y: &Array<f64>, stats: &StationStats) -> Result<Array<f64>, ModelError> {
    let (s, e) = y.shape();
    if stats.mu.len() != e || stats.sigma.len() != e {
        return Err(ModelError::Shape(format!(
            "stats length {} vs {} features",
            stats.mu.len(),
            e
        )));
    }
    let mut out = y.clone();
    for i in 0..s {
        for c in 0..e {
            out.set(i, c, y.get(i, c) * stats.sigma[c] + stats.mu[c]);
        }
    }
    Ok(out)
}

/// Evaluate the tau/delta projectors on window stats + raw input.
pub fn tau_delta_project(
    stats: &StationStats,
    x_raw: &Array<f64>,
    params: &ParamSet<f64>,
) -> Result<(f64, Vec<f64>), ModelError> {
    let (s, e) = x_raw.shape();
    if stats.mu.len() != e {
        return Err(ModelError::Shape(format!("stats length {} vs {} features", stats.mu.len(), e)));
    }
    let p = params.get("enc.proj.tau.l1.w")?.cols();
    let cfg = EncoderConfig {
        seq_len: s,
        input_features: e,
        projector_hidden: p,
        ..EncoderConfig::default()
    };
    let mut g = Graph::new();
    let x = g.input("x", s, e);
    let mu = g.input("mu", 1, e);
    let sigma = g.input("sigma", 1, e);
    let (tau, delta) = build_tau_delta(&mut g, &cfg, x, mu, sigma);
    g.mark_output("tau", tau);
    g.mark_output("delta", delta);
    let mut ev = Evaluator::new(&g);
    ev.bind("x", x_raw)?;
    ev.bind("mu", &Array::row(stats.mu.clone()))?;
    ev.bind("sigma", &Array::row(stats.sigma.clone()))?;
    params.bind_into(&mut ev)?;
    ev.forward()?;
    let tau = ev.output_scalar("tau")?;
    let delta = ev.output("delta")?.into_data();
    Ok((tau, delta))
}

/// De-stationary attention on explicit inputs:
/// row-softmax((tau * Q'K'^T + 1 delta^T)/sqrt(d)) V'.
pub fn destationary_attention(
    q: &Array<f64>,
    k: &Array<f64>,
    v: &Array<f64>,
    tau: f64,
    delta: &[f64],
) -> Result<Array<f64>, ModelError> {
    if tau <= 0.0 {
        return Err(ModelError::NonPositiveTau(tau));
    }
    let (s, d) = q.shape();
    if k.shape() != (s, d) || v.shape() != (s, d) || delta.len() != s {
        return Err(ModelError::Shape(format!(
            "q {:?}, k {:?}, v {:?}, delta length {}",
            q.shape(),
            k.shape(),
            v.shape(),
            delta.len()
        )));
    }
    let mut g = Graph::new();
    let qn = g.input("q", s, d);
    let kn = g.input("k", s, d);
    let vn = g.input("v", s, d);
    let tau_in = g.input("tau", 1, 1);
    let delta_in = g.input("delta", s, 1);
    let tau_col = g.broadcast_rows(tau_in, s);
    let taub = g.broadcast_cols(tau_col, s);
    let delta_row = g.transpose(delta_in);
    let deltab = g.broadcast_rows(delta_row, s);
    let out = attend(&mut g, qn, kn, vn, Some((taub, deltab)), d);
    g.mark_output("out", out);
    let mut ev = Evaluator::new(&g);
    ev.bind("q", q)?;
    ev.bind("k", k)?;
    ev.bind("v", v)?;
    ev.bind("tau", &Array::scalar(tau))?;
    ev.bind("delta", &Array::col(delta.to_vec()))?;
    ev.forward()?;
    Ok(ev.output("out")?)
}

/// Run the encoder once at f64 (tests/diagnostics). Dropout (train mode
/// only) draws from the given seed.
pub fn encode(
    x: &Array<f64>,
    params: &ParamSet<f64>,
    cfg: &EncoderConfig,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(Array<f64>, StationStats), ModelError> {
    cfg.validate()?;
    if x.shape() != (cfg.seq_len, cfg.input_features) {
        return Err(ModelError::Shape(format!(
            "input {:?} vs config {}x{}",
            x.shape(),
            cfg.seq_len,
            cfg.input_features
        )));
    }
    let mut g = Graph::new();
    let xin = g.input("x", cfg.seq_len, cfg.input_features);
    let enc = build_encoder(&mut g, cfg, xin, train_mode);
    g.mark_output("hidden", enc.hidden);
    let mut ev = Evaluator::new(&g);
    ev.bind("x", x)?;
    params.bind_into(&mut ev)?;
    if train_mode && cfg.dropout > 0.0 {
        let mut r = rng::stream(dropout_seed, "dropout");
        for (name, mask) in dropout_masks::<f64>(&g, cfg.dropout, &mut r) {
            ev.bind(&name, &mask)?;
        }
    }
    ev.forward()?;
    let hidden = ev.output("hidden")?;
    let stats = match cfg.arm {
        ModelArm::Ns => {
            let (_, st) = stationarize(x);
            st
        }
        ModelArm::Vanilla => StationStats {
            mu: vec![0.0; cfg.input_features],
            sigma: vec![1.0; cfg.input_features],
        },
    };
    Ok((hidden, stats))
}

/// Reconstruction head at f64: linear H->E then de-normalization.
pub fn decode(
    hidden: &Array<f64>,
    stats: &StationStats,
    params: &ParamSet<f64>,
    cfg: &EncoderConfig,
) -> Result<Array<f64>, ModelError> {
    if hidden.shape() != (cfg.seq_len, cfg.hidden) {
        return Err(ModelError::Shape(format!(
            "hidden {:?} vs config {}x{}",
            hidden.shape(),
            cfg.seq_len,
            cfg.hidden
        )));
    }
    let w = params.get("dec.w")?;
    let b = params.get("dec.b")?;
    let (s, h) = hidden.shape();
    let e = w.cols();
    if w.rows() != h || b.cols() != e || stats.mu.len() != e {
        return Err(ModelError::Shape("decoder parameter shapes".into()));
    }
    let mut y = Array::zeros(s, e);
    for i in 0..s {
        for j in 0..e {
            let mut acc = b.get(0, j);
            for p in 0..h {
                acc += hidden.get(i, p) * w.get(p, j);
            }
            y.set(i, j, acc);
        }
    }
    destationarize(&y, stats)
}

/// GRU classifier at f64: probability vector over classes.
pub fn classify(
    hidden: &Array<f64>,
    params: &ParamSet<f64>,
    cfg: &EncoderConfig,
) -> Result<Vec<f64>, ModelError> {
    if hidden.shape() != (cfg.seq_len, cfg.hidden) {
        return Err(ModelError::Shape(format!(
            "hidden {:?} vs config {}x{}",
            hidden.shape(),
            cfg.seq_len,
            cfg.hidden
        )));
    }
    let num_classes = params.get("cls.out.w")?.cols();
    let mut g = Graph::new();
    let hin = g.input("hidden", cfg.seq_len, cfg.hidden);
    let logits = build_classifier(&mut g, cfg, hin, num_classes);
    let probs = g.row_softmax(logits);
    g.mark_output("probs", probs);
    let mut ev = Evaluator::new(&g);
    ev.bind("hidden", hidden)?;
    params.bind_into(&mut ev)?;
    ev.forward()?;
    Ok(ev.output("probs")?.into_data())
}

// ── tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Bindings};
    use rand::Rng;

    /// Tiny config for oracle tests.
    fn tiny(arm: ModelArm) -> EncoderConfig {
        EncoderConfig {
            seq_len: 8,
            input_features: 6,
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            projector_hidden: 5,
            dropout: 0.0,
            gru_hidden: 4,
            arm,
        }
    }

    fn rand_array(rows: usize, cols: usize, r: &mut impl Rng) -> Array<f64> {
        Array::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
    }

    /// Random params for a graph, including nonzero projector output layers
    /// (training init zeroes those; oracles want them active).
    fn rand_params(g: &Graph, seed: u64) -> ParamSet<f64> {
        let mut out = ParamSet::new();
        for name in g.param_names() {
            let id = g.param_node(name).unwrap();
            let (rows, cols) = g.shape(id);
            let mut r = rng::stream(seed, &format!("t:{name}"));
            let scale = if name.ends_with(".gamma") { 0.2 } else { 0.5 };
            let mut arr = rand_array(rows, cols, &mut r).map(|v| v * scale);
            if name.ends_with(".gamma") {
                arr = arr.map(|v| 1.0 + v);
            }
            out.insert(name, arr);
        }
        out
    }

    #[test]
    fn stationarize_matches_pinned_examples_and_round_trips() {
        // constant column -> mu 5, sigma at the floor, zeros out
        let x = Array::from_fn(4, 2, |i, c| if c == 0 { 5.0 } else { (i * 2) as f64 });
        let (xn, stats) = stationarize(&x);
        assert_eq!(stats.mu[0], 5.0);
        assert!((stats.sigma[0] - STATION_FLOOR).abs() < 1e-18);
        for i in 0..4 {
            assert_eq!(xn.get(i, 0), 0.0);
        }

        // column [1, 3] -> mu 2, sigma 1, x' = [-1, 1]
        let x = Array::from_rows(&[vec![1.0], vec![3.0]]);
        let (xn, stats) = stationarize(&x);
        assert_eq!(stats.mu[0], 2.0);
        assert!((stats.sigma[0] - 1.0).abs() < 1e-9);
        assert!((xn.get(0, 0) + 1.0).abs() < 1e-9);
        assert!((xn.get(1, 0) - 1.0).abs() < 1e-9);

        // normalized columns: mean 0 within 1e-9, population std 1 within 1e-6
        let mut r = rng::stream(3, "st");
        let x = rand_array(50, 4, &mut r).map(|v| v * 7.0 + 2.0);
        let (xn, stats) = stationarize(&x);
        for c in 0..4 {
            let mean: f64 = (0..50).map(|i| xn.get(i, c)).sum::<f64>() / 50.0;
            let var: f64 = (0..50).map(|i| (xn.get(i, c) - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
        // round trip
        let back = destationarize(&xn, &stats).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn destationarize_zero_and_identity_cases() {
        let stats = StationStats { mu: vec![1.5, -2.0], sigma: vec![0.5, 3.0] };
        let zeros = Array::zeros(3, 2);
        let out = destationarize(&zeros, &stats).unwrap();
        for i in 0..3 {
            assert_eq!(out.get(i, 0), 1.5);
            assert_eq!(out.get(i, 1), -2.0);
        }
        let id_stats = StationStats { mu: vec![0.0, 0.0], sigma: vec![1.0, 1.0] };
        let mut r = rng::stream(1, "d");
        let y = rand_array(3, 2, &mut r);
        assert_eq!(destationarize(&y, &id_stats).unwrap(), y);
        // shape mismatch
        let bad = StationStats { mu: vec![0.0], sigma: vec![1.0] };
        assert!(matches!(destationarize(&y, &bad), Err(ModelError::Shape(_))));
    }

    #[test]
    fn zero_projectors_give_tau_one_delta_zero() {
        let cfg = tiny(ModelArm::Ns);
        let g = build_pretrain_graph(&cfg, false);
        // training init zeroes the projector output layers by design
        let params: ParamSet<f64> = init_for_graph(&g, 9);
        let mut r = rng::stream(4, "x");
        let x = rand_array(cfg.seq_len, 6, &mut r);
        let (_, stats) = stationarize(&x);
        let (tau, delta) = tau_delta_project(&stats, &x, &params).unwrap();
        assert_eq!(tau, 1.0);
        assert!(delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn tau_stays_positive_over_many_random_draws() {
        let cfg = tiny(ModelArm::Ns);
        let g = build_pretrain_graph(&cfg, false);
        let mut r = rng::stream(10, "tau");
        for trial in 0..1000 {
            let params = rand_params(&g, trial);
            let x = rand_array(cfg.seq_len, 6, &mut r).map(|v| v * 3.0);
            let (_, stats) = stationarize(&x);
            let (tau, delta) = tau_delta_project(&stats, &x, &params).unwrap();
            assert!(tau > 0.0, "trial {trial}: tau {tau}");
            assert_eq!(delta.len(), cfg.seq_len);
        }
    }

    /// Independent plain-loop attention used as the oracle.
    fn vanilla_attention(q: &Array<f64>, k: &Array<f64>, v: &Array<f64>) -> Array<f64> {
        let (s, d) = q.shape();
        let mut out = Array::zeros(s, d);
        for i in 0..s {
            let mut scores = vec![0.0; s];
            for j in 0..s {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q.get(i, c) * k.get(j, c);
                }
                scores[j] = dot / (d as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += exps[j] / z * v.get(j, c);
                }
                out.set(i, c, acc);
            }
        }
        out
    }

    #[test]
    fn attention_with_unit_tau_zero_delta_is_vanilla() {
        for trial in 0..100 {
            let mut r = rng::stream(trial, "attn");
            let (s, d) = (7, 4);
            let q = rand_array(s, d, &mut r);
            let k = rand_array(s, d, &mut r);
            let v = rand_array(s, d, &mut r);
            let got = destationary_attention(&q, &k, &v, 1.0, &vec![0.0; s]).unwrap();
            let want = vanilla_attention(&q, &k, &v);
            assert!(got.max_abs_diff(&want) < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn attention_on_a_single_step_returns_v() {
        let mut r = rng::stream(5, "s1");
        let q = rand_array(1, 4, &mut r);
        let k = rand_array(1, 4, &mut r);
        let v = rand_array(1, 4, &mut r);
        let out = destationary_attention(&q, &k, &v, 2.5, &[7.0]).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn attention_rejects_non_positive_tau() {
        let q = Array::zeros(2, 2);
        assert!(matches!(
            destationary_attention(&q, &q, &q, 0.0, &[0.0, 0.0]),
            Err(ModelError::NonPositiveTau(_))
        ));
        assert!(matches!(
            destationary_attention(&q, &q, &q, -1.0, &[0.0, 0.0]),
            Err(ModelError::NonPositiveTau(_))
        ));
    }

    /// Shared-scalar-std oracle: Q' = (Q - mu_Q)/sigma, K' = (K - mu_K)/sigma,
    /// tau = sigma^2, delta[j] = mu_Q . K_j. The de-stationarized scores must
    /// reproduce softmax(QK^T/sqrt(d)) because the two dropped terms are
    /// row-constant.
    #[test]
    fn destationary_attention_recovers_raw_attention() {
        for trial in 0..100 {
            let mut r = rng::stream(trial, "eq23");
            let (s, d) = (6, 4);
            let q = rand_array(s, d, &mut r).map(|v| v * 2.0 + 0.3);
            let k = rand_array(s, d, &mut r).map(|v| v * 2.0 - 0.7);
            let v = rand_array(s, d, &mut r);
            let sigma = r.gen_range(0.5..2.0);
            let mut mu_q = vec![0.0; d];
            let mut mu_k = vec![0.0; d];
            for j in 0..s {
                for c in 0..d {
                    mu_q[c] += q.get(j, c) / s as f64;
                    mu_k[c] += k.get(j, c) / s as f64;
                }
            }
            let qp = Array::from_fn(s, d, |i, c| (q.get(i, c) - mu_q[c]) / sigma);
            let kp = Array::from_fn(s, d, |i, c| (k.get(i, c) - mu_k[c]) / sigma);
            let delta: Vec<f64> =
                (0..s).map(|j| (0..d).map(|c| mu_q[c] * k.get(j, c)).sum()).collect();
            let got = destationary_attention(&qp, &kp, &v, sigma * sigma, &delta).unwrap();
            let want = vanilla_attention(&q, &k, &v);
            assert!(got.max_abs_diff(&want) < 1e-5, "trial {trial}: {}", got.max_abs_diff(&want));
        }
    }

    #[test]
    fn encoder_shape_determinism_and_scale_robustness() {
        for arm in [ModelArm::Ns, ModelArm::Vanilla] {
            let cfg = tiny(arm);
            let g = build_pretrain_graph(&cfg, false);
            let params = rand_params(&g, 77);
            let mut r = rng::stream(8, "enc");
            let x = rand_array(cfg.seq_len, 6, &mut r);
            let (h1, _) = encode(&x, &params, &cfg, false, 0).unwrap();
            let (h2, _) = encode(&x, &params, &cfg, false, 9).unwrap();
            assert_eq!(h1.shape(), (cfg.seq_len, cfg.hidden));
            assert_eq!(h1, h2); // eval mode ignores the dropout seed

            // large-magnitude input stays finite end to end
            let big = x.map(|v| v * 1e3);
            let (hb, stats) = encode(&big, &params, &cfg, false, 0).unwrap();
            assert!(hb.all_finite());
            let recon = decode(&hb, &stats, &params, &cfg).unwrap();
            assert!(recon.all_finite());
            assert_eq!(recon.shape(), (cfg.seq_len, 6));
        }
    }

    #[test]
    fn decoder_zero_head_reproduces_window_means() {
        let cfg = tiny(ModelArm::Ns);
        let g = build_pretrain_graph(&cfg, false);
        let mut params = rand_params(&g, 3);
        params.insert("dec.w", Array::zeros(cfg.hidden, 6));
        params.insert("dec.b", Array::zeros(1, 6));
        let mut r = rng::stream(2, "dec");
        let x = rand_array(cfg.seq_len, 6, &mut r).map(|v| v * 4.0 + 1.0);
        let (hidden, stats) = encode(&x, &params, &cfg, false, 0).unwrap();
        let recon = decode(&hidden, &stats, &params, &cfg).unwrap();
        for i in 0..cfg.seq_len {
            for c in 0..6 {
                assert!((recon.get(i, c) - stats.mu[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classifier_is_a_probability_vector_and_permutation_equivariant() {
        let cfg = tiny(ModelArm::Ns);
        let gph = build_finetune_graph(&cfg, 3, false);
        let params = rand_params(&gph, 21);
        let mut r = rng::stream(6, "cls");
        let hidden = rand_array(cfg.seq_len, cfg.hidden, &mut r);
        let probs = classify(&hidden, &params, &cfg).unwrap();
        assert_eq!(probs.len(), 3);
        assert!(probs.iter().all(|&p| p >= 0.0));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        // swap the output columns for classes 0 and 2
        let mut swapped = params.clone();
        let w = params.get("cls.out.w").unwrap();
        let b = params.get("cls.out.b").unwrap();
        let perm = [2usize, 1, 0];
        swapped.insert(
            "cls.out.w",
            Array::from_fn(w.rows(), 3, |i, j| w.get(i, perm[j])),
        );
        swapped.insert("cls.out.b", Array::from_fn(1, 3, |i, j| b.get(i, perm[j])));
        let probs_swapped = classify(&hidden, &swapped, &cfg).unwrap();
        for j in 0..3 {
            assert!((probs_swapped[j] - probs[perm[j]]).abs() < 1e-12);
        }
    }

    /// One GRU step on S=1, checked against the gate equations computed with
    /// plain scalar math (update gate z, reset gate r unused at h0=0,
    /// candidate n): h1 = z ⊙ tanh(x W_n + b_n), z = sigmoid(x W_z + b_z).
    #[test]
    fn gru_single_step_matches_hand_equations() {
        let cfg = EncoderConfig { seq_len: 1, gru_hidden: 2, hidden: 3, ..tiny(ModelArm::Vanilla) };
        let mut g = Graph::new();
        let hid = g.input("hidden", 1, 3);
        let _logits = build_classifier(&mut g, &cfg, hid, 2);
        let state = g.node_named("gru_state").expect("gru_state named");
        g.mark_output("state", state);

        let x = [0.3, -0.5, 0.8];
        // wx packs (z, r, n) blocks of width 2
        let wx = Array::from_fn(3, 6, |i, j| ((i * 6 + j) as f64 * 0.07) - 0.6);
        let bx = Array::from_fn(1, 6, |_, j| 0.05 * j as f64 - 0.1);
        let mut ev = Evaluator::new(&g);
        ev.bind("hidden", &Array::row(x.to_vec())).unwrap();
        ev.bind("cls.gru.wx", &wx).unwrap();
        ev.bind("cls.gru.bx", &bx).unwrap();
        ev.bind("cls.gru.uzr", &Array::filled(2, 4, 0.33)).unwrap();
        ev.bind("cls.gru.un", &Array::filled(2, 2, -0.2)).unwrap();
        ev.bind("cls.out.w", &Array::zeros(2, 2)).unwrap();
        ev.bind("cls.out.b", &Array::zeros(1, 2)).unwrap();
        ev.forward().unwrap();
        let got = ev.output("state").unwrap();

        for u in 0..2 {
            let mut xz = bx.get(0, u);
            let mut xn = bx.get(0, 4 + u);
            for (i, &xv) in x.iter().enumerate() {
                xz += xv * wx.get(i, u);
                xn += xv * wx.get(i, 4 + u);
            }
            let z = 1.0 / (1.0 + (-xz).exp());
            let n = xn.tanh();
            assert!((got.get(0, u) - z * n).abs() < 1e-12, "unit {u}");
        }
    }

    #[test]
    fn whole_network_gradients_pass_the_finite_difference_check() {
        // pretrain loss (ns arm) and finetune loss, tiny config, f64
        let cfg = tiny(ModelArm::Ns);
        let g = build_pretrain_graph(&cfg, false);
        let mut bind: Bindings<f64> = rand_params(&g, 31).0;
        let mut r = rng::stream(12, "gc");
        bind.insert("x".into(), rand_array(cfg.seq_len, 6, &mut r));
        bind.insert("target".into(), rand_array(cfg.seq_len, 6, &mut r));
        let mut mask = Array::zeros(cfg.seq_len, 1);
        for i in 0..3 {
            mask.set(i * 2, 0, 1.0 / (3.0 * 6.0));
        }
        bind.insert("mask_w".into(), mask);
        let report = grad_check(&g, &bind, "loss", 1e-4, 1e-4, 0).unwrap();
        assert!(report.pass, "pretrain worst {}", report.worst);

        let gf = build_finetune_graph(&cfg, 3, false);
        let mut bind: Bindings<f64> = rand_params(&gf, 32).0;
        bind.insert("x".into(), rand_array(cfg.seq_len, 6, &mut r));
        bind.insert("label".into(), Array::row(vec![0.0, 1.0, 0.0]));
        let report = grad_check(&gf, &bind, "loss", 1e-4, 1e-4, 1).unwrap();
        assert!(report.pass, "finetune worst {}", report.worst);
    }

    #[test]
    fn config_validation_rejects_bad_sizes() {
        let mut cfg = EncoderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.hidden = 70; // not divisible by 4 heads
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
        cfg = EncoderConfig { layers: 0, ..EncoderConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = EncoderConfig { dropout: 1.0, ..EncoderConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = EncoderConfig { seq_len: 1, ..EncoderConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dropout_masks_scale_and_zero() {
        let cfg = EncoderConfig { dropout: 0.5, ..tiny(ModelArm::Ns) };
        let g = build_pretrain_graph(&cfg, true);
        let mut r = rng::stream(3, "dm");
        let masks = dropout_masks::<f64>(&g, 0.5, &mut r);
        // embed + layers*(attn, ffn) sites
        assert_eq!(masks.len(), 1 + 2 * cfg.layers);
        for (_, m) in &masks {
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 2.0));
        }
        // train-mode graph exposes the mask inputs; eval-mode graph does not
        let ge = build_pretrain_graph(&cfg, false);
        assert_eq!(ge.input_names().filter(|n| n.starts_with("drop.")).count(), 0);
    }
}
