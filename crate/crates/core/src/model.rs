//! Lightweight trajectory embedding model.
//!
//! A GRU encoder summarizes the observed grid tokens of an incomplete
//! trajectory into one hidden vector. A decoder of stacked recurrent blocks
//! then emits one `(segment, ratio)` prediction per grid timestamp through
//! a multi-task head: a dense layer scored against per-segment class
//! vectors under a distance-based constraint mask, followed by a ratio
//! regressor conditioned on the chosen segment.

use std::sync::Arc;

use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    matvec_t_acc, outer_acc, DenseGrad, Gradient, GruCache, GruCell, GruGrad, LayerParams, Layout,
    ParameterVector, RnnCache, Segment, Tape, CE_FLOOR,
};
use crate::error::{Error, Result};
use crate::roadnet::{GridSpec, MapMatchedPoint, RoadNetwork};
use crate::seed::Rng;
use crate::trajdata::{to_grid_sequence, GridToken, IncompleteTrajectory, MapMatchedTrajectory};

/// Model hyper-parameters as they appear in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub seg_embed_dim: usize,
    pub dropout: f64,
    pub mu: f64,
    pub gamma: f64,
    pub mask_radius: f64,
    pub blocks: usize,
    pub teacher_forcing: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            seg_embed_dim: 16,
            dropout: 0.5,
            mu: 1.0,
            gamma: 125.0,
            mask_radius: 300.0,
            blocks: 1,
            teacher_forcing: 1.0,
        }
    }
}

/// Full model configuration, including vocabulary sizes derived from the
/// network, grid, and maximum trajectory length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LteConfig {
    pub hidden_dim: usize,
    pub num_segments: usize,
    pub seg_embed_dim: usize,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub tid_vocab: usize,
    pub dropout: f64,
    pub mu: f64,
    pub gamma: f64,
    pub mask_radius: f64,
    pub teacher_forcing: f64,
    pub blocks: usize,
}

impl LteConfig {
    pub fn from_section(section: &ModelSection, net: &RoadNetwork, grid: &GridSpec, max_len: usize) -> Result<Self> {
        let cfg = Self {
            hidden_dim: section.hidden_dim,
            num_segments: net.num_edges(),
            seg_embed_dim: section.seg_embed_dim,
            grid_cols: grid.cols,
            grid_rows: grid.rows,
            tid_vocab: max_len,
            dropout: section.dropout,
            mu: section.mu,
            gamma: section.gamma,
            mask_radius: section.mask_radius,
            teacher_forcing: section.teacher_forcing,
            blocks: section.blocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.hidden_dim == 0 || self.seg_embed_dim == 0 || self.blocks == 0 {
            return bad("hidden_dim, seg_embed_dim and blocks must be >= 1");
        }
        if self.num_segments == 0 || self.grid_cols == 0 || self.grid_rows == 0 || self.tid_vocab == 0 {
            return bad("vocabulary sizes must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.mu >= 0.0) {
            return bad("mu must be non-negative");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.mask_radius > 0.0) {
            return bad("mask_radius must be positive");
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return bad("teacher_forcing must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let d = self.hidden_dim;
        let e = self.seg_embed_dim;
        let l = self.num_segments;
        let mut s = vec![
            Segment::new("tok.x", &[self.grid_cols, d], d),
            Segment::new("tok.y", &[self.grid_rows, d], d),
            Segment::new("tok.tid", &[self.tid_vocab, d], d),
        ];
        for gate in ["reset", "update", "cand"] {
            s.push(Segment::new(format!("enc.{gate}.w"), &[d, 2 * d], 2 * d));
            s.push(Segment::new(format!("enc.{gate}.b"), &[d], 2 * d));
        }
        for j in 0..self.blocks {
            let cols = d + self.block_input(j);
            s.push(Segment::new(format!("dec{j}.w"), &[d, cols], cols));
            s.push(Segment::new(format!("dec{j}.b"), &[d], cols));
        }
        s.push(Segment::new("head.dense.w", &[d, d], d));
        s.push(Segment::new("head.dense.b", &[d], d));
        s.push(Segment::new("head.classes", &[l, d], d));
        s.push(Segment::new("seg.emb", &[l, e], e));
        s.push(Segment::new("head.emb.w", &[d, e], e));
        s.push(Segment::new("head.emb.b", &[d], e));
        s.push(Segment::new("head.ratio.w", &[1, d + e], d + e));
        s.push(Segment::new("head.ratio.b", &[1], d + e));
        Layout::new(s)
    }

    fn block_input(&self, j: usize) -> usize {
        if j == 0 {
            self.seg_embed_dim + 1
        } else {
            self.hidden_dim
        }
    }
}

/// Per-segment views in layout order.
struct Parts<S> {
    tok_x: S,
    tok_y: S,
    tok_tid: S,
    enc: [(S, S); 3],
    dec: Vec<(S, S)>,
    dense: (S, S),
    classes: S,
    seg_emb: S,
    emb: (S, S),
    ratio: (S, S),
}

impl<S> Parts<S> {
    fn from_slices(slices: Vec<S>, blocks: usize) -> Self {
        let mut it = slices.into_iter();
        let mut next = move || it.next().expect("slices follow the model layout");
        let tok_x = next();
        let tok_y = next();
        let tok_tid = next();
        let enc = [(next(), next()), (next(), next()), (next(), next())];
        let dec = (0..blocks).map(|_| (next(), next())).collect();
        let dense = (next(), next());
        let classes = next();
        let seg_emb = next();
        let emb = (next(), next());
        let ratio = (next(), next());
        Self { tok_x, tok_y, tok_tid, enc, dec, dense, classes, seg_emb, emb, ratio }
    }
}

fn grad_of<'a>(pair: &'a mut (&mut [f64], &mut [f64])) -> DenseGrad<'a> {
    DenseGrad { w: &mut *pair.0, b: &mut *pair.1 }
}

/// Sparse constraint mask: the edges within the mask radius of an anchor and
/// their log weights `-dist²/γ`. An empty mask means "no constraint".
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMask {
    pub edges: Vec<usize>,
    pub log_weights: Vec<f64>,
}

impl ConstraintMask {
    pub fn weights(&self, num_segments: usize) -> Vec<f64> {
        let mut w = vec![0.0; num_segments];
        for (&e, &lw) in self.edges.iter().zip(&self.log_weights) {
            w[e] = lw.exp();
        }
        w
    }

    fn from_weights(mask: &[f64]) -> Self {
        let (edges, log_weights) = mask
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, w)| (i, w.ln()))
            .unzip();
        Self { edges, log_weights }
    }

    fn unconstrained(num_segments: usize) -> Self {
        Self { edges: (0..num_segments).collect(), log_weights: vec![0.0; num_segments] }
    }
}

/// Mask over all edges for an anchor position: `exp(-dist²/γ)` within
/// `radius` of the anchor, exactly zero beyond it.
pub fn constraint_log_mask(net: &RoadNetwork, anchor: (f64, f64), gamma: f64, radius: f64) -> ConstraintMask {
    let mut edges = Vec::new();
    let mut log_weights = Vec::new();
    for e in net.edges() {
        let (dist, _) = net.project(e.id, anchor.0, anchor.1).expect("edge ids are dense");
        if dist <= radius {
            edges.push(e.id);
            log_weights.push(-dist * dist / gamma);
        }
    }
    ConstraintMask { edges, log_weights }
}

/// Dense weight vector over edges; see [`constraint_log_mask`].
pub fn constraint_mask(net: &RoadNetwork, anchor: (f64, f64), gamma: f64, radius: f64) -> Vec<f64> {
    constraint_log_mask(net, anchor, gamma, radius).weights(net.num_edges())
}

/// Everything the model needs about one trajectory, precomputed once.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    tokens: Vec<GridToken>,
    slots: Vec<Option<MapMatchedPoint>>,
    times: Vec<f64>,
    masks: Vec<ConstraintMask>,
    truth: Option<Vec<(usize, f64)>>,
    epsilon: f64,
}

impl PreparedSample {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn tokens(&self) -> &[GridToken] {
        &self.tokens
    }

    pub fn masks(&self) -> &[ConstraintMask] {
        &self.masks
    }

    /// Ground-truth `(edge, ratio)` per grid slot, when prepared with one.
    pub fn truth(&self) -> Option<&[(usize, f64)]> {
        self.truth.as_deref()
    }
}

/// Anchor per grid slot: the observed position where there is one,
/// otherwise linear interpolation in time between the bracketing observations.
pub fn slot_anchors(icp: &IncompleteTrajectory, net: &RoadNetwork) -> Result<Vec<(f64, f64)>> {
    let slots = icp.slots();
    let observed: Vec<(usize, (f64, f64))> = icp
        .points()
        .iter()
        .map(|p| Ok((icp.slot_of(p), net.point_position(p)?)))
        .collect::<Result<_>>()?;
    let mut anchors = Vec::with_capacity(slots.len());
    let mut seg = 0;
    for k in 0..slots.len() {
        while seg + 1 < observed.len() && observed[seg + 1].0 <= k {
            seg += 1;
        }
        let (ka, pa) = observed[seg];
        if k == ka || seg + 1 == observed.len() {
            anchors.push(pa);
            continue;
        }
        let (kb, pb) = observed[seg + 1];
        let f = (k - ka) as f64 / (kb - ka) as f64;
        anchors.push((pa.0 + f * (pb.0 - pa.0), pa.1 + f * (pb.1 - pa.1)));
    }
    Ok(anchors)
}

/// Concatenation of pre-mask segment logits and the predicted ratio at one
/// decode step; the representation compared during distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRep {
    pub logits: Vec<f64>,
    pub ratio: f64,
}

/// Output of one decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStepOutput {
    pub probs: Vec<f64>,
    pub segment: usize,
    pub ratio: f64,
    pub hidden: Vec<Vec<f64>>,
}

struct EncoderTrace {
    tokens: Vec<GridToken>,
    dropout: Option<Vec<Vec<f64>>>,
    caches: Vec<GruCache>,
}

struct StepTrace {
    e_prev: usize,
    rnn: Vec<RnnCache>,
    h_d: Vec<f64>,
    support: Vec<usize>,
    probs: Vec<f64>,
    /// Dense over all segments when full logits were requested, otherwise
    /// aligned with `support`.
    logits: Vec<f64>,
    full: bool,
    segment: usize,
    head_edge: usize,
    emb_e: Vec<f64>,
    u: Vec<f64>,
    pre: Vec<f64>,
    h_e: Vec<f64>,
    a: f64,
    ratio: f64,
}

impl StepTrace {
    fn hidden(&self) -> Vec<Vec<f64>> {
        self.rnn.iter().map(|c| c.h.clone()).collect()
    }

    fn prob_of(&self, edge: usize) -> f64 {
        self.support
            .binary_search(&edge)
            .map(|pos| self.probs[pos])
            .unwrap_or(0.0)
    }
}

struct Trace {
    encoder: EncoderTrace,
    steps: Vec<StepTrace>,
    inputs: Vec<(usize, f64)>,
    truth: Vec<(usize, f64)>,
}

/// Weights of the training objective for one sample.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub mu: f64,
    pub lambda: f64,
    pub teacher: Option<&'a [StepRep]>,
}

impl Objective<'_> {
    fn distills(&self) -> bool {
        self.lambda != 0.0 && self.teacher.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub ratio_mse: f64,
    pub local: f64,
    pub distill: f64,
    pub total: f64,
}

/// A recorded teacher-forced forward pass over one sample.
pub struct ForwardPass {
    tape: Tape<Trace>,
}

impl ForwardPass {
    pub fn is_recorded(&self) -> bool {
        self.tape.is_recorded()
    }

    /// Decoder inputs `(e_prev, r_prev)` fed at every step.
    pub fn inputs(&self) -> Result<Vec<(usize, f64)>> {
        Ok(self.tape.get()?.inputs.clone())
    }

    pub fn reps(&self) -> Result<Vec<StepRep>> {
        let trace = self.tape.get()?;
        trace
            .steps
            .iter()
            .map(|s| {
                if !s.full {
                    return Err(Error::ShapeMismatch("forward pass did not record full logits".into()));
                }
                Ok(StepRep { logits: s.logits.clone(), ratio: s.ratio })
            })
            .collect()
    }

    /// Per-step dense probability vectors and predicted ratios.
    pub fn predictions(&self, num_segments: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let trace = self.tape.get()?;
        let probs = trace
            .steps
            .iter()
            .map(|s| {
                let mut p = vec![0.0; num_segments];
                for (&e, &v) in s.support.iter().zip(&s.probs) {
                    p[e] = v;
                }
                p
            })
            .collect();
        Ok((probs, trace.steps.iter().map(|s| s.ratio).collect()))
    }

    pub fn loss(&self, objective: &Objective<'_>) -> Result<LossBreakdown> {
        compute_loss(self.tape.get()?, objective)
    }
}

fn compute_loss(trace: &Trace, objective: &Objective<'_>) -> Result<LossBreakdown> {
    let k = trace.steps.len() as f64;
    let mut ce = 0.0;
    let mut sq = 0.0;
    for (s, &(edge, r)) in trace.steps.iter().zip(&trace.truth) {
        ce += -(s.prob_of(edge) + CE_FLOOR).ln();
        sq += (s.ratio - r) * (s.ratio - r);
    }
    let cross_entropy = ce / k;
    let ratio_mse = sq / k;
    let local = cross_entropy + objective.mu * ratio_mse;
    let mut distill = 0.0;
    if objective.distills() {
        let teacher = objective.teacher.expect("checked by distills");
        if teacher.len() != trace.steps.len() {
            return Err(Error::LengthMismatch { left: teacher.len(), right: trace.steps.len() });
        }
        for (s, t) in trace.steps.iter().zip(teacher) {
            if !s.full || t.logits.len() != s.logits.len() {
                return Err(Error::ShapeMismatch("distillation needs full logits on both sides".into()));
            }
            distill += s.logits.iter().zip(&t.logits).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            distill += (s.ratio - t.ratio) * (s.ratio - t.ratio);
        }
        distill /= k;
    }
    Ok(LossBreakdown {
        cross_entropy,
        ratio_mse,
        local,
        distill,
        total: local + objective.lambda * distill,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LteModel {
    cfg: LteConfig,
    params: ParameterVector,
}

impl LteModel {
    /// Freshly initialized model; weights are uniform in `±1/sqrt(fan_in)`.
    pub fn new(cfg: LteConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Arc::new(cfg.layout());
        let params = ParameterVector::init_uniform(layout, &mut Rng::seed_from_u64(seed));
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: LteConfig, params: ParameterVector) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&cfg.layout())?;
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &LteConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.params.layout()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    pub fn flatten(&self) -> ParameterVector {
        self.params.clone()
    }

    pub fn load(&mut self, params: &ParameterVector) -> Result<()> {
        self.params.assign(params)
    }

    pub fn zero_grad(&self) -> Gradient {
        Gradient::zeros(Arc::clone(self.params.layout()))
    }

    fn parts(&self) -> Parts<&[f32]> {
        let slices = self.params.layout().split(self.params.values());
        Parts::from_slices(slices, self.cfg.blocks)
    }

    fn gru<'a>(&self, p: &Parts<&'a [f32]>) -> GruCell<'a> {
        let d = self.cfg.hidden_dim;
        let layer = |(w, b): (&'a [f32], &'a [f32])| LayerParams { w, b, rows: d, cols: 2 * d };
        GruCell { reset: layer(p.enc[0]), update: layer(p.enc[1]), candidate: layer(p.enc[2]) }
    }

    fn check_token(&self, t: &GridToken) -> Result<()> {
        let c = &self.cfg;
        if t.x >= c.grid_cols || t.y >= c.grid_rows || t.tid >= c.tid_vocab {
            return Err(Error::VocabularyOverflow(format!(
                "token ({}, {}, {}) exceeds vocabulary ({}, {}, {})",
                t.x, t.y, t.tid, c.grid_cols, c.grid_rows, c.tid_vocab
            )));
        }
        Ok(())
    }

    fn encode(&self, p: &Parts<&[f32]>, tokens: &[GridToken], mut rng: Option<&mut Rng>) -> Result<EncoderTrace> {
        if tokens.is_empty() {
            return Err(Error::EmptySet("cannot embed an empty token sequence".into()));
        }
        let d = self.cfg.hidden_dim;
        let cell = self.gru(p);
        let mut h = vec![0.0; d];
        let mut caches = Vec::with_capacity(tokens.len());
        let keep = 1.0 - self.cfg.dropout;
        let mut dropout = match (&rng, self.cfg.dropout > 0.0) {
            (Some(_), true) => Some(Vec::with_capacity(tokens.len())),
            _ => None,
        };
        for t in tokens {
            self.check_token(t)?;
            let mut x: Vec<f64> = (0..d)
                .map(|i| {
                    f64::from(p.tok_x[t.x * d + i]) + f64::from(p.tok_y[t.y * d + i]) + f64::from(p.tok_tid[t.tid * d + i])
                })
                .collect();
            if let (Some(masks), Some(rng)) = (dropout.as_mut(), rng.as_deref_mut()) {
                let m: Vec<f64> = (0..d)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                masks.push(m);
            }
            let cache = cell.step(&h, &x)?;
            h.clone_from(&cache.h);
            caches.push(cache);
        }
        Ok(EncoderTrace { tokens: tokens.to_vec(), dropout, caches })
    }

    /// Final encoder hidden state. Dropout is active only when `rng` is given.
    pub fn embed_trajectory(&self, tokens: &[GridToken], rng: Option<&mut Rng>) -> Result<Vec<f64>> {
        let p = self.parts();
        let trace = self.encode(&p, tokens, rng)?;
        Ok(trace.caches.last().expect("non-empty").h.clone())
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        p: &Parts<&[f32]>,
        hidden: &[Vec<f64>],
        e_prev: usize,
        r_prev: f64,
        mask: &ConstraintMask,
        head: Option<usize>,
        full: bool,
    ) -> Result<StepTrace> {
        let c = &self.cfg;
        let (d, e, l) = (c.hidden_dim, c.seg_embed_dim, c.num_segments);
        if e_prev >= l {
            return Err(Error::IndexOutOfRange { index: e_prev, len: l });
        }
        if hidden.len() != c.blocks || hidden.iter().any(|h| h.len() != d) {
            return Err(Error::ShapeMismatch(format!("decoder expects {} hidden states of length {d}", c.blocks)));
        }
        let mut input: Vec<f64> = p.seg_emb[e_prev * e..(e_prev + 1) * e].iter().map(|&v| f64::from(v)).collect();
        input.push(r_prev);
        let mut rnn = Vec::with_capacity(c.blocks);
        for (j, (w, b)) in p.dec.iter().enumerate() {
            let layer = LayerParams { w, b, rows: d, cols: d + c.block_input(j) };
            let cache = layer.rnn_step(&hidden[j], &input)?;
            input.clone_from(&cache.h);
            rnn.push(cache);
        }
        let dense = LayerParams { w: p.dense.0, b: p.dense.1, rows: d, cols: d };
        let h_d = dense.affine(&input);

        let unconstrained;
        let mask = if mask.edges.is_empty() {
            unconstrained = ConstraintMask::unconstrained(l);
            &unconstrained
        } else {
            mask
        };
        if mask.edges.iter().any(|&k| k >= l) || mask.edges.len() != mask.log_weights.len() {
            return Err(Error::ShapeMismatch("constraint mask does not match the segment count".into()));
        }
        let score = |k: usize| -> f64 {
            let row = &p.classes[k * d..(k + 1) * d];
            row.iter().zip(&h_d).map(|(w, h)| f64::from(*w) * h).sum()
        };
        let logits: Vec<f64> = if full { (0..l).map(score).collect() } else { mask.edges.iter().map(|&k| score(k)).collect() };
        let scores: Vec<f64> = mask
            .edges
            .iter()
            .enumerate()
            .map(|(i, &k)| if full { logits[k] } else { logits[i] } + mask.log_weights[i])
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|v| *v /= total);
        let mut best = 0;
        for (i, v) in probs.iter().enumerate() {
            if *v > probs[best] {
                best = i;
            }
        }
        let segment = mask.edges[best];
        let head_edge = head.unwrap_or(segment);
        if head_edge >= l {
            return Err(Error::IndexOutOfRange { index: head_edge, len: l });
        }

        let emb_e: Vec<f64> = p.seg_emb[head_edge * e..(head_edge + 1) * e].iter().map(|&v| f64::from(v)).collect();
        let emb_layer = LayerParams { w: p.emb.0, b: p.emb.1, rows: d, cols: e };
        let u: Vec<f64> = emb_layer.affine(&emb_e).into_iter().map(f64::tanh).collect();
        let pre: Vec<f64> = h_d.iter().zip(&u).map(|(a, b)| a + b).collect();
        let h_e: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut head_in = h_e.clone();
        head_in.extend_from_slice(&emb_e);
        let ratio_layer = LayerParams { w: p.ratio.0, b: p.ratio.1, rows: 1, cols: d + e };
        let a = ratio_layer.affine(&head_in)[0];
        let ratio = a.clamp(0.0, 1.0);

        Ok(StepTrace {
            e_prev,
            rnn,
            h_d,
            support: mask.edges.clone(),
            probs,
            logits,
            full,
            segment,
            head_edge,
            emb_e,
            u,
            pre,
            h_e,
            a,
            ratio,
        })
    }

    /// Initial decoder state: the encoder output copied to every block.
    pub fn initial_hidden(&self, encoded: &[f64]) -> Vec<Vec<f64>> {
        vec![encoded.to_vec(); self.cfg.blocks]
    }

    /// One decoder step with a dense mask of edge weights.
    pub fn decode_step(&self, hidden: &[Vec<f64>], e_prev: usize, r_prev: f64, mask: &[f64]) -> Result<DecodeStepOutput> {
        if mask.len() != self.cfg.num_segments {
            return Err(Error::LengthMismatch { left: mask.len(), right: self.cfg.num_segments });
        }
        let p = self.parts();
        let st = self.step(&p, hidden, e_prev, r_prev, &ConstraintMask::from_weights(mask), None, false)?;
        let mut probs = vec![0.0; self.cfg.num_segments];
        for (&k, &v) in st.support.iter().zip(&st.probs) {
            probs[k] = v;
        }
        Ok(DecodeStepOutput { probs, segment: st.segment, ratio: st.ratio, hidden: st.hidden() })
    }

    /// Precompute tokens, slot anchors and masks for an incomplete trajectory,
    /// optionally paired with its ground truth for training.
    pub fn prepare(
        &self,
        icp: &IncompleteTrajectory,
        truth: Option<&MapMatchedTrajectory>,
        net: &RoadNetwork,
        grid: &GridSpec,
    ) -> Result<PreparedSample> {
        let tokens = to_grid_sequence(icp, net, grid)?;
        for t in &tokens {
            self.check_token(t)?;
        }
        let slots = icp.slots();
        let times: Vec<f64> = (0..slots.len()).map(|k| icp.t_start() + k as f64 * icp.epsilon()).collect();
        let masks = slot_anchors(icp, net)?
            .into_iter()
            .map(|a| constraint_log_mask(net, a, self.cfg.gamma, self.cfg.mask_radius))
            .collect();
        let truth = match truth {
            Some(t) => {
                if t.len() != slots.len() {
                    return Err(Error::LengthMismatch { left: t.len(), right: slots.len() });
                }
                Some(t.points().iter().map(|p| (p.edge, p.r)).collect())
            }
            None => None,
        };
        Ok(PreparedSample { tokens, slots, times, masks, truth, epsilon: icp.epsilon() })
    }

    /// Free-running recovery of every grid timestamp. Observed points are
    /// copied to the output verbatim and fed back to the decoder.
    pub fn recover_prepared(&self, sample: &PreparedSample) -> Result<MapMatchedTrajectory> {
        let p = self.parts();
        let enc = self.encode(&p, &sample.tokens, None)?;
        let mut hidden = self.initial_hidden(&enc.caches.last().expect("non-empty").h);
        let first = sample.slots[0].expect("first slot is always observed");
        let (mut e, mut r) = (first.edge, first.r);
        let mut out = Vec::with_capacity(sample.len());
        for k in 0..sample.len() {
            let st = self.step(&p, &hidden, e, r, &sample.masks[k], None, false)?;
            let point = sample.slots[k].unwrap_or(MapMatchedPoint::new(st.segment, st.ratio, sample.times[k]));
            e = point.edge;
            r = point.r;
            out.push(point);
            hidden = st.hidden();
        }
        MapMatchedTrajectory::new(out, sample.epsilon)
    }

    pub fn recover(&self, icp: &IncompleteTrajectory, net: &RoadNetwork, grid: &GridSpec) -> Result<MapMatchedTrajectory> {
        let sample = self.prepare(icp, None, net, grid)?;
        self.recover_prepared(&sample)
    }

    /// Teacher-forced forward pass. `rng` enables dropout (and scheduled
    /// sampling when the teacher-forcing ratio is below one); `inputs`
    /// replays a recorded decoder input sequence; `full_logits` records
    /// logits for every segment, which distillation needs.
    pub fn forward_train(
        &self,
        sample: &PreparedSample,
        mut rng: Option<&mut Rng>,
        inputs: Option<&[(usize, f64)]>,
        full_logits: bool,
    ) -> Result<ForwardPass> {
        let truth = sample
            .truth
            .clone()
            .ok_or_else(|| Error::InvalidTrajectory("training sample has no ground truth".into()))?;
        if let Some(inp) = inputs {
            if inp.len() != sample.len() {
                return Err(Error::LengthMismatch { left: inp.len(), right: sample.len() });
            }
        }
        let p = self.parts();
        let encoder = self.encode(&p, &sample.tokens, rng.as_deref_mut())?;
        let mut hidden = self.initial_hidden(&encoder.caches.last().expect("non-empty").h);
        let first = sample.slots[0].expect("first slot is always observed");
        let mut fed = Vec::with_capacity(sample.len());
        let mut steps: Vec<StepTrace> = Vec::with_capacity(sample.len());
        for k in 0..sample.len() {
            let input = if let Some(inp) = inputs {
                inp[k]
            } else if k == 0 {
                (first.edge, first.r)
            } else if let Some(obs) = sample.slots[k - 1] {
                (obs.edge, obs.r)
            } else {
                let forced = match rng.as_deref_mut() {
                    Some(rng) if self.cfg.teacher_forcing < 1.0 => rng.gen::<f64>() < self.cfg.teacher_forcing,
                    _ => true,
                };
                if forced {
                    truth[k - 1]
                } else {
                    let prev = &steps[k - 1];
                    (prev.segment, prev.ratio)
                }
            };
            let st = self.step(&p, &hidden, input.0, input.1, &sample.masks[k], Some(truth[k].0), full_logits)?;
            hidden = st.hidden();
            fed.push(input);
            steps.push(st);
        }
        Ok(ForwardPass { tape: Tape::record(Trace { encoder, steps, inputs: fed, truth }) })
    }

    /// Distillation targets of this (frozen) model on a sample, replaying the
    /// student's decoder inputs.
    pub fn teacher_reps(&self, sample: &PreparedSample, inputs: &[(usize, f64)]) -> Result<Vec<StepRep>> {
        self.forward_train(sample, None, Some(inputs), true)?.reps()
    }

    /// Loss of one sample; convenient for finite-difference checks.
    pub fn sample_loss(
        &self,
        sample: &PreparedSample,
        rng: Option<&mut Rng>,
        objective: &Objective<'_>,
    ) -> Result<LossBreakdown> {
        self.forward_train(sample, rng, None, objective.distills())?.loss(objective)
    }

    /// Reverse-mode pass: accumulate `scale * dL/dθ` into `grad` and return
    /// the loss. Consumes the recorded forward pass.
    pub fn backward(
        &self,
        pass: &mut ForwardPass,
        objective: &Objective<'_>,
        scale: f64,
        grad: &mut Gradient,
    ) -> Result<LossBreakdown> {
        let trace = pass.tape.take()?;
        grad.layout().as_ref().eq(self.params.layout().as_ref()).then_some(()).ok_or_else(|| {
            Error::LayoutMismatch("gradient buffer does not match the model layout".into())
        })?;
        let loss = compute_loss(&trace, objective)?;
        let c = &self.cfg;
        let (d, e, l) = (c.hidden_dim, c.seg_embed_dim, c.num_segments);
        let k_steps = trace.steps.len() as f64;
        let p = self.parts();
        let layout = Arc::clone(grad.layout());
        let mut g = Parts::from_slices(layout.split_mut(grad.values_mut()), c.blocks);
        let distill = objective.distills();

        let mut carry: Vec<Vec<f64>> = vec![vec![0.0; d]; c.blocks];
        for (k, st) in trace.steps.iter().enumerate().rev() {
            let (true_edge, true_r) = trace.truth[k];

            // d loss / d logits
            let mut d_logits = vec![0.0; l];
            if let Ok(pos) = st.support.binary_search(&true_edge) {
                let pt = st.probs[pos];
                let g_p = -scale / (k_steps * (pt + CE_FLOOR));
                for (i, &cls) in st.support.iter().enumerate() {
                    let delta = if i == pos { 1.0 } else { 0.0 };
                    d_logits[cls] += g_p * pt * (delta - st.probs[i]);
                }
            }
            let mut d_ratio = scale * objective.mu * 2.0 * (st.ratio - true_r) / k_steps;
            if distill {
                let t = &objective.teacher.expect("distill")[k];
                let w = scale * objective.lambda * 2.0 / k_steps;
                for (dl, (s, tv)) in d_logits.iter_mut().zip(st.logits.iter().zip(&t.logits)) {
                    *dl += w * (s - tv);
                }
                d_ratio += w * (st.ratio - t.ratio);
            }

            // ratio head
            let mut d_hd = vec![0.0; d];
            let da = if st.a > 0.0 && st.a < 1.0 { d_ratio } else { 0.0 };
            let mut d_emb_e = vec![0.0; e];
            if da != 0.0 {
                let mut head_in = st.h_e.clone();
                head_in.extend_from_slice(&st.emb_e);
                let ratio_layer = LayerParams { w: p.ratio.0, b: p.ratio.1, rows: 1, cols: d + e };
                let d_in = ratio_layer.backward(&head_in, &[da], grad_of(&mut g.ratio));
                let d_pre: Vec<f64> = (0..d).map(|i| if st.pre[i] > 0.0 { d_in[i] } else { 0.0 }).collect();
                d_emb_e.iter_mut().zip(&d_in[d..]).for_each(|(a, b)| *a += b);
                for i in 0..d {
                    d_hd[i] += d_pre[i];
                }
                let d_zu: Vec<f64> = d_pre.iter().zip(&st.u).map(|(dp, u)| dp * (1.0 - u * u)).collect();
                let emb_layer = LayerParams { w: p.emb.0, b: p.emb.1, rows: d, cols: e };
                let d_emb = emb_layer.backward(&st.emb_e, &d_zu, grad_of(&mut g.emb));
                d_emb_e.iter_mut().zip(&d_emb).for_each(|(a, b)| *a += b);
                let row = &mut g.seg_emb[st.head_edge * e..(st.head_edge + 1) * e];
                row.iter_mut().zip(&d_emb_e).for_each(|(a, b)| *a += b);
            }

            // segment scores
            matvec_t_acc(p.classes, d, &d_logits, &mut d_hd);
            outer_acc(g.classes, d, &d_logits, &st.h_d);

            // dense layer
            let top = &st.rnn[c.blocks - 1];
            let dense = LayerParams { w: p.dense.0, b: p.dense.1, rows: d, cols: d };
            let mut d_h = dense.backward(&top.h, &d_hd, grad_of(&mut g.dense));

            // recurrent blocks, top to bottom
            for j in (0..c.blocks).rev() {
                for (a, b) in d_h.iter_mut().zip(&carry[j]) {
                    *a += b;
                }
                let (w, b) = p.dec[j];
                let layer = LayerParams { w, b, rows: d, cols: d + c.block_input(j) };
                let d_in = layer.rnn_backward(&st.rnn[j], &d_h, grad_of(&mut g.dec[j]));
                carry[j] = d_in[..d].to_vec();
                if j > 0 {
                    d_h = d_in[d..].to_vec();
                } else {
                    let row = &mut g.seg_emb[st.e_prev * e..(st.e_prev + 1) * e];
                    row.iter_mut().zip(&d_in[d..d + e]).for_each(|(a, b)| *a += b);
                }
            }
        }

        // encoder
        let mut dh = vec![0.0; d];
        for c_j in &carry {
            dh.iter_mut().zip(c_j).for_each(|(a, b)| *a += b);
        }
        let cell = self.gru(&p);
        let [ref mut gr, ref mut gu, ref mut gc] = g.enc;
        for (t, cache) in trace.encoder.caches.iter().enumerate().rev() {
            let (dh_prev, mut dx) = cell.backward(
                cache,
                &dh,
                GruGrad { reset: grad_of(gr), update: grad_of(gu), candidate: grad_of(gc) },
            );
            if let Some(masks) = &trace.encoder.dropout {
                dx.iter_mut().zip(&masks[t]).for_each(|(a, m)| *a *= m);
            }
            let tok = trace.encoder.tokens[t];
            for (table, idx) in [(&mut g.tok_x, tok.x), (&mut g.tok_y, tok.y), (&mut g.tok_tid, tok.tid)] {
                table[idx * d..(idx + 1) * d].iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            }
            dh = dh_prev;
        }
        Ok(loss)
    }
}

// ---------------------------------------------------------------------------
// Loss functions on plain predictions

/// `L1 + μ L2`: mean per-step cross-entropy of the segment distributions plus
/// the mean squared ratio error.
pub fn local_loss(probs: &[Vec<f64>], ratios: &[f64], truth: &MapMatchedTrajectory, mu: f64) -> Result<f64> {
    if probs.len() != truth.len() || ratios.len() != truth.len() {
        return Err(Error::LengthMismatch { left: probs.len().max(ratios.len()), right: truth.len() });
    }
    let mut ce = 0.0;
    for (p, t) in probs.iter().zip(truth.points()) {
        ce += crate::diffcore::cross_entropy(p, t.edge)?;
    }
    let true_r: Vec<f64> = truth.points().iter().map(|p| p.r).collect();
    Ok(ce / truth.len() as f64 + mu * crate::diffcore::mse(ratios, &true_r)?)
}

/// Mean over steps of the squared L2 distance between teacher and student
/// representations.
pub fn distill_loss(teacher: &[StepRep], student: &[StepRep]) -> Result<f64> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::LengthMismatch { left: teacher.len(), right: student.len() });
    }
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        if t.logits.len() != s.logits.len() {
            return Err(Error::LengthMismatch { left: t.logits.len(), right: s.logits.len() });
        }
        total += t.logits.iter().zip(&s.logits).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        total += (t.ratio - s.ratio) * (t.ratio - s.ratio);
    }
    Ok(total / teacher.len() as f64)
}

/// `local + λ dist`.
pub fn total_loss(local: f64, dist: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::NegativeLambda(lambda));
    }
    Ok(local + lambda * dist)
}
