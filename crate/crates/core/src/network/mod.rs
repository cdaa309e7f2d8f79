//! The motion network: a root-trajectory GRU (TransNet) and a pose generator
//! whose parameters are a gated blend of K expert MLPs (PoseNet).
//!
//! All forward passes are recorded on an [`autodiff::Tape`], so the same code
//! serves inference and training.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::motion::features::{FeatureLayout, FOOT_STATE_DIM};
use crate::motion::Normalization;
use crate::skeleton::Skeleton;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// history length is `k + 1`
    pub k: usize,
    pub joints: usize,
    pub experts: usize,
    pub trans_hidden: usize,
    pub trans_layers: usize,
    pub gate_hidden: usize,
    pub gate_layers: usize,
    pub expert_hidden: usize,
    /// `false` folds the root prediction into the generator output
    pub use_transnet: bool,
    /// `false` replaces every GRU with a feedforward stack of similar size
    pub recurrent: bool,
}

impl ModelConfig {
    /// The published architecture: k = 5, K = 8, GRUs of width 32, experts
    /// of width 128.
    pub fn full(joints: usize) -> Self {
        ModelConfig {
            k: 5,
            joints,
            experts: 8,
            trans_hidden: 32,
            trans_layers: 2,
            gate_hidden: 32,
            gate_layers: 1,
            expert_hidden: 128,
            use_transnet: true,
            recurrent: true,
        }
    }

    /// Every hidden width set to 4, K = 2, k = 2. Used for gradient checks.
    pub fn tiny(joints: usize) -> Self {
        ModelConfig {
            k: 2,
            experts: 2,
            trans_hidden: 4,
            gate_hidden: 4,
            expert_hidden: 4,
            ..ModelConfig::full(joints)
        }
    }

    /// The tiny configuration with expert width 32 and recurrent width 16,
    /// the smallest that memorizes a walk cycle well enough to replay it.
    pub fn small(joints: usize) -> Self {
        ModelConfig {
            trans_hidden: 16,
            gate_hidden: 16,
            expert_hidden: 32,
            ..ModelConfig::tiny(joints)
        }
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.k, self.joints)
    }

    /// `|c̃| = 6J + 1 + 3J`
    pub fn reduced_dim(&self) -> usize {
        self.layout().reduced_state_dim()
    }

    pub fn generator_input_dim(&self) -> usize {
        let l = self.layout();
        FOOT_STATE_DIM + 2 + l.states().len()
    }

    pub fn generator_output_dim(&self) -> usize {
        self.reduced_dim() + if self.use_transnet { 0 } else { 2 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = [
            (self.joints, "joints"),
            (self.experts, "experts"),
            (self.trans_hidden, "trans_hidden"),
            (self.trans_layers, "trans_layers"),
            (self.gate_hidden, "gate_hidden"),
            (self.gate_layers, "gate_layers"),
            (self.expert_hidden, "expert_hidden"),
        ]
        .into_iter()
        .find(|(v, _)| *v == 0);
        match bad {
            Some((_, name)) => Err(Error::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }
}

/// Named, shaped parameter tensors stored flat and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    pub data: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.names.push(name.into());
        self.shapes.push(shape);
        self.data.push(data);
        self.data.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.data.iter().map(|d| vec![0.0; d.len()]).collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

#[derive(Debug, Clone)]
struct GruLayer {
    /// update, reset, candidate
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

/// A sequence encoder: stacked GRUs, or a feedforward stack over the
/// flattened sequence for the non-recurrent variants.
#[derive(Debug, Clone)]
enum Encoder {
    Gru(Vec<GruLayer>),
    Feedforward(Vec<(ParamId, ParamId)>),
}

#[derive(Debug, Clone)]
struct Head {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    trans: Option<(Encoder, Head)>,
    gate: (Encoder, Head),
    /// per generator layer: K weights and K biases
    experts: Vec<(Vec<ParamId>, Vec<ParamId>)>,
}

/// Hidden width of a feedforward stack whose parameter count is closest to a
/// GRU stack with the given sizes.
pub fn feedforward_width(steps: usize, input: usize, hidden: usize, layers: usize) -> usize {
    let gru = 3 * (hidden * input + hidden * hidden + hidden)
        + (layers - 1) * 3 * (2 * hidden * hidden + hidden);
    let ff = |w: usize| steps * input * w + w + (layers - 1) * (w * w + w);
    (1..=8 * gru.max(1))
        .min_by_key(|&w| ff(w).abs_diff(gru))
        .unwrap_or(1)
}

struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut ParamSet,
}

impl Init<'_> {
    fn he_uniform(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / cols as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.add(name, vec![rows, cols], data)
    }

    fn orthogonal(&mut self, name: String, n: usize) -> ParamId {
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| self.rng.sample(StandardNormal));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        // sign fix makes the distribution uniform over the orthogonal group
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let data = (0..n * n).map(|i| q[(i / n, i % n)]).collect();
        self.params.add(name, vec![n, n], data)
    }

    fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.params.add(name, vec![n], vec![0.0; n])
    }

    fn encoder(&mut self, prefix: &str, recurrent: bool, steps: usize, input: usize, hidden: usize, layers: usize) -> (Encoder, usize) {
        if recurrent {
            let mut out = Vec::with_capacity(layers);
            for l in 0..layers {
                let fan_in = if l == 0 { input } else { hidden };
                let gates = ["z", "r", "n"];
                let w = gates.map(|g| self.he_uniform(format!("{prefix}.gru{l}.w_{g}"), hidden, fan_in));
                let u = gates.map(|g| self.orthogonal(format!("{prefix}.gru{l}.u_{g}"), hidden));
                let b = gates.map(|g| self.zeros(format!("{prefix}.gru{l}.b_{g}"), hidden));
                out.push(GruLayer { w, u, b });
            }
            (Encoder::Gru(out), hidden)
        } else {
            let width = feedforward_width(steps, input, hidden, layers);
            let mut out = Vec::with_capacity(layers);
            for l in 0..layers {
                let fan_in = if l == 0 { steps * input } else { width };
                let w = self.he_uniform(format!("{prefix}.ff{l}.w"), width, fan_in);
                let b = self.zeros(format!("{prefix}.ff{l}.b"), width);
                out.push((w, b));
            }
            (Encoder::Feedforward(out), width)
        }
    }

    fn head(&mut self, prefix: &str, out: usize, input: usize) -> Head {
        Head {
            w: self.he_uniform(format!("{prefix}.head.w"), out, input),
            b: self.zeros(format!("{prefix}.head.b"), out),
        }
    }
}

/// Assigns parameter ids in a fixed creation order. Called both when
/// initializing and when resolving the tensors of a loaded checkpoint.
fn build(config: &ModelConfig, seed: u64) -> (ParamSet, Ids) {
    let mut params = ParamSet::new();
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: &mut params,
    };
    let steps = config.k + 1;
    let trans = config.use_transnet.then(|| {
        let (enc, width) = init.encoder(
            "transnet",
            config.recurrent,
            steps,
            2 + FOOT_STATE_DIM,
            config.trans_hidden,
            config.trans_layers,
        );
        (enc, init.head("transnet", 2, width))
    });
    let (enc, width) = init.encoder(
        "gating",
        config.recurrent,
        steps,
        FOOT_STATE_DIM,
        config.gate_hidden,
        config.gate_layers,
    );
    let gate = (enc, init.head("gating", config.experts, width));
    let dims = [
        config.generator_input_dim(),
        config.expert_hidden,
        config.expert_hidden,
        config.generator_output_dim(),
    ];
    let mut experts = Vec::with_capacity(3);
    for layer in 0..3 {
        let mut ws = Vec::with_capacity(config.experts);
        let mut bs = Vec::with_capacity(config.experts);
        for e in 0..config.experts {
            ws.push(init.he_uniform(format!("expert{e}.l{layer}.w"), dims[layer + 1], dims[layer]));
            bs.push(init.zeros(format!("expert{e}.l{layer}.b"), dims[layer + 1]));
        }
        experts.push((ws, bs));
    }
    (params, Ids { trans, gate, experts })
}

/// Tape nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// normalized target vector: `r_{t+1}` then `c̃_{t+1}`
    pub output: Var,
    /// expert blend weights
    pub gating: Var,
}

/// Denormalized prediction for one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// target-layout vector: root (2), orientations (6J), height, velocities (3J)
    pub target: Vec<f64>,
    pub gating: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub normalization: Normalization,
    pub skeleton: Skeleton,
    ids: Ids,
}

impl Model {
    pub fn new(config: ModelConfig, skeleton: Skeleton, normalization: Normalization, seed: u64) -> Result<Self> {
        config.validate()?;
        if skeleton.joint_count() != config.joints {
            return Err(Error::Shape(format!(
                "skeleton has {} joints, config expects {}",
                skeleton.joint_count(),
                config.joints
            )));
        }
        let layout = config.layout();
        if normalization.input.dim() != layout.input_dim() || normalization.target.dim() != layout.target_dim() {
            return Err(Error::Shape(format!(
                "normalization dims ({}, {}) do not match layout ({}, {})",
                normalization.input.dim(),
                normalization.target.dim(),
                layout.input_dim(),
                layout.target_dim()
            )));
        }
        let (params, ids) = build(&config, seed);
        Ok(Model {
            config,
            params,
            normalization,
            skeleton,
            ids,
        })
    }

    /// Rebuilds a model around loaded tensors, checking names and shapes.
    pub(crate) fn from_parts(
        config: ModelConfig,
        skeleton: Skeleton,
        normalization: Normalization,
        tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut model = Model::new(config, skeleton, normalization, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, configuration needs {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (id, (name, shape, data)) in tensors.into_iter().enumerate() {
            if name != model.params.name(id) || shape != model.params.shape(id) {
                return Err(Error::Shape(format!(
                    "tensor {id}: found '{name}' {shape:?}, expected '{}' {:?}",
                    model.params.name(id),
                    model.params.shape(id)
                )));
            }
            model.params.data[id] = data;
        }
        Ok(model)
    }

    pub fn layout(&self) -> FeatureLayout {
        self.config.layout()
    }

    fn encode(&self, tape: &mut Tape, encoder: &Encoder, steps: &[Var]) -> Var {
        match encoder {
            Encoder::Gru(layers) => {
                let mut seq = steps.to_vec();
                for layer in layers {
                    let hidden = self.params.data[layer.b[0]].len();
                    let mut h = tape.input(vec![0.0; hidden]);
                    for x in seq.iter_mut() {
                        h = gru_cell(tape, layer, *x, h);
                        *x = h;
                    }
                }
                *seq.last().expect("at least one step")
            }
            Encoder::Feedforward(layers) => {
                let mut x = tape.concat(steps);
                for (w, b) in layers {
                    let y = tape.linear(*w, Some(*b), x);
                    x = tape.elu(y);
                }
                x
            }
        }
    }

    /// Records the forward pass for a normalized input vector.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Forward {
        let l = self.layout();
        let feet: Vec<Var> = (0..=l.k).map(|i| tape.slice(input, l.foot(i))).collect();
        let facing = tape.slice(input, l.facing());
        let states = tape.slice(input, l.states());

        let (genc, ghead) = &self.ids.gate;
        let gh = self.encode(tape, genc, &feet);
        let logits = tape.linear(ghead.w, Some(ghead.b), gh);
        let gating = tape.softmax(logits);

        let mut x = tape.concat(&[feet[l.k], facing, states]);
        for (i, (ws, bs)) in self.ids.experts.iter().enumerate() {
            let y = tape.blended_linear(ws, bs, gating, x);
            x = if i + 1 < self.ids.experts.len() { tape.elu(y) } else { y };
        }

        let output = match &self.ids.trans {
            Some((tenc, thead)) => {
                let steps: Vec<Var> = (0..=l.k)
                    .map(|i| {
                        let r = tape.slice(input, l.root(i));
                        tape.concat(&[r, feet[i]])
                    })
                    .collect();
                let th = self.encode(tape, tenc, &steps);
                let root = tape.linear(thead.w, Some(thead.b), th);
                tape.concat(&[root, x])
            }
            None => x,
        };
        Forward { output, gating }
    }

    /// Normalizes a raw input vector, rejecting non-finite values.
    pub fn normalize_input(&self, input: &[f64]) -> Result<Vec<f64>> {
        let dim = self.layout().input_dim();
        if input.len() != dim {
            return Err(Error::Shape(format!("input has {} values, expected {dim}", input.len())));
        }
        if let Some(i) = input.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input feature {i} is {}", input[i])));
        }
        Ok(self.normalization.input.normalize(input))
    }

    pub fn predict(&self, input: &[f64]) -> Result<Prediction> {
        let x = self.normalize_input(input)?;
        let mut tape = Tape::new(&self.params.data);
        let xv = tape.input(x);
        let f = self.forward(&mut tape, xv);
        let target = self.normalization.target.denormalize(tape.value(f.output));
        if let Some(i) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("network output {i} is not finite")));
        }
        Ok(Prediction {
            target,
            gating: tape.value(f.gating).to_vec(),
        })
    }

    /// Convex combination of every expert tensor: per generator layer the
    /// blended weight matrix and bias.
    pub fn blend_experts(&self, weights: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.ids
            .experts
            .iter()
            .map(|(ws, bs)| {
                let blend = |ids: &[ParamId]| {
                    let mut out = vec![0.0; self.params.data[ids[0]].len()];
                    for (a, id) in weights.iter().zip(ids) {
                        for (o, v) in out.iter_mut().zip(&self.params.data[*id]) {
                            *o += a * v;
                        }
                    }
                    out
                };
                (blend(ws), blend(bs))
            })
            .collect()
    }

    /// Parameter ids of expert `e`'s generator tensors.
    pub fn expert_params(&self, e: usize) -> Vec<ParamId> {
        self.ids
            .experts
            .iter()
            .flat_map(|(ws, bs)| [ws[e], bs[e]])
            .collect()
    }

    /// Ids of the gating head; used to force a particular blend in tests.
    pub fn gating_head(&self) -> (ParamId, ParamId) {
        let h = &self.ids.gate.1;
        (h.w, h.b)
    }
}

fn gru_cell(tape: &mut Tape, layer: &GruLayer, x: Var, h: Var) -> Var {
    let gate = |tape: &mut Tape, g: usize, h_in: Var| {
        let a = tape.linear(layer.w[g], Some(layer.b[g]), x);
        let b = tape.linear(layer.u[g], None, h_in);
        tape.add(a, b)
    };
    let z_pre = gate(tape, 0, h);
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, 1, h);
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h);
    let n_pre = gate(tape, 2, rh);
    let n = tape.tanh(n_pre);
    let keep = tape.one_minus(z);
    let a = tape.mul(keep, h);
    let b = tape.mul(z, n);
    tape.add(a, b)
}

/// Runs a bare GRU stack on explicit weights; exposed for unit checks of the
/// recurrence.
pub fn gru_forward(params: &ParamSet, prefix: &str, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut layers = Vec::new();
    for l in 0.. {
        let name = |kind: &str, g: &str| format!("{prefix}.gru{l}.{kind}_{g}");
        let Some(wz) = params.id(&name("w", "z")) else { break };
        let find = |kind: &str, g: &str| {
            params
                .id(&name(kind, g))
                .ok_or_else(|| Error::Shape(format!("missing {}", name(kind, g))))
        };
        layers.push(GruLayer {
            w: [wz, find("w", "r")?, find("w", "n")?],
            u: [find("u", "z")?, find("u", "r")?, find("u", "n")?],
            b: [find("b", "z")?, find("b", "r")?, find("b", "n")?],
        });
    }
    if layers.is_empty() {
        return Err(Error::Shape(format!("no GRU layers under '{prefix}'")));
    }
    if inputs.is_empty() {
        return Err(Error::Shape("GRU needs at least one step".into()));
    }
    let in_dim = params.shape(layers[0].w[0])[1];
    if let Some(bad) = inputs.iter().find(|x| x.len() != in_dim) {
        return Err(Error::Shape(format!("step of length {}, expected {in_dim}", bad.len())));
    }
    let mut tape = Tape::new(&params.data);
    let mut seq: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    for layer in &layers {
        let hidden = params.data[layer.b[0]].len();
        let mut h = tape.input(vec![0.0; hidden]);
        for x in seq.iter_mut() {
            h = gru_cell(&mut tape, layer, *x, h);
            *x = h;
        }
    }
    Ok(tape.value(*seq.last().unwrap()).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny_model(seed: u64) -> Model {
        let s = synth::biped_skeleton();
        let c = ModelConfig::tiny(s.joint_count());
        Model::new(c, s, Normalization::identity(&c.layout()), seed).unwrap()
    }

    fn random_input(model: &Model, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..model.layout().input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut p = ParamSet::new();
        for g in ["z", "r", "n"] {
            p.add(format!("g.gru0.w_{g}"), vec![3, 2], vec![0.0; 6]);
            p.add(format!("g.gru0.u_{g}"), vec![3, 3], vec![0.0; 9]);
            p.add(format!("g.gru0.b_{g}"), vec![3], vec![0.0; 3]);
        }
        let h = gru_forward(&p, "g", &vec![vec![0.0, 0.0]; 4]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert!(gru_forward(&p, "g", &[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn open_gates_give_tanh_of_input() {
        let mut p = ParamSet::new();
        let w = vec![0.5, -0.3, 0.2, 0.8];
        for g in ["z", "r", "n"] {
            p.add(format!("g.gru0.w_{g}"), vec![2, 2], if g == "n" { w.clone() } else { vec![0.0; 4] });
            p.add(format!("g.gru0.u_{g}"), vec![2, 2], vec![0.3; 4]);
            p.add(format!("g.gru0.b_{g}"), vec![2], vec![if g == "n" { 0.0 } else { 40.0 }; 2]);
        }
        let x = [0.7, -1.1];
        let h = gru_forward(&p, "g", &[x.to_vec()]).unwrap();
        let expected = [(0.5 * x[0] - 0.3 * x[1]).tanh(), (0.2 * x[0] + 0.8 * x[1]).tanh()];
        for (a, b) in h.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn published_sizes() {
        let c = ModelConfig::full(22);
        assert_eq!(c.reduced_dim(), 22 * 6 + 1 + 22 * 3);
        let s = synth::humanoid_skeleton();
        let m = Model::new(c, s, Normalization::identity(&c.layout()), 1).unwrap();
        let w = m.params.id("transnet.gru1.u_n").unwrap();
        assert_eq!(m.params.shape(w), &[32, 32]);
        let w = m.params.id("expert7.l2.w").unwrap();
        assert_eq!(m.params.shape(w), &[199, 128]);
        assert!(m.params.id("expert8.l0.w").is_none());
    }

    #[test]
    fn recurrent_init_is_orthogonal() {
        let m = tiny_model(3);
        let id = m.params.id("gating.gru0.u_r").unwrap();
        let n = m.params.shape(id)[0];
        let q = DMatrix::from_row_slice(n, n, &m.params.data[id]);
        assert!((q.transpose() * &q - DMatrix::identity(n, n)).norm() < 1e-12);
    }

    #[test]
    fn feedforward_variants_match_gru_size() {
        for (steps, input, hidden, layers) in [(6, 10, 32, 1), (6, 12, 32, 2), (3, 10, 4, 1)] {
            let gru = 3 * (hidden * input + hidden * hidden + hidden)
                + (layers - 1) * 3 * (2 * hidden * hidden + hidden);
            let w = feedforward_width(steps, input, hidden, layers);
            let ff = steps * input * w + w + (layers - 1) * (w * w + w);
            assert!((ff as f64 - gru as f64).abs() / (gru as f64) < 0.1, "{ff} vs {gru}");
        }
        let s = synth::biped_skeleton();
        let c = ModelConfig {
            recurrent: false,
            use_transnet: false,
            ..ModelConfig::full(s.joint_count())
        };
        let m = Model::new(c, s, Normalization::identity(&c.layout()), 1).unwrap();
        let p = m.predict(&vec![0.1; c.layout().input_dim()]).unwrap();
        assert_eq!(p.target.len(), c.layout().target_dim());
    }

    #[test]
    fn gating_is_a_probability_vector() {
        let m = tiny_model(5);
        for seed in 0..20 {
            let p = m.predict(&random_input(&m, seed)).unwrap();
            let sum: f64 = p.gating.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.gating.iter().all(|g| *g > 0.0 && *g < 1.0));
        }
    }

    #[test]
    fn softmax_examples() {
        let p: Vec<Vec<f64>> = Vec::new();
        let mut t = Tape::new(&p);
        let z = t.input(vec![0.0; 8]);
        let s = t.softmax(z);
        assert!(t.value(s).iter().all(|v| (v - 0.125).abs() < 1e-15));
        let z = t.input(vec![3f64.ln(), 0.0]);
        let s = t.softmax(z);
        assert!((t.value(s)[0] - 0.75).abs() < 1e-15 && (t.value(s)[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn one_hot_gating_reduces_to_one_expert() {
        let mut m = tiny_model(7);
        let (w, b) = m.gating_head();
        m.params.data[w].iter_mut().for_each(|v| *v = 0.0);
        m.params.data[b] = vec![0.0, 800.0];
        let x = random_input(&m, 1);
        let p = m.predict(&x).unwrap();
        assert_eq!(p.gating, vec![0.0, 1.0]);

        // the selected expert as a plain MLP
        let l = m.layout();
        let mut h: Vec<f64> = x[l.foot(l.k)].to_vec();
        h.extend_from_slice(&x[l.facing()]);
        h.extend_from_slice(&x[l.states()]);
        let ids = m.expert_params(1);
        for (layer, pair) in ids.chunks(2).enumerate() {
            let (wv, bv) = (&m.params.data[pair[0]], &m.params.data[pair[1]]);
            let mut y: Vec<f64> = bv.clone();
            for (o, row) in y.iter_mut().zip(wv.chunks_exact(h.len())) {
                *o += row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
            if layer < 2 {
                y.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { v.exp_m1() });
            }
            h = y;
        }
        assert_eq!(&p.target[2..], h.as_slice());
    }

    #[test]
    fn blending_examples() {
        let m = tiny_model(11);
        let one_hot = m.blend_experts(&[1.0, 0.0]);
        let e0 = m.expert_params(0);
        for (layer, (w, b)) in one_hot.iter().enumerate() {
            assert_eq!(w, &m.params.data[e0[2 * layer]]);
            assert_eq!(b, &m.params.data[e0[2 * layer + 1]]);
        }
        let e1 = m.expert_params(1);
        let mean = m.blend_experts(&[0.5, 0.5]);
        for (i, v) in mean[0].0.iter().enumerate() {
            let expected = 0.5 * m.params.data[e0[0]][i] + 0.5 * m.params.data[e1[0]][i];
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic_and_rejects_nan() {
        let m = tiny_model(2);
        let x = random_input(&m, 4);
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
        let mut bad = x.clone();
        bad[3] = f64::NAN;
        assert!(matches!(m.predict(&bad), Err(Error::NonFinite(_))));
        assert!(matches!(m.predict(&x[1..]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_zero_head_gives_zero_root() {
        let m = tiny_model(8);
        let mut tape = Tape::new(&m.params.data);
        let x = tape.input(vec![0.0; m.layout().input_dim()]);
        let f = m.forward(&mut tape, x);
        // zero input, zero biases: every GRU state stays zero
        assert_eq!(&tape.value(f.output)[..2], &[0.0, 0.0]);
    }
}
