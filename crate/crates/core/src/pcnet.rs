//! The predictive pathway: top-down context recurrence, latent prediction,
//! and the teacher-forced rollout over a window of sentence groups.
//!
//! One GRU cell, shared by every participating layer, consumes
//! `concat(z_t at layer l, context at layer l+1)` as input and the previous
//! step's context at layer l as hidden state. Contexts are computed top-down
//! so the upper layer's fresh context feeds the layer below. A single shared
//! linear map predicts the next step's latent from each context. Predictions
//! never re-enter the recurrence: the ground-truth latents drive it.

use rand_chacha::ChaCha8Rng;

use crate::params::{ParamStore, ParamVars};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

const INIT_STD: f64 = 0.02;

/// Which layers carry the mechanism and whether top-down input is live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcMode {
    /// All layers, top-down connections on.
    Default,
    /// Upper half of the layers (inclusive), top-down on.
    Half,
    /// Only the last layer.
    Last,
    /// All layers, top-down connections removed: the context at layer l
    /// depends only on that layer's own history.
    NoTdc,
}

impl PcMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "default" => Some(Self::Default),
            "half" => Some(Self::Half),
            "last" => Some(Self::Last),
            "no_tdc" => Some(Self::NoTdc),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::Half => "half",
            Self::Last => "last",
            Self::NoTdc => "no_tdc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcConfig {
    /// Ascending 1-based layer indices carrying the mechanism.
    pub pc_layers: Vec<usize>,
    pub top_down: bool,
    /// Prediction horizon per window origin.
    pub k: usize,
}

impl PcConfig {
    pub fn from_mode(mode: PcMode, num_layers: usize, k: usize) -> Self {
        let pc_layers: Vec<usize> = match mode {
            PcMode::Default | PcMode::NoTdc => (1..=num_layers).collect(),
            PcMode::Half => (num_layers.div_ceil(2)..=num_layers).collect(),
            PcMode::Last => vec![num_layers],
        };
        Self { pc_layers, top_down: mode != PcMode::NoTdc, k }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.pc_layers.is_empty() {
            return Err(TensorError::Contract("pc_layers must be nonempty".into()));
        }
        if self.pc_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TensorError::Contract("pc_layers must be strictly ascending".into()));
        }
        if *self.pc_layers.first().unwrap() < 1 || *self.pc_layers.last().unwrap() > num_layers {
            return Err(TensorError::Contract(format!(
                "pc_layers {:?} out of range for {num_layers} layers",
                self.pc_layers
            )));
        }
        Ok(())
    }
}

/// Context vectors for one time step, one `[1, d]` row per participating
/// layer.
#[derive(Debug, Clone)]
pub struct ContextVars {
    entries: Vec<(usize, Var)>,
}

impl ContextVars {
    pub fn get(&self, layer: usize) -> Option<Var> {
        self.entries.iter().find(|(l, _)| *l == layer).map(|(_, v)| *v)
    }

    /// Ascending (layer, var) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.entries.iter().copied()
    }
}

/// One aligned (predicted, ground-truth) latent pair.
#[derive(Debug, Clone, Copy)]
pub struct PredictionPair {
    /// 1-based time step of the target group within its window.
    pub time: usize,
    /// 1-based layer index.
    pub layer: usize,
    pub predicted: Var,
    pub target: Var,
}

/// Teacher-forced recurrence products for one window.
#[derive(Debug)]
pub struct Rollout {
    pub pairs: Vec<PredictionPair>,
    /// Context states per time step, in order.
    pub contexts: Vec<ContextVars>,
}

/// Initializes the shared `pathway.*` tensors. The parameter count does not
/// depend on which layers carry the mechanism.
pub fn init_pathway_params(hidden_dim: usize, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    let d = hidden_dim;
    let mut names: Vec<(String, Vec<usize>, bool)> = Vec::new();
    for gate in ["cand", "reset", "update"] {
        names.push((format!("pathway.gru.{gate}.w"), vec![2 * d, d], true));
        names.push((format!("pathway.gru.{gate}.u"), vec![d, d], true));
        names.push((format!("pathway.gru.{gate}.bias"), vec![d], false));
    }
    names.push(("pathway.pred.weight".into(), vec![d, d], true));
    names.push(("pathway.pred.bias".into(), vec![d], false));
    names.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, shape, random) in names {
        let tensor = if random {
            Tensor::randn(&shape, INIT_STD, rng)
        } else {
            Tensor::zeros(&shape)
        };
        store.insert(name, tensor);
    }
}

fn gate(
    g: &mut Graph,
    vars: &ParamVars,
    name: &str,
    x: Var,
    h: Var,
) -> Result<Var> {
    let xw = g.matmul(x, vars.var(&format!("pathway.gru.{name}.w")))?;
    let hu = g.matmul(h, vars.var(&format!("pathway.gru.{name}.u")))?;
    let s = g.add(xw, hu)?;
    g.add(s, vars.var(&format!("pathway.gru.{name}.bias")))
}

/// One GRU cell application: `x` is `[1, 2d]`, `h` is `[1, d]`.
///
/// update u = sigmoid(x·Wu + h·Uu + bu), reset r = sigmoid(x·Wr + h·Ur + br),
/// candidate n = tanh(x·Wn + (r*h)·Un + bn), output (1-u)*n + u*h.
fn gru_cell(g: &mut Graph, vars: &ParamVars, x: Var, h: Var) -> Result<Var> {
    let pre_u = gate(g, vars, "update", x, h)?;
    let u = g.sigmoid(pre_u)?;
    let pre_r = gate(g, vars, "reset", x, h)?;
    let r = g.sigmoid(pre_r)?;
    let rh = g.mul(r, h)?;
    let xw = g.matmul(x, vars.var("pathway.gru.cand.w"))?;
    let hu = g.matmul(rh, vars.var("pathway.gru.cand.u"))?;
    let pre_n = g.add(xw, hu)?;
    let pre_n = g.add(pre_n, vars.var("pathway.gru.cand.bias"))?;
    let n = g.tanh(pre_n)?;

    let ones = g.constant(Tensor::ones(g_shape(g, u)));
    let one_minus_u = g.sub(ones, u)?;
    let blend_new = g.mul(one_minus_u, n)?;
    let blend_old = g.mul(u, h)?;
    g.add(blend_new, blend_old)
}

fn g_shape<'a>(g: &'a Graph, v: Var) -> &'a [usize] {
    g.value(v).shape()
}

/// Computes the contexts for one time step, layers processed in descending
/// order. `z` holds the per-layer `[CLS]` rows for all encoder layers
/// (index l-1). `prev` is the previous step's contexts, or `None` at t=1
/// (all-zero initialization).
pub fn top_down_step(
    g: &mut Graph,
    vars: &ParamVars,
    z: &[Var],
    prev: Option<&ContextVars>,
    cfg: &PcConfig,
    hidden_dim: usize,
) -> Result<ContextVars> {
    let d = hidden_dim;
    for &l in &cfg.pc_layers {
        let zl = g.value(z[l - 1]);
        if zl.shape() != [1, d] {
            return Err(TensorError::ShapeMismatch {
                op: "top-down-step",
                details: format!("z at layer {l} has shape {:?}, expected [1, {d}]", zl.shape()),
            });
        }
    }
    let zero_row = g.constant(Tensor::zeros(&[1, d]));
    let mut entries: Vec<(usize, Var)> = Vec::with_capacity(cfg.pc_layers.len());
    for &l in cfg.pc_layers.iter().rev() {
        let upper = if cfg.top_down {
            entries
                .iter()
                .find(|(lu, _)| *lu == l + 1)
                .map(|(_, v)| *v)
                .unwrap_or(zero_row)
        } else {
            zero_row
        };
        let x = g.concat(&[z[l - 1], upper], 1)?;
        let h = match prev {
            Some(c) => c.get(l).ok_or_else(|| {
                TensorError::Contract(format!("previous context missing layer {l}"))
            })?,
            None => zero_row,
        };
        let c = gru_cell(g, vars, x, h)?;
        entries.push((l, c));
    }
    entries.reverse();
    Ok(ContextVars { entries })
}

/// Predicts the next step's latent from each context through the shared
/// linear map.
pub fn predict_next(g: &mut Graph, vars: &ParamVars, c: &ContextVars) -> Result<Vec<(usize, Var)>> {
    let w = vars.var("pathway.pred.weight");
    let b = vars.var("pathway.pred.bias");
    c.iter()
        .map(|(layer, cv)| {
            let p = g.matmul(cv, w)?;
            Ok((layer, g.add(p, b)?))
        })
        .collect()
}

/// Teacher-forced rollout over one window: contexts at step t are computed
/// from the ground-truth latents `z_seq[t-1]`, never from predictions.
/// Prediction pairs are emitted for origins t with `t-1 < k`, targeting
/// `z_seq[t]`.
pub fn rollout(
    g: &mut Graph,
    vars: &ParamVars,
    z_seq: &[Vec<Var>],
    cfg: &PcConfig,
    hidden_dim: usize,
) -> Result<Rollout> {
    if z_seq.is_empty() {
        return Err(TensorError::Contract("rollout needs at least one time step".into()));
    }
    let mut contexts: Vec<ContextVars> = Vec::with_capacity(z_seq.len());
    let mut pairs = Vec::new();
    for (t0, z_t) in z_seq.iter().enumerate() {
        let prev = contexts.last();
        let c = top_down_step(g, vars, z_t, prev, cfg, hidden_dim)?;
        if t0 < cfg.k && t0 + 1 < z_seq.len() {
            let predictions = predict_next(g, vars, &c)?;
            for (layer, predicted) in predictions {
                pairs.push(PredictionPair {
                    time: t0 + 2, // 1-based index of the target group
                    layer,
                    predicted,
                    target: z_seq[t0 + 1][layer - 1],
                });
            }
        }
        contexts.push(c);
    }
    Ok(Rollout { pairs, contexts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pathway(seed: u64, d: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_pathway_params(d, &mut rng, &mut store);
        store
    }

    fn row(g: &mut Graph, values: &[f64]) -> Var {
        g.constant(Tensor::new(vec![1, values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn half_mode_takes_the_inclusive_upper_half() {
        assert_eq!(PcConfig::from_mode(PcMode::Half, 4, 2).pc_layers, vec![2, 3, 4]);
        assert_eq!(PcConfig::from_mode(PcMode::Half, 12, 2).pc_layers, (6..=12).collect::<Vec<_>>());
        assert_eq!(PcConfig::from_mode(PcMode::Last, 4, 2).pc_layers, vec![4]);
        assert!(!PcConfig::from_mode(PcMode::NoTdc, 4, 2).top_down);
    }

    #[test]
    fn zero_inputs_and_weights_give_zero_context() {
        let d = 3;
        let mut store = ParamStore::new();
        for gate in ["cand", "reset", "update"] {
            store.insert(format!("pathway.gru.{gate}.w"), Tensor::zeros(&[2 * d, d]));
            store.insert(format!("pathway.gru.{gate}.u"), Tensor::zeros(&[d, d]));
            store.insert(format!("pathway.gru.{gate}.bias"), Tensor::zeros(&[d]));
        }
        store.insert("pathway.pred.weight", Tensor::zeros(&[d, d]));
        store.insert("pathway.pred.bias", Tensor::zeros(&[d]));

        let cfg = PcConfig::from_mode(PcMode::Default, 2, 2);
        let mut g = Graph::new();
        let vars = store.register(&mut g, false);
        let z: Vec<Var> = (0..2).map(|_| row(&mut g, &[0.0, 0.0, 0.0])).collect();
        let c = top_down_step(&mut g, &vars, &z, None, &cfg, d).unwrap();
        for (_, v) in c.iter() {
            assert_eq!(g.value(v).data(), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn without_top_down_lower_contexts_ignore_upper_z() {
        let d = 4;
        let store = pathway(5, d);
        let cfg = PcConfig::from_mode(PcMode::NoTdc, 3, 2);

        let run = |top_z: &[f64]| -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let vars = store.register(&mut g, false);
            let z = vec![
                row(&mut g, &[0.3, -0.1, 0.5, 0.2]),
                row(&mut g, &[0.7, 0.4, -0.6, 0.1]),
                row(&mut g, top_z),
            ];
            let c = top_down_step(&mut g, &vars, &z, None, &cfg, d).unwrap();
            c.iter()
                .filter(|(l, _)| *l < 3)
                .map(|(_, v)| g.value(v).data().to_vec())
                .collect()
        };

        let a = run(&[1.0, 2.0, 3.0, 4.0]);
        let b = run(&[-9.0, 8.0, -7.0, 6.0]);
        assert_eq!(a, b, "lower-layer contexts must be bit-identical without top-down input");
    }

    #[test]
    fn with_top_down_upper_z_reaches_the_bottom_context() {
        let d = 4;
        let store = pathway(6, d);
        let cfg = PcConfig::from_mode(PcMode::Default, 3, 2);

        let mut g = Graph::new();
        let vars = store.register(&mut g, false);
        let z_bottom = row(&mut g, &[0.3, -0.1, 0.5, 0.2]);
        let z_mid = row(&mut g, &[0.7, 0.4, -0.6, 0.1]);
        let z_top = g.leaf(Tensor::new(vec![1, 4], vec![0.2, 0.9, -0.3, 0.4]).unwrap(), true);
        let c = top_down_step(&mut g, &vars, &[z_bottom, z_mid, z_top], None, &cfg, d).unwrap();
        let c1 = c.get(1).unwrap();
        let loss = g.sum(c1, None).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(z_top).unwrap();
        assert!(
            grad.data().iter().any(|&v| v.abs() > 1e-12),
            "with top-down connections, the bottom context must be sensitive to the top z"
        );
    }

    #[test]
    fn scalar_gru_trace_matches_hand_evaluation() {
        // d = 1, two layers with top-down, two time steps. The oracle below
        // evaluates the gate equations directly on scalars.
        let d = 1;
        let (wu, uu, bu) = (0.5, -0.3, 0.1); // update gate
        let (wr, ur, br) = (0.2, 0.4, -0.2); // reset gate
        let (wn, un, bn) = (0.8, 0.6, 0.05); // candidate
        let wtd = -0.7; // weight applied to the top-down slot of the input
        let mut store = ParamStore::new();
        store.insert("pathway.gru.update.w", Tensor::new(vec![2, 1], vec![wu, wtd]).unwrap());
        store.insert("pathway.gru.update.u", Tensor::new(vec![1, 1], vec![uu]).unwrap());
        store.insert("pathway.gru.update.bias", Tensor::new(vec![1], vec![bu]).unwrap());
        store.insert("pathway.gru.reset.w", Tensor::new(vec![2, 1], vec![wr, wtd]).unwrap());
        store.insert("pathway.gru.reset.u", Tensor::new(vec![1, 1], vec![ur]).unwrap());
        store.insert("pathway.gru.reset.bias", Tensor::new(vec![1], vec![br]).unwrap());
        store.insert("pathway.gru.cand.w", Tensor::new(vec![2, 1], vec![wn, wtd]).unwrap());
        store.insert("pathway.gru.cand.u", Tensor::new(vec![1, 1], vec![un]).unwrap());
        store.insert("pathway.gru.cand.bias", Tensor::new(vec![1], vec![bn]).unwrap());
        store.insert("pathway.pred.weight", Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        store.insert("pathway.pred.bias", Tensor::new(vec![1], vec![0.0]).unwrap());

        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let gru = |z: f64, td: f64, h: f64| -> f64 {
            let u = sigmoid(wu * z + wtd * td + uu * h + bu);
            let r = sigmoid(wr * z + wtd * td + ur * h + br);
            let n = (wn * z + wtd * td + un * (r * h) + bn).tanh();
            (1.0 - u) * n + u * h
        };

        let z = [[0.4, -0.8], [0.9, 0.3]]; // [time][layer]
        // Hand trace: top layer first, its fresh context feeds layer 1.
        let mut expect = Vec::new();
        let (mut h1, mut h2) = (0.0, 0.0);
        for zt in z {
            let c2 = gru(zt[1], 0.0, h2);
            let c1 = gru(zt[0], c2, h1);
            expect.push((c1, c2));
            h1 = c1;
            h2 = c2;
        }

        let cfg = PcConfig::from_mode(PcMode::Default, 2, 2);
        let mut g = Graph::new();
        let vars = store.register(&mut g, false);
        let z_seq: Vec<Vec<Var>> = z
            .iter()
            .map(|zt| zt.iter().map(|&v| row(&mut g, &[v])).collect())
            .collect();
        let out = rollout(&mut g, &vars, &z_seq, &cfg, d).unwrap();
        for (t, (e1, e2)) in expect.iter().enumerate() {
            let c1 = g.value(out.contexts[t].get(1).unwrap()).data()[0];
            let c2 = g.value(out.contexts[t].get(2).unwrap()).data()[0];
            assert!((c1 - e1).abs() < 1e-12, "t={t} layer1: {c1} vs {e1}");
            assert!((c2 - e2).abs() < 1e-12, "t={t} layer2: {c2} vs {e2}");
        }
    }

    #[test]
    fn predictor_is_the_stated_linear_map() {
        let d = 2;
        let mut store = pathway(7, d);
        store.set("pathway.pred.weight", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        store.set("pathway.pred.bias", Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let vars = store.register(&mut g, false);
        let c = ContextVars { entries: vec![(1, row(&mut g, &[3.0, -1.0]))] };
        let preds = predict_next(&mut g, &vars, &c).unwrap();
        assert_eq!(g.value(preds[0].1).data(), &[3.0, -2.0]);
    }

    #[test]
    fn zero_predictor_gives_zero_predictions() {
        let d = 3;
        let mut store = pathway(8, d);
        store.set("pathway.pred.weight", Tensor::zeros(&[3, 3]));
        store.set("pathway.pred.bias", Tensor::zeros(&[3]));
        let mut g = Graph::new();
        let vars = store.register(&mut g, false);
        let c = ContextVars {
            entries: vec![(1, row(&mut g, &[0.5, 1.5, -2.0])), (2, row(&mut g, &[1.0, 1.0, 1.0]))],
        };
        let preds = predict_next(&mut g, &vars, &c).unwrap();
        assert_eq!(preds.len(), 2);
        for (_, p) in preds {
            assert_eq!(g.value(p).data(), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn zero_horizon_emits_no_pairs() {
        let d = 2;
        let store = pathway(9, d);
        let cfg = PcConfig::from_mode(PcMode::Default, 2, 0);
        let mut g = Graph::new();
        let vars = store.register(&mut g, false);
        let z_seq: Vec<Vec<Var>> = (0..3)
            .map(|t| (0..2).map(|l| row(&mut g, &[t as f64, l as f64])).collect())
            .collect();
        let out = rollout(&mut g, &vars, &z_seq, &cfg, d).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.contexts.len(), 3);
    }

    #[test]
    fn three_steps_horizon_two_pairs_every_layer_twice() {
        let d = 2;
        let store = pathway(10, d);
        let cfg = PcConfig::from_mode(PcMode::Default, 3, 2);
        let mut g = Graph::new();
        let vars = store.register(&mut g, false);
        let z_seq: Vec<Vec<Var>> = (0..3)
            .map(|t| (0..3).map(|l| row(&mut g, &[0.1 * t as f64, 0.2 * l as f64])).collect())
            .collect();
        let out = rollout(&mut g, &vars, &z_seq, &cfg, d).unwrap();
        assert_eq!(out.pairs.len(), 2 * cfg.pc_layers.len());
        let times: Vec<usize> = out.pairs.iter().map(|p| p.time).collect();
        assert!(times.iter().all(|&t| t == 2 || t == 3));
        // Teacher forcing: every target is the ground-truth z var itself.
        for pair in &out.pairs {
            assert_eq!(pair.target, z_seq[pair.time - 1][pair.layer - 1]);
        }
    }

    #[test]
    fn predictions_never_feed_the_recurrence() {
        let d = 3;
        let store = pathway(11, d);
        let cfg = PcConfig::from_mode(PcMode::Default, 2, 2);

        let contexts_with_predictor = |pred_w: Tensor| -> Vec<Vec<f64>> {
            let mut store = store.clone();
            store.set("pathway.pred.weight", pred_w);
            let mut g = Graph::new();
            let vars = store.register(&mut g, false);
            let z_seq: Vec<Vec<Var>> = (0..3)
                .map(|t| {
                    (0..2)
                        .map(|l| row(&mut g, &[0.1 + t as f64, 0.2 * l as f64, -0.3]))
                        .collect()
                })
                .collect();
            let out = rollout(&mut g, &vars, &z_seq, &cfg, d).unwrap();
            out.contexts
                .iter()
                .flat_map(|c| c.iter().map(|(_, v)| g.value(v).data().to_vec()))
                .collect()
        };

        let a = contexts_with_predictor(Tensor::zeros(&[3, 3]));
        let b = contexts_with_predictor(Tensor::ones(&[3, 3]));
        assert_eq!(a, b, "garbage predictions must leave every context bit-identical");
    }

    #[test]
    fn contexts_are_causal_in_time() {
        let d = 2;
        let store = pathway(12, d);
        let cfg = PcConfig::from_mode(PcMode::Default, 2, 2);

        let run = |last_z: f64| -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let vars = store.register(&mut g, false);
            let z_seq: Vec<Vec<Var>> = (0..3)
                .map(|t| {
                    let v = if t == 2 { last_z } else { 0.1 * t as f64 };
                    (0..2).map(|l| row(&mut g, &[v, l as f64 * 0.5])).collect()
                })
                .collect();
            let out = rollout(&mut g, &vars, &z_seq, &cfg, d).unwrap();
            out.contexts[..2]
                .iter()
                .flat_map(|c| c.iter().map(|(_, v)| g.value(v).data().to_vec()))
                .collect()
        };

        assert_eq!(run(5.0), run(-5.0), "earlier contexts must not depend on later z");
    }

    #[test]
    fn pathway_parameter_count_is_mode_independent() {
        let d = 16;
        let store = pathway(13, d);
        let count = store.count_elements(crate::params::PATHWAY_PREFIX);
        // 3 gates x (2d*d + d*d + d) + predictor (d*d + d), regardless of mode.
        let expected = 3 * (2 * d * d + d * d + d) + d * d + d;
        assert_eq!(count, expected);
    }
}
