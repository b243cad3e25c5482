//! The classifier backbone and few-shot head.
//!
//! Two towers per stage: a per-view tower (one wavelet-attention block plus
//! shared channel mixing applied to each of the six views) and a pooled tower
//! fed by the view-pooled maps of the previous stage. After the last stage
//! the pooled tower output is fused with the view pool of the per-view tower,
//! set-pooled over spatial positions, and mapped to an embedding by a
//! two-layer MLP. Classification is by distance to class prototypes.

use crate::autodiff::{load_checkpoint, save_checkpoint, NodeId, Tape};
use crate::error::{invalid, Error, Result};
use crate::geometry::ViewSet;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::wavelet::{wa_block, WaVariant};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub resolution: usize,
    pub stages: usize,
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub wa_variant: WaVariant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 32,
            stages: 3,
            channels: vec![1, 8, 16, 32],
            embedding_dim: 64,
            wa_variant: WaVariant::Standard,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution must be a power of two, got {}",
                self.resolution
            )));
        }
        if self.stages == 0 {
            return Err(Error::Config("stages must be positive".into()));
        }
        if self.resolution >> self.stages < 1 {
            return Err(Error::Config(format!(
                "resolution {} cannot be halved {} times",
                self.resolution, self.stages
            )));
        }
        if self.channels.len() != self.stages + 1 {
            return Err(Error::Config(format!(
                "channels needs {} entries for {} stages, got {}",
                self.stages + 1,
                self.stages,
                self.channels.len()
            )));
        }
        if self.channels[0] != 1 {
            return Err(Error::Config("input channel count must be 1".into()));
        }
        if self.channels.iter().any(|c| *c == 0) || self.embedding_dim == 0 {
            return Err(Error::Config("channel and embedding sizes must be positive".into()));
        }
        Ok(())
    }

    /// A small configuration used by gradient-check style tests.
    pub fn miniature() -> Self {
        ModelConfig {
            resolution: 8,
            stages: 3,
            channels: vec![1, 2, 2, 2],
            embedding_dim: 4,
            seed: 0,
            wa_variant: WaVariant::Standard,
        }
    }
}

/// Whether a backbone participates in optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Trainable,
    Frozen,
}

/// Parameter leaf ids of one backbone on one tape.
pub struct ParamNodes {
    ids: Vec<NodeId>,
}

/// The classifier: channel-mixing and MLP parameters plus a role tag.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    role: Role,
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("sized by construction")
}

impl Backbone {
    pub fn new(config: ModelConfig, role: Role) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(&[0xb0de1, config.seed]);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for s in 0..config.stages {
            let (c_in, c_out) = (config.channels[s], config.channels[s + 1]);
            for branch in ["view", "pool"] {
                names.push(format!("stage{s}.{branch}.w"));
                params.push(xavier(c_out, c_in, &mut rng));
                names.push(format!("stage{s}.{branch}.b"));
                params.push(Tensor::zeros(vec![c_out, 1]));
            }
        }
        let set_pool_dim = 2 * config.channels[config.stages];
        let e = config.embedding_dim;
        names.push("mlp1.w".into());
        params.push(xavier(e, set_pool_dim, &mut rng));
        names.push("mlp1.b".into());
        params.push(Tensor::zeros(vec![e, 1]));
        names.push("mlp2.w".into());
        params.push(xavier(e, e, &mut rng));
        names.push("mlp2.b".into());
        params.push(Tensor::zeros(vec![e, 1]));
        Ok(Backbone {
            config,
            names,
            params,
            role,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn freeze(&mut self) {
        self.role = Role::Frozen;
    }

    pub fn set_trainable(&mut self) {
        self.role = Role::Trainable;
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// FNV hash over the exact parameter bytes; used for staleness checks.
    pub fn param_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in &self.params {
            for v in p.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::rng::fnv1a64(&bytes)
    }

    /// Registers all parameters as leaves; gradients track only when trainable.
    pub fn leaf_params(&self, tape: &mut Tape) -> ParamNodes {
        let requires = self.role == Role::Trainable;
        let ids = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires))
            .collect();
        ParamNodes { ids }
    }

    /// Gradients for every parameter, aligned with `params()`.
    pub fn collect_grads(&self, tape: &Tape, nodes: &ParamNodes) -> Result<Vec<Tensor>> {
        nodes.ids.iter().map(|id| tape.grad(*id)).collect()
    }

    /// Full forward pass for one view set already on the tape.
    ///
    /// `views` are six `[1, N, N]` nodes in the fixed view order.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        params: &ParamNodes,
        views: &[NodeId; 6],
    ) -> Result<NodeId> {
        let res = self.config.resolution;
        for v in views {
            let shape = tape.value(*v).shape();
            if shape != [1, res, res] {
                return Err(invalid(format!(
                    "view shape {shape:?} does not match configured resolution {res}"
                )));
            }
        }
        let variant = self.config.wa_variant;
        let mut per_view: Vec<NodeId> = views.to_vec();
        let mut pooled_input = view_pool(tape, &per_view)?;
        let mut fused = pooled_input;
        for s in 0..self.config.stages {
            let wv = params.ids[4 * s];
            let bv = params.ids[4 * s + 1];
            let wp = params.ids[4 * s + 2];
            let bp = params.ids[4 * s + 3];
            let mut next_views = Vec::with_capacity(6);
            for &v in &per_view {
                let z = wa_block(tape, v, variant)?;
                next_views.push(self.mix(tape, z, wv, bv)?);
            }
            let z = wa_block(tape, pooled_input, variant)?;
            let pooled_out = self.mix(tape, z, wp, bp)?;
            let view_pooled = view_pool(tape, &next_views)?;
            fused = tape.add(pooled_out, view_pooled)?;
            pooled_input = view_pooled;
            per_view = next_views;
        }
        self.head(tape, params, fused)
    }

    /// Channel mixing plus bias and relu on a `[C, M, M]` map.
    fn mix(&self, tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        let (c, h) = (shape[0], shape[1]);
        let m = h * h;
        let flat = tape.reshape(x, vec![c, m])?;
        let mixed = tape.matmul(w, flat)?;
        let ones = tape.leaf(Tensor::full(vec![1, m], 1.0), false);
        let bias = tape.matmul(b, ones)?;
        let biased = tape.add(mixed, bias)?;
        let activated = tape.relu(biased)?;
        let c_out = tape.value(w).shape()[0];
        tape.reshape(activated, vec![c_out, h, h])
    }

    /// Set pooling (concatenated spatial mean and max) and the embedding MLP.
    fn head(&self, tape: &mut Tape, params: &ParamNodes, fused: NodeId) -> Result<NodeId> {
        let shape = tape.value(fused).shape().to_vec();
        let (c, h) = (shape[0], shape[1]);
        let m = h * h;
        let flat = tape.reshape(fused, vec![c, m])?;
        let averaging = tape.leaf(Tensor::full(vec![m, 1], 1.0 / m as f64), false);
        let mean = tape.matmul(flat, averaging)?;
        let mean = tape.reshape(mean, vec![c])?;
        let mx = tape.max_over(flat, 1)?;
        let pooled = tape.concat(&[mean, mx], 0)?;
        let pooled = tape.reshape(pooled, vec![2 * c, 1])?;

        let base = 4 * self.config.stages;
        let h1 = tape.matmul(params.ids[base], pooled)?;
        let h1 = tape.add(h1, params.ids[base + 1])?;
        let h1 = tape.relu(h1)?;
        let out = tape.matmul(params.ids[base + 2], h1)?;
        let out = tape.add(out, params.ids[base + 3])?;
        tape.reshape(out, vec![self.config.embedding_dim])
    }

    /// Convenience forward: leafs parameters and views onto a tape.
    pub fn forward(&self, tape: &mut Tape, vs: &ViewSet) -> Result<NodeId> {
        let params = self.leaf_params(tape);
        let views = leaf_views(tape, vs, self.config.resolution)?;
        self.forward_nodes(tape, &params, &views)
    }

    /// Embedding as a plain tensor (throwaway tape).
    pub fn embed(&self, vs: &ViewSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let id = self.forward(&mut tape, vs)?;
        Ok(tape.value(id).clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let entries: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        let meta = serde_json::json!({
            "config": self.config,
            "role": self.role,
        });
        save_checkpoint(dir, &entries, &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (entries, meta) = load_checkpoint(dir)?;
        let config: ModelConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint manifest missing model config".into()))?,
        )?;
        let role: Role = serde_json::from_value(
            meta.get("role")
                .cloned()
                .unwrap_or(serde_json::json!("frozen")),
        )?;
        let template = Backbone::new(config.clone(), role)?;
        let by_name: BTreeMap<String, Tensor> = entries.into_iter().collect();
        let mut params = Vec::with_capacity(template.names.len());
        for (name, expect) in template.names.iter().zip(&template.params) {
            let tensor = by_name
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint missing parameter '{name}'")))?;
            if tensor.shape() != expect.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter '{name}' has shape {:?}, expected {:?}",
                    tensor.shape(),
                    expect.shape()
                )));
            }
            params.push(tensor.clone());
        }
        Ok(Backbone {
            config,
            names: template.names,
            params,
            role,
        })
    }
}

/// Registers the six views of a sample as non-gradient leaves.
pub fn leaf_views(tape: &mut Tape, vs: &ViewSet, resolution: usize) -> Result<[NodeId; 6]> {
    if vs.resolution() != resolution {
        return Err(invalid(format!(
            "view set resolution {} does not match configured {resolution}",
            vs.resolution()
        )));
    }
    let ids: Vec<NodeId> = vs
        .views()
        .iter()
        .map(|view| {
            let t = Tensor::new(vec![1, resolution, resolution], view.values().to_vec())?;
            Ok(tape.leaf(t, false))
        })
        .collect::<Result<_>>()?;
    Ok(ids.try_into().expect("view sets always hold six views"))
}

/// Element-wise maximum across exactly six same-shaped feature maps.
/// The gradient routes to the first view attaining the maximum.
pub fn view_pool(tape: &mut Tape, views: &[NodeId]) -> Result<NodeId> {
    if views.len() != 6 {
        return Err(invalid(format!("view_pool needs 6 tensors, got {}", views.len())));
    }
    let shape = tape.value(views[0]).shape().to_vec();
    for &v in views {
        if tape.value(v).shape() != shape {
            return Err(invalid("view_pool inputs must share one shape"));
        }
    }
    let mut stack_shape = vec![1];
    stack_shape.extend_from_slice(&shape);
    let stacked: Vec<NodeId> = views
        .iter()
        .map(|v| tape.reshape(*v, stack_shape.clone()))
        .collect::<Result<_>>()?;
    let cat = tape.concat(&stacked, 0)?;
    tape.max_over(cat, 0)
}

/// Prototype head: logits are negative squared distances to class prototypes.
///
/// `support` pairs each embedding with a class index in `0..n_classes`
/// (classes ordered by sorted identifier). Every class needs support.
pub fn proto_head(
    tape: &mut Tape,
    support: &[(NodeId, usize)],
    queries: &[NodeId],
    n_classes: usize,
) -> Result<NodeId> {
    if n_classes == 0 || queries.is_empty() {
        return Err(invalid("proto_head needs classes and queries"));
    }
    let mut grouped: Vec<Vec<NodeId>> = vec![Vec::new(); n_classes];
    for (id, class) in support {
        if *class >= n_classes {
            return Err(invalid(format!("support class {class} outside 0..{n_classes}")));
        }
        grouped[*class].push(*id);
    }
    let mut prototypes = Vec::with_capacity(n_classes);
    for (class, members) in grouped.iter().enumerate() {
        if members.is_empty() {
            return Err(invalid(format!("class {class} has no support embeddings")));
        }
        let mut acc = members[0];
        for &m in &members[1..] {
            acc = tape.add(acc, m)?;
        }
        prototypes.push(tape.scalar_multiply(acc, 1.0 / members.len() as f64)?);
    }
    let mut rows = Vec::with_capacity(queries.len());
    for &q in queries {
        let mut cells = Vec::with_capacity(n_classes);
        for &p in &prototypes {
            let d = tape.squared_l2_distance(q, p)?;
            cells.push(tape.reshape(d, vec![1])?);
        }
        let row = tape.concat(&cells, 0)?;
        rows.push(tape.reshape(row, vec![1, n_classes])?);
    }
    let dists = tape.concat(&rows, 0)?;
    tape.scalar_multiply(dists, -1.0)
}

/// Mean episodic cross-entropy over query logits.
pub fn episode_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lp = tape.log_softmax(logits, 1)?;
    tape.negative_log_likelihood(lp, labels)
}

/// Copies parameters bitwise; the destination keeps its own role.
pub fn copy_parameters(src: &Backbone, dst: &mut Backbone) -> Result<()> {
    if src.params.len() != dst.params.len() {
        return Err(invalid(format!(
            "copy_parameters: {} vs {} parameter tensors",
            src.params.len(),
            dst.params.len()
        )));
    }
    for (s, d) in src.params.iter().zip(&dst.params) {
        if s.shape() != d.shape() {
            return Err(invalid(format!(
                "copy_parameters: shape mismatch {:?} vs {:?}",
                s.shape(),
                d.shape()
            )));
        }
    }
    dst.params = src.params.clone();
    Ok(())
}

/// One N-way K-shot episode with labeled support and query view sets.
#[derive(Clone, Debug)]
pub struct Episode {
    pub classes: Vec<String>,
    pub support: Vec<ViewSet>,
    pub query: Vec<ViewSet>,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
}

impl Episode {
    pub fn new(
        support: Vec<ViewSet>,
        query: Vec<ViewSet>,
        way: usize,
        shot: usize,
        queries_per_class: usize,
    ) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in &support {
            *counts.entry(s.label.clone()).or_default() += 1;
        }
        if counts.len() != way {
            return Err(Error::Config(format!(
                "episode has {} support classes, expected {way}",
                counts.len()
            )));
        }
        for (label, count) in &counts {
            if *count != shot {
                return Err(Error::Config(format!(
                    "class '{label}' has {count} support samples, expected {shot}"
                )));
            }
        }
        let classes: Vec<String> = counts.keys().cloned().collect();
        for q in &query {
            if !counts.contains_key(&q.label) {
                return Err(Error::Config(format!(
                    "query label '{}' is not an episode class",
                    q.label
                )));
            }
        }
        Ok(Episode {
            classes,
            support,
            query,
            way,
            shot,
            queries_per_class,
        })
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| invalid(format!("label '{label}' not in episode")))
    }
}
