//! Orchestration: pre-training of the target model, mask-filtered training
//! with periodic target copying, episodic evaluation with confidence
//! intervals, fold-based splits, and the ablation harness.

use crate::autodiff::{adam_step, AdamConfig, AdamState, NodeId, Tape};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    copy_parameters, episode_loss, leaf_views, proto_head, Backbone, Episode, ModelConfig,
    ParamNodes, Role,
};
use crate::rde::{apply_mask, optimize_mask, CoefficientMask, MaskStore, RdeConfig};
use crate::rng::{fnv1a64, mix, stream};
use crate::wavelet::WaVariant;
use rand::Rng;
use serde::{Deserialize, Serialize};

const PRETRAIN_TAG: u64 = 0x9e1;
const TRAIN_TAG: u64 = 0x9e2;
const EVAL_TAG: u64 = 0x9e3;
const MASK_TAG: u64 = 0x9e4;
const MASK_EVAL_TAG: u64 = 0x9e5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub copy_period: usize,
    pub learning_rate: f64,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    pub folds: usize,
    pub test_fold: usize,
    pub seed: u64,
    /// Disables the mask stage entirely (the unmasked control pipeline).
    pub rde_enabled: bool,
    /// Evaluate on masked inputs; off evaluates raw projections.
    pub eval_masked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 20,
            train_epochs: 60,
            copy_period: 20,
            learning_rate: 1e-4,
            way: 5,
            shot: 1,
            queries: 10,
            episodes_per_epoch: 10,
            eval_episodes: 200,
            folds: 2,
            test_fold: 0,
            seed: 0,
            rde_enabled: true,
            eval_masked: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot == 0 || self.queries == 0 {
            return Err(Error::Config(
                "way must be >= 2 and shot/queries positive".into(),
            ));
        }
        if self.episodes_per_epoch == 0 {
            return Err(Error::Config("episodes_per_epoch must be positive".into()));
        }
        if self.copy_period == 0 {
            return Err(Error::Config("copy_period must be positive".into()));
        }
        if self.train_epochs > 0 && self.copy_period > self.train_epochs {
            return Err(Error::Config(format!(
                "copy period {} exceeds training epochs {}",
                self.copy_period, self.train_epochs
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config("at least two folds are required".into()));
        }
        if self.test_fold >= self.folds {
            return Err(Error::Config(format!(
                "test fold {} outside 0..{}",
                self.test_fold, self.folds
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Disjoint assignment of class labels to folds; one fold is held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    folds: Vec<Vec<String>>,
    test_fold: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

impl FoldSplit {
    /// Round-robin assignment over sorted class labels.
    pub fn new(classes: &[String], folds: usize, test_fold: usize) -> Result<Self> {
        if folds < 2 {
            return Err(Error::Config("at least two folds are required".into()));
        }
        if test_fold >= folds {
            return Err(Error::Config(format!("test fold {test_fold} outside 0..{folds}")));
        }
        if classes.len() < folds {
            return Err(Error::Config(format!(
                "{} classes cannot fill {folds} folds",
                classes.len()
            )));
        }
        let mut sorted: Vec<String> = classes.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut assignment = vec![Vec::new(); folds];
        for (i, class) in sorted.into_iter().enumerate() {
            assignment[i % folds].push(class);
        }
        Ok(FoldSplit {
            folds: assignment,
            test_fold,
        })
    }

    pub fn test_classes(&self) -> &[String] {
        &self.folds[self.test_fold]
    }

    pub fn train_classes(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.test_fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        out.sort();
        out
    }

    pub fn classes_for(&self, phase: Phase) -> Vec<String> {
        match phase {
            Phase::Train => self.train_classes(),
            Phase::Test => self.test_classes().to_vec(),
        }
    }

    /// No class may appear in both phases, and all classes must exist.
    pub fn assert_hygiene(&self, dataset: &Dataset) -> Result<()> {
        let train = self.train_classes();
        let test = self.test_classes();
        for t in &train {
            if test.contains(t) {
                return Err(Error::Config(format!("class '{t}' leaks across the split")));
            }
        }
        for class in train.iter().chain(test.iter()) {
            dataset.class_sample_indices(class)?;
        }
        Ok(())
    }
}

/// Draws one deterministic N-way K-shot episode from the phase's classes.
pub fn sample_episode(
    dataset: &Dataset,
    split: &FoldSplit,
    phase: Phase,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Episode> {
    let pool = split.classes_for(phase);
    if pool.len() < cfg.way {
        return Err(Error::Config(format!(
            "phase pool has {} classes, need {} for the episode",
            pool.len(),
            cfg.way
        )));
    }
    let per_class = cfg.shot + cfg.queries;
    for class in &pool {
        let available = dataset.class_sample_indices(class)?.len();
        if available < per_class {
            return Err(Error::Config(format!(
                "class '{class}' has {available} samples, need {per_class}"
            )));
        }
    }
    let mut rng = stream(&[0xe9, seed]);
    // Uniform subset of classes via partial Fisher-Yates.
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for i in 0..cfg.way {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    let mut chosen: Vec<String> = order[..cfg.way].iter().map(|i| pool[*i].clone()).collect();
    chosen.sort();

    let mut support = Vec::with_capacity(cfg.way * cfg.shot);
    let mut query = Vec::with_capacity(cfg.way * cfg.queries);
    for class in &chosen {
        let indices = dataset.class_sample_indices(class)?;
        let mut order: Vec<usize> = (0..indices.len()).collect();
        for i in 0..per_class {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        for (k, &pos) in order[..per_class].iter().enumerate() {
            let vs = dataset.sample(indices[pos]).clone();
            if k < cfg.shot {
                support.push(vs);
            } else {
                query.push(vs);
            }
        }
    }
    Episode::new(support, query, cfg.way, cfg.shot, cfg.queries)
}

/// Forward of a whole episode on one tape; returns logits and query labels.
fn episode_forward(
    tape: &mut Tape,
    model: &Backbone,
    params: &ParamNodes,
    episode: &Episode,
    support: &[crate::geometry::ViewSet],
    query: &[crate::geometry::ViewSet],
) -> Result<(NodeId, Vec<usize>)> {
    let res = model.config().resolution;
    let mut support_embs = Vec::with_capacity(support.len());
    for vs in support {
        let views = leaf_views(tape, vs, res)?;
        let emb = model.forward_nodes(tape, params, &views)?;
        support_embs.push((emb, episode.class_index(&vs.label)?));
    }
    let mut query_embs = Vec::with_capacity(query.len());
    let mut labels = Vec::with_capacity(query.len());
    for vs in query {
        let views = leaf_views(tape, vs, res)?;
        query_embs.push(model.forward_nodes(tape, params, &views)?);
        labels.push(episode.class_index(&vs.label)?);
    }
    let logits = proto_head(tape, &support_embs, &query_embs, episode.way)?;
    Ok((logits, labels))
}

/// One optimization step of the model on an episode; returns the loss.
fn train_step(
    model: &mut Backbone,
    episode: &Episode,
    support: &[crate::geometry::ViewSet],
    query: &[crate::geometry::ViewSet],
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.leaf_params(&mut tape);
    let (logits, labels) = episode_forward(&mut tape, model, &params, episode, support, query)?;
    let loss = episode_loss(&mut tape, logits, &labels)?;
    let loss_value = tape.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numeric {
            context: "episode loss is non-finite".into(),
        });
    }
    tape.backward(loss)?;
    let grads = model.collect_grads(&tape, &params)?;
    adam_step(model.params_mut(), &grads, adam, adam_cfg)?;
    Ok(loss_value)
}

/// Fraction of queries whose arg-max logit matches the true class.
fn episode_accuracy(
    model: &Backbone,
    episode: &Episode,
    support: &[crate::geometry::ViewSet],
    query: &[crate::geometry::ViewSet],
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.leaf_params(&mut tape);
    let (logits, labels) = episode_forward(&mut tape, model, &params, episode, support, query)?;
    let values = tape.value(logits).data();
    let way = episode.way;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(m, &label)| {
            let row = &values[m * way..(m + 1) * way];
            let mut best = 0usize;
            for c in 1..way {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == label
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

enum MaskMode {
    /// Warm-start each sample's mask from the store, re-optimize, store back.
    TrainWarm { run_seed: u64, epoch: usize },
    /// Reuse the stored mask when present; otherwise cold-start once and store.
    EvalCached { run_seed: u64 },
    Off,
}

/// Applies the mask stage of the pipeline to every episode sample.
fn masked_episode(
    episode: &Episode,
    target: &Backbone,
    store: &mut MaskStore,
    rde_cfg: &RdeConfig,
    mode: &MaskMode,
) -> Result<(Vec<crate::geometry::ViewSet>, Vec<crate::geometry::ViewSet>)> {
    let mut mask_for = |vs: &crate::geometry::ViewSet| -> Result<crate::geometry::ViewSet> {
        match mode {
            MaskMode::Off => Ok(vs.clone()),
            MaskMode::TrainWarm { run_seed, epoch } => {
                let seed = mix(&[*run_seed, MASK_TAG, fnv1a64(vs.sample_id.as_bytes()), *epoch as u64]);
                let warm = store.get(&vs.sample_id).cloned();
                let mask = optimize_mask(vs, target, rde_cfg, warm.as_ref(), seed)?;
                let out = apply_mask(vs, &mask)?;
                store.put(mask);
                Ok(out)
            }
            MaskMode::EvalCached { run_seed } => {
                let mask: CoefficientMask = match store.get(&vs.sample_id) {
                    Some(m) => m.clone(),
                    None => {
                        let seed = mix(&[*run_seed, MASK_EVAL_TAG, fnv1a64(vs.sample_id.as_bytes())]);
                        let m = optimize_mask(vs, target, rde_cfg, None, seed)?;
                        store.put(m.clone());
                        m
                    }
                };
                apply_mask(vs, &mask)
            }
        }
    };
    let support = episode
        .support
        .iter()
        .map(&mut mask_for)
        .collect::<Result<Vec<_>>>()?;
    let query = episode
        .query
        .iter()
        .map(&mut mask_for)
        .collect::<Result<Vec<_>>>()?;
    Ok((support, query))
}

/// Episodic pre-training of the target model on unmasked projections.
/// Returns per-epoch mean losses.
pub fn pretrain(
    qhat: &mut Backbone,
    dataset: &Dataset,
    split: &FoldSplit,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    split.assert_hygiene(dataset)?;
    if qhat.role() != Role::Trainable {
        return Err(Error::Contract("pretraining requires a trainable model".into()));
    }
    let adam_cfg = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut adam = AdamState::new(qhat.params());
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 1..=cfg.pretrain_epochs {
        let mut total = 0.0;
        for ep in 1..=cfg.episodes_per_epoch {
            let seed = mix(&[cfg.seed, PRETRAIN_TAG, epoch as u64, ep as u64]);
            let episode = sample_episode(dataset, split, Phase::Train, cfg, seed)?;
            let loss = train_step(
                qhat,
                &episode,
                &episode.support,
                &episode.query,
                &mut adam,
                &adam_cfg,
            )
            .map_err(|e| wrap_context(e, &format!("pretrain epoch {epoch} episode {ep}")))?;
            total += loss;
        }
        epoch_losses.push(total / cfg.episodes_per_epoch as f64);
    }
    Ok(epoch_losses)
}

fn wrap_context(e: Error, context: &str) -> Error {
    match e {
        Error::Numeric { context: inner } => Error::Numeric {
            context: format!("{context}: {inner}"),
        },
        other => other,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutput {
    pub epoch_losses: Vec<f64>,
    /// Epochs at which the target received the model parameters.
    pub copies_at: Vec<usize>,
}

/// Mask-filtered training of `q` against the frozen target `qhat`.
/// Every `copy_period` epochs the target receives `q`'s parameters.
pub fn train(
    q: &mut Backbone,
    qhat: &mut Backbone,
    store: &mut MaskStore,
    dataset: &Dataset,
    split: &FoldSplit,
    cfg: &TrainConfig,
    rde_cfg: &RdeConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    rde_cfg.validate()?;
    split.assert_hygiene(dataset)?;
    if q.role() != Role::Trainable {
        return Err(Error::Contract("training requires a trainable model".into()));
    }
    if qhat.role() != Role::Frozen {
        return Err(Error::Contract("the mask target must be frozen".into()));
    }
    let adam_cfg = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut adam = AdamState::new(q.params());
    let mut epoch_losses = Vec::with_capacity(cfg.train_epochs);
    let mut copies_at = Vec::new();
    let mut target_hash = qhat.param_hash();
    for epoch in 1..=cfg.train_epochs {
        let mut total = 0.0;
        for ep in 1..=cfg.episodes_per_epoch {
            let seed = mix(&[cfg.seed, TRAIN_TAG, epoch as u64, ep as u64]);
            let episode = sample_episode(dataset, split, Phase::Train, cfg, seed)?;
            let mode = if cfg.rde_enabled {
                MaskMode::TrainWarm {
                    run_seed: cfg.seed,
                    epoch,
                }
            } else {
                MaskMode::Off
            };
            let (support, query) = masked_episode(&episode, qhat, store, rde_cfg, &mode)
                .map_err(|e| wrap_context(e, &format!("train epoch {epoch} episode {ep}")))?;
            let loss = train_step(q, &episode, &support, &query, &mut adam, &adam_cfg)
                .map_err(|e| wrap_context(e, &format!("train epoch {epoch} episode {ep}")))?;
            total += loss;
        }
        epoch_losses.push(total / cfg.episodes_per_epoch as f64);
        // The target must not drift between copies.
        if qhat.param_hash() != target_hash {
            return Err(Error::State(format!(
                "target parameters changed outside a copy at epoch {epoch}"
            )));
        }
        if epoch % cfg.copy_period == 0 {
            copy_parameters(q, qhat)?;
            target_hash = qhat.param_hash();
            copies_at.push(epoch);
        }
    }
    Ok(TrainOutput {
        epoch_losses,
        copies_at,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub mean_accuracy: f64,
    /// 1.96 * sample std / sqrt(episodes).
    pub ci_half_width: f64,
    pub per_episode: Vec<f64>,
}

/// Episodic evaluation on the test fold.
///
/// With masking enabled, unseen samples get cold-started masks against the
/// frozen target, stored for reuse across episodes.
pub fn evaluate(
    model: &Backbone,
    mask_target: &Backbone,
    store: &mut MaskStore,
    dataset: &Dataset,
    split: &FoldSplit,
    cfg: &TrainConfig,
    rde_cfg: &RdeConfig,
    episodes: usize,
) -> Result<EvalOutput> {
    if episodes < 2 {
        return Err(Error::Config(format!(
            "confidence interval needs at least 2 episodes, got {episodes}"
        )));
    }
    cfg.validate()?;
    split.assert_hygiene(dataset)?;
    let mut per_episode = Vec::with_capacity(episodes);
    for i in 1..=episodes {
        let seed = mix(&[cfg.seed, EVAL_TAG, i as u64]);
        let episode = sample_episode(dataset, split, Phase::Test, cfg, seed)?;
        let mode = if cfg.rde_enabled && cfg.eval_masked {
            MaskMode::EvalCached { run_seed: cfg.seed }
        } else {
            MaskMode::Off
        };
        let (support, query) = masked_episode(&episode, mask_target, store, rde_cfg, &mode)
            .map_err(|e| wrap_context(e, &format!("eval episode {i}")))?;
        per_episode.push(episode_accuracy(model, &episode, &support, &query)?);
    }
    let n = per_episode.len() as f64;
    let mean = per_episode.iter().sum::<f64>() / n;
    let var = per_episode
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / (n - 1.0);
    let ci_half_width = 1.96 * var.sqrt() / n.sqrt();
    Ok(EvalOutput {
        mean_accuracy: mean,
        ci_half_width,
        per_episode,
    })
}

/// Everything a full pretrain-then-train run produces.
pub struct FullRun {
    /// Frozen snapshot of the target right after pre-training.
    pub qhat_pretrained: Backbone,
    pub q: Backbone,
    pub qhat: Backbone,
    pub store: MaskStore,
    pub pretrain_losses: Vec<f64>,
    pub train_output: TrainOutput,
}

/// Pre-train the target, copy it into the model, then mask-filtered training.
pub fn run_pipeline(
    model_cfg: &ModelConfig,
    rde_cfg: &RdeConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<FullRun> {
    model_cfg.validate()?;
    if dataset.resolution() != model_cfg.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match model resolution {}",
            dataset.resolution(),
            model_cfg.resolution
        )));
    }
    let split = FoldSplit::new(&dataset.classes(), train_cfg.folds, train_cfg.test_fold)?;
    let mut qhat = Backbone::new(model_cfg.clone(), Role::Trainable)?;
    let pretrain_losses = pretrain(&mut qhat, dataset, &split, train_cfg)?;
    let mut qhat_pretrained = qhat.clone();
    qhat_pretrained.freeze();
    let mut q = qhat.clone();
    q.set_trainable();
    qhat.freeze();
    let mut store = MaskStore::new();
    let train_output = train(&mut q, &mut qhat, &mut store, dataset, &split, train_cfg, rde_cfg)?;
    Ok(FullRun {
        qhat_pretrained,
        q,
        qhat,
        store,
        pretrain_losses,
        train_output,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    LambdaSweep,
    WaVariant,
    PretrainedVsFinal,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_sweep" => Ok(AblationKind::LambdaSweep),
            "wa_variant" => Ok(AblationKind::WaVariant),
            "pretrained_vs_final" => Ok(AblationKind::PretrainedVsFinal),
            other => Err(Error::Config(format!("unknown ablation kind '{other}'"))),
        }
    }
}

impl AblationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AblationKind::LambdaSweep => "lambda_sweep",
            AblationKind::WaVariant => "wa_variant",
            AblationKind::PretrainedVsFinal => "pretrained_vs_final",
        }
    }
}

/// A small comparison table rendered to CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn seeded_configs(model_cfg: &ModelConfig, train_cfg: &TrainConfig, k: u64) -> (ModelConfig, TrainConfig) {
    let mut m = model_cfg.clone();
    let mut t = train_cfg.clone();
    m.seed = mix(&[m.seed, 0xab1a, k]);
    t.seed = mix(&[t.seed, 0xab1b, k]);
    (m, t)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs an ablation matrix with shared seeds and collects a comparison table.
pub fn run_ablation(
    kind: AblationKind,
    model_cfg: &ModelConfig,
    rde_cfg: &RdeConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    seeds: usize,
) -> Result<AblationTable> {
    match kind {
        AblationKind::LambdaSweep => {
            let mut rows = Vec::new();
            for &lambda in &[0.01, 1.0, 10.0, 100.0] {
                let mut rc = rde_cfg.clone();
                rc.lambda = lambda;
                let run = run_pipeline(model_cfg, &rc, train_cfg, dataset)?;
                let mut store = run.store;
                let split =
                    FoldSplit::new(&dataset.classes(), train_cfg.folds, train_cfg.test_fold)?;
                let eval = evaluate(
                    &run.q,
                    &run.qhat,
                    &mut store,
                    dataset,
                    &split,
                    train_cfg,
                    &rc,
                    train_cfg.eval_episodes,
                )?;
                let densities = store.densities();
                let mean_density =
                    densities.iter().map(|(_, d)| d).sum::<f64>() / densities.len().max(1) as f64;
                rows.push(vec![
                    format!("{lambda}"),
                    format!("{}", eval.mean_accuracy),
                    format!("{}", eval.ci_half_width),
                    format!("{mean_density}"),
                ]);
            }
            Ok(AblationTable {
                kind: kind.name().into(),
                header: vec![
                    "lambda".into(),
                    "accuracy_mean".into(),
                    "accuracy_ci95".into(),
                    "mean_mask_density".into(),
                ],
                rows,
            })
        }
        AblationKind::WaVariant => {
            let mut rows = Vec::new();
            for variant in WaVariant::ALL {
                let mut accs = Vec::with_capacity(seeds);
                for k in 0..seeds {
                    let (mut m, t) = seeded_configs(model_cfg, train_cfg, k as u64);
                    m.wa_variant = variant;
                    let run = run_pipeline(&m, rde_cfg, &t, dataset)?;
                    let mut store = run.store;
                    let split = FoldSplit::new(&dataset.classes(), t.folds, t.test_fold)?;
                    let eval = evaluate(
                        &run.q,
                        &run.qhat,
                        &mut store,
                        dataset,
                        &split,
                        &t,
                        rde_cfg,
                        t.eval_episodes,
                    )?;
                    accs.push(eval.mean_accuracy);
                }
                let mut row = vec![variant.name().to_string()];
                for a in &accs {
                    row.push(format!("{a}"));
                }
                row.push(format!("{}", median(&mut accs.clone())));
                rows.push(row);
            }
            let mut header = vec!["variant".to_string()];
            for k in 0..seeds {
                header.push(format!("accuracy_seed{k}"));
            }
            header.push("accuracy_median".into());
            Ok(AblationTable {
                kind: kind.name().into(),
                header,
                rows,
            })
        }
        AblationKind::PretrainedVsFinal => {
            let mut pre_accs = Vec::with_capacity(seeds);
            let mut final_accs = Vec::with_capacity(seeds);
            let mut pre_cis = Vec::with_capacity(seeds);
            let mut final_cis = Vec::with_capacity(seeds);
            for k in 0..seeds {
                let (m, t) = seeded_configs(model_cfg, train_cfg, k as u64);
                let run = run_pipeline(&m, rde_cfg, &t, dataset)?;
                let split = FoldSplit::new(&dataset.classes(), t.folds, t.test_fold)?;
                // Paired evaluation: identical episode seeds for both models.
                let mut store_pre = MaskStore::new();
                let pre = evaluate(
                    &run.qhat_pretrained,
                    &run.qhat_pretrained,
                    &mut store_pre,
                    dataset,
                    &split,
                    &t,
                    rde_cfg,
                    t.eval_episodes,
                )?;
                let mut store_final = run.store;
                let fin = evaluate(
                    &run.q,
                    &run.qhat,
                    &mut store_final,
                    dataset,
                    &split,
                    &t,
                    rde_cfg,
                    t.eval_episodes,
                )?;
                pre_accs.push(pre.mean_accuracy);
                pre_cis.push(pre.ci_half_width);
                final_accs.push(fin.mean_accuracy);
                final_cis.push(fin.ci_half_width);
            }
            let build_row = |label: &str, accs: &[f64], cis: &[f64]| -> Vec<String> {
                let mut row = vec![label.to_string()];
                for a in accs {
                    row.push(format!("{a}"));
                }
                row.push(format!("{}", median(&mut accs.to_vec())));
                row.push(format!("{}", median(&mut cis.to_vec())));
                row
            };
            let mut header = vec!["model".to_string()];
            for k in 0..seeds {
                header.push(format!("accuracy_seed{k}"));
            }
            header.push("accuracy_median".into());
            header.push("ci95_median".into());
            Ok(AblationTable {
                kind: kind.name().into(),
                header,
                rows: vec![
                    build_row("pretrained", &pre_accs, &pre_cis),
                    build_row("final", &final_accs, &final_cis),
                ],
            })
        }
    }
}
