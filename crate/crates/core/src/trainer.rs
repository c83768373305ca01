//! Two-stage training: projector alignment with everything else frozen, then
//! projector + language-model finetuning with the encoders frozen. AdamW
//! with decoupled weight decay under a warmup + cosine schedule.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, MomentState};
use crate::error::{Error, Result};
use crate::model::{
    CachedFeatures, HybridModel, PreparedSample, ENCODER_A, ENCODER_B, LM, PROJECTOR_A,
};
use crate::tensor::{ParamStore, Session};

/// Learning rate for update `step` (1-based) of `total_steps`: linear warmup
/// to `base_lr`, then half-cosine decay to zero.
pub fn cosine_lr(step: usize, base_lr: f64, total_steps: usize, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Default warmup: 3% of the stage's steps.
pub fn default_warmup(steps: usize) -> usize {
    (steps as f64 * 0.03).round() as usize
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    updates: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyper(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn moments(&self) -> MomentState<'_> {
        MomentState {
            updates: self.updates,
            m: &self.m,
            v: &self.v,
        }
    }

    pub fn set_moments(&mut self, updates: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.updates = updates;
        self.m = m;
        self.v = v;
    }

    /// One update. `grads[i]` belongs to parameter `i` of the store; `None`
    /// means no gradient reached it. Frozen parameters are never touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim(
                "adamw_step",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.tensor.numel() {
                    return Err(Error::dim(
                        "adamw_step",
                        format!("{}: gradient of {} for {} values", p.name, g.len(), p.tensor.numel()),
                    ));
                }
            }
        }
        self.updates += 1;
        let t = self.updates as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, p) in store.iter_mut() {
            let i = id.index();
            if p.frozen {
                continue;
            }
            let data = p.tensor.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let gj = grads[i].as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                data[j] -= lr * weight_decay * data[j];
                data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Rounds moments to `f32`, matching what a checkpoint stores.
    fn quantize(&mut self) {
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Stage1,
    Stage2,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Stage1 => "stage1",
            StageName::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: StageName,
    pub frozen_prefixes: Vec<String>,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub warmup_steps: usize,
}

/// Learning-rate settings for one stage as they appear in a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    pub steps: usize,
    /// Defaults to 3% of `steps`.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
}

fn default_wd() -> f64 {
    0.01
}

fn prefix(p: &str) -> String {
    format!("{p}.")
}

impl StagePlan {
    /// Alignment stage: encoders and LM frozen. Projector A is trained too
    /// unless `train_projector_a` is off.
    pub fn stage1(s: &StageSettings, train_projector_a: bool) -> Self {
        let mut frozen = vec![prefix(ENCODER_A), prefix(ENCODER_B), prefix(LM)];
        if !train_projector_a {
            frozen.push(prefix(PROJECTOR_A));
        }
        Self::build(StageName::Stage1, frozen, s)
    }

    /// Finetuning stage: projectors and LM trained; each encoder stays frozen
    /// unless its config says otherwise.
    pub fn stage2(s: &StageSettings, freeze_a: bool, freeze_b: bool) -> Self {
        let mut frozen = Vec::new();
        if freeze_a {
            frozen.push(prefix(ENCODER_A));
        }
        if freeze_b {
            frozen.push(prefix(ENCODER_B));
        }
        Self::build(StageName::Stage2, frozen, s)
    }

    fn build(name: StageName, frozen_prefixes: Vec<String>, s: &StageSettings) -> Self {
        Self {
            name,
            frozen_prefixes,
            base_lr: s.lr,
            weight_decay: s.weight_decay,
            steps: s.steps,
            warmup_steps: s.warmup_steps.unwrap_or_else(|| default_warmup(s.steps)),
        }
    }

    pub fn lr_at(&self, update: usize) -> f64 {
        cosine_lr(update, self.base_lr, self.steps, self.warmup_steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    /// The fields that must match bit for bit between identical runs.
    pub fn deterministic_key(&self) -> (usize, String, u64, u64) {
        (self.step, self.stage.clone(), self.lr.to_bits(), self.loss.to_bits())
    }
}

/// Appends one JSON object per line.
pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io("metrics", e))
    }
}

/// Encoder features of every sample for the branches whose encoder is fully
/// frozen; reused across steps and stages.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    entries: Vec<Vec<CachedFeatures>>,
}

impl FeatureCache {
    pub fn build(model: &HybridModel, data: &[PreparedSample], branch_a: bool, branch_b: bool) -> Result<Self> {
        if !branch_a && !branch_b {
            return Ok(Self::default());
        }
        let entries = data
            .iter()
            .map(|s| {
                s.images
                    .iter()
                    .map(|img| {
                        let mut f = model.encode_image(img)?;
                        if !branch_a {
                            f.a = None;
                        }
                        if !branch_b {
                            f.b = None;
                        }
                        Ok(f)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn get(&self, i: usize) -> Option<&[CachedFeatures]> {
        self.entries.get(i).map(Vec::as_slice)
    }

    /// Drops a branch whose encoder is about to change.
    pub fn invalidate(&mut self, branch_a: bool, branch_b: bool) {
        for f in self.entries.iter_mut().flatten() {
            if branch_a {
                f.a = None;
            }
            if branch_b {
                f.b = None;
            }
        }
    }
}

/// Whether every parameter under `prefix` is frozen (and at least one
/// exists).
pub fn all_frozen(store: &ParamStore, prefix: &str) -> bool {
    let mut any = false;
    for p in store.with_prefix(prefix) {
        any = true;
        if !p.frozen {
            return false;
        }
    }
    any
}

/// Sample indices for step `step`: consecutive slices of per-epoch
/// permutations seeded by `(seed, stage, epoch)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, stage: StageName, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for p in step * batch..(step + 1) * batch {
        let epoch = p / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let stage_tag = match stage {
                StageName::Stage1 => 1u64,
                StageName::Stage2 => 2,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (stage_tag << 56) ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[p % n]);
    }
    out
}

/// Stateful execution of one stage; steps can be taken one at a time and
/// the state checkpointed and restored.
pub struct StageRunner<'a> {
    pub plan: StagePlan,
    model: &'a mut HybridModel,
    data: &'a [PreparedSample],
    cache: &'a FeatureCache,
    batch_size: usize,
    seed: u64,
    opt: AdamW,
    step: usize,
    started: Instant,
}

impl<'a> StageRunner<'a> {
    pub fn new(
        plan: StagePlan,
        model: &'a mut HybridModel,
        data: &'a [PreparedSample],
        cache: &'a FeatureCache,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        model.store.apply_freeze(&plan.frozen_prefixes);
        let opt = AdamW::new(&model.store);
        Ok(Self {
            plan,
            model,
            data,
            cache,
            batch_size,
            seed,
            opt,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.plan.steps
    }

    pub fn model(&self) -> &HybridModel {
        self.model
    }

    /// Mean loss and averaged gradients of a batch at the current
    /// parameters, without updating anything.
    pub fn batch_loss(&self, indices: &[usize]) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let store = &self.model.store;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        let mut total = 0.0;
        let scale = 1.0 / indices.len() as f64;
        for &i in indices {
            let mut s = Session::new(store);
            let Some(loss) = self.model.sample_loss(&mut s, &self.data[i], self.cache.get(i))? else {
                continue;
            };
            total += s.graph.value(loss)[0];
            s.graph.backward(loss)?;
            for (id, g) in s.param_grads() {
                let slot = grads[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
            }
        }
        Ok((total * scale, grads))
    }

    /// Loss of the batch the next step would use.
    pub fn peek_next_loss(&self) -> Result<f64> {
        let idx = batch_indices(self.data.len(), self.batch_size, self.seed, self.plan.name, self.step);
        Ok(self.batch_loss(&idx)?.0)
    }

    pub fn step_once(&mut self) -> Result<MetricsRecord> {
        let idx = batch_indices(self.data.len(), self.batch_size, self.seed, self.plan.name, self.step);
        let (loss, grads) = self.batch_loss(&idx)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: self.plan.name.as_str().into(),
                step: self.step,
            });
        }
        let lr = self.plan.lr_at(self.step + 1);
        self.opt
            .step(&mut self.model.store, &grads, lr, self.plan.weight_decay)?;
        let rec = MetricsRecord {
            step: self.step,
            stage: self.plan.name.as_str().into(),
            lr,
            loss,
            wall_ms: self.started.elapsed().as_millis() as u64,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Runs the remaining steps, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.step_once()?;
            sink(&rec)?;
        }
        Ok(())
    }

    /// Snapshot of parameters and optimizer state. The live state is rounded
    /// to the stored `f32` precision first, so a run resumed from the
    /// checkpoint continues exactly like this one.
    pub fn checkpoint(&mut self, config_hash: &str) -> Checkpoint {
        for (_, p) in self.model.store.iter_mut() {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = *x as f32 as f64);
        }
        self.opt.quantize();
        Checkpoint::capture(
            &self.model.store,
            config_hash,
            self.plan.name.as_str(),
            self.step,
            Some(self.opt.moments()),
        )
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.manifest.stage != self.plan.name.as_str() {
            return Err(Error::Contract(format!(
                "checkpoint is from {}, runner is {}",
                ckpt.manifest.stage,
                self.plan.name.as_str()
            )));
        }
        ckpt.restore_params(&mut self.model.store)?;
        self.model.store.apply_freeze(&self.plan.frozen_prefixes);
        if let Some((updates, m, v)) = ckpt.moments(&self.model.store)? {
            self.opt.set_moments(updates, m, v);
        }
        self.step = ckpt.manifest.step;
        Ok(())
    }
}

/// Outcome of [`run_stage`].
pub struct StageOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub checkpoint: Checkpoint,
}

/// Runs a whole stage from scratch.
pub fn run_stage(
    plan: StagePlan,
    model: &mut HybridModel,
    data: &[PreparedSample],
    cache: &FeatureCache,
    batch_size: usize,
    seed: u64,
    config_hash: &str,
) -> Result<StageOutcome> {
    let mut runner = StageRunner::new(plan, model, data, cache, batch_size, seed)?;
    let mut metrics = Vec::new();
    runner.run(|r| {
        metrics.push(r.clone());
        Ok(())
    })?;
    let checkpoint = runner.checkpoint(config_hash);
    Ok(StageOutcome { metrics, checkpoint })
}
