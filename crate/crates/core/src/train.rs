//! Two-stage training: stage one without the diversity term, stage two with
//! it at the stage-two learning rate. Runs are step-resumable.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use numcore::{Graph, Mode, OptimizerConfig, RngStream};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainState};
use crate::config::TrainConfig;
use crate::data::{Dataset, PkSampler};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, feature_masks, stack_images, EvalSplit};
use crate::losses::LossReport;
use crate::model::{forward_full, Batch, Model};

const OCCLUSION_STREAM: u64 = 0x0cc_5ab;
const EPOCH_STREAM: u64 = 0xe90c_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub stage: u8,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub l_cls: f64,
    pub l_tri: f64,
    pub l_sd: f64,
    pub l_mask: f64,
    pub l_total: f64,
    pub rank1: Option<f64>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Where a run writes its logs and checkpoints.
#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn new(root: &Path) -> Result<Self> {
        let ck = root.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn checkpoint(&self, label: &str) -> PathBuf {
        self.root.join("checkpoints").join(label)
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn steps_log(&self) -> PathBuf {
        self.root.join("steps.jsonl")
    }

    fn append(&self, path: &Path, line: &impl Serialize) -> Result<()> {
        let mut f: File = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let text = serde_json::to_string(line).map_err(|e| Error::json(path, e))?;
        writeln!(f, "{text}").map_err(|e| Error::io(path, e))
    }
}

pub struct Trainer<'a> {
    pub model: Model<f32>,
    ds: &'a Dataset,
    sampler: PkSampler,
    state: TrainState,
    batches: Option<(usize, Vec<Vec<(usize, usize)>>)>,
    out: Option<OutputDir>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, ds: &'a Dataset, out: Option<&Path>) -> Result<Self> {
        let cfg = ds.manifest.config.clone();
        let model = Model::new(config, ds.num_train_classes(), cfg.height, cfg.width)?;
        let state = TrainState {
            step: 0,
            epoch: 0,
            epoch_step: 0,
            occlusion_rng: RngStream::derive(config.seed, OCCLUSION_STREAM).state(),
            epoch_sums: [0.0; 5],
        };
        Self::assemble(model, state, ds, out)
    }

    /// Continues the run saved at `ckpt`; `config` must hash identically.
    pub fn resume(ckpt: &Path, config: &TrainConfig, ds: &'a Dataset, out: Option<&Path>) -> Result<Self> {
        let (model, state) = checkpoint::load_for_resume(ckpt, config)?;
        let cfg = &ds.manifest.config;
        if model.image_size != (cfg.height, cfg.width) || model.num_classes != ds.num_train_classes() {
            return Err(Error::Checkpoint("checkpoint was trained on a differently shaped dataset".into()));
        }
        Self::assemble(model, state, ds, out)
    }

    fn assemble(model: Model<f32>, state: TrainState, ds: &'a Dataset, out: Option<&Path>) -> Result<Self> {
        let sampler = PkSampler::new(&ds.train_labels(), model.config.p, model.config.q)?;
        let out = out.map(OutputDir::new).transpose()?;
        Ok(Self {
            model,
            ds,
            sampler,
            state,
            batches: None,
            out,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.config().total_epochs()
    }

    pub fn stage_of(&self, epoch: usize) -> u8 {
        if epoch < self.config().stage1_epochs {
            1
        } else {
            2
        }
    }

    /// Optimizer settings and diversity weight in force during `epoch`.
    pub fn schedule(&self, epoch: usize) -> (OptimizerConfig, f64) {
        let cfg = self.config();
        if self.stage_of(epoch) == 1 {
            (cfg.optimizer, 0.0)
        } else {
            (
                OptimizerConfig {
                    lr: cfg.stage2_lr,
                    ..cfg.optimizer
                },
                cfg.loss.gamma,
            )
        }
    }

    fn epoch_batches(&mut self) -> &[Vec<(usize, usize)>] {
        let epoch = self.state.epoch;
        if self.batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = RngStream::derive(self.config().seed, EPOCH_STREAM + epoch as u64);
            self.batches = Some((epoch, self.sampler.epoch(&mut rng)));
        }
        &self.batches.as_ref().expect("just filled").1
    }

    pub fn make_batch(&self, items: &[(usize, usize)]) -> Result<Batch<f32>> {
        let idx: Vec<usize> = items.iter().map(|&(i, _)| i).collect();
        let images: Vec<_> = idx.iter().map(|&i| &self.ds.images[i]).collect();
        let masks = if self.config().components.mask {
            Some(feature_masks(self.ds, &idx, self.model.feature_grid())?)
        } else {
            None
        };
        Ok(Batch {
            images: stack_images(&images)?,
            masks,
            labels: items.iter().map(|&(_, l)| l).collect(),
        })
    }

    /// One optimizer step. Finishing an epoch also logs, evaluates and
    /// checkpoints.
    pub fn step(&mut self) -> Result<(StepRecord, Option<EpochRecord>)> {
        if self.is_done() {
            return Err(Error::Config("training already finished".into()));
        }
        let epoch = self.state.epoch;
        let n_batches = self.epoch_batches().len();
        if n_batches == 0 {
            return Err(Error::Data("the sampler produced an empty epoch".into()));
        }
        let pos = self.state.epoch_step;
        let items = self.epoch_batches()[pos].clone();
        let batch = self.make_batch(&items)?;
        let (opt, gamma) = self.schedule(epoch);

        let mut rng = RngStream::from_state(self.state.occlusion_rng);
        let mut g = Graph::new();
        let out = forward_full(&mut g, &mut self.model, &batch, Mode::Train, gamma, Some(&mut rng))?;
        let total = out.total.expect("train mode returns a total");
        let report = out.report.expect("train mode returns a report");
        g.backward(total)?.accumulate_into(&mut self.model.params)?;
        self.model.params.optimizer_step(&opt)?;
        self.state.occlusion_rng = rng.state();

        self.state.step += 1;
        self.state.epoch_step += 1;
        let r = &report;
        for (s, v) in self.state.epoch_sums.iter_mut().zip([r.l_cls, r.l_tri, r.l_sd, r.l_mask, r.l_total]) {
            *s += v;
        }
        let rec = StepRecord {
            step: self.state.step,
            epoch,
            stage: self.stage_of(epoch),
            losses: report,
        };
        if let Some(o) = &self.out {
            o.append(&o.steps_log(), &rec)?;
        }

        let mut epoch_rec = None;
        if self.state.epoch_step == n_batches {
            epoch_rec = Some(self.finish_epoch(n_batches)?);
        }
        Ok((rec, epoch_rec))
    }

    fn finish_epoch(&mut self, n_batches: usize) -> Result<EpochRecord> {
        let epoch = self.state.epoch;
        let stage = self.stage_of(epoch);
        let cfg = self.config().clone();
        let stage_end = epoch + 1 == cfg.stage1_epochs || epoch + 1 == cfg.total_epochs();
        let due = cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || stage_end);
        let (rank1, map) = if due {
            let r = evaluate(&mut self.model, self.ds, EvalSplit::Test)?;
            (Some(r.rank1()), Some(r.map))
        } else {
            (None, None)
        };
        let m = self.state.epoch_sums.map(|s| s / n_batches as f64);
        let rec = EpochRecord {
            epoch,
            stage,
            l_cls: m[0],
            l_tri: m[1],
            l_sd: m[2],
            l_mask: m[3],
            l_total: m[4],
            rank1,
            map,
        };
        log::info!(
            "epoch {epoch} stage {stage}: total {:.4} cls {:.4} tri {:.4} sd {:.4} mask {:.4}{}",
            m[4],
            m[0],
            m[1],
            m[2],
            m[3],
            rank1.map_or(String::new(), |r| format!(" rank1 {r:.3}"))
        );
        self.state.epoch += 1;
        self.state.epoch_step = 0;
        self.state.epoch_sums = [0.0; 5];
        if let Some(o) = self.out.clone() {
            o.append(&o.metrics_log(), &rec)?;
            self.save(&o.checkpoint("latest"))?;
            if epoch + 1 == cfg.stage1_epochs {
                self.save(&o.checkpoint("stage1"))?;
            }
        }
        Ok(rec)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.model, &self.state)
    }

    /// Trains until done or until `max_steps` total steps, then writes the
    /// `latest` checkpoint (and `final` when done).
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<TrainSummary> {
        self.run_with(max_steps, |_, _| {})
    }

    /// [`Trainer::run`] with a hook called after every epoch.
    pub fn run_with(
        &mut self,
        max_steps: Option<u64>,
        mut on_epoch: impl FnMut(&mut Self, &EpochRecord),
    ) -> Result<TrainSummary> {
        let mut summary = TrainSummary::default();
        while !self.is_done() && max_steps.is_none_or(|m| self.state.step < m) {
            let (s, e) = self.step()?;
            summary.steps.push(s);
            if let Some(e) = e {
                on_epoch(self, &e);
                summary.epochs.push(e);
            }
        }
        if let Some(o) = self.out.clone() {
            self.save(&o.checkpoint("latest"))?;
            if self.is_done() {
                self.save(&o.checkpoint("final"))?;
            }
        }
        Ok(summary)
    }
}

/// Trains from scratch under `config` and returns the finished trainer.
pub fn train_two_stage<'a>(config: &TrainConfig, ds: &'a Dataset, out: Option<&Path>) -> Result<(Trainer<'a>, TrainSummary)> {
    let mut t = Trainer::new(config, ds, out)?;
    let s = t.run(None)?;
    Ok((t, s))
}
