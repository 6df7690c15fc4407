//! Training loop, evaluation and the momentum ablation.
//!
//! One epoch runs `ceil(M / unlabeled_batch)` optimizer steps (or
//! `ceil(N / labeled_batch)` without unlabeled data) in every mode, so the
//! supervised path is identical across modes for a given seed. Each step
//! draws a labeled batch, adds the mode's unsupervised term weighted by
//! `λ(epoch)`, takes one Adam step and then one EMA update.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use secl_autodiff::{AdamState, AutodiffError, FlushSubnormals, Graph, NodeId, Scalar, Tensor};
use thiserror::Error;

use crate::augment::{apply_transform, sample_view, TransformSpec};
use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig};
use crate::data::{DataError, Dataset, DatasetSplit, LabelMap, Volume};
use crate::ema::{ema_update, EmaConfig};
use crate::losses::{
    combined_objective, consistency_mse, info_nce, rampup_lambda, softmax, supervised_loss, LossError,
};
use crate::metrics::{subject_rows, AggregateRow, MetricTable};
use crate::model::{decoder_forward, encoder_forward, init_params, projector_forward, volume_tensor, Bound, ModelParams};
use crate::rng::{derive_seed, rng_for, stream};
use crate::sampling::{aacs_batch, compute_pseudo_labels, racs_batch, ContrastiveBatch, SamplingError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("data extents {data:?} do not match the architecture {arch:?}")]
    Extents { data: [usize; 3], arch: [usize; 3] },
    #[error("split has no labeled subject")]
    NoLabeled,
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("epoch {epoch}, step {step}: {source}")]
    Numeric {
        epoch: usize,
        step: usize,
        source: AutodiffError,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean supervised loss over the epoch's steps.
    pub sup_loss: f64,
    /// Mean unweighted unsupervised loss over steps that had one; 0 if none.
    pub con_loss: f64,
    pub lambda: f64,
    pub val_dice: Option<f64>,
    /// Steps whose unsupervised term was skipped for lack of pseudo-label foreground.
    pub skipped: usize,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV with columns `epoch,sup_loss,con_loss,lambda,val_dice`. Floats are
    /// written in shortest round-trip form; wall-clock is omitted so reruns
    /// compare byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,sup_loss,con_loss,lambda,val_dice\n");
        for r in &self.records {
            let val = r.val_dice.map_or_else(String::new, |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.sup_loss, r.con_loss, r.lambda, val);
        }
        s
    }

    pub fn last_val_dice(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_dice)
    }
}

pub struct TrainOutput<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub log: TrainLog,
}

/// State visible to an observer after each optimizer step.
pub struct StepEvent<'a, T: Scalar> {
    pub epoch: usize,
    pub step: usize,
    /// Student after the Adam step.
    pub student: &'a ModelParams<T>,
    /// Teacher after the EMA update.
    pub teacher: &'a ModelParams<T>,
}

pub fn steps_per_epoch(cfg: &RunConfig, split: &DatasetSplit) -> usize {
    let m = split.unlabeled.len();
    if m > 0 {
        m.div_ceil(cfg.unlabeled_batch)
    } else {
        split.labeled.len().div_ceil(cfg.labeled_batch)
    }
}

fn shuffled(ids: &[String], seed: u64, tags: &[u64]) -> Vec<String> {
    let mut v = ids.to_vec();
    v.shuffle(&mut rng_for(seed, tags));
    v
}

fn check_data(cfg: &RunConfig, split: &DatasetSplit, data: &Dataset) -> Result<(), TrainError> {
    cfg.validate()?;
    if split.labeled.is_empty() {
        return Err(TrainError::NoLabeled);
    }
    data.check_split(split)?;
    for id in split.labeled.iter().chain(&split.unlabeled).chain(&split.test) {
        let s = data.get(id)?;
        if s.image.extents != cfg.arch.extents {
            return Err(TrainError::Extents {
                data: s.image.extents,
                arch: cfg.arch.extents,
            });
        }
    }
    Ok(())
}

/// Stacks per-view embeddings `[d]` into `[n, d]`.
fn stack(g: &mut Graph<impl Scalar>, rows: &[NodeId]) -> NodeId {
    let reshaped: Vec<NodeId> = rows
        .iter()
        .map(|&r| {
            let d = g.shape(r)[0];
            g.reshape(r, &[1, d])
        })
        .collect();
    g.concat(&reshaped, 0)
}

fn contrastive_term<T: Scalar>(
    g: &mut Graph<T>,
    student: &Bound,
    teacher: &ModelParams<T>,
    batch: &ContrastiveBatch,
    tau: f64,
) -> Result<NodeId, LossError> {
    let rows: Vec<NodeId> = batch
        .views
        .iter()
        .zip(&batch.teacher)
        .map(|(v, &is_teacher)| {
            if is_teacher {
                let z = teacher.embed(v);
                let n = z.len();
                g.constant(Tensor::from_vec(&[n], z))
            } else {
                let x = g.constant(volume_tensor(v));
                let enc = encoder_forward(g, student, x);
                projector_forward(g, student, enc.bottleneck)
            }
        })
        .collect();
    let z = stack(g, &rows);
    info_nce(g, z, &batch.pairs, tau)
}

/// Consistency baseline: student and teacher see the same geometry under
/// different intensity shifts; the teacher prediction uses the EMA encoder
/// with the student's decoder and is held constant.
fn consistency_term<T: Scalar>(
    g: &mut Graph<T>,
    student_bound: &Bound,
    student: &ModelParams<T>,
    teacher: &ModelParams<T>,
    volume: &Volume,
    cfg: &RunConfig,
    seed: u64,
) -> NodeId {
    let geo = sample_view(seed, 0, 0, &cfg.augment);
    let with_shift = |view: u64| {
        let shift = sample_view(seed, 0, view, &cfg.augment.intensity_only()).intensity_shift;
        TransformSpec {
            intensity_shift: shift,
            ..geo.clone()
        }
    };
    let (v1, _) = apply_transform(volume, None, &with_shift(1));
    let (v2, _) = apply_transform(volume, None, &with_shift(2));
    let predictor = ModelParams {
        arch: teacher.arch.clone(),
        encoder: teacher.encoder.clone(),
        projector: teacher.projector.clone(),
        decoder: student.decoder.clone(),
    };
    let target = {
        let mut tg = Graph::new();
        let l = tg.constant(predictor.logits(&v2));
        let p = softmax(&mut tg, l, 0);
        tg.value(p).clone()
    };
    let x = g.constant(volume_tensor(&v1));
    let enc = encoder_forward(g, student_bound, x);
    let logits = decoder_forward(g, student_bound, &enc);
    let p = softmax(g, logits, 0);
    let t = g.constant(target);
    consistency_mse(g, p, t)
}

pub fn train<T: Scalar>(cfg: &RunConfig, split: &DatasetSplit, data: &Dataset) -> Result<TrainOutput<T>, TrainError> {
    train_observed(cfg, split, data, &mut |_: &StepEvent<T>| {})
}

pub fn train_observed<T: Scalar>(
    cfg: &RunConfig,
    split: &DatasetSplit,
    data: &Dataset,
    observer: &mut dyn FnMut(&StepEvent<T>),
) -> Result<TrainOutput<T>, TrainError> {
    check_data(cfg, split, data)?;
    let _flush = FlushSubnormals::enable();
    let seed = cfg.seed;
    let mut student = init_params::<T>(&cfg.arch, seed);
    let mut teacher = student.teacher_copy();
    let mut adam = AdamState::new(cfg.adam, student.tensors());
    let ema = EmaConfig::new(cfg.ema.alpha).map_err(|e| crate::config::ConfigError::Invalid(e.to_string()))?;
    let schedule = cfg.schedule();
    let steps = steps_per_epoch(cfg, split);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lambda = rampup_lambda(epoch as f64, &schedule)?;
        let e = epoch as u64;
        let labeled = shuffled(&split.labeled, seed, &[stream::LABELED_ORDER, e]);
        let unlabeled = shuffled(&split.unlabeled, seed, &[stream::UNLABELED_ORDER, e]);

        // Pseudo-labels from the student as it stands at the start of the epoch.
        let pseudo: Vec<LabelMap> = if cfg.mode == Mode::SeclAacs {
            unlabeled
                .iter()
                .map(|id| Ok(compute_pseudo_labels(&student, &data.get(id)?.image)))
                .collect::<Result<_, DataError>>()?
        } else {
            Vec::new()
        };

        let (mut sup_sum, mut con_sum, mut con_steps, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        for step in 0..steps {
            let mut g = Graph::<T>::new();
            let bound = student.bind(&mut g, true);
            let mut sup = Vec::with_capacity(cfg.labeled_batch);
            for j in 0..cfg.labeled_batch {
                let s = data.get(&labeled[(step * cfg.labeled_batch + j) % labeled.len()])?;
                let x = g.constant(volume_tensor(&s.image));
                let enc = encoder_forward(&mut g, &bound, x);
                let logits = decoder_forward(&mut g, &bound, &enc);
                sup.push(supervised_loss(&mut g, logits, &s.label));
            }

            let step_seed = derive_seed(seed, &[stream::CONTRASTIVE, e, step as u64]);
            let pick = |k: usize| &unlabeled[(step * cfg.unlabeled_batch + k) % unlabeled.len()];
            let mut con = Vec::new();
            if !unlabeled.is_empty() {
                match cfg.mode {
                    Mode::SupervisedOnly => {}
                    Mode::SeclAacs => {
                        let idx: Vec<usize> = (0..cfg.unlabeled_batch)
                            .map(|k| (step * cfg.unlabeled_batch + k) % unlabeled.len())
                            .collect();
                        let vols: Vec<&Volume> = idx
                            .iter()
                            .map(|&i| data.get(&unlabeled[i]).map(|s| &s.image))
                            .collect::<Result<_, _>>()?;
                        let labels: Vec<&LabelMap> = idx.iter().map(|&i| &pseudo[i]).collect();
                        match aacs_batch(&vols, &labels, &cfg.aacs, &cfg.augment, step_seed) {
                            Ok(batch) => con.push(contrastive_term(&mut g, &bound, &teacher, &batch, cfg.tau)?),
                            Err(SamplingError::DegeneratePseudoLabels) => skipped += 1,
                            Err(e) => return Err(e.into()),
                        }
                    }
                    Mode::SeclRacs => {
                        let vols: Vec<&Volume> = (0..cfg.racs.subjects)
                            .map(|k| data.get(pick(k)).map(|s| &s.image))
                            .collect::<Result<_, _>>()?;
                        let batch = racs_batch(&vols, &cfg.racs, &cfg.augment, step_seed)?;
                        con.push(contrastive_term(&mut g, &bound, &teacher, &batch, cfg.tau)?);
                    }
                    Mode::MeanTeacher => {
                        for k in 0..cfg.unlabeled_batch {
                            let v = &data.get(pick(k))?.image;
                            let s = derive_seed(step_seed, &[k as u64]);
                            con.push(consistency_term(&mut g, &bound, &student, &teacher, v, cfg, s));
                        }
                    }
                }
            }

            let loss = combined_objective(&mut g, &sup, &con, lambda);
            let numeric = |source| TrainError::Numeric { epoch, step, source };
            let grads = g.backward(loss).map_err(numeric)?;
            sup_sum += sup.iter().map(|&s| g.value(s).item().as_f64()).sum::<f64>() / sup.len() as f64;
            if !con.is_empty() {
                con_sum += con.iter().map(|&c| g.value(c).item().as_f64()).sum::<f64>() / con.len() as f64;
                con_steps += 1;
            }
            let grads: Vec<Tensor<T>> = bound.all().into_iter().map(|id| grads.get(id)).collect();
            let mut flat = student.flat();
            adam.step(&mut flat, &grads).map_err(numeric)?;
            student.set_flat(flat);
            ema_update(&mut teacher, &student, ema);
            observer(&StepEvent {
                epoch,
                step,
                student: &student,
                teacher: &teacher,
            });
        }

        let last = epoch + 1 == cfg.epochs;
        let val_dice = (last || (cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0))
            .then(|| evaluate(&student, &split.labeled, data).map(|t| t.aggregate.dice))
            .transpose()?;
        log.records.push(EpochRecord {
            epoch,
            sup_loss: sup_sum / steps as f64,
            con_loss: if con_steps > 0 { con_sum / con_steps as f64 } else { 0.0 },
            lambda,
            val_dice,
            skipped,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint { student, teacher },
        log,
    })
}

/// Student segmentation of each subject scored against its ground truth.
pub fn evaluate<T: Scalar>(student: &ModelParams<T>, ids: &[String], data: &Dataset) -> Result<MetricTable, DataError> {
    let mut rows = Vec::new();
    for id in ids {
        let s = data.get(id)?;
        assert_eq!(
            s.image.extents, student.arch.extents,
            "evaluate: subject {id} extents do not match the checkpoint"
        );
        rows.extend(subject_rows(id, &student.predict(&s.image), &s.label));
    }
    Ok(MetricTable::from_rows(rows))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub alpha: f64,
    pub aggregate: AggregateRow,
    pub final_sup_loss: f64,
}

/// One train + test evaluation per momentum, everything else shared.
pub fn ablation_run(
    base: &RunConfig,
    alphas: &[f64],
    split: &DatasetSplit,
    data: &Dataset,
) -> Result<Vec<AblationRow>, TrainError> {
    alphas
        .iter()
        .map(|&alpha| {
            let mut cfg = base.clone();
            cfg.ema.alpha = alpha;
            let out = train::<f32>(&cfg, split, data)?;
            let table = evaluate(&out.checkpoint.student, &split.test, data)?;
            Ok(AblationRow {
                alpha,
                aggregate: table.aggregate,
                final_sup_loss: out.log.records.last().map_or(f64::NAN, |r| r.sup_loss),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("alpha,dice,jaccard,hd\n");
    for r in rows {
        let hd = r.aggregate.hd.map_or_else(|| "NA".into(), |h| format!("{h:.6}"));
        let _ = writeln!(s, "{},{:.6},{:.6},{}", r.alpha, r.aggregate.dice, r.aggregate.jaccard, hd);
    }
    s
}
