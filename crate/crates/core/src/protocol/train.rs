//! Per-session pipeline: expand, restore old labels, train, refresh the
//! buffer, evaluate cumulatively, snapshot.

use std::collections::{BTreeMap, HashMap};

use krt_tensor::{Scalar, Tape, Tensor, Var};
use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::buffer::{Candidate, RehearsalBuffer};
use super::model::ModelState;
use super::optim::Adam;
use super::plan::{build_plan, SessionPlan};
use super::{Method, ProtocolConfig};
use crate::datagen::Dataset;
use crate::dpl::{dynamic_threshold_search, merge_labels, session_target, ScoreMatrix};
use crate::error::{config, data, Result};
use crate::labels::ClassSet;
use crate::losses::{asl_loss, combine, kd_pooled_loss, token_loss};
use crate::metrics::{aggregate, evaluate, Aggregate, EvalBatch, MetricsRecord};
use crate::seed::{self as seeds, stream};

const INFER_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DplSummary {
    pub final_eta: f64,
    pub beta: f64,
    pub mu_t: f64,
    pub iterations: usize,
    pub converged: bool,
    pub pseudo_labels: usize,
    /// (image, old class) pairs present in the generator truth but unknown to
    /// the learner, and how many of them received a pseudo label.
    pub restore_pairs: usize,
    pub restore_hits: usize,
    /// Pseudo labels that match the generator truth.
    pub pseudo_correct: usize,
}

impl DplSummary {
    pub fn restore_recall(&self) -> Option<f64> {
        (self.restore_pairs > 0).then(|| self.restore_hits as f64 / self.restore_pairs as f64)
    }

    pub fn pseudo_precision(&self) -> Option<f64> {
        (self.pseudo_labels > 0).then(|| self.pseudo_correct as f64 / self.pseudo_labels as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    pub classes: Vec<usize>,
    pub train_images: usize,
    pub buffer_images: usize,
    pub test_images: usize,
    /// Mean total loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub metrics: MetricsRecord,
    pub dpl: Option<DplSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub plan: SessionPlan,
    pub sessions: Vec<SessionReport>,
    pub aggregate: Aggregate,
}

struct Item {
    index: usize,
    known: ClassSet,
    labels: ClassSet,
}

/// Detached outputs of the previous model for the session's training items.
struct SnapshotView<S> {
    probs: Vec<f64>,
    embeddings: Vec<Vec<S>>,
    pooled: Vec<S>,
}

pub struct Learner<'a, S: Scalar> {
    cfg: ProtocolConfig,
    method: Method,
    plan: SessionPlan,
    train: &'a Dataset,
    test: &'a Dataset,
    train_index: HashMap<u64, usize>,
    model: ModelState<S>,
    snapshot: Option<ModelState<S>>,
    buffer: RehearsalBuffer,
    init_rng: seeds::Rng,
    shuffle_rng: seeds::Rng,
    buffer_rng: seeds::Rng,
    done: usize,
    expanded: bool,
}

impl<'a, S: Scalar> Learner<'a, S> {
    /// `seed` is the master seed; initialization, shuffling and buffer sampling
    /// use its named streams.
    pub fn new(cfg: ProtocolConfig, seed: u64, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || test.is_empty() {
            return Err(data("train and test sets must be non-empty"));
        }
        if (train.h, train.w, train.c) != (test.h, test.w, test.c) || train.class_names != test.class_names {
            return Err(data("train and test sets disagree on grid or classes"));
        }
        let method = cfg.arm.method();
        let total = train.n_classes();
        let plan = if method.joint {
            build_plan(&train.class_names, total, 0)?
        } else {
            build_plan(&train.class_names, cfg.base, cfg.inc)?
        };
        let mut init_rng = stream(seed, seeds::INIT);
        let model = ModelState::new(
            cfg.model.clone(),
            (train.h, train.w, train.c),
            method.use_ica,
            &mut init_rng,
        )?;
        let train_index = train.examples.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        Ok(Self {
            buffer: RehearsalBuffer::new(cfg.buffer_policy()),
            shuffle_rng: stream(seed, seeds::SHUFFLE),
            buffer_rng: stream(seed, seeds::BUFFER),
            init_rng,
            cfg,
            method,
            plan,
            train,
            test,
            train_index,
            model,
            snapshot: None,
            done: 0,
            expanded: false,
        })
    }

    pub fn plan(&self) -> &SessionPlan {
        &self.plan
    }

    pub fn model(&self) -> &ModelState<S> {
        &self.model
    }

    pub fn snapshot(&self) -> Option<&ModelState<S>> {
        self.snapshot.as_ref()
    }

    pub fn buffer(&self) -> &RehearsalBuffer {
        &self.buffer
    }

    pub fn sessions_done(&self) -> usize {
        self.done
    }

    pub fn is_finished(&self) -> bool {
        self.done == self.plan.session_count()
    }

    /// Step 1: adds the head and KR token of the next session. Returns its
    /// 1-based index.
    pub fn begin_session(&mut self) -> Result<usize> {
        if self.expanded {
            return Ok(self.done + 1);
        }
        let t = self.done + 1;
        let classes = self.plan.classes(t)?.len();
        self.model.add_session(classes, &mut self.init_rng);
        self.expanded = true;
        Ok(t)
    }

    /// Runs the next session to completion.
    pub fn next_session(&mut self) -> Result<SessionReport> {
        let t = self.begin_session()?;
        let current = self.plan.class_set(t)?;
        let seen = self.plan.seen_set(t)?;
        let columns = self.plan.columns(t)?;

        // X^t, labels masked to C^t, plus buffered exemplars.
        let mut known: BTreeMap<usize, ClassSet> = BTreeMap::new();
        for (i, ex) in self.train.examples.iter().enumerate() {
            let l = ex.labels.intersection(&current);
            if !l.is_empty() {
                known.insert(i, l);
            }
        }
        let fresh = known.len();
        if fresh == 0 {
            return Err(data(format!("session {t} has no training images")));
        }
        for (id, labels) in self.buffer.items() {
            let &i = self
                .train_index
                .get(&id)
                .ok_or_else(|| data(format!("buffered image {id} is not in the training set")))?;
            let entry = known.entry(i).or_insert_with(|| ClassSet::empty(seen.universe()));
            *entry = entry.union(labels);
        }
        let mut items: Vec<Item> = known
            .into_iter()
            .map(|(index, known)| Item {
                index,
                labels: known.clone(),
                known,
            })
            .collect();
        info!(
            "session {t}/{}: {} classes, {fresh} new images, {} buffered",
            self.plan.session_count(),
            current.len(),
            self.buffer.len()
        );

        let view = match &self.snapshot {
            Some(snap) if t > 1 => Some(self.snapshot_view(snap, &items)?),
            _ => None,
        };
        let dpl = match &view {
            Some(v) if self.method.use_dpl => Some(self.restore(t, v, &mut items, &current)?),
            _ => None,
        };

        let epoch_loss = self.fit(t, &items, &columns, view.as_ref())?;

        let candidates: Vec<Candidate> = items
            .iter()
            .map(|it| Candidate {
                id: self.train.examples[it.index].id,
                labels: &it.known,
            })
            .filter(|c| !c.labels.is_disjoint(&current))
            .collect();
        let new_classes = self.plan.classes(t)?.to_vec();
        self.buffer.update(&new_classes, &candidates, &mut self.buffer_rng);

        let (metrics, test_images) = self.evaluate(t)?;
        info!(
            "session {t}: mAP {:.2} CF1 {:.2} OF1 {:.2}",
            metrics.map, metrics.cf1, metrics.of1
        );
        self.snapshot = Some(self.model.clone());
        self.done = t;
        self.expanded = false;
        Ok(SessionReport {
            session: t,
            classes: new_classes,
            train_images: items.len(),
            buffer_images: items.len() - fresh,
            test_images,
            epoch_loss,
            metrics,
            dpl,
        })
    }

    fn gather(&self, ds: &Dataset, indices: &[usize]) -> Result<Tensor<S>> {
        let (h, w, c) = (ds.h, ds.w, ds.c);
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            data.extend(ds.examples[i].features.iter().map(|&f| S::of(f as f64)));
        }
        Ok(Tensor::new([indices.len(), h, w, c], data)?)
    }

    fn snapshot_view(&self, snap: &ModelState<S>, items: &[Item]) -> Result<SnapshotView<S>> {
        let old_columns = snap.output_count();
        let mut view = SnapshotView {
            probs: Vec::with_capacity(items.len() * old_columns),
            embeddings: vec![Vec::new(); snap.session_count()],
            pooled: Vec::new(),
        };
        for chunk in items.chunks(INFER_BATCH) {
            let rows: Vec<&[f32]> = chunk
                .iter()
                .map(|it| self.train.examples[it.index].features.as_slice())
                .collect();
            let out = snap.infer(&rows)?;
            view.probs.extend(out.probabilities());
            if self.method.use_token {
                for (dst, src) in view.embeddings.iter_mut().zip(out.embeddings) {
                    dst.extend(src);
                }
            }
            if self.method.use_kd {
                view.pooled.extend(out.pooled);
            }
        }
        Ok(view)
    }

    /// Step 2: pseudo labels for old classes from the previous model.
    fn restore(&self, t: usize, view: &SnapshotView<S>, items: &mut [Item], current: &ClassSet) -> Result<DplSummary> {
        let old = self.plan.columns(t - 1)?;
        let universe = self.plan.universe();
        let scores = ScoreMatrix::new(items.len(), old.clone(), view.probs.clone())?;
        let mu_t = session_target(old.len(), old.len() + current.len(), self.cfg.dpl.mu)?;
        let existing: Vec<ClassSet> = items.iter().map(|it| it.known.clone()).collect();
        let report = dynamic_threshold_search(&scores, &self.cfg.dpl, mu_t, universe, Some(&existing))?;
        let merged = merge_labels(&existing, &report.labels, current)?;

        let old_set = ClassSet::from_indices(universe, old);
        let (mut pairs, mut hits, mut correct) = (0, 0, 0);
        for ((it, ann), pseudo) in items.iter_mut().zip(&merged).zip(&report.labels) {
            let truth = self.train.examples[it.index].labels.intersection(&old_set);
            let hidden = truth.difference(&it.known);
            pairs += hidden.len();
            hits += pseudo.intersection(&hidden).len();
            correct += pseudo.intersection(&truth).len();
            it.labels = ann.merged();
        }
        debug!(
            "session {t}: eta {:.2} beta {:.3} mu_t {:.3} after {} steps",
            report.final_eta, report.beta, mu_t, report.iterations
        );
        Ok(DplSummary {
            final_eta: report.final_eta,
            beta: report.beta,
            mu_t,
            iterations: report.iterations,
            converged: report.converged,
            pseudo_labels: report.total(),
            restore_pairs: pairs,
            restore_hits: hits,
            pseudo_correct: correct,
        })
    }

    /// Step 3: mini-batch Adam over the session's items.
    fn fit(&mut self, t: usize, items: &[Item], columns: &[usize], view: Option<&SnapshotView<S>>) -> Result<Vec<f64>> {
        let sizes: Vec<usize> = self.model.tensors().iter().map(|(_, x)| x.numel()).collect();
        let mut adam = Adam::new(self.cfg.optimizer.clone(), sizes);
        let n_cols = columns.len();
        let d = self.cfg.model.ica.d;
        let use_token = self.method.use_token && t > 1 && view.is_some();
        let use_kd = self.method.use_kd && t > 1 && view.is_some();
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut epoch_loss = Vec::with_capacity(self.cfg.epochs);

        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut self.shuffle_rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for batch in order.chunks(self.cfg.batch_size) {
                let b = batch.len();
                let indices: Vec<usize> = batch.iter().map(|&k| items[k].index).collect();
                let input = self.gather(self.train, &indices)?;
                let mut y = Vec::with_capacity(b * n_cols);
                for &k in batch {
                    y.extend(columns.iter().map(|&c| {
                        if items[k].labels.contains(c) {
                            S::one()
                        } else {
                            S::zero()
                        }
                    }));
                }

                let mut tape = Tape::new();
                let vars = self.model.bind(&mut tape);
                let input = tape.constant(input);
                let out = self.model.forward(&mut tape, &vars, input)?;
                let probs = tape.sigmoid_clamped(out.logits, self.cfg.loss.clamp_eps)?;
                let y = tape.constant(Tensor::new([b, n_cols], y)?);
                let asl = asl_loss(&mut tape, probs, y, &self.cfg.loss)?;

                let rows = |src: &[S], width: usize| -> Result<Tensor<S>> {
                    let mut out = Vec::with_capacity(b * width);
                    for &k in batch {
                        out.extend_from_slice(&src[k * width..(k + 1) * width]);
                    }
                    Ok(Tensor::new([b, width], out)?)
                };
                let token = match view {
                    Some(v) if use_token => {
                        let prev = v
                            .embeddings
                            .iter()
                            .map(|e| Ok(tape.constant(rows(e, d)?)))
                            .collect::<Result<Vec<Var>>>()?;
                        Some(token_loss(
                            &mut tape,
                            &prev,
                            &out.embeddings,
                            self.cfg.loss.token_reduction,
                        )?)
                    }
                    _ => None,
                };
                let kd = match view {
                    Some(v) if use_kd => {
                        let prev = tape.constant(rows(&v.pooled, d)?);
                        Some(kd_pooled_loss(&mut tape, prev, out.pooled)?)
                    }
                    _ => None,
                };
                let (loss, breakdown) = combine(&mut tape, asl, token, kd, &self.cfg.loss, t)?;
                tape.backward(loss)?;
                let grads: Vec<Option<Vec<S>>> = vars.all().iter().map(|&v| tape.grad(v).map(<[S]>::to_vec)).collect();
                adam.step(self.model.tensors_mut(), &grads)?;
                sum += breakdown.total;
                batches += 1;
            }
            let mean = sum / batches.max(1) as f64;
            debug!("session {t} epoch {}: loss {mean:.5}", epoch + 1);
            epoch_loss.push(mean);
        }
        Ok(epoch_loss)
    }

    /// Metrics of the current model over `Z^1 ∪ ... ∪ Z^t`, where `Z^s` holds
    /// the test images whose earliest class belongs to session `s`.
    pub fn evaluate(&self, t: usize) -> Result<(MetricsRecord, usize)> {
        if self.model.session_count() != t {
            return Err(config(format!(
                "model has {} sessions, cannot evaluate session {t}",
                self.model.session_count()
            )));
        }
        let seen = self.plan.seen_set(t)?;
        let columns = self.plan.columns(t)?;
        let members: Vec<usize> = self
            .test
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| self.plan.earliest_session(&e.labels).is_some_and(|s| s <= t))
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(data(format!("no test images for sessions 1..={t}")));
        }
        let mut scores = Vec::with_capacity(members.len() * columns.len());
        let mut truths = Vec::with_capacity(members.len() * columns.len());
        for chunk in members.chunks(INFER_BATCH) {
            let rows: Vec<&[f32]> = chunk
                .iter()
                .map(|&i| self.test.examples[i].features.as_slice())
                .collect();
            scores.extend(self.model.infer(&rows)?.probabilities());
            for &i in chunk {
                let l = self.test.examples[i].labels.intersection(&seen);
                truths.extend(columns.iter().map(|&c| l.contains(c)));
            }
        }
        let batch = EvalBatch::new(members.len(), columns.len(), scores, truths)?;
        Ok((evaluate(&batch, self.cfg.eval_threshold, t)?, members.len()))
    }
}

/// Every session of `cfg` on the given split.
pub fn run<S: Scalar>(cfg: &ProtocolConfig, seed: u64, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    let mut learner = Learner::<S>::new(cfg.clone(), seed, train, test)?;
    let mut sessions = Vec::with_capacity(learner.plan().session_count());
    while !learner.is_finished() {
        sessions.push(learner.next_session()?);
    }
    let records: Vec<MetricsRecord> = sessions.iter().map(|s| s.metrics.clone()).collect();
    Ok(RunOutcome {
        plan: learner.plan().clone(),
        aggregate: aggregate(&records)?,
        sessions,
    })
}
