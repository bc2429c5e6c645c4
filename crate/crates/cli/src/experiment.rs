//! One configured run: data, every session, and the files it leaves behind.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use krt_core::datagen::{self, Dataset};
use krt_core::metrics::{aggregate, Aggregate};
use krt_core::protocol::{checkpoint, Learner, SessionPlan, SessionReport};
use krt_core::seed::fnv1a64;
use krt_tensor::Scalar;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::error::{io_data, io_runtime, CliError, Result};

pub const RESULTS_FILE: &str = "results.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "curves.tsv";
pub const CHECKPOINT_FILE: &str = "model.krt";
pub const TRAIN_FILE: &str = "train.mlds";
pub const TEST_FILE: &str = "test.mlds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    /// FNV-1a over the encoded train and test files.
    pub fingerprint: String,
    pub classes: usize,
    pub train_images: usize,
    pub test_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub version: String,
    pub config: RunConfig,
    pub dataset: DatasetInfo,
    pub plan: SessionPlan,
    pub sessions: Vec<SessionReport>,
    pub aggregate: Aggregate,
    /// The only field that differs between two runs of the same config.
    pub wall_clock_secs: f64,
}

pub fn version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data.dir {
        Some(dir) => {
            let read = |name: &str| {
                let p = dir.join(name);
                datagen::load(&p).map_err(|e| io_data(&p, e))
            };
            Ok((read(TRAIN_FILE)?, read(TEST_FILE)?))
        }
        None => {
            let g = datagen::generate(&cfg.data.generate, cfg.data_seed())?;
            Ok((g.train, g.test))
        }
    }
}

pub fn fingerprint(train: &Dataset, test: &Dataset) -> Result<DatasetInfo> {
    let mut bytes = datagen::encode(train)?;
    bytes.extend(datagen::encode(test)?);
    Ok(DatasetInfo {
        fingerprint: format!("{:016x}", fnv1a64(&bytes)),
        classes: train.n_classes(),
        train_images: train.len(),
        test_images: test.len(),
    })
}

/// Result plus the encoded final model.
pub struct Finished {
    pub result: RunResult,
    pub checkpoint: Vec<u8>,
}

fn sessions<S: Scalar>(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(SessionPlan, Vec<SessionReport>, Vec<u8>)> {
    let mut learner = Learner::<S>::new(cfg.protocol.clone(), cfg.seed, train, test)?;
    let mut reports = Vec::with_capacity(learner.plan().session_count());
    while !learner.is_finished() {
        let r = learner.next_session()?;
        info!(
            "session {}/{}: mAP {:.2}",
            r.session,
            learner.plan().session_count(),
            r.metrics.map
        );
        reports.push(r);
    }
    Ok((learner.plan().clone(), reports, checkpoint::encode(learner.model())))
}

pub fn execute(cfg: &RunConfig) -> Result<Finished> {
    cfg.validate()?;
    let started = Instant::now();
    let (train, test) = load_data(cfg)?;
    let dataset = fingerprint(&train, &test)?;
    info!(
        "arm {} on {} train / {} test images, fingerprint {}",
        cfg.protocol.arm, dataset.train_images, dataset.test_images, dataset.fingerprint
    );
    let (plan, reports, checkpoint) = match cfg.precision {
        Precision::F32 => sessions::<f32>(cfg, &train, &test)?,
        Precision::F64 => sessions::<f64>(cfg, &train, &test)?,
    };
    let records: Vec<_> = reports.iter().map(|r| r.metrics.clone()).collect();
    let aggregate = aggregate(&records)?;
    Ok(Finished {
        result: RunResult {
            version: version(),
            config: cfg.clone(),
            dataset,
            plan,
            sessions: reports,
            aggregate,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        checkpoint,
    })
}

pub fn summary_csv(r: &RunResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(["session", "map", "cf1", "of1"]).map_err(err)?;
    for s in &r.sessions {
        let m = &s.metrics;
        w.write_record([
            s.session.to_string(),
            format!("{:.4}", m.map),
            format!("{:.4}", m.cf1),
            format!("{:.4}", m.of1),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Runtime(e.to_string()))
}

/// mAP after each session against the number of classes seen, for plotting.
pub fn curves_tsv(r: &RunResult) -> String {
    let mut out = String::from("session\tclasses_seen\tmap\n");
    let mut seen = 0;
    for s in &r.sessions {
        seen += s.classes.len();
        let _ = writeln!(out, "{}\t{seen}\t{:.4}", s.session, s.metrics.map);
    }
    out
}

pub fn results_json(r: &RunResult) -> Result<String> {
    serde_json::to_string_pretty(r).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn read_results(path: &Path) -> Result<RunResult> {
    let text = std::fs::read_to_string(path).map_err(|e| io_data(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Data(format!("{}: {}: {}", path.display(), e.path(), e.inner())))
}

pub fn write_outputs(f: &Finished, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_runtime(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| io_runtime(&p, e))
    };
    write(RESULTS_FILE, results_json(&f.result)?.as_bytes())?;
    write(SUMMARY_FILE, summary_csv(&f.result)?.as_bytes())?;
    write(CURVES_FILE, curves_tsv(&f.result).as_bytes())?;
    write(CHECKPOINT_FILE, &f.checkpoint)?;
    Ok(())
}
