//! Command implementations. Each command records a manifest keyed by the
//! digest of its inputs; re-running with the same inputs verifies the recorded
//! output hashes and does nothing else.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use owseg_core::data::{write_labels, Split};
use owseg_core::eval::{Confusion, EvalReport};
use owseg_core::incremental::{
    baseline_feature_extraction, baseline_finetune, run_il_stage, ILSample, ILSettings, ILStagePlan,
};
use owseg_core::losses::Objective;
use owseg_core::network::{init_model, Model};
use owseg_core::openset::{
    calibrate_on_validation, open_from_logits, post_il_from_logits, score_from_logits,
    unknown_score, InferenceConfig, ScoringMethod,
};
use owseg_core::synthesis::SynthesisConfig;
use owseg_core::train::{train, ParamFilter, TrainConfig, TrainPlan, TrainSample};
use owseg_core::{ClassId, LabelSet, Stage, UNKNOWN_ID};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{DatasetConfig, ExperimentConfig, Stream};
use crate::dataset::{self, Frame};
use crate::error::{CliError, Result};
use crate::store::{digest_of, IlMethod, Manifest, StageRecord, Store};

pub const DATA_MANIFEST: &str = "data";
pub const CLOSED_STAGE: &str = "closed";
pub const OSEG_STAGE: &str = "oseg";
pub const DEFAULT_BINS: usize = 50;

/// Result of running a command.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub manifest: Manifest,
    /// False when the command was a verified no-op.
    pub executed: bool,
}

/// Which labelling rule segmentation metrics use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// Argmax over the classes the model has learned.
    Closed,
    /// Closed label unless the unknown confidence reaches the threshold.
    Open,
}

impl PredictionMode {
    pub fn name(self) -> &'static str {
        match self {
            PredictionMode::Closed => "closed",
            PredictionMode::Open => "open",
        }
    }
}

/// Layout of a score dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DumpFormat {
    Csv,
    Binary,
}

/// Magic bytes opening a binary score dump.
pub const DUMP_MAGIC: &[u8; 4] = b"OWSD";
pub const DUMP_VERSION: u32 = 1;
/// Bytes per binary record: scan u32, point u32, score f64, pred u32, gt u32.
pub const DUMP_RECORD_BYTES: usize = 24;
/// Ground-truth value written for void points.
pub const DUMP_VOID: u32 = u32::MAX;

/// One point of a score dump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreRecord {
    pub scan: u32,
    pub point: u32,
    pub score: f64,
    pub pred: ClassId,
    pub gt: Option<ClassId>,
}

pub fn dump_csv(records: &[ScoreRecord]) -> String {
    let mut out = String::from("scan,point,score,pred,gt\n");
    for r in records {
        let gt = r.gt.map_or_else(|| "void".to_string(), |g| g.to_string());
        writeln!(
            out,
            "{},{},{:e},{},{}",
            r.scan, r.point, r.score, r.pred, gt
        )
        .expect("writing to a String");
    }
    out
}

/// Header `OWSD`, version u32, record count u64, then little-endian records.
pub fn dump_binary(records: &[ScoreRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + records.len() * DUMP_RECORD_BYTES);
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.scan.to_le_bytes());
        out.extend_from_slice(&r.point.to_le_bytes());
        out.extend_from_slice(&r.score.to_le_bytes());
        out.extend_from_slice(&r.pred.to_le_bytes());
        out.extend_from_slice(&r.gt.unwrap_or(DUMP_VOID).to_le_bytes());
    }
    out
}

pub fn parse_binary_dump(bytes: &[u8]) -> Result<Vec<ScoreRecord>> {
    let bad = |m: &str| CliError::usage(format!("invalid score dump: {m}"));
    if bytes.len() < 16 || &bytes[0..4] != DUMP_MAGIC {
        return Err(bad("missing header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != DUMP_VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + count * DUMP_RECORD_BYTES {
        return Err(bad("length does not match record count"));
    }
    Ok((0..count)
        .map(|i| {
            let o = 16 + i * DUMP_RECORD_BYTES;
            let gt = u32_at(o + 20);
            ScoreRecord {
                scan: u32_at(o),
                point: u32_at(o + 4),
                score: f64::from_le_bytes(bytes[o + 8..o + 16].try_into().expect("8 bytes")),
                pred: u32_at(o + 16),
                gt: (gt != DUMP_VOID).then_some(gt),
            }
        })
        .collect())
}

/// An experiment opened for one command.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub store: Store,
}

impl Experiment {
    pub fn open(cfg: ExperimentConfig) -> Result<Experiment> {
        cfg.validate()?;
        let store = Store::open(&cfg.root())?;
        Ok(Experiment { cfg, store })
    }

    /// Run `body` unless a manifest with the same inputs and intact outputs
    /// already exists.
    fn step(
        &self,
        id: &str,
        command: &str,
        inputs: Value,
        body: impl FnOnce() -> Result<(BTreeMap<String, String>, Option<StageRecord>)>,
    ) -> Result<Outcome> {
        let input_digest = digest_of(&inputs)?;
        if let Some(m) = self.store.load_manifest(id)? {
            if m.input_digest == input_digest && self.store.verify(&m.outputs) {
                return Ok(Outcome {
                    manifest: m,
                    executed: false,
                });
            }
        }
        let (outputs, stage) = body()?;
        let manifest = Manifest {
            id: id.to_string(),
            command: command.to_string(),
            input_digest,
            inputs,
            outputs,
            stage,
        };
        self.store.save_manifest(&manifest)?;
        Ok(Outcome {
            manifest,
            executed: true,
        })
    }

    fn data_digest(&self) -> Result<String> {
        let m = self
            .store
            .load_manifest(DATA_MANIFEST)?
            .ok_or_else(|| CliError::usage("no dataset; run gen-data first"))?;
        if !self.store.verify(&m.outputs) {
            return Err(CliError::usage(
                "dataset files changed since gen-data; run gen-data again",
            ));
        }
        digest_of(&(&m.input_digest, &m.outputs))
    }

    fn load(&self, split: Split) -> Result<Vec<Frame>> {
        dataset::load_split(&self.store, &self.cfg, split)
    }

    /// Stage manifest by name.
    pub fn stage(&self, name: &str) -> Result<(Manifest, StageRecord)> {
        let m = self
            .store
            .load_manifest(&stage_id(name))?
            .ok_or_else(|| CliError::usage(format!("stage {name:?} has not been trained")))?;
        let record = m
            .stage
            .clone()
            .ok_or_else(|| CliError::usage(format!("manifest of {name:?} describes no stage")))?;
        Ok((m, record))
    }

    pub fn model(&self, record: &StageRecord) -> Result<Model> {
        self.store.get_checkpoint(&record.checkpoint)
    }

    fn stage_training(&self, t: &crate::config::StageTraining, stream: Stream) -> TrainConfig {
        self.cfg.train_config(t, self.cfg.seed_for(stream))
    }

    fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig {
            rng_seed: self.cfg.seed_for(Stream::OsegSynthesis),
            ..self.cfg.synthesis.clone()
        }
    }

    fn calibrate(&self, model: &Model, val: &[Frame]) -> Result<f64> {
        match self.cfg.inference.lambda_th {
            Some(th) => Ok(th),
            None => Ok(calibrate_on_validation(
                model,
                val.iter().map(|f| (&f.scan, &f.labels)),
                self.cfg.inference.target_tpr,
            )?),
        }
    }

    fn save_stage(
        &self,
        model: &Model,
        mut record: StageRecord,
    ) -> Result<(BTreeMap<String, String>, StageRecord)> {
        let (rel, hash) = self.store.put_checkpoint(model)?;
        record.checkpoint = hash.clone();
        Ok((BTreeMap::from([(rel, hash)]), record))
    }
}

pub fn stage_id(name: &str) -> String {
    format!("stage-{name}")
}

fn config_json<T: Serialize>(value: &T) -> Result<Value> {
    Ok(serde_json::to_value(value)?)
}

fn il_stage_name(class: ClassId, method: IlMethod) -> String {
    match method {
        IlMethod::Real => format!("il-{class}"),
        m => format!("il-{class}-{}", m.name()),
    }
}

/// Write the synthetic dataset, or fingerprint an existing SemanticKITTI tree.
pub fn gen_data(exp: &Experiment) -> Result<Outcome> {
    let cfg = &exp.cfg;
    let inputs = json!({
        "seed": cfg.seed,
        "dataset": config_json(&cfg.dataset)?,
        "registry": config_json(&cfg.registry)?,
    });
    exp.step(DATA_MANIFEST, "gen-data", inputs, || {
        let files = match &cfg.dataset {
            DatasetConfig::Synthetic { .. } => dataset::generate(&exp.store, cfg)?,
            DatasetConfig::SemanticKitti { .. } => dataset::fingerprint(&exp.store, cfg)?,
        };
        Ok((files.into_iter().collect(), None))
    })
}

/// Train the closed-set model on old-class labels.
pub fn train_closed(exp: &Experiment) -> Result<Outcome> {
    let cfg = &exp.cfg;
    let inputs = json!({
        "seed": cfg.seed,
        "data": exp.data_digest()?,
        "arch": config_json(&cfg.arch)?,
        "training": config_json(&cfg.training.closed)?,
    });
    exp.step(&stage_id(CLOSED_STAGE), "train-closed", inputs, || {
        let registry = cfg.closed_registry()?;
        let data: Vec<TrainSample> = exp
            .load(Split::Train)?
            .into_iter()
            .map(|f| TrainSample {
                labels: f.labels.old_class_view(&registry),
                scan: f.scan,
            })
            .collect();
        let init = init_model(
            &registry,
            &cfg.arch,
            Stage::Closed,
            cfg.seed_for(Stream::ClosedInit),
        )?;
        let plan = TrainPlan {
            config: exp.stage_training(&cfg.training.closed, Stream::ClosedTrain),
            objective: Objective::ClosedSet,
            synthesis: None,
            allow_unknown_targets: false,
            filter: ParamFilter::All,
        };
        let (model, trace) = train(&init, &data, &plan)?.into_result()?;
        let (outputs, record) = exp.save_stage(
            &model,
            StageRecord {
                name: CLOSED_STAGE.into(),
                sequence: 0,
                model_stage: Stage::Closed,
                source_stage: None,
                source_checkpoint: None,
                checkpoint: String::new(),
                promoted_class: None,
                il_method: None,
                pseudo_labels: None,
                lambda_th: None,
                trace,
            },
        )?;
        Ok((outputs, Some(record)))
    })
}

/// Add redundancy classifiers to the closed model and train the open-set
/// objective with synthesized unknown objects.
pub fn finetune_oseg(exp: &Experiment) -> Result<Outcome> {
    let cfg = &exp.cfg;
    let (_, source) = exp.stage(CLOSED_STAGE)?;
    let inputs = json!({
        "seed": cfg.seed,
        "data": exp.data_digest()?,
        "source_checkpoint": source.checkpoint,
        "training": config_json(&cfg.training.oseg)?,
        "synthesis": config_json(&cfg.synthesis)?,
        "loss": config_json(&cfg.loss)?,
        "inference": config_json(&cfg.inference)?,
    });
    exp.step(&stage_id(OSEG_STAGE), "finetune-oseg", inputs, || {
        let closed = exp.model(&source)?;
        let registry = closed.registry.clone();
        let data: Vec<TrainSample> = exp
            .load(Split::Train)?
            .into_iter()
            .map(|f| TrainSample {
                labels: f.labels.old_class_view(&registry),
                scan: f.scan,
            })
            .collect();
        let init = closed.with_redundancy_heads(cfg.seed_for(Stream::OsegHeads))?;
        let plan = TrainPlan {
            config: exp.stage_training(&cfg.training.oseg, Stream::OsegTrain),
            objective: Objective::OpenWorld(cfg.loss.clone()),
            synthesis: Some(exp.synthesis()),
            allow_unknown_targets: false,
            filter: ParamFilter::All,
        };
        let (model, trace) = train(&init, &data, &plan)?.into_result()?;
        let lambda_th = exp.calibrate(&model, &exp.load(Split::Val)?)?;
        let (outputs, record) = exp.save_stage(
            &model,
            StageRecord {
                name: OSEG_STAGE.into(),
                sequence: 1,
                model_stage: Stage::Open,
                source_stage: Some(CLOSED_STAGE.into()),
                source_checkpoint: Some(source.checkpoint.clone()),
                checkpoint: String::new(),
                promoted_class: None,
                il_method: None,
                pseudo_labels: None,
                lambda_th: Some(lambda_th),
                trace,
            },
        )?;
        Ok((outputs, Some(record)))
    })
}

/// Latest stage of the main chain: the open-set model or a REAL IL stage.
fn latest_chain_stage(exp: &Experiment) -> Result<StageRecord> {
    exp.store
        .stages()?
        .into_iter()
        .filter_map(|m| m.stage)
        .filter(|s| {
            s.model_stage != Stage::Closed && s.il_method.is_none_or(|m| m == IlMethod::Real)
        })
        .max_by_key(|s| s.sequence)
        .ok_or_else(|| CliError::usage("no open-set stage; run finetune-oseg first"))
}

/// Introduce one novel class with REAL or one of the naive baselines.
pub fn il(
    exp: &Experiment,
    class: ClassId,
    method: IlMethod,
    source: Option<&str>,
) -> Result<Outcome> {
    let cfg = &exp.cfg;
    let name = il_stage_name(class, method);
    let source = match source {
        Some(s) => exp.stage(s)?.1,
        None => match exp
            .store
            .load_manifest(&stage_id(&name))?
            .and_then(|m| m.stage)
        {
            Some(existing) => {
                let src = existing
                    .source_stage
                    .ok_or_else(|| CliError::usage(format!("stage {name:?} records no source")))?;
                exp.stage(&src)?.1
            }
            None => latest_chain_stage(exp)?,
        },
    };
    if source.model_stage == Stage::Closed {
        return Err(CliError::usage(
            "incremental learning starts from an open-set stage",
        ));
    }
    let model_o = exp.model(&source)?;
    let registry = &model_o.registry;
    if registry.is_learned_novel(class) {
        return Err(CliError::usage(format!(
            "class {class} was already learned by stage {:?}",
            source.name
        )));
    }
    if !registry.remaining_novel().contains(&class) {
        return Err(CliError::usage(format!(
            "class {class} is not a novel class of the registry"
        )));
    }
    let lambda_th = source.lambda_th.ok_or_else(|| {
        CliError::usage(format!(
            "stage {:?} has no calibrated threshold",
            source.name
        ))
    })?;
    let oseg = &cfg.training.oseg;
    let scale = match method {
        IlMethod::Real => cfg.training.il_lr_scale,
        _ => cfg.training.baseline_lr_scale,
    };
    let train_cfg = TrainConfig {
        learning_rate: oseg.learning_rate * scale,
        ..exp.cfg.train_config(oseg, cfg.seed_for(Stream::Il(class)))
    };
    let inputs = json!({
        "seed": cfg.seed,
        "data": exp.data_digest()?,
        "source_stage": source.name,
        "source_checkpoint": source.checkpoint,
        "class": class,
        "method": method,
        "epochs": cfg.training.il_epochs,
        "train": config_json(&train_cfg)?,
        "synthesis": config_json(&cfg.synthesis)?,
        "loss": config_json(&cfg.loss)?,
        "inference": config_json(&cfg.inference)?,
    });
    exp.step(&stage_id(&name), "il", inputs, || {
        let frames = exp.load(Split::Train)?;
        let data: Vec<ILSample> = frames
            .iter()
            .map(|f| ILSample {
                scan: f.scan.clone(),
                novel_gt: f.labels.single_class_view(class),
            })
            .collect();
        let settings = ILSettings {
            train: train_cfg.clone(),
            loss: cfg.loss.clone(),
            synthesis: exp.synthesis(),
            inference: InferenceConfig {
                lambda_th: Some(lambda_th),
                ..cfg.inference.clone()
            },
        };
        let plan = ILStagePlan {
            promoted_class: class,
            epochs: cfg.training.il_epochs,
            source_checkpoint: Some(source.checkpoint.clone()),
        };
        let outcome = match method {
            IlMethod::Real => run_il_stage(&model_o, &plan, &data, &settings)?,
            IlMethod::Finetune => baseline_finetune(&model_o, &plan, &data, &settings)?,
            IlMethod::FeatureExtraction => {
                baseline_feature_extraction(&model_o, &plan, &data, &settings)?
            }
        };
        let mut outputs = BTreeMap::new();
        let pseudo_dir = format!("pseudo/{name}");
        if method == IlMethod::Real {
            for (f, labels) in frames.iter().zip(&outcome.pseudo_labels) {
                let rel = format!("{pseudo_dir}/{}.label", f.name.replace('/', "_"));
                let hash = exp
                    .store
                    .write(&rel, &write_labels(labels, f.scan.instance_ids())?)?;
                outputs.insert(rel, hash);
            }
        }
        let lambda_th = exp.calibrate(&outcome.model, &exp.load(Split::Val)?)?;
        let (ckpt, record) = exp.save_stage(
            &outcome.model,
            StageRecord {
                name: name.clone(),
                sequence: source.sequence + 1,
                model_stage: Stage::PostIl,
                source_stage: Some(source.name.clone()),
                source_checkpoint: Some(source.checkpoint.clone()),
                checkpoint: String::new(),
                promoted_class: Some(class),
                il_method: Some(method),
                pseudo_labels: (method == IlMethod::Real).then_some(pseudo_dir),
                lambda_th: Some(lambda_th),
                trace: outcome.trace,
            },
        )?;
        outputs.extend(ckpt);
        Ok((outputs, Some(record)))
    })
}

/// Scores, predictions and confusion of one stage on the validation split.
pub struct Evaluation {
    pub report: EvalReport,
    pub records: Vec<ScoreRecord>,
}

/// Evaluate `model` on `frames`. Scores are collected only when a method is
/// given.
pub fn evaluate_model(
    model: &Model,
    frames: &[Frame],
    method: Option<ScoringMethod>,
    inference: &InferenceConfig,
    lambda_th: Option<f64>,
    prediction: PredictionMode,
    bins: usize,
) -> Result<Evaluation> {
    let registry = &model.registry;
    if method == Some(ScoringMethod::Real) && model.stage == Stage::Closed {
        return Err(CliError::usage(
            "real scoring needs an open-set or post-IL stage",
        ));
    }
    let th = match prediction {
        PredictionMode::Closed => None,
        PredictionMode::Open => {
            if model.stage == Stage::Closed {
                return Err(CliError::usage(
                    "open prediction needs an open-set or post-IL stage",
                ));
            }
            Some(lambda_th.ok_or_else(|| CliError::usage("stage has no calibrated threshold"))?)
        }
    };
    let score_cfg = method.map(|m| InferenceConfig {
        scoring_method: m,
        ..inference.clone()
    });
    let mut confusion = Confusion::new(registry);
    let mut records = Vec::new();
    let mut scores = Vec::new();
    let mut is_unknown = Vec::new();
    for (scan_index, f) in frames.iter().enumerate() {
        let bundle = model.forward(&f.scan, None)?;
        let pred: LabelSet = match th {
            None => post_il_from_logits(registry, &bundle),
            Some(th) => open_from_logits(registry, &bundle, th)?,
        };
        confusion.accumulate(&pred, &f.labels, registry)?;
        let Some(score_cfg) = &score_cfg else {
            continue;
        };
        let s = match score_cfg.scoring_method {
            ScoringMethod::McDropout => unknown_score(model, &f.scan, score_cfg)?,
            m => score_from_logits(&bundle, m)?,
        };
        for (i, (&score, (p, g))) in s.iter().zip(pred.iter().zip(f.labels.iter())).enumerate() {
            records.push(ScoreRecord {
                scan: scan_index as u32,
                point: i as u32,
                score,
                pred: p.unwrap_or(UNKNOWN_ID),
                gt: g,
            });
            if let Some(g) = g {
                scores.push(score);
                is_unknown.push(!registry.is_known(g));
            }
        }
    }
    let mut report = EvalReport::from_confusion(confusion, registry, model.stage)?;
    if let Some(m) = method {
        if !is_unknown.iter().any(|u| *u) || is_unknown.iter().all(|u| *u) {
            return Err(CliError::usage(
                "open-set metrics need both known and unknown ground truth in the validation split",
            ));
        }
        report = report.with_scores(m, &scores, &is_unknown, bins)?;
    }
    Ok(Evaluation { report, records })
}

fn report_stem(stage: &str, method: Option<ScoringMethod>, prediction: PredictionMode) -> String {
    let mut stem = stage.to_string();
    if let Some(m) = method {
        stem.push('-');
        stem.push_str(m.name());
    }
    if prediction == PredictionMode::Open {
        stem.push_str("-open");
    }
    stem
}

/// Evaluate a stage on the validation split. Writes the report and, with a
/// scoring method, the histogram CSV and a CSV score dump.
pub fn evaluate(
    exp: &Experiment,
    stage: &str,
    method: Option<ScoringMethod>,
    prediction: PredictionMode,
    bins: usize,
) -> Result<Outcome> {
    let (_, record) = exp.stage(stage)?;
    let stem = report_stem(stage, method, prediction);
    let inputs = json!({
        "data": exp.data_digest()?,
        "checkpoint": record.checkpoint,
        "lambda_th": record.lambda_th,
        "method": method,
        "prediction": prediction,
        "bins": bins,
        "inference": config_json(&exp.cfg.inference)?,
    });
    exp.step(&format!("eval-{stem}"), "evaluate", inputs, || {
        let model = exp.model(&record)?;
        let val = exp.load(Split::Val)?;
        let ev = evaluate_model(
            &model,
            &val,
            method,
            &exp.cfg.inference,
            record.lambda_th,
            prediction,
            bins,
        )?;
        let mut outputs = BTreeMap::new();
        let rel = format!("reports/{stem}.json");
        outputs.insert(
            rel.clone(),
            exp.store
                .write(&rel, &serde_json::to_vec_pretty(&ev.report)?)?,
        );
        if let Some(h) = &ev.report.histogram {
            let rel = format!("reports/{stem}.histogram.csv");
            outputs.insert(rel.clone(), exp.store.write(&rel, h.to_csv().as_bytes())?);
            let rel = format!("reports/{stem}.scores.csv");
            outputs.insert(
                rel.clone(),
                exp.store.write(&rel, dump_csv(&ev.records).as_bytes())?,
            );
        }
        Ok((outputs, None))
    })
}

/// Per-point score dump of a stage on the validation split.
pub fn dump_scores(
    exp: &Experiment,
    stage: &str,
    method: ScoringMethod,
    prediction: PredictionMode,
    format: DumpFormat,
) -> Result<Outcome> {
    let (_, record) = exp.stage(stage)?;
    let stem = report_stem(stage, Some(method), prediction);
    let inputs = json!({
        "data": exp.data_digest()?,
        "checkpoint": record.checkpoint,
        "lambda_th": record.lambda_th,
        "method": method,
        "prediction": prediction,
        "format": format,
        "inference": config_json(&exp.cfg.inference)?,
    });
    let ext = match format {
        DumpFormat::Csv => "csv",
        DumpFormat::Binary => "bin",
    };
    exp.step(&format!("dump-{stem}-{ext}"), "dump-scores", inputs, || {
        let model = exp.model(&record)?;
        let val = exp.load(Split::Val)?;
        let ev = evaluate_model(
            &model,
            &val,
            Some(method),
            &exp.cfg.inference,
            record.lambda_th,
            prediction,
            DEFAULT_BINS,
        )?;
        let bytes = match format {
            DumpFormat::Csv => dump_csv(&ev.records).into_bytes(),
            DumpFormat::Binary => dump_binary(&ev.records),
        };
        let rel = format!("scores/{stem}.{ext}");
        let hash = exp.store.write(&rel, &bytes)?;
        Ok((BTreeMap::from([(rel, hash)]), None))
    })
}

/// Histogram data of every applicable scoring method for one stage, plus a
/// JSON summary, under `plots/<stage>/`.
pub fn plot_data(exp: &Experiment, stage: &str, bins: usize) -> Result<Outcome> {
    let (_, record) = exp.stage(stage)?;
    let methods: Vec<ScoringMethod> = ScoringMethod::ALL
        .into_iter()
        .filter(|m| *m != ScoringMethod::Real || record.model_stage != Stage::Closed)
        .collect();
    let inputs = json!({
        "data": exp.data_digest()?,
        "checkpoint": record.checkpoint,
        "bins": bins,
        "inference": config_json(&exp.cfg.inference)?,
    });
    exp.step(&format!("plot-{stage}"), "plot-data", inputs, || {
        let model = exp.model(&record)?;
        let val = exp.load(Split::Val)?;
        let mut outputs = BTreeMap::new();
        let mut summary = serde_json::Map::new();
        for m in methods {
            let ev = evaluate_model(
                &model,
                &val,
                Some(m),
                &exp.cfg.inference,
                record.lambda_th,
                PredictionMode::Closed,
                bins,
            )?;
            let h = ev.report.histogram.as_ref().expect("scores were requested");
            let rel = format!("plots/{stage}/{}.csv", m.name());
            outputs.insert(rel.clone(), exp.store.write(&rel, h.to_csv().as_bytes())?);
            summary.insert(
                m.name().to_string(),
                json!({
                    "auroc": ev.report.auroc,
                    "aupr": ev.report.aupr,
                    "mean_score_known": ev.report.mean_score_known,
                    "mean_score_unknown": ev.report.mean_score_unknown,
                    "histogram": rel,
                }),
            );
        }
        let doc = json!({ "stage": stage, "lambda_th": record.lambda_th, "methods": summary });
        let rel = format!("plots/{stage}/summary.json");
        outputs.insert(
            rel.clone(),
            exp.store.write(&rel, &serde_json::to_vec_pretty(&doc)?)?,
        );
        Ok((outputs, None))
    })
}
