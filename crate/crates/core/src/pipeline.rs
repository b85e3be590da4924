//! Staged pipeline over on-disk artifacts. Every artifact records the hash of
//! the configuration it was built from; consumers refuse mismatches unless
//! forced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{loss_log_csv, train_alignment, AlignTraining, SoraModel};
use crate::anchors::{
    hard_labels, load_anchors, parse_soft_labels_csv, save_anchors, soft_labels, soft_labels_csv, train_anchors,
    train_text_head, AnchorTraining, OrganAnchorPair,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use crate::config::{LabelMode, RunConfig, Stage};
use crate::corpus::{generate_synthetic_corpus, read_jsonl, split_corpus, write_jsonl, SymptomRecord};
use crate::error::{Error, Result};
use crate::eval::{
    anchor_organ_scores, closest_farthest, correlation_pgm, evaluate_queries, export_probability_overlay,
    infer_organ_scores, matrix_csv, organ_correlation_matrix, Gallery, MetricsReport, RetrievalResult,
};
use crate::fusion::FusionMode;
use crate::tensor::{read_artifact, write_atomic, Tensor};
use crate::volume::{generate_volumes, load_volumes, save_volumes, split_volumes, OrganVolume};

/// File locations of every artifact.
#[derive(Debug, Clone)]
pub struct Layout {
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Layout {
            data: cfg.paths.data_dir.clone(),
            out: cfg.paths.out_dir.clone(),
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.data.join("corpus")
    }

    pub fn volumes_dir(&self) -> PathBuf {
        self.data.join("volumes")
    }

    pub fn anchors(&self) -> PathBuf {
        self.out.join("anchors.json")
    }

    pub fn anchor_log(&self) -> PathBuf {
        self.out.join("anchor_loss.csv")
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.out.join("labels")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("checkpoint")
    }

    pub fn train_log(&self) -> PathBuf {
        self.out.join("train_log.csv")
    }

    pub fn text_log(&self) -> PathBuf {
        self.out.join("text_loss.csv")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn metrics(&self, ablation: Option<FusionMode>) -> PathBuf {
        match ablation {
            None => self.eval_dir().join("metrics.json"),
            Some(m) => self.eval_dir().join(format!("metrics_{}.json", fusion_tag(m))),
        }
    }
}

pub fn fusion_tag(m: FusionMode) -> &'static str {
    match m {
        FusionMode::CrossAttention => "cross_attention",
        FusionMode::Concat => "concat",
        FusionMode::Only2d => "only_2d",
        FusionMode::Only3d => "only_3d",
    }
}

/// Hash-stamped listing written next to multi-file artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub files: Vec<String>,
}

const STAGE_MANIFEST: &str = "manifest.json";

fn write_manifest(dir: &Path, stage: Stage, hash: &str, files: Vec<String>) -> Result<()> {
    let m = StageManifest {
        stage: stage.name().to_string(),
        config_hash: hash.to_string(),
        files,
    };
    write_atomic(&dir.join(STAGE_MANIFEST), &serde_json::to_vec_pretty(&m)?)
}

fn read_manifest(dir: &Path) -> Result<StageManifest> {
    let path = dir.join(STAGE_MANIFEST);
    serde_json::from_slice(&read_artifact(&path)?).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

/// Fails on a hash mismatch unless `force`, in which case it only warns.
pub fn check_hash(path: &Path, found: &str, expected: &str, force: bool) -> Result<()> {
    if found == expected {
        return Ok(());
    }
    if force {
        log::warn!(
            "{}: config hash {found} differs from {expected}; continuing because of --force",
            path.display()
        );
        return Ok(());
    }
    Err(Error::HashMismatch {
        path: path.to_path_buf(),
        expected: expected.to_string(),
        found: found.to_string(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates and splits the corpus. Returns `(train, test)` sizes.
pub fn gen_corpus(cfg: &RunConfig) -> Result<(usize, usize)> {
    let dir = Layout::new(cfg).corpus_dir();
    create_dir(&dir)?;
    let records = generate_synthetic_corpus(&cfg.corpus)?;
    let (train, test) = split_corpus(&records, &cfg.split)?;
    write_jsonl(&dir.join("train.jsonl"), &train)?;
    write_jsonl(&dir.join("test.jsonl"), &test)?;
    write_manifest(
        &dir,
        Stage::Corpus,
        &cfg.stage_hash(Stage::Corpus),
        vec!["train.jsonl".into(), "test.jsonl".into()],
    )?;
    Ok((train.len(), test.len()))
}

pub fn load_corpus(cfg: &RunConfig, force: bool) -> Result<(Vec<SymptomRecord>, Vec<SymptomRecord>)> {
    let dir = Layout::new(cfg).corpus_dir();
    let m = read_manifest(&dir)?;
    check_hash(
        &dir.join(STAGE_MANIFEST),
        &m.config_hash,
        &cfg.stage_hash(Stage::Corpus),
        force,
    )?;
    Ok((
        read_jsonl(&dir.join("train.jsonl"))?,
        read_jsonl(&dir.join("test.jsonl"))?,
    ))
}

/// Writes all volumes. Returns how many were written.
pub fn gen_volumes(cfg: &RunConfig) -> Result<usize> {
    let dir = Layout::new(cfg).volumes_dir();
    let vols = generate_volumes(&cfg.volumes)?;
    save_volumes(&dir, &vols)?;
    let files = vols
        .iter()
        .flat_map(|v| {
            let (a, b) = crate::volume::volume_paths(Path::new(""), v.case, v.organ_id);
            [a, b].map(|p| p.display().to_string())
        })
        .collect();
    write_manifest(&dir, Stage::Volumes, &cfg.stage_hash(Stage::Volumes), files)?;
    Ok(vols.len())
}

/// Training and held-out volumes.
pub fn load_volume_split(cfg: &RunConfig, force: bool) -> Result<(Vec<OrganVolume>, Vec<OrganVolume>)> {
    let dir = Layout::new(cfg).volumes_dir();
    let m = read_manifest(&dir)?;
    check_hash(
        &dir.join(STAGE_MANIFEST),
        &m.config_hash,
        &cfg.stage_hash(Stage::Volumes),
        force,
    )?;
    Ok(split_volumes(&cfg.volumes, load_volumes(&dir, &cfg.volumes)?))
}

pub fn train_anchors_stage(cfg: &RunConfig, force: bool) -> Result<AnchorTraining> {
    let (train, _) = load_corpus(cfg, force)?;
    let layout = Layout::new(cfg);
    create_dir(&layout.out)?;
    let out = train_anchors(&train, cfg.corpus.n_organs, &cfg.anchors)?;
    save_anchors(&layout.anchors(), &out.anchors, &cfg.stage_hash(Stage::Anchors))?;
    let mut log = String::from("epoch,loss\n");
    for (e, l) in out.loss_trace.iter().enumerate() {
        log.push_str(&format!("{e},{l:?}\n"));
    }
    write_atomic(&layout.anchor_log(), log.as_bytes())?;
    Ok(out)
}

pub fn load_anchor_stage(cfg: &RunConfig, force: bool) -> Result<Vec<OrganAnchorPair>> {
    let path = Layout::new(cfg).anchors();
    let (anchors, hash) = load_anchors(&path)?;
    check_hash(&path, &hash, &cfg.stage_hash(Stage::Anchors), force)?;
    Ok(anchors)
}

/// Labels for the training records under the configured label mode.
pub fn make_labels(cfg: &RunConfig, anchors: &[OrganAnchorPair], train: &[SymptomRecord]) -> Result<Vec<Vec<f64>>> {
    match cfg.labels {
        LabelMode::Soft => soft_labels(anchors, train),
        LabelMode::Hard => Ok(hard_labels(train, cfg.corpus.n_organs)),
    }
}

pub fn label_stage(cfg: &RunConfig, force: bool) -> Result<Vec<Vec<f64>>> {
    let anchors = load_anchor_stage(cfg, force)?;
    let (train, _) = load_corpus(cfg, force)?;
    let labels = make_labels(cfg, &anchors, &train)?;
    let dir = Layout::new(cfg).labels_dir();
    create_dir(&dir)?;
    write_atomic(&dir.join("labels.csv"), soft_labels_csv(&train, &labels).as_bytes())?;
    write_manifest(
        &dir,
        Stage::Labels,
        &cfg.stage_hash(Stage::Labels),
        vec!["labels.csv".into()],
    )?;
    Ok(labels)
}

/// Labels aligned with `train` by record id.
pub fn load_labels(cfg: &RunConfig, train: &[SymptomRecord], force: bool) -> Result<Vec<Vec<f64>>> {
    let dir = Layout::new(cfg).labels_dir();
    let m = read_manifest(&dir)?;
    check_hash(
        &dir.join(STAGE_MANIFEST),
        &m.config_hash,
        &cfg.stage_hash(Stage::Labels),
        force,
    )?;
    let path = dir.join("labels.csv");
    let rows = parse_soft_labels_csv(&path)?;
    if rows.len() != train.len() || rows.iter().zip(train).any(|((id, _), r)| *id != r.id) {
        return Err(Error::Format {
            path,
            reason: "label rows do not match the training records".into(),
        });
    }
    Ok(rows.into_iter().map(|(_, l)| l).collect())
}

/// Trains the text head on `labels`, then the image model and projection.
pub fn fit_model(
    cfg: &RunConfig,
    train: &[SymptomRecord],
    labels: &[Vec<f64>],
    volumes: &[OrganVolume],
    fusion: FusionMode,
) -> Result<(AlignTraining, Vec<f64>)> {
    let text = train_text_head(train, labels, &cfg.text)?;
    let model = SoraModel::new(&cfg.encoder, text.head, fusion, cfg.seed)?;
    let align = crate::alignment::AlignTrainConfig {
        fusion,
        ..cfg.align.clone()
    };
    Ok((train_alignment(model, train, volumes, &align)?, text.loss_trace))
}

pub fn train_stage(cfg: &RunConfig, force: bool) -> Result<(AlignTraining, Manifest)> {
    let (train, _) = load_corpus(cfg, force)?;
    let labels = load_labels(cfg, &train, force)?;
    let (vol_train, _) = load_volume_split(cfg, force)?;
    let layout = Layout::new(cfg);
    let (out, text_trace) = fit_model(cfg, &train, &labels, &vol_train, cfg.align.fusion)?;
    let mut log = String::from("epoch,loss\n");
    for (e, l) in text_trace.iter().enumerate() {
        log.push_str(&format!("{e},{l:?}\n"));
    }
    write_atomic(&layout.text_log(), log.as_bytes())?;
    write_atomic(&layout.train_log(), loss_log_csv(&out.trace).as_bytes())?;
    let manifest = save_checkpoint(&layout.checkpoint(), &out.model, &cfg.stage_hash(Stage::Model))?;
    Ok((out, manifest))
}

pub fn load_model_stage(cfg: &RunConfig, force: bool) -> Result<(SoraModel, Manifest)> {
    let dir = Layout::new(cfg).checkpoint();
    let (model, m) = load_checkpoint(&dir)?;
    check_hash(
        &dir.join(crate::checkpoint::MANIFEST),
        &m.config_hash,
        &cfg.stage_hash(Stage::Model),
        force,
    )?;
    Ok((model, m))
}

/// Gallery of held-out fused features.
pub fn build_gallery(model: &SoraModel, test_volumes: &[OrganVolume]) -> Result<Gallery> {
    let sets = model.image.extract(&model.params, test_volumes)?;
    Gallery::build(&sets, model.n_organs())
}

/// Scores every held-out query against the gallery.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &SoraModel,
    test: &[SymptomRecord],
    test_volumes: &[OrganVolume],
) -> Result<Vec<RetrievalResult>> {
    let gallery = build_gallery(model, test_volumes)?;
    evaluate_queries(model, &gallery, test, cfg.eval.label_threshold)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Retrain in memory with another fusion and evaluate that instead.
    pub ablation: Option<FusionMode>,
    /// Score with the query-independent anchor variant.
    pub anchor_scores: bool,
}

#[derive(Debug, Clone, Serialize)]
struct NeighbourReport {
    organ_id: usize,
    closest: Vec<(String, f64)>,
    farthest: Vec<(String, f64)>,
}

pub fn eval_stage(cfg: &RunConfig, force: bool, opts: EvalOptions) -> Result<MetricsReport> {
    let layout = Layout::new(cfg);
    let (train, test) = load_corpus(cfg, force)?;
    let (vol_train, vol_test) = load_volume_split(cfg, force)?;
    let model = match opts.ablation {
        Some(mode) => {
            let labels = load_labels(cfg, &train, force)?;
            fit_model(cfg, &train, &labels, &vol_train, mode)?.0.model
        }
        None => load_model_stage(cfg, force)?.0,
    };
    let anchors = load_anchor_stage(cfg, force)?;
    let results = if opts.anchor_scores {
        let gallery = build_gallery(&model, &vol_test)?;
        let scores = anchor_organ_scores(&model, &gallery, &anchors)?;
        test.iter()
            .map(|q| {
                let mut labels = q.label_set(cfg.eval.label_threshold);
                labels.retain(|&l| l != q.organ_id);
                labels.insert(0, q.organ_id);
                RetrievalResult::new(scores.clone(), labels)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        evaluate_model(cfg, &model, &test, &vol_test)?
    };
    let report = MetricsReport::from_results(&results, cfg.eval.ap_mode, &cfg.stage_hash(Stage::Eval))?;
    let dir = layout.eval_dir();
    create_dir(&dir)?;
    let metrics_path = match (opts.ablation, opts.anchor_scores) {
        (_, true) => dir.join("metrics_anchor.json"),
        (a, false) => layout.metrics(a),
    };
    write_atomic(&metrics_path, &serde_json::to_vec_pretty(&report)?)?;

    if opts.ablation.is_none() && !opts.anchor_scores {
        let soft = soft_labels(&anchors, &train)?;
        let corr = organ_correlation_matrix(&soft)?;
        write_atomic(&dir.join("correlation.csv"), matrix_csv(&corr).as_bytes())?;
        write_atomic(&dir.join("correlation.pgm"), &correlation_pgm(&corr, 16))?;
        let mut neighbours = Vec::new();
        for a in &anchors {
            let (near, far) = closest_farthest(&a.v_plus, &train, cfg.eval.closest_n)?;
            let named = |v: Vec<(usize, f64)>| v.into_iter().map(|(i, d)| (train[i].id.clone(), d)).collect();
            neighbours.push(NeighbourReport {
                organ_id: a.organ_id,
                closest: named(near),
                farthest: named(far),
            });
        }
        write_atomic(
            &dir.join("closest_farthest.json"),
            &serde_json::to_vec_pretty(&neighbours)?,
        )?;
    }
    Ok(report)
}

/// Reads a query embedding: a JSON array or whitespace/comma separated
/// numbers.
pub fn read_embedding(path: &Path) -> Result<Vec<f64>> {
    let text = String::from_utf8(read_artifact(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        });
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("{s:?}: {e}"),
            })
        })
        .collect()
}

/// Organ scores for one query, optionally writing a probability overlay over
/// one held-out case.
pub fn infer_stage(
    cfg: &RunConfig,
    force: bool,
    query: &[f64],
    overlay: Option<(usize, &Path)>,
) -> Result<(Vec<f64>, Option<Tensor>)> {
    let (model, _) = load_model_stage(cfg, force)?;
    if query.len() != model.text.d_txt() {
        return Err(Error::shape("infer", &[model.text.d_txt()], &[query.len()]));
    }
    let (_, vol_test) = load_volume_split(cfg, force)?;
    let gallery = build_gallery(&model, &vol_test)?;
    let scores = infer_organ_scores(&model, &gallery, query)?;
    let written = match overlay {
        Some((case, path)) => {
            let vols: Vec<OrganVolume> = vol_test.iter().filter(|v| v.case == case).cloned().collect();
            if vols.is_empty() {
                return Err(Error::Config(format!("case {case} is not a held-out case")));
            }
            Some(export_probability_overlay(&vols, &scores, path)?)
        }
        None => None,
    };
    Ok((scores, written))
}
