//! Learnable organ anchors, the anchor margin loss, soft labels, and the text
//! MLP with sigmoid organ heads.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::SymptomRecord;
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Adam, ParamId, ParamStore};
use crate::rng::{gaussian, stage_rng};
use crate::tape::{Tape, Var};
use crate::tensor::{read_artifact, write_atomic, Tensor};

pub const ANCHOR_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganAnchorPair {
    pub organ_id: usize,
    pub v_plus: Vec<f64>,
    pub v_minus: Vec<f64>,
}

/// How records of other organs enter the anchor loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorLossForm {
    /// Positives pay `M(s⁺, s⁻)`, negatives pay `M(s⁻, s⁺)`.
    #[default]
    Swapped,
    /// Positives pay `max(0, m − s⁺)`, negatives pay `max(0, s⁻ − (1 − m))`.
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorTrainConfig {
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub form: AnchorLossForm,
}

impl Default for AnchorTrainConfig {
    fn default() -> Self {
        AnchorTrainConfig {
            margin: 0.8,
            epochs: 500,
            batch_size: 32,
            learning_rate: 0.001,
            seed: 0,
            form: AnchorLossForm::Swapped,
        }
    }
}

impl AnchorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.5 && self.margin < 1.0) {
            return Err(Error::Config(format!("margin {} must lie in (0.5, 1)", self.margin)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// `(cos(v⁺, emb), cos(v⁻, emb))`.
pub fn anchor_similarities(pair: &OrganAnchorPair, emb: &[f64]) -> Result<(f64, f64)> {
    Ok((
        ops::cosine_similarity(&pair.v_plus, emb)?,
        ops::cosine_similarity(&pair.v_minus, emb)?,
    ))
}

/// `max(0, m − s⁺) + max(0, s⁻ − (1 − m))`.
pub fn margin_fn(s_plus: f64, s_minus: f64, m: f64) -> f64 {
    (m - s_plus).max(0.0) + (s_minus - (1.0 - m)).max(0.0)
}

/// Anchor loss on the tape. `v_plus` and `v_minus` are `[N × d]`, `emb` is
/// `[B × d]`. For each organ the positive and negative terms are means over
/// the matching records; organs without positives in the batch contribute no
/// positive term.
pub fn anchor_loss(
    tape: &mut Tape,
    v_plus: Var,
    v_minus: Var,
    emb: Var,
    organs: &[usize],
    margin: f64,
    form: AnchorLossForm,
) -> Result<Var> {
    let n = tape.value(v_plus).rows();
    let b = tape.value(emb).rows();
    if organs.len() != b {
        return Err(Error::shape("anchor_loss", tape.value(emb).shape(), &[organs.len()]));
    }
    if let Some(&bad) = organs.iter().find(|&&o| o >= n) {
        return Err(Error::Contract(format!("organ {bad} has no anchor pair")));
    }
    let pn = tape.normalize_rows(v_plus)?;
    let mn = tape.normalize_rows(v_minus)?;
    let en = tape.normalize_rows(emb)?;
    let sp = tape.matmul_t(en, false, pn, true)?;
    let sm = tape.matmul_t(en, false, mn, true)?;

    // hinge(m − s) and hinge(s − (1 − m)) for both similarity matrices
    let below = |t: &mut Tape, s: Var| -> Result<Var> {
        let x = t.scale(s, -1.0)?;
        let x = t.add_scalar(x, margin)?;
        t.relu(x)
    };
    let above = |t: &mut Tape, s: Var| -> Result<Var> {
        let x = t.add_scalar(s, -(1.0 - margin))?;
        t.relu(x)
    };
    let (pos_term, neg_term) = match form {
        AnchorLossForm::Swapped => {
            let a = below(tape, sp)?;
            let c = above(tape, sm)?;
            let pos = tape.add(a, c)?;
            let a = below(tape, sm)?;
            let c = above(tape, sp)?;
            (pos, tape.add(a, c)?)
        }
        AnchorLossForm::Split => (below(tape, sp)?, above(tape, sm)?),
    };

    let mut n_pos = vec![0usize; n];
    for &o in organs {
        n_pos[o] += 1;
    }
    let mut w_pos = vec![0.0; b * n];
    let mut w_neg = vec![0.0; b * n];
    for (r, &o) in organs.iter().enumerate() {
        for i in 0..n {
            if i == o {
                w_pos[r * n + i] = 1.0 / n_pos[i] as f64;
            } else if b > n_pos[i] {
                w_neg[r * n + i] = 1.0 / (b - n_pos[i]) as f64;
            }
        }
    }
    let lp = tape.weighted_sum(pos_term, w_pos)?;
    let ln = tape.weighted_sum(neg_term, w_neg)?;
    tape.add(lp, ln)
}

/// Anchor loss evaluated directly on anchor pairs and records.
pub fn anchor_loss_value(
    anchors: &[OrganAnchorPair],
    batch: &[SymptomRecord],
    margin: f64,
    form: AnchorLossForm,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("anchor loss needs a nonempty batch".into()));
    }
    let mut tape = Tape::new();
    let (p, m) = anchor_tensors(anchors)?;
    let vp = tape.constant(p);
    let vm = tape.constant(m);
    let e = tape.constant(embedding_matrix(batch)?);
    let organs: Vec<usize> = batch.iter().map(|r| r.organ_id).collect();
    let l = anchor_loss(&mut tape, vp, vm, e, &organs, margin, form)?;
    Ok(tape.scalar(l))
}

fn anchor_tensors(anchors: &[OrganAnchorPair]) -> Result<(Tensor, Tensor)> {
    for (i, a) in anchors.iter().enumerate() {
        if a.organ_id != i {
            return Err(Error::Contract(format!(
                "anchor list out of order: position {i} holds organ {}",
                a.organ_id
            )));
        }
    }
    let p: Vec<Vec<f64>> = anchors.iter().map(|a| a.v_plus.clone()).collect();
    let m: Vec<Vec<f64>> = anchors.iter().map(|a| a.v_minus.clone()).collect();
    Ok((Tensor::from_rows(&p)?, Tensor::from_rows(&m)?))
}

pub fn embedding_matrix(records: &[SymptomRecord]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.embedding.clone()).collect();
    Tensor::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTraining {
    pub anchors: Vec<OrganAnchorPair>,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

pub fn train_anchors(records: &[SymptomRecord], n_organs: usize, cfg: &AnchorTrainConfig) -> Result<AnchorTraining> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Contract("cannot train anchors on an empty corpus".into()));
    }
    let d = records[0].embedding.len();
    if let Some(r) = records.iter().find(|r| r.embedding.len() != d) {
        return Err(Error::shape("train_anchors", &[d], &[r.embedding.len()]));
    }
    let mut rng = stage_rng(cfg.seed, "anchors");
    let init = |rng: &mut _| -> Tensor {
        let rows: Vec<Vec<f64>> = (0..n_organs)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
                ops::normalized(&v).expect("gaussian draw is non-zero")
            })
            .collect();
        Tensor::from_rows(&rows).expect("rows have equal length")
    };
    let mut store = ParamStore::new();
    let vp = store.insert("v_plus", init(&mut rng));
    let vm = store.insert("v_minus", init(&mut rng));
    let mut opt = Adam::new(cfg.learning_rate);

    let emb = embedding_matrix(records)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let e = tape.constant(rows_of(&emb, chunk));
            let organs: Vec<usize> = chunk.iter().map(|&i| records[i].organ_id).collect();
            let loss = anchor_loss(&mut tape, bound[vp], bound[vm], e, &organs, cfg.margin, cfg.form)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(non_finite_anchor(epoch, &store, vp, vm));
            }
            total += value;
            batches += 1;
            let grads = tape.backward(loss)?;
            store.store_grads(&bound, &grads);
            opt.step(&mut store);
        }
        loss_trace.push(total / batches as f64);
        log::debug!("anchors epoch {epoch}: loss {:.6}", total / batches as f64);
    }
    let anchors = (0..n_organs)
        .map(|i| OrganAnchorPair {
            organ_id: i,
            v_plus: store.get(vp).row(i).to_vec(),
            v_minus: store.get(vm).row(i).to_vec(),
        })
        .collect();
    Ok(AnchorTraining { anchors, loss_trace })
}

fn non_finite_anchor(epoch: usize, store: &ParamStore, vp: ParamId, vm: ParamId) -> Error {
    let n = store.get(vp).rows();
    let organ = (0..n).find(|&i| {
        !store.get(vp).row(i).iter().all(|v| v.is_finite())
            || !store.get(vm).row(i).iter().all(|v| v.is_finite())
            || ops::norm(store.get(vp).row(i)) < ops::DEGENERATE_NORM
            || ops::norm(store.get(vm).row(i)) < ops::DEGENERATE_NORM
    });
    let detail = match organ {
        Some(i) => format!("anchor loss; organ {i} anchors are non-finite or degenerate"),
        None => "anchor loss".to_string(),
    };
    Error::NonFinite { epoch, detail }
}

pub(crate) fn rows_of(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("row gather keeps width")
}

/// Entry `i` is `(cos(v_i⁺, emb) + 1) / 2`.
pub fn soft_label(anchors: &[OrganAnchorPair], emb: &[f64]) -> Result<Vec<f64>> {
    anchors
        .iter()
        .map(|a| Ok((ops::cosine_similarity(&a.v_plus, emb)? + 1.0) / 2.0))
        .collect()
}

pub fn soft_labels(anchors: &[OrganAnchorPair], records: &[SymptomRecord]) -> Result<Vec<Vec<f64>>> {
    records.iter().map(|r| soft_label(anchors, &r.embedding)).collect()
}

pub fn hard_labels(records: &[SymptomRecord], n_organs: usize) -> Vec<Vec<f64>> {
    records
        .iter()
        .map(|r| (0..n_organs).map(|k| if k == r.organ_id { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnchorFile {
    version: u32,
    config_hash: String,
    anchors: Vec<OrganAnchorPair>,
}

pub fn save_anchors(path: &Path, anchors: &[OrganAnchorPair], config_hash: &str) -> Result<()> {
    let file = AnchorFile {
        version: ANCHOR_FILE_VERSION,
        config_hash: config_hash.to_string(),
        anchors: anchors.to_vec(),
    };
    write_atomic(path, &serde_json::to_vec_pretty(&file)?)
}

/// Returns the anchors and the config hash they were written with.
pub fn load_anchors(path: &Path) -> Result<(Vec<OrganAnchorPair>, String)> {
    let bytes = read_artifact(path)?;
    let file: AnchorFile = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if file.version != ANCHOR_FILE_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported anchor file version {}", file.version),
        });
    }
    Ok((file.anchors, file.config_hash))
}

/// CSV with a header `id,organ_0,...` and one row per record.
pub fn soft_labels_csv(records: &[SymptomRecord], labels: &[Vec<f64>]) -> String {
    let n = labels.first().map_or(0, Vec::len);
    let mut out = String::from("id");
    for k in 0..n {
        out.push_str(&format!(",organ_{k}"));
    }
    out.push('\n');
    for (r, l) in records.iter().zip(labels) {
        out.push_str(&r.id);
        for v in l {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_soft_labels_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = String::from_utf8(read_artifact(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bad = |line: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut fields = line.split(',');
        let id = fields.next().ok_or_else(|| bad(i + 1, "empty line".into()))?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| bad(i + 1, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        out.push((id.to_string(), values));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TextTrainConfig {
    fn default() -> Self {
        TextTrainConfig {
            epochs: 500,
            batch_size: 32,
            learning_rate: 0.001,
            seed: 0,
        }
    }
}

/// Text MLP `d_txt → 2·d_txt (GELU) → d_feat` followed by a linear organ
/// head whose sigmoid gives per-organ scores.
#[derive(Debug, Clone)]
pub struct TextHead {
    pub params: ParamStore,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub wh: ParamId,
    pub bh: ParamId,
}

impl TextHead {
    pub fn new(d_txt: usize, d_feat: usize, n_organs: usize, seed: u64) -> Self {
        let mut rng = stage_rng(seed, "text-head");
        let hidden = 2 * d_txt;
        let mut p = ParamStore::new();
        let w1 = p.insert(
            "text.w1",
            Tensor::randn(&[d_txt, hidden], (1.0 / d_txt as f64).sqrt(), &mut rng),
        );
        let b1 = p.insert("text.b1", Tensor::zeros(&[hidden]));
        let w2 = p.insert(
            "text.w2",
            Tensor::randn(&[hidden, d_feat], (1.0 / hidden as f64).sqrt(), &mut rng),
        );
        let b2 = p.insert("text.b2", Tensor::zeros(&[d_feat]));
        let wh = p.insert(
            "text.head.w",
            Tensor::randn(&[d_feat, n_organs], (1.0 / d_feat as f64).sqrt(), &mut rng),
        );
        let bh = p.insert("text.head.b", Tensor::zeros(&[n_organs]));
        TextHead {
            params: p,
            w1,
            b1,
            w2,
            b2,
            wh,
            bh,
        }
    }

    /// Rebuilds a head around an existing parameter store (e.g. a checkpoint).
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let id = |n: &str| {
            params
                .id(n)
                .ok_or_else(|| Error::Contract(format!("missing parameter {n}")))
        };
        Ok(TextHead {
            w1: id("text.w1")?,
            b1: id("text.b1")?,
            w2: id("text.w2")?,
            b2: id("text.b2")?,
            wh: id("text.head.w")?,
            bh: id("text.head.b")?,
            params,
        })
    }

    pub fn d_txt(&self) -> usize {
        self.params.get(self.w1).shape()[0]
    }

    pub fn d_feat(&self) -> usize {
        self.params.get(self.w2).shape()[1]
    }

    pub fn n_organs(&self) -> usize {
        self.params.get(self.wh).shape()[1]
    }

    /// MLP feature for `[B × d_txt]` inputs, given tape handles for the
    /// parameters (indexed by this head's ids).
    pub fn features(&self, tape: &mut Tape, p: &impl std::ops::Index<ParamId, Output = Var>, x: Var) -> Result<Var> {
        let h = tape.linear(x, p[self.w1], Some(p[self.b1]))?;
        let h = tape.gelu(h)?;
        tape.linear(h, p[self.w2], Some(p[self.b2]))
    }

    pub fn logits(&self, tape: &mut Tape, p: &impl std::ops::Index<ParamId, Output = Var>, feat: Var) -> Result<Var> {
        tape.linear(feat, p[self.wh], Some(p[self.bh]))
    }

    fn constants(&self, tape: &mut Tape) -> crate::params::Bound {
        let mut frozen = self.params.clone();
        frozen.freeze_all();
        frozen.bind(tape)
    }

    /// Sigmoid organ scores for one embedding.
    pub fn predict(&self, emb: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape);
        let x = tape.constant(self.input(emb)?);
        let f = self.features(&mut tape, &p, x)?;
        let z = self.logits(&mut tape, &p, f)?;
        let y = tape.sigmoid(z)?;
        Ok(tape.value(y).data().to_vec())
    }

    fn input(&self, emb: &[f64]) -> Result<Tensor> {
        if emb.len() != self.d_txt() {
            return Err(Error::shape("embed_text", &[self.d_txt()], &[emb.len()]));
        }
        Tensor::matrix(1, emb.len(), emb.to_vec())
    }
}

/// MLP feature of one embedding.
pub fn embed_text(head: &TextHead, emb: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = head.constants(&mut tape);
    let x = tape.constant(head.input(emb)?);
    let f = head.features(&mut tape, &p, x)?;
    Ok(tape.value(f).data().to_vec())
}

/// Mean BCE between head outputs on `x` and `targets`, on the tape.
pub fn text_loss(
    tape: &mut Tape,
    head: &TextHead,
    p: &impl std::ops::Index<ParamId, Output = Var>,
    x: Var,
    targets: &[f64],
) -> Result<Var> {
    let f = head.features(tape, p, x)?;
    let z = head.logits(tape, p, f)?;
    tape.bce_with_logits(z, targets)
}

#[derive(Debug, Clone)]
pub struct TextTraining {
    pub head: TextHead,
    pub loss_trace: Vec<f64>,
}

/// Trains the MLP and heads with per-class BCE against `labels` (one row per
/// record, entries in [0,1]).
pub fn train_text_head(records: &[SymptomRecord], labels: &[Vec<f64>], cfg: &TextTrainConfig) -> Result<TextTraining> {
    if records.is_empty() || records.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} records but {} label rows",
            records.len(),
            labels.len()
        )));
    }
    let n = labels[0].len();
    for l in labels {
        if l.len() != n {
            return Err(Error::shape("train_text_head", &[n], &[l.len()]));
        }
        if let Some(bad) = l.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("soft target {bad} outside [0,1]")));
        }
    }
    let d = records[0].embedding.len();
    let mut head = TextHead::new(d, d, n, cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = stage_rng(cfg.seed, "text-batches");
    let emb = embedding_matrix(records)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let bound = head.params.bind(&mut tape);
            let x = tape.constant(rows_of(&emb, chunk));
            let targets: Vec<f64> = chunk.iter().flat_map(|&i| labels[i].iter().copied()).collect();
            let loss = text_loss(&mut tape, &head, &bound, x, &targets)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    detail: "text BCE loss".into(),
                });
            }
            total += value;
            batches += 1;
            let grads = tape.backward(loss)?;
            head.params.store_grads(&bound, &grads);
            opt.step(&mut head.params);
        }
        loss_trace.push(total / batches as f64);
    }
    Ok(TextTraining { head, loss_trace })
}
