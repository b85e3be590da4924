//! Text-to-image projection, set similarity, InfoNCE over organs and the
//! joint image/alignment training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::anchors::{embed_text, TextHead};
use crate::corpus::SymptomRecord;
use crate::encoders::{param_id, stack_volumes, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, ImageModel};
use crate::ops;
use crate::params::{Adam, Bound, ParamId, ParamStore};
use crate::rng::stage_rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::volume::OrganVolume;

/// Aggregation of pairwise cosines between slice rows and texts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Mean over all pairs.
    #[default]
    Mean,
    /// Plain double sum over pairs.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignTrainConfig {
    pub tau: f64,
    pub epochs: usize,
    /// Texts paired with each organ volume per step.
    pub texts_per_organ: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub sim_mode: SimMode,
    pub fusion: FusionMode,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        AlignTrainConfig {
            tau: 0.1,
            epochs: 50,
            texts_per_organ: 8,
            learning_rate: 0.001,
            seed: 0,
            sim_mode: SimMode::Mean,
            fusion: FusionMode::CrossAttention,
        }
    }
}

impl AlignTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.texts_per_organ == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "texts_per_organ and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `W · f` for `W` of shape `[d_img × d_feat]`.
pub fn project_text(w_align: &Tensor, f: &[f64]) -> Result<Vec<f64>> {
    if w_align.rank() != 2 || w_align.shape()[1] != f.len() {
        return Err(Error::shape("project_text", w_align.shape(), &[f.len()]));
    }
    Ok((0..w_align.shape()[0]).map(|r| ops::dot(w_align.row(r), f)).collect())
}

/// Mean (or sum) of cosine similarities over every (row, text) pair.
pub fn avg_sim(rows: &Tensor, texts: &[Vec<f64>], mode: SimMode) -> Result<f64> {
    if rows.is_empty() || texts.is_empty() {
        return Err(Error::Contract("avg_sim needs nonempty inputs".into()));
    }
    let mut total = 0.0;
    for r in 0..rows.rows() {
        let a = ops::normalized(rows.row(r))?;
        for t in texts {
            if t.len() != a.len() {
                return Err(Error::shape("avg_sim", &[a.len()], &[t.len()]));
            }
            total += ops::dot(&a, &ops::normalized(t)?);
        }
    }
    Ok(match mode {
        SimMode::Mean => (total / (rows.rows() * texts.len()) as f64).clamp(-1.0, 1.0),
        SimMode::Sum => total,
    })
}

/// `Σ_i −log softmax(sim[i,·]/τ)[i]` for a square similarity matrix whose
/// row `i` holds organ `i`'s image set against every organ's texts.
pub fn info_nce(sim: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let n = sim.rows();
    if sim.rank() != 2 || sim.cols() != n || n < 2 {
        return Err(Error::shape("info_nce", sim.shape(), &[n, n]));
    }
    Ok((0..n)
        .map(|i| {
            let row: Vec<f64> = sim.row(i).iter().map(|s| s / tau).collect();
            -ops::log_softmax_at(&row, i)
        })
        .sum())
}

/// Averaging matrix `[groups × groups·size]`.
fn group_mean(groups: usize, size: usize) -> Tensor {
    let mut a = Tensor::zeros(&[groups, groups * size]);
    let w = 1.0 / size as f64;
    for g in 0..groups {
        a.data_mut()[g * groups * size + g * size..][..size].fill(w);
    }
    a
}

/// Similarity matrix `[N × N]` on the tape between `N` image row groups
/// (`img` is `[N·D × d]`) and `N` text groups (`txt` is `[N·n × d]`).
pub fn similarity_matrix(t: &mut Tape, img: Var, txt: Var, n: usize, mode: SimMode) -> Result<Var> {
    let (ri, rt) = (t.value(img).rows(), t.value(txt).rows());
    if ri % n != 0 || rt % n != 0 {
        return Err(Error::shape(
            "similarity_matrix",
            t.value(img).shape(),
            t.value(txt).shape(),
        ));
    }
    let (d_rows, n_txt) = (ri / n, rt / n);
    let img = t.normalize_rows(img)?;
    let txt = t.normalize_rows(txt)?;
    let ai = t.constant(group_mean(n, d_rows));
    let at = t.constant(group_mean(n, n_txt));
    let mi = t.matmul(ai, img)?;
    let mt = t.matmul(at, txt)?;
    let s = t.matmul_t(mi, false, mt, true)?;
    match mode {
        SimMode::Mean => Ok(s),
        SimMode::Sum => t.scale(s, (d_rows * n_txt) as f64),
    }
}

/// InfoNCE on the tape from a similarity matrix node.
pub fn info_nce_tape(t: &mut Tape, sim: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let n = t.value(sim).rows();
    let logits = t.scale(sim, 1.0 / tau)?;
    let labels: Vec<usize> = (0..n).collect();
    let ce = t.cross_entropy(logits, &labels)?;
    t.scale(ce, n as f64)
}

/// Image model, projection and frozen text head.
#[derive(Debug, Clone)]
pub struct SoraModel {
    pub image: ImageModel,
    /// Image encoders, fusion, heads and `align.w`.
    pub params: ParamStore,
    pub w_align: ParamId,
    pub text: TextHead,
}

impl SoraModel {
    pub fn new(enc: &EncoderConfig, text: TextHead, mode: FusionMode, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let n = text.n_organs();
        let image = ImageModel::new(enc, n, mode, &mut params, seed)?;
        let mut rng = stage_rng(seed, "align");
        let d_feat = text.d_feat();
        let w_align = params.insert(
            "align.w",
            Tensor::randn(&[enc.d_img, d_feat], (1.0 / d_feat as f64).sqrt(), &mut rng),
        );
        Ok(SoraModel {
            image,
            params,
            w_align,
            text,
        })
    }

    /// Reassembles a model from stored parameters.
    pub fn from_params(enc: &EncoderConfig, mode: FusionMode, params: ParamStore, text: TextHead) -> Result<Self> {
        let image = ImageModel::lookup(enc, text.n_organs(), mode, &params)?;
        let w_align = param_id(&params, "align.w")?;
        Ok(SoraModel {
            image,
            params,
            w_align,
            text,
        })
    }

    pub fn n_organs(&self) -> usize {
        self.image.n_organs
    }

    /// Projected text feature of one raw embedding, `W · MLP(e/‖e‖)`.
    pub fn text_feature(&self, emb: &[f64]) -> Result<Vec<f64>> {
        let unit = ops::normalized(emb)?;
        let f = embed_text(&self.text, &unit)?;
        project_text(self.params.get(self.w_align), &f)
    }
}

/// Per-epoch means of the loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_2d: f64,
    pub l_3d: f64,
    pub l_fusion: f64,
    pub l_align: f64,
    pub l_total: f64,
}

pub fn loss_log_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,l_2d,l_3d,l_fusion,l_align,l_total\n");
    for e in trace {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?}\n",
            e.epoch, e.l_2d, e.l_3d, e.l_fusion, e.l_align, e.l_total
        ));
    }
    out
}

/// One training step's batch: a case index per organ and text rows.
struct Step {
    cases: Vec<usize>,
    texts: Vec<Vec<usize>>,
}

/// Fixed step plan: organ `i`'s training texts are cut into chunks of
/// `texts_per_organ` after one seeded shuffle; step `j` pairs chunk `j` with
/// case `j mod cases`. Every epoch visits the same steps in a new order.
fn step_plan(by_organ: &[Vec<usize>], n_cases: usize, cfg: &AlignTrainConfig) -> Vec<Step> {
    let mut rng = stage_rng(cfg.seed, "align-plan");
    let shuffled: Vec<Vec<usize>> = by_organ
        .iter()
        .map(|idx| {
            let mut v = idx.clone();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let k = cfg.texts_per_organ;
    let n_steps = shuffled
        .iter()
        .map(|v| v.len().div_ceil(k))
        .max()
        .unwrap_or(0)
        .max(n_cases);
    (0..n_steps)
        .map(|j| Step {
            cases: vec![j % n_cases; by_organ.len()],
            texts: shuffled
                .iter()
                .map(|v| (0..k).map(|t| v[(j * k + t) % v.len()]).collect())
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AlignTraining {
    pub model: SoraModel,
    pub trace: Vec<EpochLoss>,
}

/// Precomputed MLP features for records, in record order.
pub fn text_features(head: &TextHead, records: &[SymptomRecord]) -> Result<Tensor> {
    let rows = records
        .iter()
        .map(|r| embed_text(head, &ops::normalized(&r.embedding)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Evaluates all loss components for one step. Returns
/// `(l2d, l3d, lfused, lalign)` nodes.
#[allow(clippy::too_many_arguments)]
pub fn step_losses(
    t: &mut Tape,
    model: &SoraModel,
    p: &Bound,
    volumes: &[&Tensor],
    text_rows: Tensor,
    cfg: &AlignTrainConfig,
) -> Result<(Var, Var, Var, Var)> {
    let n = model.n_organs();
    if volumes.len() != n {
        return Err(Error::Contract(format!(
            "need one volume per organ, got {}",
            volumes.len()
        )));
    }
    let stack = t.constant(stack_volumes(volumes)?);
    let f = model.image.forward(t, p, stack)?;
    let organs: Vec<usize> = (0..n).collect();
    let (l2d, l3d, lf) = model.image.image_loss(t, p, &f, &organs)?;
    let txt = t.constant(text_rows);
    let proj = t.matmul_t(txt, false, p[model.w_align], true)?;
    let sim = similarity_matrix(t, f.fused, proj, n, cfg.sim_mode)?;
    let la = info_nce_tape(t, sim, cfg.tau)?;
    Ok((l2d, l3d, lf, la))
}

/// Trains encoders, fusion, heads and the projection on `L_image + L_align`.
/// The text head stays frozen. `volumes` are the training cases.
pub fn train_alignment(
    mut model: SoraModel,
    records: &[SymptomRecord],
    volumes: &[OrganVolume],
    cfg: &AlignTrainConfig,
) -> Result<AlignTraining> {
    cfg.validate()?;
    let n = model.n_organs();
    let mut by_case: Vec<Vec<Option<&Tensor>>> = Vec::new();
    for v in volumes {
        v.validate(model.image.cfg.dims())?;
        if v.organ_id >= n {
            return Err(Error::Contract(format!("volume organ {} out of range", v.organ_id)));
        }
        if by_case.len() <= v.case {
            by_case.resize(v.case + 1, vec![None; n]);
        }
        by_case[v.case][v.organ_id] = Some(&v.voxels);
    }
    let cases: Vec<Vec<&Tensor>> = by_case
        .into_iter()
        .filter_map(|c| c.into_iter().collect::<Option<Vec<_>>>())
        .collect();
    if cases.is_empty() {
        return Err(Error::Contract("no case has a volume for every organ".into()));
    }
    let mut by_organ = vec![Vec::new(); n];
    for (i, r) in records.iter().enumerate() {
        by_organ
            .get_mut(r.organ_id)
            .ok_or_else(|| Error::Contract(format!("record organ {} out of range", r.organ_id)))?
            .push(i);
    }
    if let Some(o) = by_organ.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("organ {o} has no training texts")));
    }
    let feats = text_features(&model.text, records)?;
    let plan = step_plan(&by_organ, cases.len(), cfg);
    let mut rng = stage_rng(cfg.seed, "align-order");
    let mut order: Vec<usize> = (0..plan.len()).collect();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut per_step = vec![[0.0; 4]; plan.len()];
        for &j in &order {
            let step = &plan[j];
            let vols: Vec<&Tensor> = step.cases.iter().enumerate().map(|(o, &c)| cases[c][o]).collect();
            let rows: Vec<usize> = step.texts.iter().flatten().copied().collect();
            let text_rows = crate::anchors::rows_of(&feats, &rows);
            let mut t = Tape::new();
            let p = model.params.bind(&mut t);
            let (l2d, l3d, lf, la) = step_losses(&mut t, &model, &p, &vols, text_rows, cfg)?;
            let values = [t.scalar(l2d), t.scalar(l3d), t.scalar(lf), t.scalar(la)];
            if let Some(k) = values.iter().position(|v| !v.is_finite()) {
                let name = ["l_2d", "l_3d", "l_fusion", "l_align"][k];
                return Err(Error::NonFinite {
                    epoch,
                    detail: format!("{name} at step {j}: {}", values[k]),
                });
            }
            per_step[j] = values;
            let a = t.add(l2d, l3d)?;
            let b = t.add(lf, la)?;
            let total = t.add(a, b)?;
            let grads = t.backward(total)?;
            model.params.store_grads(&p, &grads);
            opt.step(&mut model.params);
        }
        let m = plan.len() as f64;
        let mean = |k: usize| per_step.iter().map(|v| v[k]).sum::<f64>() / m;
        let e = EpochLoss {
            epoch,
            l_2d: mean(0),
            l_3d: mean(1),
            l_fusion: mean(2),
            l_align: mean(3),
            l_total: mean(0) + mean(1) + mean(2) + mean(3),
        };
        log::info!(
            "epoch {epoch}: image {:.4} align {:.4}",
            e.l_2d + e.l_3d + e.l_fusion,
            e.l_align
        );
        trace.push(e);
    }
    Ok(AlignTraining { model, trace })
}
