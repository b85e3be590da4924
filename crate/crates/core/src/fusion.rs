//! Cross-attention fusion of the volume feature with slice features, the
//! three organ-classification heads and the image loss.

use serde::{Deserialize, Serialize};

use crate::encoders::{param_id, stack_volumes, EncoderConfig, ImageEncoders};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{stage_rng, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::volume::OrganVolume;

/// How slice and volume features are combined into the fused features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `F2D + broadcast(attn(f3D → F2D))`.
    #[default]
    CrossAttention,
    /// Linear projection of `[F2D ; f3D]` per slice.
    Concat,
    Only2d,
    Only3d,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-attention" | "cross_attention" => Ok(FusionMode::CrossAttention),
            "concat" => Ok(FusionMode::Concat),
            "2d" | "only_2d" => Ok(FusionMode::Only2d),
            "3d" | "only_3d" => Ok(FusionMode::Only3d),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (cross-attention, concat, 2d, 3d)"
            ))),
        }
    }
}

/// Single-query multi-head attention without projection biases.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

fn init(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, (1.0 / shape[0] as f64).sqrt(), rng)
}

impl CrossAttention {
    pub fn new(p: &mut ParamStore, d: usize, heads: usize, rng: &mut Rng) -> Self {
        CrossAttention {
            wq: p.insert("xattn.wq", init(rng, &[d, d])),
            wk: p.insert("xattn.wk", init(rng, &[d, d])),
            wv: p.insert("xattn.wv", init(rng, &[d, d])),
            wo: p.insert("xattn.wo", init(rng, &[d, d])),
            heads,
        }
    }

    pub fn lookup(p: &ParamStore, heads: usize) -> Result<Self> {
        Ok(CrossAttention {
            wq: param_id(p, "xattn.wq")?,
            wk: param_id(p, "xattn.wk")?,
            wv: param_id(p, "xattn.wv")?,
            wo: param_id(p, "xattn.wo")?,
            heads,
        })
    }

    /// `f3d` is `[G × d]`, `f2d` is `[G·D × d]`. Returns the projected output
    /// `[G × d]` and the raw attention node, whose saved probabilities are
    /// the slice weights.
    pub fn attend(&self, t: &mut Tape, p: &Bound, f3d: Var, f2d: Var) -> Result<(Var, Var)> {
        let g = t.value(f3d).rows();
        let d = t.value(f3d).cols();
        if t.value(f2d).cols() != d || t.value(f2d).rows() % g != 0 {
            return Err(Error::shape("cross_attend", t.value(f3d).shape(), t.value(f2d).shape()));
        }
        let q = t.matmul(f3d, p[self.wq])?;
        let k = t.matmul(f2d, p[self.wk])?;
        let v = t.matmul(f2d, p[self.wv])?;
        let a = t.attention(q, k, v, self.heads, g)?;
        Ok((t.matmul(a, p[self.wo])?, a))
    }
}

/// Repeats each of the `g` rows of `x` `times` times.
pub fn broadcast_rows(t: &mut Tape, x: Var, times: usize) -> Result<Var> {
    let (g, d) = (t.value(x).rows(), t.value(x).cols());
    let index: Vec<usize> = (0..g)
        .flat_map(|r| (0..times).flat_map(move |_| (0..d).map(move |c| r * d + c)))
        .collect();
    t.gather(x, index, vec![g * times, d])
}

#[derive(Debug, Clone, Copy)]
pub struct ImageHeads {
    pub w2d: ParamId,
    pub b2d: ParamId,
    pub w3d: ParamId,
    pub b3d: ParamId,
    pub wf: ParamId,
    pub bf: ParamId,
}

impl ImageHeads {
    pub fn new(p: &mut ParamStore, d: usize, n: usize, rng: &mut Rng) -> Self {
        ImageHeads {
            w2d: p.insert("head2d.w", init(rng, &[d, n])),
            b2d: p.insert("head2d.b", Tensor::zeros(&[n])),
            w3d: p.insert("head3d.w", init(rng, &[d, n])),
            b3d: p.insert("head3d.b", Tensor::zeros(&[n])),
            wf: p.insert("headfused.w", init(rng, &[d, n])),
            bf: p.insert("headfused.b", Tensor::zeros(&[n])),
        }
    }

    pub fn lookup(p: &ParamStore) -> Result<Self> {
        Ok(ImageHeads {
            w2d: param_id(p, "head2d.w")?,
            b2d: param_id(p, "head2d.b")?,
            w3d: param_id(p, "head3d.w")?,
            b3d: param_id(p, "head3d.b")?,
            wf: param_id(p, "headfused.w")?,
            bf: param_id(p, "headfused.b")?,
        })
    }
}

/// Tape handles for one forward pass over `G` stacked volumes.
#[derive(Debug, Clone, Copy)]
pub struct FusedVars {
    pub f2d: Var,
    pub f3d: Var,
    /// Attention output broadcast to `D` rows per volume (cross-attention
    /// mode only).
    pub fout: Option<Var>,
    /// Raw attention node, carrying the slice weights.
    pub attn: Option<Var>,
    pub fused: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageLoss {
    pub l2d: f64,
    pub l3d: f64,
    pub lfused: f64,
}

impl ImageLoss {
    pub fn total(&self) -> f64 {
        self.l2d + self.l3d + self.lfused
    }
}

/// Per-volume feature bundle (values, not tape nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatureSet {
    pub organ_id: usize,
    pub f2d: Tensor,
    pub f3d: Vec<f64>,
    pub fout: Tensor,
    pub fused: Tensor,
    /// Slice weights `[heads][D]` (cross-attention mode only).
    pub slice_weights: Vec<f64>,
}

/// Encoders, fusion and heads with one parameter store.
#[derive(Debug, Clone)]
pub struct ImageModel {
    pub cfg: EncoderConfig,
    pub n_organs: usize,
    pub mode: FusionMode,
    pub encoders: ImageEncoders,
    pub xattn: CrossAttention,
    pub heads: ImageHeads,
    pub concat: Option<(ParamId, ParamId)>,
}

impl ImageModel {
    pub fn new(cfg: &EncoderConfig, n_organs: usize, mode: FusionMode, p: &mut ParamStore, seed: u64) -> Result<Self> {
        let encoders = ImageEncoders::new(cfg, p, seed)?;
        let mut rng = stage_rng(seed, "fusion");
        let d = cfg.d_img;
        let xattn = CrossAttention::new(p, d, cfg.n_heads, &mut rng);
        let heads = ImageHeads::new(p, d, n_organs, &mut rng);
        let concat = (mode == FusionMode::Concat).then(|| {
            (
                p.insert("concat.w", init(&mut rng, &[2 * d, d])),
                p.insert("concat.b", Tensor::zeros(&[d])),
            )
        });
        Ok(ImageModel {
            cfg: cfg.clone(),
            n_organs,
            mode,
            encoders,
            xattn,
            heads,
            concat,
        })
    }

    pub fn lookup(cfg: &EncoderConfig, n_organs: usize, mode: FusionMode, p: &ParamStore) -> Result<Self> {
        let concat = match mode {
            FusionMode::Concat => Some((param_id(p, "concat.w")?, param_id(p, "concat.b")?)),
            _ => None,
        };
        Ok(ImageModel {
            cfg: cfg.clone(),
            n_organs,
            mode,
            encoders: ImageEncoders::lookup(cfg, p)?,
            xattn: CrossAttention::lookup(p, cfg.n_heads)?,
            heads: ImageHeads::lookup(p)?,
            concat,
        })
    }

    /// Forward pass over a `[G·D × H × W]` stack.
    pub fn forward(&self, t: &mut Tape, p: &Bound, stack: Var) -> Result<FusedVars> {
        let depth = self.cfg.depth;
        let f2d = self.encoders.encode_2d(t, p, stack)?;
        let f3d = self.encoders.encode_3d(t, p, stack)?;
        let (fused, fout, attn) = match self.mode {
            FusionMode::CrossAttention => {
                let (out, a) = self.xattn.attend(t, p, f3d, f2d)?;
                let fout = broadcast_rows(t, out, depth)?;
                (t.add(f2d, fout)?, Some(fout), Some(a))
            }
            FusionMode::Concat => {
                let (w, b) = self
                    .concat
                    .ok_or_else(|| Error::Contract("concat parameters missing".into()))?;
                let wide = broadcast_rows(t, f3d, depth)?;
                let cat = t.concat_cols(&[f2d, wide])?;
                (t.linear(cat, p[w], Some(p[b]))?, None, None)
            }
            FusionMode::Only2d => (f2d, None, None),
            FusionMode::Only3d => (broadcast_rows(t, f3d, depth)?, None, None),
        };
        Ok(FusedVars {
            f2d,
            f3d,
            fout,
            attn,
            fused,
        })
    }

    /// `(l2d, l3d, lfused)` as tape scalars for volumes of `organs`.
    pub fn image_loss(&self, t: &mut Tape, p: &Bound, f: &FusedVars, organs: &[usize]) -> Result<(Var, Var, Var)> {
        image_loss(t, p, &self.heads, f, organs, self.cfg.depth)
    }

    /// Value-level features for each volume, one forward pass per volume.
    pub fn extract(&self, params: &ParamStore, volumes: &[OrganVolume]) -> Result<Vec<FusedFeatureSet>> {
        let mut frozen = params.clone();
        frozen.freeze_all();
        volumes
            .iter()
            .map(|vol| {
                vol.validate(self.cfg.dims())?;
                let mut t = Tape::new();
                let p = frozen.bind(&mut t);
                let x = t.constant(stack_volumes(&[&vol.voxels])?);
                let f = self.forward(&mut t, &p, x)?;
                let d = self.cfg.d_img;
                let fout = match f.fout {
                    Some(v) => t.value(v).clone(),
                    None => Tensor::zeros(&[self.cfg.depth, d]),
                };
                Ok(FusedFeatureSet {
                    organ_id: vol.organ_id,
                    f2d: t.value(f.f2d).clone(),
                    f3d: t.value(f.f3d).data().to_vec(),
                    fout,
                    fused: t.value(f.fused).clone(),
                    slice_weights: f
                        .attn
                        .and_then(|a| t.attention_weights(a))
                        .map(<[f64]>::to_vec)
                        .unwrap_or_default(),
                })
            })
            .collect()
    }
}

/// Cross-entropy of each head against the organ labels: the 2D and fused
/// heads average over slice rows, the 3D head over volumes.
pub fn image_loss(
    t: &mut Tape,
    p: &Bound,
    heads: &ImageHeads,
    f: &FusedVars,
    organs: &[usize],
    depth: usize,
) -> Result<(Var, Var, Var)> {
    let slice_labels: Vec<usize> = organs.iter().flat_map(|&o| std::iter::repeat_n(o, depth)).collect();
    let z2 = t.linear(f.f2d, p[heads.w2d], Some(p[heads.b2d]))?;
    let l2d = t.cross_entropy(z2, &slice_labels)?;
    let z3 = t.linear(f.f3d, p[heads.w3d], Some(p[heads.b3d]))?;
    let l3d = t.cross_entropy(z3, organs)?;
    let zf = t.linear(f.fused, p[heads.wf], Some(p[heads.bf]))?;
    let lf = t.cross_entropy(zf, &slice_labels)?;
    Ok((l2d, l3d, lf))
}

/// Elementwise residual sum `f2d + fout`.
pub fn fuse(f2d: &Tensor, fout: &Tensor) -> Result<Tensor> {
    if f2d.shape() != fout.shape() {
        return Err(Error::shape("fuse", f2d.shape(), fout.shape()));
    }
    Tensor::new(
        f2d.shape().to_vec(),
        f2d.data().iter().zip(fout.data()).map(|(a, b)| a + b).collect(),
    )
}
