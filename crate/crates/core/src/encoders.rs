//! CLS-token transformer encoders for slices (2D) and volumes (3D).
//!
//! Both encoders take a stack of inputs along the depth axis so a whole batch
//! runs through one set of tape nodes: the 2D encoder treats every slice as a
//! sequence, the 3D encoder treats every `depth`-slice block as one volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{stage_rng, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_img: usize,
    pub n_blocks_2d: usize,
    pub n_blocks_3d: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub patch_2d: [usize; 2],
    pub patch_3d: [usize; 3],
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_img: 32,
            n_blocks_2d: 2,
            n_blocks_3d: 1,
            n_heads: 4,
            mlp_ratio: 4,
            patch_2d: [8, 8],
            patch_3d: [2, 8, 8],
            depth: 8,
            height: 32,
            width: 32,
        }
    }
}

impl EncoderConfig {
    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_img % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_img {} is not divisible by n_heads {}",
                self.d_img, self.n_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        ops::patch_index_3d([1, self.height, self.width], [1, self.patch_2d[0], self.patch_2d[1]])?;
        ops::patch_index_3d(self.dims(), self.patch_3d)?;
        Ok(())
    }

    pub fn tokens_2d(&self) -> usize {
        (self.height / self.patch_2d[0]) * (self.width / self.patch_2d[1])
    }

    pub fn tokens_3d(&self) -> usize {
        (self.depth / self.patch_3d[0]) * (self.height / self.patch_3d[1]) * (self.width / self.patch_3d[2])
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

fn init(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let fan_in = shape[0] as f64;
    Tensor::randn(shape, (1.0 / fan_in).sqrt(), rng)
}

impl Block {
    fn new(p: &mut ParamStore, prefix: &str, d: usize, ratio: usize, rng: &mut Rng) -> Self {
        let mut add = |name: &str, t: Tensor| p.insert(format!("{prefix}.{name}"), t);
        Block {
            ln1_g: add("ln1.g", Tensor::full(&[d], 1.0)),
            ln1_b: add("ln1.b", Tensor::zeros(&[d])),
            wq: add("attn.wq", init(rng, &[d, d])),
            wk: add("attn.wk", init(rng, &[d, d])),
            wv: add("attn.wv", init(rng, &[d, d])),
            wo: add("attn.wo", init(rng, &[d, d])),
            ln2_g: add("ln2.g", Tensor::full(&[d], 1.0)),
            ln2_b: add("ln2.b", Tensor::zeros(&[d])),
            w1: add("mlp.w1", init(rng, &[d, ratio * d])),
            b1: add("mlp.b1", Tensor::zeros(&[ratio * d])),
            w2: add("mlp.w2", init(rng, &[ratio * d, d])),
            b2: add("mlp.b2", Tensor::zeros(&[d])),
        }
    }

    fn lookup(p: &ParamStore, prefix: &str) -> Result<Self> {
        let id = |name: &str| param_id(p, &format!("{prefix}.{name}"));
        Ok(Block {
            ln1_g: id("ln1.g")?,
            ln1_b: id("ln1.b")?,
            wq: id("attn.wq")?,
            wk: id("attn.wk")?,
            wv: id("attn.wv")?,
            wo: id("attn.wo")?,
            ln2_g: id("ln2.g")?,
            ln2_b: id("ln2.b")?,
            w1: id("mlp.w1")?,
            b1: id("mlp.b1")?,
            w2: id("mlp.w2")?,
            b2: id("mlp.b2")?,
        })
    }

    /// `x` is `[groups·T × d]`; attention stays within each group.
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var, heads: usize, groups: usize) -> Result<Var> {
        let h = t.layer_norm(x, p[self.ln1_g], p[self.ln1_b])?;
        let q = t.matmul(h, p[self.wq])?;
        let k = t.matmul(h, p[self.wk])?;
        let v = t.matmul(h, p[self.wv])?;
        let a = t.attention(q, k, v, heads, groups)?;
        let a = t.matmul(a, p[self.wo])?;
        let x = t.add(x, a)?;
        let h = t.layer_norm(x, p[self.ln2_g], p[self.ln2_b])?;
        let h = t.linear(h, p[self.w1], Some(p[self.b1]))?;
        let h = t.gelu(h)?;
        let h = t.linear(h, p[self.w2], Some(p[self.b2]))?;
        t.add(x, h)
    }
}

pub(crate) fn param_id(p: &ParamStore, name: &str) -> Result<ParamId> {
    p.id(name)
        .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
}

/// Patch embedding, CLS token, learned positions, blocks and final norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub patch: [usize; 3],
    /// Extent of one input along depth (1 for slices, `D` for volumes).
    pub depth: usize,
    pub tokens: usize,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub heads: usize,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    fn new(
        p: &mut ParamStore,
        prefix: &str,
        patch: [usize; 3],
        depth: usize,
        tokens: usize,
        cfg: &EncoderConfig,
        n_blocks: usize,
        rng: &mut Rng,
    ) -> Self {
        let d = cfg.d_img;
        let pvol = patch.iter().product();
        let patch_w = p.insert(format!("{prefix}.patch.w"), init(rng, &[pvol, d]));
        let patch_b = p.insert(format!("{prefix}.patch.b"), Tensor::zeros(&[d]));
        let cls = p.insert(format!("{prefix}.cls"), Tensor::randn(&[1, d], 0.02, rng));
        let pos = p.insert(format!("{prefix}.pos"), Tensor::randn(&[tokens + 1, d], 0.02, rng));
        let blocks = (0..n_blocks)
            .map(|i| Block::new(p, &format!("{prefix}.block{i}"), d, cfg.mlp_ratio, rng))
            .collect();
        let ln_g = p.insert(format!("{prefix}.ln.g"), Tensor::full(&[d], 1.0));
        let ln_b = p.insert(format!("{prefix}.ln.b"), Tensor::zeros(&[d]));
        Encoder {
            patch,
            depth,
            tokens,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            ln_g,
            ln_b,
            heads: cfg.n_heads,
        }
    }

    fn lookup(
        p: &ParamStore,
        prefix: &str,
        patch: [usize; 3],
        depth: usize,
        tokens: usize,
        cfg: &EncoderConfig,
        n_blocks: usize,
    ) -> Result<Self> {
        let id = |name: &str| param_id(p, &format!("{prefix}.{name}"));
        Ok(Encoder {
            patch,
            depth,
            tokens,
            patch_w: id("patch.w")?,
            patch_b: id("patch.b")?,
            cls: id("cls")?,
            pos: id("pos")?,
            blocks: (0..n_blocks)
                .map(|i| Block::lookup(p, &format!("{prefix}.block{i}")))
                .collect::<Result<_>>()?,
            ln_g: id("ln.g")?,
            ln_b: id("ln.b")?,
            heads: cfg.n_heads,
        })
    }

    /// Encodes a stack `[G·depth × H × W]` of `G` inputs into `[G × d]` CLS
    /// features.
    pub fn forward(&self, t: &mut Tape, p: &Bound, stack: Var) -> Result<Var> {
        let shape = t.value(stack).shape().to_vec();
        if shape.len() != 3 || shape[0] % self.depth != 0 {
            return Err(Error::Config(format!(
                "encoder input {shape:?} is not a stack of depth-{} inputs",
                self.depth
            )));
        }
        let groups = shape[0] / self.depth;
        let emb = t.conv3d(stack, p[self.patch_w], Some(p[self.patch_b]), self.patch)?;
        let (rows, d) = (t.value(emb).rows(), t.value(emb).cols());
        if rows != groups * self.tokens {
            return Err(Error::Config(format!(
                "input {shape:?} yields {rows} tokens, expected {} per input",
                self.tokens
            )));
        }
        let seq = self.tokens + 1;
        let all = t.concat_rows(&[p[self.cls], emb])?;
        let (order, pos_order) = sequence_index(groups, self.tokens, d);
        let x = t.gather(all, order, vec![groups * seq, d])?;
        let pos = t.gather(p[self.pos], pos_order, vec![groups * seq, d])?;
        let mut x = t.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(t, p, x, self.heads, groups)?;
        }
        let x = t.layer_norm(x, p[self.ln_g], p[self.ln_b])?;
        let cls_rows: Vec<usize> = (0..groups).map(|g| g * seq).collect();
        t.select_rows(x, &cls_rows)
    }
}

/// Flat gather indices that interleave one CLS row before each group's
/// tokens (source `[1 + G·T × d]`), and tile positions (source `[T+1 × d]`).
fn sequence_index(groups: usize, tokens: usize, d: usize) -> (Vec<usize>, Vec<usize>) {
    let seq = tokens + 1;
    let mut order = Vec::with_capacity(groups * seq * d);
    let mut pos = Vec::with_capacity(groups * seq * d);
    for g in 0..groups {
        for s in 0..seq {
            let src = if s == 0 { 0 } else { 1 + g * tokens + s - 1 };
            order.extend((0..d).map(|c| src * d + c));
            pos.extend((0..d).map(|c| s * d + c));
        }
    }
    (order, pos)
}

/// Both image encoders with their parameters.
#[derive(Debug, Clone)]
pub struct ImageEncoders {
    pub cfg: EncoderConfig,
    pub enc_2d: Encoder,
    pub enc_3d: Encoder,
}

impl ImageEncoders {
    pub fn new(cfg: &EncoderConfig, p: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stage_rng(seed, "encoders");
        let patch2 = [1, cfg.patch_2d[0], cfg.patch_2d[1]];
        let enc_2d = Encoder::new(p, "enc2d", patch2, 1, cfg.tokens_2d(), cfg, cfg.n_blocks_2d, &mut rng);
        let enc_3d = Encoder::new(
            p,
            "enc3d",
            cfg.patch_3d,
            cfg.depth,
            cfg.tokens_3d(),
            cfg,
            cfg.n_blocks_3d,
            &mut rng,
        );
        Ok(ImageEncoders {
            cfg: cfg.clone(),
            enc_2d,
            enc_3d,
        })
    }

    pub fn lookup(cfg: &EncoderConfig, p: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let patch2 = [1, cfg.patch_2d[0], cfg.patch_2d[1]];
        Ok(ImageEncoders {
            cfg: cfg.clone(),
            enc_2d: Encoder::lookup(p, "enc2d", patch2, 1, cfg.tokens_2d(), cfg, cfg.n_blocks_2d)?,
            enc_3d: Encoder::lookup(
                p,
                "enc3d",
                cfg.patch_3d,
                cfg.depth,
                cfg.tokens_3d(),
                cfg,
                cfg.n_blocks_3d,
            )?,
        })
    }

    /// Slice features `[G·D × d]` for a stack of `G` volumes.
    pub fn encode_2d(&self, t: &mut Tape, p: &Bound, stack: Var) -> Result<Var> {
        self.enc_2d.forward(t, p, stack)
    }

    /// Volume features `[G × d]` for a stack of `G` volumes.
    pub fn encode_3d(&self, t: &mut Tape, p: &Bound, stack: Var) -> Result<Var> {
        self.enc_3d.forward(t, p, stack)
    }
}

/// Stacks volumes along depth into one `[G·D × H × W]` tensor.
pub fn stack_volumes(vols: &[&Tensor]) -> Result<Tensor> {
    let first = vols
        .first()
        .ok_or_else(|| Error::Contract("cannot stack zero volumes".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * vols.len());
    for v in vols {
        if v.shape() != shape.as_slice() {
            return Err(Error::shape("stack_volumes", &shape, v.shape()));
        }
        data.extend_from_slice(v.data());
    }
    let mut out_shape = shape;
    out_shape[0] *= vols.len();
    Tensor::new(out_shape, data)
}
