//! Frozen transformer encoders with prompt-insertion points.
//!
//! Weights are drawn once from a seed and never trained: inside a graph they
//! enter as constants, so gradients flow *through* the encoders to inserted
//! prompts but never *into* encoder weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grad::{Graph, Var};
use crate::stream::Image;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(invalid!("encoder dims must be positive: {self:?}"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(invalid!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim,
                self.heads
            ));
        }
        Ok(())
    }
}

/// Pixels in `[0, 1]` are mapped to `[-1, 1]` before the patch projection.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.5;

fn linear<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
}

fn f32_exact(mut t: Tensor) -> Tensor {
    t.round_to_f32();
    t
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wqkv: Tensor,
    bqkv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    heads: usize,
}

impl Block {
    fn new<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let e = cfg.embed_dim;
        let h = e * cfg.mlp_ratio;
        Block {
            ln1_g: Tensor::filled(1, e, 1.0),
            ln1_b: Tensor::zeros(1, e),
            wqkv: f32_exact(linear(e, 3 * e, rng)),
            bqkv: Tensor::zeros(1, 3 * e),
            wo: f32_exact(linear(e, e, rng)),
            bo: Tensor::zeros(1, e),
            ln2_g: Tensor::filled(1, e, 1.0),
            ln2_b: Tensor::zeros(1, e),
            w1: f32_exact(linear(e, h, rng)),
            b1: f32_exact(Tensor::randn(1, h, 0.1, rng)),
            w2: f32_exact(linear(h, e, rng)),
            b2: Tensor::zeros(1, e),
            heads: cfg.heads,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, seq_len: usize) -> Result<Var> {
        let e = g.shape(x).1;
        let (g1, b1) = (g.constant(self.ln1_g.clone()), g.constant(self.ln1_b.clone()));
        let h = g.layer_norm(x, g1, b1)?;
        let wqkv = g.constant(self.wqkv.clone());
        let bqkv = g.constant(self.bqkv.clone());
        let qkv = g.matmul(h, wqkv)?;
        let qkv = g.add(qkv, bqkv)?;
        let q = g.slice_cols(qkv, 0, e)?;
        let k = g.slice_cols(qkv, e, e)?;
        let v = g.slice_cols(qkv, 2 * e, e)?;
        let a = g.attention(q, k, v, self.heads, seq_len)?;
        let wo = g.constant(self.wo.clone());
        let bo = g.constant(self.bo.clone());
        let a = g.matmul(a, wo)?;
        let a = g.add(a, bo)?;
        let x = g.add(x, a)?;

        let (g2, b2) = (g.constant(self.ln2_g.clone()), g.constant(self.ln2_b.clone()));
        let h = g.layer_norm(x, g2, b2)?;
        let w1 = g.constant(self.w1.clone());
        let bb1 = g.constant(self.b1.clone());
        let h = g.matmul(h, w1)?;
        let h = g.add(h, bb1)?;
        let h = g.gelu(h);
        let w2 = g.constant(self.w2.clone());
        let bb2 = g.constant(self.b2.clone());
        let h = g.matmul(h, w2)?;
        let h = g.add(h, bb2)?;
        g.add(x, h)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (n, t) in [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wqkv", &self.wqkv),
            ("bqkv", &self.bqkv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ] {
            f(&format!("{prefix}.{n}"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (n, t) in [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wqkv", &mut self.wqkv),
            ("bqkv", &mut self.bqkv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ] {
            f(&format!("{prefix}.{n}"), t);
        }
    }
}

fn run_blocks(blocks: &[Block], g: &mut Graph, mut x: Var, seq_len: usize) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, x, seq_len)?;
    }
    Ok(x)
}

/// Split an image into non-overlapping `patch×patch` squares, row-major,
/// each flattened as `(dy, dx, channel)`.
pub fn raw_patches(image: &Image, patch: usize) -> Result<Tensor> {
    let (h, w, c) = image.shape();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid!("image {h}x{w} is not divisible into {patch}x{patch} patches"));
    }
    let (ph, pw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut out = Tensor::zeros(ph * pw, dim);
    for py in 0..ph {
        for px in 0..pw {
            let row = out.row_mut(py * pw + px);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        row[k] = image.at(py * patch + dy, px * patch + dx, ch) as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `[CLS] [U_1..U_p] [I_1..I_m]`: `tokens` holds the class token in row 0
/// followed by the patch tokens; prompts go in between.
pub fn insert_visual_prompts(g: &mut Graph, tokens: Var, prompts: Var) -> Result<Var> {
    let (n, e) = g.shape(tokens);
    let (p, pe) = g.shape(prompts);
    if pe != e {
        return Err(invalid!("prompt dim {pe} does not match token dim {e}"));
    }
    if n == 0 {
        return Err(invalid!("token sequence must start with a class token"));
    }
    if p == 0 {
        return Ok(tokens);
    }
    let cls = g.slice_rows(tokens, 0, 1)?;
    if n == 1 {
        return g.concat_rows(&[cls, prompts]);
    }
    let patches = g.slice_rows(tokens, 1, n - 1)?;
    g.concat_rows(&[cls, prompts, patches])
}

/// Output of [`VisionEncoder::encode`].
pub struct ImageFeatures {
    /// Final-norm class-token output, `B × e_vis`.
    pub pooled: Var,
    /// `pooled` after the optional output projection, `B × out_dim`.
    pub projected: Var,
    /// All token outputs, `(B·L) × e_vis`.
    pub tokens: Var,
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    cfg: EncoderConfig,
    patch_size: usize,
    image_shape: (usize, usize, usize),
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    out_proj: Option<Tensor>,
}

impl VisionEncoder {
    pub fn new<R: Rng>(
        cfg: &EncoderConfig,
        image_shape: (usize, usize, usize),
        patch_size: usize,
        out_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (h, w, c) = image_shape;
        if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(invalid!("image {h}x{w} is not divisible into {patch_size}x{patch_size} patches"));
        }
        let m = (h / patch_size) * (w / patch_size);
        let e = cfg.embed_dim;
        let patch_dim = patch_size * patch_size * c;
        Ok(VisionEncoder {
            cfg: cfg.clone(),
            patch_size,
            image_shape,
            patch_w: f32_exact(linear(patch_dim, e, rng)),
            patch_b: f32_exact(Tensor::randn(1, e, 0.1, rng)),
            cls: f32_exact(Tensor::randn(1, e, 0.02, rng)),
            pos: f32_exact(Tensor::randn(1 + m, e, 0.02, rng)),
            blocks: (0..cfg.depth).map(|_| Block::new(cfg, rng)).collect(),
            lnf_g: Tensor::filled(1, e, 1.0),
            lnf_b: Tensor::zeros(1, e),
            out_proj: out_dim
                .filter(|&d| d != e)
                .map(|d| f32_exact(linear(e, d, rng))),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_proj.as_ref().map_or(self.cfg.embed_dim, |p| p.cols())
    }

    pub fn n_patches(&self) -> usize {
        let (h, w, _) = self.image_shape;
        (h / self.patch_size) * (w / self.patch_size)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Patch tokens projected to `e_vis`, no positional embedding.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        if image.shape() != self.image_shape {
            return Err(invalid!(
                "image shape {:?} does not match encoder {:?}",
                image.shape(),
                self.image_shape
            ));
        }
        let mut raw = raw_patches(image, self.patch_size)?;
        raw.data_mut().iter_mut().for_each(|v| *v = (*v - PIXEL_MEAN) / PIXEL_STD);
        let mut out = raw.matmul(&self.patch_w);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(self.patch_b.data()) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Class token plus patch tokens, positional embeddings applied:
    /// `(1+m) × e`.
    pub fn embed(&self, image: &Image) -> Result<Tensor> {
        let patches = self.patchify(image)?;
        let mut seq = Tensor::concat_rows(&[&self.cls, &patches])?;
        seq.add_assign(&self.pos);
        Ok(seq)
    }

    /// Encode a batch, inserting `prompts` (shared by every image) after the
    /// class token. Prompt slots carry no positional embedding.
    pub fn encode(&self, g: &mut Graph, images: &[&Image], prompts: Option<Var>) -> Result<ImageFeatures> {
        if images.is_empty() {
            return Err(invalid!("encode called with an empty batch"));
        }
        let mut seqs = Vec::with_capacity(images.len());
        for img in images {
            let tokens = g.constant(self.embed(img)?);
            seqs.push(match prompts {
                Some(p) => insert_visual_prompts(g, tokens, p)?,
                None => tokens,
            });
        }
        let seq_len = g.shape(seqs[0]).0;
        let x = if seqs.len() == 1 { seqs[0] } else { g.concat_rows(&seqs)? };
        self.encode_sequences(g, x, seq_len)
    }

    /// Run stacked sequences of length `seq_len` through the blocks.
    pub fn encode_sequences(&self, g: &mut Graph, x: Var, seq_len: usize) -> Result<ImageFeatures> {
        let tokens = run_blocks(&self.blocks, g, x, seq_len)?;
        let n_seq = g.shape(tokens).0 / seq_len;
        let cls_rows: Vec<usize> = (0..n_seq).map(|i| i * seq_len).collect();
        let cls = g.gather_rows(tokens, &cls_rows)?;
        let (lg, lb) = (g.constant(self.lnf_g.clone()), g.constant(self.lnf_b.clone()));
        let pooled = g.layer_norm(cls, lg, lb)?;
        let projected = match &self.out_proj {
            Some(w) => {
                let w = g.constant(w.clone());
                g.matmul(pooled, w)?
            }
            None => pooled,
        };
        Ok(ImageFeatures {
            pooled,
            projected,
            tokens,
            seq_len,
        })
    }

    /// Prompt-free pooled feature (`e_vis`), detached from any training graph.
    pub fn gate_feature(&self, image: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.encode(&mut g, &[image], None)?;
        Ok(g.value(f.pooled).clone())
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.patch_w"), &self.patch_w);
        f(&format!("{prefix}.patch_b"), &self.patch_b);
        f(&format!("{prefix}.cls"), &self.cls);
        f(&format!("{prefix}.pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
        f(&format!("{prefix}.lnf_g"), &self.lnf_g);
        f(&format!("{prefix}.lnf_b"), &self.lnf_b);
        if let Some(p) = &self.out_proj {
            f(&format!("{prefix}.out_proj"), p);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.patch_w"), &mut self.patch_w);
        f(&format!("{prefix}.patch_b"), &mut self.patch_b);
        f(&format!("{prefix}.cls"), &mut self.cls);
        f(&format!("{prefix}.pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.blocks.{i}"), f);
        }
        f(&format!("{prefix}.lnf_g"), &mut self.lnf_g);
        f(&format!("{prefix}.lnf_b"), &mut self.lnf_b);
        if let Some(p) = &mut self.out_proj {
            f(&format!("{prefix}.out_proj"), p);
        }
    }
}

/// Text encoder over `[V_1..V_M][class]` sequences. Class names are rows of
/// a frozen embedding table rather than tokenized text.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    cfg: EncoderConfig,
    class_table: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
}

impl TextEncoder {
    pub fn new<R: Rng>(cfg: &EncoderConfig, n_classes: usize, max_ctx: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if n_classes == 0 {
            return Err(invalid!("text encoder needs at least one class"));
        }
        let e = cfg.embed_dim;
        Ok(TextEncoder {
            cfg: cfg.clone(),
            class_table: f32_exact(Tensor::randn(n_classes, e, 0.02, rng)),
            pos: f32_exact(Tensor::randn(max_ctx + 1, e, 0.02, rng)),
            blocks: (0..cfg.depth).map(|_| Block::new(cfg, rng)).collect(),
            lnf_g: Tensor::filled(1, e, 1.0),
            lnf_b: Tensor::zeros(1, e),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn n_classes(&self) -> usize {
        self.class_table.rows()
    }

    pub fn max_ctx(&self) -> usize {
        self.pos.rows() - 1
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Encode one sequence per class. `contexts` stacks `ctx_len` rows per
    /// entry of `class_ids` (or is `None` when `ctx_len == 0`). Returns
    /// `K × e`: the final-norm output at each sequence's class position.
    pub fn encode(
        &self,
        g: &mut Graph,
        contexts: Option<Var>,
        ctx_len: usize,
        class_ids: &[usize],
    ) -> Result<Var> {
        let k = class_ids.len();
        if k == 0 {
            return Err(invalid!("encode_text needs at least one class"));
        }
        if ctx_len > self.max_ctx() {
            return Err(invalid!("context length {ctx_len} exceeds maximum {}", self.max_ctx()));
        }
        if let Some(&bad) = class_ids.iter().find(|&&c| c >= self.n_classes()) {
            return Err(invalid!("unknown class id {bad}"));
        }
        let e = self.embed_dim();
        match (contexts, ctx_len) {
            (None, 0) => {}
            (Some(c), _) if g.shape(c) == (k * ctx_len, e) => {}
            (c, _) => {
                return Err(invalid!(
                    "contexts shape {:?} does not match {k} classes x {ctx_len} x {e}",
                    c.map(|c| g.shape(c))
                ))
            }
        }
        let seq_len = ctx_len + 1;
        let mut class_rows = Tensor::zeros(k, e);
        for (i, &c) in class_ids.iter().enumerate() {
            class_rows.row_mut(i).copy_from_slice(self.class_table.row(c));
        }
        let class_rows = g.constant(class_rows);
        let mut parts = Vec::with_capacity(2 * k);
        for i in 0..k {
            if let Some(c) = contexts.filter(|_| ctx_len > 0) {
                parts.push(g.slice_rows(c, i * ctx_len, ctx_len)?);
            }
            parts.push(g.slice_rows(class_rows, i, 1)?);
        }
        let x = g.concat_rows(&parts)?;
        let pos = self.pos.slice_rows(0, seq_len);
        let tiled = Tensor::concat_rows(&vec![&pos; k])?;
        let tiled = g.constant(tiled);
        let x = g.add(x, tiled)?;
        let out = run_blocks(&self.blocks, g, x, seq_len)?;
        let last: Vec<usize> = (0..k).map(|i| i * seq_len + ctx_len).collect();
        let last = g.gather_rows(out, &last)?;
        let (lg, lb) = (g.constant(self.lnf_g.clone()), g.constant(self.lnf_b.clone()));
        g.layer_norm(last, lg, lb)
    }

    /// Single-class convenience over [`TextEncoder::encode`].
    pub fn encode_one(&self, g: &mut Graph, context: Option<Var>, class_id: usize) -> Result<Var> {
        let m = context.map_or(0, |c| g.shape(c).0);
        self.encode(g, context, m, &[class_id])
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.class_table"), &self.class_table);
        f(&format!("{prefix}.pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
        f(&format!("{prefix}.lnf_g"), &self.lnf_g);
        f(&format!("{prefix}.lnf_b"), &self.lnf_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.class_table"), &mut self.class_table);
        f(&format!("{prefix}.pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.blocks.{i}"), f);
        }
        f(&format!("{prefix}.lnf_g"), &mut self.lnf_g);
        f(&format!("{prefix}.lnf_b"), &mut self.lnf_b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::grad_check;
    use crate::stream::synthetic::{split_blobs, BlobSpec};
    use crate::tensor::Param;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }

    fn images(n: usize, size: usize) -> Vec<Image> {
        split_blobs(&BlobSpec {
            n_classes: n,
            per_class: 1,
            image_size: size,
            ..BlobSpec::default()
        })
        .unwrap()
        .items()
        .iter()
        .map(|it| it.image.clone())
        .collect()
    }

    fn vision(size: usize, patch: usize) -> VisionEncoder {
        VisionEncoder::new(&cfg(), (size, size, 3), patch, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(vision(32, 8).n_patches(), 16);
        assert_eq!(vision(16, 16).n_patches(), 1);
        let img = Image::new(10, 10, 3, vec![0.0; 300]).unwrap();
        assert!(raw_patches(&img, 4).is_err());
    }

    #[test]
    fn mid_gray_patches_equal_bias() {
        let enc = vision(16, 4);
        let img = Image::new(16, 16, 3, vec![0.5; 768]).unwrap();
        let p = enc.patchify(&img).unwrap();
        for r in 0..p.rows() {
            assert_eq!(p.row(r), enc.patch_b.data());
        }
    }

    #[test]
    fn prompt_insertion_lengths_and_order() {
        let mut g = Graph::new();
        let tokens = g.constant(Tensor::randn(17, 32, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let prompts = g.constant(Tensor::filled(30, 32, 9.0));
        let seq = insert_visual_prompts(&mut g, tokens, prompts).unwrap();
        assert_eq!(g.shape(seq), (47, 32));
        assert_eq!(g.value(seq).row(0), g.value(tokens).row(0));
        assert!(g.value(seq).row(1).iter().all(|&v| v == 9.0));
        assert_eq!(g.value(seq).row(31), g.value(tokens).row(1));

        let empty = g.constant(Tensor::zeros(0, 32));
        let same = insert_visual_prompts(&mut g, tokens, empty).unwrap();
        assert_eq!(g.shape(same), (17, 32));
        let bad = g.constant(Tensor::zeros(2, 16));
        assert!(insert_visual_prompts(&mut g, tokens, bad).is_err());
    }

    #[test]
    fn zero_length_prompts_match_plain_encoding() {
        let enc = vision(16, 4);
        let imgs = images(2, 16);
        let refs: Vec<&Image> = imgs.iter().collect();
        let mut g = Graph::new();
        let plain = enc.encode(&mut g, &refs, None).unwrap();
        let empty = g.constant(Tensor::zeros(0, 32));
        let prompted = enc.encode(&mut g, &refs, Some(empty)).unwrap();
        assert_eq!(g.value(plain.pooled), g.value(prompted.pooled));
    }

    #[test]
    fn encoding_is_deterministic_and_position_sensitive() {
        let enc = vision(16, 4);
        let img = &images(1, 16)[0];
        let a = enc.gate_feature(img).unwrap();
        assert_eq!(a, enc.gate_feature(img).unwrap());
        assert_eq!(a.cols(), 32);

        // swap two patches
        let mut shuffled = img.clone();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let i = (y * 16 + x) * 3 + c;
                    let j = ((y + 12) * 16 + x + 12) * 3 + c;
                    shuffled.data.swap(i, j);
                }
            }
        }
        let b = enc.gate_feature(&shuffled).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn prompt_gradient_present_weights_absent() {
        let enc = vision(8, 4);
        let img = &images(1, 8)[0];
        let mut g = Graph::new();
        let prompt = Param::new("p", Tensor::randn(3, 32, 0.1, &mut ChaCha8Rng::seed_from_u64(5)));
        let pv = g.param(&prompt);
        let f = enc.encode(&mut g, &[img], Some(pv)).unwrap();
        let w = g.constant(Tensor::randn(1, 32, 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
        let probe = g.mul(f.pooled, w).unwrap();
        let loss = g.sum(probe);
        let grads = g.backward(loss).unwrap();
        let gp = grads.param("p").unwrap();
        assert!(gp.data().iter().any(|v| v.abs() > 1e-8));
        assert_eq!(grads.by_param().len(), 1);
    }

    #[test]
    fn pooled_matches_straight_line_forward() {
        // independent re-implementation on plain tensors
        let enc = vision(8, 4);
        let img = &images(1, 8)[0];
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &[img], None).unwrap();
        let got = g.value(f.pooled).clone();

        fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
            x.iter()
                .zip(g.iter().zip(b))
                .map(|(a, (gg, bb))| (a - m) / (v + 1e-5).sqrt() * gg + bb)
                .collect()
        }
        let mut x: Vec<Vec<f64>> = {
            let t = enc.embed(img).unwrap();
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
        };
        let l = x.len();
        for b in &enc.blocks {
            let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r, b.ln1_g.data(), b.ln1_b.data())).collect();
            let proj = |r: &[f64], w: &Tensor, bias: &Tensor| -> Vec<f64> {
                (0..w.cols())
                    .map(|j| (0..w.rows()).map(|i| r[i] * w.get(i, j)).sum::<f64>() + bias.get(0, j))
                    .collect()
            };
            let qkv: Vec<Vec<f64>> = h.iter().map(|r| proj(r, &b.wqkv, &b.bqkv)).collect();
            let dh = 32 / b.heads;
            let mut att = vec![vec![0.0; 32]; l];
            for head in 0..b.heads {
                for i in 0..l {
                    let s: Vec<f64> = (0..l)
                        .map(|t| {
                            (0..dh)
                                .map(|d| qkv[i][head * dh + d] * qkv[t][32 + head * dh + d])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                    for t in 0..l {
                        let p = (s[t] - mx).exp() / z;
                        for d in 0..dh {
                            att[i][head * dh + d] += p * qkv[t][64 + head * dh + d];
                        }
                    }
                }
            }
            for i in 0..l {
                let o = proj(&att[i], &b.wo, &b.bo);
                for j in 0..32 {
                    x[i][j] += o[j];
                }
                let h2 = ln(&x[i], b.ln2_g.data(), b.ln2_b.data());
                let m1: Vec<f64> = proj(&h2, &b.w1, &b.b1)
                    .into_iter()
                    .map(|v| 0.5 * v * (1.0 + (0.7978845608028654 * (v + 0.044715 * v * v * v)).tanh()))
                    .collect();
                let m2 = proj(&m1, &b.w2, &b.b2);
                for j in 0..32 {
                    x[i][j] += m2[j];
                }
            }
        }
        let want = ln(&x[0], enc.lnf_g.data(), enc.lnf_b.data());
        for (a, b) in got.row(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn text() -> TextEncoder {
        TextEncoder::new(&cfg(), 5, 6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn text_features_depend_on_class_and_context_order() {
        let t = text();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = Tensor::randn(4, 32, 0.5, &mut rng);
        let mut g = Graph::new();
        let c = g.constant(ctx.clone());
        let a = t.encode_one(&mut g, Some(c), 0).unwrap();
        let b = t.encode_one(&mut g, Some(c), 1).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);

        let mut swapped = ctx.clone();
        let (r0, r2) = (ctx.row(0).to_vec(), ctx.row(2).to_vec());
        swapped.row_mut(0).copy_from_slice(&r2);
        swapped.row_mut(2).copy_from_slice(&r0);
        let s = g.constant(swapped);
        let a2 = t.encode_one(&mut g, Some(s), 0).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(a2)) > 1e-6);

        let bare = t.encode_one(&mut g, None, 3).unwrap();
        assert_eq!(g.shape(bare), (1, 32));
        assert!(t.encode_one(&mut g, None, 5).is_err());
    }

    #[test]
    fn batched_text_matches_single() {
        let t = text();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ctx = Tensor::randn(2 * 3, 32, 0.5, &mut rng);
        let mut g = Graph::new();
        let all = g.constant(ctx.clone());
        let both = t.encode(&mut g, Some(all), 3, &[2, 4]).unwrap();
        let c1 = g.constant(ctx.slice_rows(3, 3));
        let one = t.encode_one(&mut g, Some(c1), 4).unwrap();
        assert!(g.value(both).slice_rows(1, 1).max_abs_diff(g.value(one)) < 1e-12);
    }

    #[test]
    fn text_gradient_matches_finite_differences() {
        let t = TextEncoder::new(
            &EncoderConfig {
                embed_dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            3,
            2,
            &mut ChaCha8Rng::seed_from_u64(8),
        )
        .unwrap();
        let ctx = Param::new("ctx", Tensor::randn(4, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(9)));
        let r = grad_check(
            &[ctx],
            |g, v| {
                let f = t.encode(g, Some(v[0]), 2, &[0, 2])?;
                let w = g.constant(Tensor::randn(2, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(10)));
                let m = g.mul(f, w)?;
                Ok(g.sum(m))
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
