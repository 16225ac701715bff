//! Student encoders: a conv backbone (3 conv-pool blocks + global average
//! pool) and an attention backbone (4x4 patchify + 2 self-attention blocks
//! + mean pool), each feeding a two-layer MLP head over the vocabulary.
//! Also the frozen specialist expert bank used by the ensembles.
//!
//! Activations are channels-last: images enter as [B, H*W, 3] rows and
//! convolutions run as im2col gathers followed by one matmul, which keeps
//! the whole forward pass inside the graph's op set.

use std::sync::Arc;

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{GradGraph, NodeId};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::{uniform, SeedKey};
use crate::scene::Scene;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Conv,
    Attention,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Conv => "conv",
            BackboneKind::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub backbone: BackboneKind,
    pub height: usize,
    pub width: usize,
    /// d_e, the pooled embedding width.
    pub embed_dim: usize,
    pub conv_channels: [usize; 3],
    pub attn_heads: usize,
    pub attn_blocks: usize,
    pub patch: usize,
    /// C, the vocabulary size the head predicts over.
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn conv(vocab_size: usize) -> Self {
        EncoderConfig {
            backbone: BackboneKind::Conv,
            height: 64,
            width: 64,
            embed_dim: 64,
            conv_channels: [16, 32, 64],
            attn_heads: 4,
            attn_blocks: 2,
            patch: 4,
            vocab_size,
        }
    }

    pub fn attention(vocab_size: usize) -> Self {
        EncoderConfig {
            backbone: BackboneKind::Attention,
            ..EncoderConfig::conv(vocab_size)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("encoder dims must be positive".into()));
        }
        match self.backbone {
            BackboneKind::Conv => {
                if self.height % 8 != 0 || self.width % 8 != 0 {
                    return Err(Error::InvalidConfig(
                        "conv backbone needs H and W divisible by 8".into(),
                    ));
                }
            }
            BackboneKind::Attention => {
                if self.height % self.patch != 0 || self.width % self.patch != 0 {
                    return Err(Error::InvalidConfig(
                        "attention backbone needs H and W divisible by the patch size".into(),
                    ));
                }
                if self.embed_dim % self.attn_heads != 0 {
                    return Err(Error::InvalidConfig(
                        "embed_dim must be divisible by attn_heads".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

// ── index tables ────────────────────────────────────────────────────

/// im2col indices for a 3x3 same-padded conv over [h*w, c] rows: output
/// item is [h*w, c*9], column order (offset-major, channel-minor) matching
/// the weight layout. Out-of-bounds taps read zero.
fn im2col_indices(h: usize, w: usize, c: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(h * w * c * 9);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64;
                    for ch in 0..c as i64 {
                        idx.push(if inside {
                            (yy * w as i64 + xx) * c as i64 + ch
                        } else {
                            -1
                        });
                    }
                }
            }
        }
    }
    idx
}

/// 2x2 average-pool row groups over an [h*w, c] layout.
fn pool_groups(h: usize, w: usize) -> Vec<u32> {
    let mut groups = Vec::with_capacity(h * w);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let (yy, xx) = (2 * y as u32, 2 * x as u32);
            groups.push(yy * w as u32 + xx);
            groups.push(yy * w as u32 + xx + 1);
            groups.push((yy + 1) * w as u32 + xx);
            groups.push((yy + 1) * w as u32 + xx + 1);
        }
    }
    groups
}

/// Patch extraction indices: output item is [tokens, patch*patch*3].
fn patch_indices(h: usize, w: usize, p: usize) -> Vec<i64> {
    let mut idx = Vec::new();
    for pr in 0..h / p {
        for pc in 0..w / p {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..3 {
                        let (y, x) = (pr * p + py, pc * p + px);
                        idx.push(((y * w + x) * 3 + ch) as i64);
                    }
                }
            }
        }
    }
    idx
}

// ── initialization ──────────────────────────────────────────────────

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| uniform(rng, -limit, limit)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ── parameter layouts ───────────────────────────────────────────────

#[derive(Debug, Clone)]
struct ConvLayout {
    conv_w: [ParamId; 3],
    conv_b: [ParamId; 3],
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Debug, Clone)]
struct AttnBlockIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct AttnLayout {
    embed_w: ParamId,
    embed_b: ParamId,
    pos: ParamId,
    blocks: Vec<AttnBlockIds>,
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Debug, Clone)]
enum Backbone {
    Conv(ConvLayout),
    Attention(AttnLayout),
}

/// Two-layer MLP head ids: d_e -> d_e (tanh) -> C, final layer zero-init
/// so a fresh encoder emits all-zero logits.
#[derive(Debug, Clone)]
pub struct HeadIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub fn init_head(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha12Rng,
) -> HeadIds {
    HeadIds {
        w1: store.add(&format!("{prefix}.w1"), xavier(&[in_dim, in_dim], in_dim, in_dim, rng)),
        b1: store.add(&format!("{prefix}.b1"), Tensor::zeros(&[in_dim])),
        w2: store.add(&format!("{prefix}.w2"), Tensor::zeros(&[in_dim, out_dim])),
        b2: store.add(&format!("{prefix}.b2"), Tensor::zeros(&[out_dim])),
    }
}

/// logits = W2 tanh(W1 x + b1) + b2 for [B, in_dim] inputs.
pub fn head_forward(g: &mut GradGraph, b: &Binding, ids: &HeadIds, x: NodeId) -> NodeId {
    let h = g.matmul(x, b.node(ids.w1));
    let h = g.add_broadcast(h, b.node(ids.b1));
    let h = g.tanh(h);
    let logits = g.matmul(h, b.node(ids.w2));
    g.add_broadcast(logits, b.node(ids.b2))
}

// ── student encoder ─────────────────────────────────────────────────

pub struct StudentEncoder {
    cfg: EncoderConfig,
    store: ParamStore,
    backbone: Backbone,
    head: HeadIds,
    im2col: Vec<Arc<Vec<i64>>>,
    pools: Vec<Arc<Vec<u32>>>,
    patches: Arc<Vec<i64>>,
}

impl StudentEncoder {
    pub fn new(cfg: EncoderConfig, seed: SeedKey) -> Result<StudentEncoder> {
        cfg.validate()?;
        let mut rng = seed.stream("encoder/init").rng();
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;

        let backbone = match cfg.backbone {
            BackboneKind::Conv => {
                let mut conv_w = Vec::new();
                let mut conv_b = Vec::new();
                let mut c_in = 3;
                for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
                    let fan_in = c_in * 9;
                    conv_w.push(store.add(
                        &format!("conv{}.w", i + 1),
                        xavier(&[fan_in, c_out], fan_in, c_out, &mut rng),
                    ));
                    conv_b.push(store.add(&format!("conv{}.b", i + 1), Tensor::zeros(&[c_out])));
                    c_in = c_out;
                }
                let proj_w = store.add("proj.w", xavier(&[c_in, d], c_in, d, &mut rng));
                let proj_b = store.add("proj.b", Tensor::zeros(&[d]));
                Backbone::Conv(ConvLayout {
                    conv_w: [conv_w[0], conv_w[1], conv_w[2]],
                    conv_b: [conv_b[0], conv_b[1], conv_b[2]],
                    proj_w,
                    proj_b,
                })
            }
            BackboneKind::Attention => {
                let patch_dim = cfg.patch * cfg.patch * 3;
                let embed_w = store.add("patch.w", xavier(&[patch_dim, d], patch_dim, d, &mut rng));
                let embed_b = store.add("patch.b", Tensor::zeros(&[d]));
                let pos = store.add("pos", Tensor::zeros(&[cfg.tokens(), d]));
                let mut blocks = Vec::new();
                for i in 0..cfg.attn_blocks {
                    let mut proj = |name: &str, rng: &mut ChaCha12Rng| {
                        (
                            store.add(&format!("blk{i}.{name}.w"), xavier(&[d, d], d, d, rng)),
                            store.add(&format!("blk{i}.{name}.b"), Tensor::zeros(&[d])),
                        )
                    };
                    let (wq, bq) = proj("q", &mut rng);
                    let (wk, bk) = proj("k", &mut rng);
                    let (wv, bv) = proj("v", &mut rng);
                    let (wo, bo) = proj("o", &mut rng);
                    blocks.push(AttnBlockIds {
                        wq,
                        bq,
                        wk,
                        bk,
                        wv,
                        bv,
                        wo,
                        bo,
                    });
                }
                let proj_w = store.add("proj.w", xavier(&[d, d], d, d, &mut rng));
                let proj_b = store.add("proj.b", Tensor::zeros(&[d]));
                Backbone::Attention(AttnLayout {
                    embed_w,
                    embed_b,
                    pos,
                    blocks,
                    proj_w,
                    proj_b,
                })
            }
        };
        let head = init_head(&mut store, "head", d, cfg.vocab_size, &mut rng);

        // Index tables are shape-only and shared across forward passes.
        let (mut h, mut w) = (cfg.height, cfg.width);
        let mut im2col = Vec::new();
        let mut pools = Vec::new();
        let mut c_in = 3;
        for &c_out in &cfg.conv_channels {
            im2col.push(Arc::new(im2col_indices(h, w, c_in)));
            pools.push(Arc::new(pool_groups(h, w)));
            c_in = c_out;
            h /= 2;
            w /= 2;
        }
        let patches = Arc::new(patch_indices(cfg.height, cfg.width, cfg.patch));

        Ok(StudentEncoder {
            cfg,
            store,
            backbone,
            head,
            im2col,
            pools,
            patches,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    /// Graph forward over a bound parameter set: images [B, H*W, 3] in,
    /// (embedding [B, d_e], logits [B, C]) out.
    pub fn forward_graph(&self, g: &mut GradGraph, b: &Binding, x: NodeId) -> (NodeId, NodeId) {
        let embed = match &self.backbone {
            Backbone::Conv(layout) => self.conv_embed(g, b, layout, x),
            Backbone::Attention(layout) => self.attn_embed(g, b, layout, x),
        };
        let logits = head_forward(g, b, &self.head, embed);
        (embed, logits)
    }

    fn conv_embed(&self, g: &mut GradGraph, b: &Binding, l: &ConvLayout, x: NodeId) -> NodeId {
        let batch = g.value(x).shape()[0];
        let (mut h, mut w) = (self.cfg.height, self.cfg.width);
        let mut c_in = 3;
        let mut x = x;
        for i in 0..3 {
            let c_out = self.cfg.conv_channels[i];
            let cols = g.gather_item(x, self.im2col[i].clone(), &[h * w, c_in * 9]);
            let cols = g.reshape(cols, &[batch * h * w, c_in * 9]);
            let conv = g.matmul(cols, b.node(l.conv_w[i]));
            let conv = g.add_broadcast(conv, b.node(l.conv_b[i]));
            let act = g.tanh(conv);
            let act = g.reshape(act, &[batch, h * w, c_out]);
            x = g.avg_group_item(act, self.pools[i].clone(), 4);
            h /= 2;
            w /= 2;
            c_in = c_out;
        }
        let gap_groups: Arc<Vec<u32>> = Arc::new((0..(h * w) as u32).collect());
        let pooled = g.avg_group_item(x, gap_groups, h * w);
        let pooled = g.reshape(pooled, &[batch, c_in]);
        let proj = g.matmul(pooled, b.node(l.proj_w));
        let proj = g.add_broadcast(proj, b.node(l.proj_b));
        g.tanh(proj)
    }

    fn attn_embed(&self, g: &mut GradGraph, b: &Binding, l: &AttnLayout, x: NodeId) -> NodeId {
        let batch = g.value(x).shape()[0];
        let t = self.cfg.tokens();
        let d = self.cfg.embed_dim;
        let heads = self.cfg.attn_heads;
        let patch_dim = self.cfg.patch * self.cfg.patch * 3;

        let patches = g.gather_item(x, self.patches.clone(), &[t, patch_dim]);
        let flat = g.reshape(patches, &[batch * t, patch_dim]);
        let emb = g.matmul(flat, b.node(l.embed_w));
        let emb = g.add_broadcast(emb, b.node(l.embed_b));
        let mut tokens = g.reshape(emb, &[batch, t, d]);
        tokens = g.add_broadcast(tokens, b.node(l.pos));

        let scale = 1.0 / ((d / heads) as f64).sqrt();
        for blk in &l.blocks {
            let q = g.matmul(tokens, b.node(blk.wq));
            let q = g.add_broadcast(q, b.node(blk.bq));
            let k = g.matmul(tokens, b.node(blk.wk));
            let k = g.add_broadcast(k, b.node(blk.bk));
            let v = g.matmul(tokens, b.node(blk.wv));
            let v = g.add_broadcast(v, b.node(blk.bv));
            let qh = g.split_heads(q, heads);
            let kh = g.split_heads(k, heads);
            let vh = g.split_heads(v, heads);
            let scores = g.bmm_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_last(scores);
            let ctx = g.bmm_nn(attn, vh);
            let ctx = g.merge_heads(ctx, heads);
            let out = g.matmul(ctx, b.node(blk.wo));
            let out = g.add_broadcast(out, b.node(blk.bo));
            let res = g.add(tokens, out);
            tokens = g.tanh(res);
        }

        let mean_groups: Arc<Vec<u32>> = Arc::new((0..t as u32).collect());
        let pooled = g.avg_group_item(tokens, mean_groups, t);
        let pooled = g.reshape(pooled, &[batch, d]);
        let proj = g.matmul(pooled, b.node(l.proj_w));
        let proj = g.add_broadcast(proj, b.node(l.proj_b));
        g.tanh(proj)
    }

    /// Frozen forward pass: (embeddings, logits) for a batch of images.
    pub fn forward(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let want = [self.cfg.height * self.cfg.width, 3];
        if images.shape().len() != 3 || images.shape()[1..] != want {
            return Err(Error::shape(
                "forward",
                format!("expected [B, {}, 3], got {:?}", want[0], images.shape()),
            ));
        }
        let mut g = GradGraph::new();
        let binding = Binding::bind_frozen(&mut g, &self.store);
        let x = g.constant(images.clone());
        let (embed, logits) = self.forward_graph(&mut g, &binding, x);
        Ok((g.value(embed).clone(), g.value(logits).clone()))
    }
}

/// Stacks per-scene HWC rows into a batch tensor [B, H*W, 3].
pub fn images_tensor(rows: &[Vec<f64>], height: usize, width: usize) -> Tensor {
    let b = rows.len();
    let mut data = Vec::with_capacity(b * height * width * 3);
    for r in rows {
        assert_eq!(r.len(), height * width * 3, "image row length");
        data.extend_from_slice(r);
    }
    Tensor::new(vec![b, height * width, 3], data).unwrap()
}

pub fn scenes_tensor(scenes: &[&Scene]) -> Tensor {
    let rows: Vec<Vec<f64>> = scenes.iter().map(|s| s.to_rows()).collect();
    images_tensor(&rows, scenes[0].height, scenes[0].width)
}

// ── specialist experts ──────────────────────────────────────────────

/// Attribute-family specialties standing in for the distinct strengths of
/// large pretrained encoders: global semantics, surface layout, and
/// human-centric cues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Specialty {
    /// Carried objects and lighting context.
    Semantics,
    /// Walking surface.
    SpatialSurface,
    /// Pedestrian type and behavior.
    HumanPose,
}

impl Specialty {
    pub const ALL: [Specialty; 3] = [
        Specialty::Semantics,
        Specialty::SpatialSurface,
        Specialty::HumanPose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Specialty::Semantics => "semantics",
            Specialty::SpatialSurface => "spatial-surface",
            Specialty::HumanPose => "human-pose",
        }
    }

    fn family_words(self) -> &'static [&'static str] {
        match self {
            Specialty::Semantics => &["umbrella", "dog", "stroller", "phone", "night", "day"],
            Specialty::SpatialSurface => &["crosswalk", "sidewalk", "road"],
            Specialty::HumanPose => &[
                "adult", "child", "elderly", "worker", "crossing", "waiting", "standing",
                "walking",
            ],
        }
    }

    /// 1.0 for vocabulary labels owned by this family. A label belongs to
    /// a family when every constituent word does (phrases included).
    pub fn label_mask(self, labels: &[String]) -> Vec<f64> {
        let words = self.family_words();
        labels
            .iter()
            .map(|label| {
                let all_in = label.split(' ').all(|w| words.contains(&w));
                if all_in {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Frozen specialist encoders sharing one embedding width. Built by masked
/// distillation; ensemble training must never touch these weights.
pub struct ExpertBank {
    pub experts: Vec<StudentEncoder>,
    pub specialties: Vec<Specialty>,
}

impl ExpertBank {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.experts[0].config().embed_dim
    }

    /// Stacked frozen embeddings [B, N, d_e] for a batch of images.
    pub fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.shape()[0];
        let n = self.experts.len();
        let d = self.embed_dim();
        let mut per_expert = Vec::with_capacity(n);
        for expert in &self.experts {
            let (embed, _) = expert.forward(images)?;
            per_expert.push(embed);
        }
        let mut data = vec![0.0; b * n * d];
        for (i, embed) in per_expert.iter().enumerate() {
            for bi in 0..b {
                let src = &embed.data()[bi * d..(bi + 1) * d];
                data[(bi * n + i) * d..(bi * n + i + 1) * d].copy_from_slice(src);
            }
        }
        Tensor::new(vec![b, n, d], data)
    }

    /// Flat snapshot of all expert weights, for freeze-contract checks.
    pub fn weight_snapshot(&self) -> Vec<f64> {
        self.experts.iter().flat_map(|e| e.store().to_flat()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneParams};

    fn tiny_conv(c: usize) -> EncoderConfig {
        EncoderConfig {
            backbone: BackboneKind::Conv,
            height: 16,
            width: 16,
            embed_dim: 8,
            conv_channels: [2, 3, 4],
            attn_heads: 2,
            attn_blocks: 2,
            patch: 4,
            vocab_size: c,
        }
    }

    fn tiny_attn(c: usize) -> EncoderConfig {
        EncoderConfig {
            backbone: BackboneKind::Attention,
            ..tiny_conv(c)
        }
    }

    fn random_images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = SeedKey::new(seed).stream("test/images").rng();
        let data: Vec<f64> = (0..b * h * w * 3).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
        Tensor::new(vec![b, h * w, 3], data).unwrap()
    }

    #[test]
    fn fresh_encoder_emits_zero_logits() {
        for cfg in [tiny_conv(5), tiny_attn(5)] {
            let enc = StudentEncoder::new(cfg, SeedKey::new(7)).unwrap();
            let images = random_images(2, 16, 16, 1);
            let (_, logits) = enc.forward(&images).unwrap();
            assert!(logits.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let enc = StudentEncoder::new(tiny_attn(4), SeedKey::new(3)).unwrap();
        let images = random_images(3, 16, 16, 2);
        let (e1, l1) = enc.forward(&images).unwrap();
        let (e2, l2) = enc.forward(&images).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(l1, l2);
        let enc2 = StudentEncoder::new(tiny_attn(4), SeedKey::new(3)).unwrap();
        assert_eq!(enc2.store().to_flat(), enc.store().to_flat());
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let enc = StudentEncoder::new(tiny_conv(4), SeedKey::new(3)).unwrap();
        let bad = Tensor::zeros(&[2, 10, 3]);
        assert!(enc.forward(&bad).is_err());
    }

    #[test]
    fn embedding_is_bounded_on_unit_images() {
        let enc = StudentEncoder::new(tiny_conv(4), SeedKey::new(9)).unwrap();
        let images = random_images(4, 16, 16, 5);
        let (embed, _) = enc.forward(&images).unwrap();
        assert!(embed.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn default_width_parameter_counts_within_2x() {
        for c in [16usize, 256] {
            let conv = StudentEncoder::new(EncoderConfig::conv(c), SeedKey::new(1)).unwrap();
            let attn = StudentEncoder::new(EncoderConfig::attention(c), SeedKey::new(1)).unwrap();
            let (a, b) = (conv.param_count() as f64, attn.param_count() as f64);
            let ratio = (a / b).max(b / a);
            assert!(ratio < 2.0, "C={c}: conv {a} vs attention {b} (ratio {ratio:.3})");
        }
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        use crate::gradcheck::grad_check_store;
        let images = random_images(2, 16, 16, 11);
        for cfg in [tiny_conv(3), tiny_attn(3)] {
            let kind = cfg.backbone;
            let enc = StudentEncoder::new(cfg, SeedKey::new(21)).unwrap();
            let report = grad_check_store(
                enc.store(),
                |g, b| {
                    let x = g.constant(images.clone());
                    let (embed, logits) = enc.forward_graph(g, b, x);
                    let e = g.mean_all(embed);
                    let l = g.mean_all(logits);
                    let lw = g.scale(l, 0.7);
                    g.add(e, lw)
                },
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{:?}: rel err {} at coord {}",
                kind,
                report.max_rel_err,
                report.worst_index
            );
        }
    }

    #[test]
    fn specialty_masks_partition_the_attribute_words() {
        let labels: Vec<String> = [
            "adult", "crossing", "umbrella", "crosswalk", "night", "adult crossing",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let pose = Specialty::HumanPose.label_mask(&labels);
        let sem = Specialty::Semantics.label_mask(&labels);
        let surf = Specialty::SpatialSurface.label_mask(&labels);
        assert_eq!(pose, vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(sem, vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(surf, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        // every label lands in exactly one family
        for i in 0..labels.len() {
            assert_eq!(pose[i] + sem[i] + surf[i], 1.0, "label {}", labels[i]);
        }
    }

    #[test]
    fn scene_batch_matches_scene_rows() {
        let scene = generate_scene(5, &SceneParams::default()).unwrap();
        let batch = scenes_tensor(&[&scene]);
        assert_eq!(batch.shape(), &[1, 64 * 64, 3]);
        assert_eq!(batch.data()[..12], scene.to_rows()[..12]);
    }
}
