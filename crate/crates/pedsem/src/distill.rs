//! Knowledge distillation: the multi-label BCE objective, the teacher
//! abstraction (synthetic oracle, replay cache, remote endpoint), the
//! dataset builder, and the training loop shared by students and experts.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::graph::{GradGraph, NodeId};
use crate::labels::{
    build_vocabulary, encode_labels, load_corpus, save_corpus, Annotation, LabelVector,
    TokenizerConfig, Vocabulary,
};
use crate::metrics::macro_topk;
use crate::model::{images_tensor, ExpertBank, Specialty, StudentEncoder};
use crate::optim::{adam_step, AdamState, LrSchedule};
use crate::params::Binding;
use crate::rng::{shuffle, SeedKey};
use crate::scene::{generate_scene, image_f32_bytes, teacher_annotate, Scene, SceneParams};
use crate::tensor::Tensor;

/// Probabilities are clamped to [1e-12, 1] inside the logs so saturated
/// logits stay finite.
pub const BCE_LOG_FLOOR: f64 = 1e-12;

/// Instruction sent to the teacher with every image.
pub const DEFAULT_TEACHER_PROMPT: &str = "You are a helpful autonomous driving agent. Describe \
    the action and behavior of the pedestrian and the unusual situation in the scene that \
    requires the driver's attention.";

// ── loss ────────────────────────────────────────────────────────────

/// Scalar binary cross-entropy over sigmoid logits:
/// -(1/C) sum_i [y_i ln s(l_i) + (1-y_i) ln(1-s(l_i))].
pub fn bce_loss(logits: &[f64], y: &LabelVector) -> Result<f64> {
    if logits.len() != y.len() {
        return Err(Error::shape(
            "bce_loss",
            format!("{} logits vs {} labels", logits.len(), y.len()),
        ));
    }
    let c = logits.len() as f64;
    let mut acc = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        let p = 1.0 / (1.0 + (-l).exp());
        let (p, q) = (p.max(BCE_LOG_FLOOR), (1.0 - p).max(BCE_LOG_FLOOR));
        acc += if y.is_set(i) { p.ln() } else { q.ln() };
    }
    Ok(-acc / c)
}

/// Graph BCE over a [B, C] logits node against constant targets; optional
/// per-label mask restricts the loss (and its normalizer) to a family.
pub fn bce_loss_graph(
    g: &mut GradGraph,
    logits: NodeId,
    targets: &Tensor,
    mask: Option<&[f64]>,
) -> NodeId {
    let shape = g.value(logits).shape().to_vec();
    assert_eq!(shape, targets.shape(), "bce targets shape");
    let (b, c) = (shape[0], shape[1]);

    let y = g.constant(targets.clone());
    let ones_minus_y = {
        let data: Vec<f64> = targets.data().iter().map(|v| 1.0 - v).collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        g.constant(t)
    };
    let p = g.sigmoid(logits);
    let log_p = g.log_clamped(p, BCE_LOG_FLOOR);
    let t1 = g.mul(y, log_p);
    let neg_p = g.scale(p, -1.0);
    let one_minus_p = g.add_scalar(neg_p, 1.0);
    let log_q = g.log_clamped(one_minus_p, BCE_LOG_FLOOR);
    let t2 = g.mul(ones_minus_y, log_q);
    let terms = g.add(t1, t2);

    let (terms, denom) = match mask {
        None => (terms, (b * c) as f64),
        Some(mask) => {
            assert_eq!(mask.len(), c, "mask length");
            let active: f64 = mask.iter().sum();
            assert!(active > 0.0, "empty label mask");
            let tiled: Vec<f64> = (0..b).flat_map(|_| mask.iter().copied()).collect();
            let m = g.constant(Tensor::new(shape.clone(), tiled).unwrap());
            (g.mul(terms, m), b as f64 * active)
        }
    };
    let total = g.sum_all(terms);
    g.scale(total, -1.0 / denom)
}

// ── teacher ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum TeacherMode {
    /// Template annotations generated from scene truth with omission noise.
    SyntheticOracle { omit_prob: f64 },
    /// Cached corpus only; a miss is an error, never a network call.
    Replay,
    /// HTTP endpoint; every response is persisted into the cache.
    Remote { url: String },
}

pub struct TeacherClient {
    pub mode: TeacherMode,
    pub prompt: String,
    cache: BTreeMap<String, String>,
}

impl TeacherClient {
    pub fn synthetic_oracle(omit_prob: f64) -> TeacherClient {
        TeacherClient {
            mode: TeacherMode::SyntheticOracle { omit_prob },
            prompt: DEFAULT_TEACHER_PROMPT.to_string(),
            cache: BTreeMap::new(),
        }
    }

    pub fn replay_from_file(path: &Path) -> Result<TeacherClient> {
        let corpus = load_corpus(path)?;
        Ok(TeacherClient {
            mode: TeacherMode::Replay,
            prompt: DEFAULT_TEACHER_PROMPT.to_string(),
            cache: corpus.into_iter().map(|a| (a.image_id, a.text)).collect(),
        })
    }

    pub fn remote(url: impl Into<String>) -> TeacherClient {
        TeacherClient {
            mode: TeacherMode::Remote { url: url.into() },
            prompt: DEFAULT_TEACHER_PROMPT.to_string(),
            cache: BTreeMap::new(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Writes the cache as an annotation corpus, in image_id order.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let corpus: Vec<Annotation> = self
            .cache
            .iter()
            .map(|(id, text)| Annotation::new(id.clone(), text.clone()))
            .collect();
        save_corpus(&corpus, path)
    }

    /// One annotation for one image. The scene is required by the oracle
    /// (truth) and remote (pixels) modes; replay works from the cache alone.
    pub fn fetch_annotation(&mut self, image_id: &str, scene: Option<&Scene>) -> Result<Annotation> {
        match &self.mode {
            TeacherMode::SyntheticOracle { omit_prob } => {
                let scene = scene.ok_or_else(|| {
                    Error::contract("fetch_annotation", "oracle mode needs the scene")
                })?;
                Ok(teacher_annotate(scene, *omit_prob, scene.seed))
            }
            TeacherMode::Replay => match self.cache.get(image_id) {
                Some(text) => Ok(Annotation::new(image_id, text.clone())),
                None => Err(Error::CacheMiss(image_id.to_string())),
            },
            TeacherMode::Remote { url } => {
                let scene = scene.ok_or_else(|| {
                    Error::contract("fetch_annotation", "remote mode needs the scene")
                })?;
                let body = serde_json::json!({
                    "prompt": self.prompt,
                    "image": base64_encode(&image_f32_bytes(scene)),
                    "image_id": image_id,
                });
                let response = ureq::post(url)
                    .set("content-type", "application/json")
                    .send_string(&body.to_string())
                    .map_err(|e| Error::Remote(e.to_string()))?;
                let text = response.into_string().map_err(|e| Error::Remote(e.to_string()))?;
                let parsed: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| Error::Remote(e.to_string()))?;
                let answer = parsed
                    .get("text")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| Error::Remote("response missing `text` field".into()))?
                    .to_string();
                self.cache.insert(image_id.to_string(), answer.clone());
                Ok(Annotation::new(image_id, answer))
            }
        }
    }
}

fn base64_encode(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

// ── configuration and dataset ───────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    /// Cap on the mined vocabulary size.
    pub vocab_size: usize,
    pub n_scenes: usize,
    pub holdout_frac: f64,
    pub scene_params: SceneParams,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 10,
            batch_size: 8,
            lr0: 1e-4,
            seed: 0,
            vocab_size: 256,
            n_scenes: 2000,
            holdout_frac: 0.2,
            scene_params: SceneParams::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.n_scenes == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidConfig("distill counts must be positive".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::InvalidConfig("lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::InvalidConfig("holdout_frac must be in [0,1)".into()));
        }
        self.scene_params.validate()
    }
}

/// One supervised example: rendered pixels plus the teacher-derived target.
pub struct LabeledScene {
    pub scene_seed: u64,
    pub rows: Vec<f64>,
    pub target: LabelVector,
}

/// Train/held-out split with the vocabulary mined from the training
/// teacher corpus.
pub struct DistillDataset {
    pub train: Vec<LabeledScene>,
    pub heldout: Vec<LabeledScene>,
    pub vocab: Vocabulary,
    pub skipped: usize,
    pub height: usize,
    pub width: usize,
}

impl DistillDataset {
    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }
}

/// Renders scenes, collects teacher annotations, mines the vocabulary from
/// the training corpus, and encodes multi-hot targets. Records whose
/// annotation is empty are skipped and counted.
pub fn build_dataset(cfg: &DistillConfig, teacher: &mut TeacherClient) -> Result<DistillDataset> {
    cfg.validate()?;
    let seeds = SeedKey::new(cfg.seed).stream("data/scenes");
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut annotations = Vec::with_capacity(cfg.n_scenes);
    let mut skipped = 0usize;
    for i in 0..cfg.n_scenes {
        let scene = generate_scene(seeds.index(i as u64).raw(), &cfg.scene_params)?;
        let ann = teacher.fetch_annotation(&scene.image_id(), Some(&scene))?;
        if ann.text.trim().is_empty() {
            skipped += 1;
            continue;
        }
        scenes.push(scene);
        annotations.push(ann);
    }
    if skipped > 0 {
        log::warn!("teacher returned {skipped} empty annotations; records skipped");
    }
    if scenes.is_empty() {
        return Err(Error::contract("build_dataset", "every record was skipped"));
    }

    let n_holdout = (scenes.len() as f64 * cfg.holdout_frac).floor() as usize;
    let n_train = scenes.len() - n_holdout;
    let vocab = build_vocabulary(&annotations[..n_train], cfg.vocab_size, &TokenizerConfig::default())?;

    let mut items: Vec<LabeledScene> = scenes
        .iter()
        .zip(&annotations)
        .map(|(scene, ann)| LabeledScene {
            scene_seed: scene.seed,
            rows: scene.to_rows(),
            target: encode_labels(ann, &vocab),
        })
        .collect();
    let heldout = items.split_off(n_train);
    Ok(DistillDataset {
        train: items,
        heldout,
        vocab,
        skipped,
        height: cfg.scene_params.height,
        width: cfg.scene_params.width,
    })
}

// ── training ────────────────────────────────────────────────────────

/// Per-epoch record of one training run. Wall-clock stays out of the
/// deterministic report files.
#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub holdout_loss: Vec<f64>,
    pub holdout_top1_f1: Vec<f64>,
    pub wall_seconds: Vec<f64>,
    pub skipped_records: usize,
}

fn batch_tensors(
    dataset: &DistillDataset,
    items: &[LabeledScene],
    idx: &[usize],
) -> (Tensor, Tensor) {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| items[i].rows.clone()).collect();
    let images = images_tensor(&rows, dataset.height, dataset.width);
    let c = dataset.vocab_size();
    let mut targets = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        targets.extend(items[i].target.to_f64());
    }
    let targets = Tensor::new(vec![idx.len(), c], targets).unwrap();
    (images, targets)
}

/// Sigmoid probabilities for every item, in chunks, via frozen forwards.
pub fn predict_probs(
    encoder: &StudentEncoder,
    dataset: &DistillDataset,
    items: &[LabeledScene],
) -> Result<Vec<Vec<f64>>> {
    let c = dataset.vocab_size();
    let mut probs = Vec::with_capacity(items.len());
    for chunk in items.chunks(64) {
        let rows: Vec<Vec<f64>> = chunk.iter().map(|s| s.rows.clone()).collect();
        let images = images_tensor(&rows, dataset.height, dataset.width);
        let (_, logits) = encoder.forward(&images)?;
        for row in logits.data().chunks_exact(c) {
            probs.push(row.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect());
        }
    }
    Ok(probs)
}

fn holdout_metrics(
    encoder: &StudentEncoder,
    dataset: &DistillDataset,
) -> Result<(f64, f64)> {
    if dataset.heldout.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let probs = predict_probs(encoder, dataset, &dataset.heldout)?;
    let mut loss = 0.0;
    for (p, item) in probs.iter().zip(&dataset.heldout) {
        // recover logits-free BCE directly from probabilities
        let c = p.len() as f64;
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            let (pi, qi) = (pi.max(BCE_LOG_FLOOR), (1.0 - pi).max(BCE_LOG_FLOOR));
            acc += if item.target.is_set(i) { pi.ln() } else { qi.ln() };
        }
        loss += -acc / c;
    }
    loss /= dataset.heldout.len() as f64;
    let truths: Vec<LabelVector> = dataset.heldout.iter().map(|s| s.target.clone()).collect();
    let (_, _, f1, _) = macro_topk(&probs, &truths, 1)?;
    Ok((loss, f1))
}

/// Runs epochs x batches of forward -> BCE -> backward -> Adam on the
/// encoder. An optional label mask restricts supervision to one family
/// (specialist pretraining). Deterministic given the config seed.
pub fn train_distill(
    cfg: &DistillConfig,
    encoder: &mut StudentEncoder,
    dataset: &DistillDataset,
    mask: Option<&[f64]>,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    if encoder.config().vocab_size != dataset.vocab_size() {
        return Err(Error::shape(
            "train_distill",
            format!(
                "encoder head is {} wide, vocabulary is {}",
                encoder.config().vocab_size,
                dataset.vocab_size()
            ),
        ));
    }
    if dataset.train.is_empty() {
        return Err(Error::contract("train_distill", "empty training split"));
    }

    let n = dataset.train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(cfg.lr0, (cfg.epochs * batches_per_epoch) as u64);
    let mut adam = AdamState::new(encoder.store());
    let shuffle_key = SeedKey::new(cfg.seed).stream("train/shuffle");

    let mut history = TrainingHistory {
        skipped_records: dataset.skipped,
        ..TrainingHistory::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut rng = shuffle_key.index(epoch as u64).rng();
        shuffle(&mut rng, &mut order);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (images, targets) = batch_tensors(dataset, &dataset.train, batch);
            let mut g = GradGraph::new();
            let binding = Binding::bind(&mut g, encoder.store());
            let x = g.constant(images);
            let (_, logits) = encoder.forward_graph(&mut g, &binding, x);
            let loss = bce_loss_graph(&mut g, logits, &targets, mask);
            let grads = g.backward(loss)?;
            let grad_list = binding.gradients(&grads);
            adam_step(encoder.store_mut(), &grad_list, &mut adam, &sched)?;
            epoch_loss += g.value(loss).item() * batch.len() as f64;
        }
        history.train_loss.push(epoch_loss / n as f64);

        let (h_loss, h_f1) = holdout_metrics(encoder, dataset)?;
        history.holdout_loss.push(h_loss);
        history.holdout_top1_f1.push(h_f1);
        history.wall_seconds.push(t0.elapsed().as_secs_f64());
    }
    Ok(history)
}

/// Pre-distills one frozen specialist per specialty: identical encoders,
/// disjoint label families masked into the loss.
pub fn build_expert_bank(
    cfg: &DistillConfig,
    specialties: &[Specialty],
    dataset: &DistillDataset,
    make_encoder: impl Fn(usize) -> Result<StudentEncoder>,
) -> Result<ExpertBank> {
    if specialties.is_empty() {
        return Err(Error::contract("build_expert_bank", "no specialties given"));
    }
    let mut experts = Vec::with_capacity(specialties.len());
    for (i, &specialty) in specialties.iter().enumerate() {
        let mask = specialty.label_mask(dataset.vocab.labels());
        if mask.iter().sum::<f64>() == 0.0 {
            return Err(Error::contract(
                "build_expert_bank",
                format!("specialty {} matches no vocabulary label", specialty.name()),
            ));
        }
        let mut encoder = make_encoder(i)?;
        let mut expert_cfg = cfg.clone();
        expert_cfg.seed = SeedKey::new(cfg.seed)
            .stream("experts")
            .index(i as u64)
            .raw();
        train_distill(&expert_cfg, &mut encoder, dataset, Some(&mask))?;
        experts.push(encoder);
    }
    Ok(ExpertBank {
        experts,
        specialties: specialties.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{build_vocabulary, Annotation};
    use crate::model::{BackboneKind, EncoderConfig};

    fn label_vector(words: &str, vocab_words: &[&str]) -> (LabelVector, Vocabulary) {
        let corpus: Vec<Annotation> = vocab_words
            .iter()
            .enumerate()
            .map(|(i, w)| Annotation::new(format!("{i}"), w.to_string()))
            .collect();
        let vocab = build_vocabulary(&corpus, vocab_words.len(), &TokenizerConfig::default()).unwrap();
        let y = encode_labels(&Annotation::new("probe", words), &vocab);
        (y, vocab)
    }

    #[test]
    fn bce_zero_logits_is_ln2() {
        let (y, _) = label_vector("alpha", &["alpha", "beta", "gamma", "delta"]);
        let loss = bce_loss(&[0.0; 4], &y).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_logits_vanish() {
        let (y, _) = label_vector("alpha beta", &["alpha", "beta", "gamma", "delta"]);
        let logits = [20.0, 20.0, -20.0, -20.0];
        let loss = bce_loss(&logits, &y).unwrap();
        assert!(loss < 1e-8, "saturated loss {loss}");
    }

    #[test]
    fn bce_two_class_hand_case() {
        // C=2, logits [1, -1], y = [1, 0]:
        // -(1/2)[ln s(1) + ln(1 - s(-1))] = 0.313262
        let (y, _) = label_vector("alpha", &["alpha", "beta"]);
        let loss = bce_loss(&[1.0, -1.0], &y).unwrap();
        assert!((loss - 0.313262).abs() < 1e-6);
        assert!((loss - 0.3132616875182228).abs() < 1e-9);
    }

    #[test]
    fn bce_rejects_length_mismatch() {
        let (y, _) = label_vector("alpha", &["alpha", "beta"]);
        assert!(bce_loss(&[0.0; 3], &y).is_err());
    }

    #[test]
    fn bce_graph_gradient_is_sigma_minus_y_over_c() {
        let (y, _) = label_vector("alpha gamma", &["alpha", "beta", "gamma", "delta"]);
        let logits = [0.7, -1.3, 2.1, 0.05];
        let targets = Tensor::new(vec![1, 4], y.to_f64()).unwrap();
        let mut g = GradGraph::new();
        let l = g.trainable(Tensor::new(vec![1, 4], logits.to_vec()).unwrap());
        let loss = bce_loss_graph(&mut g, l, &targets, None);
        let grads = g.backward(loss).unwrap();
        let grad = grads.get(l);
        for (i, &li) in logits.iter().enumerate() {
            let sigma = 1.0 / (1.0 + (-li).exp());
            let want = (sigma - y.to_f64()[i]) / 4.0;
            assert!(
                (grad.data()[i] - want).abs() < 1e-10,
                "coord {i}: {} vs {want}",
                grad.data()[i]
            );
        }
        // value agrees with the scalar path
        assert!((g.value(loss).item() - bce_loss(&logits, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bce_is_numerically_convex_in_logits() {
        let (y, _) = label_vector("alpha beta", &["alpha", "beta", "gamma"]);
        let mut rng = SeedKey::new(5).stream("convex").rng();
        for _ in 0..200 {
            let a: Vec<f64> = (0..3).map(|_| crate::rng::uniform(&mut rng, -4.0, 4.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| crate::rng::uniform(&mut rng, -4.0, 4.0)).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, z)| 0.5 * (x + z)).collect();
            let la = bce_loss(&a, &y).unwrap();
            let lb = bce_loss(&b, &y).unwrap();
            let lm = bce_loss(&mid, &y).unwrap();
            assert!(lm <= 0.5 * (la + lb) + 1e-12);
        }
    }

    fn tiny_config(n_scenes: usize, epochs: usize) -> DistillConfig {
        let mut scene_params = SceneParams::default();
        scene_params.height = 16;
        scene_params.width = 16;
        DistillConfig {
            epochs,
            batch_size: 8,
            lr0: 1e-3,
            seed: 11,
            vocab_size: 32,
            n_scenes,
            holdout_frac: 0.2,
            scene_params,
        }
    }

    fn tiny_encoder(c: usize, seed: u64) -> StudentEncoder {
        let cfg = EncoderConfig {
            backbone: BackboneKind::Conv,
            height: 16,
            width: 16,
            embed_dim: 16,
            conv_channels: [4, 8, 8],
            attn_heads: 2,
            attn_blocks: 1,
            patch: 4,
            vocab_size: c,
        };
        StudentEncoder::new(cfg, SeedKey::new(seed)).unwrap()
    }

    #[test]
    fn oracle_dataset_is_deterministic_and_labeled() {
        let cfg = tiny_config(40, 1);
        let mut teacher = TeacherClient::synthetic_oracle(0.3);
        let a = build_dataset(&cfg, &mut teacher).unwrap();
        let mut teacher = TeacherClient::synthetic_oracle(0.3);
        let b = build_dataset(&cfg, &mut teacher).unwrap();
        assert_eq!(a.vocab.labels(), b.vocab.labels());
        assert_eq!(a.train.len(), 32);
        assert_eq!(a.heldout.len(), 8);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.rows, y.rows);
            assert_eq!(x.target, y.target);
        }
        // mandatory type+behavior words mean every target has >= 2 bits
        assert!(a.train.iter().all(|s| s.target.count() >= 2));
    }

    #[test]
    fn training_reduces_loss_and_is_bit_deterministic() {
        let cfg = tiny_config(48, 3);
        let mut teacher = TeacherClient::synthetic_oracle(0.3);
        let dataset = build_dataset(&cfg, &mut teacher).unwrap();
        let c = dataset.vocab_size();

        let mut enc1 = tiny_encoder(c, 1);
        let h1 = train_distill(&cfg, &mut enc1, &dataset, None).unwrap();
        assert_eq!(h1.train_loss.len(), 3);
        assert!(h1.train_loss[2] < h1.train_loss[0], "{:?}", h1.train_loss);

        let mut enc2 = tiny_encoder(c, 1);
        let h2 = train_distill(&cfg, &mut enc2, &dataset, None).unwrap();
        assert_eq!(h1.train_loss, h2.train_loss);
        assert_eq!(enc1.store().to_flat(), enc2.store().to_flat());
    }

    #[test]
    fn masked_training_leaves_other_label_columns_untouched() {
        let cfg = tiny_config(32, 1);
        let mut teacher = TeacherClient::synthetic_oracle(0.2);
        let dataset = build_dataset(&cfg, &mut teacher).unwrap();
        let c = dataset.vocab_size();
        let mask = Specialty::HumanPose.label_mask(dataset.vocab.labels());
        assert!(mask.iter().sum::<f64>() >= 2.0);

        let mut enc = tiny_encoder(c, 2);
        train_distill(&cfg, &mut enc, &dataset, Some(&mask)).unwrap();
        // the final head column for any out-of-family label stays zero-init
        let head_w2 = enc
            .store()
            .iter()
            .find(|(name, _)| *name == "head.w2")
            .unwrap()
            .1;
        for (j, &m) in mask.iter().enumerate() {
            let col_norm: f64 = (0..16).map(|r| head_w2.data()[r * c + j].abs()).sum();
            if m == 0.0 {
                assert_eq!(col_norm, 0.0, "column {j} moved despite mask");
            }
        }
    }

    #[test]
    fn replay_teacher_hits_and_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.tsv");
        save_corpus(
            &[Annotation::new("scene-1", "adult crossing the road")],
            &path,
        )
        .unwrap();
        let mut teacher = TeacherClient::replay_from_file(&path).unwrap();
        let ann = teacher.fetch_annotation("scene-1", None).unwrap();
        assert_eq!(ann.text, "adult crossing the road");
        match teacher.fetch_annotation("scene-2", None) {
            Err(Error::CacheMiss(id)) => assert_eq!(id, "scene-2"),
            other => panic!("expected cache miss, got {other:?}"),
        }
    }

    #[test]
    fn expert_bank_requires_nonempty_specialty() {
        let cfg = tiny_config(32, 1);
        let mut teacher = TeacherClient::synthetic_oracle(0.2);
        let dataset = build_dataset(&cfg, &mut teacher).unwrap();
        let err = build_expert_bank(&cfg, &[], &dataset, |i| Ok(tiny_encoder(4, i as u64)));
        assert!(err.is_err());
    }
}
