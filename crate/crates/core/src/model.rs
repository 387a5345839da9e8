//! The multi-task network: a U-Net segmentation backbone and a patch
//! classification arm attached to the encoder bottleneck.
//!
//! ```text
//! patch ─ enc0 ─ pool ─ enc1 ─ … ─ pool ─ bottleneck ─ up/cat/dec … ─ 1×1 ─ sigmoid
//!                                              │
//!                                              └─ [pool ─ conv ─ conv] ×2 ─ fc1024 ─ fc256 ─ out(2)
//! ```

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::domain::Raster;
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, join, max_pool2, max_pool2_backward, sigmoid, split_channels, Conv2d, ConvTranspose2x2, DoubleConv,
    DoubleConvCache, Linear, Module, Param, Tensor,
};

pub const CHECKPOINT_FORMAT: &str = "fiberseg-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub out_channels: usize,
    /// Side of the square training patches fed to the classification arm.
    pub patch_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 3,
            base_width: 16,
            depth: 4,
            out_channels: 1,
            patch_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// The 2-node output layer.
    OutNodes,
    /// Pre-activation of the last hidden layer.
    Fc256,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct ClassifierArmConfig {
    pub pool_blocks: usize,
    pub fc_sizes: Vec<usize>,
    pub out_nodes: usize,
    pub embedding_source: EmbeddingSource,
}

impl Default for ClassifierArmConfig {
    fn default() -> Self {
        ClassifierArmConfig {
            pool_blocks: 2,
            fc_sizes: vec![1024, 256],
            out_nodes: 2,
            embedding_source: EmbeddingSource::OutNodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default, JsonSchema)]
#[serde(default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub arm: ClassifierArmConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let u = &self.unet;
        if u.depth < 2 {
            return Err(Error::Invalid(format!("U-Net depth must be >= 2, got {}", u.depth)));
        }
        if u.in_channels != 3 || u.out_channels != 1 {
            return Err(Error::Invalid("model expects 3 input channels and 1 output channel".into()));
        }
        if u.base_width == 0 {
            return Err(Error::Invalid("base_width must be positive".into()));
        }
        let a = &self.arm;
        if a.pool_blocks != 2 {
            return Err(Error::Invalid(format!("classifier arm needs exactly 2 pool blocks, got {}", a.pool_blocks)));
        }
        if a.fc_sizes.is_empty() || a.out_nodes == 0 {
            return Err(Error::Invalid("classifier arm needs hidden layers and outputs".into()));
        }
        let div = 1usize << (u.depth + a.pool_blocks);
        if u.patch_size == 0 || u.patch_size % div != 0 {
            return Err(Error::Invalid(format!(
                "patch_size {} must be a multiple of {div} (2^(depth + pool_blocks))",
                u.patch_size
            )));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.unet.base_width << self.unet.depth
    }

    pub fn embedding_dim(&self) -> usize {
        match self.arm.embedding_source {
            EmbeddingSource::OutNodes => self.arm.out_nodes,
            EmbeddingSource::Fc256 => *self.arm.fc_sizes.last().expect("validated"),
        }
    }

    /// Spatial dims must be multiples of this for the segmentation path.
    pub fn size_multiple(&self) -> usize {
        1 << self.unet.depth
    }
}

#[derive(Debug, Clone)]
struct ClassifierArm {
    blocks: Vec<DoubleConv>,
    hidden: Vec<Linear>,
    out: Linear,
}

/// The full parameter set of the multi-task model.
#[derive(Debug, Clone)]
pub struct MultiTaskNet {
    config: ModelConfig,
    /// `depth + 1` blocks; the last one is the bottleneck.
    enc: Vec<DoubleConv>,
    ups: Vec<ConvTranspose2x2>,
    dec: Vec<DoubleConv>,
    head: Conv2d,
    arm: ClassifierArm,
}

/// Alias used by the trainer and checkpoint API.
pub type ModelParams = MultiTaskNet;

struct EncoderCache {
    pooled: Vec<Tensor>,
    pool_args: Vec<Vec<u8>>,
    blocks: Vec<DoubleConvCache>,
}

impl EncoderCache {
    fn bottleneck(&self) -> &Tensor {
        &self.blocks.last().expect("nonempty").out
    }
}

pub struct SegCache {
    input: Tensor,
    enc: EncoderCache,
    up_in: Vec<Tensor>,
    cat: Vec<Tensor>,
    dec: Vec<DoubleConvCache>,
}

pub struct ClassCache {
    input: Tensor,
    enc: EncoderCache,
    pooled: Vec<Tensor>,
    pool_args: Vec<Vec<u8>>,
    blocks: Vec<DoubleConvCache>,
    flat: Tensor,
    /// Post-ReLU hidden activations except the last, which is kept pre-ReLU.
    hidden: Vec<Tensor>,
    last_act: Tensor,
}

impl MultiTaskNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = config.unet;
        let w = u.base_width;
        let mut enc = Vec::with_capacity(u.depth + 1);
        enc.push(DoubleConv::new(u.in_channels, w, &mut rng));
        for i in 1..=u.depth {
            enc.push(DoubleConv::new(w << (i - 1), w << i, &mut rng));
        }
        let mut ups = Vec::with_capacity(u.depth);
        let mut dec = Vec::with_capacity(u.depth);
        for i in 0..u.depth {
            ups.push(ConvTranspose2x2::new(w << (i + 1), w << i, &mut rng));
            dec.push(DoubleConv::new(w << (i + 1), w << i, &mut rng));
        }
        let head = Conv2d::new(w, u.out_channels, 1, &mut rng);

        let cb = config.bottleneck_channels();
        let blocks = (0..config.arm.pool_blocks).map(|_| DoubleConv::new(cb, cb, &mut rng)).collect();
        let side = u.patch_size >> (u.depth + config.arm.pool_blocks);
        let mut fan_in = cb * side * side;
        let mut hidden = Vec::new();
        for &f in &config.arm.fc_sizes {
            hidden.push(Linear::new(fan_in, f, &mut rng));
            fan_in = f;
        }
        let out = Linear::new(fan_in, config.arm.out_nodes, &mut rng);
        Ok(MultiTaskNet {
            config,
            enc,
            ups,
            dec,
            head,
            arm: ClassifierArm { blocks, hidden, out },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor, need_patch: bool) -> Result<()> {
        let m = self.config.size_multiple();
        if x.c() != self.config.unet.in_channels {
            return Err(Error::shape(format!("{} channels", self.config.unet.in_channels), x.c()));
        }
        if x.h() == 0 || x.w() == 0 || x.h() % m != 0 || x.w() % m != 0 {
            return Err(Error::shape(format!("spatial dims divisible by {m}"), format!("{}x{}", x.h(), x.w())));
        }
        let p = self.config.unet.patch_size;
        if need_patch && (x.h() != p || x.w() != p) {
            return Err(Error::shape(format!("{p}x{p} patch"), format!("{}x{}", x.h(), x.w())));
        }
        Ok(())
    }

    fn encode_eval(&self, x: &Tensor) -> Vec<Tensor> {
        let mut outs = Vec::with_capacity(self.enc.len());
        outs.push(self.enc[0].forward_eval(x));
        for block in &self.enc[1..] {
            let (p, _) = max_pool2(outs.last().expect("nonempty"));
            outs.push(block.forward_eval(&p));
        }
        outs
    }

    fn encode_train(&mut self, x: &Tensor) -> EncoderCache {
        let mut blocks = Vec::with_capacity(self.enc.len());
        let mut pooled = Vec::new();
        let mut pool_args = Vec::new();
        blocks.push(self.enc[0].forward_train(x));
        for i in 1..self.enc.len() {
            let (p, arg) = max_pool2(&blocks[i - 1].out);
            let c = self.enc[i].forward_train(&p);
            pooled.push(p);
            pool_args.push(arg);
            blocks.push(c);
        }
        EncoderCache {
            pooled,
            pool_args,
            blocks,
        }
    }

    /// `level_grads[i]` is the gradient arriving at encoder output `i`
    /// (skip connections and, for the last level, the bottleneck consumers).
    fn encode_backward(&mut self, input: &Tensor, cache: &EncoderCache, mut level_grads: Vec<Option<Tensor>>) {
        let depth = self.enc.len() - 1;
        let mut g = level_grads[depth].take().expect("bottleneck gradient");
        for i in (1..=depth).rev() {
            let dp = self.enc[i]
                .backward(&cache.pooled[i - 1], &cache.blocks[i], g, true)
                .expect("requested");
            let mut d = max_pool2_backward(cache.blocks[i - 1].out.shape, &cache.pool_args[i - 1], &dp);
            if let Some(skip) = level_grads[i - 1].take() {
                d.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
            }
            g = d;
        }
        self.enc[0].backward(input, &cache.blocks[0], g, false);
    }

    /// Segmentation logits `[n, 1, h, w]` in evaluation mode.
    pub fn seg_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, false)?;
        let skips = self.encode_eval(x);
        let mut h = skips.last().expect("nonempty").clone();
        for i in (0..self.ups.len()).rev() {
            let u = self.ups[i].forward(&h);
            h = self.dec[i].forward_eval(&concat_channels(&u, &skips[i]));
        }
        Ok(self.head.forward(&h))
    }

    /// Per-pixel fiber probabilities `[n, 1, h, w]`.
    pub fn seg_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.seg_logits(x)?;
        y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(y)
    }

    pub fn seg_forward_train(&mut self, x: &Tensor) -> Result<(Tensor, SegCache)> {
        self.check_input(x, false)?;
        let enc = self.encode_train(x);
        let mut h = enc.bottleneck().clone();
        let mut up_in = Vec::with_capacity(self.ups.len());
        let mut cats = Vec::with_capacity(self.ups.len());
        let mut decs = Vec::with_capacity(self.ups.len());
        for i in (0..self.ups.len()).rev() {
            let u = self.ups[i].forward(&h);
            let cat = concat_channels(&u, &enc.blocks[i].out);
            let d = self.dec[i].forward_train(&cat);
            up_in.push(std::mem::replace(&mut h, d.out.clone()));
            cats.push(cat);
            decs.push(d);
        }
        let logits = self.head.forward(&h);
        Ok((
            logits,
            SegCache {
                input: x.clone(),
                enc,
                up_in,
                cat: cats,
                dec: decs,
            },
        ))
    }

    pub fn seg_backward(&mut self, cache: SegCache, dlogits: &Tensor) {
        let depth = self.ups.len();
        let last = &cache.dec.last().expect("nonempty").out;
        let mut g = self.head.backward(last, dlogits, true).expect("requested");
        let mut level_grads: Vec<Option<Tensor>> = vec![None; depth + 1];
        // Decoder caches were pushed from the deepest level upward.
        for i in 0..depth {
            let step = depth - 1 - i;
            let dcat = self.dec[i]
                .backward(&cache.cat[step], &cache.dec[step], g, true)
                .expect("requested");
            let up_ch = self.ups[i].out_ch;
            let (du, dskip) = split_channels(&dcat, up_ch);
            level_grads[i] = Some(dskip);
            g = self.ups[i].backward(&cache.up_in[step], &du);
        }
        level_grads[depth] = Some(g);
        self.encode_backward(&cache.input, &cache.enc, level_grads);
    }

    fn arm_forward_eval(&self, bottleneck: &Tensor) -> Tensor {
        let mut h = bottleneck.clone();
        for b in &self.arm.blocks {
            let (p, _) = max_pool2(&h);
            h = b.forward_eval(&p);
        }
        let n = h.n();
        let mut a = Tensor::from_vec([n, h.sample_len(), 1, 1], h.data);
        let last = self.arm.hidden.len() - 1;
        for (j, l) in self.arm.hidden.iter().enumerate() {
            let z = l.forward(&a);
            if j == last && self.config.arm.embedding_source == EmbeddingSource::Fc256 {
                return z;
            }
            a = z;
            a.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        self.arm.out.forward(&a)
    }

    /// Classification-arm embeddings, one row per patch.
    pub fn class_forward(&self, x: &Tensor) -> Result<Vec<Vec<f32>>> {
        self.check_input(x, true)?;
        let skips = self.encode_eval(x);
        let emb = self.arm_forward_eval(skips.last().expect("nonempty"));
        Ok(emb.data.chunks(emb.sample_len()).map(<[f32]>::to_vec).collect())
    }

    /// Training-mode embeddings `[n, dim, 1, 1]`.
    pub fn class_forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ClassCache)> {
        self.check_input(x, true)?;
        let enc = self.encode_train(x);
        let mut h = enc.bottleneck().clone();
        let mut pooled = Vec::new();
        let mut pool_args = Vec::new();
        let mut blocks = Vec::new();
        for b in self.arm.blocks.iter_mut() {
            let (p, arg) = max_pool2(&h);
            let c = b.forward_train(&p);
            h = c.out.clone();
            pooled.push(p);
            pool_args.push(arg);
            blocks.push(c);
        }
        let n = h.n();
        let flat = Tensor::from_vec([n, h.sample_len(), 1, 1], h.data);
        let mut hidden = Vec::new();
        let mut a = flat.clone();
        let last = self.arm.hidden.len() - 1;
        let mut last_act = Tensor::zeros([0, 0, 0, 0]);
        for (j, l) in self.arm.hidden.iter().enumerate() {
            let z = l.forward(&a);
            if j == last {
                last_act = z.clone();
            }
            a = z;
            a.data.iter_mut().for_each(|v| *v = v.max(0.0));
            if j != last {
                hidden.push(a.clone());
            }
        }
        let emb = match self.config.arm.embedding_source {
            EmbeddingSource::Fc256 => last_act.clone(),
            EmbeddingSource::OutNodes => self.arm.out.forward(&a),
        };
        Ok((
            emb,
            ClassCache {
                input: x.clone(),
                enc,
                pooled,
                pool_args,
                blocks,
                flat,
                hidden,
                last_act,
            },
        ))
    }

    pub fn class_backward(&mut self, cache: ClassCache, demb: &Tensor) {
        let last = self.arm.hidden.len() - 1;
        // Gradient at the pre-activation of the last hidden layer.
        let mut dz = match self.config.arm.embedding_source {
            EmbeddingSource::Fc256 => demb.clone(),
            EmbeddingSource::OutNodes => {
                let mut post = cache.last_act.clone();
                post.data.iter_mut().for_each(|v| *v = v.max(0.0));
                let mut d = self.arm.out.backward(&post, demb);
                for (g, &z) in d.data.iter_mut().zip(&cache.last_act.data) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
                d
            }
        };
        for j in (0..=last).rev() {
            let input = if j == 0 { &cache.flat } else { &cache.hidden[j - 1] };
            let mut d = self.arm.hidden[j].backward(input, &dz);
            if j > 0 {
                for (g, &a) in d.data.iter_mut().zip(&cache.hidden[j - 1].data) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            dz = d;
        }
        let out_shape = cache.blocks.last().expect("two blocks").out.shape;
        let mut g = Tensor::from_vec(out_shape, dz.data);
        for k in (0..self.arm.blocks.len()).rev() {
            let dp = self.arm.blocks[k]
                .backward(&cache.pooled[k], &cache.blocks[k], g, true)
                .expect("requested");
            let in_shape = if k == 0 {
                cache.enc.bottleneck().shape
            } else {
                cache.blocks[k - 1].out.shape
            };
            g = max_pool2_backward(in_shape, &cache.pool_args[k], &dp);
        }
        let mut level_grads: Vec<Option<Tensor>> = vec![None; self.enc.len()];
        *level_grads.last_mut().expect("nonempty") = Some(g);
        self.encode_backward(&cache.input, &cache.enc, level_grads);
    }

    /// Sets the output layer (or the last hidden layer, for `Fc256`) to zero.
    pub fn zero_embedding_layer(&mut self) {
        let layer = match self.config.arm.embedding_source {
            EmbeddingSource::OutNodes => &mut self.arm.out,
            EmbeddingSource::Fc256 => self.arm.hidden.last_mut().expect("nonempty"),
        };
        layer.weight.value.iter_mut().for_each(|v| *v = 0.0);
        layer.bias.value.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Whole-image fiber probability. The image is reflect-padded to the
    /// required size multiple and the output cropped back.
    pub fn predict_image(&self, image: &RgbImage) -> Result<Raster<f32>> {
        let (h, w) = (image.height() as usize, image.width() as usize);
        let m = self.config.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let x = image_to_tensor(image, 0, 0, ph, pw);
        let y = self.seg_forward(&x)?;
        Ok(Raster::from_fn(h, w, |r, c| y.data[r * pw + c]))
    }

    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.clone())));
        out
    }

    /// Hash of the configuration plus every parameter's name and shape.
    pub fn structure_fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        serde_json::to_string(&self.config).expect("config serializes").hash(&mut hasher);
        self.visit("", &mut |name, p| {
            name.hash(&mut hasher);
            p.shape.hash(&mut hasher);
        });
        hasher.finish()
    }

    /// True when every parameter and buffer is bit-identical.
    pub fn params_equal(&self, other: &MultiTaskNet) -> bool {
        self.config == other.config && self.named_params() == other.named_params()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let named = self.named_params();
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = named
            .iter()
            .map(|(n, p)| (n.clone(), p.shape.clone(), p.value.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .map(|(n, shape, data)| {
                safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), data)
                    .map(|v| (n.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, e))?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert(
            "config".to_string(),
            serde_json::to_string(&self.config).map_err(|e| Error::format(path, e))?,
        );
        let buf = safetensors::serialize(views, Some(meta)).map_err(|e| Error::format(path, e))?;
        crate::io::ensure_parent(path)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let st = safetensors::SafeTensors::deserialize(&buf).map_err(|e| corrupt(e.to_string()))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&buf).map_err(|e| corrupt(e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| corrupt("missing metadata".into()))?;
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(corrupt("not a fiberseg checkpoint".into()));
        }
        let version = meta.get("version").cloned().unwrap_or_default();
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION.into(),
            });
        }
        let config: ModelConfig = serde_json::from_str(meta.get("config").ok_or_else(|| corrupt("missing config".into()))?)
            .map_err(|e| corrupt(e.to_string()))?;
        let mut net = MultiTaskNet::new(config, 0)?;
        let mut failure = None;
        net.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match st.tensor(name) {
                Ok(t) if t.dtype() == safetensors::Dtype::F32 && t.shape() == p.shape.as_slice() => {
                    for (dst, chunk) in p.value.iter_mut().zip(t.data().chunks_exact(4)) {
                        *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                    }
                }
                Ok(_) => failure = Some(format!("tensor {name} has unexpected dtype or shape")),
                Err(e) => failure = Some(format!("tensor {name}: {e}")),
            }
        });
        match failure {
            Some(reason) => Err(corrupt(reason)),
            None => Ok(net),
        }
    }
}

impl Module for MultiTaskNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.enc.iter().enumerate() {
            b.visit(&join(prefix, &format!("enc.{i}")), f);
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.visit(&join(prefix, &format!("up.{i}")), f);
        }
        for (i, d) in self.dec.iter().enumerate() {
            d.visit(&join(prefix, &format!("dec.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
        for (i, b) in self.arm.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("arm.block.{i}")), f);
        }
        for (i, l) in self.arm.hidden.iter().enumerate() {
            l.visit(&join(prefix, &format!("arm.fc.{i}")), f);
        }
        self.arm.out.visit(&join(prefix, "arm.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("enc.{i}")), f);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("up.{i}")), f);
        }
        for (i, d) in self.dec.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("dec.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
        for (i, b) in self.arm.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("arm.block.{i}")), f);
        }
        for (i, l) in self.arm.hidden.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("arm.fc.{i}")), f);
        }
        self.arm.out.visit_mut(&join(prefix, "arm.out"), f);
    }
}

/// Copies an image window into a `[1, 3, h, w]` tensor scaled to [0, 1],
/// reflecting at the image borders.
pub fn image_to_tensor(image: &RgbImage, row: isize, col: isize, h: usize, w: usize) -> Tensor {
    let (ih, iw) = (image.height() as isize, image.width() as isize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    let hw = h * w;
    for r in 0..h {
        let sr = reflect(row + r as isize, ih);
        for c in 0..w {
            let sc = reflect(col + c as isize, iw);
            let p = image.get_pixel(sc as u32, sr as u32).0;
            for ch in 0..3 {
                t.data[ch * hw + r * w + c] = p[ch] as f32 / 255.0;
            }
        }
    }
    t
}

pub(crate) fn reflect(i: isize, n: isize) -> isize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    if m < n {
        m
    } else {
        period - m
    }
}

/// Stacks single-sample tensors along the batch axis.
pub fn stack(samples: &[Tensor]) -> Tensor {
    let first = samples.first().expect("nonempty batch");
    let mut shape = first.shape;
    shape[0] = samples.iter().map(Tensor::n).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        assert_eq!(s.shape[1..], first.shape[1..], "stack: mismatched sample shapes");
        data.extend_from_slice(&s.data);
    }
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            unet: UNetConfig {
                base_width: 4,
                depth: 2,
                patch_size: 16,
                ..Default::default()
            },
            arm: ClassifierArmConfig {
                fc_sizes: vec![8, 6],
                ..Default::default()
            },
        }
    }

    fn rand_input(n: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([n, 3, side, side], (0..n * 3 * side * side).map(|_| rng.random()).collect())
    }

    #[test]
    fn seg_output_range_and_shape() {
        let net = MultiTaskNet::new(tiny_config(), 1).unwrap();
        let y = net.seg_forward(&rand_input(2, 16, 2)).unwrap();
        assert_eq!(y.shape, [2, 1, 16, 16]);
        assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let y2 = net.seg_forward(&rand_input(2, 16, 2)).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = MultiTaskNet::new(tiny_config(), 1).unwrap();
        assert!(net.seg_forward(&rand_input(1, 10, 0)).is_err());
        assert!(net.class_forward(&rand_input(1, 32, 0)).is_err());
        assert!(MultiTaskNet::new(
            ModelConfig {
                unet: UNetConfig {
                    depth: 1,
                    ..Default::default()
                },
                ..Default::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn embedding_dims() {
        let mut cfg = tiny_config();
        let net = MultiTaskNet::new(cfg.clone(), 3).unwrap();
        assert_eq!(net.class_forward(&rand_input(3, 16, 4)).unwrap()[0].len(), 2);
        cfg.arm.embedding_source = EmbeddingSource::Fc256;
        let net = MultiTaskNet::new(cfg, 3).unwrap();
        assert_eq!(net.class_forward(&rand_input(3, 16, 4)).unwrap()[0].len(), 6);
    }

    #[test]
    fn zeroed_output_layer_gives_zero_embedding() {
        let mut net = MultiTaskNet::new(tiny_config(), 3).unwrap();
        net.zero_embedding_layer();
        for e in net.class_forward(&rand_input(2, 16, 4)).unwrap() {
            assert!(e.iter().all(|&v| v == 0.0));
        }
    }

    // Finite-difference check of the network's parameter gradients in
    // training mode against a random linear functional of the outputs.
    // Batch norm over tiny batches and ReLU/max-pool kinks make the
    // segmentation path strongly curved, hence its looser tolerance.
    fn check_network_gradients(seg_weight: f32, emb_weight: f32, abs_tol: f64, rel_tol: f64) {
        let cfg = tiny_config();
        let base = MultiTaskNet::new(cfg, 11).unwrap();
        let x = rand_input(3, 16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let r_seg: Vec<f32> = (0..3 * 16 * 16).map(|_| seg_weight * rng.random_range(-1.0..1.0)).collect();
        let r_emb: Vec<f32> = (0..3 * 2).map(|_| emb_weight * rng.random_range(-1.0..1.0)).collect();
        let loss = |net: &MultiTaskNet| -> f64 {
            let mut n = net.clone();
            let (y, _) = n.seg_forward_train(&x).unwrap();
            let (e, _) = n.class_forward_train(&x).unwrap();
            y.data.iter().zip(&r_seg).map(|(a, b)| (a * b) as f64).sum::<f64>()
                + e.data.iter().zip(&r_emb).map(|(a, b)| (a * b) as f64).sum::<f64>()
        };
        let mut net = base.clone();
        let (y, sc) = net.seg_forward_train(&x).unwrap();
        net.seg_backward(sc, &Tensor::from_vec(y.shape, r_seg.clone()));
        let (e, cc) = net.class_forward_train(&x).unwrap();
        net.class_backward(cc, &Tensor::from_vec(e.shape, r_emb.clone()));
        let grads = net.named_params();

        let mut checked = 0;
        for (name, p) in &grads {
            if !p.trainable {
                continue;
            }
            let idx = p.len() / 2;
            let h = 3e-4f32;
            let perturbed = |delta: f32| {
                let mut n = base.clone();
                n.visit_mut("", &mut |nm, q| {
                    if nm == name {
                        q.value[idx] += delta;
                    }
                });
                loss(&n)
            };
            let num = (perturbed(h) - perturbed(-h)) / (2.0 * h as f64);
            let ana = p.grad[idx] as f64;
            assert!(
                (num - ana).abs() <= abs_tol + rel_tol * ana.abs(),
                "{name}[{idx}]: numeric {num} vs analytic {ana}"
            );
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn segmentation_gradients_match_finite_differences() {
        check_network_gradients(1.0, 0.0, 0.05, 0.2);
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        check_network_gradients(0.0, 1.0, 1e-3, 0.02);
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        check_network_gradients(1.0, 1.0, 0.05, 0.2);
    }

    #[test]
    fn perturbing_encoder_weight_changes_both_heads() {
        let net = MultiTaskNet::new(tiny_config(), 5).unwrap();
        let x = rand_input(2, 16, 6);
        let s0 = net.seg_forward(&x).unwrap();
        let c0 = net.class_forward(&x).unwrap();
        let mut p = net.clone();
        p.visit_mut("", &mut |name, q| {
            if name == "enc.0.0.conv.weight" {
                q.value[0] += 1e-2;
            }
        });
        assert_ne!(p.seg_forward(&x).unwrap(), s0);
        assert_ne!(p.class_forward(&x).unwrap(), c0);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let net = MultiTaskNet::new(tiny_config(), 7).unwrap();
        net.save_checkpoint(&path).unwrap();
        let back = MultiTaskNet::load_checkpoint(&path).unwrap();
        assert!(back.params_equal(&net));
        assert_eq!(back.structure_fingerprint(), net.structure_fingerprint());

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            MultiTaskNet::load_checkpoint(&path),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-3, 1), 0);
    }
}
