//! Miniature ViT-style classifier: patch embedding, pre-norm attention
//! blocks with residuals, and three classification-head variants.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParameterSet;
use crate::rng::{substream, tag};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    /// Class token only.
    Cls,
    /// Average-pooled visual tokens only.
    Vis,
    /// Class token concatenated with the pooled visual tokens.
    ClsVis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub head_type: HeadType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale default, small enough for finite-difference checks.
        ModelConfig {
            image_h: 16,
            image_w: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            num_heads: 4,
            depth: 2,
            num_classes: 10,
            head_type: HeadType::Cls,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_h > 0
            && self.image_w > 0
            && self.channels > 0
            && self.patch_size > 0
            && self.embed_dim > 0
            && self.num_heads > 0
            && self.depth > 0
            && self.num_classes > 0;
        if !ok {
            return Err(Error::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch size {} does not divide image {}x{}",
                self.patch_size, self.image_h, self.image_w
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Number of patches N.
    pub fn num_patches(&self) -> usize {
        (self.image_h * self.image_w) / (self.patch_size * self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn head_feature_dim(&self) -> usize {
        match self.head_type {
            HeadType::Cls | HeadType::Vis => self.embed_dim,
            HeadType::ClsVis => 2 * self.embed_dim,
        }
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Rejection-sample a standard normal truncated at two sigmas.
    loop {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| trunc_normal(rng, std)).collect())
}

/// Build a freshly initialized parameter set. Deterministic in `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = substream(seed, &[tag::INIT]);
    let (d, n) = (cfg.embed_dim, cfg.num_patches());
    let mut p = ParameterSet::new();
    let std = 0.02;

    p.insert("embed.weight", init_tensor(&mut rng, vec![cfg.patch_dim(), d], std));
    p.insert("embed.bias", Tensor::zeros(vec![d]));
    p.insert("cls", init_tensor(&mut rng, vec![1, d], std));
    p.insert("pos", init_tensor(&mut rng, vec![n + 1, d], std));

    for l in 0..cfg.depth {
        let pre = format!("blocks.{l}");
        p.insert(&format!("{pre}.ln1.gamma"), Tensor::new(vec![d], vec![1.0; d]));
        p.insert(&format!("{pre}.ln1.beta"), Tensor::zeros(vec![d]));
        p.insert(
            &format!("{pre}.attn.qkv.weight"),
            init_tensor(&mut rng, vec![d, 3 * d], std),
        );
        p.insert(&format!("{pre}.attn.qkv.bias"), Tensor::zeros(vec![3 * d]));
        p.insert(
            &format!("{pre}.attn.proj.weight"),
            init_tensor(&mut rng, vec![d, d], std),
        );
        p.insert(&format!("{pre}.attn.proj.bias"), Tensor::zeros(vec![d]));
        p.insert(&format!("{pre}.ln2.gamma"), Tensor::new(vec![d], vec![1.0; d]));
        p.insert(&format!("{pre}.ln2.beta"), Tensor::zeros(vec![d]));
        p.insert(
            &format!("{pre}.mlp.fc1.weight"),
            init_tensor(&mut rng, vec![d, 4 * d], std),
        );
        p.insert(&format!("{pre}.mlp.fc1.bias"), Tensor::zeros(vec![4 * d]));
        p.insert(
            &format!("{pre}.mlp.fc2.weight"),
            init_tensor(&mut rng, vec![4 * d, d], std),
        );
        p.insert(&format!("{pre}.mlp.fc2.bias"), Tensor::zeros(vec![d]));
    }

    let hd = cfg.head_feature_dim();
    p.insert("head.ln.gamma", Tensor::new(vec![hd], vec![1.0; hd]));
    p.insert("head.ln.beta", Tensor::zeros(vec![hd]));
    p.insert(
        "head.fc.weight",
        init_tensor(&mut rng, vec![hd, cfg.num_classes], std),
    );
    p.insert("head.fc.bias", Tensor::zeros(vec![cfg.num_classes]));
    p.set_last_layer(vec!["head.fc.bias".into(), "head.fc.weight".into()]);
    Ok(p)
}

/// Node ids of every parameter inside one graph.
struct ParamNodes {
    ids: std::collections::BTreeMap<String, NodeId>,
}

impl ParamNodes {
    fn insert_all(g: &mut Graph, params: &ParameterSet) -> Self {
        let ids = params
            .iter()
            .map(|(name, t)| (name.clone(), g.param(name, t.clone())))
            .collect();
        ParamNodes { ids }
    }

    fn get(&self, name: &str) -> NodeId {
        self.ids[name]
    }
}

/// One batch forward pass with handles into the live graph.
pub struct Forward {
    pub graph: Graph,
    pub loss: NodeId,
    pub logits: NodeId,
    /// Image leaf per sample, for input gradients.
    pub image_nodes: Vec<NodeId>,
    /// Per sample, per block: output token matrix node.
    pub block_outputs: Vec<Vec<NodeId>>,
}

fn linear(g: &mut Graph, x: NodeId, p: &ParamNodes, prefix: &str) -> Result<NodeId> {
    let h = g.matmul(x, p.get(&format!("{prefix}.weight")))?;
    g.add_row(h, p.get(&format!("{prefix}.bias")))
}

fn encoder_block(
    g: &mut Graph,
    z: NodeId,
    p: &ParamNodes,
    pre: &str,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let d = cfg.embed_dim;
    let dh = d / cfg.num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let ln1 = g.layer_norm(
        z,
        p.get(&format!("{pre}.ln1.gamma")),
        p.get(&format!("{pre}.ln1.beta")),
        LN_EPS,
    )?;
    let qkv = linear(g, ln1, p, &format!("{pre}.attn.qkv"))?;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for i in 0..cfg.num_heads {
        let q = g.narrow_cols(qkv, i * dh, dh);
        let k = g.narrow_cols(qkv, d + i * dh, dh);
        let v = g.narrow_cols(qkv, 2 * d + i * dh, dh);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, scale);
        let att = g.softmax(scaled);
        heads.push(g.matmul(att, v)?);
    }
    let merged = g.concat_cols(&heads)?;
    let proj = linear(g, merged, p, &format!("{pre}.attn.proj"))?;
    let z1 = g.add(z, proj)?;

    let ln2 = g.layer_norm(
        z1,
        p.get(&format!("{pre}.ln2.gamma")),
        p.get(&format!("{pre}.ln2.beta")),
        LN_EPS,
    )?;
    let h1 = linear(g, ln2, p, &format!("{pre}.mlp.fc1"))?;
    let act = g.gelu(h1);
    let h2 = linear(g, act, p, &format!("{pre}.mlp.fc2"))?;
    g.add(z1, h2)
}

fn classify(g: &mut Graph, tokens: NodeId, p: &ParamNodes, cfg: &ModelConfig) -> Result<NodeId> {
    let n = cfg.num_patches();
    let feat = match cfg.head_type {
        HeadType::Cls => g.narrow_rows(tokens, 0, 1),
        HeadType::Vis => {
            let vis = g.narrow_rows(tokens, 1, n);
            g.mean_rows(vis)
        }
        HeadType::ClsVis => {
            let cls = g.narrow_rows(tokens, 0, 1);
            let vis = g.narrow_rows(tokens, 1, n);
            let pooled = g.mean_rows(vis);
            g.concat_cols(&[cls, pooled])?
        }
    };
    let normed = g.layer_norm(feat, p.get("head.ln.gamma"), p.get("head.ln.beta"), LN_EPS)?;
    linear(g, normed, p, "head.fc")
}

fn forward_sample(
    g: &mut Graph,
    p: &ParamNodes,
    cfg: &ModelConfig,
    image: &Tensor,
) -> Result<(NodeId, NodeId, Vec<NodeId>)> {
    let img = g.leaf(image.clone());
    let patches = g.patchify(img, cfg.image_h, cfg.image_w, cfg.channels, cfg.patch_size)?;
    let embedded = linear(g, patches, p, "embed")?;
    let with_cls = g.concat_rows(&[p.get("cls"), embedded])?;
    let mut z = g.add(with_cls, p.get("pos"))?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        z = encoder_block(g, z, p, &format!("blocks.{l}"), cfg)?;
        blocks.push(z);
    }
    let logits = classify(g, z, p, cfg)?;
    Ok((img, logits, blocks))
}

/// Full pipeline over a batch: patch embed, encoder blocks, head,
/// cross-entropy. Returns the live graph for `backward`.
pub fn forward_loss(cfg: &ModelConfig, params: &ParameterSet, batch: &[(Tensor, usize)]) -> Result<Forward> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut g = Graph::new();
    let p = ParamNodes::insert_all(&mut g, params);
    let mut image_nodes = Vec::with_capacity(batch.len());
    let mut logit_rows = Vec::with_capacity(batch.len());
    let mut block_outputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (image, label) in batch {
        let (img, logits, blocks) = forward_sample(&mut g, &p, cfg, image)?;
        image_nodes.push(img);
        logit_rows.push(logits);
        block_outputs.push(blocks);
        labels.push(*label);
    }
    let logits = g.concat_rows(&logit_rows)?;
    let loss = g.cross_entropy(logits, &labels)?;
    Ok(Forward {
        graph: g,
        loss,
        logits,
        image_nodes,
        block_outputs,
    })
}

/// Logits for a single image without building a loss node.
pub fn logits(cfg: &ModelConfig, params: &ParameterSet, image: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = ParamNodes::insert_all(&mut g, params);
    let (_, logits, _) = forward_sample(&mut g, &p, cfg, image)?;
    Ok(g.value(logits).data().to_vec())
}
