//! Dataset generation, IDX-format ingestion, and client partitioning.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Labeled image collection with all pixels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<(Tensor, usize)>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_set(&self) -> std::collections::BTreeSet<usize> {
        self.examples.iter().map(|(_, y)| *y).collect()
    }
}

/// How to split the global dataset across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    /// Each client holds samples from exactly `classes_per_client` classes.
    ClassRestricted { classes_per_client: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub kind: PartitionKind,
    pub seed: u64,
}

/// Gaussian blob classes rendered into [0,1] images via a fixed affine
/// squash of the latent space. Desk-scale stand-in for a natural dataset.
pub fn generate_blobs(
    num_classes: usize,
    shape: (usize, usize, usize),
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || n_per_class == 0 {
        return Err(Error::Config("blob counts must be positive".into()));
    }
    let (h, w, c) = shape;
    let dim = h * w * c;
    let mut rng = substream(seed, &[tag::DATA_GEN]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let mut examples = Vec::with_capacity(num_classes * n_per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let data: Vec<f64> = center
                .iter()
                .map(|&m| squash(m + spread * normal(&mut rng)))
                .collect();
            examples.push((Tensor::new(vec![h, w, c], data), label));
        }
    }
    Ok(Dataset {
        examples,
        num_classes,
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Affine map from the latent scale into [0,1], clamped at the edges.
fn squash(v: f64) -> f64 {
    (0.5 + v / 8.0).clamp(0.0, 1.0)
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    if at + 4 > bytes.len() {
        return Err(Error::Truncated {
            needed: at + 4,
            had: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

/// Load an IDX image/label file pair (big-endian, standard magics).
/// Pixels are scaled to [0,1] by dividing by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let mut lbl_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;

    let magic = read_u32_be(&img_bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_IMAGE_MAGIC,
        });
    }
    let n = read_u32_be(&img_bytes, 4)? as usize;
    let rows = read_u32_be(&img_bytes, 8)? as usize;
    let cols = read_u32_be(&img_bytes, 12)? as usize;
    let needed = 16 + n * rows * cols;
    if img_bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            had: img_bytes.len(),
        });
    }

    let lmagic = read_u32_be(&lbl_bytes, 0)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            found: lmagic,
            expected: IDX_LABEL_MAGIC,
        });
    }
    let ln = read_u32_be(&lbl_bytes, 4)? as usize;
    if ln != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: ln,
        });
    }
    if lbl_bytes.len() < 8 + ln {
        return Err(Error::Truncated {
            needed: 8 + ln,
            had: lbl_bytes.len(),
        });
    }

    let mut examples = Vec::with_capacity(n);
    let mut max_label = 0usize;
    for i in 0..n {
        let start = 16 + i * rows * cols;
        let data: Vec<f64> = img_bytes[start..start + rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        let label = lbl_bytes[8 + i] as usize;
        max_label = max_label.max(label);
        examples.push((Tensor::new(vec![rows, cols, 1], data), label));
    }
    Ok(Dataset {
        examples,
        num_classes: max_label + 1,
    })
}

/// Split the dataset into K disjoint shards whose union is the input.
pub fn partition(ds: &Dataset, k: usize, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    assert!(k >= 1, "need at least one client");
    match spec.kind {
        PartitionKind::Iid => {
            let mut indices: Vec<usize> = (0..ds.len()).collect();
            indices.shuffle(&mut substream(spec.seed, &[tag::PARTITION]));
            let base = ds.len() / k;
            let extra = ds.len() % k;
            let mut shards = Vec::with_capacity(k);
            let mut at = 0;
            for i in 0..k {
                let take = base + usize::from(i < extra);
                let examples = indices[at..at + take]
                    .iter()
                    .map(|&j| ds.examples[j].clone())
                    .collect();
                shards.push(Dataset {
                    examples,
                    num_classes: ds.num_classes,
                });
                at += take;
            }
            Ok(shards)
        }
        PartitionKind::ClassRestricted { classes_per_client } => {
            let m = ds.num_classes;
            if classes_per_client > m || classes_per_client * k < m {
                return Err(Error::InfeasiblePartition {
                    clients: k,
                    classes_per_client,
                    num_classes: m,
                });
            }
            let mut rng = substream(spec.seed, &[tag::PARTITION]);
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut rng);
            // Client k holds the contiguous cyclic window of length c starting
            // at position k*c of the permutation; windows cover every class.
            let holders_of: Vec<Vec<usize>> = {
                let mut holders = vec![Vec::new(); m];
                for client in 0..k {
                    for j in 0..classes_per_client {
                        let class = perm[(client * classes_per_client + j) % m];
                        holders[class].push(client);
                    }
                }
                holders
            };
            let mut shard_examples: Vec<Vec<(Tensor, usize)>> = vec![Vec::new(); k];
            for class in 0..m {
                let mut members: Vec<usize> = ds
                    .examples
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, y))| *y == class)
                    .map(|(i, _)| i)
                    .collect();
                members.shuffle(&mut rng);
                let holders = &holders_of[class];
                if holders.is_empty() {
                    continue;
                }
                let base = members.len() / holders.len();
                let extra = members.len() % holders.len();
                let mut at = 0;
                for (hi, &client) in holders.iter().enumerate() {
                    let take = base + usize::from(hi < extra);
                    for &idx in &members[at..at + take] {
                        shard_examples[client].push(ds.examples[idx].clone());
                    }
                    at += take;
                }
            }
            Ok(shard_examples
                .into_iter()
                .map(|examples| Dataset {
                    examples,
                    num_classes: ds.num_classes,
                })
                .collect())
        }
    }
}
