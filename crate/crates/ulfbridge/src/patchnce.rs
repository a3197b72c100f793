//! Patch-level contrastive regularizer on generator encoder features.
//!
//! The same spatial locations are sampled from the source and output
//! feature maps, projected through small per-layer heads, and normalized;
//! the loss is a softmax cross-entropy whose positive is the same-location
//! pair and whose negatives are the other sampled locations of the same
//! slice.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Linear, ParamStore};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PatchNceConfig {
    pub num_patches: usize,
    pub temperature: f64,
    pub proj_dim: usize,
}

impl Default for PatchNceConfig {
    fn default() -> Self {
        PatchNceConfig {
            num_patches: 64,
            temperature: 0.07,
            proj_dim: 64,
        }
    }
}

/// Per-layer two-layer projection heads, trained jointly with the
/// generator.
#[derive(Debug, Clone)]
pub struct PatchProjector<S: Scalar> {
    pub params: ParamStore<S>,
    heads: Vec<(Linear, Linear)>,
}

impl<S: Scalar> PatchProjector<S> {
    pub fn init(tap_channels: &[usize], proj_dim: usize, seed: u64) -> Self {
        let mut rng = rng::rng_for(seed, Stream::ParamInit, 6);
        let mut store = ParamStore::new();
        let heads = tap_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                (
                    Linear::init(&mut store, &mut rng, &format!("p.l{i}.fc1"), c, proj_dim),
                    Linear::init(&mut store, &mut rng, &format!("p.l{i}.fc2"), proj_dim, proj_dim),
                )
            })
            .collect();
        PatchProjector {
            params: store,
            heads,
        }
    }

    fn project(&self, g: &mut Graph<S>, b: &Bound, layer: usize, rows: Var) -> Var {
        let (fc1, fc2) = &self.heads[layer];
        let h = fc1.forward(g, b, rows);
        let h = g.relu(h);
        fc2.forward(g, b, h)
    }
}

/// Draw one flat position set per layer, shared across the batch.
pub fn sample_patch_ids(
    spatial_sizes: &[(usize, usize)],
    num_patches: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if num_patches < 2 {
        return Err(Error::NeedNegatives);
    }
    let mut out = Vec::with_capacity(spatial_sizes.len());
    for (layer, &(h, w)) in spatial_sizes.iter().enumerate() {
        let total = h * w;
        if num_patches > total {
            return Err(Error::TooManyPatches {
                requested: num_patches,
                available: total,
            });
        }
        let mut rng = rng::rng_for(seed, Stream::PatchIds, layer as u64);
        let mut ids: Vec<usize> = (0..total).collect();
        ids.shuffle(&mut rng);
        ids.truncate(num_patches);
        out.push(ids);
    }
    Ok(out)
}

/// Sample, project, and L2-normalize patch features from per-layer NCHW
/// feature maps. Pass `patch_ids` to reuse the locations sampled for the
/// source image; otherwise fresh ids are drawn from `seed`.
///
/// Returns one (N * num_patches, proj_dim) unit-row matrix per layer plus
/// the ids used.
pub fn sample_patch_features<S: Scalar>(
    g: &mut Graph<S>,
    features: &[Var],
    projector: &PatchProjector<S>,
    bound: &Bound,
    patch_ids: Option<&[Vec<usize>]>,
    num_patches: usize,
    seed: u64,
) -> Result<(Vec<Var>, Vec<Vec<usize>>)> {
    if features.is_empty() {
        return Err(Error::Shape("no feature layers".into()));
    }
    let sizes: Vec<(usize, usize)> = features
        .iter()
        .map(|&f| {
            let sh = g.value(f).shape();
            (sh[2], sh[3])
        })
        .collect();
    let ids: Vec<Vec<usize>> = match patch_ids {
        Some(ids) => {
            if ids.len() != features.len() {
                return Err(Error::Shape("patch id layer count mismatch".into()));
            }
            ids.to_vec()
        }
        None => sample_patch_ids(&sizes, num_patches, seed)?,
    };
    let mut out = Vec::with_capacity(features.len());
    for (layer, &f) in features.iter().enumerate() {
        let rows = g.gather_spatial(f, ids[layer].clone());
        let proj = projector.project(g, bound, layer, rows);
        out.push(g.row_l2_normalize(proj, 1e-12));
    }
    Ok((out, ids))
}

/// Contrastive loss over per-layer unit-row feature matrices of shape
/// (batch * P, D). Cross-sample pairs are excluded by masking, so negatives
/// come only from the same slice.
pub fn patchnce_loss<S: Scalar>(
    g: &mut Graph<S>,
    feat_src: &[Var],
    feat_out: &[Var],
    temperature: f64,
    batch: usize,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    if feat_src.len() != feat_out.len() || feat_src.is_empty() {
        return Err(Error::Shape("feature layer count mismatch".into()));
    }
    let mut acc: Option<Var> = None;
    for (&fs, &fo) in feat_src.iter().zip(feat_out.iter()) {
        let (rows, _d) = {
            let sh = g.value(fs).shape();
            (sh[0], sh[1])
        };
        if g.value(fo).shape() != g.value(fs).shape() {
            return Err(Error::Shape("src/out feature shapes differ".into()));
        }
        if rows % batch != 0 {
            return Err(Error::Shape("rows not divisible by batch".into()));
        }
        let p = rows / batch;
        if p < 2 {
            return Err(Error::NeedNegatives);
        }
        let st = g.transpose2(fs);
        let logits = g.matmul(fo, st);
        let logits = g.mul_scalar(logits, S::from_f64c(1.0 / temperature));
        let logits = if batch > 1 {
            // push cross-sample logits to -inf so negatives stay within-slice
            let mut mask = ArrayD::<S>::zeros(IxDyn(&[rows, rows]));
            let neg = S::from_f64c(-1e9);
            for i in 0..rows {
                for j in 0..rows {
                    if i / p != j / p {
                        mask[[i, j]] = neg;
                    }
                }
            }
            let mv = g.constant(mask);
            g.add(logits, mv)
        } else {
            logits
        };
        let targets: Vec<usize> = (0..rows).collect();
        let ce = g.cross_entropy_rows(logits, targets);
        acc = Some(match acc {
            None => ce,
            Some(a) => g.add(a, ce),
        });
    }
    let total = acc.unwrap();
    Ok(g.mul_scalar(total, S::from_f64c(1.0 / feat_src.len() as f64)))
}
