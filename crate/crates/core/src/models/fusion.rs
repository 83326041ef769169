//! Multimodal fusion heads over per-modality encoder outputs.

use crate::diff::layers::{LayerNorm, Linear, PatchEmbed, PositionalEncoding, TransformerBlock};
use crate::diff::{
    ops, DiffError, Init, LayerSpec, ParamBuilder, ParamId, ParamStore, Real, Tape, Var,
};

type R<T> = Result<T, DiffError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionKind {
    ConcatMlp,
    TemporalVit,
    CrossModalVit,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [
        FusionKind::ConcatMlp,
        FusionKind::TemporalVit,
        FusionKind::CrossModalVit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::ConcatMlp => "concat",
            FusionKind::TemporalVit => "tvit",
            FusionKind::CrossModalVit => "xvit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "concat" | "concat_mlp" => Some(FusionKind::ConcatMlp),
            "tvit" | "temporal_vit" => Some(FusionKind::TemporalVit),
            "xvit" | "crossmodal_vit" => Some(FusionKind::CrossModalVit),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub patch_len: usize,
    pub dropout: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            depth: 2,
            heads: 4,
            mlp_dim: 256,
            patch_len: 10,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub vit: VitConfig,
    pub mlp_hidden: Vec<usize>,
    /// Common temporal grid every modality sequence is resampled to.
    pub seq_len: usize,
    /// Project modality sequences whose width differs from `vit.dim`
    /// before stacking them for the temporal ViT.
    pub project_to_dim: bool,
    pub num_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kind: FusionKind::ConcatMlp,
            vit: VitConfig::default(),
            mlp_hidden: vec![256, 256, 256],
            seq_len: 50,
            project_to_dim: true,
            num_classes: 2,
        }
    }
}

/// Nearest-neighbour source indices mapping a length-`src` sequence onto a
/// length-`dst` grid by sample centres.
pub fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|j| (((j as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1))
        .collect()
}

fn resample<T: Real>(t: &mut Tape<T>, x: Var, len: usize) -> R<Var> {
    let src = t.shape(x)[1];
    if src == len {
        return Ok(x);
    }
    ops::index_time(t, x, &nearest_indices(src, len))
}

#[derive(Clone, Debug)]
pub struct VitTrunk {
    cls: ParamId,
    patch: PatchEmbed,
    pos: PositionalEncoding,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Linear,
    patch_len: usize,
}

impl VitTrunk {
    fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        cfg: &VitConfig,
        in_dim: usize,
        n_patches: usize,
        classes: usize,
    ) -> Self {
        Self {
            cls: pb.param("cls", &[1, cfg.dim], Init::Normal { std: 0.02 }),
            patch: PatchEmbed::new(pb, "patch", cfg.patch_len, in_dim, cfg.dim),
            pos: PositionalEncoding::new(pb, "pos", n_patches + 1, cfg.dim),
            blocks: (0..cfg.depth)
                .map(|i| {
                    TransformerBlock::new(
                        pb,
                        &format!("block{}", i + 1),
                        cfg.dim,
                        cfg.heads,
                        cfg.mlp_dim,
                        cfg.dropout,
                    )
                })
                .collect(),
            norm: LayerNorm::new(pb, "norm", cfg.dim),
            head: Linear::new(pb, "head", cfg.dim, classes),
            patch_len: cfg.patch_len,
        }
    }

    fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<(Var, Vec<Var>)> {
        let len = t.shape(x)[1];
        if !len.is_multiple_of(self.patch_len) {
            return Err(DiffError::PatchLengthIndivisible {
                len,
                patch: self.patch_len,
            });
        }
        let b = t.shape(x)[0];
        let p = self.patch.forward(t, s, x)?;
        let cls = t.param(s, self.cls);
        let d = t.shape(cls)[1];
        let cls = ops::repeat_batch(t, cls, b)?;
        let mut h = ops::concat(t, &[cls, p], 1)?;
        h = self.pos.forward(t, s, h)?;
        let mut attn = Vec::new();
        for blk in &self.blocks {
            let (y, a) = blk.forward(t, s, h)?;
            h = y;
            attn.push(a);
        }
        let c = ops::slice(t, h, 1, 0, 1)?;
        let c = ops::reshape(t, c, &[b, d])?;
        let c = self.norm.forward(t, s, c)?;
        Ok((self.head.forward(t, s, c)?, attn))
    }

    fn specs(&self) -> Vec<LayerSpec> {
        let mut v = vec![self.patch.spec(), self.pos.spec()];
        for b in &self.blocks {
            v.extend(b.specs());
        }
        v.push(self.norm.spec());
        v.push(self.head.spec());
        v
    }
}

/// Per-modality view handed to a fusion head: sequence `(B, T', d)` and
/// pooled `(B, d)`.
#[derive(Clone, Copy, Debug)]
pub struct ModalityFeatures {
    pub sequence: Var,
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub enum FusionHead {
    ConcatMlp {
        hidden: Vec<Linear>,
        out: Linear,
    },
    TemporalVit {
        proj: Vec<Option<Linear>>,
        trunk: VitTrunk,
        seq_len: usize,
    },
    CrossModalVit {
        proj: Vec<Option<Linear>>,
        trunk: VitTrunk,
        seq_len: usize,
    },
}

/// Output of a fusion head; attention weights are empty for the MLP.
pub struct FusionOutput {
    pub logits: Var,
    pub attention: Vec<Var>,
}

impl FusionHead {
    /// `dims` are the embedding widths of the fused modalities, in order.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        cfg: &FusionConfig,
        dims: &[usize],
    ) -> Result<Self, DiffError> {
        let c = cfg.num_classes;
        let vit_dim = cfg.vit.dim;
        if cfg.kind != FusionKind::ConcatMlp && !cfg.seq_len.is_multiple_of(cfg.vit.patch_len) {
            return Err(DiffError::PatchLengthIndivisible {
                len: cfg.seq_len,
                patch: cfg.vit.patch_len,
            });
        }
        pb.scoped("fusion", |pb| {
            let projections = |pb: &mut ParamBuilder<T>, always: bool| -> Vec<Option<Linear>> {
                dims.iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        (always && d != vit_dim)
                            .then(|| Linear::new(pb, &format!("proj{i}"), d, vit_dim))
                    })
                    .collect()
            };
            Ok(match cfg.kind {
                FusionKind::ConcatMlp => {
                    let mut hidden = Vec::new();
                    let mut inp: usize = dims.iter().sum();
                    for (i, &h) in cfg.mlp_hidden.iter().enumerate() {
                        hidden.push(Linear::new(pb, &format!("fc{}", i + 1), inp, h));
                        inp = h;
                    }
                    FusionHead::ConcatMlp {
                        hidden,
                        out: Linear::new(pb, "out", inp, c),
                    }
                }
                FusionKind::TemporalVit => {
                    let proj = projections(pb, cfg.project_to_dim);
                    let width: usize = dims
                        .iter()
                        .zip(&proj)
                        .map(|(&d, p)| if p.is_some() { vit_dim } else { d })
                        .sum();
                    let n = cfg.seq_len / cfg.vit.patch_len;
                    FusionHead::TemporalVit {
                        proj,
                        trunk: VitTrunk::new(pb, &cfg.vit, width, n, c),
                        seq_len: cfg.seq_len,
                    }
                }
                FusionKind::CrossModalVit => {
                    let proj = projections(pb, true);
                    let n = dims.len() * cfg.seq_len / cfg.vit.patch_len;
                    FusionHead::CrossModalVit {
                        proj,
                        trunk: VitTrunk::new(pb, &cfg.vit, vit_dim, n, c),
                        seq_len: cfg.seq_len,
                    }
                }
            })
        })
    }

    fn aligned<T: Real>(
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        proj: &[Option<Linear>],
        feats: &[ModalityFeatures],
        seq_len: usize,
    ) -> R<Vec<Var>> {
        let mut out = Vec::with_capacity(feats.len());
        for (f, p) in feats.iter().zip(proj) {
            let x = match p {
                Some(l) => l.forward(t, s, f.sequence)?,
                None => f.sequence,
            };
            out.push(resample(t, x, seq_len)?);
        }
        Ok(out)
    }

    pub fn forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        feats: &[ModalityFeatures],
    ) -> R<FusionOutput> {
        match self {
            FusionHead::ConcatMlp { hidden, out } => {
                let pooled: Vec<Var> = feats.iter().map(|f| f.pooled).collect();
                let mut h = ops::concat(t, &pooled, 1)?;
                for l in hidden {
                    h = l.forward(t, s, h)?;
                    h = ops::relu(t, h)?;
                }
                Ok(FusionOutput {
                    logits: out.forward(t, s, h)?,
                    attention: Vec::new(),
                })
            }
            FusionHead::TemporalVit {
                proj,
                trunk,
                seq_len,
            } => {
                let xs = Self::aligned(t, s, proj, feats, *seq_len)?;
                let x = ops::concat(t, &xs, 2)?;
                let (logits, attention) = trunk.forward(t, s, x)?;
                Ok(FusionOutput { logits, attention })
            }
            FusionHead::CrossModalVit {
                proj,
                trunk,
                seq_len,
            } => {
                let xs = Self::aligned(t, s, proj, feats, *seq_len)?;
                let x = ops::concat(t, &xs, 1)?;
                let (logits, attention) = trunk.forward(t, s, x)?;
                Ok(FusionOutput { logits, attention })
            }
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        match self {
            FusionHead::ConcatMlp { hidden, out } => {
                let mut v = Vec::new();
                for l in hidden {
                    v.push(l.spec());
                    v.push(LayerSpec::ReLU);
                }
                v.push(out.spec());
                v
            }
            FusionHead::TemporalVit { proj, trunk, .. }
            | FusionHead::CrossModalVit { proj, trunk, .. } => {
                let mut v: Vec<LayerSpec> = proj.iter().flatten().map(Linear::spec).collect();
                v.extend(trunk.specs());
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_grid() {
        assert_eq!(nearest_indices(5, 10), vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        assert_eq!(nearest_indices(150, 50)[..3], [1, 4, 7]);
        assert_eq!(nearest_indices(4, 4), vec![0, 1, 2, 3]);
        assert!(nearest_indices(130, 50).iter().all(|&i| i < 130));
    }
}
