//! Unimodal and fused classifiers assembled from encoders and heads.

pub mod encoders;
pub mod fusion;

use crate::diff::layers::Linear;
use crate::diff::{
    ops, DiffError, LayerSpec, ParamBuilder, ParamGroup, ParamStore, Real, Tape, Var,
};
use crate::segmentation::N_CHANNELS;

pub use encoders::{
    AccelArch, AccelEncoder, AccelTransformer, AccelTransformerConfig, DeepConvLstm,
    DeepConvLstmConfig, EdaAeConfig, EdaAutoencoder, EncoderOutput, ResNet1d, ResNetConfig,
    TempCnn, TempCnnConfig,
};
pub use fusion::{FusionConfig, FusionHead, FusionKind, FusionOutput, ModalityFeatures, VitConfig};

type R<T> = Result<T, DiffError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Acc,
    Eda,
    Temp,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Acc, Modality::Eda, Modality::Temp];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Acc => "acc",
            Modality::Eda => "eda",
            Modality::Temp => "temp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "acc" | "accel" => Some(Modality::Acc),
            "eda" => Some(Modality::Eda),
            "temp" | "tsk" => Some(Modality::Temp),
            _ => None,
        }
    }

    /// `(first, count)` of this modality's channels in a window.
    pub fn channels(self) -> (usize, usize) {
        match self {
            Modality::Acc => (0, 3),
            Modality::Eda => (3, 1),
            Modality::Temp => (4, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Unimodal(Modality),
    Fused(FusionKind),
}

impl ModelKind {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            ModelKind::Unimodal(m) => vec![m],
            ModelKind::Fused(_) => Modality::ALL.to_vec(),
        }
    }

    pub fn label(self) -> String {
        match self {
            ModelKind::Unimodal(m) => m.as_str().to_string(),
            ModelKind::Fused(f) => f.as_str().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub accel_arch: AccelArch,
    pub resnet: ResNetConfig,
    pub dclstm: DeepConvLstmConfig,
    pub transformer: AccelTransformerConfig,
    pub eda: EdaAeConfig,
    pub temp: TempCnnConfig,
    /// Also carries the class count used by unimodal heads.
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, accel_arch: AccelArch, num_classes: usize) -> Self {
        let mut fusion = FusionConfig {
            num_classes,
            ..FusionConfig::default()
        };
        if let ModelKind::Fused(k) = kind {
            fusion.kind = k;
        }
        Self {
            kind,
            accel_arch,
            resnet: ResNetConfig::default(),
            dclstm: DeepConvLstmConfig::default(),
            transformer: AccelTransformerConfig::default(),
            eda: EdaAeConfig::default(),
            temp: TempCnnConfig::default(),
            fusion,
        }
    }

    /// Tiny widths for a window of `len` samples (a multiple of 10), used
    /// by gradient checks.
    pub fn miniature(
        kind: ModelKind,
        accel_arch: AccelArch,
        num_classes: usize,
        len: usize,
    ) -> Self {
        let mut c = Self::new(kind, accel_arch, num_classes);
        c.resnet = ResNetConfig {
            in_ch: 3,
            stem_ch: 3,
            stem_kernel: 3,
            blocks: vec![4, 4],
        };
        c.dclstm = DeepConvLstmConfig {
            in_ch: 3,
            conv_ch: 3,
            n_conv: 2,
            kernel: 3,
            hidden: 4,
            lstm_layers: 2,
        };
        c.transformer = AccelTransformerConfig {
            in_ch: 3,
            patch_len: len / 5,
            max_patches: 5,
            dim: 4,
            depth: 1,
            heads: 2,
            mlp_dim: 6,
            dropout: 0.0,
        };
        c.eda = EdaAeConfig {
            channels: vec![1, 2, 3],
            dec_kernels: EdaAeConfig::kernels_for(len, 2),
            embed: 3,
        };
        c.temp = TempCnnConfig {
            channels: vec![1, 2, 3],
            kernels: vec![5, 3],
        };
        c.fusion.vit = VitConfig {
            dim: 4,
            depth: 1,
            heads: 2,
            mlp_dim: 6,
            patch_len: 2,
            dropout: 0.0,
        };
        c.fusion.seq_len = 4;
        c.fusion.mlp_hidden = vec![5, 5];
        c
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Linear(Linear),
    Fusion(FusionHead),
}

/// A classifier over `(B, L, 5)` windows.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub acc: Option<AccelEncoder>,
    pub eda: Option<EdaAutoencoder>,
    pub temp: Option<TempCnn>,
    pub head: Head,
}

/// Per-modality encoder outputs in `Model::modalities` order.
pub struct Encoded {
    pub outputs: Vec<(Modality, EncoderOutput)>,
}

impl Encoded {
    pub fn get(&self, m: Modality) -> Option<&EncoderOutput> {
        self.outputs.iter().find(|(k, _)| *k == m).map(|(_, o)| o)
    }

    pub fn features(&self) -> Vec<ModalityFeatures> {
        self.outputs
            .iter()
            .map(|(_, o)| ModalityFeatures {
                sequence: o.sequence,
                pooled: o.pooled,
            })
            .collect()
    }
}

pub struct ModelOutput {
    pub logits: Var,
    pub encoded: Encoded,
    pub attention: Vec<Var>,
}

impl Model {
    /// Registers all parameters in `store`; encoders land in the backbone
    /// group and heads in the head group.
    pub fn build<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> R<Self> {
        let mut pb = ParamBuilder::new(store, seed);
        pb.set_group(ParamGroup::Backbone);
        let mods = cfg.kind.modalities();
        let acc = mods.contains(&Modality::Acc).then(|| match cfg.accel_arch {
            AccelArch::ResNet => AccelEncoder::ResNet(ResNet1d::new(&mut pb, &cfg.resnet)),
            AccelArch::DeepConvLstm => {
                AccelEncoder::DeepConvLstm(DeepConvLstm::new(&mut pb, &cfg.dclstm))
            }
            AccelArch::Transformer => {
                AccelEncoder::Transformer(AccelTransformer::new(&mut pb, &cfg.transformer))
            }
        });
        let eda = mods
            .contains(&Modality::Eda)
            .then(|| EdaAutoencoder::new(&mut pb, &cfg.eda));
        let temp = mods
            .contains(&Modality::Temp)
            .then(|| TempCnn::new(&mut pb, &cfg.temp));
        pb.set_group(ParamGroup::Head);
        let head = match cfg.kind {
            ModelKind::Unimodal(m) => {
                let d = match m {
                    Modality::Acc => acc.as_ref().unwrap().dim(),
                    Modality::Eda => eda.as_ref().unwrap().dim(),
                    Modality::Temp => temp.as_ref().unwrap().dim(),
                };
                Head::Linear(pb.scoped("head", |pb| {
                    Linear::new(pb, "out", d, cfg.fusion.num_classes)
                }))
            }
            ModelKind::Fused(_) => {
                let dims = [
                    acc.as_ref().unwrap().dim(),
                    eda.as_ref().unwrap().dim(),
                    temp.as_ref().unwrap().dim(),
                ];
                Head::Fusion(FusionHead::new(&mut pb, &cfg.fusion, &dims)?)
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            acc,
            eda,
            temp,
            head,
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.cfg.kind.modalities()
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.fusion.num_classes
    }

    fn check_input<T: Real>(t: &Tape<T>, x: Var) -> R<()> {
        let s = t.shape(x);
        if s.len() != 3 || s[2] != N_CHANNELS {
            return Err(DiffError::ShapeMismatch {
                layer: "model input".into(),
                expected: vec![N_CHANNELS],
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Runs every encoder on its channel slice of `x: (B, L, 5)`.
    pub fn encode<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<Encoded> {
        Self::check_input(t, x)?;
        let mut outputs = Vec::new();
        for m in self.modalities() {
            let (c0, n) = m.channels();
            let xm = ops::slice(t, x, 2, c0, n)?;
            let o = match m {
                Modality::Acc => self.acc.as_ref().unwrap().forward(t, s, xm)?,
                Modality::Eda => self.eda.as_ref().unwrap().forward(t, s, xm)?,
                Modality::Temp => self.temp.as_ref().unwrap().forward(t, s, xm)?,
            };
            outputs.push((m, o));
        }
        Ok(Encoded { outputs })
    }

    /// Classifier head over (possibly substituted) modality features.
    pub fn head_forward<T: Real>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        feats: &[ModalityFeatures],
    ) -> R<FusionOutput> {
        match &self.head {
            Head::Linear(l) => Ok(FusionOutput {
                logits: l.forward(t, s, feats[0].pooled)?,
                attention: Vec::new(),
            }),
            Head::Fusion(f) => f.forward(t, s, feats),
        }
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<ModelOutput> {
        let encoded = self.encode(t, s, x)?;
        let out = self.head_forward(t, s, &encoded.features())?;
        Ok(ModelOutput {
            logits: out.logits,
            encoded,
            attention: out.attention,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        if let Some(a) = &self.acc {
            v.extend(a.specs());
        }
        if let Some(e) = &self.eda {
            v.extend(e.specs());
        }
        if let Some(tc) = &self.temp {
            v.extend(tc.specs());
        }
        match &self.head {
            Head::Linear(l) => v.push(l.spec()),
            Head::Fusion(f) => v.extend(f.specs()),
        }
        v
    }

    /// One line per layer, used as the checkpoint architecture manifest.
    pub fn architecture(&self) -> String {
        let mut s = format!(
            "kind={} accel={}\n",
            self.cfg.kind.label(),
            self.cfg.accel_arch.as_str()
        );
        for spec in self.specs() {
            s.push_str(&spec.to_string());
            s.push('\n');
        }
        s
    }
}

/// Finite-difference check of a miniature model's full parameter gradient
/// under cross-entropy on a random `(3, len, 5)` batch.
pub fn miniature_gradcheck(
    kind: ModelKind,
    arch: AccelArch,
    len: usize,
    seed: u64,
) -> R<crate::diff::gradcheck::GradCheckReport> {
    use crate::diff::gradcheck::{check_gradients, GradCheckOptions};
    use crate::diff::Tensor;
    use rand::{Rng, SeedableRng};

    let cfg = ModelConfig::miniature(kind, arch, 3, len);
    let mut store = ParamStore::<f64>::new();
    let model = Model::build(&cfg, &mut store, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let b = 3;
    let data: Vec<f64> = (0..b * len * N_CHANNELS)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x = Tensor::from_f64(&[b, len, N_CHANNELS], &data);
    let labels = [0usize, 1, 2];
    let opts = GradCheckOptions {
        h: 1e-6,
        abs_floor: 1e-5,
        max_coords_per_param: 6,
        seed,
        ..GradCheckOptions::default()
    };
    check_gradients(
        &mut store,
        |t, s| {
            let xv = t.constant(x.clone());
            let out = model.forward(t, s, xv)?;
            ops::softmax_cross_entropy(t, out.logits, &labels)
        },
        &opts,
    )
}
