//! Per-modality encoders. Each maps `(B, L, c_in)` to a temporal feature
//! sequence `(B, T', d)` and a pooled embedding `(B, d)`.

use crate::diff::layers::{
    BatchNorm1d, Conv1d, ConvTranspose1d, LayerNorm, Linear, Lstm, PatchEmbed, PositionalEncoding,
    TransformerBlock,
};
use crate::diff::{ops, DiffError, LayerSpec, ParamBuilder, ParamStore, Real, Tape, Var};

/// Output of an encoder pass.
pub struct EncoderOutput {
    pub sequence: Var,
    pub pooled: Var,
    /// Activation map of the last convolutional layer, when the encoder
    /// has one (Grad-CAM target).
    pub last_conv: Option<Var>,
}

type R<T> = Result<T, DiffError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ResNetConfig {
    pub in_ch: usize,
    pub stem_ch: usize,
    pub stem_kernel: usize,
    /// Output channels of each residual block; every block halves the
    /// sequence length.
    pub blocks: Vec<usize>,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self {
            in_ch: 3,
            stem_ch: 32,
            stem_kernel: 7,
            blocks: vec![64, 96, 128, 128],
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv1d,
    bn1: BatchNorm1d,
    conv2: Conv1d,
    bn2: BatchNorm1d,
    skip: Conv1d,
}

impl ResBlock {
    fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize) -> Self {
        pb.scoped(name, |pb| Self {
            conv1: Conv1d::new(pb, "conv1", cin, cout, 3, 2, 1),
            bn1: BatchNorm1d::new(pb, "bn1", cout),
            conv2: Conv1d::new(pb, "conv2", cout, cout, 3, 1, 1),
            bn2: BatchNorm1d::new(pb, "bn2", cout),
            skip: Conv1d::new(pb, "skip", cin, cout, 1, 2, 0),
        })
    }

    fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<Var> {
        let h = self.conv1.forward(t, s, x)?;
        let h = self.bn1.forward(t, s, h)?;
        let h = ops::relu(t, h)?;
        let h = self.conv2.forward(t, s, h)?;
        let h = self.bn2.forward(t, s, h)?;
        let sk = self.skip.forward(t, s, x)?;
        let y = ops::add(t, h, sk)?;
        ops::relu(t, y)
    }

    fn specs(&self) -> Vec<LayerSpec> {
        vec![
            self.conv1.spec(),
            self.bn1.spec(),
            LayerSpec::ReLU,
            self.conv2.spec(),
            self.bn2.spec(),
            self.skip.spec(),
            LayerSpec::ReLU,
        ]
    }
}

/// ResNet-style 1D CNN for acceleration.
#[derive(Clone, Debug)]
pub struct ResNet1d {
    pub cfg: ResNetConfig,
    stem: Conv1d,
    stem_bn: BatchNorm1d,
    blocks: Vec<ResBlock>,
}

impl ResNet1d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, cfg: &ResNetConfig) -> Self {
        pb.scoped("resnet", |pb| {
            let stem = Conv1d::new(
                pb,
                "stem",
                cfg.in_ch,
                cfg.stem_ch,
                cfg.stem_kernel,
                2,
                cfg.stem_kernel / 2,
            );
            let stem_bn = BatchNorm1d::new(pb, "stem_bn", cfg.stem_ch);
            let mut blocks = Vec::new();
            let mut cin = cfg.stem_ch;
            for (i, &c) in cfg.blocks.iter().enumerate() {
                blocks.push(ResBlock::new(pb, &format!("block{}", i + 1), cin, c));
                cin = c;
            }
            Self {
                cfg: cfg.clone(),
                stem,
                stem_bn,
                blocks,
            }
        })
    }

    pub fn dim(&self) -> usize {
        *self.cfg.blocks.last().unwrap_or(&self.cfg.stem_ch)
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<EncoderOutput> {
        let h = self.stem.forward(t, s, x)?;
        let h = self.stem_bn.forward(t, s, h)?;
        let mut h = ops::relu(t, h)?;
        for b in &self.blocks {
            h = b.forward(t, s, h)?;
        }
        let pooled = ops::mean_time(t, h)?;
        Ok(EncoderOutput {
            sequence: h,
            pooled,
            last_conv: Some(h),
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut v = vec![self.stem.spec(), self.stem_bn.spec(), LayerSpec::ReLU];
        for b in &self.blocks {
            v.extend(b.specs());
        }
        v.push(LayerSpec::GlobalAvgPool);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepConvLstmConfig {
    pub in_ch: usize,
    pub conv_ch: usize,
    pub n_conv: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
}

impl Default for DeepConvLstmConfig {
    fn default() -> Self {
        Self {
            in_ch: 3,
            conv_ch: 64,
            n_conv: 5,
            kernel: 5,
            hidden: 128,
            lstm_layers: 2,
        }
    }
}

/// Stacked valid convolutions followed by stacked LSTMs; the last hidden
/// state is the pooled embedding.
#[derive(Clone, Debug)]
pub struct DeepConvLstm {
    pub cfg: DeepConvLstmConfig,
    convs: Vec<Conv1d>,
    lstms: Vec<Lstm>,
}

impl DeepConvLstm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, cfg: &DeepConvLstmConfig) -> Self {
        pb.scoped("dclstm", |pb| {
            let mut convs = Vec::new();
            let mut cin = cfg.in_ch;
            for i in 0..cfg.n_conv {
                convs.push(Conv1d::new(
                    pb,
                    &format!("conv{}", i + 1),
                    cin,
                    cfg.conv_ch,
                    cfg.kernel,
                    1,
                    0,
                ));
                cin = cfg.conv_ch;
            }
            let mut lstms = Vec::new();
            for i in 0..cfg.lstm_layers {
                lstms.push(Lstm::new(pb, &format!("lstm{}", i + 1), cin, cfg.hidden));
                cin = cfg.hidden;
            }
            Self {
                cfg: cfg.clone(),
                convs,
                lstms,
            }
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.hidden
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<EncoderOutput> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(t, s, h)?;
            h = ops::relu(t, h)?;
        }
        let last_conv = h;
        let mut last = h;
        for l in &self.lstms {
            let o = l.forward(t, s, h)?;
            h = o.sequence;
            last = o.last;
        }
        Ok(EncoderOutput {
            sequence: h,
            pooled: last,
            last_conv: Some(last_conv),
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.push(c.spec());
            v.push(LayerSpec::ReLU);
        }
        v.extend(self.lstms.iter().map(Lstm::spec));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccelTransformerConfig {
    pub in_ch: usize,
    pub patch_len: usize,
    pub max_patches: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
}

impl Default for AccelTransformerConfig {
    fn default() -> Self {
        Self {
            in_ch: 3,
            patch_len: 15,
            max_patches: 10,
            dim: 128,
            depth: 2,
            heads: 4,
            mlp_dim: 256,
            dropout: 0.0,
        }
    }
}

/// Patch transformer over acceleration.
#[derive(Clone, Debug)]
pub struct AccelTransformer {
    pub cfg: AccelTransformerConfig,
    patch: PatchEmbed,
    pos: PositionalEncoding,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl AccelTransformer {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, cfg: &AccelTransformerConfig) -> Self {
        pb.scoped("transformer", |pb| Self {
            cfg: cfg.clone(),
            patch: PatchEmbed::new(pb, "patch", cfg.patch_len, cfg.in_ch, cfg.dim),
            pos: PositionalEncoding::new(pb, "pos", cfg.max_patches, cfg.dim),
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
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Also returns the attention weights of every block.
    pub fn forward_with_attention<T: Real>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> R<(EncoderOutput, Vec<Var>)> {
        let h = self.patch.forward(t, s, x)?;
        let mut h = self.pos.forward(t, s, h)?;
        let mut attn = Vec::new();
        for b in &self.blocks {
            let (y, a) = b.forward(t, s, h)?;
            h = y;
            attn.push(a);
        }
        let h = self.norm.forward(t, s, h)?;
        let pooled = ops::mean_time(t, h)?;
        Ok((
            EncoderOutput {
                sequence: h,
                pooled,
                last_conv: None,
            },
            attn,
        ))
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<EncoderOutput> {
        Ok(self.forward_with_attention(t, s, x)?.0)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut v = vec![self.patch.spec(), self.pos.spec()];
        for b in &self.blocks {
            v.extend(b.specs());
        }
        v.push(self.norm.spec());
        v.push(LayerSpec::GlobalAvgPool);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdaAeConfig {
    /// Channel progression including the input channel.
    pub channels: Vec<usize>,
    /// Transposed-convolution kernels of the decoder, deepest first; chosen
    /// so the decoder restores the input length exactly.
    pub dec_kernels: Vec<usize>,
    pub embed: usize,
}

impl Default for EdaAeConfig {
    fn default() -> Self {
        Self {
            channels: vec![1, 4, 8, 16, 32, 64],
            dec_kernels: vec![3, 2, 3, 3, 2],
            embed: 64,
        }
    }
}

impl EdaAeConfig {
    /// Decoder kernels that invert floor pooling for input length `len`:
    /// a stride-2 transposed conv maps `m` to `2m - 2 + k`.
    pub fn kernels_for(len: usize, stages: usize) -> Vec<usize> {
        let mut lens = vec![len];
        for _ in 0..stages {
            lens.push(lens.last().unwrap() / 2);
        }
        (0..stages)
            .rev()
            .map(|i| lens[i] + 2 - 2 * lens[i + 1])
            .collect()
    }
}

/// Convolutional autoencoder over tonic EDA.
#[derive(Clone, Debug)]
pub struct EdaAutoencoder {
    pub cfg: EdaAeConfig,
    convs: Vec<Conv1d>,
    bns: Vec<BatchNorm1d>,
    proj: Linear,
    deconvs: Vec<ConvTranspose1d>,
}

impl EdaAutoencoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, cfg: &EdaAeConfig) -> Self {
        assert_eq!(cfg.dec_kernels.len() + 1, cfg.channels.len());
        pb.scoped("eda_ae", |pb| {
            let mut convs = Vec::new();
            let mut bns = Vec::new();
            for (i, w) in cfg.channels.windows(2).enumerate() {
                convs.push(Conv1d::new(
                    pb,
                    &format!("conv{}", i + 1),
                    w[0],
                    w[1],
                    3,
                    1,
                    1,
                ));
                bns.push(BatchNorm1d::new(pb, &format!("bn{}", i + 1), w[1]));
            }
            let top = *cfg.channels.last().unwrap();
            let proj = Linear::new(pb, "proj", top, cfg.embed);
            let mut deconvs = Vec::new();
            let rev: Vec<usize> = cfg.channels.iter().rev().copied().collect();
            for (i, (w, &k)) in rev.windows(2).zip(&cfg.dec_kernels).enumerate() {
                deconvs.push(ConvTranspose1d::new(
                    pb,
                    &format!("deconv{}", i + 1),
                    w[0],
                    w[1],
                    k,
                    2,
                ));
            }
            Self {
                cfg: cfg.clone(),
                convs,
                bns,
                proj,
                deconvs,
            }
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.embed
    }

    fn encode_map<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<Var> {
        let mut h = x;
        for (c, bn) in self.convs.iter().zip(&self.bns) {
            h = c.forward(t, s, h)?;
            h = bn.forward(t, s, h)?;
            h = ops::relu(t, h)?;
            h = ops::max_pool1d(t, h, 2, 2)?;
        }
        Ok(h)
    }

    /// The sequence is the per-step projection of the deepest feature map,
    /// so its time mean equals the projection of the global average pool.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<EncoderOutput> {
        let h = self.encode_map(t, s, x)?;
        let sequence = self.proj.forward(t, s, h)?;
        let gap = ops::mean_time(t, h)?;
        let pooled = self.proj.forward(t, s, gap)?;
        Ok(EncoderOutput {
            sequence,
            pooled,
            last_conv: Some(h),
        })
    }

    /// Encoder followed by the decoder; output shape equals input shape.
    pub fn reconstruct<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<Var> {
        let mut h = self.encode_map(t, s, x)?;
        let n = self.deconvs.len();
        for (i, d) in self.deconvs.iter().enumerate() {
            h = d.forward(t, s, h)?;
            if i + 1 < n {
                h = ops::relu(t, h)?;
            }
        }
        Ok(h)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        for (c, bn) in self.convs.iter().zip(&self.bns) {
            v.extend([
                c.spec(),
                bn.spec(),
                LayerSpec::ReLU,
                LayerSpec::MaxPool1D {
                    kernel: 2,
                    stride: 2,
                },
            ]);
        }
        v.push(LayerSpec::GlobalAvgPool);
        v.push(self.proj.spec());
        v.extend(self.deconvs.iter().map(ConvTranspose1d::spec));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TempCnnConfig {
    /// Channel progression including the input channel.
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl Default for TempCnnConfig {
    fn default() -> Self {
        Self {
            channels: vec![1, 16, 32, 64],
            kernels: vec![7, 5, 3],
        }
    }
}

/// Three same-padded convolutions and average pooling over temperature.
#[derive(Clone, Debug)]
pub struct TempCnn {
    pub cfg: TempCnnConfig,
    convs: Vec<Conv1d>,
}

impl TempCnn {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, cfg: &TempCnnConfig) -> Self {
        assert_eq!(cfg.kernels.len() + 1, cfg.channels.len());
        pb.scoped("temp_cnn", |pb| Self {
            cfg: cfg.clone(),
            convs: cfg
                .channels
                .windows(2)
                .zip(&cfg.kernels)
                .enumerate()
                .map(|(i, (w, &k))| {
                    Conv1d::new(pb, &format!("conv{}", i + 1), w[0], w[1], k, 1, k / 2)
                })
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        *self.cfg.channels.last().unwrap()
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<EncoderOutput> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(t, s, h)?;
            h = ops::relu(t, h)?;
        }
        let pooled = ops::mean_time(t, h)?;
        Ok(EncoderOutput {
            sequence: h,
            pooled,
            last_conv: Some(h),
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.push(c.spec());
            v.push(LayerSpec::ReLU);
        }
        v.push(LayerSpec::GlobalAvgPool);
        v
    }
}

/// Accelerometer encoder choice.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Copy)]
pub enum AccelArch {
    ResNet,
    DeepConvLstm,
    Transformer,
}

impl AccelArch {
    pub fn as_str(self) -> &'static str {
        match self {
            AccelArch::ResNet => "resnet",
            AccelArch::DeepConvLstm => "dclstm",
            AccelArch::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "resnet" => Some(AccelArch::ResNet),
            "dclstm" | "deepconvlstm" => Some(AccelArch::DeepConvLstm),
            "transformer" => Some(AccelArch::Transformer),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum AccelEncoder {
    ResNet(ResNet1d),
    DeepConvLstm(DeepConvLstm),
    Transformer(AccelTransformer),
}

impl AccelEncoder {
    pub fn dim(&self) -> usize {
        match self {
            AccelEncoder::ResNet(e) => e.dim(),
            AccelEncoder::DeepConvLstm(e) => e.dim(),
            AccelEncoder::Transformer(e) => e.dim(),
        }
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> R<EncoderOutput> {
        match self {
            AccelEncoder::ResNet(e) => e.forward(t, s, x),
            AccelEncoder::DeepConvLstm(e) => e.forward(t, s, x),
            AccelEncoder::Transformer(e) => e.forward(t, s, x),
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        match self {
            AccelEncoder::ResNet(e) => e.specs(),
            AccelEncoder::DeepConvLstm(e) => e.specs(),
            AccelEncoder::Transformer(e) => e.specs(),
        }
    }
}
