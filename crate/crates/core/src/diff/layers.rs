//! Parameterized layers. Each layer owns [`ParamId`]s into a
//! [`ParamStore`] and records its forward pass on a [`Tape`].

use std::fmt;

use super::ops;
use super::params::{BufferId, Init, ParamBuilder, ParamId, ParamStore};
use super::tape::{Mode, Tape, Var};
use super::tensor::{Real, Tensor};
use super::DiffError;

/// Layer catalog; also the manifest entry written into checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv1D {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm1D {
        ch: usize,
        eps: f64,
        momentum: f64,
    },
    MaxPool1D {
        kernel: usize,
        stride: usize,
    },
    TransposedConv1D {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    Linear {
        inp: usize,
        out: usize,
    },
    ReLU,
    Lstm {
        input: usize,
        hidden: usize,
    },
    LayerNorm {
        dim: usize,
        eps: f64,
    },
    MultiHeadSelfAttention {
        dim: usize,
        heads: usize,
    },
    PatchEmbed {
        patch_len: usize,
        in_dim: usize,
        embed_dim: usize,
    },
    PositionalEncoding {
        max_len: usize,
        dim: usize,
    },
    GlobalAvgPool,
    Dropout {
        p: f64,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv1D {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "Conv1D({in_ch},{out_ch},k={kernel},s={stride},p={padding})"
            ),
            LayerSpec::BatchNorm1D { ch, eps, momentum } => {
                write!(f, "BatchNorm1D({ch},eps={eps},m={momentum})")
            }
            LayerSpec::MaxPool1D { kernel, stride } => {
                write!(f, "MaxPool1D(k={kernel},s={stride})")
            }
            LayerSpec::TransposedConv1D {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => write!(
                f,
                "TransposedConv1D({in_ch},{out_ch},k={kernel},s={stride})"
            ),
            LayerSpec::Linear { inp, out } => write!(f, "Linear({inp},{out})"),
            LayerSpec::ReLU => write!(f, "ReLU"),
            LayerSpec::Lstm { input, hidden } => write!(f, "LSTM({input},{hidden})"),
            LayerSpec::LayerNorm { dim, eps } => write!(f, "LayerNorm({dim},eps={eps})"),
            LayerSpec::MultiHeadSelfAttention { dim, heads } => write!(f, "MHSA({dim},h={heads})"),
            LayerSpec::PatchEmbed {
                patch_len,
                in_dim,
                embed_dim,
            } => write!(f, "PatchEmbed({patch_len},{in_dim},{embed_dim})"),
            LayerSpec::PositionalEncoding { max_len, dim } => {
                write!(f, "PositionalEncoding({max_len},{dim})")
            }
            LayerSpec::GlobalAvgPool => write!(f, "GlobalAvgPool"),
            LayerSpec::Dropout { p } => write!(f, "Dropout({p})"),
        }
    }
}

fn expect_last<T: Real>(tape: &Tape<T>, x: Var, layer: &str, dim: usize) -> Result<(), DiffError> {
    if tape.value(x).last_dim() != dim {
        return Err(DiffError::ShapeMismatch {
            layer: layer.to_string(),
            expected: vec![dim],
            got: tape.shape(x).to_vec(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, inp: usize, out: usize) -> Self {
        pb.scoped(name, |pb| Self {
            w: pb.param("w", &[inp, out], Init::KaimingUniform { fan_in: inp }),
            b: pb.param("b", &[out], Init::Zeros),
            inp,
            out,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, DiffError> {
        expect_last(tape, x, "Linear", self.inp)?;
        let w = tape.param(s, self.w);
        let b = tape.param(s, self.b);
        ops::linear(tape, x, w, Some(b))
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Linear {
            inp: self.inp,
            out: self.out,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * kernel;
        pb.scoped(name, |pb| Self {
            w: pb.param("w", &[fan_in, out_ch], Init::KaimingUniform { fan_in }),
            b: pb.param("b", &[out_ch], Init::Zeros),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, DiffError> {
        expect_last(tape, x, "Conv1D", self.in_ch)?;
        let w = tape.param(s, self.w);
        let b = tape.param(s, self.b);
        ops::conv1d(tape, x, w, b, self.kernel, self.stride, self.padding)
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        ops::conv_out_len(len, self.kernel, self.stride, self.padding)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv1D {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        pb.scoped(name, |pb| Self {
            w: pb.param(
                "w",
                &[in_ch, kernel * out_ch],
                Init::KaimingUniform {
                    fan_in: in_ch * kernel / stride.max(1),
                },
            ),
            b: pb.param("b", &[out_ch], Init::Zeros),
            in_ch,
            out_ch,
            kernel,
            stride,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, DiffError> {
        expect_last(tape, x, "TransposedConv1D", self.in_ch)?;
        let w = tape.param(s, self.w);
        let b = tape.param(s, self.b);
        ops::conv_transpose1d(tape, x, w, b, self.kernel, self.stride)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::TransposedConv1D {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub ch: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, ch: usize) -> Self {
        pb.scoped(name, |pb| Self {
            gamma: pb.param("gamma", &[ch], Init::Const(1.0)),
            beta: pb.param("beta", &[ch], Init::Zeros),
            running_mean: pb.buffer("running_mean", Tensor::zeros(&[ch])),
            running_var: pb.buffer("running_var", Tensor::full(&[ch], T::one())),
            ch,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Training mode normalizes with batch statistics and queues a running
    /// statistic update on the tape; inference mode uses running statistics.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, DiffError> {
        expect_last(tape, x, "BatchNorm1D", self.ch)?;
        let g = tape.param(s, self.gamma);
        let b = tape.param(s, self.beta);
        match tape.mode() {
            Mode::Train => {
                let rows = tape.value(x).len() / self.ch;
                let (y, mean, var) = ops::batch_norm_train(tape, x, g, b, self.eps)?;
                let m = T::lit(self.momentum);
                let unbias = if rows > 1 {
                    T::lit(rows as f64 / (rows as f64 - 1.0))
                } else {
                    T::one()
                };
                let rm = s.buffer(self.running_mean).value.data();
                let rv = s.buffer(self.running_var).value.data();
                let new_mean: Vec<T> = rm
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &bm)| (T::one() - m) * r + m * bm)
                    .collect();
                let new_var: Vec<T> = rv
                    .iter()
                    .zip(&var)
                    .map(|(&r, &bv)| (T::one() - m) * r + m * bv * unbias)
                    .collect();
                tape.queue_buffer_update(self.running_mean, Tensor::new(&[self.ch], new_mean));
                tape.queue_buffer_update(self.running_var, Tensor::new(&[self.ch], new_var));
                Ok(y)
            }
            Mode::Infer => ops::batch_norm_infer(
                tape,
                x,
                g,
                b,
                s.buffer(self.running_mean).value.data(),
                s.buffer(self.running_var).value.data(),
                self.eps,
            ),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::BatchNorm1D {
            ch: self.ch,
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| Self {
            gamma: pb.param("gamma", &[dim], Init::Const(1.0)),
            beta: pb.param("beta", &[dim], Init::Zeros),
            dim,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, DiffError> {
        expect_last(tape, x, "LayerNorm", self.dim)?;
        let g = tape.param(s, self.gamma);
        let b = tape.param(s, self.beta);
        ops::layer_norm(tape, x, g, b, self.eps)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::LayerNorm {
            dim: self.dim,
            eps: self.eps,
        }
    }
}

/// Single-layer LSTM with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Output of an LSTM pass: all hidden states `(B, L, H)` and the last one
/// `(B, H)`.
pub struct LstmOutput {
    pub sequence: Var,
    pub last: Var,
}

impl Lstm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, input: usize, hidden: usize) -> Self {
        pb.scoped(name, |pb| {
            let w_ih = pb.param(
                "w_ih",
                &[input, 4 * hidden],
                Init::XavierUniform {
                    fan_in: input,
                    fan_out: hidden,
                },
            );
            let w_hh = pb.param(
                "w_hh",
                &[hidden, 4 * hidden],
                Init::OrthogonalBlocks { block: hidden },
            );
            let mut bias = vec![0.0; 4 * hidden];
            bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
            let b = pb.param("b", &[4 * hidden], Init::Zeros);
            pb.store.param_mut(b).value = Tensor::from_f64(&[4 * hidden], &bias);
            Self {
                w_ih,
                w_hh,
                b,
                input,
                hidden,
            }
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> Result<LstmOutput, DiffError> {
        expect_last(tape, x, "LSTM", self.input)?;
        let xs = tape.shape(x).to_vec();
        let (bsz, len) = (xs[0], xs[1]);
        let h = self.hidden;
        let w_ih = tape.param(s, self.w_ih);
        let w_hh = tape.param(s, self.w_hh);
        let b = tape.param(s, self.b);
        // input projections for all steps at once
        let xproj = ops::linear(tape, x, w_ih, Some(b))?;
        let mut h_t = tape.constant(Tensor::zeros(&[bsz, h]));
        let mut c_t = tape.constant(Tensor::zeros(&[bsz, h]));
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let xt = ops::slice(tape, xproj, 1, t, 1)?;
            let xt = ops::reshape(tape, xt, &[bsz, 4 * h])?;
            let hp = ops::linear(tape, h_t, w_hh, None)?;
            let gates = ops::add(tape, xt, hp)?;
            let i_g = ops::slice(tape, gates, 1, 0, h)?;
            let f_g = ops::slice(tape, gates, 1, h, h)?;
            let g_g = ops::slice(tape, gates, 1, 2 * h, h)?;
            let o_g = ops::slice(tape, gates, 1, 3 * h, h)?;
            let i_g = ops::sigmoid(tape, i_g)?;
            let f_g = ops::sigmoid(tape, f_g)?;
            let g_g = ops::tanh(tape, g_g)?;
            let o_g = ops::sigmoid(tape, o_g)?;
            let fc = ops::mul(tape, f_g, c_t)?;
            let ig = ops::mul(tape, i_g, g_g)?;
            c_t = ops::add(tape, fc, ig)?;
            let tc = ops::tanh(tape, c_t)?;
            h_t = ops::mul(tape, o_g, tc)?;
            outs.push(ops::reshape(tape, h_t, &[bsz, 1, h])?);
        }
        let sequence = ops::concat(tape, &outs, 1)?;
        Ok(LstmOutput {
            sequence,
            last: h_t,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Lstm {
            input: self.input,
            hidden: self.hidden,
        }
    }
}

/// Multi-head self-attention over `(B, L, D)`.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub dim: usize,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Attention weights `(B*heads, L, L)`; rows sum to one.
    pub weights: Var,
}

impl MultiHeadSelfAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "attention dim must divide into heads");
        pb.scoped(name, |pb| Self {
            qkv: Linear::new(pb, "qkv", dim, 3 * dim),
            proj: Linear::new(pb, "proj", dim, dim),
            dim,
            heads,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> Result<AttentionOutput, DiffError> {
        expect_last(tape, x, "MultiHeadSelfAttention", self.dim)?;
        let xs = tape.shape(x).to_vec();
        let (bsz, len) = (xs[0], xs[1]);
        let (nh, dh) = (self.heads, self.dim / self.heads);
        let qkv = self.qkv.forward(tape, s, x)?;
        // (B, L, 3, H, dh) -> (3, B, H, L, dh)
        let qkv = ops::reshape(tape, qkv, &[bsz, len, 3, nh, dh])?;
        let qkv = ops::permute(tape, qkv, &[2, 0, 3, 1, 4])?;
        let q = ops::slice(tape, qkv, 0, 0, 1)?;
        let k = ops::slice(tape, qkv, 0, 1, 1)?;
        let v = ops::slice(tape, qkv, 0, 2, 1)?;
        let q = ops::reshape(tape, q, &[bsz * nh, len, dh])?;
        let k = ops::reshape(tape, k, &[bsz * nh, len, dh])?;
        let v = ops::reshape(tape, v, &[bsz * nh, len, dh])?;
        let scores = ops::bmm(tape, q, k, true)?;
        let scores = ops::scale(tape, scores, 1.0 / (dh as f64).sqrt())?;
        let weights = ops::softmax(tape, scores)?;
        let ctx = ops::bmm(tape, weights, v, false)?;
        // (B, H, L, dh) -> (B, L, H, dh)
        let ctx = ops::reshape(tape, ctx, &[bsz, nh, len, dh])?;
        let ctx = ops::permute(tape, ctx, &[0, 2, 1, 3])?;
        let ctx = ops::reshape(tape, ctx, &[bsz, len, self.dim])?;
        let out = self.proj.forward(tape, s, ctx)?;
        Ok(AttentionOutput { out, weights })
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::MultiHeadSelfAttention {
            dim: self.dim,
            heads: self.heads,
        }
    }
}

/// Splits `(B, L, C)` into `L / patch_len` non-overlapping patches and
/// projects each flattened `(patch_len, C)` patch to `embed_dim`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch_len: usize,
    pub in_dim: usize,
    pub embed_dim: usize,
}

impl PatchEmbed {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        patch_len: usize,
        in_dim: usize,
        embed_dim: usize,
    ) -> Self {
        pb.scoped(name, |pb| Self {
            proj: Linear::new(pb, "proj", patch_len * in_dim, embed_dim),
            patch_len,
            in_dim,
            embed_dim,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, DiffError> {
        expect_last(tape, x, "PatchEmbed", self.in_dim)?;
        let xs = tape.shape(x).to_vec();
        if !xs[1].is_multiple_of(self.patch_len) {
            return Err(DiffError::PatchLengthIndivisible {
                len: xs[1],
                patch: self.patch_len,
            });
        }
        let n = xs[1] / self.patch_len;
        let p = ops::reshape(tape, x, &[xs[0], n, self.patch_len * self.in_dim])?;
        self.proj.forward(tape, s, p)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::PatchEmbed {
            patch_len: self.patch_len,
            in_dim: self.in_dim,
            embed_dim: self.embed_dim,
        }
    }
}

/// Learnable additive positional table.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    pub table: ParamId,
    pub max_len: usize,
    pub dim: usize,
}

impl PositionalEncoding {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, max_len: usize, dim: usize) -> Self {
        pb.scoped(name, |pb| Self {
            table: pb.param("table", &[max_len, dim], Init::Normal { std: 0.02 }),
            max_len,
            dim,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, DiffError> {
        expect_last(tape, x, "PositionalEncoding", self.dim)?;
        let len = tape.shape(x)[1];
        if len > self.max_len {
            return Err(DiffError::ShapeMismatch {
                layer: "PositionalEncoding".into(),
                expected: vec![self.max_len],
                got: tape.shape(x).to_vec(),
            });
        }
        let t = tape.param(s, self.table);
        let t = if len == self.max_len {
            t
        } else {
            ops::slice(tape, t, 0, 0, len)?
        };
        ops::add_broadcast(tape, x, t)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::PositionalEncoding {
            max_len: self.max_len,
            dim: self.dim,
        }
    }
}

/// Pre-LayerNorm transformer encoder block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        dropout: f64,
    ) -> Self {
        pb.scoped(name, |pb| Self {
            ln1: LayerNorm::new(pb, "ln1", dim),
            attn: MultiHeadSelfAttention::new(pb, "attn", dim, heads),
            ln2: LayerNorm::new(pb, "ln2", dim),
            fc1: Linear::new(pb, "fc1", dim, mlp_dim),
            fc2: Linear::new(pb, "fc2", mlp_dim, dim),
            dropout,
        })
    }

    /// Returns the block output and its attention weights.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var), DiffError> {
        let h = self.ln1.forward(tape, s, x)?;
        let a = self.attn.forward(tape, s, h)?;
        let a_out = ops::dropout(tape, a.out, self.dropout)?;
        let x = ops::add(tape, x, a_out)?;
        let h = self.ln2.forward(tape, s, x)?;
        let h = self.fc1.forward(tape, s, h)?;
        let h = ops::relu(tape, h)?;
        let h = self.fc2.forward(tape, s, h)?;
        let h = ops::dropout(tape, h, self.dropout)?;
        Ok((ops::add(tape, x, h)?, a.weights))
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        vec![
            self.ln1.spec(),
            self.attn.spec(),
            self.ln2.spec(),
            self.fc1.spec(),
            LayerSpec::ReLU,
            self.fc2.spec(),
            LayerSpec::Dropout { p: self.dropout },
        ]
    }
}
