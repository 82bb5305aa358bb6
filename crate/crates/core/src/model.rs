//! DATR encoder-decoder: four stages of overlapping patch merging followed
//! by pre-norm transformer blocks (ESA or DA per stage) and an all-MLP
//! decoder.

use std::fmt;
use std::str::FromStr;

use numkit::{Binding, ParamStore, PatchGeometry, ResizeGeometry, Rng, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{DaConfig, DaLayer, EsaLayer, PeMode};
use crate::error::{DatrError, Result};
use crate::layers::{LayerNorm, Linear};

const INIT_STD: f64 = 0.02;
pub const MIN_INPUT_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    M,
    T,
    S,
}

impl FromStr for Variant {
    type Err = DatrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M" => Ok(Variant::M),
            "T" => Ok(Variant::T),
            "S" => Ok(Variant::S),
            other => Err(DatrError::Config(format!("unknown variant {other:?} (expected M, T or S)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    Esa,
    Da,
}

/// Attention kind of each stage, written as four characters: `o` for ESA,
/// `s` for DA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Structure(pub [AttnKind; 4]);

impl Default for Structure {
    fn default() -> Self {
        Structure([AttnKind::Esa, AttnKind::Esa, AttnKind::Esa, AttnKind::Da])
    }
}

impl FromStr for Structure {
    type Err = DatrError;

    fn from_str(s: &str) -> Result<Self> {
        let kinds: Vec<AttnKind> = s
            .chars()
            .map(|c| match c {
                'o' | 'O' => Ok(AttnKind::Esa),
                's' | 'S' => Ok(AttnKind::Da),
                other => Err(DatrError::Config(format!("structure character {other:?} must be 'o' or 's'"))),
            })
            .collect::<Result<_>>()?;
        let arr: [AttnKind; 4] = kinds
            .try_into()
            .map_err(|_| DatrError::Config(format!("structure {s:?} must have exactly 4 characters")))?;
        Ok(Structure(arr))
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in self.0 {
            f.write_str(match k {
                AttnKind::Esa => "o",
                AttnKind::Da => "s",
            })?;
        }
        Ok(())
    }
}

impl Serialize for Structure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Structure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub patch_k: usize,
    pub patch_s: usize,
    pub patch_p: usize,
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    pub attn_kind: AttnKind,
    pub esa_reduction: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stages: [StageConfig; 4],
    pub decoder_dim: usize,
    pub num_classes: usize,
    pub window: usize,
    pub pe_mode: PeMode,
    pub wrap_horizontal: bool,
    pub structure: Structure,
}

impl ModelConfig {
    pub fn preset(variant: Variant, num_classes: usize) -> Self {
        let (channels, depths, decoder_dim) = match variant {
            Variant::M => ([32, 64, 160, 256], [2, 2, 2, 2], 512),
            Variant::T => ([64, 128, 320, 512], [2, 2, 2, 2], 256),
            Variant::S => ([64, 128, 320, 512], [3, 4, 6, 3], 768),
        };
        Self::custom(variant, channels, depths, [1, 2, 5, 8], decoder_dim, num_classes)
    }

    /// Arbitrary widths with the standard patch-merge and reduction layout.
    pub fn custom(
        variant: Variant,
        channels: [usize; 4],
        depths: [usize; 4],
        heads: [usize; 4],
        decoder_dim: usize,
        num_classes: usize,
    ) -> Self {
        let structure = Structure::default();
        let reductions = [8, 4, 2, 1];
        let stages = std::array::from_fn(|i| StageConfig {
            patch_k: if i == 0 { 7 } else { 3 },
            patch_s: if i == 0 { 4 } else { 2 },
            patch_p: if i == 0 { 3 } else { 1 },
            depth: depths[i],
            channels: channels[i],
            heads: heads[i],
            attn_kind: structure.0[i],
            esa_reduction: reductions[i],
            mlp_ratio: 4,
        });
        Self {
            variant,
            stages,
            decoder_dim,
            num_classes,
            window: 11,
            pe_mode: PeMode::Rpe,
            wrap_horizontal: false,
            structure,
        }
    }

    pub fn with_structure(mut self, structure: Structure) -> Self {
        self.structure = structure;
        for (st, k) in self.stages.iter_mut().zip(structure.0) {
            st.attn_kind = k;
        }
        self
    }

    pub fn da_config(&self, stage: usize) -> DaConfig {
        let st = &self.stages[stage];
        DaConfig {
            window_h: self.window,
            window_w: self.window,
            heads: st.heads,
            d_head: st.channels / st.heads.max(1),
            pe_mode: self.pe_mode,
            wrap_horizontal: self.wrap_horizontal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(DatrError::Config(format!("num_classes {} must be in [2, 255]", self.num_classes)));
        }
        if self.decoder_dim == 0 {
            return Err(DatrError::Config("decoder_dim must be >= 1".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.channels == 0 || st.heads == 0 || st.channels % st.heads != 0 {
                return Err(DatrError::Config(format!(
                    "stage {}: {} channels not divisible by {} heads",
                    i + 1,
                    st.channels,
                    st.heads
                )));
            }
            if st.attn_kind != self.structure.0[i] {
                return Err(DatrError::Config(format!("stage {} attention kind disagrees with structure", i + 1)));
            }
            if st.attn_kind == AttnKind::Da {
                self.da_config(i).validate()?;
            }
            if st.esa_reduction == 0 || st.mlp_ratio == 0 {
                return Err(DatrError::Config(format!("stage {}: reduction and mlp ratio must be >= 1", i + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Attention {
    Esa(EsaLayer),
    Da(DaLayer),
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn output_projections(&self) -> [&Linear; 2] {
        let proj = match &self.attn {
            Attention::Esa(l) => &l.attn.proj,
            Attention::Da(l) => &l.attn.proj,
        };
        [proj, &self.fc2]
    }

    /// `y = x + Attn(LN(x)); y + MLP(LN(y))`
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var, h: usize, w: usize) -> Result<Var> {
        let n = self.norm1.forward(tape, p, x)?;
        let a = match &self.attn {
            Attention::Esa(l) => l.forward(tape, p, n, h, w)?,
            Attention::Da(l) => l.forward(tape, p, n, h, w)?,
        };
        let x = tape.add(x, a)?;
        let n = self.norm2.forward(tape, p, x)?;
        let m = self.fc1.forward(tape, p, n)?;
        let m = tape.gelu(m)?;
        let m = self.fc2.forward(tape, p, m)?;
        Ok(tape.add(x, m)?)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub cfg: StageConfig,
    pub in_channels: usize,
    pub embed: Linear,
    pub embed_norm: LayerNorm,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Stage {
    pub fn geometry(&self, h: usize, w: usize) -> Result<PatchGeometry> {
        Ok(PatchGeometry::conv(h, w, self.in_channels, self.cfg.patch_k, self.cfg.patch_s, self.cfg.patch_p)?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub proj: Vec<Linear>,
    pub fuse: Linear,
    pub classifier: Linear,
}

/// Feature map `[h * w, c]` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Decoder outputs at the first-stage resolution.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub fused: FeatureMap,
    pub logits: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub stages: Vec<Stage>,
    pub decoder: Decoder,
}

/// Parameterize a model from its configuration.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut stages = Vec::with_capacity(4);
    let mut cin = 3;
    for (i, st) in cfg.stages.iter().enumerate() {
        let name = format!("stage{}", i + 1);
        let c = st.channels;
        let fan_in = st.patch_k * st.patch_k * cin;
        // conv-style fan-out initialization of the patch embedding
        let embed_std = (2.0 / (st.patch_k * st.patch_k * c) as f64).sqrt();
        let embed = Linear::new(&mut store, &format!("{name}.embed"), fan_in, c, embed_std, rng)?;
        let embed_norm = LayerNorm::new(&mut store, &format!("{name}.embed_norm"), c)?;
        let mut blocks = Vec::with_capacity(st.depth);
        for b in 0..st.depth {
            let bn = format!("{name}.block{b}");
            let norm1 = LayerNorm::new(&mut store, &format!("{bn}.norm1"), c)?;
            let attn = match st.attn_kind {
                AttnKind::Esa => {
                    Attention::Esa(EsaLayer::new(&mut store, &format!("{bn}.attn"), c, st.heads, st.esa_reduction, rng)?)
                }
                AttnKind::Da => Attention::Da(DaLayer::new(&mut store, &format!("{bn}.attn"), cfg.da_config(i), rng)?),
            };
            let norm2 = LayerNorm::new(&mut store, &format!("{bn}.norm2"), c)?;
            let hidden = c * st.mlp_ratio;
            let fc1 = Linear::new(&mut store, &format!("{bn}.fc1"), c, hidden, INIT_STD, rng)?;
            let fc2 = Linear::new(&mut store, &format!("{bn}.fc2"), hidden, c, INIT_STD, rng)?;
            blocks.push(Block {
                norm1,
                attn,
                norm2,
                fc1,
                fc2,
            });
        }
        let norm = LayerNorm::new(&mut store, &format!("{name}.norm"), c)?;
        stages.push(Stage {
            cfg: *st,
            in_channels: cin,
            embed,
            embed_norm,
            blocks,
            norm,
        });
        cin = c;
    }
    let d = cfg.decoder_dim;
    let proj = cfg
        .stages
        .iter()
        .enumerate()
        .map(|(i, st)| Linear::new(&mut store, &format!("decoder.proj{}", i + 1), st.channels, d, INIT_STD, rng))
        .collect::<Result<Vec<_>>>()?;
    let fuse = Linear::new(&mut store, "decoder.fuse", 4 * d, d, INIT_STD, rng)?;
    let classifier = Linear::new(&mut store, "decoder.classifier", d, cfg.num_classes, INIT_STD, rng)?;
    Ok(Model {
        cfg: cfg.clone(),
        params: store,
        stages,
        decoder: Decoder { proj, fuse, classifier },
    })
}

impl<T: Scalar> Model<T> {
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Multi-scale features `F1..F4` of an `[h * w, 3]` image.
    pub fn encoder_forward(&self, tape: &mut Tape<T>, p: &Binding, img: Var, h: usize, w: usize) -> Result<[FeatureMap; 4]> {
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(DatrError::Domain(format!(
                "input {h}x{w} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}"
            )));
        }
        if tape.shape(img) != [h * w, 3] {
            return Err(DatrError::Domain(format!("image {:?} does not match {h}x{w}x3", tape.shape(img))));
        }
        let mut x = img;
        let (mut ch, mut cw) = (h, w);
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            let g = stage.geometry(ch, cw)?;
            let cols = tape.unfold(x, g)?;
            let e = stage.embed.forward(tape, p, cols)?;
            x = stage.embed_norm.forward(tape, p, e)?;
            ch = g.out_h;
            cw = g.out_w;
            for b in &stage.blocks {
                x = b.forward(tape, p, x, ch, cw)?;
            }
            x = stage.norm.forward(tape, p, x)?;
            feats.push(FeatureMap {
                var: x,
                h: ch,
                w: cw,
                c: stage.cfg.channels,
            });
        }
        Ok(feats.try_into().expect("four stages"))
    }

    /// All-MLP decoder. The per-stage projection and the slice of the fuse
    /// layer acting on it are multiplied first (all maps are linear until the
    /// classifier, and bilinear resizing commutes with channel maps), so the
    /// `4D -> D` fuse never runs at full resolution.
    pub fn decoder_forward(&self, tape: &mut Tape<T>, p: &Binding, feats: &[FeatureMap; 4]) -> Result<DecoderOutput> {
        let d = self.cfg.decoder_dim;
        let (h1, w1) = (feats[0].h, feats[0].w);
        let wf = p.var(self.decoder.fuse.weight);
        let mut fused: Option<Var> = None;
        let mut bias: Option<Var> = None;
        for (i, f) in feats.iter().enumerate() {
            let lin = &self.decoder.proj[i];
            let wslice = tape.slice_rows(wf, i * d, d)?;
            let m = tape.matmul(p.var(lin.weight), wslice)?;
            let g = tape.matmul(f.var, m)?;
            let g = tape.resize_bilinear(
                g,
                ResizeGeometry {
                    in_h: f.h,
                    in_w: f.w,
                    channels: d,
                    out_h: h1,
                    out_w: w1,
                },
            )?;
            fused = Some(match fused {
                None => g,
                Some(acc) => tape.add(acc, g)?,
            });
            if let Some(b) = lin.bias {
                let b = tape.reshape(p.var(b), &[1, d])?;
                let bm = tape.matmul(b, wslice)?;
                bias = Some(match bias {
                    None => bm,
                    Some(acc) => tape.add(acc, bm)?,
                });
            }
        }
        let mut fused = fused.expect("four features");
        let mut total_bias = bias;
        if let Some(b) = self.decoder.fuse.bias {
            let b = tape.reshape(p.var(b), &[1, d])?;
            total_bias = Some(match total_bias {
                None => b,
                Some(acc) => tape.add(acc, b)?,
            });
        }
        if let Some(b) = total_bias {
            let b = tape.reshape(b, &[d])?;
            fused = tape.add_bias(fused, b)?;
        }
        self.finish_decoder(tape, p, fused, h1, w1)
    }

    /// Decoder written as project, resize, concatenate, fuse.
    pub fn decoder_forward_reference(
        &self,
        tape: &mut Tape<T>,
        p: &Binding,
        feats: &[FeatureMap; 4],
    ) -> Result<DecoderOutput> {
        let d = self.cfg.decoder_dim;
        let (h1, w1) = (feats[0].h, feats[0].w);
        let mut parts = Vec::with_capacity(4);
        for (i, f) in feats.iter().enumerate() {
            let y = self.decoder.proj[i].forward(tape, p, f.var)?;
            parts.push(tape.resize_bilinear(
                y,
                ResizeGeometry {
                    in_h: f.h,
                    in_w: f.w,
                    channels: d,
                    out_h: h1,
                    out_w: w1,
                },
            )?);
        }
        let cat = tape.concat_last(&parts)?;
        let fused = self.decoder.fuse.forward(tape, p, cat)?;
        self.finish_decoder(tape, p, fused, h1, w1)
    }

    fn finish_decoder(&self, tape: &mut Tape<T>, p: &Binding, fused: Var, h: usize, w: usize) -> Result<DecoderOutput> {
        let logits = self.decoder.classifier.forward(tape, p, fused)?;
        Ok(DecoderOutput {
            fused: FeatureMap {
                var: fused,
                h,
                w,
                c: self.cfg.decoder_dim,
            },
            logits: FeatureMap {
                var: logits,
                h,
                w,
                c: self.cfg.num_classes,
            },
        })
    }

    /// Encoder and decoder in one call.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Binding, img: Var, h: usize, w: usize) -> Result<DecoderOutput> {
        let feats = self.encoder_forward(tape, p, img, h, w)?;
        self.decoder_forward(tape, p, &feats)
    }

    /// Logits bilinearly upsampled to the input size, `[h * w, K]`.
    pub fn upsample_logits(&self, tape: &mut Tape<T>, logits: FeatureMap, h: usize, w: usize) -> Result<Var> {
        Ok(tape.resize_bilinear(
            logits.var,
            ResizeGeometry {
                in_h: logits.h,
                in_w: logits.w,
                channels: logits.c,
                out_h: h,
                out_w: w,
            },
        )?)
    }

    /// Per-pixel class probabilities `[h * w, K]` and their argmax.
    pub fn predict(&self, img: &Tensor<T>, h: usize, w: usize) -> Result<(Tensor<T>, Vec<u8>)> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(img.clone().reshape(&[h * w, 3])?);
        let out = self.forward(&mut tape, &p, x, h, w)?;
        let up = self.upsample_logits(&mut tape, out.logits, h, w)?;
        let probs = tape.softmax(up, 1)?;
        let probs = tape.value(probs).clone();
        let labels = probs.argmax_last().into_iter().map(|k| k as u8).collect();
        Ok((probs, labels))
    }
}

/// Random `[h * w, 3]` image in `[0, 1)`, handy for smoke tests.
pub fn random_image<T: Scalar>(rng: &mut Rng, h: usize, w: usize) -> Tensor<T> {
    numkit::rng_uniform(rng, &[h * w, 3], 0.0, 1.0)
}

/// Zero every attention and MLP output projection so each block reduces
/// to the identity.
pub fn zero_block_outputs<T: Scalar>(model: &mut Model<T>) {
    let projections: Vec<Linear> = model
        .stages
        .iter()
        .flat_map(|s| s.blocks.iter().flat_map(|b| b.output_projections().map(Linear::clone)))
        .collect();
    for l in projections {
        l.zero(&mut model.params);
    }
}
