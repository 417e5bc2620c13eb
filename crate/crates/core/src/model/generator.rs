use crate::Real;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    conv, conv_shapes, init_conv, resize_nearest, to_channels_first, to_channels_last, Ablation,
    Backbone,
};
use crate::error::{Error, Result};
use crate::swin::{swin_block, SwinBlockParams};
use crate::tensor::{Activation, Binder, ParamStore, Tape, Tensor, Var};

const LEAKY: Activation = Activation::LeakyRelu(0.2);
const STAGES: usize = 4;

/// Generator hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the first encoder stage; later stages double it.
    pub base_width: usize,
    /// Channels each injected backbone feature map is projected to (0 disables
    /// injection).
    pub inject_channels: usize,
    pub noise_channels: usize,
    /// Standard deviation of the color-encoder input noise.
    pub noise_std: Real,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ablation: Ablation,
    /// Stage widths of the backbone the generator is paired with.
    pub backbone_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            inject_channels: 16,
            noise_channels: 64,
            noise_std: 0.1,
            window: 4,
            heads: 8,
            mlp_ratio: 4,
            ablation: Ablation::Full,
            backbone_widths: Backbone::DEFAULT_WIDTHS.to_vec(),
        }
    }
}

/// Intermediate bottleneck tensors of one forward pass.
///
/// `x_i` is the concatenation fed to the fusion conv (just `x_e` without a
/// color encoder); absent stages are `None`.
#[derive(Clone, Copy, Debug)]
pub struct BottleneckTrace {
    pub x_e: Var,
    pub x_ce: Option<Var>,
    pub x_i: Var,
    pub x_c: Option<Var>,
    pub x_st1: Option<Var>,
    pub x_st2: Option<Var>,
    pub y: Var,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// Normalized ab prediction `[N, 2, H, W]` in (-1, 1).
    pub ab: Var,
    pub trace: BottleneckTrace,
}

/// U-Net colorization generator.
#[derive(Clone, Debug)]
pub struct Generator {
    config: ModelConfig,
    swin: Option<[SwinBlockParams; 2]>,
}

impl Generator {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let c = &config;
        if c.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if c.backbone_widths.len() != STAGES {
            return Err(Error::Config(format!(
                "the generator needs a {STAGES}-stage backbone, got widths {:?}",
                c.backbone_widths
            )));
        }
        if c.ablation.has_color_encoder() && (c.noise_channels == 0 || !(c.noise_std > 0.0)) {
            return Err(Error::Config(
                "noise_channels and noise_std must be positive".into(),
            ));
        }
        let swin = if c.ablation.has_transformer() {
            let dim = 8 * c.base_width;
            if c.window < 2 || !c.window.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "window must be even and >= 2, got {}",
                    c.window
                )));
            }
            let mk = |name: &str, shift| {
                SwinBlockParams::new(name, dim, c.heads, c.window, shift, c.mlp_ratio)
                    .map_err(|e| Error::Config(e.to_string()))
            };
            Some([
                mk("transformer.swin1", 0)?,
                mk("transformer.swin2", c.window / 2)?,
            ])
        } else {
            None
        };
        Ok(Self { config, swin })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn swin_params(&self) -> Option<&[SwinBlockParams; 2]> {
        self.swin.as_ref()
    }

    fn enc_widths(&self) -> [usize; STAGES] {
        let b = self.config.base_width;
        [b, 2 * b, 4 * b, 8 * b]
    }

    fn dec_widths(&self) -> [usize; STAGES] {
        let b = self.config.base_width;
        [4 * b, 2 * b, b, b]
    }

    /// Channels of each skip tensor (encoder stage plus injected features).
    pub fn skip_channels(&self) -> [usize; STAGES] {
        self.enc_widths().map(|w| w + self.config.inject_channels)
    }

    /// Channels of the color-encoder output, equal to the backbone's global
    /// feature channels.
    pub fn color_channels(&self) -> usize {
        self.config.backbone_widths[STAGES - 1]
    }

    /// Channels of the fused bottleneck `x_c`.
    pub fn fused_channels(&self) -> usize {
        8 * self.config.base_width
    }

    fn bottleneck_channels(&self) -> usize {
        if self.config.ablation.has_fusion() {
            self.fused_channels()
        } else {
            self.skip_channels()[STAGES - 1]
        }
    }

    /// Noise tensor shape for an `h x w` input.
    pub fn noise_shape(&self, n: usize, h: usize, w: usize) -> [usize; 4] {
        [n, self.config.noise_channels, h / 16, w / 16]
    }

    /// Draws color-encoder input noise ~ N(0, noise_std^2).
    pub fn sample_noise(&self, n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
        let normal = Normal::new(0.0 as Real, self.config.noise_std).expect("valid std");
        Tensor::from_fn(&self.noise_shape(n, h, w), |_| normal.sample(rng))
    }

    /// Names and shapes of every parameter, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let enc = self.enc_widths();
        let skip = self.skip_channels();
        let mut out = Vec::new();
        for k in 0..STAGES {
            let cin = if k == 0 { 1 } else { skip[k - 1] };
            out.extend(conv_shapes(
                &format!("encoder.stage{}", k + 1),
                cin,
                enc[k],
                4,
            ));
            if c.inject_channels > 0 {
                out.extend(conv_shapes(
                    &format!("encoder.inject{}", k + 1),
                    c.backbone_widths[k],
                    c.inject_channels,
                    1,
                ));
            }
        }
        let g = self.color_channels();
        if c.ablation.has_color_encoder() {
            out.extend(conv_shapes("color_encoder.conv1", c.noise_channels, g, 3));
            out.extend(conv_shapes("color_encoder.conv2", g, g, 3));
        }
        if c.ablation.has_fusion() {
            let cin = skip[STAGES - 1] + if c.ablation.has_color_encoder() { g } else { 0 };
            out.extend(conv_shapes("fusion", cin, self.fused_channels(), 3));
        }
        if let Some(blocks) = &self.swin {
            for b in blocks {
                out.extend(b.param_shapes());
            }
        }
        let dec = self.dec_widths();
        let mut prev = self.bottleneck_channels();
        for j in 0..STAGES {
            out.extend(conv_shapes(
                &format!("decoder.stage{}", j + 1),
                prev + skip[STAGES - 1 - j],
                dec[j],
                3,
            ));
            prev = dec[j];
        }
        out.extend(conv_shapes("decoder.head", prev, 2, 1));
        out
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        let relu_gain = Real::sqrt(2.0);
        let shapes = self.param_shapes();
        for (name, shape) in &shapes {
            let Some(layer) = name.strip_suffix(".weight") else {
                continue;
            };
            if layer.starts_with("transformer.") {
                continue;
            }
            let gain = if layer.starts_with("encoder.stage")
                || layer.starts_with("decoder.stage")
                || layer == "color_encoder.conv1"
            {
                relu_gain
            } else {
                1.0
            };
            init_conv(&mut store, layer, shape[1], shape[0], shape[2], gain, rng);
        }
        if let Some(blocks) = &self.swin {
            for b in blocks {
                b.init(&mut store, rng);
            }
        }
        debug_assert_eq!(store.len(), shapes.len());
        store
    }

    fn check_input(&self, tape: &Tape, ln: Var) -> Result<[usize; 4]> {
        match *tape.shape(ln) {
            [n, 1, h, w] if h % 16 == 0 && w % 16 == 0 && h > 0 && w > 0 => Ok([n, 1, h, w]),
            [_, 1, h, w] => Err(Error::shape(
                "generator",
                format!("H={h}, W={w} must be positive multiples of 16"),
            )),
            ref s => Err(Error::shape(
                "generator",
                format!("lightness must be [N, 1, H, W], got {s:?}"),
            )),
        }
    }

    /// Four stride-2 stages; after each, the matching backbone feature map is
    /// resized to the stage grid, projected by a `1x1` adapter and
    /// concatenated. Returns the skips (finest first) and `x_e`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        ln: Var,
        global: &[Var],
    ) -> Result<(Vec<Var>, Var)> {
        self.check_input(tape, ln)?;
        let inject = self.config.inject_channels > 0;
        if inject && global.len() != STAGES {
            return Err(Error::shape(
                "encode",
                format!(
                    "expected {STAGES} backbone feature maps, got {}",
                    global.len()
                ),
            ));
        }
        let mut x = ln;
        let mut skips = Vec::with_capacity(STAGES);
        for k in 0..STAGES {
            x = conv(
                tape,
                p,
                x,
                &format!("encoder.stage{}", k + 1),
                2,
                1,
                Some(LEAKY),
            )?;
            if inject {
                let (h, w) = (tape.shape(x)[2], tape.shape(x)[3]);
                let g = resize_nearest(tape, global[k], h, w)?;
                let g = conv(tape, p, g, &format!("encoder.inject{}", k + 1), 1, 0, None)?;
                x = tape.concat_channels(x, g)?;
            }
            skips.push(x);
        }
        Ok((skips, x))
    }

    /// The color encoder: noise -> feature map shaped like the backbone's
    /// global features.
    pub fn color_encode(&self, tape: &mut Tape, p: &mut Binder, noise: Var) -> Result<Var> {
        let s = tape.shape(noise).to_vec();
        if s.len() != 4 || s[1] != self.config.noise_channels {
            return Err(Error::shape(
                "color_encode",
                format!(
                    "noise must be [N, {}, h, w], got {s:?}",
                    self.config.noise_channels
                ),
            ));
        }
        let x = conv(tape, p, noise, "color_encoder.conv1", 1, 1, Some(LEAKY))?;
        conv(tape, p, x, "color_encoder.conv2", 1, 1, None)
    }

    /// Bottleneck: concatenation, fusion conv, two Swin blocks and the
    /// residual sum, each stage present as the ablation allows.
    pub fn color_transform(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        x_e: Var,
        x_ce: Option<Var>,
    ) -> Result<(Var, BottleneckTrace)> {
        let ab = self.config.ablation;
        if ab.has_color_encoder() != x_ce.is_some() {
            return Err(Error::Invalid(format!(
                "ablation `{ab}` {} color-encoder features",
                if x_ce.is_some() {
                    "takes no"
                } else {
                    "requires"
                }
            )));
        }
        let x_i = match x_ce {
            Some(ce) => tape.concat_channels(x_e, ce)?,
            None => x_e,
        };
        let mut trace = BottleneckTrace {
            x_e,
            x_ce,
            x_i,
            x_c: None,
            x_st1: None,
            x_st2: None,
            y: x_e,
        };
        if !ab.has_fusion() {
            return Ok((x_e, trace));
        }
        let x_c = conv(tape, p, x_i, "fusion", 1, 1, None)?;
        trace.x_c = Some(x_c);
        trace.y = x_c;
        if let Some([b1, b2]) = &self.swin {
            let t = to_channels_last(tape, x_c)?;
            let t1 = swin_block(tape, p, t, b1)?;
            let t2 = swin_block(tape, p, t1, b2)?;
            let x_st1 = to_channels_first(tape, t1)?;
            let x_st2 = to_channels_first(tape, t2)?;
            trace.x_st1 = Some(x_st1);
            trace.x_st2 = Some(x_st2);
            trace.y = tape.add(x_c, x_st2)?;
        }
        Ok((trace.y, trace))
    }

    /// Four stages of skip concatenation, 2x upsampling and a `3x3` conv,
    /// then a `1x1` head with tanh.
    pub fn decode(&self, tape: &mut Tape, p: &mut Binder, y: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != STAGES {
            return Err(Error::shape(
                "decode",
                format!("expected {STAGES} skips, got {}", skips.len()),
            ));
        }
        let mut h = y;
        for j in 0..STAGES {
            let skip = skips[STAGES - 1 - j];
            h = tape.concat_channels(h, skip)?;
            h = tape.upsample2x(h)?;
            h = conv(
                tape,
                p,
                h,
                &format!("decoder.stage{}", j + 1),
                1,
                1,
                Some(LEAKY),
            )?;
        }
        conv(tape, p, h, "decoder.head", 1, 0, Some(Activation::Tanh))
    }

    /// Full forward pass. `noise` is required exactly when the ablation has a
    /// color encoder.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        backbone: &Backbone,
        ln: Var,
        noise: Option<Var>,
    ) -> Result<GeneratorOutput> {
        self.check_input(tape, ln)?;
        if backbone.widths() != self.config.backbone_widths.as_slice() {
            return Err(Error::Invalid(format!(
                "generator built for backbone widths {:?}, got {:?}",
                self.config.backbone_widths,
                backbone.widths()
            )));
        }
        let global = if self.config.inject_channels > 0 {
            backbone.gray_features(tape, ln)?
        } else {
            Vec::new()
        };
        let (skips, x_e) = self.encode(tape, p, ln, &global)?;
        let x_ce = match (self.config.ablation.has_color_encoder(), noise) {
            (true, Some(z)) => Some(self.color_encode(tape, p, z)?),
            (true, None) => {
                return Err(Error::Invalid("this generator needs a noise tensor".into()))
            }
            (false, _) => None,
        };
        if let Some(ce) = x_ce {
            let (a, b) = (tape.shape(ce), tape.shape(x_e));
            if a[2..] != b[2..] {
                return Err(Error::shape(
                    "generator",
                    format!("color features {a:?} not on the bottleneck grid {b:?}"),
                ));
            }
        }
        let (y, trace) = self.color_transform(tape, p, x_e, x_ce)?;
        let ab = self.decode(tape, p, y, &skips)?;
        Ok(GeneratorOutput { ab, trace })
    }
}
