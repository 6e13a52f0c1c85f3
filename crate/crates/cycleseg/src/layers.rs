//! Building blocks: parameterized convolutions, the toy Siamese encoder, the
//! decoder, and channel-attention fusion for the multi-level variant.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// One convolution's weight and bias.
#[derive(Clone, Debug)]
pub struct ConvParam {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParam {
    /// Uniform init in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(rng: &mut ChaCha8Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> Self {
        let s = 1.0 / ((cin * kh * kw) as f64).sqrt();
        ConvParam {
            weight: Tensor::from_fn(&[cout, cin, kh, kw], |_| rng.gen_range(-s..s)),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn zeros(cout: usize, cin: usize, kh: usize, kw: usize) -> Self {
        ConvParam {
            weight: Tensor::zeros(&[cout, cin, kh, kw]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Toy stride-2 conv encoder standing in for a pretrained backbone.
#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// per-stage output channels, strictly increasing
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            channels: vec![8, 16, 32],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::InvalidConfig(
                "encoder needs at least 2 stages".into(),
            ));
        }
        if !self.channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(format!(
                "encoder channels must be strictly increasing, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub stages: Vec<ConvParam>,
}

impl EncoderParams {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Self {
        let mut stages = Vec::with_capacity(cfg.channels.len());
        let mut cin = cfg.in_channels;
        for &cout in &cfg.channels {
            stages.push(ConvParam::init(rng, cout, cin, 3, 3));
            cin = cout;
        }
        EncoderParams { stages }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("{prefix}.stage{i}"), out);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("{prefix}.stage{i}"), out);
        }
    }
}

/// Per-stage feature maps, deepest last. Spatial size halves per stage.
#[derive(Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
}

/// Encode one image into its feature pyramid. Both (all) branches call this
/// with the same parameter object; sharing is structural.
pub fn encode(tape: &mut Tape, params: &EncoderParams, image: &Tensor) -> Result<FeaturePyramid> {
    let (_, _, h, w) = image.dims4()?;
    let stages = params.stages.len();
    let div = 1usize << stages;
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape(format!(
            "encode: {h}x{w} not divisible by 2^{stages}"
        )));
    }
    let mut cur = image.clone();
    let mut out = Vec::with_capacity(stages);
    for stage in &params.stages {
        let conv = tape.conv2d(&cur, &stage.weight, Some(&stage.bias), 2, 1)?;
        cur = tape.relu(&conv);
        out.push(cur.clone());
    }
    Ok(FeaturePyramid { stages: out })
}

/// Channel-attention fusion parameters: a projection for the incoming deep
/// feature, the concat-reduce conv, and the two-layer squeeze MLP.
#[derive(Clone, Debug)]
pub struct CamParams {
    pub proj: ConvParam,
    pub reduce: ConvParam,
    pub squeeze1: ConvParam,
    pub squeeze2: ConvParam,
}

impl CamParams {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, deep_channels: usize) -> Self {
        let mid = (channels / 4).max(1);
        CamParams {
            proj: ConvParam::init(rng, channels, deep_channels, 1, 1),
            reduce: ConvParam::init(rng, channels, 2 * channels, 1, 1),
            squeeze1: ConvParam::init(rng, mid, channels, 1, 1),
            squeeze2: ConvParam::init(rng, channels, mid, 1, 1),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.proj.visit(&format!("{prefix}.proj"), out);
        self.reduce.visit(&format!("{prefix}.reduce"), out);
        self.squeeze1.visit(&format!("{prefix}.squeeze1"), out);
        self.squeeze2.visit(&format!("{prefix}.squeeze2"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.proj.visit_mut(&format!("{prefix}.proj"), out);
        self.reduce.visit_mut(&format!("{prefix}.reduce"), out);
        self.squeeze1.visit_mut(&format!("{prefix}.squeeze1"), out);
        self.squeeze2.visit_mut(&format!("{prefix}.squeeze2"), out);
    }
}

/// Fuse a shallow feature with a deep one: upsample + project the deep map,
/// concat, 1x1-reduce to `f`, then gate `f` with a squeeze-excitation vector
/// and add the residual: `f (x) sigmoid(mlp(gap(f))) + f`.
pub fn cam_fuse(
    tape: &mut Tape,
    cam: &CamParams,
    shallow: &Tensor,
    deep: &Tensor,
) -> Result<Tensor> {
    let (_, _, h, w) = shallow.dims4()?;
    let up = tape.upsample_bilinear(deep, h, w)?;
    let proj = tape.conv2d(&up, &cam.proj.weight, Some(&cam.proj.bias), 1, 0)?;
    let cat = tape.concat_channels(&[shallow, &proj])?;
    let f = tape.conv2d(&cat, &cam.reduce.weight, Some(&cam.reduce.bias), 1, 0)?;

    let gap = tape.pool_avg(&f, 1, 1)?;
    let s1 = tape.conv2d(&gap, &cam.squeeze1.weight, Some(&cam.squeeze1.bias), 1, 0)?;
    let s1 = tape.relu(&s1);
    let s2 = tape.conv2d(&s1, &cam.squeeze2.weight, Some(&cam.squeeze2.bias), 1, 0)?;
    let attn = tape.sigmoid(&s2);

    let attn_map = tape.upsample_bilinear(&attn, h, w)?;
    let gated = tape.mul(&f, &attn_map)?;
    tape.add(&gated, &f)
}

/// How the decoder is wired: per-block input/output channels and, per block,
/// the channel width of the deep feature fused after it (if any).
#[derive(Clone, Debug)]
pub struct DecoderLayout {
    pub block_io: Vec<(usize, usize)>,
    pub fuse_deep_channels: Vec<Option<usize>>,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub blocks: Vec<ConvParam>,
    pub cams: Vec<Option<CamParams>>,
    pub head: ConvParam,
}

impl DecoderParams {
    pub fn init(rng: &mut ChaCha8Rng, layout: &DecoderLayout) -> Self {
        let blocks: Vec<ConvParam> = layout
            .block_io
            .iter()
            .map(|&(cin, cout)| ConvParam::init(rng, cout, cin, 3, 3))
            .collect();
        let cams: Vec<Option<CamParams>> = layout
            .block_io
            .iter()
            .zip(&layout.fuse_deep_channels)
            .map(|(&(_, cout), fuse)| fuse.map(|dc| CamParams::init(rng, cout, dc)))
            .collect();
        // zero head: an untrained net emits uniform logits
        let head = ConvParam::zeros(layout.classes, layout.block_io.last().unwrap().1, 1, 1);
        DecoderParams { blocks, cams, head }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), out);
        }
        for (i, c) in self.cams.iter().enumerate() {
            if let Some(c) = c {
                c.visit(&format!("{prefix}.cam{i}"), out);
            }
        }
        self.head.visit(&format!("{prefix}.head"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), out);
        }
        for (i, c) in self.cams.iter_mut().enumerate() {
            if let Some(c) = c {
                c.visit_mut(&format!("{prefix}.cam{i}"), out);
            }
        }
        self.head.visit_mut(&format!("{prefix}.head"), out);
    }
}

/// Decode a bottleneck hidden state back to per-pixel class logits.
/// `fuse_feats[i]` (when present and wired in the layout) joins after block
/// `i` via channel-attention fusion.
pub fn decode(
    tape: &mut Tape,
    params: &DecoderParams,
    deep: &Tensor,
    fuse_feats: &[&Tensor],
) -> Result<Tensor> {
    let mut x = deep.clone();
    let mut fuse_iter = fuse_feats.iter();
    for (block, cam) in params.blocks.iter().zip(&params.cams) {
        let (_, _, h, w) = x.dims4()?;
        let up = tape.upsample_bilinear(&x, 2 * h, 2 * w)?;
        let conv = tape.conv2d(&up, &block.weight, Some(&block.bias), 1, 1)?;
        x = tape.relu(&conv);
        if let Some(cam) = cam {
            let deep_feat = fuse_iter.next().ok_or_else(|| {
                Error::shape("decode: layout expects a fuse feature that was not supplied")
            })?;
            x = cam_fuse(tape, cam, &x, deep_feat)?;
        }
    }
    tape.conv2d(&x, &params.head.weight, Some(&params.head.bias), 1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(99)
    }

    fn rand_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[1, 3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn encoder_stage_shapes() {
        let cfg = EncoderConfig::default();
        let mut r = rng();
        let params = EncoderParams::init(&mut r, &cfg);
        let img = rand_image(64, 64, &mut r);
        let mut tape = Tape::new();
        let pyr = encode(&mut tape, &params, &img).unwrap();
        assert_eq!(pyr.stages.len(), 3);
        assert_eq!(pyr.stages[0].shape(), &[1, 8, 32, 32]);
        assert_eq!(pyr.stages[1].shape(), &[1, 16, 16, 16]);
        assert_eq!(pyr.stages[2].shape(), &[1, 32, 8, 8]);
    }

    #[test]
    fn encoder_rejects_indivisible_input() {
        let cfg = EncoderConfig::default();
        let mut r = rng();
        let params = EncoderParams::init(&mut r, &cfg);
        let img = rand_image(60, 64, &mut r);
        let mut tape = Tape::new();
        assert!(encode(&mut tape, &params, &img).is_err());
    }

    #[test]
    fn siamese_sharing_gives_bit_identical_pyramids() {
        let cfg = EncoderConfig::default();
        let mut r = rng();
        let params = EncoderParams::init(&mut r, &cfg);
        let img = rand_image(32, 32, &mut r);
        let img2 = Tensor::new(img.shape().to_vec(), img.data().to_vec()).unwrap();
        let mut tape = Tape::new();
        let a = encode(&mut tape, &params, &img).unwrap();
        let b = encode(&mut tape, &params, &img2).unwrap();
        for (x, y) in a.stages.iter().zip(&b.stages) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        cfg.channels = vec![8];
        assert!(cfg.validate().is_err());
        cfg.channels = vec![8, 8];
        assert!(cfg.validate().is_err());
        cfg.channels = vec![8, 16];
        assert!(cfg.validate().is_ok());
    }

    fn simple_layout() -> DecoderLayout {
        DecoderLayout {
            block_io: vec![(16, 8), (8, 8)],
            fuse_deep_channels: vec![None, None],
            classes: 2,
        }
    }

    #[test]
    fn zero_init_head_gives_zero_logits() {
        let mut r = rng();
        let params = DecoderParams::init(&mut r, &simple_layout());
        let deep = Tensor::from_fn(&[1, 16, 4, 4], |i| (i as f64 * 0.1).sin());
        let mut tape = Tape::new();
        let logits = decode(&mut tape, &params, &deep, &[]).unwrap();
        assert_eq!(logits.shape(), &[1, 2, 16, 16]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        // uniform logits mean softmax 0.5/0.5 per pixel
        let flat = tape.reshape(&logits, &[2, 256]).unwrap();
        let t = tape.transpose2d(&flat).unwrap();
        let p = tape.softmax_rows(&t).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decode_restores_input_resolution() {
        let cfg = EncoderConfig::default();
        let mut r = rng();
        let enc = EncoderParams::init(&mut r, &cfg);
        let dec = DecoderParams::init(
            &mut r,
            &DecoderLayout {
                block_io: vec![(32, 16), (16, 8), (8, 8)],
                fuse_deep_channels: vec![None, None, None],
                classes: 2,
            },
        );
        let img = rand_image(64, 64, &mut r);
        let mut tape = Tape::new();
        let pyr = encode(&mut tape, &enc, &img).unwrap();
        let logits = decode(&mut tape, &dec, pyr.stages.last().unwrap(), &[]).unwrap();
        assert_eq!(logits.shape(), &[1, 2, 64, 64]);
    }

    #[test]
    fn cam_attention_saturates_to_double() {
        // squeeze2 bias +20 drives the sigmoid to ~1, so out ~= 2f
        let mut r = rng();
        let mut cam = CamParams::init(&mut r, 4, 4);
        cam.squeeze2 = ConvParam {
            weight: Tensor::zeros(&[4, 1, 1, 1]),
            bias: Tensor::full(&[4], 20.0),
        };
        let shallow = Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f64 * 0.3).sin());
        let deep = Tensor::from_fn(&[1, 4, 2, 2], |i| (i as f64 * 0.2).cos());
        let mut tape = Tape::new();
        let fused = cam_fuse(&mut tape, &cam, &shallow, &deep).unwrap();

        // recompute f without the gate
        let up = tape.upsample_bilinear(&deep, 4, 4).unwrap();
        let proj = tape
            .conv2d(&up, &cam.proj.weight, Some(&cam.proj.bias), 1, 0)
            .unwrap();
        let cat = tape.concat_channels(&[&shallow, &proj]).unwrap();
        let f = tape
            .conv2d(&cat, &cam.reduce.weight, Some(&cam.reduce.bias), 1, 0)
            .unwrap();
        for (a, b) in fused.data().iter().zip(f.data()) {
            assert!((a - 2.0 * b).abs() < 1e-6, "{a} vs 2*{b}");
        }
    }

    #[test]
    fn cam_attention_weights_stay_in_unit_interval() {
        let mut r = rng();
        let cam = CamParams::init(&mut r, 8, 8);
        let f = Tensor::from_fn(&[1, 8, 4, 4], |i| (i as f64 * 0.7).sin() * 3.0);
        let mut tape = Tape::new();
        let gap = tape.pool_avg(&f, 1, 1).unwrap();
        let s1 = tape
            .conv2d(&gap, &cam.squeeze1.weight, Some(&cam.squeeze1.bias), 1, 0)
            .unwrap();
        let s1 = tape.relu(&s1);
        let s2 = tape
            .conv2d(&s1, &cam.squeeze2.weight, Some(&cam.squeeze2.bias), 1, 0)
            .unwrap();
        let attn = tape.sigmoid(&s2);
        assert!(attn.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fd_encoder_gradients() {
        use crate::tensor::{check_gradients, GradCheck};
        let cfg = EncoderConfig {
            in_channels: 2,
            channels: vec![4, 6],
        };
        let mut r = rng();
        let params = EncoderParams::init(&mut r, &cfg);
        let img = Tensor::from_fn(&[1, 2, 8, 8], |_| r.gen_range(0.0..1.0));
        let readout = Tensor::from_fn(&[1, 6, 2, 2], |_| r.gen_range(-1.0..1.0));

        let mut named = Vec::new();
        params.visit("enc", &mut named);
        let flat: Vec<Tensor> = named.into_iter().map(|(_, t)| t.clone()).collect();

        let build = |ps: &[Tensor]| -> crate::error::Result<(Tape, Tensor)> {
            let p = EncoderParams {
                stages: vec![
                    ConvParam {
                        weight: ps[0].clone(),
                        bias: ps[1].clone(),
                    },
                    ConvParam {
                        weight: ps[2].clone(),
                        bias: ps[3].clone(),
                    },
                ],
            };
            let mut tape = Tape::new();
            let pyr = encode(&mut tape, &p, &img)?;
            let prod = tape.mul(pyr.stages.last().unwrap(), &readout)?;
            let loss = tape.sum_all(&prod);
            Ok((tape, loss))
        };

        let (mut tape, loss) = build(&flat).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let analytic: Vec<Vec<f64>> = flat
            .iter()
            .map(|t| {
                grads
                    .for_tensor(t)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        let mut eval = |ps: &[Tensor]| Ok(build(ps)?.1.item());
        let worst = check_gradients(
            &mut eval,
            &flat,
            &analytic,
            &GradCheck {
                h: 1e-4,
                probes_per_tensor: 12,
                seed: 5,
            },
        )
        .unwrap();
        assert!(worst < 1e-4, "worst {worst}");
    }
}
