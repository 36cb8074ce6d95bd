//! Encoder and decoder for the non-intrusive verification key.
//!
//! The encoder never touches the cover image: it extracts the moment feature
//! map `X1` from the cover, runs the binary message through a small
//! convolutional processor to get `X2`, and emits the key
//! `round(X1) XOR round(X2)`. The decoder recomputes `X1'` from the image
//! under test, XORs it with the key (a perfect restoration therefore
//! recovers `round(X2)` analytically), and maps the result back to `L`
//! soft message bits through a reverse processor.
//!
//! The reverse processor flattens into one dense mixing layer when the key
//! holds exactly `L` cells, which is the case for the shipped presets; a
//! strided-convolution variant is provided for configurations whose key is
//! larger than the message.
//!
//! A concat-plus-convolution fusion variant replaces the XOR on both sides.
//! It exists so the evaluation harness can demonstrate the structural
//! shortcut such a learned fusion develops (the decoder stops depending on
//! the image); it is not the production path.

use ndarray::{Array1, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{self, MomentCtx, MomentKernelBank};
use crate::nn::{self, Conv2d, Conv2dGrad, Dense, DenseGrad, Init};
use crate::sgxor::{estimator_backward, round_bit, GradEstimator, SgXorParams};

/// Version tag embedded in key files and key metadata.
pub const KEY_VERSION: u8 = 1;

/// Channel width of the hidden convolution layers.
const HIDDEN: usize = 16;

/// Weight of the message-to-logit residual in the message processor. At
/// `2.0` an untouched stack emits `sigmoid(±2) ≈ 0.12/0.88`: decisively
/// binary (the code survives rounding) yet far from saturation, so the
/// surrogate gate still passes gradient.
const SKIP_GAIN: f32 = 2.0;

// ---------------------------------------------------------------------------
// Shapes and domain types
// ---------------------------------------------------------------------------

/// Dimensions tying together cover images, keys, and messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Key (and feature map) channels, height, width.
    pub key_c: usize,
    pub key_h: usize,
    pub key_w: usize,
    /// Message length L.
    pub msg_len: usize,
    /// Cover image height and width.
    pub img_h: usize,
    pub img_w: usize,
}

impl ModelShape {
    /// Small shape for fast end-to-end runs.
    pub fn toy() -> Self {
        ModelShape { key_c: 1, key_h: 8, key_w: 8, msg_len: 64, img_h: 64, img_w: 64 }
    }

    /// Full-scale shape: 1x32x32 key, 1024-bit message, 128x128 covers.
    pub fn paper() -> Self {
        ModelShape { key_c: 1, key_h: 32, key_w: 32, msg_len: 1024, img_h: 128, img_w: 128 }
    }

    pub fn key_dims(&self) -> (usize, usize, usize) {
        (self.key_c, self.key_h, self.key_w)
    }

    pub fn key_cells(&self) -> usize {
        self.key_c * self.key_h * self.key_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_c == 0 || self.key_h == 0 || self.key_w == 0 || self.msg_len == 0 {
            return Err(Error::config("model shape: zero dimension"));
        }
        if self.msg_len != self.key_cells() {
            return Err(Error::config(format!(
                "model shape: message length {} != key cells {}",
                self.msg_len,
                self.key_cells()
            )));
        }
        Ok(())
    }
}

/// Binary message of length `L`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::input("message: empty"));
        }
        if let Some(b) = bits.iter().find(|b| **b > 1) {
            return Err(Error::input(format!("message: element {b} not a bit")));
        }
        Ok(Message { bits })
    }

    pub fn random(len: usize, rng: &mut impl Rng) -> Self {
        Message { bits: (0..len).map(|_| rng.random_range(0..=1u8)).collect() }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Bits reshaped row-major to a `(c, h, w)` map of 0.0/1.0 values.
    pub fn to_map(&self, c: usize, h: usize, w: usize) -> Result<Array3<f32>> {
        if self.bits.len() != c * h * w {
            return Err(Error::shape(format!(
                "message: {} bits cannot fill a {c}x{h}x{w} map",
                self.bits.len()
            )));
        }
        let data: Vec<f32> = self.bits.iter().map(|&b| b as f32).collect();
        Ok(Array3::from_shape_vec((c, h, w), data).expect("length checked"))
    }
}

/// Thresholds soft bits at 0.5 (ties round to 1, matching the key rounding).
pub fn binarize_message(m_pre: &[f32]) -> Message {
    Message { bits: m_pre.iter().map(|&v| round_bit(v)).collect() }
}

/// Binary verification key plus metadata. The cover it was derived from is
/// never modified or stored; persistence goes through the key file format.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationKey {
    /// Strictly binary tensor of shape `(key_c, key_h, key_w)`.
    pub bits: Array3<u8>,
    /// Format version tag.
    pub version: u8,
    /// SHA-256 digest of the codec weights the key was created with.
    pub digest: [u8; 32],
    /// Seed of the run that created the key, when known.
    pub seed: Option<u64>,
}

impl VerificationKey {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.bits.iter().find(|b| **b > 1) {
            return Err(Error::input(format!("key: element {b} not a bit")));
        }
        Ok(())
    }

    pub fn bits_f32(&self) -> Array3<f32> {
        self.bits.mapv(|b| b as f32)
    }
}

/// How the encoder and decoder combine features with the message code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Exact XOR forward with a configurable gradient estimator.
    SgXor,
    /// Channel concatenation plus convolutions (ablation-only shortcut).
    CatConv,
}

// ---------------------------------------------------------------------------
// Message processor
// ---------------------------------------------------------------------------

/// Three same-resolution convolutions turning a reshaped message into the
/// soft code `X2` in `[0, 1]`, with a fixed residual from the raw message
/// into the output logits.
///
/// The residual keeps `round(X2)` a stable, already-invertible code at
/// init: without it the code sits at the rounding threshold (every weight
/// wiggle reshuffles it) and starts as a random deep code that the
/// single-dense reverse processor cannot linearly invert, so the loss
/// plateaus at the chance level.
#[derive(Debug, Clone)]
pub struct MessageProcessor {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub c3: Conv2d,
}

pub struct MsgCtx {
    map: Array3<f32>,
    y1: Array3<f32>,
    y2: Array3<f32>,
    x2: Array3<f32>,
}

impl MessageProcessor {
    /// The output convolution starts at zero so the initial code equals the
    /// residual exactly. With a random output layer the conv term can swamp
    /// the residual and saturate the sigmoid, in which case rounding erases
    /// the message from the code and training cannot recover it.
    fn new(c: usize, rng: &mut impl Rng) -> Self {
        MessageProcessor {
            c1: Conv2d::new(c, HIDDEN, 3, 1, 1, Init::He, rng),
            c2: Conv2d::new(HIDDEN, HIDDEN, 3, 1, 1, Init::He, rng),
            c3: Conv2d::new(HIDDEN, c, 3, 1, 1, Init::Zero, rng),
        }
    }

    fn forward_ctx(&self, map: &Array3<f32>) -> Result<(Array3<f32>, MsgCtx)> {
        let y1 = nn::relu(&self.c1.forward(map)?);
        let y2 = nn::relu(&self.c2.forward(&y1)?);
        let mut z3 = self.c3.forward(&y2)?;
        z3.zip_mut_with(map, |z, &m| *z += SKIP_GAIN * (2.0 * m - 1.0));
        let x2 = nn::sigmoid(&z3);
        Ok((x2.clone(), MsgCtx { map: map.clone(), y1, y2, x2 }))
    }

    fn backward(
        &self,
        ctx: &MsgCtx,
        dx2: &Array3<f32>,
        g: &mut MessageProcessorGrad,
    ) -> Result<()> {
        let dz3 = nn::sigmoid_backward(dx2, &ctx.x2);
        let dy2 = self.c3.backward(&ctx.y2, &dz3, &mut g.c3)?;
        let dy1 = self.c2.backward(&ctx.y1, &nn::relu_backward(&dy2, &ctx.y2), &mut g.c2)?;
        self.c1.backward(&ctx.map, &nn::relu_backward(&dy1, &ctx.y1), &mut g.c1)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MessageProcessorGrad {
    pub c1: Conv2dGrad,
    pub c2: Conv2dGrad,
    pub c3: Conv2dGrad,
}

// ---------------------------------------------------------------------------
// Reverse processor
// ---------------------------------------------------------------------------

/// Maps the decoder's fused `(C', H', W')` map to `L` soft bits.
#[derive(Debug, Clone)]
pub enum ReverseProcessor {
    /// `H'·W'·C' == L`: flatten plus one dense mixing layer.
    Dense { d: Dense },
    /// `H'·W'·C' > L`: two stride-2 convolutions, then flatten.
    Strided { c1: Conv2d, c2: Conv2d },
}

pub enum RevCtx {
    Dense { x: Array1<f32>, m: Array1<f32> },
    Strided { input: Array3<f32>, y1: Array3<f32>, m: Array1<f32> },
}

#[derive(Debug, Clone)]
pub enum RevGrad {
    Dense { d: DenseGrad },
    Strided { c1: Conv2dGrad, c2: Conv2dGrad },
}

impl ReverseProcessor {
    pub fn new(key_c: usize, key_h: usize, key_w: usize, msg_len: usize, rng: &mut impl Rng) -> Result<Self> {
        let cells = key_c * key_h * key_w;
        // The output layer starts at zero: every logit begins at the chance
        // level with no cross-channel crosstalk, so the decode map only has
        // to grow the weights that matter. A random init instead buries the
        // per-bit signal under the summed noise of every other cell.
        if cells == msg_len {
            return Ok(ReverseProcessor::Dense { d: Dense::new(msg_len, msg_len, Init::Zero, rng) });
        }
        if cells > msg_len {
            // Two stride-2 convolutions quarter each side; the channel count
            // of the second is chosen so the flatten lands exactly on L.
            if key_h % 4 != 0 || key_w % 4 != 0 {
                return Err(Error::config(format!(
                    "reverse processor: key {key_h}x{key_w} sides must be divisible by 4"
                )));
            }
            let cells_down = (key_h / 4) * (key_w / 4);
            if cells_down == 0 || msg_len % cells_down != 0 {
                return Err(Error::config(format!(
                    "reverse processor: L = {msg_len} not reachable from \
                     {key_c}x{key_h}x{key_w} by two stride-2 convolutions"
                )));
            }
            let out_ch = msg_len / cells_down;
            return Ok(ReverseProcessor::Strided {
                c1: Conv2d::new(key_c, HIDDEN, 3, 2, 1, Init::He, rng),
                c2: Conv2d::new(HIDDEN, out_ch, 3, 2, 1, Init::Zero, rng),
            });
        }
        Err(Error::config(format!(
            "reverse processor: key holds {cells} cells, fewer than L = {msg_len}"
        )))
    }

    pub fn forward_ctx(&self, fused: &Array3<f32>) -> Result<(Vec<f32>, RevCtx)> {
        match self {
            ReverseProcessor::Dense { d } => {
                let x = Array1::from_iter(fused.iter().copied());
                let m = nn::sigmoid1(&d.forward(&x)?);
                Ok((m.to_vec(), RevCtx::Dense { x, m }))
            }
            ReverseProcessor::Strided { c1, c2 } => {
                let y1 = nn::relu(&c1.forward(fused)?);
                let y2 = c2.forward(&y1)?;
                let m = nn::sigmoid1(&Array1::from_iter(y2.iter().copied()));
                Ok((m.to_vec(), RevCtx::Strided { input: fused.clone(), y1, m }))
            }
        }
    }

    /// Returns the gradient with respect to the fused input map.
    pub fn backward(
        &self,
        ctx: &RevCtx,
        dm: &[f32],
        grad: &mut RevGrad,
        fused_dim: (usize, usize, usize),
    ) -> Result<Array3<f32>> {
        match (self, ctx, grad) {
            (ReverseProcessor::Dense { d }, RevCtx::Dense { x, m }, RevGrad::Dense { d: gd }) => {
                let dm = Array1::from_iter(dm.iter().copied());
                let dz = nn::sigmoid1_backward(&dm, m);
                let dx = d.backward(x, &dz, gd)?;
                Ok(Array3::from_shape_vec(fused_dim, dx.to_vec()).expect("cell count"))
            }
            (
                ReverseProcessor::Strided { c1, c2 },
                RevCtx::Strided { input, y1, m },
                RevGrad::Strided { c1: g1, c2: g2 },
            ) => {
                let dm = Array1::from_iter(dm.iter().copied());
                let dz = nn::sigmoid1_backward(&dm, m);
                let (c2o, _, _, _) = c2.w.dim();
                let (_, yh, yw) = y1.dim();
                let oh = (yh + 1) / 2;
                let ow = (yw + 1) / 2;
                let dy2 = Array3::from_shape_vec((c2o, oh, ow), dz.to_vec())
                    .map_err(|_| Error::shape("reverse backward: logit count"))?;
                let dy1 = c2.backward(y1, &dy2, g2)?;
                c1.backward(input, &nn::relu_backward(&dy1, y1), g1)
            }
            _ => Err(Error::input("reverse backward: mismatched context")),
        }
    }

    pub fn grad(&self) -> RevGrad {
        match self {
            ReverseProcessor::Dense { d } => RevGrad::Dense { d: d.grad() },
            ReverseProcessor::Strided { c1, c2 } => {
                RevGrad::Strided { c1: c1.grad(), c2: c2.grad() }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Concat fusion (ablation)
// ---------------------------------------------------------------------------

/// Two convolutions over the channel concatenation of two maps.
#[derive(Debug, Clone)]
pub struct CatConvFusion {
    pub a: Conv2d,
    pub b: Conv2d,
}

pub struct FuseCtx {
    cat: Array3<f32>,
    ya: Array3<f32>,
}

impl CatConvFusion {
    /// Pointwise (1x1) mixing: each key cell is fused from the two
    /// corresponding input cells alone. Any boolean-like combination of two
    /// near-binary channels (XOR, either passthrough) is expressible
    /// pointwise, and on a key grid as small as 8x8 a spatial kernel only
    /// forces the layer to first unlearn its neighbor taps.
    ///
    /// The output convolution starts at zero, so the initial logits are the
    /// symmetric input residuals alone; a random output term can push the
    /// logits past where either input still flips the rounded bit, which
    /// permanently severs the message channel (see [`MessageProcessor`]).
    fn new(c: usize, rng: &mut impl Rng) -> Self {
        CatConvFusion {
            a: Conv2d::new(2 * c, HIDDEN, 1, 1, 0, Init::He, rng),
            b: Conv2d::new(HIDDEN, c, 1, 1, 0, Init::Zero, rng),
        }
    }

    /// Both inputs also feed the output logits through fixed symmetric
    /// residuals. A freshly initialized conv stack easily rounds to a
    /// constant plane, and a constant key cannot carry the message, so
    /// training stalls at chance; the residuals keep both channels live at
    /// initialization without preferring either one.
    fn forward_ctx(&self, p: &Array3<f32>, q: &Array3<f32>) -> Result<(Array3<f32>, FuseCtx)> {
        let cat = nn::concat_channels(p, q)?;
        let ya = nn::relu(&self.a.forward(&cat)?);
        let mut z = self.b.forward(&ya)?;
        ndarray::Zip::from(&mut z).and(p).and(q).for_each(|z, &pv, &qv| {
            *z += SKIP_GAIN * (pv - 0.5) + SKIP_GAIN * (qv - 0.5);
        });
        Ok((z, FuseCtx { cat, ya }))
    }

    /// Returns gradients for the two concatenated inputs.
    fn backward(
        &self,
        ctx: &FuseCtx,
        dz: &Array3<f32>,
        g: &mut CatConvFusionGrad,
    ) -> Result<(Array3<f32>, Array3<f32>)> {
        let dya = self.b.backward(&ctx.ya, dz, &mut g.b)?;
        let dcat = self.a.backward(&ctx.cat, &nn::relu_backward(&dya, &ctx.ya), &mut g.a)?;
        let ca = ctx.cat.dim().0 / 2;
        let (mut dp, mut dq) = nn::concat_backward(&dcat, ca);
        dp.zip_mut_with(dz, |d, &g| *d += SKIP_GAIN * g);
        dq.zip_mut_with(dz, |d, &g| *d += SKIP_GAIN * g);
        Ok((dp, dq))
    }
}

#[derive(Debug, Clone)]
pub struct CatConvFusionGrad {
    pub a: Conv2dGrad,
    pub b: Conv2dGrad,
}

// ---------------------------------------------------------------------------
// Codec
// ---------------------------------------------------------------------------

/// Encoder/decoder pair with its moment kernel bank and fusion config.
#[derive(Debug, Clone)]
pub struct Codec {
    pub shape: ModelShape,
    pub fusion: FusionKind,
    pub estimator: GradEstimator,
    pub params: SgXorParams,
    pub frozen: bool,
    msg_proc: MessageProcessor,
    rev: ReverseProcessor,
    enc_fuse: Option<CatConvFusion>,
    dec_fuse: Option<CatConvFusion>,
    bank: MomentKernelBank,
}

/// Gradients for every trainable codec parameter.
#[derive(Debug, Clone)]
pub struct CodecGrad {
    pub msg: MessageProcessorGrad,
    pub rev: RevGrad,
    pub enc_fuse: Option<CatConvFusionGrad>,
    pub dec_fuse: Option<CatConvFusionGrad>,
}

/// Forward intermediates for one training example.
pub struct CodecCtx {
    x1: Array3<f32>,
    x1p: Array3<f32>,
    msg_ctx: MsgCtx,
    key_f32: Array3<f32>,
    /// Concat-fusion extras: encoder fuse ctx, sigmoid output, decoder ctx.
    enc_fuse_ctx: Option<(FuseCtx, Array3<f32>)>,
    dec_fuse_ctx: Option<FuseCtx>,
    fused2: Array3<f32>,
    rev_ctx: RevCtx,
}

impl Codec {
    pub fn new(
        shape: ModelShape,
        fusion: FusionKind,
        estimator: GradEstimator,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        shape.validate()?;
        let bank = moments::build_kernel_bank(
            shape.img_h,
            shape.img_w,
            shape.key_c,
            shape.key_h,
            shape.key_w,
        )?;
        let (enc_fuse, dec_fuse) = match fusion {
            FusionKind::SgXor => (None, None),
            FusionKind::CatConv => (
                Some(CatConvFusion::new(shape.key_c, rng)),
                Some(CatConvFusion::new(shape.key_c, rng)),
            ),
        };
        Ok(Codec {
            shape,
            fusion,
            estimator,
            params: SgXorParams::default(),
            frozen: false,
            msg_proc: MessageProcessor::new(shape.key_c, rng),
            rev: ReverseProcessor::new(shape.key_c, shape.key_h, shape.key_w, shape.msg_len, rng)?,
            enc_fuse,
            dec_fuse,
            bank,
        })
    }

    pub fn grad(&self) -> CodecGrad {
        CodecGrad {
            msg: MessageProcessorGrad {
                c1: self.msg_proc.c1.grad(),
                c2: self.msg_proc.c2.grad(),
                c3: self.msg_proc.c3.grad(),
            },
            rev: self.rev.grad(),
            enc_fuse: self.enc_fuse.as_ref().map(|f| CatConvFusionGrad { a: f.a.grad(), b: f.b.grad() }),
            dec_fuse: self.dec_fuse.as_ref().map(|f| CatConvFusionGrad { a: f.a.grad(), b: f.b.grad() }),
        }
    }

    fn check_image(&self, img: &Array3<f32>) -> Result<()> {
        let (c, h, w) = img.dim();
        if c != 3 || h != self.shape.img_h || w != self.shape.img_w {
            return Err(Error::shape(format!(
                "image {c}x{h}x{w}, codec expects 3x{}x{}",
                self.shape.img_h, self.shape.img_w
            )));
        }
        Ok(())
    }

    fn check_message(&self, msg: &Message) -> Result<()> {
        if msg.len() != self.shape.msg_len {
            return Err(Error::shape(format!(
                "message length {} != configured L = {}",
                msg.len(),
                self.shape.msg_len
            )));
        }
        Ok(())
    }

    /// Normalized moment feature map of an image (the decoder's `X1'`).
    pub fn extract_features(&self, img: &Array3<f32>) -> Result<Array3<f32>> {
        Ok(self.extract_features_ctx(img)?.0)
    }

    /// Feature map plus the context needed to push gradients back to pixels.
    pub fn extract_features_ctx(&self, img: &Array3<f32>) -> Result<(Array3<f32>, MomentCtx)> {
        self.check_image(img)?;
        let gray = moments::to_gray(img)?;
        moments::extract_with_ctx(&gray, &self.bank)
    }

    /// Pixel gradient of a loss on the feature map.
    pub fn features_backward(&self, dmap: &Array3<f32>, ctx: &MomentCtx) -> Result<Array3<f32>> {
        let dgray = moments::extract_backward(dmap, ctx, &self.bank)?;
        Ok(moments::to_gray_backward(&dgray))
    }

    /// The soft message code `X2` in `[0, 1]`.
    pub fn process_message(&self, msg: &Message) -> Result<Array3<f32>> {
        self.check_message(msg)?;
        let (c, h, w) = self.shape.key_dims();
        Ok(self.msg_proc.forward_ctx(&msg.to_map(c, h, w)?)?.0)
    }

    /// Hard fusion of two `[0, 1]` maps into key bits.
    fn fuse_encode(&self, x1: &Array3<f32>, x2: &Array3<f32>) -> Result<Array3<u8>> {
        match self.fusion {
            FusionKind::SgXor => crate::sgxor::xor_bits(x1, x2),
            FusionKind::CatConv => {
                let fuse = self.enc_fuse.as_ref().expect("cat_conv codec");
                let (z, _) = fuse.forward_ctx(x1, x2)?;
                Ok(nn::sigmoid(&z).mapv(round_bit))
            }
        }
    }

    /// Derives the verification key. The cover buffer is only read.
    pub fn encode(&self, img: &Array3<f32>, msg: &Message) -> Result<VerificationKey> {
        let x1 = self.extract_features(img)?;
        let x2 = self.process_message(msg)?;
        let bits = self.fuse_encode(&x1, &x2)?;
        Ok(VerificationKey {
            bits,
            version: KEY_VERSION,
            digest: self.weights_digest(),
            seed: None,
        })
    }

    /// Recovers `L` soft bits in `[0, 1]` from a key and an image. Refuses
    /// keys created under different weights.
    pub fn decode(&self, key: &VerificationKey, img: &Array3<f32>) -> Result<Vec<f32>> {
        key.validate()?;
        if key.digest != self.weights_digest() {
            return Err(Error::DigestMismatch);
        }
        self.decode_unchecked(key, img)
    }

    /// Decode without the digest guard, for harness code that re-keys a
    /// codec mid-training.
    pub fn decode_unchecked(&self, key: &VerificationKey, img: &Array3<f32>) -> Result<Vec<f32>> {
        if key.bits.dim() != self.shape.key_dims() {
            return Err(Error::shape(format!(
                "key shape {:?} != configured {:?}",
                key.bits.dim(),
                self.shape.key_dims()
            )));
        }
        let x1p = self.extract_features(img)?;
        let fused = match self.fusion {
            FusionKind::SgXor => {
                crate::sgxor::xor_bits(&x1p, &key.bits_f32())?.mapv(|b| b as f32)
            }
            FusionKind::CatConv => {
                let fuse = self.dec_fuse.as_ref().expect("cat_conv codec");
                fuse.forward_ctx(&x1p, &key.bits_f32())?.0
            }
        };
        Ok(self.rev.forward_ctx(&fused)?.0)
    }

    /// Training forward pass over precomputed feature maps: `x1` from the
    /// cover, `x1p` from the image reaching the decoder. Returns the soft
    /// decoded message.
    pub fn forward_train(
        &self,
        x1: &Array3<f32>,
        x1p: &Array3<f32>,
        msg: &Message,
    ) -> Result<(Vec<f32>, CodecCtx)> {
        self.check_message(msg)?;
        if x1.dim() != self.shape.key_dims() || x1p.dim() != self.shape.key_dims() {
            return Err(Error::shape("forward_train: feature map shape mismatch"));
        }
        let (c, h, w) = self.shape.key_dims();
        let (x2, msg_ctx) = self.msg_proc.forward_ctx(&msg.to_map(c, h, w)?)?;

        let (key_f32, enc_fuse_ctx) = match self.fusion {
            FusionKind::SgXor => {
                let bits = crate::sgxor::xor_bits(x1, &x2)?;
                (bits.mapv(|b| b as f32), None)
            }
            FusionKind::CatConv => {
                let fuse = self.enc_fuse.as_ref().expect("cat_conv codec");
                let (z, fctx) = fuse.forward_ctx(x1, &x2)?;
                let s = nn::sigmoid(&z);
                (s.mapv(|v| round_bit(v) as f32), Some((fctx, s)))
            }
        };

        let (fused2, dec_fuse_ctx) = match self.fusion {
            FusionKind::SgXor => {
                (crate::sgxor::xor_bits(x1p, &key_f32)?.mapv(|b| b as f32), None)
            }
            FusionKind::CatConv => {
                let fuse = self.dec_fuse.as_ref().expect("cat_conv codec");
                let (z, fctx) = fuse.forward_ctx(x1p, &key_f32)?;
                (z, Some(fctx))
            }
        };

        let (m_pre, rev_ctx) = self.rev.forward_ctx(&fused2)?;
        Ok((
            m_pre.clone(),
            CodecCtx {
                x1: x1.clone(),
                x1p: x1p.clone(),
                msg_ctx,
                key_f32,
                enc_fuse_ctx,
                dec_fuse_ctx,
                fused2,
                rev_ctx,
            },
        ))
    }

    /// Training backward pass. Returns gradients for the two feature maps
    /// (cover side, decode side); parameter gradients accumulate into
    /// `grad`.
    pub fn backward_train(
        &self,
        ctx: &CodecCtx,
        dm: &[f32],
        grad: &mut CodecGrad,
    ) -> Result<(Array3<f32>, Array3<f32>)> {
        if dm.len() != self.shape.msg_len {
            return Err(Error::shape("backward_train: gradient length mismatch"));
        }
        let dfused2 = self.rev.backward(&ctx.rev_ctx, dm, &mut grad.rev, ctx.fused2.dim())?;

        let (dx1p, dkey) = match self.fusion {
            FusionKind::SgXor => {
                estimator_backward(self.estimator, &dfused2, &ctx.x1p, &ctx.key_f32, &self.params)?
            }
            FusionKind::CatConv => {
                let fuse = self.dec_fuse.as_ref().expect("cat_conv codec");
                let fctx = ctx.dec_fuse_ctx.as_ref().expect("cat_conv ctx");
                let g = grad.dec_fuse.as_mut().expect("cat_conv grad");
                fuse.backward(fctx, &dfused2, g)?
            }
        };

        let (dx1, dx2) = match self.fusion {
            FusionKind::SgXor => {
                estimator_backward(self.estimator, &dkey, &ctx.x1, &ctx.msg_ctx.x2, &self.params)?
            }
            FusionKind::CatConv => {
                // Hard binarization is straight-through: dkey flows to the
                // sigmoid output unchanged.
                let fuse = self.enc_fuse.as_ref().expect("cat_conv codec");
                let (fctx, s) = ctx.enc_fuse_ctx.as_ref().expect("cat_conv ctx");
                let g = grad.enc_fuse.as_mut().expect("cat_conv grad");
                let dz = nn::sigmoid_backward(&dkey, s);
                fuse.backward(fctx, &dz, g)?
            }
        };

        self.msg_proc.backward(&ctx.msg_ctx, &dx2, &mut grad.msg)?;
        Ok((dx1, dx1p))
    }

    /// Applies accumulated gradients with AdamW, in fixed parameter order.
    pub fn apply_grads(&mut self, grads: &CodecGrad, opt: &mut nn::AdamW) {
        assert!(!self.frozen, "codec is frozen");
        nn::update_conv(opt, &mut self.msg_proc.c1, &grads.msg.c1);
        nn::update_conv(opt, &mut self.msg_proc.c2, &grads.msg.c2);
        nn::update_conv(opt, &mut self.msg_proc.c3, &grads.msg.c3);
        match (&mut self.rev, &grads.rev) {
            (ReverseProcessor::Dense { d }, RevGrad::Dense { d: g }) => nn::update_dense(opt, d, g),
            (ReverseProcessor::Strided { c1, c2 }, RevGrad::Strided { c1: g1, c2: g2 }) => {
                nn::update_conv(opt, c1, g1);
                nn::update_conv(opt, c2, g2);
            }
            _ => panic!("reverse processor gradient kind mismatch"),
        }
        if let (Some(f), Some(g)) = (self.enc_fuse.as_mut(), grads.enc_fuse.as_ref()) {
            nn::update_conv(opt, &mut f.a, &g.a);
            nn::update_conv(opt, &mut f.b, &g.b);
        }
        if let (Some(f), Some(g)) = (self.dec_fuse.as_mut(), grads.dec_fuse.as_ref()) {
            nn::update_conv(opt, &mut f.a, &g.a);
            nn::update_conv(opt, &mut f.b, &g.b);
        }
    }

    /// Named tensors in fixed order, for checkpointing and the key digest.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        let conv = |name: &str, l: &Conv2d, out: &mut Vec<(String, Vec<usize>, Vec<f32>)>| {
            out.push((
                format!("codec.{name}.w"),
                l.w.shape().to_vec(),
                l.w.as_slice().unwrap().to_vec(),
            ));
            out.push((
                format!("codec.{name}.b"),
                l.b.shape().to_vec(),
                l.b.as_slice().unwrap().to_vec(),
            ));
        };
        conv("msg.c1", &self.msg_proc.c1, &mut out);
        conv("msg.c2", &self.msg_proc.c2, &mut out);
        conv("msg.c3", &self.msg_proc.c3, &mut out);
        match &self.rev {
            ReverseProcessor::Dense { d } => {
                out.push((
                    "codec.rev.d.w".into(),
                    d.w.shape().to_vec(),
                    d.w.as_slice().unwrap().to_vec(),
                ));
                out.push((
                    "codec.rev.d.b".into(),
                    d.b.shape().to_vec(),
                    d.b.as_slice().unwrap().to_vec(),
                ));
            }
            ReverseProcessor::Strided { c1, c2 } => {
                conv("rev.c1", c1, &mut out);
                conv("rev.c2", c2, &mut out);
            }
        }
        if let Some(f) = &self.enc_fuse {
            conv("fuse_enc.a", &f.a, &mut out);
            conv("fuse_enc.b", &f.b, &mut out);
        }
        if let Some(f) = &self.dec_fuse {
            conv("fuse_dec.a", &f.a, &mut out);
            conv("fuse_dec.b", &f.b, &mut out);
        }
        out
    }

    /// Restores tensors written by [`Codec::named_tensors`].
    pub fn load_named(&mut self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        fn fill(slice: &mut [f32], t: &(String, Vec<usize>, Vec<f32>), shape: &[usize]) -> Result<()> {
            if t.1 != shape || t.2.len() != slice.len() {
                return Err(Error::MalformedCheckpoint(format!(
                    "tensor {}: shape {:?}, expected {:?}",
                    t.0, t.1, shape
                )));
            }
            slice.copy_from_slice(&t.2);
            Ok(())
        }
        let find = |name: String| -> Result<&(String, Vec<usize>, Vec<f32>)> {
            tensors
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor {name}")))
        };
        let load_conv = |l: &mut Conv2d, name: &str| -> Result<()> {
            let shape = l.w.shape().to_vec();
            fill(l.w.as_slice_mut().unwrap(), find(format!("codec.{name}.w"))?, &shape)?;
            let shape = l.b.shape().to_vec();
            fill(l.b.as_slice_mut().unwrap(), find(format!("codec.{name}.b"))?, &shape)
        };
        load_conv(&mut self.msg_proc.c1, "msg.c1")?;
        load_conv(&mut self.msg_proc.c2, "msg.c2")?;
        load_conv(&mut self.msg_proc.c3, "msg.c3")?;
        match &mut self.rev {
            ReverseProcessor::Dense { d } => {
                let shape = d.w.shape().to_vec();
                fill(d.w.as_slice_mut().unwrap(), find("codec.rev.d.w".into())?, &shape)?;
                let shape = d.b.shape().to_vec();
                fill(d.b.as_slice_mut().unwrap(), find("codec.rev.d.b".into())?, &shape)?;
            }
            ReverseProcessor::Strided { c1, c2 } => {
                load_conv(c1, "rev.c1")?;
                load_conv(c2, "rev.c2")?;
            }
        }
        if let Some(f) = &mut self.enc_fuse {
            load_conv(&mut f.a, "fuse_enc.a")?;
            load_conv(&mut f.b, "fuse_enc.b")?;
        }
        if let Some(f) = &mut self.dec_fuse {
            load_conv(&mut f.a, "fuse_dec.a")?;
            load_conv(&mut f.b, "fuse_dec.b")?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical tensor stream; identifies the weights a
    /// key belongs to. Matches the digest a checkpoint of these tensors
    /// would carry.
    pub fn weights_digest(&self) -> [u8; 32] {
        crate::checkpoint::stream_digest(&self.named_tensors())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_codec(seed: u64, fusion: FusionKind) -> Codec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Codec::new(ModelShape::toy(), fusion, GradEstimator::SgXor, &mut rng).unwrap()
    }

    fn rand_img(shape: &ModelShape, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, shape.img_h, shape.img_w), |_| rng.random_range(0.0f32..1.0))
    }

    #[test]
    fn model_shape_validation() {
        assert!(ModelShape::toy().validate().is_ok());
        assert!(ModelShape::paper().validate().is_ok());
        let bad = ModelShape { msg_len: 65, ..ModelShape::toy() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn message_construction_and_map() {
        assert!(Message::new(vec![0, 1, 2]).is_err());
        assert!(Message::new(vec![]).is_err());
        let m = Message::new(vec![1, 0, 1, 1]).unwrap();
        let map = m.to_map(1, 2, 2).unwrap();
        assert_eq!(map[(0, 0, 0)], 1.0);
        assert_eq!(map[(0, 0, 1)], 0.0);
        assert!(m.to_map(1, 2, 3).is_err());
    }

    #[test]
    fn binarize_examples() {
        let m = binarize_message(&[0.49, 0.5, 0.51]);
        assert_eq!(m.bits(), &[0, 1, 1]);
        let m = binarize_message(&[0.5, 0.5]);
        assert_eq!(m.bits(), &[1, 1]);
        // Idempotent on binary input.
        let again = binarize_message(&m.bits().iter().map(|&b| b as f32).collect::<Vec<_>>());
        assert_eq!(again.bits(), m.bits());
    }

    #[test]
    fn process_message_shape_and_range() {
        let codec = toy_codec(1, FusionKind::SgXor);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let msg = Message::random(64, &mut rng);
        let x2 = codec.process_message(&msg).unwrap();
        assert_eq!(x2.dim(), (1, 8, 8));
        assert!(x2.iter().all(|v| (0.0..=1.0).contains(v)));
        let short = Message::random(63, &mut rng);
        assert!(codec.process_message(&short).is_err());
    }

    #[test]
    fn distinct_messages_make_distinct_codes() {
        let codec = toy_codec(3, FusionKind::SgXor);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = Message::random(64, &mut rng);
            let mut b = Message::random(64, &mut rng);
            while b == a {
                b = Message::random(64, &mut rng);
            }
            let xa = codec.process_message(&a).unwrap().mapv(crate::sgxor::round_bit);
            let xb = codec.process_message(&b).unwrap().mapv(crate::sgxor::round_bit);
            let hamming: usize = xa
                .iter()
                .zip(xb.iter())
                .filter(|(p, q)| p != q)
                .count();
            assert!(hamming > 0, "rounded codes collided");
        }
    }

    #[test]
    fn encode_is_deterministic_and_non_intrusive() {
        let codec = toy_codec(5, FusionKind::SgXor);
        let shape = ModelShape::toy();
        let img = rand_img(&shape, 6);
        let before = img.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let msg = Message::random(64, &mut rng);
        let k1 = codec.encode(&img, &msg).unwrap();
        let k2 = codec.encode(&img, &msg).unwrap();
        assert_eq!(k1, k2);
        assert_eq!(img, before, "cover image was modified");
        assert!(k1.bits.iter().all(|b| *b <= 1));
        assert_eq!(k1.version, KEY_VERSION);
    }

    #[test]
    fn encode_matches_module_composition_oracle() {
        let codec = toy_codec(8, FusionKind::SgXor);
        let shape = ModelShape::toy();
        let img = rand_img(&shape, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let msg = Message::random(64, &mut rng);
        let key = codec.encode(&img, &msg).unwrap();

        let x1 = codec.extract_features(&img).unwrap();
        let x2 = codec.process_message(&msg).unwrap();
        let want = crate::sgxor::xor_bits(&x1, &x2).unwrap();
        assert_eq!(key.bits, want);
    }

    #[test]
    fn key_bit_flips_track_code_bit_flips() {
        let codec = toy_codec(11, FusionKind::SgXor);
        let shape = ModelShape::toy();
        let img = rand_img(&shape, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m1 = Message::random(64, &mut rng);
        let m2 = Message::random(64, &mut rng);
        let k1 = codec.encode(&img, &m1).unwrap();
        let k2 = codec.encode(&img, &m2).unwrap();
        let c1 = codec.process_message(&m1).unwrap().mapv(crate::sgxor::round_bit);
        let c2 = codec.process_message(&m2).unwrap().mapv(crate::sgxor::round_bit);
        // X1 is fixed, so key differences are exactly the code differences.
        let key_diff: Vec<bool> = k1.bits.iter().zip(k2.bits.iter()).map(|(a, b)| a != b).collect();
        let code_diff: Vec<bool> = c1.iter().zip(c2.iter()).map(|(a, b)| a != b).collect();
        assert_eq!(key_diff, code_diff);
    }

    #[test]
    fn decode_range_and_untrained_ber_is_chance() {
        let codec = toy_codec(14, FusionKind::SgXor);
        let shape = ModelShape::toy();
        let img = rand_img(&shape, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut wrong = 0usize;
        let mut total = 0usize;
        for _ in 0..200 {
            let msg = Message::random(64, &mut rng);
            let key = codec.encode(&img, &msg).unwrap();
            let m_pre = codec.decode(&key, &img).unwrap();
            assert_eq!(m_pre.len(), 64);
            assert!(m_pre.iter().all(|v| (0.0..=1.0).contains(v)));
            let dec = binarize_message(&m_pre);
            wrong += dec.bits().iter().zip(msg.bits()).filter(|(a, b)| a != b).count();
            total += 64;
        }
        let ber = wrong as f64 / total as f64;
        // Random messages against an untrained decoder: chance level. The
        // standard error over 12800 bits is ~0.4%.
        assert!((0.45..0.55).contains(&ber), "untrained BER {ber}");
    }

    #[test]
    fn decode_refuses_foreign_digest_and_bad_shapes() {
        let codec = toy_codec(17, FusionKind::SgXor);
        let other = toy_codec(18, FusionKind::SgXor);
        let shape = ModelShape::toy();
        let img = rand_img(&shape, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let msg = Message::random(64, &mut rng);
        let key = codec.encode(&img, &msg).unwrap();
        assert!(matches!(other.decode(&key, &img), Err(Error::DigestMismatch)));
        // Unchecked decode still enforces shapes.
        let mut small = key.clone();
        small.bits = Array3::zeros((1, 4, 4));
        assert!(other.decode_unchecked(&small, &img).is_err());
        // Wrong image size.
        let bad_img = Array3::<f32>::zeros((3, 32, 32));
        assert!(codec.decode(&key, &bad_img).is_err());
        // Non-binary key bits.
        let mut corrupt = key.clone();
        corrupt.bits[(0, 0, 0)] = 2;
        assert!(corrupt.validate().is_err());
    }

    #[test]
    fn weights_digest_tracks_weights() {
        let a = toy_codec(21, FusionKind::SgXor);
        let b = toy_codec(21, FusionKind::SgXor);
        assert_eq!(a.weights_digest(), b.weights_digest());
        let mut c = toy_codec(21, FusionKind::SgXor);
        c.msg_proc.c1.w[(0, 0, 0, 0)] += 1e-3;
        assert_ne!(a.weights_digest(), c.weights_digest());
    }

    #[test]
    fn tensor_roundtrip_preserves_behaviour() {
        let a = toy_codec(22, FusionKind::CatConv);
        let mut b = toy_codec(23, FusionKind::CatConv);
        b.load_named(&a.named_tensors()).unwrap();
        assert_eq!(a.weights_digest(), b.weights_digest());
        let shape = ModelShape::toy();
        let img = rand_img(&shape, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let msg = Message::random(64, &mut rng);
        assert_eq!(a.encode(&img, &msg).unwrap(), b.encode(&img, &msg).unwrap());
        // Fusion kinds carry different tensor sets.
        let mut c = toy_codec(26, FusionKind::SgXor);
        assert!(c.load_named(&a.named_tensors()[..4]).is_err());
    }

    #[test]
    fn forward_train_matches_decode_path() {
        let codec = toy_codec(27, FusionKind::SgXor);
        let shape = ModelShape::toy();
        let img = rand_img(&shape, 28);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let msg = Message::random(64, &mut rng);
        let key = codec.encode(&img, &msg).unwrap();
        let via_decode = codec.decode(&key, &img).unwrap();
        let x1 = codec.extract_features(&img).unwrap();
        let (via_train, _) = codec.forward_train(&x1, &x1, &msg).unwrap();
        assert_eq!(via_decode, via_train);
    }

    #[test]
    fn backward_matches_finite_differences_on_smooth_tail() {
        // Everything downstream of the discrete fusion is smooth, so finite
        // differences are valid for the reverse processor's parameters.
        let mut codec = toy_codec(30, FusionKind::SgXor);
        let shape = ModelShape::toy();
        let img = rand_img(&shape, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let msg = Message::random(64, &mut rng);
        let x1 = codec.extract_features(&img).unwrap();
        let r: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect();

        let loss = |c: &Codec| -> f64 {
            let (m, _) = c.forward_train(&x1, &x1, &msg).unwrap();
            m.iter().zip(&r).map(|(v, g)| (*v as f64) * (*g as f64)).sum()
        };
        let (m_pre, ctx) = codec.forward_train(&x1, &x1, &msg).unwrap();
        assert_eq!(m_pre.len(), 64);
        let mut grad = codec.grad();
        codec.backward_train(&ctx, &r, &mut grad).unwrap();

        let RevGrad::Dense { d } = &grad.rev else { panic!("toy codec uses dense reverse") };
        let h = 1e-3f32;
        for (ri, ci) in [(0usize, 5usize), (17, 30), (63, 63)] {
            let got = d.w[(ri, ci)] as f64;
            let ReverseProcessor::Dense { d: layer } = &mut codec.rev else { unreachable!() };
            layer.w[(ri, ci)] += h;
            let up = loss(&codec);
            let ReverseProcessor::Dense { d: layer } = &mut codec.rev else { unreachable!() };
            layer.w[(ri, ci)] -= 2.0 * h;
            let down = loss(&codec);
            let ReverseProcessor::Dense { d: layer } = &mut codec.rev else { unreachable!() };
            layer.w[(ri, ci)] += h;
            let fd = (up - down) / (2.0 * h as f64);
            assert_relative_eq!(got, fd, max_relative = 2e-2, epsilon = 2e-4);
        }
    }

    /// Several output layers start at zero (reverse processor, message
    /// processor, fusion stacks), so the very first backward pass sends
    /// nothing upstream of them. Connectivity tests give those layers
    /// weights so the whole path is visible.
    fn wake_rev(codec: &mut Codec, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &mut codec.rev {
            ReverseProcessor::Dense { d } => {
                d.w.mapv_inplace(|_| rng.random_range(-0.1f32..0.1));
            }
            ReverseProcessor::Strided { c2, .. } => {
                c2.w.mapv_inplace(|_| rng.random_range(-0.1f32..0.1));
            }
        }
        codec.msg_proc.c3.w.mapv_inplace(|_| rng.random_range(-0.1f32..0.1));
        if let Some(f) = &mut codec.enc_fuse {
            f.b.w.mapv_inplace(|_| rng.random_range(-0.1f32..0.1));
        }
        if let Some(f) = &mut codec.dec_fuse {
            f.b.w.mapv_inplace(|_| rng.random_range(-0.1f32..0.1));
        }
    }

    #[test]
    fn gradients_reach_the_message_processor() {
        let mut codec = toy_codec(33, FusionKind::SgXor);
        wake_rev(&mut codec, 133);
        let shape = ModelShape::toy();
        let img = rand_img(&shape, 34);
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let msg = Message::random(64, &mut rng);
        let x1 = codec.extract_features(&img).unwrap();
        let (_, ctx) = codec.forward_train(&x1, &x1, &msg).unwrap();
        let dm: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut grad = codec.grad();
        let (dx1, dx1p) = codec.backward_train(&ctx, &dm, &mut grad).unwrap();
        assert!(grad.msg.c1.w.iter().any(|v| *v != 0.0), "message processor starved");
        assert!(dx1.iter().all(|v| v.is_finite()));
        assert!(dx1p.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn cat_conv_variant_has_the_same_interfaces() {
        let mut codec = toy_codec(36, FusionKind::CatConv);
        let shape = ModelShape::toy();
        let img = rand_img(&shape, 37);
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let mut wrong = 0usize;
        let mut total = 0usize;
        for _ in 0..100 {
            let msg = Message::random(64, &mut rng);
            let key = codec.encode(&img, &msg).unwrap();
            assert!(key.bits.iter().all(|b| *b <= 1));
            let m_pre = codec.decode(&key, &img).unwrap();
            assert!(m_pre.iter().all(|v| (0.0..=1.0).contains(v)));
            wrong += binarize_message(&m_pre)
                .bits()
                .iter()
                .zip(msg.bits())
                .filter(|(a, b)| a != b)
                .count();
            total += 64;
        }
        let ber = wrong as f64 / total as f64;
        assert!((0.42..0.58).contains(&ber), "untrained BER {ber}");

        // Gradients flow through both fusion stacks.
        wake_rev(&mut codec, 136);
        let x1 = codec.extract_features(&img).unwrap();
        let msg = Message::random(64, &mut rng);
        let (_, ctx) = codec.forward_train(&x1, &x1, &msg).unwrap();
        let dm: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut grad = codec.grad();
        codec.backward_train(&ctx, &dm, &mut grad).unwrap();
        assert!(grad.enc_fuse.as_ref().unwrap().a.w.iter().any(|v| *v != 0.0));
        assert!(grad.dec_fuse.as_ref().unwrap().a.w.iter().any(|v| *v != 0.0));
        assert!(grad.msg.c1.w.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn strided_reverse_processor_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        // 1x16x16 key cells down to L = 16: two stride-2 convs then flatten.
        let rev = ReverseProcessor::new(1, 16, 16, 16, &mut rng).unwrap();
        assert!(matches!(rev, ReverseProcessor::Strided { .. }));
        let fused = Array3::from_shape_fn((1, 16, 16), |_| rng.random_range(0.0f32..1.0));
        let (m, ctx) = rev.forward_ctx(&fused).unwrap();
        assert_eq!(m.len(), 16);
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));

        // Input gradient against finite differences.
        let r: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut grad = rev.grad();
        let dfused = rev.backward(&ctx, &r, &mut grad, fused.dim()).unwrap();
        let h = 1e-3f32;
        for idx in [(0usize, 0usize, 0usize), (0, 7, 9), (0, 15, 15)] {
            let mut p = fused.clone();
            p[idx] += h;
            let mut mnus = fused.clone();
            mnus[idx] -= h;
            let lp: f64 = rev.forward_ctx(&p).unwrap().0.iter().zip(&r).map(|(v, g)| (*v as f64) * (*g as f64)).sum();
            let lm: f64 = rev.forward_ctx(&mnus).unwrap().0.iter().zip(&r).map(|(v, g)| (*v as f64) * (*g as f64)).sum();
            let fd = (lp - lm) / (2.0 * h as f64);
            assert_relative_eq!(dfused[idx] as f64, fd, max_relative = 2e-2, epsilon = 2e-4);
        }

        // Unreachable configurations are rejected.
        assert!(ReverseProcessor::new(1, 16, 16, 15, &mut rng).is_err());
        assert!(ReverseProcessor::new(1, 8, 8, 100, &mut rng).is_err());
    }
}
