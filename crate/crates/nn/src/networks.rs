//! The two-head segmentation/detection network G1, the counting network G2 and the
//! output-space discriminator D.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{leaky_relu, max_pool2};
use crate::params::{Conv, ParamStore};

/// Count maps are `softplus(v) * COUNT_DENSITY_SCALE`, so a unit-scale pre-activation
/// near zero already corresponds to one object per 256 pixels and `v` stays out of the
/// flat tail of the softplus during training.
const COUNT_DENSITY_SCALE: f64 = 1.0 / 256.0;
/// Initial bias of the count maps: background starts near zero density (about 0.16
/// objects per 128x128 window), so training only has to raise it under objects.
const COUNT_BIAS_INIT: f64 = -6.0;
/// Input intensities are mapped to `(x - 0.5) * INPUT_SCALE`.
const INPUT_SCALE: f64 = 4.0;
/// Negative slope of the discriminator activations.
const DISC_SLOPE: f64 = 0.2;
/// Negative slope of the segmentation network activations.
const NET_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// 3x3 convolution and LeakyReLU.
    Standard,
    /// Parallel 1x3 and 3x1 convolutions, summed, followed by a 1x1 projection.
    Factorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub block_kind: BlockKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 4,
            block_kind: BlockKind::Factorized,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.base_channels < 8 {
            return Err(Error::Config(format!(
                "base_channels must be at least 8, got {}",
                self.base_channels
            )));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be padded to a multiple of this.
    pub fn granularity(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? + x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?
}

#[derive(Debug, Clone)]
enum Block {
    Standard(Conv),
    Factorized { row: Conv, col: Conv, proj: Conv },
}

impl Block {
    fn new(
        store: &mut ParamStore,
        name: &str,
        kind: BlockKind,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::Standard => Block::Standard(Conv::new(
                store,
                &format!("{name}.conv"),
                c_in,
                c_out,
                (3, 3),
                0.0,
                rng,
            )?),
            BlockKind::Factorized => Block::Factorized {
                row: Conv::new(store, &format!("{name}.row"), c_in, c_out, (1, 3), 0.0, rng)?,
                col: Conv::new(store, &format!("{name}.col"), c_in, c_out, (3, 1), 0.0, rng)?,
                proj: Conv::new(store, &format!("{name}.proj"), c_out, c_out, (1, 1), 0.0, rng)?,
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Block::Standard(conv) => leaky_relu(&conv.forward(x)?, NET_SLOPE)?,
            Block::Factorized { row, col, proj } => {
                let h = leaky_relu(&(row.forward(x)? + col.forward(x)?)?, NET_SLOPE)?;
                leaky_relu(&proj.forward(&h)?, NET_SLOPE)?
            }
        })
    }
}

/// U-shaped encoder-decoder: two blocks per level, max-pool down, nearest upsampling and
/// skip concatenation up.
#[derive(Debug, Clone)]
struct Trunk {
    cfg: NetworkConfig,
    down: Vec<[Block; 2]>,
    up: Vec<[Block; 2]>,
}

impl Trunk {
    fn new(store: &mut ParamStore, cfg: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let k = cfg.block_kind;
        let mut down = Vec::new();
        for l in 0..cfg.depth {
            let c_in = if l == 0 { 1 } else { cfg.channels(l - 1) };
            let c = cfg.channels(l);
            down.push([
                Block::new(store, &format!("trunk.down{l}.a"), k, c_in, c, rng)?,
                Block::new(store, &format!("trunk.down{l}.b"), k, c, c, rng)?,
            ]);
        }
        let mut up = Vec::new();
        for l in (0..cfg.depth - 1).rev() {
            let c = cfg.channels(l);
            up.push([
                Block::new(store, &format!("trunk.up{l}.a"), k, c + cfg.channels(l + 1), c, rng)?,
                Block::new(store, &format!("trunk.up{l}.b"), k, c, c, rng)?,
            ]);
        }
        Ok(Self { cfg, down, up })
    }

    /// `x: [B, 1, H, W]` to features `[B, base, H, W]`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let g = self.cfg.granularity();
        let (hp, wp) = (h.div_ceil(g) * g, w.div_ceil(g) * g);
        // Intensities in [0, 1] are centered so the first layer sees zero-mean input.
        let x = x.affine(INPUT_SCALE, -0.5 * INPUT_SCALE)?;
        let mut cur = if (hp, wp) != (h, w) {
            x.pad_with_zeros(2, 0, hp - h)?.pad_with_zeros(3, 0, wp - w)?
        } else {
            x
        };
        let mut skips = Vec::new();
        for (l, [a, b]) in self.down.iter().enumerate() {
            if l > 0 {
                cur = max_pool2(&cur)?;
            }
            cur = b.forward(&a.forward(&cur)?)?;
            skips.push(cur.clone());
        }
        skips.pop();
        for [a, b] in &self.up {
            let skip = skips.pop().expect("one skip per decoder level");
            let (_, _, sh, sw) = skip.dims4()?;
            cur = Tensor::cat(&[&cur.upsample_nearest2d(sh, sw)?, &skip], 1)?;
            cur = b.forward(&a.forward(&cur)?)?;
        }
        if (hp, wp) != (h, w) {
            cur = cur.narrow(2, 0, h)?.narrow(3, 0, w)?;
        }
        Ok(cur)
    }
}

/// Non-negative 1-channel map summed over space: `[B, C, H, W]` to `[B]`.
#[derive(Debug, Clone)]
struct CountReadout {
    block: Block,
    out: Conv,
}

impl CountReadout {
    fn new(store: &mut ParamStore, name: &str, cfg: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.base_channels;
        Ok(Self {
            block: Block::new(store, &format!("{name}.block"), cfg.block_kind, c, c, rng)?,
            out: Conv::new(store, &format!("{name}.out"), c, 1, (1, 1), COUNT_BIAS_INIT, rng)?,
        })
    }

    /// `[B, 1, H, W]` non-negative density.
    fn density(&self, feats: &Tensor) -> Result<Tensor> {
        Ok((softplus(&self.out.forward(&self.block.forward(feats)?)?)? * COUNT_DENSITY_SCALE)?)
    }

    fn forward(&self, feats: &Tensor) -> Result<Tensor> {
        Ok(self.density(feats)?.flatten_from(1)?.sum(1)?)
    }
}

/// Outputs of one G1 forward pass.
#[derive(Debug, Clone)]
pub struct G1Output {
    /// Per-pixel class log-probabilities `[B, 2, H, W]`; channel 1 is foreground.
    pub log_probs: Tensor,
    /// Raw detection map `[B, 1, H, W]`.
    pub heatmap: Tensor,
    /// Count estimates `[B]`.
    pub count: Tensor,
}

impl G1Output {
    pub fn probs(&self) -> Result<Tensor> {
        Ok(self.log_probs.exp()?)
    }

    /// Detection map clamped to `[0, inf)`.
    pub fn heatmap_clamped(&self) -> Result<Tensor> {
        Ok(self.heatmap.relu()?)
    }
}

/// Shared trunk with a segmentation head, a detection head and a counting readout on
/// the detection features.
#[derive(Debug, Clone)]
pub struct G1 {
    cfg: NetworkConfig,
    store: ParamStore,
    trunk: Trunk,
    seg_block: Block,
    seg_out: Conv,
    det_blocks: [Block; 2],
    det_out: Conv,
    count: CountReadout,
}

impl G1 {
    pub fn new(cfg: NetworkConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let s = &mut store;
        let (c, k) = (cfg.base_channels, cfg.block_kind);
        let trunk = Trunk::new(s, cfg, &mut rng)?;
        let seg_block = Block::new(s, "seg.block", k, c, c, &mut rng)?;
        let seg_out = Conv::new(s, "seg.out", c, 2, (1, 1), 0.0, &mut rng)?;
        let det_blocks = [
            Block::new(s, "det.block0", k, c, c, &mut rng)?,
            Block::new(s, "det.block1", k, c, c, &mut rng)?,
        ];
        let det_out = Conv::new(s, "det.out", c, 1, (1, 1), 0.0, &mut rng)?;
        let count = CountReadout::new(s, "count", cfg, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            trunk,
            seg_block,
            seg_out,
            det_blocks,
            det_out,
            count,
        })
    }

    pub fn config(&self) -> NetworkConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `x: [B, 1, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<G1Output> {
        let feats = self.trunk.forward(x)?;
        let logits = self.seg_out.forward(&self.seg_block.forward(&feats)?)?;
        let diff = (logits.narrow(1, 1, 1)? - logits.narrow(1, 0, 1)?)?;
        // Two-class log-softmax: log p_bg = -softplus(l_fg - l_bg), log p_fg = -softplus(l_bg - l_fg).
        let log_probs = Tensor::cat(&[&softplus(&diff)?.neg()?, &softplus(&diff.neg()?)?.neg()?], 1)?;
        let det_feats = self.det_blocks[1].forward(&self.det_blocks[0].forward(&feats)?)?;
        let heatmap = self.det_out.forward(&det_feats)?;
        let count = self.count.forward(&det_feats)?;
        Ok(G1Output {
            log_probs,
            heatmap,
            count,
        })
    }
}

/// Counting network: the G1 trunk family with a global-integration head.
#[derive(Debug, Clone)]
pub struct G2 {
    cfg: NetworkConfig,
    store: ParamStore,
    trunk: Trunk,
    head: CountReadout,
}

impl G2 {
    pub fn new(cfg: NetworkConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let trunk = Trunk::new(&mut store, cfg, &mut rng)?;
        let head = CountReadout::new(&mut store, "head", cfg, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            trunk,
            head,
        })
    }

    /// Copies the trunk parameters of `g1`; the architectures must agree.
    pub fn init_from_g1(&self, g1: &G1) -> Result<()> {
        if g1.cfg != self.cfg {
            return Err(Error::Validation(format!(
                "G1 trunk {:?} does not match G2 trunk {:?}",
                g1.cfg, self.cfg
            )));
        }
        self.store.assign(&g1.store.snapshot()?, Some("trunk."))
    }

    pub fn config(&self) -> NetworkConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `x: [B, 1, H, W]` to count estimates `[B]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.trunk.forward(x)?)
    }

    /// Per-pixel density `[B, 1, H, W]` whose spatial sum is the count estimate.
    pub fn density(&self, x: &Tensor) -> Result<Tensor> {
        self.head.density(&self.trunk.forward(x)?)
    }

    /// Count estimate for one image, without gradient tracking.
    pub fn predict(&self, image: &ndarray::Array2<f32>) -> Result<f64> {
        crate::ops::flush_denormals();
        let x = image_tensor(image, self.store.dtype())?;
        Ok(self.forward(&x)?.detach().to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }
}

/// Fully-convolutional patch classifier over 2-channel probability maps: five stride-2
/// 3x3 convolutions with widths `w, 2w, 4w, 8w, 1` and LeakyReLU between them.
#[derive(Debug, Clone)]
pub struct Discriminator {
    store: ParamStore,
    convs: Vec<Conv>,
}

impl Discriminator {
    pub fn new(width: usize, dtype: DType, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("discriminator width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let widths = [2, width, 2 * width, 4 * width, 8 * width, 1];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv::new(&mut store, &format!("disc.conv{i}"), w[0], w[1], (3, 3), 0.0, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { store, convs })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `probs: [B, 2, H, W]` to patch logits `[B, 1, ceil(H/32), ceil(W/32)]`.
    pub fn forward(&self, probs: &Tensor) -> Result<Tensor> {
        let mut x = probs.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward_strided(&x, 2)?;
            if i + 1 < self.convs.len() {
                x = leaky_relu(&x, DISC_SLOPE)?;
            }
        }
        Ok(x)
    }
}

/// One image as a `[1, 1, H, W]` tensor.
pub fn image_tensor(image: &ndarray::Array2<f32>, dtype: DType) -> Result<Tensor> {
    let (h, w) = image.dim();
    let data: Vec<f32> = image.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks equally sized images into `[B, 1, H, W]`.
pub fn batch_tensor(images: &[&ndarray::Array2<f32>], dtype: DType) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|im| image_tensor(im, dtype))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// `[H, W]` array from channel `c` of image `b` of a `[B, C, H, W]` tensor.
pub fn to_array(t: &Tensor, b: usize, c: usize) -> Result<ndarray::Array2<f32>> {
    let (_, _, h, w) = t.dims4()?;
    let v = t
        .get(b)?
        .get(c)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok(ndarray::Array2::from_shape_vec((h, w), v).expect("tensor size matches"))
}
