//! Segmentation networks: the direction-aware DiResSeg with its DiResRef
//! refinement subnet, and a plain FCN baseline.
//!
//! All tensors use the channel-major `C x N x H x W` layout of
//! [`crate::tensor::Tensor`]; image inputs are expected to be normalized with
//! [`crate::datasets::normalize_pixel`], which maps 8-bit intensities to
//! `[-2, 2]`.

mod checkpoint;
mod diresseg;
mod fcn;
mod refiner;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use diresseg::DiResSeg;
pub use fcn::FcnBaseline;
pub use refiner::DiResRef;

use serde::{Deserialize, Serialize};

use crate::nn::{count_params, join, Mode, Module, Slot};
use crate::tensor::{sigmoid, Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// DiResSeg with its optional heads and refiner.
    DiResNet,
    /// Residual encoder with early striding and one bilinear upsample.
    Fcn,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diresnet" => Ok(Self::DiResNet),
            "fcn" => Ok(Self::Fcn),
            other => Err(Error::Param(format!("unknown architecture {other:?} (expected diresnet or fcn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub architecture: Architecture,
    /// 18 or 34.
    pub backbone_depth: usize,
    /// Output stride of the encoder, 8 or 16.
    pub downsample: usize,
    /// Channels of the first residual stage; later stages use 2x, 4x, 8x.
    pub width: usize,
    pub enable_structure_head: bool,
    pub enable_direction_head: bool,
    pub enable_refiner: bool,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::DiResNet,
            backbone_depth: 18,
            downsample: 8,
            width: 64,
            enable_structure_head: true,
            enable_direction_head: true,
            enable_refiner: true,
            input_channels: 3,
        }
    }
}

impl NetworkConfig {
    pub fn fcn() -> Self {
        Self {
            architecture: Architecture::Fcn,
            enable_structure_head: false,
            enable_direction_head: false,
            enable_refiner: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.backbone_depth, 18 | 34) {
            return Err(Error::Param(format!("backbone_depth must be 18 or 34, got {}", self.backbone_depth)));
        }
        if !matches!(self.downsample, 8 | 16) {
            return Err(Error::Param(format!("downsample must be 8 or 16, got {}", self.downsample)));
        }
        if self.width < 4 || self.width % 4 != 0 {
            return Err(Error::Param(format!("width must be a positive multiple of 4, got {}", self.width)));
        }
        if self.input_channels == 0 {
            return Err(Error::Param("input_channels must be positive".into()));
        }
        if self.architecture == Architecture::Fcn
            && (self.enable_structure_head || self.enable_direction_head || self.enable_refiner)
        {
            return Err(Error::Param("the FCN baseline has no auxiliary heads or refiner".into()));
        }
        Ok(())
    }

    /// Residual blocks per stage.
    pub(crate) fn stage_blocks(&self) -> [usize; 4] {
        if self.backbone_depth == 34 {
            [3, 4, 6, 3]
        } else {
            [2, 2, 2, 2]
        }
    }

    /// Checks that an input of this size can pass through the network.
    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if channels != self.input_channels {
            return Err(Error::Shape(format!(
                "input has {channels} channels but the network expects {}",
                self.input_channels
            )));
        }
        let m = self.downsample;
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::Shape(format!(
                "input size {height}x{width} must be a positive multiple of {m} in both dimensions"
            )));
        }
        Ok(())
    }
}

/// Raw outputs of the segmentation network for a batch.
#[derive(Clone, Debug)]
pub struct LogitsBundle<T> {
    /// `1 x N x H x W`, pre-sigmoid.
    pub seg_logits: Tensor<T>,
    /// `4 x N x H x W`, pre-softmax.
    pub dir_logits: Option<Tensor<T>>,
    /// `1 x N x H/s x W/s`, in `[0, 1]`.
    pub struct_pred: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct RefinedOutput<T> {
    pub residual: Tensor<T>,
    /// `seg_logits + residual`.
    pub refined_logits: Tensor<T>,
    pub refined_prob: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub logits: LogitsBundle<T>,
    pub refined: Option<RefinedOutput<T>>,
}

impl<T: Real> ModelOutput<T> {
    /// Road probability of the last stage: refined if a refiner ran, else `sigmoid(seg_logits)`.
    pub fn final_prob(&self) -> Tensor<T> {
        match &self.refined {
            Some(r) => r.refined_prob.clone(),
            None => self.logits.seg_logits.map(sigmoid),
        }
    }

    /// Road probability before refinement.
    pub fn seg_prob(&self) -> Tensor<T> {
        self.logits.seg_logits.map(sigmoid)
    }

    /// Channelwise sum of the direction logits, a map of learned linear features.
    pub fn direction_salience(&self) -> Option<Tensor<T>> {
        let d = self.logits.dir_logits.as_ref()?;
        let s = d.shape();
        let mut out = Tensor::zeros(s.with_channels(1));
        for n in 0..s.batch {
            for c in 0..s.channels {
                for (o, &v) in out.plane_mut(0, n).iter_mut().zip(d.plane(c, n)) {
                    *o += v;
                }
            }
        }
        Some(out)
    }
}

/// Gradients of a scalar loss with respect to each [`ModelOutput`] tensor.
#[derive(Clone, Debug)]
pub struct OutputGrads<T> {
    pub seg_logits: Tensor<T>,
    pub dir_logits: Option<Tensor<T>>,
    /// With respect to the post-sigmoid structure prediction.
    pub struct_pred: Option<Tensor<T>>,
    pub refined_logits: Option<Tensor<T>>,
}

/// DiResSeg followed by the optional refiner.
pub struct DiResNet<T> {
    pub seg: DiResSeg<T>,
    pub refiner: Option<DiResRef<T>>,
    seg_prob: Option<Tensor<T>>,
}

pub enum Model<T> {
    DiResNet(DiResNet<T>),
    Fcn(FcnBaseline<T>),
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized model; the seed fixes every initial weight.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = crate::nn::Initializer::new(seed);
        Ok(match config.architecture {
            Architecture::DiResNet => Model::DiResNet(DiResNet {
                seg: DiResSeg::new(config, &mut init),
                refiner: config.enable_refiner.then(|| DiResRef::new(config.width, &mut init)),
                seg_prob: None,
            }),
            Architecture::Fcn => Model::Fcn(FcnBaseline::new(config, &mut init)),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        match self {
            Model::DiResNet(m) => m.seg.config(),
            Model::Fcn(m) => m.config(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ModelOutput<T>> {
        let s = x.shape();
        self.config().check_input(s.channels, s.height, s.width)?;
        Ok(match self {
            Model::DiResNet(m) => {
                let logits = m.seg.forward(x, mode);
                let refined = match &mut m.refiner {
                    Some(r) => {
                        let p = logits.seg_logits.map(sigmoid);
                        let residual = r.forward(&p, mode);
                        let mut refined_logits = logits.seg_logits.clone();
                        refined_logits.add_assign(&residual);
                        let refined_prob = refined_logits.map(sigmoid);
                        if mode == Mode::Train {
                            m.seg_prob = Some(p);
                        }
                        Some(RefinedOutput {
                            residual,
                            refined_logits,
                            refined_prob,
                        })
                    }
                    None => None,
                };
                ModelOutput { logits, refined }
            }
            Model::Fcn(m) => ModelOutput {
                logits: LogitsBundle {
                    seg_logits: m.forward(x, mode),
                    dir_logits: None,
                    struct_pred: None,
                },
                refined: None,
            },
        })
    }

    /// Accumulates parameter gradients for the last training-mode forward.
    pub fn backward(&mut self, grads: &OutputGrads<T>) {
        match self {
            Model::DiResNet(m) => {
                let mut g_seg = grads.seg_logits.clone();
                if let (Some(r), Some(g_ref)) = (&mut m.refiner, &grads.refined_logits) {
                    let p = m.seg_prob.take().expect("DiResNet::backward without forward");
                    g_seg.add_assign(g_ref);
                    let g_p = r.backward(g_ref);
                    for ((g, &dp), &pv) in g_seg.data_mut().iter_mut().zip(g_p.data()).zip(p.data()) {
                        *g += dp * pv * (T::one() - pv);
                    }
                }
                m.seg.backward(&g_seg, grads.dir_logits.as_ref(), grads.struct_pred.as_ref());
            }
            Model::Fcn(m) => m.backward(&grads.seg_logits),
        }
    }

    /// Sets the refiner's final layer to zero so refinement starts as the identity.
    pub fn zero_refiner_output(&mut self) {
        if let Model::DiResNet(DiResNet { refiner: Some(r), .. }) = self {
            r.zero_output();
        }
    }
}

impl<T: Real> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", self.config()).finish_non_exhaustive()
    }
}

impl<T: Real> Module<T> for Model<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        match self {
            Model::DiResNet(m) => {
                m.seg.visit(&join(prefix, "seg"), f);
                if let Some(r) = &mut m.refiner {
                    r.visit(&join(prefix, "refiner"), f);
                }
            }
            Model::Fcn(m) => m.visit(&join(prefix, "fcn"), f),
        }
    }
}

/// Trainable scalar count of the model described by `config`.
pub fn count_parameters(config: &NetworkConfig) -> Result<usize> {
    let mut model = Model::<f32>::new(config, 0)?;
    Ok(count_params(&mut model))
}
