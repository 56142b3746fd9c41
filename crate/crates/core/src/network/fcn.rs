use super::NetworkConfig;
use crate::nn::{
    bilinear_upsample, bilinear_upsample_backward, join, BasicBlock, Conv2d, ConvBnAct, Initializer, MaxPool2d, Mode,
    Module, Slot,
};
use crate::tensor::{Real, Tensor};

/// Standard residual encoder (stride-2 stem and max pooling) striding to
/// 1/downsample, a 1x1 projection and one bilinear upsample.
pub struct FcnBaseline<T> {
    config: NetworkConfig,
    stem: ConvBnAct<T>,
    pool: MaxPool2d,
    blocks: Vec<(usize, BasicBlock<T>)>,
    head: Conv2d<T>,
}

impl<T: Real> FcnBaseline<T> {
    pub fn new(config: &NetworkConfig, init: &mut Initializer) -> Self {
        let w = config.width;
        let stem = ConvBnAct::new(config.input_channels, w, 7, 2, true, init);
        let mut blocks = Vec::new();
        let mut in_c = w;
        // Stem and pool give 1/4; stage 2 reaches 1/8 and stage 3 reaches 1/16 if requested.
        for (stage, &count) in config.stage_blocks().iter().enumerate() {
            let out_c = w << stage;
            let strided = stage == 1 || (stage == 2 && config.downsample == 16);
            for b in 0..count {
                let stride = if b == 0 && strided { 2 } else { 1 };
                blocks.push((stage + 1, BasicBlock::new(in_c, out_c, stride, init)));
                in_c = out_c;
            }
        }
        Self {
            config: config.clone(),
            stem,
            pool: MaxPool2d::default(),
            blocks,
            head: Conv2d::new(in_c, 1, 1, 1, 0, true, init),
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.stem.forward(x, mode);
        let mut h = self.pool.forward(&h, mode);
        for (_, b) in &mut self.blocks {
            h = b.forward(&h, mode);
        }
        bilinear_upsample(&self.head.forward(&h, mode), self.config.downsample)
    }

    pub fn backward(&mut self, g_seg: &Tensor<T>) {
        let g = bilinear_upsample_backward(g_seg, self.config.downsample);
        let mut g = self.head.backward(&g);
        for (_, b) in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        let g = self.pool.backward(&g);
        self.stem.backward_params(&g);
    }
}

impl<T: Real> Module<T> for FcnBaseline<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        let mut counts = [0usize; 5];
        for (stage, b) in &mut self.blocks {
            let index = counts[*stage - 1];
            counts[*stage - 1] += 1;
            b.visit(&join(prefix, &format!("layer{stage}.{index}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}
