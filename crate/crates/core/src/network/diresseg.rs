use super::{LogitsBundle, NetworkConfig};
use crate::nn::{join, BasicBlock, Conv2d, ConvBnAct, DeconvBnAct, Initializer, Mode, Module, Slot};
use crate::tensor::{sigmoid, Real, Tensor};

/// Residual encoder with a stride-1 stem and striding at the entries of
/// stages 2-4 (plus one extra unit for 1/16), a short transposed-convolution
/// decoder, and segmentation, direction and structure heads.
pub struct DiResSeg<T> {
    config: NetworkConfig,
    stem: ConvBnAct<T>,
    /// `(stage, block)` pairs in forward order; stage 5 is the extra 1/16 unit.
    blocks: Vec<(usize, BasicBlock<T>)>,
    decoder: Vec<DeconvBnAct<T>>,
    seg_head: Conv2d<T>,
    dir_head: Option<Conv2d<T>>,
    struct_head: Option<Conv2d<T>>,
    struct_out: Option<Tensor<T>>,
}

impl<T: Real> DiResSeg<T> {
    pub fn new(config: &NetworkConfig, init: &mut Initializer) -> Self {
        let w = config.width;
        let stem = ConvBnAct::new(config.input_channels, w, 7, 1, true, init);
        let mut blocks = Vec::new();
        let mut in_c = w;
        for (stage, &count) in config.stage_blocks().iter().enumerate() {
            let out_c = w << stage;
            for b in 0..count {
                let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                blocks.push((stage + 1, BasicBlock::new(in_c, out_c, stride, init)));
                in_c = out_c;
            }
        }
        if config.downsample == 16 {
            blocks.push((5, BasicBlock::new(in_c, in_c, 2, init)));
        }
        let deep = in_c;
        let stages = if config.downsample == 16 { 4 } else { 3 };
        let mut decoder = Vec::new();
        let mut c = deep;
        for i in 0..stages {
            let out_c = 2 * w >> i;
            decoder.push(DeconvBnAct::new(c, out_c, init));
            c = out_c;
        }
        Self {
            config: config.clone(),
            stem,
            blocks,
            decoder,
            seg_head: Conv2d::new(c, 1, 1, 1, 0, true, init),
            dir_head: config
                .enable_direction_head
                .then(|| Conv2d::new(c, crate::label_gen::N_DIRECTIONS, 3, 1, 1, true, init)),
            struct_head: config
                .enable_structure_head
                .then(|| Conv2d::new(deep, 1, 1, 1, 0, true, init)),
            struct_out: None,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Zeroes the segmentation, direction and structure projections.
    pub fn zero_heads(&mut self) {
        self.seg_head.zero_();
        if let Some(h) = &mut self.dir_head {
            h.zero_();
        }
        if let Some(h) = &mut self.struct_head {
            h.zero_();
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> LogitsBundle<T> {
        let mut h = self.stem.forward(x, mode);
        for (_, b) in &mut self.blocks {
            h = b.forward(&h, mode);
        }
        let struct_pred = self.struct_head.as_mut().map(|head| {
            let p = head.forward(&h, mode).map(sigmoid);
            if mode == Mode::Train {
                self.struct_out = Some(p.clone());
            }
            p
        });
        for d in &mut self.decoder {
            h = d.forward(&h, mode);
        }
        LogitsBundle {
            seg_logits: self.seg_head.forward(&h, mode),
            dir_logits: self.dir_head.as_mut().map(|head| head.forward(&h, mode)),
            struct_pred,
        }
    }

    /// Backward pass given gradients for the seg logits, the direction logits
    /// and the post-sigmoid structure prediction.
    pub fn backward(&mut self, g_seg: &Tensor<T>, g_dir: Option<&Tensor<T>>, g_struct: Option<&Tensor<T>>) {
        let mut g = self.seg_head.backward(g_seg);
        if let Some(head) = &mut self.dir_head {
            match g_dir {
                Some(gd) => g.add_assign(&head.backward(gd)),
                None => {
                    let zero = Tensor::zeros(g_seg.shape().with_channels(head.out_channels()));
                    head.backward(&zero);
                }
            }
        }
        for d in self.decoder.iter_mut().rev() {
            g = d.backward(&g);
        }
        if let Some(head) = &mut self.struct_head {
            let p = self.struct_out.take().expect("DiResSeg::backward without forward");
            let gz = match g_struct {
                Some(gs) => {
                    let mut gz = gs.clone();
                    for (v, &pv) in gz.data_mut().iter_mut().zip(p.data()) {
                        *v *= pv * (T::one() - pv);
                    }
                    gz
                }
                None => Tensor::zeros(p.shape()),
            };
            g.add_assign(&head.backward(&gz));
        }
        for (_, b) in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        self.stem.backward_params(&g);
    }
}

impl<T: Real> Module<T> for DiResSeg<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        let mut index = 0;
        let mut last = 0;
        for (stage, b) in &mut self.blocks {
            if *stage != last {
                index = 0;
                last = *stage;
            }
            b.visit(&join(prefix, &format!("layer{stage}.{index}")), f);
            index += 1;
        }
        for (i, d) in self.decoder.iter_mut().enumerate() {
            d.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.seg_head.visit(&join(prefix, "seg_head"), f);
        if let Some(h) = &mut self.dir_head {
            h.visit(&join(prefix, "dir_head"), f);
        }
        if let Some(h) = &mut self.struct_head {
            h.visit(&join(prefix, "struct_head"), f);
        }
    }
}
