use super::{join, relu_backward, relu_inplace, BatchNorm2d, Conv2d, ConvTranspose2d, Initializer, Mode, Module, Slot};
use crate::tensor::{Real, Tensor};

/// Convolution, batch normalization and an optional rectifier.
pub struct ConvBnAct<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: bool,
    out: Option<Tensor<T>>,
}

impl<T: Real> ConvBnAct<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        init: &mut Initializer,
    ) -> Self {
        Self {
            conv: Conv2d::new(in_c, out_c, kernel, stride, kernel / 2, false, init),
            bn: BatchNorm2d::new(out_c),
            relu,
            out: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.conv.forward(x, mode);
        let mut y = self.bn.forward(&h, mode);
        if self.relu {
            relu_inplace(&mut y);
            if mode == Mode::Train {
                self.out = Some(y.clone());
            }
        }
        y
    }

    fn backward_pre_conv(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        if self.relu {
            let y = self.out.take().expect("ConvBnAct::backward without forward");
            relu_backward(&mut g, &y);
        }
        self.bn.backward(&g)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.backward_pre_conv(dy);
        self.conv.backward(&g)
    }

    pub fn backward_params(&mut self, dy: &Tensor<T>) {
        let g = self.backward_pre_conv(dy);
        self.conv.backward_params(&g);
    }
}

impl<T: Real> Module<T> for ConvBnAct<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// Two 3x3 convolutions with an identity or 1x1-projection shortcut.
pub struct BasicBlock<T> {
    conv1: ConvBnAct<T>,
    conv2: ConvBnAct<T>,
    shortcut: Option<ConvBnAct<T>>,
    out: Option<Tensor<T>>,
}

impl<T: Real> BasicBlock<T> {
    pub fn new(in_c: usize, out_c: usize, stride: usize, init: &mut Initializer) -> Self {
        let shortcut = (stride != 1 || in_c != out_c).then(|| ConvBnAct::new(in_c, out_c, 1, stride, false, init));
        Self {
            conv1: ConvBnAct::new(in_c, out_c, 3, stride, true, init),
            conv2: ConvBnAct::new(out_c, out_c, 3, 1, false, init),
            shortcut,
            out: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.conv1.forward(x, mode);
        let mut y = self.conv2.forward(&h, mode);
        match &mut self.shortcut {
            Some(s) => y.add_assign(&s.forward(x, mode)),
            None => y.add_assign(x),
        }
        relu_inplace(&mut y);
        if mode == Mode::Train {
            self.out = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("BasicBlock::backward without forward");
        let mut g = dy.clone();
        relu_backward(&mut g, &y);
        let dh = self.conv2.backward(&g);
        let mut dx = self.conv1.backward(&dh);
        match &mut self.shortcut {
            Some(s) => dx.add_assign(&s.backward(&g)),
            None => dx.add_assign(&g),
        }
        dx
    }
}

impl<T: Real> Module<T> for BasicBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }
}

/// A x2 learned upsampling stage: 4x4 stride-2 transposed convolution,
/// batch normalization, rectifier.
pub struct DeconvBnAct<T> {
    deconv: ConvTranspose2d<T>,
    bn: BatchNorm2d<T>,
    out: Option<Tensor<T>>,
}

impl<T: Real> DeconvBnAct<T> {
    pub fn new(in_c: usize, out_c: usize, init: &mut Initializer) -> Self {
        Self {
            deconv: ConvTranspose2d::new(in_c, out_c, 4, 2, 1, false, init),
            bn: BatchNorm2d::new(out_c),
            out: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.deconv.forward(x, mode);
        let mut y = self.bn.forward(&h, mode);
        relu_inplace(&mut y);
        if mode == Mode::Train {
            self.out = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("DeconvBnAct::backward without forward");
        let mut g = dy.clone();
        relu_backward(&mut g, &y);
        let g = self.bn.backward(&g);
        self.deconv.backward(&g)
    }
}

impl<T: Real> Module<T> for DeconvBnAct<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.deconv.visit(&join(prefix, "deconv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}
