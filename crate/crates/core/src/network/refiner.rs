use crate::nn::{join, nearest_upsample, nearest_upsample_backward, Conv2d, ConvBnAct, Initializer, Mode, Module, Slot};
use crate::tensor::{Real, Tensor};

/// Level widths at the reference network width of 64.
const BASE_CHANNELS: [usize; 4] = [16, 32, 64, 64];

/// Encoder-decoder over the one-channel probability map that predicts a
/// residual in logit space. Four encoding levels with a x2 stride between
/// consecutive levels, nearest-neighbour upsampling and skip concatenation on
/// the way back, and a zero-initialized output convolution. Level widths
/// scale with the segmentation network width.
pub struct DiResRef<T> {
    channels: [usize; 4],
    enc: Vec<ConvBnAct<T>>,
    dec: Vec<ConvBnAct<T>>,
    out: Conv2d<T>,
}

impl<T: Real> DiResRef<T> {
    pub fn new(width: usize, init: &mut Initializer) -> Self {
        let channels = BASE_CHANNELS.map(|c| (c * width / 64).max(4));
        let mut enc = Vec::new();
        let mut in_c = 1;
        for (i, &c) in channels.iter().enumerate() {
            enc.push(ConvBnAct::new(in_c, c, 3, if i == 0 { 1 } else { 2 }, true, init));
            in_c = c;
        }
        // Decoder level i fuses the upsampled deeper feature with encoder level 2 - i.
        let mut dec = Vec::new();
        for skip in (0..3).rev() {
            dec.push(ConvBnAct::new(in_c + channels[skip], channels[skip], 3, 1, true, init));
            in_c = channels[skip];
        }
        let mut out = Conv2d::new(in_c, 1, 3, 1, 1, true, init);
        out.zero_();
        Self { channels, enc, dec, out }
    }

    pub fn zero_output(&mut self) {
        self.out.zero_();
    }

    /// Residual for the probability map `p` (`1 x N x H x W`, H and W multiples of 8).
    pub fn forward(&mut self, p: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut feats = Vec::with_capacity(self.channels.len());
        let mut h = p.clone();
        for e in &mut self.enc {
            h = e.forward(&h, mode);
            feats.push(h.clone());
        }
        for (i, d) in self.dec.iter_mut().enumerate() {
            let up = nearest_upsample(&h, 2);
            h = d.forward(&Tensor::concat_channels(&up, &feats[2 - i]), mode);
        }
        self.out.forward(&h, mode)
    }

    /// Gradient with respect to the probability map.
    pub fn backward(&mut self, g_residual: &Tensor<T>) -> Tensor<T> {
        let mut g = self.out.backward(g_residual);
        let mut skips: Vec<Option<Tensor<T>>> = vec![None; self.channels.len()];
        for (i, d) in self.dec.iter_mut().enumerate().rev() {
            let g_cat = d.backward(&g);
            let (g_up, g_skip) = g_cat.split_channels(self.channels[3 - i]);
            skips[2 - i] = Some(g_skip);
            g = nearest_upsample_backward(&g_up, 2);
        }
        for (level, e) in self.enc.iter_mut().enumerate().rev() {
            if let Some(s) = skips[level].take() {
                g.add_assign(&s);
            }
            g = e.backward(&g);
        }
        g
    }
}

impl<T: Real> Module<T> for DiResRef<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (i, e) in self.enc.iter_mut().enumerate() {
            e.visit(&join(prefix, &format!("enc.{i}")), f);
        }
        for (i, d) in self.dec.iter_mut().enumerate() {
            d.visit(&join(prefix, &format!("dec.{i}")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }
}
