//! Auxiliary supervision targets derived from a binary road mask: the
//! quantized local road direction of every road pixel, and the area-averaged
//! low-resolution structure map.
//!
//! The direction of a road pixel is found with angular operators: for each
//! probe angle `theta = k * pi / n` the operator counts road pixels at the
//! rounded offsets `±(rho sin theta, rho cos theta)`, `rho = 1..=r`, and the
//! angle with the largest count wins. Rows grow downwards, so `theta = 0`
//! points along a row and `theta = pi/4` along the main diagonal.
//!
//! Two implementations are provided. [`direction_map_reference`] is a
//! per-pixel loop; [`direction_map_conv`] runs one correlation layer with
//! fixed weights (one output channel per probe angle) and is the one used to
//! generate labels during training. Both produce identical maps.

use std::f64::consts::PI;

use crate::nn::{Conv2d, Mode};
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Number of quantized direction classes; class 4 marks non-road pixels.
pub const N_DIRECTIONS: usize = 4;
pub const NON_ROAD: u8 = N_DIRECTIONS as u8;

/// Ground-truth road raster with values in `{0, 1}`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask dimensions must be >= 1, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| false)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be >= 1");
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, road: bool) {
        self.data[i * self.width + j] = road as u8;
    }

    /// Zero outside the raster.
    pub fn sample(&self, i: isize, j: isize) -> u32 {
        if i < 0 || j < 0 || i >= self.height as isize || j >= self.width as isize {
            0
        } else {
            self.get(i as usize, j as usize) as u32
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| 1 - v).collect(),
            ..self.clone()
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |i, j| self.get(i, self.width - 1 - j) == 1)
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |i, j| self.get(self.height - 1 - i, j) == 1)
    }

    /// Rotates by 90 degrees clockwise; the result is `width x height`.
    pub fn rotate90(&self) -> Self {
        Self::from_fn(self.width, self.height, |i, j| self.get(self.height - 1 - j, i) == 1)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "crop outside mask");
        Self::from_fn(height, width, |i, j| self.get(top + i, left + j) == 1)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Parameters of the angular operators: detection radius and angle step
/// `pi / divisions`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectionParams {
    radius: usize,
    divisions: usize,
}

impl Default for DirectionParams {
    fn default() -> Self {
        Self {
            radius: 9,
            divisions: 16,
        }
    }
}

impl DirectionParams {
    /// `angle_step` must divide `pi` an integer number of times.
    pub fn new(radius: usize, angle_step: f64) -> Result<Self> {
        if !(angle_step > 0.0 && angle_step <= PI) {
            return Err(Error::Param(format!("angle step {angle_step} outside (0, pi]")));
        }
        let n = (PI / angle_step).round();
        if (n * angle_step - PI).abs() > 1e-9 {
            return Err(Error::Param(format!("angle step {angle_step} does not divide pi")));
        }
        Self::from_divisions(radius, n as usize)
    }

    pub fn from_divisions(radius: usize, divisions: usize) -> Result<Self> {
        if radius == 0 {
            return Err(Error::Param("direction radius must be >= 1".into()));
        }
        if divisions == 0 {
            return Err(Error::Param("angle step divisions must be >= 1".into()));
        }
        Ok(Self { radius, divisions })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn divisions(&self) -> usize {
        self.divisions
    }

    pub fn angle_step(&self) -> f64 {
        PI / self.divisions as f64
    }

    /// Positive-side probe offsets `(di, dj)` for every probe angle, `rho = 1..=r`.
    pub fn probe_offsets(&self) -> Vec<Vec<(isize, isize)>> {
        (0..self.divisions)
            .map(|k| {
                let theta = k as f64 * PI / self.divisions as f64;
                (1..=self.radius)
                    .map(|rho| {
                        let rho = rho as f64;
                        // f64::round rounds half away from zero.
                        ((rho * theta.sin()).round() as isize, (rho * theta.cos()).round() as isize)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Per-pixel direction class in `0..=4`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionMap {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl DirectionMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Shape(format!(
                "direction map of {height}x{width} needs {} values, got {}",
                height * width,
                classes.len()
            )));
        }
        if let Some(c) = classes.iter().find(|&&c| c > NON_ROAD) {
            return Err(Error::Data(format!("direction class {c} outside 0..=4")));
        }
        Ok(Self { height, width, classes })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.classes[i * self.width + j]
    }
}

/// Picks the winning direction class from the per-angle operator responses.
///
/// With a unique maximum the winning angle is used directly. Several tied
/// maxima are replaced by the midpoint of the shortest circular arc (angles
/// live modulo pi) that covers all of them. If several arcs are equally short,
/// the midpoint best aligned with the doubled-angle resultant of all responses
/// wins. The angle is then rounded to the nearest of `{0, pi/4, pi/2, 3pi/4}`
/// modulo pi, and an angle exactly between two of them goes to the diagonal
/// class (1 or 3). Ties that survive all of this are settled by
/// [`symmetric_fallback`].
///
/// Every step commutes with mirroring and quarter-turn rotation of the mask,
/// except at pixels whose responses are unchanged by a quarter turn.
pub fn resolve_direction(scores: &[u32]) -> u8 {
    let n = scores.len();
    assert!(n > 0, "no probe angles");
    let best = *scores.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..n).filter(|&k| scores[k] == best).collect();

    // Twice the winning angle index, so arc midpoints stay integral.
    let twice = if tied.len() == 1 {
        2 * tied[0]
    } else {
        let m = tied.len();
        let gaps: Vec<usize> = (0..m).map(|i| (tied[(i + 1) % m] + n - tied[i]) % n).collect();
        let widest = *gaps.iter().max().expect("non-empty");
        let midpoints: Vec<usize> = (0..m)
            .filter(|&i| gaps[i] == widest)
            .map(|i| (2 * tied[(i + 1) % m] + (n - widest)) % (2 * n))
            .collect();
        let chosen = if midpoints.len() == 1 {
            Some(midpoints[0])
        } else {
            best_aligned(scores, &midpoints)
        };
        match chosen {
            Some(t) => t,
            None => return symmetric_fallback(scores),
        }
    };
    class_of(twice, n)
}

/// Class of the angle `twice * pi / (2n)`.
fn class_of(twice: usize, n: usize) -> u8 {
    // Class position is 4 * angle / pi = 2 * twice / n; round it, with
    // exact halves going to the odd neighbour.
    let t = 4 * twice + n;
    let class = if t % (2 * n) == 0 {
        let upper = t / (2 * n);
        if upper % 2 == 1 {
            upper
        } else {
            upper - 1
        }
    } else {
        t / (2 * n)
    };
    (class % N_DIRECTIONS) as u8
}

/// Symmetries of the probe angles: identity, mirror `theta -> -theta`,
/// quarter turn `theta -> theta + pi/2` and their product, acting on
/// responses and on classes.
#[derive(Clone, Copy)]
enum Symmetry {
    Identity,
    Mirror,
    Turn,
    MirrorTurn,
}

impl Symmetry {
    fn apply(self, s: &[u32]) -> Vec<u32> {
        let n = s.len();
        let mirror = |v: &[u32]| (0..n).map(|k| v[(n - k) % n]).collect::<Vec<_>>();
        let turn = |v: &[u32]| (0..n).map(|k| v[(k + n / 2) % n]).collect::<Vec<_>>();
        match self {
            Symmetry::Identity => s.to_vec(),
            Symmetry::Mirror => mirror(s),
            Symmetry::Turn => turn(s),
            Symmetry::MirrorTurn => turn(&mirror(s)),
        }
    }

    /// Each symmetry is its own inverse on classes.
    fn map_class(self, c: u8) -> u8 {
        match self {
            Symmetry::Identity => c,
            Symmetry::Mirror => (4 - c) % 4,
            Symmetry::Turn => (c + 2) % 4,
            Symmetry::MirrorTurn => (6 - c) % 4,
        }
    }
}

/// Last-resort tie rule. The responses are brought to the lexicographically
/// smallest of their mirrored and rotated images, the smallest tied angle of
/// that representative is taken, moved to a class its own symmetries fix,
/// and mapped back. Classes therefore follow mirroring and rotation whenever
/// any assignment can.
pub fn symmetric_fallback(scores: &[u32]) -> u8 {
    let n = scores.len();
    let group: &[Symmetry] = if n % 2 == 0 {
        &[Symmetry::Identity, Symmetry::Mirror, Symmetry::Turn, Symmetry::MirrorTurn]
    } else {
        &[Symmetry::Identity, Symmetry::Mirror]
    };
    let (g, rep) = group
        .iter()
        .map(|&g| (g, g.apply(scores)))
        .min_by(|a, b| a.1.cmp(&b.1))
        .expect("non-empty group");
    let fixed_by = |h: Symmetry| h.apply(&rep) == rep;
    let best = *rep.iter().max().expect("non-empty");
    let first = rep.iter().position(|&v| v == best).expect("non-empty");
    let mut class = class_of(2 * first, n);
    if fixed_by(Symmetry::Mirror) {
        if class % 2 == 1 {
            class = if n % 2 == 0 && rep[n / 2] > rep[0] { 2 } else { 0 };
        }
    } else if n % 2 == 0 && fixed_by(Symmetry::MirrorTurn) && class % 2 == 0 {
        class = if n % 4 == 0 && rep[3 * n / 4] > rep[n / 4] { 3 } else { 1 };
    }
    g.map_class(class)
}

fn scores_at(mask: &BinaryMask, offsets: &[Vec<(isize, isize)>], i: usize, j: usize, scores: &mut [u32]) {
    let (ii, jj) = (i as isize, j as isize);
    for (score, probe) in scores.iter_mut().zip(offsets) {
        *score = probe
            .iter()
            .map(|&(di, dj)| mask.sample(ii + di, jj + dj) + mask.sample(ii - di, jj - dj))
            .sum();
    }
}

/// Angular operator responses at one pixel, one per probe angle.
pub fn angular_scores(mask: &BinaryMask, params: &DirectionParams, i: usize, j: usize) -> Vec<u32> {
    let mut scores = vec![0; params.divisions()];
    scores_at(mask, &params.probe_offsets(), i, j, &mut scores);
    scores
}

/// True when shifting the responses by a quarter turn leaves them unchanged.
/// No class assignment can follow a 90 degree rotation at such a pixel.
pub fn quarter_turn_periodic(scores: &[u32]) -> bool {
    let n = scores.len();
    n % 2 == 0 && (0..n).all(|k| scores[k] == scores[(k + n / 2) % n])
}

/// Among candidate angles (in half probe steps) picks the one best aligned
/// with the doubled-angle resultant of all responses, or `None` on a tie.
///
/// The cosine table is exactly even and terms are summed in sorted order, so
/// mirrored or rotated responses produce bit-identical alignments.
fn best_aligned(scores: &[u32], candidates: &[usize]) -> Option<usize> {
    let n = scores.len();
    let cos: Vec<f64> = (0..2 * n)
        .map(|d| {
            let d = d.min(2 * n - d);
            (PI * d as f64 / n as f64).cos()
        })
        .collect();
    let align = |t: usize| {
        let mut terms: Vec<f64> = (0..n)
            .map(|k| scores[k] as f64 * cos[(2 * k + 2 * n - t) % (2 * n)])
            .collect();
        terms.sort_by(f64::total_cmp);
        terms.iter().sum::<f64>()
    };
    let a: Vec<f64> = candidates.iter().map(|&t| align(t)).collect();
    let top = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut winners = candidates.iter().zip(&a).filter(|(_, &v)| v == top);
    match (winners.next(), winners.next()) {
        (Some((&t, _)), None) => Some(t),
        _ => None,
    }
}

/// Per-pixel loop over the angular operators.
pub fn direction_map_reference(mask: &BinaryMask, params: &DirectionParams) -> DirectionMap {
    let offsets = params.probe_offsets();
    let mut scores = vec![0u32; params.divisions()];
    let mut classes = Vec::with_capacity(mask.height() * mask.width());
    for i in 0..mask.height() {
        for j in 0..mask.width() {
            if mask.get(i, j) == 0 {
                classes.push(NON_ROAD);
                continue;
            }
            scores_at(mask, &offsets, i, j, &mut scores);
            classes.push(resolve_direction(&scores));
        }
    }
    DirectionMap {
        height: mask.height(),
        width: mask.width(),
        classes,
    }
}

/// Fixed correlation kernels `[divisions, 1, 2r+1, 2r+1]`. An entry counts how
/// many probe samples land on that offset.
pub fn angular_kernels(params: &DirectionParams) -> Vec<f32> {
    let r = params.radius() as isize;
    let size = (2 * r + 1) as usize;
    let mut kernels = vec![0.0f32; params.divisions() * size * size];
    for (k, probe) in params.probe_offsets().iter().enumerate() {
        let kernel = &mut kernels[k * size * size..(k + 1) * size * size];
        for &(di, dj) in probe {
            kernel[((r + di) as usize) * size + (r + dj) as usize] += 1.0;
            kernel[((r - di) as usize) * size + (r - dj) as usize] += 1.0;
        }
    }
    kernels
}

/// Largest im2col buffer (in elements) a single band may allocate.
const BAND_BUDGET: usize = 1 << 24;

/// Angular operators as a fixed-weight correlation layer followed by a
/// per-pixel argmax. Large masks are processed in row bands with an `r`-row
/// halo so memory stays bounded.
pub fn direction_map_conv(mask: &BinaryMask, params: &DirectionParams) -> DirectionMap {
    let n = params.divisions();
    let r = params.radius();
    let size = 2 * r + 1;
    let mut layer = Conv2d::<f32>::from_weights(1, n, size, 1, r, angular_kernels(params), None);
    let (h, w) = (mask.height(), mask.width());
    let band = (BAND_BUDGET / (w * size * size)).clamp(1, h);
    let mut classes = vec![NON_ROAD; h * w];
    let mut scores = vec![0u32; n];
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + band).min(h);
        let top = y0.saturating_sub(r);
        let bottom = (y1 + r).min(h);
        let rows = bottom - top;
        let input: Vec<f32> = mask.data()[top * w..bottom * w].iter().map(|&v| v as f32).collect();
        let response = layer.forward(&Tensor::from_vec(Shape::new(1, 1, rows, w), input), Mode::Eval);
        for i in y0..y1 {
            let local = (i - top) * w;
            for j in 0..w {
                if mask.get(i, j) == 0 {
                    continue;
                }
                for (k, s) in scores.iter_mut().enumerate() {
                    *s = response.plane(k, 0)[local + j].round() as u32;
                }
                classes[i * w + j] = resolve_direction(&scores);
            }
        }
        y0 = y1;
    }
    DirectionMap {
        height: h,
        width: w,
        classes,
    }
}

/// Area-averaged downscaled mask used as the structure regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureTarget {
    height: usize,
    width: usize,
    values: Vec<f32>,
    /// Zero rows and columns appended (bottom, right) to reach a multiple of the scale.
    padding: (usize, usize),
}

impl StructureTarget {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn padding(&self) -> (usize, usize) {
        self.padding
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.width + j]
    }
}

/// Mean of every `scale x scale` block; dimensions that are not a multiple of
/// `scale` are zero-padded first.
pub fn structure_target(mask: &BinaryMask, scale: usize) -> Result<StructureTarget> {
    if scale == 0 {
        return Err(Error::Param("structure scale must be >= 1".into()));
    }
    let height = mask.height().div_ceil(scale);
    let width = mask.width().div_ceil(scale);
    let padding = (height * scale - mask.height(), width * scale - mask.width());
    let mut sums = vec![0u32; height * width];
    for i in 0..mask.height() {
        for j in 0..mask.width() {
            sums[(i / scale) * width + j / scale] += mask.get(i, j) as u32;
        }
    }
    let area = (scale * scale) as f32;
    Ok(StructureTarget {
        height,
        width,
        values: sums.into_iter().map(|s| s as f32 / area).collect(),
        padding,
    })
}
