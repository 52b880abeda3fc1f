use rand::Rng;

use super::{shape_err, FeatureGrid, NnError, ParamTensor, Real};

fn uniform_init<T: Real>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
}

/// The same affine map applied independently at every grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    /// `[out, in]`
    pub weight: ParamTensor<T>,
    /// `[out]`
    pub bias: ParamTensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: ParamTensor::new(
                format!("{name}.weight"),
                vec![output, input],
                uniform_init(rng, input * output, input),
            ),
            bias: ParamTensor::zeros(format!("{name}.bias"), vec![output]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &FeatureGrid<T>) -> Result<FeatureGrid<T>, NnError> {
        let (ni, no) = (self.inputs(), self.outputs());
        if x.channels != ni {
            return Err(shape_err("linear_per_cell", format!("{ni} input channels"), x.channels));
        }
        let n = x.cells();
        let mut out = FeatureGrid::zeros(no, x.height, x.width);
        for o in 0..no {
            let row = &self.weight.values[o * ni..(o + 1) * ni];
            let dst = &mut out.data[o * n..(o + 1) * n];
            dst.iter_mut().for_each(|v| *v = self.bias.values[o]);
            for (i, &w) in row.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                let src = &x.data[i * n..(i + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + w * s;
                }
            }
        }
        Ok(out)
    }

    /// Accumulate parameter gradients for upstream gradient `gy` at input `x`.
    pub fn accumulate(&mut self, x: &FeatureGrid<T>, gy: &FeatureGrid<T>) {
        let (ni, no, n) = (self.inputs(), self.outputs(), x.cells());
        for o in 0..no {
            let g = &gy.data[o * n..(o + 1) * n];
            self.bias.grad[o] = self.bias.grad[o] + g.iter().copied().sum::<T>();
            for i in 0..ni {
                let src = &x.data[i * n..(i + 1) * n];
                self.weight.grad[o * ni + i] = self.weight.grad[o * ni + i] + dot(g, src);
            }
        }
    }

    pub fn input_grad(&self, gy: &FeatureGrid<T>) -> FeatureGrid<T> {
        let (ni, no, n) = (self.inputs(), self.outputs(), gy.cells());
        let mut gx = FeatureGrid::zeros(ni, gy.height, gy.width);
        for o in 0..no {
            let g = &gy.data[o * n..(o + 1) * n];
            for i in 0..ni {
                let w = self.weight.values[o * ni + i];
                let dst = &mut gx.data[i * n..(i + 1) * n];
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d = *d + w * s;
                }
            }
        }
        gx
    }

    pub fn backward(&mut self, x: &FeatureGrid<T>, gy: &FeatureGrid<T>) -> FeatureGrid<T> {
        self.accumulate(x, gy);
        self.input_grad(gy)
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&ParamTensor<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Grouped 3x3 convolution with zero padding and stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T = f32> {
    /// `[out, in / groups, 3, 3]`
    pub weight: ParamTensor<T>,
    pub bias: ParamTensor<T>,
    pub groups: usize,
}

impl<T: Real> Conv3x3<T> {
    pub fn new(name: &str, input: usize, output: usize, groups: usize, rng: &mut impl Rng) -> Self {
        assert!(groups > 0 && input % groups == 0 && output % groups == 0, "bad conv groups");
        let per = input / groups;
        Self {
            weight: ParamTensor::new(
                format!("{name}.weight"),
                vec![output, per, 3, 3],
                uniform_init(rng, output * per * 9, per * 9),
            ),
            bias: ParamTensor::zeros(format!("{name}.bias"), vec![output]),
            groups,
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    fn in_per_group(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn inputs(&self) -> usize {
        self.in_per_group() * self.groups
    }

    /// Patch matrix for one group: `[cell][in_channel * 9 + k]`, zero padded.
    fn im2col(&self, x: &FeatureGrid<T>, group: usize) -> Vec<T> {
        let (h, w, per) = (x.height, x.width, self.in_per_group());
        let row = per * 9;
        let mut cols = vec![T::zero(); h * w * row];
        for ic in 0..per {
            let src = x.channel(group * per + ic);
            for y in 0..h {
                for xx in 0..w {
                    let dst = &mut cols[(y * w + xx) * row + ic * 9..][..9];
                    for (k, d) in dst.iter_mut().enumerate() {
                        let (sy, sx) = (y as isize + k as isize / 3 - 1, xx as isize + k as isize % 3 - 1);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            *d = src[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn outputs_per_group(&self) -> usize {
        self.outputs() / self.groups
    }

    pub fn forward(&self, x: &FeatureGrid<T>) -> Result<FeatureGrid<T>, NnError> {
        if x.channels != self.inputs() {
            return Err(shape_err("mix3x3", format!("{} input channels", self.inputs()), x.channels));
        }
        if x.height < 3 || x.width < 3 {
            return Err(shape_err("mix3x3", "grid >= 3x3", format!("{}x{}", x.height, x.width)));
        }
        let row = self.in_per_group() * 9;
        let mut out = FeatureGrid::zeros(self.outputs(), x.height, x.width);
        for group in 0..self.groups {
            let cols = self.im2col(x, group);
            for o in group * self.outputs_per_group()..(group + 1) * self.outputs_per_group() {
                let wrow = &self.weight.values[o * row..(o + 1) * row];
                let b = self.bias.values[o];
                for (d, c) in out.channel_mut(o).iter_mut().zip(cols.chunks_exact(row)) {
                    *d = b + dot(wrow, c);
                }
            }
        }
        Ok(out)
    }

    pub fn accumulate(&mut self, x: &FeatureGrid<T>, gy: &FeatureGrid<T>) {
        let row = self.in_per_group() * 9;
        for group in 0..self.groups {
            let cols = self.im2col(x, group);
            for o in group * self.outputs_per_group()..(group + 1) * self.outputs_per_group() {
                let g = gy.channel(o);
                self.bias.grad[o] = self.bias.grad[o] + g.iter().copied().sum::<T>();
                let wg = &mut self.weight.grad[o * row..(o + 1) * row];
                for (&gv, c) in g.iter().zip(cols.chunks_exact(row)) {
                    axpy(wg, gv, c);
                }
            }
        }
    }

    pub fn input_grad(&self, gy: &FeatureGrid<T>) -> FeatureGrid<T> {
        let (h, w, per) = (gy.height, gy.width, self.in_per_group());
        let row = per * 9;
        let mut gx = FeatureGrid::zeros(self.inputs(), h, w);
        for group in 0..self.groups {
            let mut gcols = vec![T::zero(); h * w * row];
            for o in group * self.outputs_per_group()..(group + 1) * self.outputs_per_group() {
                let wrow = &self.weight.values[o * row..(o + 1) * row];
                for (&gv, c) in gy.channel(o).iter().zip(gcols.chunks_exact_mut(row)) {
                    axpy(c, gv, wrow);
                }
            }
            for ic in 0..per {
                let dst = gx.channel_mut(group * per + ic);
                for y in 0..h {
                    for xx in 0..w {
                        let src = &gcols[(y * w + xx) * row + ic * 9..][..9];
                        for (k, &v) in src.iter().enumerate() {
                            let (sy, sx) = (y as isize + k as isize / 3 - 1, xx as isize + k as isize % 3 - 1);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                let i = sy as usize * w + sx as usize;
                                dst[i] = dst[i] + v;
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn backward(&mut self, x: &FeatureGrid<T>, gy: &FeatureGrid<T>) -> FeatureGrid<T> {
        self.accumulate(x, gy);
        self.input_grad(gy)
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&ParamTensor<T>; 2] {
        [&self.weight, &self.bias]
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            lanes[i] = lanes[i] + x[i] * y[i];
        }
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

fn axpy<T: Real>(dst: &mut [T], k: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + k * s;
    }
}

pub fn relu<T: Real>(x: &FeatureGrid<T>) -> FeatureGrid<T> {
    let mut y = x.clone();
    for v in &mut y.data {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
    y
}

/// Gradient through a ReLU given its output `y`.
pub fn relu_backward<T: Real>(y: &FeatureGrid<T>, gy: &FeatureGrid<T>) -> FeatureGrid<T> {
    let mut gx = gy.clone();
    for (g, &v) in gx.data.iter_mut().zip(&y.data) {
        if !(v > T::zero()) {
            *g = T::zero();
        }
    }
    gx
}

/// Hash of the active/inactive pattern of ReLU outputs.
pub fn relu_signature<T: Real>(outputs: &[&FeatureGrid<T>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for g in outputs {
        for v in &g.data {
            h ^= (*v > T::zero()) as u64 + 1;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    }
    h
}

pub fn avg_pool<T: Real>(x: &FeatureGrid<T>, factor: usize) -> Result<FeatureGrid<T>, NnError> {
    if factor == 0 || x.height % factor != 0 || x.width % factor != 0 {
        return Err(shape_err("avg_pool", format!("grid divisible by {factor}"), format!("{}x{}", x.height, x.width)));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (x.height / factor, x.width / factor);
    let inv = T::of(1.0 / (factor * factor) as f64);
    let mut out = FeatureGrid::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..x.height {
            for xx in 0..x.width {
                let o = (y / factor) * ow + xx / factor;
                dst[o] = dst[o] + src[y * x.width + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Real>(gy: &FeatureGrid<T>, factor: usize) -> FeatureGrid<T> {
    if factor == 1 {
        return gy.clone();
    }
    let (h, w) = (gy.height * factor, gy.width * factor);
    let inv = T::of(1.0 / (factor * factor) as f64);
    let mut gx = FeatureGrid::zeros(gy.channels, h, w);
    for c in 0..gy.channels {
        let src = gy.channel(c);
        let dst = gx.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / factor) * gy.width + x / factor] * inv;
            }
        }
    }
    gx
}

pub fn concat_channels<T: Real>(parts: &[FeatureGrid<T>]) -> Result<FeatureGrid<T>, NnError> {
    let first = parts.first().ok_or_else(|| NnError::Invalid("concat of zero grids".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
    for p in parts {
        if p.height != h || p.width != w {
            return Err(shape_err("concat", format!("{h}x{w}"), format!("{}x{}", p.height, p.width)));
        }
        data.extend_from_slice(&p.data);
    }
    let channels = parts.iter().map(|p| p.channels).sum();
    FeatureGrid::from_vec(channels, h, w, data)
}

/// Inverse of [`concat_channels`] for `parts` equal-sized chunks.
pub fn split_channels<T: Real>(x: &FeatureGrid<T>, parts: usize) -> Vec<FeatureGrid<T>> {
    let per = x.channels / parts;
    let n = per * x.cells();
    x.data
        .chunks(n)
        .map(|c| FeatureGrid {
            channels: per,
            height: x.height,
            width: x.width,
            data: c.to_vec(),
        })
        .collect()
}

/// Rearrange non-overlapping `patch x patch` pixel blocks into channels,
/// scaling intensities to `[-0.5, 0.5]`.
pub fn patchify<T: Real>(pixels: &[u8], width: usize, height: usize, patch: usize) -> Result<FeatureGrid<T>, NnError> {
    if pixels.len() != width * height || width % patch != 0 || height % patch != 0 {
        return Err(shape_err(
            "patchify",
            format!("{width}x{height} divisible by {patch}"),
            format!("{} pixels", pixels.len()),
        ));
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut out = FeatureGrid::zeros(patch * patch, gh, gw);
    let n = gh * gw;
    for y in 0..height {
        for x in 0..width {
            let c = (y % patch) * patch + x % patch;
            let cell = (y / patch) * gw + x / patch;
            out.data[c * n + cell] = T::of(pixels[y * width + x] as f64 / 255.0 - 0.5);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> FeatureGrid<f64> {
        FeatureGrid::from_vec(c, h, w, (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn identity_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = Linear::<f64>::new("l", 3, 3, &mut rng);
        l.weight.values = vec![1., 0., 0., 0., 1., 0., 0., 0., 1.];
        let x = grid(3, 2, 2, |i| i as f64 * 0.3 - 1.0);
        assert_eq!(l.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_weight_linear_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = Linear::<f64>::new("l", 2, 3, &mut rng);
        l.weight.values.iter_mut().for_each(|v| *v = 0.0);
        l.bias.values = vec![0.5, -1.0, 2.0];
        let y = l.forward(&grid(2, 3, 3, |i| i as f64)).unwrap();
        for c in 0..3 {
            assert!(y.channel(c).iter().all(|&v| v == l.bias.values[c]));
        }
    }

    #[test]
    fn hand_matrix_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = Linear::<f64>::new("l", 2, 2, &mut rng);
        l.weight.values = vec![2.0, -1.0, 0.5, 3.0];
        l.bias.values = vec![0.0, 0.0];
        let x = FeatureGrid::from_vec(2, 1, 1, vec![1.5, -2.0]).unwrap();
        // [2 -1; 0.5 3] * [1.5; -2] = [5; -5.25]
        assert_eq!(l.forward(&x).unwrap().data, vec![5.0, -5.25]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::<f32>::new("l", 4, 2, &mut rng);
        assert!(matches!(l.forward(&FeatureGrid::zeros(3, 2, 2)), Err(NnError::Shape { .. })));
    }

    fn conv_with(kernel: [f64; 9]) -> Conv3x3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Conv3x3::<f64>::new("c", 1, 1, 1, &mut rng);
        c.weight.values = kernel.to_vec();
        c
    }

    #[test]
    fn delta_kernel_is_identity() {
        let c = conv_with([0., 0., 0., 0., 1., 0., 0., 0., 0.]);
        let x = grid(1, 4, 5, |i| (i as f64).sin());
        assert_eq!(c.forward(&x).unwrap(), x);
    }

    #[test]
    fn uniform_kernel_on_constant_interior() {
        let c = conv_with([1.0 / 9.0; 9]);
        let x = grid(1, 5, 5, |_| 2.0);
        let y = c.forward(&x).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.at(0, yy, xx) - 2.0).abs() < 1e-12);
            }
        }
        // Corners see 4 of 9 taps.
        assert!((y.at(0, 0, 0) - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn shift_kernel_moves_value() {
        // Tap at (dy=0, dx=-1): out[y][x] = in[y][x-1], a shift to the right.
        let c = conv_with([0., 0., 0., 1., 0., 0., 0., 0., 0.]);
        let mut x = FeatureGrid::<f64>::zeros(1, 3, 3);
        x.set(0, 1, 1, 7.0);
        let y = c.forward(&x).unwrap();
        let mut expect = FeatureGrid::<f64>::zeros(1, 3, 3);
        expect.set(0, 1, 2, 7.0);
        assert_eq!(y, expect);
    }

    #[test]
    fn conv_rejects_tiny_grid() {
        let c = conv_with([0.0; 9]);
        assert!(c.forward(&FeatureGrid::zeros(1, 2, 5)).is_err());
    }

    #[test]
    fn grouped_conv_keeps_groups_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Conv3x3::<f64>::new("c", 4, 4, 2, &mut rng);
        let mut x = FeatureGrid::<f64>::zeros(4, 3, 3);
        x.channel_mut(0).iter_mut().for_each(|v| *v = 1.0);
        let y = c.forward(&x).unwrap();
        assert!(y.channel(2).iter().all(|&v| v == 0.0));
        assert!(y.channel(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_and_backward_shapes() {
        let x = grid(2, 4, 4, |i| i as f64);
        let p = avg_pool(&x, 2).unwrap();
        assert_eq!(p.shape(), (2, 2, 2));
        assert_eq!(p.at(0, 0, 0), (0. + 1. + 4. + 5.) / 4.0);
        let g = avg_pool_backward(&p, 2);
        assert_eq!(g.shape(), x.shape());
    }

    #[test]
    fn patchify_layout() {
        let pixels: Vec<u8> = (0..16).map(|i| i as u8 * 10).collect();
        let g = patchify::<f64>(&pixels, 4, 4, 2).unwrap();
        assert_eq!(g.shape(), (4, 2, 2));
        // Channel 1 = (dy 0, dx 1) of each block; block (0,1) starts at pixel 2.
        assert!((g.at(1, 0, 1) - (30.0 / 255.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn concat_split_inverse() {
        let a = grid(2, 2, 3, |i| i as f64);
        let b = grid(2, 2, 3, |i| -(i as f64));
        let c = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(split_channels(&c, 2), vec![a, b]);
    }
}
