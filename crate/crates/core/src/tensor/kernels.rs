// Raw loops behind the tape ops. Everything here works on flat slices.

use super::strides;

/// `c[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[n×k] += a[n×m] · b[k×m]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// `c[k×m] += a[n×k]ᵀ · b[n×m]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub groups: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub ksize: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    /// Output positions along one axis whose tap `kpos` lands inside `[0, extent)`.
    fn valid_range(&self, kpos: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let k = kpos as isize;
        // o*s + k - p >= 0  and  o*s + k - p <= extent - 1
        let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
        let hi_num = extent as isize - 1 - k + p;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_extent as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Visits every (input index, kernel index, output index) triple of a grouped 2-D convolution.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let ipg = g.in_per_group();
    let opg = g.out_per_group();
    let kk = g.ksize * g.ksize;
    for b in 0..g.batch {
        for oc in 0..g.out_ch {
            let group = oc / opg;
            let out_base = (b * g.out_ch + oc) * g.out_h * g.out_w;
            for icl in 0..ipg {
                let ic = group * ipg + icl;
                let in_base = (b * g.in_ch + ic) * g.in_h * g.in_w;
                let k_base = (oc * ipg + icl) * kk;
                for ky in 0..g.ksize {
                    let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                    for kx in 0..g.ksize {
                        let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                        let kidx = k_base + ky * g.ksize + kx;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let orow = out_base + oy * g.out_w;
                            let irow = in_base + iy * g.in_w;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.padding;
                                f(irow + ix, kidx, orow + ox);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    for_each_tap(g, |i, k, o| out[o] += input[i] * kernel[k]);
}

pub(crate) fn conv2d_backward_input(g: &ConvGeom, gout: &[f64], kernel: &[f64], gin: &mut [f64]) {
    for_each_tap(g, |i, k, o| gin[i] += gout[o] * kernel[k]);
}

pub(crate) fn conv2d_backward_kernel(g: &ConvGeom, gout: &[f64], input: &[f64], gk: &mut [f64]) {
    for_each_tap(g, |i, k, o| gk[k] += gout[o] * input[i]);
}

/// For every element of a tensor of `shape`, the flat index it reduces into
/// after removing `axes`.
pub(crate) fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    if kept.is_empty() {
        return vec![0; numel];
    }
    let kept_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    let kept_strides = strides(&kept_shape);
    // output stride contributed by each input dim (0 for reduced dims)
    let mut dim_stride = vec![0; shape.len()];
    for (j, &d) in kept.iter().enumerate() {
        dim_stride[d] = kept_strides[j];
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut out = 0usize;
    for _ in 0..numel {
        map.push(out);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            out += dim_stride[d];
            if idx[d] < shape[d] {
                break;
            }
            out -= dim_stride[d] * shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// For every output element of a permutation, the flat source index in the input.
pub(crate) fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            src += src_stride[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_stride[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// Bilinear source taps for resizing `input` samples to `output` samples with
/// half-pixel centres (align-corners = false): `src = (dst + 0.5)·in/out − 0.5`,
/// clamped at 0; the upper neighbour is clamped to the last sample.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}
