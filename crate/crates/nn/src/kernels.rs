//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! slices; shape bookkeeping lives in `graph`.

use matrixmultiply::dgemm;

/// Geometry of a stride-1, zero-padded ("same") convolution over up to three
/// spatial axes. 2D convolutions use `depth == 1` and `kd == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeom {
    pub fn spatial(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kd * self.kh * self.kw
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.patch_len()
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (d, h, w) = (g.depth, g.height, g.width);
    let (pd, ph, pw) = (g.kd / 2, g.kh / 2, g.kw / 2);
    let p = g.spatial();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * p..(c + 1) * p];
        for kz in 0..g.kd {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    row += 1;
                    for z in 0..d {
                        let sz = z as isize + kz as isize - pd as isize;
                        for y in 0..h {
                            let out = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            let sy = y as isize + ky as isize - ph as isize;
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                                out.fill(0.0);
                                continue;
                            }
                            let src = &plane[(sz as usize * h + sy as usize) * w..][..w];
                            let shift = kx as isize - pw as isize;
                            for (x, o) in out.iter_mut().enumerate() {
                                let sx = x as isize + shift;
                                *o = if sx < 0 || sx >= w as isize {
                                    0.0
                                } else {
                                    src[sx as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (d, h, w) = (g.depth, g.height, g.width);
    let (pd, ph, pw) = (g.kd / 2, g.kh / 2, g.kw / 2);
    let p = g.spatial();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * p..(c + 1) * p];
        for kz in 0..g.kd {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let src = &cols[row * p..(row + 1) * p];
                    row += 1;
                    for z in 0..d {
                        let sz = z as isize + kz as isize - pd as isize;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + ky as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let grad = &src[(z * h + y) * w..][..w];
                            let dst = &mut plane[(sz as usize * h + sy as usize) * w..][..w];
                            let shift = kx as isize - pw as isize;
                            for (x, gv) in grad.iter().enumerate() {
                                let sx = x as isize + shift;
                                if sx >= 0 && sx < w as isize {
                                    dst[sx as usize] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = weight * im2col(x[n]) + bias`.
pub fn conv_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    g: &ConvGeom,
    batch: usize,
) -> Vec<f64> {
    let p = g.spatial();
    let k = g.patch_len();
    let mut out = vec![0.0; batch * g.cout * p];
    let mut cols = vec![0.0; k * p];
    for n in 0..batch {
        im2col(&x[n * g.cin * p..(n + 1) * g.cin * p], g, &mut cols);
        let y = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        for (o, row) in y.chunks_mut(p).enumerate() {
            row.fill(bias[o]);
        }
        // SAFETY: all buffers are sized for (cout x k) * (k x p) = (cout x p).
        unsafe {
            dgemm(
                g.cout,
                k,
                p,
                1.0,
                weight.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                p as isize,
                1,
                1.0,
                y.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub fn conv_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    batch: usize,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = g.spatial();
    let k = g.patch_len();
    let mut dw = vec![0.0; g.weight_len()];
    let mut db = vec![0.0; g.cout];
    let mut dx = need_input.then(|| vec![0.0; batch * g.cin * p]);
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for n in 0..batch {
        im2col(&x[n * g.cin * p..(n + 1) * g.cin * p], g, &mut cols);
        let dy = &grad_out[n * g.cout * p..(n + 1) * g.cout * p];
        for (o, row) in dy.chunks(p).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        // SAFETY: dw is (cout x k) = dy (cout x p) * cols^T (p x k).
        unsafe {
            dgemm(
                g.cout,
                p,
                k,
                1.0,
                dy.as_ptr(),
                p as isize,
                1,
                cols.as_ptr(),
                1,
                p as isize,
                1.0,
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // SAFETY: dcols is (k x p) = weight^T (k x cout) * dy (cout x p).
            unsafe {
                dgemm(
                    k,
                    g.cout,
                    p,
                    1.0,
                    weight.as_ptr(),
                    1,
                    k as isize,
                    dy.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            col2im_add(&dcols, g, &mut dx[n * g.cin * p..(n + 1) * g.cin * p]);
        }
    }
    (dx, dw, db)
}

/// `y = x W^T + b` for `x: [n, fin]`, `W: [fout, fin]`.
pub fn linear_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    n: usize,
    fin: usize,
    fout: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * fout);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    // SAFETY: (n x fin) * (fin x fout) into (n x fout).
    unsafe {
        dgemm(
            n,
            fin,
            fout,
            1.0,
            x.as_ptr(),
            fin as isize,
            1,
            weight.as_ptr(),
            1,
            fin as isize,
            1.0,
            out.as_mut_ptr(),
            fout as isize,
            1,
        );
    }
    out
}

pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    n: usize,
    fin: usize,
    fout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * fin];
    let mut dw = vec![0.0; fout * fin];
    let mut db = vec![0.0; fout];
    for row in grad_out.chunks(fout) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    // SAFETY: shapes follow from the forward product.
    unsafe {
        dgemm(
            n,
            fout,
            fin,
            1.0,
            grad_out.as_ptr(),
            fout as isize,
            1,
            weight.as_ptr(),
            fin as isize,
            1,
            0.0,
            dx.as_mut_ptr(),
            fin as isize,
            1,
        );
        dgemm(
            fout,
            n,
            fin,
            1.0,
            grad_out.as_ptr(),
            1,
            fout as isize,
            x.as_ptr(),
            fin as isize,
            1,
            0.0,
            dw.as_mut_ptr(),
            fin as isize,
            1,
        );
    }
    (dx, dw, db)
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Normalizes each contiguous group of `group` values to zero mean, unit variance.
pub fn instance_norm_forward(x: &[f64], group: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(group).zip(out.chunks_mut(group)) {
        let n = group as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
    }
    out
}

pub fn instance_norm_backward(x: &[f64], grad_out: &[f64], group: usize) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for ((src, gy), dst) in x
        .chunks(group)
        .zip(grad_out.chunks(group))
        .zip(dx.chunks_mut(group))
    {
        let n = group as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        let mean_g = gy.iter().sum::<f64>() / n;
        let mean_gy = src
            .iter()
            .zip(gy)
            .map(|(s, g)| (s - mean) * inv * g)
            .sum::<f64>()
            / n;
        for ((d, s), g) in dst.iter_mut().zip(src).zip(gy) {
            let yhat = (s - mean) * inv;
            *d = inv * (g - mean_g - yhat * mean_gy);
        }
    }
    dx
}

/// 2x2 average pooling over the last two axes. `planes` counts N*C.
pub fn avg_pool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let c = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = 0.25 * (a + b + c + d);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let g = &grad_out[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * g[(y / 2) * ow + xx / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x up-sampling over the last two axes.
pub fn upsample2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let g = &grad_out[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += g[y * ow + xx];
            }
        }
    }
    dx
}
