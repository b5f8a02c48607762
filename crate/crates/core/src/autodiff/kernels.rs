//! Raw numeric kernels behind the graph ops. All buffers are row-major.

use std::cell::Cell;

thread_local! {
    static THREADS: Cell<usize> = const { Cell::new(1) };
}

/// Examples per weight-gradient partial in [`conv_backward`].
const GRAD_BLOCK: usize = 8;

/// Caps the worker threads used by the batched convolution kernels.
///
/// Work is split into contiguous batch chunks. Results do not depend on the
/// thread count. The setting is per calling thread.
pub fn set_threads(n: usize) {
    THREADS.with(|t| t.set(n.max(1)));
}

pub fn threads() -> usize {
    THREADS.with(Cell::get)
}

/// `c = alpha * a * b + beta * c` with explicit strides (rows, cols) for each operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
    pub fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, H*W]` columns ("same" zero padding).
pub(crate) fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad() as isize);
    let plane = g.plane();
    for c in 0..g.channels {
        let src = &img[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + dx;
                        out[x as usize] = if sx < 0 || sx >= w { 0.0 } else { srow[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image gradient.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad() as isize);
    let plane = g.plane();
    for c in 0..g.channels {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dx;
                        if sx >= 0 && sx < w {
                            dst[(sy * w + sx) as usize] += src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Batched forward convolution. Returns the output and the cached columns.
pub(crate) fn conv_forward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let in_sz = g.channels * g.plane();
    let out_sz = g.out_channels * g.plane();
    let col_sz = g.patch() * g.plane();
    let mut out = vec![0.0; batch * out_sz];
    let mut cols = vec![0.0; batch * col_sz];
    let work = |range: std::ops::Range<usize>, out: &mut [f64], cols: &mut [f64]| {
        for (i, b) in range.enumerate() {
            let col = &mut cols[i * col_sz..(i + 1) * col_sz];
            im2col(g, &input[b * in_sz..(b + 1) * in_sz], col);
            let o = &mut out[i * out_sz..(i + 1) * out_sz];
            for (oc, chunk) in o.chunks_mut(g.plane()).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[oc]);
            }
            gemm(
                g.out_channels,
                g.patch(),
                g.plane(),
                1.0,
                weight,
                (g.patch(), 1),
                col,
                (g.plane(), 1),
                1.0,
                o,
                (g.plane(), 1),
            );
        }
    };
    let chunks = split(batch, threads());
    if chunks.len() <= 1 {
        work(0..batch, &mut out, &mut cols);
    } else {
        std::thread::scope(|s| {
            let mut out_rest = out.as_mut_slice();
            let mut col_rest = cols.as_mut_slice();
            for r in chunks {
                let n = r.len();
                let (o, orest) = std::mem::take(&mut out_rest).split_at_mut(n * out_sz);
                let (c, crest) = std::mem::take(&mut col_rest).split_at_mut(n * col_sz);
                out_rest = orest;
                col_rest = crest;
                let work = &work;
                s.spawn(move || work(r, o, c));
            }
        });
    }
    (out, cols)
}

/// Batched convolution backward. Accumulates into `d_input`, `d_weight`, `d_bias`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    cols: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) {
    let in_sz = g.channels * g.plane();
    let out_sz = g.out_channels * g.plane();
    let col_sz = g.patch() * g.plane();
    let w_sz = g.out_channels * g.patch();
    let need_input = d_input.is_some();

    // Weight partials are formed per fixed block of examples and reduced in
    // block order, so the thread count never changes the rounding.
    let blocks = batch.div_ceil(GRAD_BLOCK);
    let block_range = |blk: std::ops::Range<usize>| blk.start * GRAD_BLOCK..(blk.end * GRAD_BLOCK).min(batch);
    let work = |blk: std::ops::Range<usize>, dx: Option<&mut [f64]>| -> Vec<(Vec<f64>, Vec<f64>)> {
        let first = blk.start * GRAD_BLOCK;
        let mut dcol = if need_input { vec![0.0; col_sz] } else { Vec::new() };
        let mut dx = dx;
        let mut partials = Vec::with_capacity(blk.len());
        for block in blk {
            let mut dw = vec![0.0; w_sz];
            let mut db = vec![0.0; g.out_channels];
            for b in block_range(block..block + 1) {
                let go = &d_out[b * out_sz..(b + 1) * out_sz];
                let col = &cols[b * col_sz..(b + 1) * col_sz];
                for (oc, chunk) in go.chunks(g.plane()).enumerate() {
                    db[oc] += chunk.iter().sum::<f64>();
                }
                // dW[O, P] += dOut[O, HW] * cols^T[HW, P]
                gemm(
                    g.out_channels,
                    g.plane(),
                    g.patch(),
                    1.0,
                    go,
                    (g.plane(), 1),
                    col,
                    (1, g.plane()),
                    1.0,
                    &mut dw,
                    (g.patch(), 1),
                );
                if let Some(dx) = dx.as_deref_mut() {
                    // dcols[P, HW] = W^T[P, O] * dOut[O, HW]
                    gemm(
                        g.patch(),
                        g.out_channels,
                        g.plane(),
                        1.0,
                        weight,
                        (1, g.patch()),
                        go,
                        (g.plane(), 1),
                        0.0,
                        &mut dcol,
                        (g.plane(), 1),
                    );
                    let i = b - first;
                    col2im_add(g, &dcol, &mut dx[i * in_sz..(i + 1) * in_sz]);
                }
            }
            partials.push((dw, db));
        }
        partials
    };

    let chunks = split(blocks, threads());
    let partials: Vec<(Vec<f64>, Vec<f64>)> = if chunks.len() <= 1 {
        work(0..blocks, d_input)
    } else {
        std::thread::scope(|s| {
            let mut rest = d_input;
            let mut handles = Vec::new();
            for r in chunks {
                let n = block_range(r.clone()).len();
                let mine = match rest.take() {
                    Some(buf) => {
                        let (a, b) = buf.split_at_mut(n * in_sz);
                        rest = Some(b);
                        Some(a)
                    }
                    None => None,
                };
                let work = &work;
                handles.push(s.spawn(move || work(r, mine)));
            }
            handles.into_iter().flat_map(|h| h.join().expect("conv worker panicked")).collect()
        })
    };
    for (dw, db) in partials {
        d_weight.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        d_bias.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
    }
}

fn split(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.clamp(1, n.max(1));
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .filter(|r| !r.is_empty())
        .collect()
}
