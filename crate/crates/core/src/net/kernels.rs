// Slice-level kernels. Conv weights are (out, in, k, k), FC weights (out, in),
// activations (C, H, W) row-major.

fn conv_out_dims(h: usize, w: usize, kernel: usize, stride: usize) -> (usize, usize) {
    ((h - kernel) / stride + 1, (w - kernel) / stride + 1)
}

pub(super) fn conv_forward(
    input: &[f64],
    in_shape: &[usize],
    weight: &[f64],
    bias: &[f64],
    kernel: usize,
    stride: usize,
    out_channels: usize,
) -> Vec<f64> {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = conv_out_dims(h, w, kernel, stride);
    let mut out = vec![0.0; out_channels * oh * ow];
    for o in 0..out_channels {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o]);
        for c in 0..c_in {
            let src = &input[c * h * w..(c + 1) * h * w];
            for dy in 0..kernel {
                for dx in 0..kernel {
                    let wt = weight[((o * c_in + c) * kernel + dy) * kernel + dx];
                    if wt == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let row = &src[(y * stride + dy) * w..];
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        for (x, d) in dst.iter_mut().enumerate() {
                            *d += wt * row[x * stride + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn conv_backward_input(
    grad_out: &[f64],
    in_shape: &[usize],
    weight: &[f64],
    kernel: usize,
    stride: usize,
    out_channels: usize,
) -> Vec<f64> {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = conv_out_dims(h, w, kernel, stride);
    let mut grad_in = vec![0.0; c_in * h * w];
    for o in 0..out_channels {
        let g = &grad_out[o * oh * ow..(o + 1) * oh * ow];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for c in 0..c_in {
            let dst = &mut grad_in[c * h * w..(c + 1) * h * w];
            for dy in 0..kernel {
                for dx in 0..kernel {
                    let wt = weight[((o * c_in + c) * kernel + dy) * kernel + dx];
                    for y in 0..oh {
                        let row = &mut dst[(y * stride + dy) * w..];
                        for x in 0..ow {
                            row[x * stride + dx] += wt * g[y * ow + x];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub(super) fn conv_backward_params(
    grad_out: &[f64],
    input: &[f64],
    in_shape: &[usize],
    kernel: usize,
    stride: usize,
    out_channels: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = conv_out_dims(h, w, kernel, stride);
    let mut gw = vec![0.0; out_channels * c_in * kernel * kernel];
    let mut gb = vec![0.0; out_channels];
    for o in 0..out_channels {
        let g = &grad_out[o * oh * ow..(o + 1) * oh * ow];
        gb[o] = g.iter().sum();
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for c in 0..c_in {
            let src = &input[c * h * w..(c + 1) * h * w];
            for dy in 0..kernel {
                for dx in 0..kernel {
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let row = &src[(y * stride + dy) * w..];
                        for x in 0..ow {
                            acc += g[y * ow + x] * row[x * stride + dx];
                        }
                    }
                    gw[((o * c_in + c) * kernel + dy) * kernel + dx] = acc;
                }
            }
        }
    }
    (gw, gb)
}

pub(super) fn fc_forward(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            b + weight[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(input)
                .map(|(w, x)| w * x)
                .sum::<f64>()
        })
        .collect()
}

pub(super) fn fc_backward_input(grad_out: &[f64], weight: &[f64], n_in: usize) -> Vec<f64> {
    let mut grad_in = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (gi, w) in grad_in.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
            *gi += w * g;
        }
    }
    grad_in
}

pub(super) fn fc_backward_params(grad_out: &[f64], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gw = Vec::with_capacity(grad_out.len() * input.len());
    for &g in grad_out {
        gw.extend(input.iter().map(|x| g * x));
    }
    (gw, grad_out.to_vec())
}
