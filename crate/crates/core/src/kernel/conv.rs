use super::{LayerGrads, Tensor};
use crate::error::{Error, Result};

/// Output length of a 1-D convolution, or `None` if the kernel does not fit.
pub fn conv1d_output_len(steps: usize, width: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = steps + 2 * padding;
    if stride == 0 || width == 0 || width > padded {
        return None;
    }
    Some((padded - width) / stride + 1)
}

struct Geometry {
    batch: usize,
    in_ch: usize,
    steps: usize,
    out_ch: usize,
    width: usize,
    out_len: usize,
}

fn geometry(x: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Geometry> {
    let (batch, in_ch, steps) = x.dims3()?;
    let (out_ch, k_in, width) = kernels.dims3()?;
    if k_in != in_ch {
        return Err(Error::shape(format!(
            "conv1d input has {in_ch} channels but kernels expect {k_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv1d stride must be positive"));
    }
    let out_len = conv1d_output_len(steps, width, stride, padding).ok_or_else(|| {
        Error::shape(format!(
            "conv1d kernel width {width} exceeds padded length {}",
            steps + 2 * padding
        ))
    })?;
    Ok(Geometry {
        batch,
        in_ch,
        steps,
        out_ch,
        width,
        out_len,
    })
}

/// Cross-correlation over `x: B×C×T` with `kernels: K×C×W`:
/// `out[b,k,t] = bias[k] + Σ_{c,w} x[b,c,t·stride+w−padding]·kernels[k,c,w]`,
/// reading zeros outside `[0, T)`.
pub fn conv1d_forward(x: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = geometry(x, kernels, stride, padding)?;
    if bias.shape() != [g.out_ch] {
        return Err(Error::shape(format!(
            "conv1d bias has shape {:?}, expected [{}]",
            bias.shape(),
            g.out_ch
        )));
    }
    let (xd, kd) = (x.data(), kernels.data());
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_len];
    for b in 0..g.batch {
        for k in 0..g.out_ch {
            let out_row = &mut out[(b * g.out_ch + k) * g.out_len..][..g.out_len];
            for (t, slot) in out_row.iter_mut().enumerate() {
                let mut acc = bias.data()[k];
                for c in 0..g.in_ch {
                    let x_row = &xd[(b * g.in_ch + c) * g.steps..][..g.steps];
                    let k_row = &kd[(k * g.in_ch + c) * g.width..][..g.width];
                    for (w, kv) in k_row.iter().enumerate() {
                        if let Some(pos) = source_index(t, w, stride, padding, g.steps) {
                            acc += x_row[pos] * kv;
                        }
                    }
                }
                *slot = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.out_ch, g.out_len], out))
}

/// Gradients of [`conv1d_forward`] with respect to input, kernels and bias.
pub fn conv1d_backward(
    x: &Tensor,
    kernels: &Tensor,
    d_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<LayerGrads> {
    let g = geometry(x, kernels, stride, padding)?;
    if d_out.shape() != [g.batch, g.out_ch, g.out_len] {
        return Err(Error::shape(format!(
            "conv1d d_out has shape {:?}, expected [{}, {}, {}]",
            d_out.shape(),
            g.batch,
            g.out_ch,
            g.out_len
        )));
    }
    let (xd, kd, gd) = (x.data(), kernels.data(), d_out.data());
    let mut d_x = vec![0.0; xd.len()];
    let mut d_k = vec![0.0; kd.len()];
    let mut d_b = vec![0.0; g.out_ch];

    for b in 0..g.batch {
        for k in 0..g.out_ch {
            let g_row = &gd[(b * g.out_ch + k) * g.out_len..][..g.out_len];
            for (t, &gv) in g_row.iter().enumerate() {
                d_b[k] += gv;
                for c in 0..g.in_ch {
                    let x_off = (b * g.in_ch + c) * g.steps;
                    let k_off = (k * g.in_ch + c) * g.width;
                    for w in 0..g.width {
                        if let Some(pos) = source_index(t, w, stride, padding, g.steps) {
                            d_k[k_off + w] += gv * xd[x_off + pos];
                            d_x[x_off + pos] += gv * kd[k_off + w];
                        }
                    }
                }
            }
        }
    }

    Ok(LayerGrads {
        d_input: Tensor::from_parts(x.shape().to_vec(), d_x),
        d_params: vec![
            ("weight".to_string(), Tensor::from_parts(kernels.shape().to_vec(), d_k)),
            ("bias".to_string(), Tensor::from_parts(vec![g.out_ch], d_b)),
        ],
    })
}

#[inline]
fn source_index(t: usize, w: usize, stride: usize, padding: usize, steps: usize) -> Option<usize> {
    (t * stride + w).checked_sub(padding).filter(|&pos| pos < steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::fd::{numeric_grad, random_tensor, rel_err, weighted_sum};

    fn channel_identity(channels: usize) -> Tensor {
        let mut k = Tensor::zeros(&[channels, channels, 1]);
        for c in 0..channels {
            k.set(&[c, c, 0], 1.0);
        }
        k
    }

    #[test]
    fn width_one_identity_kernel_is_identity() {
        let x = random_tensor(&[2, 3, 5], 1);
        let out = conv1d_forward(&x, &channel_identity(3), &Tensor::zeros(&[3]), 1, 0).unwrap();
        assert!(out.bit_eq(&x));
    }

    #[test]
    fn hand_computed_pair_sum() {
        let x = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let out = conv1d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2]);
        assert_eq!(out.data(), &[3.0, 5.0]);
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::zeros(&[1, 2, 6]);
        let k = random_tensor(&[1, 2, 3], 4);
        let out = conv1d_forward(&x, &k, &Tensor::vector(vec![2.0]).unwrap(), 2, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn output_length_formula() {
        assert_eq!(conv1d_output_len(10, 3, 2, 1), Some(5));
        assert_eq!(conv1d_output_len(3, 4, 1, 0), None);
        assert_eq!(conv1d_output_len(3, 4, 1, 1), Some(2));
    }

    #[test]
    fn kernel_wider_than_input_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 3]);
        let k = Tensor::zeros(&[1, 1, 4]);
        assert!(matches!(
            conv1d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = random_tensor(&[2, 2, 7], 5);
        let k = random_tensor(&[3, 2, 3], 6);
        let g = conv1d_backward(&x, &k, &Tensor::zeros(&[2, 3, 3]), 2, 0).unwrap();
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
        assert!(g.d_params.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let x = random_tensor(&[2, 3, 4], 7);
        let d_out = random_tensor(&[2, 3, 4], 8);
        let g = conv1d_backward(&x, &channel_identity(3), &d_out, 1, 0).unwrap();
        assert!(g.d_input.bit_eq(&d_out));
    }

    #[test]
    fn matches_finite_differences() {
        let cases = [(1, 0), (2, 0), (2, 1), (3, 2)];
        for (seed, &(stride, padding)) in cases.iter().enumerate() {
            let seed = seed as u64;
            let x = random_tensor(&[2, 3, 9], seed);
            let k = random_tensor(&[4, 3, 3], seed + 10);
            let b = random_tensor(&[4], seed + 20);
            let out_len = conv1d_output_len(9, 3, stride, padding).unwrap();
            let probe = random_tensor(&[2, 4, out_len], seed + 30);
            let g = conv1d_backward(&x, &k, &probe, stride, padding).unwrap();
            let f = |x: &Tensor, k: &Tensor, b: &Tensor| {
                weighted_sum(&conv1d_forward(x, k, b, stride, padding).unwrap(), &probe)
            };
            let nx = numeric_grad(&x, |x| f(x, &k, &b));
            let nk = numeric_grad(&k, |k| f(&x, k, &b));
            let nb = numeric_grad(&b, |b| f(&x, &k, b));
            assert!(rel_err(&g.d_input, &nx) <= 1e-6, "stride {stride} pad {padding}");
            assert!(rel_err(g.param("weight").unwrap(), &nk) <= 1e-6);
            assert!(rel_err(g.param("bias").unwrap(), &nb) <= 1e-6);
        }
    }
}
