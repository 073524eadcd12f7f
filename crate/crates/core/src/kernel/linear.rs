use super::{LayerGrads, Tensor};
use crate::error::{Error, Result};

/// `out[b, o] = Σ_i x[b, i]·weight[i, o] + bias[o]` for `x: B×I`, `weight: I×O`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, inputs, outputs) = check(x, weight)?;
    if bias.shape() != [outputs] {
        return Err(Error::shape(format!(
            "linear bias has shape {:?}, expected [{outputs}]",
            bias.shape()
        )));
    }
    let (xd, wd) = (x.data(), weight.data());
    let mut out = Vec::with_capacity(batch * outputs);
    for b in 0..batch {
        let mut row = bias.data().to_vec();
        for i in 0..inputs {
            let xv = xd[b * inputs + i];
            let w_row = &wd[i * outputs..(i + 1) * outputs];
            for (acc, w) in row.iter_mut().zip(w_row) {
                *acc += xv * w;
            }
        }
        out.extend_from_slice(&row);
    }
    Ok(Tensor::from_parts(vec![batch, outputs], out))
}

/// Gradients of [`linear_forward`]: `d_input = d_out·weightᵀ`,
/// `weight = xᵀ·d_out`, `bias = Σ_b d_out[b, ·]`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, d_out: &Tensor) -> Result<LayerGrads> {
    let (batch, inputs, outputs) = check(x, weight)?;
    if d_out.shape() != [batch, outputs] {
        return Err(Error::shape(format!(
            "linear d_out has shape {:?}, expected [{batch}, {outputs}]",
            d_out.shape()
        )));
    }
    let (xd, wd, gd) = (x.data(), weight.data(), d_out.data());

    let mut d_input = vec![0.0; batch * inputs];
    for b in 0..batch {
        let g_row = &gd[b * outputs..(b + 1) * outputs];
        for i in 0..inputs {
            let w_row = &wd[i * outputs..(i + 1) * outputs];
            d_input[b * inputs + i] = super::dot(g_row, w_row);
        }
    }

    let mut d_weight = vec![0.0; inputs * outputs];
    let mut d_bias = vec![0.0; outputs];
    for b in 0..batch {
        let g_row = &gd[b * outputs..(b + 1) * outputs];
        for i in 0..inputs {
            let xv = xd[b * inputs + i];
            for (acc, g) in d_weight[i * outputs..(i + 1) * outputs].iter_mut().zip(g_row) {
                *acc += xv * g;
            }
        }
        for (acc, g) in d_bias.iter_mut().zip(g_row) {
            *acc += g;
        }
    }

    Ok(LayerGrads {
        d_input: Tensor::from_parts(vec![batch, inputs], d_input),
        d_params: vec![
            (
                "weight".to_string(),
                Tensor::from_parts(vec![inputs, outputs], d_weight),
            ),
            ("bias".to_string(), Tensor::from_parts(vec![outputs], d_bias)),
        ],
    })
}

fn check(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let (batch, inputs) = x.dims2()?;
    let (w_in, outputs) = weight.dims2()?;
    if w_in != inputs {
        return Err(Error::shape(format!(
            "linear input has {inputs} features but weight expects {w_in}"
        )));
    }
    Ok((batch, inputs, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::fd::{numeric_grad, random_tensor, rel_err, weighted_sum};

    #[test]
    fn identity_weight() {
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let out = linear_forward(&x, &Tensor::eye(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn hand_computed_sum_with_bias() {
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[[1.0], [1.0]]).unwrap();
        let out = linear_forward(&x, &w, &Tensor::vector(vec![0.5]).unwrap()).unwrap();
        assert_eq!(out.data(), &[3.5]);
    }

    #[test]
    fn bias_broadcasts_over_zero_rows() {
        let x = Tensor::zeros(&[3, 2]);
        let w = random_tensor(&[2, 2], 1);
        let out = linear_forward(&x, &w, &Tensor::vector(vec![1.0, -1.0]).unwrap()).unwrap();
        for row in out.rows() {
            assert_eq!(row, &[1.0, -1.0]);
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(linear_forward(&x, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).is_err());
        assert!(linear_forward(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3])).is_err());
        assert!(linear_backward(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = random_tensor(&[4, 3], 2);
        let w = random_tensor(&[3, 2], 3);
        let g = linear_backward(&x, &w, &Tensor::zeros(&[4, 2])).unwrap();
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
        for (_, t) in &g.d_params {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scalar_chain_rule() {
        let x = Tensor::from_rows(&[[2.0]]).unwrap();
        let w = Tensor::from_rows(&[[3.0]]).unwrap();
        let g = linear_backward(&x, &w, &Tensor::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert_eq!(g.d_input.data(), &[3.0]);
        assert_eq!(g.param("weight").unwrap().data(), &[2.0]);
        assert_eq!(g.param("bias").unwrap().data(), &[1.0]);
    }

    #[test]
    fn matches_finite_differences() {
        for seed in 0..5 {
            let x = random_tensor(&[4, 3], seed);
            let w = random_tensor(&[3, 2], seed + 100);
            let b = random_tensor(&[2], seed + 200);
            let probe = random_tensor(&[4, 2], seed + 300);
            let g = linear_backward(&x, &w, &probe).unwrap();

            let nx = numeric_grad(&x, |x| weighted_sum(&linear_forward(x, &w, &b).unwrap(), &probe));
            let nw = numeric_grad(&w, |w| weighted_sum(&linear_forward(&x, w, &b).unwrap(), &probe));
            let nb = numeric_grad(&b, |b| weighted_sum(&linear_forward(&x, &w, b).unwrap(), &probe));
            assert!(rel_err(&g.d_input, &nx) <= 1e-6);
            assert!(rel_err(g.param("weight").unwrap(), &nw) <= 1e-6);
            assert!(rel_err(g.param("bias").unwrap(), &nb) <= 1e-6);
        }
    }

    #[test]
    fn affine_additivity() {
        let x1 = random_tensor(&[3, 4], 7);
        let x2 = random_tensor(&[3, 4], 8);
        let w = random_tensor(&[4, 5], 9);
        let b = random_tensor(&[5], 10);
        let mut sum = x1.clone();
        sum.add_assign(&x2).unwrap();
        let lhs = linear_forward(&sum, &w, &b).unwrap();
        let f1 = linear_forward(&x1, &w, &b).unwrap();
        let f2 = linear_forward(&x2, &w, &b).unwrap();
        for (idx, v) in lhs.data().iter().enumerate() {
            let rhs = f1.data()[idx] + f2.data()[idx] - b.data()[idx % 5];
            assert!((v - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn row_results_do_not_depend_on_batch() {
        let x = random_tensor(&[5, 6], 11);
        let w = random_tensor(&[6, 3], 12);
        let b = random_tensor(&[3], 13);
        let full = linear_forward(&x, &w, &b).unwrap();
        for r in 0..5 {
            let single = Tensor::new(vec![1, 6], x.row(r).to_vec()).unwrap();
            let out = linear_forward(&single, &w, &b).unwrap();
            assert!(out
                .data()
                .iter()
                .zip(full.row(r))
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
