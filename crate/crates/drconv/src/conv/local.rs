//! Per-position convolution: every output pixel owns a filter.
//!
//! This is the "no sharing at all" end of the spectrum the region-routed
//! variant interpolates away from, kept as a baseline. Only the forward pass
//! lives here; the trainable baseline layer routes gradients through the
//! region variant with a one-region-per-pixel mask, which is the same
//! computation (a fact the tests pin down bit-for-bit).

use crate::conv::standard::conv_core;
use crate::conv::{ConvSpec, LocalFilterField};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// `y[n,u,v,o] = sum over (c,i,j) of x[n, tap(u,i), tap(v,j), c] *
/// field[u,v][o,c,i,j]` — as [`conv2d_forward`](crate::conv::conv2d_forward),
/// but the filter varies with `(u, v)`. No bias.
pub fn local_conv_forward(x: &Tensor4, field: &LocalFilterField, spec: &ConvSpec) -> Result<Tensor4> {
    spec.validate()?;
    if field.out_c != spec.out_channels || field.in_c != spec.in_channels || field.k != spec.k {
        return Err(Error::Shape(format!(
            "local field channels/kernel ({}, {}, k={}) do not match spec ({}, {}, k={})",
            field.out_c, field.in_c, field.k, spec.out_channels, spec.in_channels, spec.k
        )));
    }
    let out_shape = spec.out_shape(&x.shape())?;
    if field.h != out_shape.h || field.w != out_shape.w {
        return Err(Error::Shape(format!(
            "local field covers {}x{}, output is {}x{}",
            field.h, field.w, out_shape.h, out_shape.w
        )));
    }
    let mut y = Tensor4::zeros(out_shape)?;
    // One transposed block per position, indexed exactly like the output.
    let blocks = transpose_field(field);
    conv_core(x, spec, &blocks, |_, u, v| u * out_shape.w + v, None, &mut y);
    Ok(y)
}

fn transpose_field(field: &LocalFilterField) -> Vec<f64> {
    let mut out = Vec::with_capacity(field.weights().len());
    for u in 0..field.h {
        for v in 0..field.w {
            out.extend_from_slice(&crate::conv::transpose_block(
                field.filter_at(u, v),
                field.out_c,
                field.in_c,
                field.k,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv2d_forward, StandardFilter};
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_is_an_ordinary_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::from_fn(Shape4::new(2, 4, 5, 2), |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let filter = StandardFilter::new(3, 2, 3, w.clone(), None).unwrap();
        let spec = ConvSpec::same(2, 3, 3);

        let mut field = LocalFilterField::zeros(4, 5, 3, 2, 3).unwrap();
        for u in 0..4 {
            for v in 0..5 {
                field.filter_at_mut(u, v).copy_from_slice(&w);
            }
        }
        let y_local = local_conv_forward(&x, &field, &spec).unwrap();
        let (y_std, _) = conv2d_forward(&x, &filter, &spec).unwrap();
        // Same core, same tap order: identical down to the last bit.
        assert_eq!(y_local, y_std);
    }

    #[test]
    fn single_pixel_input_uses_its_one_filter() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![2.0, -1.0]).unwrap();
        let field = LocalFilterField::new(1, 1, 1, 2, 1, vec![3.0, 4.0]).unwrap();
        let spec = ConvSpec::same(2, 1, 1);
        let y = local_conv_forward(&x, &field, &spec).unwrap();
        assert_eq!(y.data(), &[2.0 * 3.0 + (-1.0) * 4.0]);
    }

    #[test]
    fn field_size_must_match_output() {
        let x = Tensor4::zeros(Shape4::new(1, 4, 4, 1)).unwrap();
        let field = LocalFilterField::zeros(3, 3, 1, 1, 1).unwrap();
        let spec = ConvSpec::same(1, 1, 1);
        assert!(local_conv_forward(&x, &field, &spec).is_err());
    }
}
