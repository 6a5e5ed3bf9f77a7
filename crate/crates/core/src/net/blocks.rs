use super::BlockVars;
use crate::error::Result;
use crate::tensor::{Real, Tape, Var};

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`, no normalisation.
/// The shortcut is the identity unless the block carries a projection.
pub fn residual_block<T: Real>(tape: &mut Tape<T>, x: Var, p: &BlockVars) -> Result<Var> {
    let h = tape.conv3x3(x, p.conv1.weight, p.conv1.bias, p.stride)?;
    let h = tape.relu(h);
    let h = tape.conv3x3(h, p.conv2.weight, p.conv2.bias, 1)?;
    let shortcut = match &p.proj {
        Some(proj) => tape.conv1x1_strided(x, proj.weight, proj.bias, p.stride)?,
        None => x,
    };
    let y = tape.add(h, shortcut)?;
    Ok(tape.relu(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ConvVars;
    use crate::tensor::{finite_diff_check, Shape, Tensor};

    fn conv(tape: &mut Tape<f64>, cout: usize, cin: usize, k: usize, fill: impl Fn(usize) -> f64) -> ConvVars {
        let ws = Shape::new(cout, cin, k, k);
        let w = Tensor::from_vec(ws, (0..ws.numel()).map(&fill).collect()).unwrap();
        let b = Tensor::from_fn(Shape::new(cout, 1, 1, 1), |n, _, _, _| 0.05 * n as f64);
        ConvVars {
            weight: tape.leaf(w, false),
            bias: tape.leaf(b, false),
        }
    }

    #[test]
    fn zero_weights_reduce_to_relu() {
        let mut tape = Tape::<f64>::new();
        let zero = |t: &mut Tape<f64>| ConvVars {
            weight: t.leaf(Tensor::zeros(Shape::new(2, 2, 3, 3)), false),
            bias: t.leaf(Tensor::zeros(Shape::new(2, 1, 1, 1)), false),
        };
        let p = BlockVars {
            conv1: zero(&mut tape),
            conv2: zero(&mut tape),
            proj: None,
            stride: 1,
        };
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, y, x| c as f64 + y as f64 - x as f64 - 1.5);
        let xv = tape.leaf(x.clone(), false);
        let y = residual_block(&mut tape, xv, &p).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn stride_two_halves_extents() {
        let mut tape = Tape::<f64>::new();
        let p = BlockVars {
            conv1: conv(&mut tape, 4, 2, 3, |i| (i as f64 * 0.37).sin() * 0.2),
            conv2: conv(&mut tape, 4, 4, 3, |i| (i as f64 * 0.11).cos() * 0.2),
            proj: Some(conv(&mut tape, 4, 2, 1, |i| 0.1 * i as f64)),
            stride: 2,
        };
        let xv = tape.leaf(Tensor::full(Shape::new(1, 2, 8, 6), 0.5), false);
        let y = residual_block(&mut tape, xv, &p).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 4, 4, 3));
    }

    #[test]
    fn rejects_stride_three() {
        let mut tape = Tape::<f64>::new();
        let p = BlockVars {
            conv1: conv(&mut tape, 2, 2, 3, |_| 0.1),
            conv2: conv(&mut tape, 2, 2, 3, |_| 0.1),
            proj: None,
            stride: 3,
        };
        let xv = tape.leaf(Tensor::full(Shape::new(1, 2, 4, 4), 0.5), false);
        assert!(matches!(
            residual_block(&mut tape, xv, &p),
            Err(crate::OffError::Config(_))
        ));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let x = Tensor::from_fn(Shape::new(2, 2, 5, 5), |n, c, y, x| {
            ((n * 31 + c * 7 + y * 5 + x) as f64 * 0.73).sin()
        });
        let forward = |tape: &mut Tape<f64>, xv: Var| {
            let p = BlockVars {
                conv1: conv(tape, 3, 2, 3, |i| (i as f64 * 0.91).sin() * 0.4),
                conv2: conv(tape, 3, 3, 3, |i| (i as f64 * 0.53).cos() * 0.3),
                proj: Some(conv(tape, 3, 2, 1, |i| 0.3 - 0.1 * i as f64)),
                stride: 2,
            };
            let y = residual_block(tape, xv, &p)?;
            Ok(tape.sum(y))
        };
        let err = finite_diff_check(forward, &x, 1e-3).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
