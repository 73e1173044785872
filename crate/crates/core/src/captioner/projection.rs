use ndarray::{Array1, Axis};

use crate::error::{Error, Result};
use crate::nn::{vstack, Init, Mat};

/// The trainable affine map from fused features into the decoder's input
/// space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLayer {
    /// `d_model x d_llm`.
    pub weight: Mat,
    pub bias: Array1<f64>,
}

pub struct ProjectionGrads {
    pub weight: Mat,
    pub bias: Array1<f64>,
    /// Gradient with respect to the stacked input rows.
    pub input: Mat,
}

impl ProjectionLayer {
    pub fn init(seed: u64, d_model: usize, d_llm: usize) -> Self {
        let init = Init { seed };
        Self {
            weight: init.normal("phi.w", d_model, d_llm, (1.0 / d_model as f64).sqrt()),
            bias: Array1::zeros(d_llm),
        }
    }

    /// Row-wise `[Q ; V] W + b`.
    pub fn project(&self, visual: &Mat, fused: &Mat) -> Result<Mat> {
        let d_model = self.weight.nrows();
        if visual.ncols() != d_model || fused.ncols() != d_model {
            return Err(Error::ShapeMismatch(format!(
                "projection expects width {d_model}, got {} and {}",
                visual.ncols(),
                fused.ncols()
            )));
        }
        Ok(self.apply(&vstack(visual, fused)))
    }

    pub fn apply(&self, input: &Mat) -> Mat {
        input.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, input: &Mat, dout: &Mat) -> ProjectionGrads {
        ProjectionGrads {
            weight: input.t().dot(dout),
            bias: dout.sum_axis(Axis(0)),
            input: dout.dot(&self.weight.t()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{numeric_grad, rel_err};

    #[test]
    fn identity_weight_passes_rows_through() {
        let mut phi = ProjectionLayer::init(0, 4, 4);
        phi.weight = Mat::eye(4);
        phi.bias.fill(0.0);
        let q = Init { seed: 1 }.normal("q", 3, 4, 1.0);
        let v = Init { seed: 2 }.normal("v", 2, 4, 1.0);
        assert_eq!(phi.project(&q, &v).unwrap(), vstack(&q, &v));
    }

    #[test]
    fn zero_rows_map_to_bias() {
        let mut phi = ProjectionLayer::init(0, 4, 6);
        phi.bias = Init { seed: 3 }.normal_vec("b", 6, 1.0);
        let out = phi.project(&Mat::zeros((2, 4)), &Mat::zeros((1, 4))).unwrap();
        for row in out.rows() {
            assert_eq!(row, phi.bias);
        }
    }

    #[test]
    fn matches_triple_loop() {
        let phi = ProjectionLayer {
            weight: Init { seed: 4 }.normal("w", 5, 7, 1.0),
            bias: Init { seed: 5 }.normal_vec("b", 7, 1.0),
        };
        let q = Init { seed: 6 }.normal("q", 4, 5, 1.0);
        let v = Init { seed: 7 }.normal("v", 3, 5, 1.0);
        let out = phi.project(&q, &v).unwrap();
        let rows: Vec<_> = q.rows().into_iter().chain(v.rows()).collect();
        for (r, row) in rows.iter().enumerate() {
            for c in 0..7 {
                let mut acc = phi.bias[c];
                for k in 0..5 {
                    acc += row[k] * phi.weight[[k, c]];
                }
                assert!((out[[r, c]] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let phi = ProjectionLayer::init(0, 4, 6);
        assert!(phi.project(&Mat::zeros((2, 3)), &Mat::zeros((1, 4))).is_err());
    }

    #[test]
    fn gradients() {
        let phi = ProjectionLayer::init(9, 3, 4);
        let x = Init { seed: 8 }.normal("x", 5, 3, 1.0);
        let probe = Init { seed: 10 }.normal("p", 5, 4, 1.0);
        let g = phi.backward(&x, &probe);
        let fd_w = numeric_grad(&phi.weight, 1e-6, |w| {
            (ProjectionLayer {
                weight: w.clone(),
                bias: phi.bias.clone(),
            }
            .apply(&x)
                * &probe)
                .sum()
        });
        assert!(rel_err(&g.weight, &fd_w) < 1e-8);
        let fd_x = numeric_grad(&x, 1e-6, |x| (phi.apply(x) * &probe).sum());
        assert!(rel_err(&g.input, &fd_x) < 1e-8);
    }
}
