use super::kernels::{
    max_pool2_backward, max_pool2_forward, upsample_axis, upsample_axis_transpose, ConvGeom,
};
use super::tensor::{lane_dot, lane_sum};
use super::{Backward, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

struct Conv3d {
    geom: ConvGeom,
}

impl<T: Scalar> Backward<T> for Conv3d {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let dx = needs[0].then(|| {
            let d = self.geom.backward_input(grad.data(), w.data());
            Tensor::from_vec(x.shape(), d).expect("conv input grad shape")
        });
        let (dw, db) = if needs[1] || needs[2] {
            let (dw, db) = self.geom.backward_params(grad.data(), x.data());
            (
                Some(Tensor::from_vec(w.shape(), dw).expect("conv weight grad shape")),
                Some(Tensor::from_vec(b.shape(), db).expect("conv bias grad shape")),
            )
        } else {
            (None, None)
        };
        vec![dx, dw, db]
    }
}

struct LeakyRelu<T> {
    slope: T,
}

impl<T: Scalar> Backward<T> for LeakyRelu<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { g * self.slope })
            .collect();
        vec![Some(Tensor::from_vec(x.shape(), data).expect("same shape"))]
    }
}

struct MaxPool2 {
    argmax: Vec<u32>,
}

impl<T: Scalar> Backward<T> for MaxPool2 {
    fn name(&self) -> &'static str {
        "max_pool2"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let gin = max_pool2_backward(grad.data(), &self.argmax, x.numel());
        vec![Some(Tensor::from_vec(x.shape(), gin).expect("same shape"))]
    }
}

struct Upsample2;

impl<T: Scalar> Backward<T> for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample_trilinear2"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let [c, d, h, w] = inputs[0].dims4().expect("rank 4");
        let g = upsample_axis_transpose(grad.data(), [c, d, 2 * h, 2 * w], 1);
        let g = upsample_axis_transpose(&g, [c, d, h, 2 * w], 2);
        let g = upsample_axis_transpose(&g, [c, d, h, w], 3);
        vec![Some(Tensor::from_vec(inputs[0].shape(), g).expect("same shape"))]
    }
}

struct Concat {
    split: usize,
}

impl<T: Scalar> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let ga = needs[0].then(|| {
            Tensor::from_vec(a.shape(), grad.data()[..self.split].to_vec()).expect("shape")
        });
        let gb = needs[1].then(|| {
            Tensor::from_vec(b.shape(), grad.data()[self.split..].to_vec()).expect("shape")
        });
        vec![ga, gb]
    }
}

struct Add;

impl<T: Scalar> Backward<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ]
    }
}

struct Scale<T> {
    factor: T,
}

impl<T: Scalar> Backward<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut g = grad.clone();
        g.data_mut().iter_mut().for_each(|v| *v *= self.factor);
        vec![Some(g)]
    }
}

/// Weighted reduction to a scalar; plain sum when `weights` is `None`.
/// A centre, when present, only shifts the value.
struct Reduce<T> {
    weights: Option<Tensor<T>>,
}

impl<T: Scalar> Backward<T> for Reduce<T> {
    fn name(&self) -> &'static str {
        "reduce"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0];
        let out = match &self.weights {
            Some(w) => {
                let mut t = w.clone();
                t.data_mut().iter_mut().for_each(|v| *v *= g);
                t
            }
            None => Tensor::full(inputs[0].shape(), g),
        };
        vec![Some(out)]
    }
}

fn odd_kernel(shape: &[usize]) -> bool {
    shape[2..].iter().all(|k| k % 2 == 1)
}

impl<T: Scalar> Tape<T> {
    /// Stride-1 3-D convolution with "same" zero padding.
    ///
    /// `weight` has shape `(Cout, Cin, kd, kh, kw)` with odd kernel extents
    /// and `bias` has shape `(Cout)`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let [c, d, h, w] = self.value(x).dims4()?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 5 {
            return Err(Error::Shape(format!("conv kernel must be rank 5, got {ws:?}")));
        }
        if ws[1] != c {
            return Err(Error::Shape(format!(
                "conv kernel expects {} input channels, input has {c}",
                ws[1]
            )));
        }
        if !odd_kernel(&ws) {
            return Err(Error::InvalidArgument(format!(
                "conv kernel extents must be odd, got {:?}",
                &ws[2..]
            )));
        }
        if self.value(bias).shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {} output channels",
                self.value(bias).shape(),
                ws[0]
            )));
        }
        let geom = ConvGeom::new(c, ws[0], [d, h, w], [ws[2], ws[3], ws[4]]);
        let out = geom.forward(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = Tensor::from_vec(&[ws[0], d, h, w], out)?;
        self.record(out, &[x, weight, bias], Box::new(Conv3d { geom }))
    }

    /// Elementwise `max(x, slope·x)`; the derivative at 0 is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope must lie in (0, 1), got {slope}"
            )));
        }
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        self.record(out, &[x], Box::new(LeakyRelu { slope }))
    }

    /// Non-overlapping 2x2x2 max pooling; ties go to the lowest index.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if dims[1..].iter().any(|n| n % 2 == 1) {
            return Err(Error::Shape(format!(
                "max_pool2 needs even spatial dims, got {:?}",
                &dims[1..]
            )));
        }
        let (out, argmax) = max_pool2_forward(self.value(x).data(), dims);
        let out = Tensor::from_vec(&[dims[0], dims[1] / 2, dims[2] / 2, dims[3] / 2], out)?;
        self.record(out, &[x], Box::new(MaxPool2 { argmax }))
    }

    /// Trilinear 2x upsampling with voxel centres aligned at half-voxel
    /// offsets and clamped edges.
    pub fn upsample_trilinear2(&mut self, x: Var) -> Result<Var> {
        let [c, d, h, w] = self.value(x).dims4()?;
        let y = upsample_axis(self.value(x).data(), [c, d, h, w], 3);
        let y = upsample_axis(&y, [c, d, h, 2 * w], 2);
        let y = upsample_axis(&y, [c, d, 2 * h, 2 * w], 1);
        let out = Tensor::from_vec(&[c, 2 * d, 2 * h, 2 * w], y)?;
        self.record(out, &[x], Box::new(Upsample2))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ca, da, ha, wa] = self.value(a).dims4()?;
        let [cb, db, hb, wb] = self.value(b).dims4()?;
        if (da, ha, wa) != (db, hb, wb) {
            return Err(Error::Shape(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                (da, ha, wa),
                (db, hb, wb)
            )));
        }
        let mut data = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let split = self.value(a).numel();
        let out = Tensor::from_vec(&[ca + cb, da, ha, wa], data)?;
        self.record(out, &[a, b], Box::new(Concat { split }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        self.record(out, &[a, b], Box::new(Add))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        self.record(out, &[x], Box::new(Scale { factor }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = lane_sum(self.value(x).data());
        self.record(Tensor::scalar(s), &[x], Box::new(Reduce { weights: None }))
    }

    /// `Σ weights ⊙ x`, as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        self.value(x).same_shape(&weights, "weighted_sum")?;
        let s = lane_dot(self.value(x).data(), weights.data());
        self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(Reduce {
                weights: Some(weights),
            }),
        )
    }

    /// `Σ weights ⊙ (x − center)`, as a scalar.
    ///
    /// Same gradient as [`Tape::weighted_sum`], but entries equal to their
    /// centre contribute exact zeros, which keeps the rounding noise of the
    /// value proportional to the entries that actually moved. Finite
    /// differences around `center` rely on this.
    pub fn weighted_sum_about(&mut self, x: Var, weights: Tensor<T>, center: &Tensor<T>) -> Result<Var> {
        self.value(x).same_shape(&weights, "weighted_sum_about")?;
        self.value(x).same_shape(center, "weighted_sum_about")?;
        let shifted: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(center.data())
            .map(|(&a, &c)| a - c)
            .collect();
        let s = lane_dot(&shifted, weights.data());
        self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(Reduce {
                weights: Some(weights),
            }),
        )
    }
}
