//! Elementwise, reduction and shape ops.

use ndarray::{Axis, Slice};

use super::{BackwardOp, Data, Graph, Var};

struct AddBw;
impl BackwardOp for AddBw {
    fn backward(&self, g: &Data, _x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubBw;
impl BackwardOp for SubBw {
    fn backward(&self, g: &Data, _x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        vec![Some(g.clone()), Some(-g.clone())]
    }
}

struct MulBw;
impl BackwardOp for MulBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, w: &[bool]) -> Vec<Option<Data>> {
        vec![
            w[0].then(|| g * x[1]),
            w[1].then(|| g * x[0]),
        ]
    }
}

struct ScaleBw(f32);
impl BackwardOp for ScaleBw {
    fn backward(&self, g: &Data, _x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        vec![Some(g * self.0)]
    }
}

struct AddScalarBw;
impl BackwardOp for AddScalarBw {
    fn backward(&self, g: &Data, _x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        vec![Some(g.clone())]
    }
}

struct LeakyReluBw(f32);
impl BackwardOp for LeakyReluBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let slope = self.0;
        let mut dx = g.clone();
        dx.zip_mut_with(x[0], |d, &v| {
            if v < 0.0 {
                *d *= slope;
            }
        });
        vec![Some(dx)]
    }
}

struct SigmoidBw;
impl BackwardOp for SigmoidBw {
    fn backward(&self, g: &Data, _x: &[&Data], y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let mut dx = g.clone();
        dx.zip_mut_with(y, |d, &s| *d *= s * (1.0 - s));
        vec![Some(dx)]
    }
}

struct SinBw(f32);
impl BackwardOp for SinBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let omega = self.0;
        let mut dx = g.clone();
        dx.zip_mut_with(x[0], |d, &v| *d *= omega * (omega * v).cos());
        vec![Some(dx)]
    }
}

struct SqrtBw;
impl BackwardOp for SqrtBw {
    fn backward(&self, g: &Data, _x: &[&Data], y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let mut dx = g.clone();
        dx.zip_mut_with(y, |d, &r| *d *= 0.5 / r);
        vec![Some(dx)]
    }
}

struct SquareBw;
impl BackwardOp for SquareBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let mut dx = g.clone();
        dx.zip_mut_with(x[0], |d, &v| *d *= 2.0 * v);
        vec![Some(dx)]
    }
}

struct MeanAllBw {
    n: usize,
    shape: Vec<usize>,
}
impl BackwardOp for MeanAllBw {
    fn backward(&self, g: &Data, _x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let gv = g.iter().next().copied().unwrap_or(0.0) / self.n as f32;
        vec![Some(Data::from_elem(self.shape.as_slice(), gv))]
    }
}

struct WeightedSumBw {
    weights: Data,
}
impl BackwardOp for WeightedSumBw {
    fn backward(&self, g: &Data, _x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let gv = g.iter().next().copied().unwrap_or(0.0);
        vec![Some(&self.weights * gv)]
    }
}

struct SumChannelsBw {
    channels: usize,
}
impl BackwardOp for SumChannelsBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let mut dx = Data::zeros(x[0].raw_dim());
        for mut lane in dx.axis_iter_mut(Axis(0)) {
            lane.assign(g);
        }
        let _ = self.channels;
        vec![Some(dx)]
    }
}

struct MulBroadcastHwBw;
impl BackwardOp for MulBroadcastHwBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, w: &[bool]) -> Vec<Option<Data>> {
        let (x0, m) = (x[0], x[1]);
        let dx = w[0].then(|| {
            let mut dx = g.clone();
            for mut lane in dx.axis_iter_mut(Axis(0)) {
                lane.zip_mut_with(m, |d, &mv| *d *= mv);
            }
            dx
        });
        let dm = w[1].then(|| {
            let mut dm = Data::zeros(m.raw_dim());
            for (glane, xlane) in g.axis_iter(Axis(0)).zip(x0.axis_iter(Axis(0))) {
                dm.zip_mut_with(&(&glane * &xlane), |d, &v| *d += v);
            }
            dm
        });
        vec![dx, dm]
    }
}

struct MulBroadcastChannelBw;
impl BackwardOp for MulBroadcastChannelBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, w: &[bool]) -> Vec<Option<Data>> {
        let (x0, s) = (x[0], x[1]);
        let channels = x0.shape()[0];
        let dx = w[0].then(|| {
            let mut dx = g.clone();
            for (c, mut lane) in dx.axis_iter_mut(Axis(0)).enumerate() {
                let sv = s[[c, 0, 0]];
                lane.mapv_inplace(|v| v * sv);
            }
            dx
        });
        let ds = w[1].then(|| {
            let mut ds = Data::zeros(s.raw_dim());
            for c in 0..channels {
                let dot: f64 = g
                    .index_axis(Axis(0), c)
                    .iter()
                    .zip(x0.index_axis(Axis(0), c).iter())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                ds[[c, 0, 0]] = dot as f32;
            }
            ds
        });
        vec![dx, ds]
    }
}

struct ConcatBw {
    axis: usize,
    sizes: Vec<usize>,
}
impl BackwardOp for ConcatBw {
    fn backward(&self, g: &Data, _x: &[&Data], _y: &Data, w: &[bool]) -> Vec<Option<Data>> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut start = 0isize;
        for (k, &sz) in self.sizes.iter().enumerate() {
            let end = start + sz as isize;
            out.push(w[k].then(|| {
                g.slice_axis(Axis(self.axis), Slice::new(start, Some(end), 1))
                    .to_owned()
            }));
            start = end;
        }
        out
    }
}

struct SliceChannelsBw {
    start: usize,
    len: usize,
}
impl BackwardOp for SliceChannelsBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let mut dx = Data::zeros(x[0].raw_dim());
        dx.slice_axis_mut(
            Axis(0),
            Slice::new(self.start as isize, Some((self.start + self.len) as isize), 1),
        )
        .assign(g);
        vec![Some(dx)]
    }
}

struct Stack0Bw;
impl BackwardOp for Stack0Bw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, w: &[bool]) -> Vec<Option<Data>> {
        (0..x.len())
            .map(|k| w[k].then(|| g.index_axis(Axis(0), k).to_owned()))
            .collect()
    }
}

struct Softmax0Bw;
impl BackwardOp for Softmax0Bw {
    fn backward(&self, g: &Data, _x: &[&Data], y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        // dx_t = y_t * (g_t - sum_s g_s y_s)
        let weighted = g * y;
        let total = weighted.sum_axis(Axis(0));
        let mut dx = g.clone();
        for (mut lane, ylane) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
            ndarray::Zip::from(&mut lane)
                .and(&ylane)
                .and(&total)
                .for_each(|d, &yv, &tv| *d = yv * (*d - tv));
        }
        vec![Some(dx)]
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        self.push(v, &[a, b], Box::new(AddBw))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) - self.value(b);
        self.push(v, &[a, b], Box::new(SubBw))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) * self.value(b);
        self.push(v, &[a, b], Box::new(MulBw))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v = self.value(a) * c;
        self.push(v, &[a], Box::new(ScaleBw(c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let v = self.value(a) + c;
        self.push(v, &[a], Box::new(AddScalarBw))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let v = self.value(a).mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.push(v, &[a], Box::new(LeakyReluBw(slope)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, &[a], Box::new(SigmoidBw))
    }

    /// sin(omega * x) — the periodic activation of the hyper-network.
    pub fn sin(&mut self, a: Var, omega: f32) -> Var {
        let v = self.value(a).mapv(|x| (omega * x).sin());
        self.push(v, &[a], Box::new(SinBw(omega)))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f32::sqrt);
        self.push(v, &[a], Box::new(SqrtBw))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, &[a], Box::new(SquareBw))
    }

    /// Mean over all elements, as a 0-d scalar (f64 accumulation).
    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len().max(1);
        let mean = (x.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
        let shape = x.shape().to_vec();
        let v = Data::from_elem(ndarray::IxDyn(&[]), mean);
        self.push(v, &[a], Box::new(MeanAllBw { n, shape }))
    }

    /// Scalar probe functional sum(weights ⊙ x) with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &Data) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), weights.shape());
        let s: f64 = x
            .iter()
            .zip(weights.iter())
            .map(|(&v, &w)| v as f64 * w as f64)
            .sum();
        let v = Data::from_elem(ndarray::IxDyn(&[]), s as f32);
        self.push(
            v,
            &[a],
            Box::new(WeightedSumBw {
                weights: weights.clone(),
            }),
        )
    }

    /// Sum over the leading (channel) axis: [C, ...] -> [...].
    pub fn sum_channels(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let channels = x.shape()[0];
        let v = x.sum_axis(Axis(0));
        self.push(v, &[a], Box::new(SumChannelsBw { channels }))
    }

    /// Multiply [C, H, W] by a per-position map [H, W].
    pub fn mul_broadcast_hw(&mut self, a: Var, m: Var) -> Var {
        let (x, mv) = (self.value(a), self.value(m));
        assert_eq!(&x.shape()[1..], mv.shape());
        let mut v = x.clone();
        for mut lane in v.axis_iter_mut(Axis(0)) {
            lane.zip_mut_with(mv, |d, &s| *d *= s);
        }
        self.push(v, &[a, m], Box::new(MulBroadcastHwBw))
    }

    /// Multiply [C, H, W] by a per-channel gate [C, 1, 1].
    pub fn mul_broadcast_channel(&mut self, a: Var, s: Var) -> Var {
        let (x, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.shape(), &[x.shape()[0], 1, 1]);
        let mut v = x.clone();
        for (c, mut lane) in v.axis_iter_mut(Axis(0)).enumerate() {
            let g = sv[[c, 0, 0]];
            lane.mapv_inplace(|x| x * g);
        }
        self.push(v, &[a, s], Box::new(MulBroadcastChannelBw))
    }

    /// Concatenate along `axis` (all inputs share the other dims).
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes = parts.iter().map(|&p| self.value(p).shape()[axis]).collect();
        self.push(v, parts, Box::new(ConcatBw { axis, sizes }))
    }

    /// Channel sub-range [start, start+len) of a [C, ...] tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.shape()[0]);
        let v = x
            .slice_axis(
                Axis(0),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .to_owned();
        self.push(v, &[a], Box::new(SliceChannelsBw { start, len }))
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::stack(Axis(0), &views).expect("stack shape mismatch");
        self.push(v, parts, Box::new(Stack0Bw))
    }

    /// Softmax over the leading axis (numerically stabilized).
    pub fn softmax0(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let maxes = x.fold_axis(Axis(0), f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut v = x.clone();
        for mut lane in v.axis_iter_mut(Axis(0)) {
            ndarray::Zip::from(&mut lane).and(&maxes).for_each(|d, &m| *d = (*d - m).exp());
        }
        let denom = v.sum_axis(Axis(0));
        for mut lane in v.axis_iter_mut(Axis(0)) {
            ndarray::Zip::from(&mut lane).and(&denom).for_each(|d, &s| *d /= s);
        }
        self.push(v, &[a], Box::new(Softmax0Bw))
    }
}
