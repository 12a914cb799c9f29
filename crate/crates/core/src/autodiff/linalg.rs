//! Dense and convolutional linear algebra (GEMM-backed).

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Ix2, Ix3, Ix4};

use super::{BackwardOp, Data, Graph, Var};

/// im2col for a [C, H, W] input, `k`-tap square kernel, same-size zero
/// padding: returns [C*k*k, H*W].
fn im2col(x: &ArrayView3<'_, f32>, k: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let mut m = Array2::<f32>::zeros((c * k * k, h * w));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut out_row = m.row_mut(row);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out_row[y * w + xx] = plane[[sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    m
}

/// Adjoint of [`im2col`]: scatter-add a [C*k*k, H*W] matrix back to [C, H, W].
fn col2im(m: &ArrayView2<'_, f32>, c: usize, h: usize, w: usize, k: usize) -> Array3<f32> {
    let pad = k / 2;
    let mut x = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = x.index_axis_mut(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = m.row((ci * k + ky) * k + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        plane[[sy as usize, sx as usize]] += row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

struct MatmulBw;
impl BackwardOp for MatmulBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, w: &[bool]) -> Vec<Option<Data>> {
        let a = x[0].view().into_dimensionality::<Ix2>().unwrap();
        let b = x[1].view().into_dimensionality::<Ix2>().unwrap();
        let gm = g.view().into_dimensionality::<Ix2>().unwrap();
        vec![
            w[0].then(|| gm.dot(&b.t()).into_dyn()),
            w[1].then(|| a.t().dot(&gm).into_dyn()),
        ]
    }
}

struct AddRowBiasBw;
impl BackwardOp for AddRowBiasBw {
    fn backward(&self, g: &Data, _x: &[&Data], _y: &Data, w: &[bool]) -> Vec<Option<Data>> {
        let gm = g.view().into_dimensionality::<Ix2>().unwrap();
        vec![
            w[0].then(|| g.clone()),
            w[1].then(|| gm.sum_axis(Axis(0)).into_dyn()),
        ]
    }
}

struct Conv2dBw {
    k: usize,
}
impl BackwardOp for Conv2dBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, wants: &[bool]) -> Vec<Option<Data>> {
        let input = x[0].view().into_dimensionality::<Ix3>().unwrap();
        let weight = x[1].view().into_dimensionality::<Ix4>().unwrap();
        let (c_out, c_in, k, _) = weight.dim();
        debug_assert_eq!(k, self.k);
        let (_, h, w) = input.dim();
        let g_mat = g
            .view()
            .into_shape_with_order((c_out, h * w))
            .unwrap()
            .to_owned();
        let w_mat = weight
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap()
            .to_owned();

        let d_input = wants[0].then(|| {
            let d_cols = w_mat.t().dot(&g_mat);
            if k == 1 {
                d_cols
                    .into_shape_with_order((c_in, h, w))
                    .unwrap()
                    .into_dyn()
            } else {
                col2im(&d_cols.view(), c_in, h, w, k).into_dyn()
            }
        });
        let d_weight = wants[1].then(|| {
            let cols = if k == 1 {
                input
                    .view()
                    .into_shape_with_order((c_in, h * w))
                    .unwrap()
                    .to_owned()
            } else {
                im2col(&input, k)
            };
            g_mat
                .dot(&cols.t())
                .into_shape_with_order((c_out, c_in, k, k))
                .unwrap()
                .into_dyn()
        });
        let d_bias = wants[2].then(|| g_mat.sum_axis(Axis(1)).into_dyn());
        vec![d_input, d_weight, d_bias]
    }
}

impl Graph {
    /// [N, K] x [K, M] -> [N, M].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows());
        let v = av.dot(&bv).into_dyn();
        self.push(v, &[a, b], Box::new(MatmulBw))
    }

    /// Add a [M] bias to every row of a [N, M] matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(bias);
        assert_eq!(av.ncols(), bv.len());
        let mut v = av.to_owned();
        let brow = bv.view().into_shape_with_order(av.ncols()).unwrap();
        for mut row in v.rows_mut() {
            row += &brow;
        }
        self.push(v.into_dyn(), &[a, bias], Box::new(AddRowBiasBw))
    }

    /// 2-D convolution, stride 1, zero padding k/2 (spatial size preserved).
    ///
    /// input [C_in, H, W], weight [C_out, C_in, k, k], bias [C_out].
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self
            .value(input)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let wt = self
            .value(weight)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (c_out, c_in, k, k2) = wt.dim();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(k % 2, 1, "odd kernels only");
        assert_eq!(x.dim().0, c_in, "conv2d channel mismatch");
        assert_eq!(self.value(bias).len(), c_out);
        let (_, h, w) = x.dim();

        let w_mat = wt
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap()
            .to_owned();
        let out_mat = if k == 1 {
            let x_mat = x.view().into_shape_with_order((c_in, h * w)).unwrap();
            w_mat.dot(&x_mat)
        } else {
            let cols = im2col(&x, k);
            w_mat.dot(&cols)
        };
        let mut out = out_mat.into_shape_with_order((c_out, h, w)).unwrap();
        let bias_val = self.value(bias).clone();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let b = bias_val[[c]];
            plane.mapv_inplace(|v| v + b);
        }
        self.push(out.into_dyn(), &[input, weight, bias], Box::new(Conv2dBw { k }))
    }
}
