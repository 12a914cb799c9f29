//! Spatial sampling ops: bilinear warping, modulated deformable gathering,
//! unfold/fold, grid resizing and pooling.
//!
//! Layout conventions shared by unfold, fold and the deformable gather:
//! tap index `t = ky*k + kx` with `pad = k/2`; an unfolded tensor stores
//! channel `c`, tap `t` at row `c*k*k + t`, matching a `[C_out, C_in, k, k]`
//! convolution weight flattened to `[C_out, C_in*k*k]`. Deformable offset
//! planes hold `(dx, dy)` for group `g`, tap `t` at channels
//! `(g*k*k + t)*2` and `(g*k*k + t)*2 + 1`; modulation holds `g*k*k + t`.

use ndarray::{Array3, ArrayView2, ArrayView3, Axis, Ix3};

use super::{BackwardOp, Data, Graph, Var};

/// Bilinear sample with zero padding outside the image.
#[inline]
fn sample_zero(plane: &ArrayView2<'_, f32>, px: f32, py: f32) -> f32 {
    let (h, w) = plane.dim();
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let tap = |yy: isize, xx: isize| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            plane[[yy as usize, xx as usize]]
        }
    };
    tap(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + tap(y0, x0 + 1) * fx * (1.0 - fy)
        + tap(y0 + 1, x0) * (1.0 - fx) * fy
        + tap(y0 + 1, x0 + 1) * fx * fy
}

/// Scatter `g` into `acc` at the four bilinear taps of (px, py), zero padded.
#[inline]
fn scatter_zero(acc: &mut ndarray::ArrayViewMut2<'_, f32>, px: f32, py: f32, g: f32) {
    let (h, w) = acc.dim();
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut add = |yy: isize, xx: isize, wgt: f32| {
        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
            acc[[yy as usize, xx as usize]] += g * wgt;
        }
    };
    add(y0, x0, (1.0 - fx) * (1.0 - fy));
    add(y0, x0 + 1, fx * (1.0 - fy));
    add(y0 + 1, x0, (1.0 - fx) * fy);
    add(y0 + 1, x0 + 1, fx * fy);
}

/// d(sample)/d(px), d(sample)/d(py) of the zero-padded bilinear sample.
#[inline]
fn sample_zero_pos_grad(plane: &ArrayView2<'_, f32>, px: f32, py: f32) -> (f32, f32) {
    let (h, w) = plane.dim();
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let tap = |yy: isize, xx: isize| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            plane[[yy as usize, xx as usize]]
        }
    };
    let (v00, v01) = (tap(y0, x0), tap(y0, x0 + 1));
    let (v10, v11) = (tap(y0 + 1, x0), tap(y0 + 1, x0 + 1));
    let dx = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy;
    let dy = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx;
    (dx, dy)
}

/// Bilinear gather at explicit source positions, clamped at the borders.
/// `rows[i]`/`cols[j]` are continuous index coordinates of output pixel
/// (i, j) in the input grid. This is the single resize kernel used both
/// inside the graph and for frozen feature pyramids.
pub fn bilinear_resize_array(x: &ArrayView3<'_, f32>, rows: &[f32], cols: &[f32]) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f32>::zeros((c, rows.len(), cols.len()));
    // Precompute clamped corner indices and fractions once per axis.
    let ys: Vec<(usize, usize, f32)> = rows.iter().map(|&p| axis_taps(p, h)).collect();
    let xs: Vec<(usize, usize, f32)> = cols.iter().map(|&p| axis_taps(p, w)).collect();
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        let mut oplane = out.index_axis_mut(Axis(0), ci);
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
                let bot = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
                oplane[[i, j]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Clamped corner pair and fraction along one axis.
#[inline]
fn axis_taps(pos: f32, size: usize) -> (usize, usize, f32) {
    let p = pos.clamp(0.0, (size - 1) as f32);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, p - i0 as f32)
}

struct WarpBw {
    flow: Array3<f32>,
}
impl BackwardOp for WarpBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let input = x[0].view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = input.dim();
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let mut dx = Array3::<f32>::zeros((c, h, w));
        for ci in 0..c {
            let mut acc = dx.index_axis_mut(Axis(0), ci);
            let gp = gv.index_axis(Axis(0), ci);
            for y in 0..h {
                for xx in 0..w {
                    let px = xx as f32 + self.flow[[y, xx, 0]];
                    let py = y as f32 + self.flow[[y, xx, 1]];
                    scatter_zero(&mut acc, px, py, gp[[y, xx]]);
                }
            }
        }
        vec![Some(dx.into_dyn())]
    }
}

struct UnfoldBw {
    k: usize,
}
impl BackwardOp for UnfoldBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let (c, h, w) = x[0].view().into_dimensionality::<Ix3>().unwrap().dim();
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        vec![Some(fold_array(&gv, c, self.k).into_dyn())]
    }
}

struct FoldBw {
    k: usize,
}
impl BackwardOp for FoldBw {
    fn backward(&self, g: &Data, _x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        vec![Some(unfold_array(&gv, self.k).into_dyn())]
    }
}

fn unfold_array(x: &ArrayView3<'_, f32>, k: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let k2 = k * k;
    let pad = (k / 2) as isize;
    let mut out = Array3::<f32>::zeros((c * k2, h, w));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let t = ky * k + kx;
                let mut oplane = out.index_axis_mut(Axis(0), ci * k2 + t);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        oplane[[y, xx]] = plane[[sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    out
}

fn fold_array(x: &ArrayView3<'_, f32>, c: usize, k: usize) -> Array3<f32> {
    let k2 = k * k;
    let (ck2, h, w) = x.dim();
    assert_eq!(ck2, c * k2);
    let pad = (k / 2) as isize;
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        let mut oplane = out.index_axis_mut(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let t = ky * k + kx;
                let plane = x.index_axis(Axis(0), ci * k2 + t);
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        oplane[[sy as usize, sx as usize]] += plane[[y, xx]];
                    }
                }
            }
        }
    }
    out
}

struct GridResizeBw {
    rows: Vec<f32>,
    cols: Vec<f32>,
}
impl BackwardOp for GridResizeBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let (c, h, w) = x[0].view().into_dimensionality::<Ix3>().unwrap().dim();
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let ys: Vec<(usize, usize, f32)> = self.rows.iter().map(|&p| axis_taps(p, h)).collect();
        let xs: Vec<(usize, usize, f32)> = self.cols.iter().map(|&p| axis_taps(p, w)).collect();
        let mut dx = Array3::<f32>::zeros((c, h, w));
        for ci in 0..c {
            let gp = gv.index_axis(Axis(0), ci);
            let mut acc = dx.index_axis_mut(Axis(0), ci);
            for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let gg = gp[[i, j]];
                    acc[[y0, x0]] += gg * (1.0 - fx) * (1.0 - fy);
                    acc[[y0, x1]] += gg * fx * (1.0 - fy);
                    acc[[y1, x0]] += gg * (1.0 - fx) * fy;
                    acc[[y1, x1]] += gg * fx * fy;
                }
            }
        }
        vec![Some(dx.into_dyn())]
    }
}

struct AvgPool2Bw;
impl BackwardOp for AvgPool2Bw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let (c, h, w) = x[0].view().into_dimensionality::<Ix3>().unwrap().dim();
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let mut dx = Array3::<f32>::zeros((c, h, w));
        for ci in 0..c {
            let gp = gv.index_axis(Axis(0), ci);
            let mut acc = dx.index_axis_mut(Axis(0), ci);
            for oy in 0..gp.dim().0 {
                for ox in 0..gp.dim().1 {
                    let ys = (2 * oy)..(2 * oy + 2).min(h);
                    let xs = (2 * ox)..(2 * ox + 2).min(w);
                    let count = (ys.len() * xs.len()) as f32;
                    let val = gp[[oy, ox]] / count;
                    for yy in ys.clone() {
                        for xx in xs.clone() {
                            acc[[yy, xx]] += val;
                        }
                    }
                }
            }
        }
        vec![Some(dx.into_dyn())]
    }
}

struct GlobalAvgPoolBw;
impl BackwardOp for GlobalAvgPoolBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, _w: &[bool]) -> Vec<Option<Data>> {
        let (c, h, w) = x[0].view().into_dimensionality::<Ix3>().unwrap().dim();
        let scale = 1.0 / (h * w) as f32;
        let mut dx = Array3::<f32>::zeros((c, h, w));
        for ci in 0..c {
            let gv = g[[ci, 0, 0]] * scale;
            dx.index_axis_mut(Axis(0), ci).fill(gv);
        }
        vec![Some(dx.into_dyn())]
    }
}

struct DeformGatherBw {
    flow: Array3<f32>,
    groups: usize,
    k: usize,
}
impl BackwardOp for DeformGatherBw {
    fn backward(&self, g: &Data, x: &[&Data], _y: &Data, wants: &[bool]) -> Vec<Option<Data>> {
        let input = x[0].view().into_dimensionality::<Ix3>().unwrap();
        let offsets = x[1].view().into_dimensionality::<Ix3>().unwrap();
        let modulation = x[2].view().into_dimensionality::<Ix3>().unwrap();
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = input.dim();
        let k = self.k;
        let k2 = k * k;
        let per_group = c / self.groups;
        let pad = (k / 2) as f32;

        let mut d_input = wants[0].then(|| Array3::<f32>::zeros((c, h, w)));
        let mut d_offsets = wants[1].then(|| Array3::<f32>::zeros(offsets.dim()));
        let mut d_mod = wants[2].then(|| Array3::<f32>::zeros(modulation.dim()));

        for ci in 0..c {
            let group = ci / per_group;
            let plane = input.index_axis(Axis(0), ci);
            for t in 0..k2 {
                let (ky, kx) = (t / k, t % k);
                let gp = gv.index_axis(Axis(0), ci * k2 + t);
                let off_x = offsets.index_axis(Axis(0), (group * k2 + t) * 2);
                let off_y = offsets.index_axis(Axis(0), (group * k2 + t) * 2 + 1);
                let mp = modulation.index_axis(Axis(0), group * k2 + t);
                for y in 0..h {
                    for xx in 0..w {
                        let gg = gp[[y, xx]];
                        if gg == 0.0 {
                            continue;
                        }
                        let px = xx as f32 + kx as f32 - pad
                            + self.flow[[y, xx, 0]]
                            + off_x[[y, xx]];
                        let py = y as f32 + ky as f32 - pad
                            + self.flow[[y, xx, 1]]
                            + off_y[[y, xx]];
                        let m = mp[[y, xx]];
                        if let Some(di) = d_input.as_mut() {
                            let mut acc = di.index_axis_mut(Axis(0), ci);
                            scatter_zero(&mut acc, px, py, gg * m);
                        }
                        if let Some(doff) = d_offsets.as_mut() {
                            let (dpx, dpy) = sample_zero_pos_grad(&plane, px, py);
                            doff[[(group * k2 + t) * 2, y, xx]] += gg * m * dpx;
                            doff[[(group * k2 + t) * 2 + 1, y, xx]] += gg * m * dpy;
                        }
                        if let Some(dm) = d_mod.as_mut() {
                            dm[[group * k2 + t, y, xx]] += gg * sample_zero(&plane, px, py);
                        }
                    }
                }
            }
        }
        vec![
            d_input.map(|d| d.into_dyn()),
            d_offsets.map(|d| d.into_dyn()),
            d_mod.map(|d| d.into_dyn()),
        ]
    }
}

impl Graph {
    /// Backward-warp [C, H, W] features by a constant flow field
    /// [H, W, 2] of (dx, dy) source displacements; zero padding outside.
    pub fn warp(&mut self, features: Var, flow: &Array3<f32>) -> Var {
        let x = self
            .value(features)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let (c, h, w) = x.dim();
        assert_eq!(flow.dim(), (h, w, 2), "flow/feature shape mismatch");
        let mut out = Array3::<f32>::zeros((c, h, w));
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ci);
            let mut oplane = out.index_axis_mut(Axis(0), ci);
            for y in 0..h {
                for xx in 0..w {
                    let px = xx as f32 + flow[[y, xx, 0]];
                    let py = y as f32 + flow[[y, xx, 1]];
                    oplane[[y, xx]] = sample_zero(&plane, px, py);
                }
            }
        }
        self.push(
            out.into_dyn(),
            &[features],
            Box::new(WarpBw { flow: flow.clone() }),
        )
    }

    /// Unfold each k x k neighborhood into channels: [C, H, W] -> [C*k*k, H, W].
    pub fn unfold(&mut self, features: Var, k: usize) -> Var {
        let x = self
            .value(features)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let v = unfold_array(&x, k);
        self.push(v.into_dyn(), &[features], Box::new(UnfoldBw { k }))
    }

    /// Adjoint of [`Graph::unfold`]: sum taps back, [C*k*k, H, W] -> [C, H, W].
    pub fn fold(&mut self, features: Var, k: usize) -> Var {
        let x = self
            .value(features)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let c = x.dim().0 / (k * k);
        let v = fold_array(&x, c, k);
        self.push(v.into_dyn(), &[features], Box::new(FoldBw { k }))
    }

    /// Bilinear resize to explicit source positions (border-clamped).
    pub fn grid_resize(&mut self, features: Var, rows: &[f32], cols: &[f32]) -> Var {
        let x = self
            .value(features)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let v = bilinear_resize_array(&x, rows, cols);
        self.push(
            v.into_dyn(),
            &[features],
            Box::new(GridResizeBw {
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            }),
        )
    }

    /// 2x2 average pooling, ceil mode (edge cells average their valid taps).
    pub fn avg_pool2(&mut self, features: Var) -> Var {
        let x = self
            .value(features)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let (c, h, w) = x.dim();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = Array3::<f32>::zeros((c, oh, ow));
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ci);
            let mut oplane = out.index_axis_mut(Axis(0), ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let ys = (2 * oy)..(2 * oy + 2).min(h);
                    let xs = (2 * ox)..(2 * ox + 2).min(w);
                    let mut sum = 0.0;
                    for yy in ys.clone() {
                        for xx in xs.clone() {
                            sum += plane[[yy, xx]];
                        }
                    }
                    oplane[[oy, ox]] = sum / (ys.len() * xs.len()) as f32;
                }
            }
        }
        self.push(out.into_dyn(), &[features], Box::new(AvgPool2Bw))
    }

    /// Global average pool [C, H, W] -> [C, 1, 1].
    pub fn global_avg_pool(&mut self, features: Var) -> Var {
        let x = self
            .value(features)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let (c, h, w) = x.dim();
        let mut out = Array3::<f32>::zeros((c, 1, 1));
        for ci in 0..c {
            let sum: f64 = x
                .index_axis(Axis(0), ci)
                .iter()
                .map(|&v| v as f64)
                .sum();
            out[[ci, 0, 0]] = (sum / (h * w) as f64) as f32;
        }
        self.push(out.into_dyn(), &[features], Box::new(GlobalAvgPoolBw))
    }

    /// Modulated deformable gather.
    ///
    /// For output pixel z, group g and tap t the input is sampled at
    /// `z + tap_offset(t) + flow(z) + offsets(g, t, z)` and scaled by
    /// `modulation(g, t, z)`; samples outside the image read zero. Returns
    /// the unfolded layout [C*k*k, H, W], ready for a 1x1 convolution with
    /// a flattened [C_out, C*k*k] weight.
    ///
    /// `offsets`: [2*G*k*k, H, W]; `modulation` (post-sigmoid): [G*k*k, H, W].
    pub fn deform_gather(
        &mut self,
        features: Var,
        offsets: Var,
        modulation: Var,
        flow: &Array3<f32>,
        groups: usize,
        k: usize,
    ) -> Var {
        let x = self
            .value(features)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let (c, h, w) = x.dim();
        let k2 = k * k;
        assert_eq!(c % groups, 0, "channels must divide into groups");
        assert_eq!(self.value(offsets).shape(), &[2 * groups * k2, h, w]);
        assert_eq!(self.value(modulation).shape(), &[groups * k2, h, w]);
        assert_eq!(flow.dim(), (h, w, 2));
        let offs = self
            .value(offsets)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let mods = self
            .value(modulation)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let per_group = c / groups;
        let pad = (k / 2) as f32;
        let mut out = Array3::<f32>::zeros((c * k2, h, w));
        for ci in 0..c {
            let group = ci / per_group;
            let plane = x.index_axis(Axis(0), ci);
            for t in 0..k2 {
                let (ky, kx) = (t / k, t % k);
                let off_x = offs.index_axis(Axis(0), (group * k2 + t) * 2);
                let off_y = offs.index_axis(Axis(0), (group * k2 + t) * 2 + 1);
                let mp = mods.index_axis(Axis(0), group * k2 + t);
                let mut oplane = out.index_axis_mut(Axis(0), ci * k2 + t);
                for y in 0..h {
                    for xx in 0..w {
                        let px =
                            xx as f32 + kx as f32 - pad + flow[[y, xx, 0]] + off_x[[y, xx]];
                        let py =
                            y as f32 + ky as f32 - pad + flow[[y, xx, 1]] + off_y[[y, xx]];
                        oplane[[y, xx]] = sample_zero(&plane, px, py) * mp[[y, xx]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            &[features, offsets, modulation],
            Box::new(DeformGatherBw {
                flow: flow.clone(),
                groups,
                k,
            }),
        )
    }
}

/// Plain-array unfold used by oracle tests.
pub fn unfold_plain(x: &ArrayView3<'_, f32>, k: usize) -> Array3<f32> {
    unfold_array(x, k)
}

/// Plain-array fold used by oracle tests.
pub fn fold_plain(x: &ArrayView3<'_, f32>, c: usize, k: usize) -> Array3<f32> {
    fold_array(x, c, k)
}
