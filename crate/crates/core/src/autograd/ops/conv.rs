use crate::autograd::{BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Input coordinate for an output coordinate and kernel tap, if inside.
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

fn conv_geom(x: &[usize], w: &[usize], bias: Option<&[usize]>, stride: usize, padding: usize, groups: usize) -> Result<ConvGeom> {
    let bad = |msg: String| Error::shape("conv2d", msg);
    if x.len() != 3 {
        return Err(bad(format!("input must be [H, W, Cin], got {x:?}")));
    }
    if w.len() != 4 {
        return Err(bad(format!("weight must be [kh, kw, Cin/groups, Cout], got {w:?}")));
    }
    if stride == 0 || groups == 0 {
        return Err(bad("stride and groups must be >= 1".into()));
    }
    let (h, wd, cin) = (x[0], x[1], x[2]);
    let (kh, kw, cin_g, cout) = (w[0], w[1], w[2], w[3]);
    if cin % groups != 0 || cout % groups != 0 {
        return Err(bad(format!("channels {cin}->{cout} not divisible by groups {groups}")));
    }
    if cin_g != cin / groups {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    if let Some(b) = bias {
        if b != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: w.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    let span = |n: usize, k: usize| (n + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
    let (oh, ow) = match (span(h, kh), span(wd, kw)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(bad(format!("output extent < 1 for input {x:?}, kernel {kh}x{kw}, padding {padding}"))),
    };
    Ok(ConvGeom {
        h,
        w: wd,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
        stride,
        padding,
        groups,
    })
}

fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let depthwise = cin_g == 1 && cout_g == 1;
    let mut out = vec![T::zero(); g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * g.cout..][..g.cout];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let inp = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                    let wk = &wt[(ky * g.kw + kx) * cin_g * g.cout..][..cin_g * g.cout];
                    if depthwise {
                        for ((ov, &xv), &wv) in o.iter_mut().zip(inp).zip(wk) {
                            *ov += xv * wv;
                        }
                        continue;
                    }
                    for grp in 0..g.groups {
                        let orow = &mut o[grp * cout_g..(grp + 1) * cout_g];
                        for ci in 0..cin_g {
                            let xv = inp[grp * cin_g + ci];
                            let wrow = &wk[ci * g.cout + grp * cout_g..][..cout_g];
                            for (ov, &wv) in orow.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Conv2d {
    geom: ConvGeom,
    has_bias: bool,
}

impl<T: Scalar> BackwardOp<T> for Conv2d {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (x, wt) = (inputs[0].data(), inputs[1].data());
        let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); wt.len()];
        let mut gb = vec![T::zero(); g.cout];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let go = &grad[(oy * g.ow + ox) * g.cout..][..g.cout];
                if self.has_bias {
                    gb.iter_mut().zip(go).for_each(|(b, &v)| *b += v);
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let xoff = (iy * g.w + ix) * g.cin;
                        let woff = (ky * g.kw + kx) * cin_g * g.cout;
                        for grp in 0..g.groups {
                            let gorow = &go[grp * cout_g..(grp + 1) * cout_g];
                            for ci in 0..cin_g {
                                let xi = xoff + grp * cin_g + ci;
                                let wi = woff + ci * g.cout + grp * cout_g;
                                let wrow = &wt[wi..wi + cout_g];
                                let mut acc = T::zero();
                                for (&gv, &wv) in gorow.iter().zip(wrow) {
                                    acc += gv * wv;
                                }
                                gx[xi] += acc;
                                let xv = x[xi];
                                for (gwv, &gv) in gw[wi..wi + cout_g].iter_mut().zip(gorow) {
                                    *gwv += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![Some(gx), Some(gw)];
        if self.has_bias {
            out.push(Some(gb));
        }
        out
    }
}

struct PadBottomRight {
    h: usize,
    w: usize,
    c: usize,
    pw: usize,
}

impl<T: Scalar> BackwardOp<T> for PadBottomRight {
    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let row_out = (self.w + self.pw) * self.c;
        let row_in = self.w * self.c;
        let mut g = Vec::with_capacity(self.h * row_in);
        for y in 0..self.h {
            g.extend_from_slice(&grad[y * row_out..y * row_out + row_in]);
        }
        vec![Some(g)]
    }
}

impl<T: Scalar> Var<T> {
    /// 2-D cross-correlation over a channels-last `[H, W, Cin]` map with a
    /// `[kh, kw, Cin/groups, Cout]` kernel. `groups == Cin == Cout` is a
    /// depthwise convolution.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, stride: usize, padding: usize, groups: usize) -> Result<Var<T>> {
        let (geom, data) = {
            let x = self.tensor_ref();
            let w = weight.tensor_ref();
            let b = bias.map(|b| b.tensor_ref());
            let geom = conv_geom(x.shape(), w.shape(), b.as_ref().map(|b| b.shape()), stride, padding, groups)?;
            let data = conv_forward(&geom, x.data(), w.data(), b.as_ref().map(|b| b.data()));
            (geom, data)
        };
        let value = Tensor::new(&[geom.oh, geom.ow, geom.cout], data)?;
        let op = Conv2d {
            geom,
            has_bias: bias.is_some(),
        };
        match bias {
            Some(b) => self.graph.record("conv2d", value, &[self, weight, b], op),
            None => self.graph.record("conv2d", value, &[self, weight], op),
        }
    }

    /// Zero-pads a `[H, W, C]` map at the bottom and right edges.
    pub fn pad_bottom_right(&self, ph: usize, pw: usize) -> Result<Var<T>> {
        let (h, w, c, data) = {
            let x = self.tensor_ref();
            let &[h, w, c] = x.shape() else {
                return Err(Error::shape("pad", format!("expected [H, W, C], got {:?}", x.shape())));
            };
            let mut data = vec![T::zero(); (h + ph) * (w + pw) * c];
            for y in 0..h {
                let dst = y * (w + pw) * c;
                data[dst..dst + w * c].copy_from_slice(&x.data()[y * w * c..(y + 1) * w * c]);
            }
            (h, w, c, data)
        };
        let value = Tensor::new(&[h + ph, w + pw, c], data)?;
        self.graph.record("pad", value, &[self], PadBottomRight { h, w, c, pw })
    }
}
