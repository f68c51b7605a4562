//! Forward implementations and backward rules for every op.
//!
//! All volumetric ops use the canonical 5-axis layout [B, C, Z, Y, X] with
//! x fastest. The convolution kernels reduce to shifted axpy/dot loops over
//! contiguous x-rows, which the compiler vectorises; the accumulation order
//! is fixed, so results are bit-identical run to run.

use rand::Rng;

use super::{lit, GraphError, Mode, Op, Scalar, Tensor};

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::ShapeMismatch { op, detail }
}

fn dims5(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 5], GraphError> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(shape_err(op, format!("expected 5 axes [B,C,Z,Y,X], got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// Valid output range along one axis so that `v + off` stays in bounds.
#[inline]
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off.max(0)) as usize;
    (lo, hi.max(lo))
}

/// dst[v] += w * src[v + off] over all in-bounds voxels v of a (Z,Y,X) slab.
fn shifted_axpy<T: Scalar>(dst: &mut [T], src: &[T], d: [usize; 3], off: [isize; 3], w: T) {
    let [nz, ny, nx] = d;
    let (z0, z1) = valid_range(nz, off[0]);
    let (y0, y1) = valid_range(ny, off[1]);
    let (x0, x1) = valid_range(nx, off[2]);
    if x0 >= x1 {
        return;
    }
    let len = x1 - x0;
    for z in z0..z1 {
        let sz = (z as isize + off[0]) as usize;
        for y in y0..y1 {
            let sy = (y as isize + off[1]) as usize;
            let dbase = (z * ny + y) * nx + x0;
            let sbase = (sz * ny + sy) * nx + (x0 as isize + off[2]) as usize;
            let drow = &mut dst[dbase..dbase + len];
            let srow = &src[sbase..sbase + len];
            for (o, &i) in drow.iter_mut().zip(srow.iter()) {
                *o = *o + w * i;
            }
        }
    }
}

/// Sum of a[v] * b[v + off] over all in-bounds voxels v of a (Z,Y,X) slab.
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], d: [usize; 3], off: [isize; 3]) -> T {
    let [nz, ny, nx] = d;
    let (z0, z1) = valid_range(nz, off[0]);
    let (y0, y1) = valid_range(ny, off[1]);
    let (x0, x1) = valid_range(nx, off[2]);
    if x0 >= x1 {
        return T::zero();
    }
    let len = x1 - x0;
    let mut acc = T::zero();
    for z in z0..z1 {
        let sz = (z as isize + off[0]) as usize;
        for y in y0..y1 {
            let sy = (y as isize + off[1]) as usize;
            let abase = (z * ny + y) * nx + x0;
            let bbase = (sz * ny + sy) * nx + (x0 as isize + off[2]) as usize;
            let arow = &a[abase..abase + len];
            let brow = &b[bbase..bbase + len];
            let mut row = T::zero();
            for (&u, &v) in arow.iter().zip(brow.iter()) {
                row = row + u * v;
            }
            acc = acc + row;
        }
    }
    acc
}

#[inline]
fn slab_axpy<T: Scalar>(dst: &mut [T], src: &[T], w: T) {
    for (o, &i) in dst.iter_mut().zip(src.iter()) {
        *o = *o + w * i;
    }
}

#[inline]
fn slab_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&u, &v) in a.iter().zip(b.iter()) {
        acc = acc + u * v;
    }
    acc
}

#[inline]
fn slab_sum<T: Scalar>(s: &[T]) -> T {
    let mut acc = T::zero();
    for &v in s {
        acc = acc + v;
    }
    acc
}

/// 3x3x3 convolution, stride 1, zero padding 1 (same-size output).
///
/// input [B,Cin,Z,Y,X], weight [Cout,Cin,3,3,3], bias [Cout].
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, GraphError> {
    let [b, cin, nz, ny, nx] = dims5("conv3d", input)?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[1] != cin || ws[2..] != [3, 3, 3] {
        return Err(shape_err(
            "conv3d",
            format!("weight {ws:?} incompatible with input Cin={cin} (need [Cout,{cin},3,3,3])"),
        ));
    }
    let cout = ws[0];
    if bias.shape() != [cout] {
        return Err(shape_err(
            "conv3d",
            format!("bias {:?} must be [{cout}]", bias.shape()),
        ));
    }

    let slab = nz * ny * nx;
    let sp = [nz, ny, nx];
    let mut out = vec![T::zero(); b * cout * slab];
    {
        let x = input.data();
        let w = weight.data();
        let bs = bias.data();
        for bi in 0..b {
            for co in 0..cout {
                let oslab = &mut out[(bi * cout + co) * slab..][..slab];
                let bv = bs[co];
                for o in oslab.iter_mut() {
                    *o = bv;
                }
                for ci in 0..cin {
                    let islab = &x[(bi * cin + ci) * slab..][..slab];
                    let wk = &w[(co * cin + ci) * 27..][..27];
                    for kz in 0..3isize {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let wv = wk[(kz * 9 + ky * 3 + kx) as usize];
                                shifted_axpy(oslab, islab, sp, [kz - 1, ky - 1, kx - 1], wv);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, cout, nz, ny, nx],
        out,
        Op::Conv3d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
        },
    ))
}

fn conv3d_backward<T: Scalar>(
    gout: &[T],
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) {
    let s = input.shape();
    let [b, cin, nz, ny, nx] = [s[0], s[1], s[2], s[3], s[4]];
    let cout = weight.shape()[0];
    let slab = nz * ny * nx;
    let sp = [nz, ny, nx];

    if input.requires_grad() {
        let w = weight.data();
        input.accumulate_grad(|gin| {
            for bi in 0..b {
                for co in 0..cout {
                    let goslab = &gout[(bi * cout + co) * slab..][..slab];
                    for ci in 0..cin {
                        let gslab = &mut gin[(bi * cin + ci) * slab..][..slab];
                        let wk = &w[(co * cin + ci) * 27..][..27];
                        for kz in 0..3isize {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let wv = wk[(kz * 9 + ky * 3 + kx) as usize];
                                    shifted_axpy(
                                        gslab,
                                        goslab,
                                        sp,
                                        [1 - kz, 1 - ky, 1 - kx],
                                        wv,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    if weight.requires_grad() {
        let x = input.data();
        weight.accumulate_grad(|gw| {
            for bi in 0..b {
                for co in 0..cout {
                    let goslab = &gout[(bi * cout + co) * slab..][..slab];
                    for ci in 0..cin {
                        let islab = &x[(bi * cin + ci) * slab..][..slab];
                        let gwk = &mut gw[(co * cin + ci) * 27..][..27];
                        for kz in 0..3isize {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let k = (kz * 9 + ky * 3 + kx) as usize;
                                    gwk[k] = gwk[k]
                                        + shifted_dot(
                                            goslab,
                                            islab,
                                            sp,
                                            [kz - 1, ky - 1, kx - 1],
                                        );
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    if bias.requires_grad() {
        bias.accumulate_grad(|gb| {
            for bi in 0..b {
                for co in 0..cout {
                    let goslab = &gout[(bi * cout + co) * slab..][..slab];
                    gb[co] = gb[co] + slab_sum(goslab);
                }
            }
        });
    }
}

/// Pointwise (1x1x1) convolution: a per-voxel channel mix.
///
/// input [B,Cin,Z,Y,X], weight [Cout,Cin,1,1,1], optional bias [Cout].
pub fn conv1x1<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>, GraphError> {
    let [b, cin, nz, ny, nx] = dims5("conv1x1", input)?;
    let ws = weight.shape();
    if ws.len() != 5 || ws[1] != cin || ws[2..] != [1, 1, 1] {
        return Err(shape_err(
            "conv1x1",
            format!("weight {ws:?} incompatible with input Cin={cin} (need [Cout,{cin},1,1,1])"),
        ));
    }
    let cout = ws[0];
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(shape_err(
                "conv1x1",
                format!("bias {:?} must be [{cout}]", bt.shape()),
            ));
        }
    }

    let slab = nz * ny * nx;
    let mut out = vec![T::zero(); b * cout * slab];
    {
        let x = input.data();
        let w = weight.data();
        for bi in 0..b {
            for co in 0..cout {
                let oslab = &mut out[(bi * cout + co) * slab..][..slab];
                if let Some(bt) = bias {
                    let bv = bt.data()[co];
                    for o in oslab.iter_mut() {
                        *o = bv;
                    }
                }
                for ci in 0..cin {
                    let islab = &x[(bi * cin + ci) * slab..][..slab];
                    slab_axpy(oslab, islab, w[co * cin + ci]);
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, cout, nz, ny, nx],
        out,
        Op::Conv1x1 {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
        },
    ))
}

fn conv1x1_backward<T: Scalar>(
    gout: &[T],
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) {
    let s = input.shape();
    let [b, cin] = [s[0], s[1]];
    let slab = s[2] * s[3] * s[4];
    let cout = weight.shape()[0];

    if input.requires_grad() {
        let w = weight.data();
        input.accumulate_grad(|gin| {
            for bi in 0..b {
                for co in 0..cout {
                    let goslab = &gout[(bi * cout + co) * slab..][..slab];
                    for ci in 0..cin {
                        let gslab = &mut gin[(bi * cin + ci) * slab..][..slab];
                        slab_axpy(gslab, goslab, w[co * cin + ci]);
                    }
                }
            }
        });
    }
    if weight.requires_grad() {
        let x = input.data();
        weight.accumulate_grad(|gw| {
            for bi in 0..b {
                for co in 0..cout {
                    let goslab = &gout[(bi * cout + co) * slab..][..slab];
                    for ci in 0..cin {
                        let islab = &x[(bi * cin + ci) * slab..][..slab];
                        gw[co * cin + ci] = gw[co * cin + ci] + slab_dot(goslab, islab);
                    }
                }
            }
        });
    }
    if let Some(bt) = bias {
        if bt.requires_grad() {
            bt.accumulate_grad(|gb| {
                for bi in 0..b {
                    for co in 0..cout {
                        let goslab = &gout[(bi * cout + co) * slab..][..slab];
                        gb[co] = gb[co] + slab_sum(goslab);
                    }
                }
            });
        }
    }
}

/// Non-overlapping 2x2x2 mean pooling; all spatial dims must be even.
pub fn avgpool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
    let [b, c, nz, ny, nx] = dims5("avgpool2", input)?;
    if nz % 2 != 0 || ny % 2 != 0 || nx % 2 != 0 {
        return Err(GraphError::OddSpatialDim {
            op: "avgpool2",
            shape: input.shape().to_vec(),
        });
    }
    let (oz, oy, ox) = (nz / 2, ny / 2, nx / 2);
    let islab = nz * ny * nx;
    let oslab = oz * oy * ox;
    let eighth = lit::<T>(0.125);
    let mut out = vec![T::zero(); b * c * oslab];
    {
        let x = input.data();
        for bc in 0..b * c {
            let src = &x[bc * islab..][..islab];
            let dst = &mut out[bc * oslab..][..oslab];
            for z in 0..oz {
                for y in 0..oy {
                    for xo in 0..ox {
                        let mut acc = T::zero();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                let row = ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * xo;
                                acc = acc + src[row] + src[row + 1];
                            }
                        }
                        dst[(z * oy + y) * ox + xo] = acc * eighth;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, c, oz, oy, ox],
        out,
        Op::AvgPool2 {
            input: input.clone(),
        },
    ))
}

fn avgpool2_backward<T: Scalar>(gout: &[T], input: &Tensor<T>) {
    if !input.requires_grad() {
        return;
    }
    let s = input.shape();
    let [b, c, nz, ny, nx] = [s[0], s[1], s[2], s[3], s[4]];
    let (oz, oy, ox) = (nz / 2, ny / 2, nx / 2);
    let islab = nz * ny * nx;
    let oslab = oz * oy * ox;
    let eighth = lit::<T>(0.125);
    input.accumulate_grad(|gin| {
        for bc in 0..b * c {
            let go = &gout[bc * oslab..][..oslab];
            let gi = &mut gin[bc * islab..][..islab];
            for z in 0..oz {
                for y in 0..oy {
                    for xo in 0..ox {
                        let g = go[(z * oy + y) * ox + xo] * eighth;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                let row = ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * xo;
                                gi[row] = gi[row] + g;
                                gi[row + 1] = gi[row + 1] + g;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Nearest-neighbour x2 upsampling: each voxel replicated 2x per axis.
pub fn upsample_nn2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
    let [b, c, nz, ny, nx] = dims5("upsample_nn2", input)?;
    let (oz, oy, ox) = (nz * 2, ny * 2, nx * 2);
    let islab = nz * ny * nx;
    let oslab = oz * oy * ox;
    let mut out = vec![T::zero(); b * c * oslab];
    {
        let x = input.data();
        for bc in 0..b * c {
            let src = &x[bc * islab..][..islab];
            let dst = &mut out[bc * oslab..][..oslab];
            for z in 0..oz {
                for y in 0..oy {
                    let srow = ((z / 2) * ny + y / 2) * nx;
                    let drow = (z * oy + y) * ox;
                    for xo in 0..ox {
                        dst[drow + xo] = src[srow + xo / 2];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, c, oz, oy, ox],
        out,
        Op::UpsampleNn2 {
            input: input.clone(),
        },
    ))
}

fn upsample_nn2_backward<T: Scalar>(gout: &[T], input: &Tensor<T>) {
    if !input.requires_grad() {
        return;
    }
    let s = input.shape();
    let [b, c, nz, ny, nx] = [s[0], s[1], s[2], s[3], s[4]];
    let (oy, ox) = (ny * 2, nx * 2);
    let islab = nz * ny * nx;
    let oslab = islab * 8;
    input.accumulate_grad(|gin| {
        for bc in 0..b * c {
            let go = &gout[bc * oslab..][..oslab];
            let gi = &mut gin[bc * islab..][..islab];
            for z in 0..nz {
                for y in 0..ny {
                    for xo in 0..nx {
                        let mut acc = T::zero();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                let row = ((2 * z + dz) * oy + 2 * y + dy) * ox + 2 * xo;
                                acc = acc + go[row] + go[row + 1];
                            }
                        }
                        let idx = (z * ny + y) * nx + xo;
                        gi[idx] = gi[idx] + acc;
                    }
                }
            }
        }
    });
}

/// Elementwise leaky ReLU; the derivative at 0 is taken as 1.
pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: f64) -> Tensor<T> {
    let slope = lit::<T>(slope);
    let data = input
        .data()
        .iter()
        .map(|&v| if v >= T::zero() { v } else { slope * v })
        .collect();
    Tensor::from_op(
        input.shape().to_vec(),
        data,
        Op::LeakyRelu {
            input: input.clone(),
            slope,
        },
    )
}

fn leaky_relu_backward<T: Scalar>(gout: &[T], input: &Tensor<T>, slope: T) {
    if !input.requires_grad() {
        return;
    }
    let x = input.data();
    input.accumulate_grad(|gin| {
        for i in 0..gin.len() {
            let d = if x[i] >= T::zero() { T::one() } else { slope };
            gin[i] = gin[i] + gout[i] * d;
        }
    });
}

/// Elementwise logistic sigmoid.
pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| T::one() / (T::one() + (-v).exp()))
        .collect();
    Tensor::from_op(
        input.shape().to_vec(),
        data,
        Op::Sigmoid {
            input: input.clone(),
        },
    )
}

fn sigmoid_backward<T: Scalar>(gout: &[T], output: &[T], input: &Tensor<T>) {
    if !input.requires_grad() {
        return;
    }
    input.accumulate_grad(|gin| {
        for i in 0..gin.len() {
            let y = output[i];
            gin[i] = gin[i] + gout[i] * y * (T::one() - y);
        }
    });
}

/// Channel-wise dropout: in train mode each (batch, channel) slice is
/// zeroed independently with probability `p`, survivors scaled by
/// 1/(1-p). Eval mode (and p = 0) is the identity.
pub fn spatial_dropout<T: Scalar, R: Rng>(
    input: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>, GraphError> {
    if !(0.0..1.0).contains(&p) {
        return Err(GraphError::BadProbability(p));
    }
    let [b, c, nz, ny, nx] = dims5("spatial_dropout", input)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(input.clone());
    }
    let slab = nz * ny * nx;
    let scale = lit::<T>(1.0 / (1.0 - p));
    let mask: Vec<bool> = (0..b * c).map(|_| rng.random::<f64>() >= p).collect();
    let mut out = vec![T::zero(); b * c * slab];
    {
        let x = input.data();
        for (bc, &alive) in mask.iter().enumerate() {
            if alive {
                let src = &x[bc * slab..][..slab];
                let dst = &mut out[bc * slab..][..slab];
                for (o, &i) in dst.iter_mut().zip(src.iter()) {
                    *o = scale * i;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        input.shape().to_vec(),
        out,
        Op::SpatialDropout {
            input: input.clone(),
            mask,
            scale,
        },
    ))
}

fn spatial_dropout_backward<T: Scalar>(gout: &[T], input: &Tensor<T>, mask: &[bool], scale: T) {
    if !input.requires_grad() {
        return;
    }
    let slab = input.numel() / mask.len();
    input.accumulate_grad(|gin| {
        for (bc, &alive) in mask.iter().enumerate() {
            if alive {
                let go = &gout[bc * slab..][..slab];
                let gi = &mut gin[bc * slab..][..slab];
                slab_axpy(gi, go, scale);
            }
        }
    });
}

/// Concatenate along the channel axis; all other axes must match.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
    let [ba, ca, nz, ny, nx] = dims5("concat_channels", a)?;
    let [bb, cb, mz, my, mx] = dims5("concat_channels", b)?;
    if ba != bb || [nz, ny, nx] != [mz, my, mx] {
        return Err(shape_err(
            "concat_channels",
            format!("non-channel dims differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let slab = nz * ny * nx;
    let mut out = Vec::with_capacity(ba * (ca + cb) * slab);
    {
        let da = a.data();
        let db = b.data();
        for bi in 0..ba {
            out.extend_from_slice(&da[bi * ca * slab..][..ca * slab]);
            out.extend_from_slice(&db[bi * cb * slab..][..cb * slab]);
        }
    }
    Ok(Tensor::from_op(
        vec![ba, ca + cb, nz, ny, nx],
        out,
        Op::ConcatChannels {
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

fn concat_backward<T: Scalar>(gout: &[T], a: &Tensor<T>, b: &Tensor<T>) {
    let sa = a.shape();
    let sb = b.shape();
    let slab = sa[2] * sa[3] * sa[4];
    let (ca, cb) = (sa[1], sb[1]);
    let batch = sa[0];
    let stride = (ca + cb) * slab;
    if a.requires_grad() {
        a.accumulate_grad(|ga| {
            for bi in 0..batch {
                let go = &gout[bi * stride..][..ca * slab];
                let gi = &mut ga[bi * ca * slab..][..ca * slab];
                for (g, &v) in gi.iter_mut().zip(go.iter()) {
                    *g = *g + v;
                }
            }
        });
    }
    if b.requires_grad() {
        b.accumulate_grad(|gb| {
            for bi in 0..batch {
                let go = &gout[bi * stride + ca * slab..][..cb * slab];
                let gi = &mut gb[bi * cb * slab..][..cb * slab];
                for (g, &v) in gi.iter_mut().zip(go.iter()) {
                    *g = *g + v;
                }
            }
        });
    }
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "add",
            format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&u, &v)| u + v)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        Op::Add {
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

fn add_backward<T: Scalar>(gout: &[T], a: &Tensor<T>, b: &Tensor<T>) {
    for t in [a, b] {
        if t.requires_grad() {
            t.accumulate_grad(|g| {
                for (gi, &v) in g.iter_mut().zip(gout.iter()) {
                    *gi = *gi + v;
                }
            });
        }
    }
}

/// Multiply a [B,C,Z,Y,X] tensor by a single-channel [B,1,Z,Y,X] gate,
/// broadcast over channels. Used for attention masking.
pub fn mul_channel_gate<T: Scalar>(
    input: &Tensor<T>,
    gate: &Tensor<T>,
) -> Result<Tensor<T>, GraphError> {
    let [b, c, nz, ny, nx] = dims5("mul_channel_gate", input)?;
    let gs = gate.shape();
    if gs != [b, 1, nz, ny, nx] {
        return Err(shape_err(
            "mul_channel_gate",
            format!("gate {gs:?} must be [{b},1,{nz},{ny},{nx}]"),
        ));
    }
    let slab = nz * ny * nx;
    let mut out = vec![T::zero(); b * c * slab];
    {
        let x = input.data();
        let g = gate.data();
        for bi in 0..b {
            let gslab = &g[bi * slab..][..slab];
            for ci in 0..c {
                let islab = &x[(bi * c + ci) * slab..][..slab];
                let oslab = &mut out[(bi * c + ci) * slab..][..slab];
                for i in 0..slab {
                    oslab[i] = islab[i] * gslab[i];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        input.shape().to_vec(),
        out,
        Op::MulChannelGate {
            input: input.clone(),
            gate: gate.clone(),
        },
    ))
}

fn mul_channel_gate_backward<T: Scalar>(gout: &[T], input: &Tensor<T>, gate: &Tensor<T>) {
    let s = input.shape();
    let [b, c] = [s[0], s[1]];
    let slab = s[2] * s[3] * s[4];
    if input.requires_grad() {
        let g = gate.data();
        input.accumulate_grad(|gin| {
            for bi in 0..b {
                let gslab = &g[bi * slab..][..slab];
                for ci in 0..c {
                    let go = &gout[(bi * c + ci) * slab..][..slab];
                    let gi = &mut gin[(bi * c + ci) * slab..][..slab];
                    for i in 0..slab {
                        gi[i] = gi[i] + go[i] * gslab[i];
                    }
                }
            }
        });
    }
    if gate.requires_grad() {
        let x = input.data();
        gate.accumulate_grad(|gg| {
            for bi in 0..b {
                let gslab = &mut gg[bi * slab..][..slab];
                for ci in 0..c {
                    let go = &gout[(bi * c + ci) * slab..][..slab];
                    let islab = &x[(bi * c + ci) * slab..][..slab];
                    for i in 0..slab {
                        gslab[i] = gslab[i] + go[i] * islab[i];
                    }
                }
            }
        });
    }
}

/// `w2 * mean((p - t)^2) + w1 * mean(|p - t|)`, reduced over all elements.
///
/// The L1 subgradient at p = t is taken as 0. The reduction accumulates in
/// f64 regardless of the element type.
pub fn weighted_l2_l1_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    w2: f64,
    w1: f64,
) -> Result<Tensor<T>, GraphError> {
    if pred.shape() != target.shape() {
        return Err(shape_err(
            "weighted_l2_l1_loss",
            format!("shapes differ: {:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    if !(w2 >= 0.0 && w1 >= 0.0) || (w2 == 0.0 && w1 == 0.0) {
        return Err(GraphError::BadLossWeights { w2, w1 });
    }
    let n = pred.numel() as f64;
    let (mut s2, mut s1) = (0.0f64, 0.0f64);
    {
        let p = pred.data();
        let t = target.data();
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            let d = (pv - tv).to_f64().expect("finite value");
            s2 += d * d;
            s1 += d.abs();
        }
    }
    let loss = lit::<T>(w2 * s2 / n + w1 * s1 / n);
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        Op::L2L1Loss {
            pred: pred.clone(),
            target: target.clone(),
            w2: lit::<T>(w2),
            w1: lit::<T>(w1),
        },
    ))
}

fn l2l1_backward<T: Scalar>(gout: &[T], pred: &Tensor<T>, target: &Tensor<T>, w2: T, w1: T) {
    if !pred.requires_grad() {
        return;
    }
    let g = gout[0];
    let inv_n = T::one() / lit::<T>(pred.numel() as f64);
    let two = lit::<T>(2.0);
    let t = target.data();
    let p = pred.data();
    pred.accumulate_grad(|gp| {
        for i in 0..gp.len() {
            let d = p[i] - t[i];
            let sign = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            gp[i] = gp[i] + g * inv_n * (two * w2 * d + w1 * sign);
        }
    });
}

/// Dispatch one node's backward rule, accumulating into its parents.
pub(crate) fn backward_step<T: Scalar>(node: &Tensor<T>) {
    let grad_ref = node.inner.grad.borrow();
    let Some(gout) = grad_ref.as_ref() else {
        return;
    };
    match node.op() {
        Op::Leaf => {}
        Op::Conv3d {
            input,
            weight,
            bias,
        } => conv3d_backward(gout, input, weight, bias),
        Op::Conv1x1 {
            input,
            weight,
            bias,
        } => conv1x1_backward(gout, input, weight, bias.as_ref()),
        Op::AvgPool2 { input } => avgpool2_backward(gout, input),
        Op::UpsampleNn2 { input } => upsample_nn2_backward(gout, input),
        Op::LeakyRelu { input, slope } => leaky_relu_backward(gout, input, *slope),
        Op::Sigmoid { input } => {
            let out = node.data();
            sigmoid_backward(gout, &out, input);
        }
        Op::SpatialDropout {
            input,
            mask,
            scale,
        } => spatial_dropout_backward(gout, input, mask, *scale),
        Op::ConcatChannels { a, b } => concat_backward(gout, a, b),
        Op::Add { a, b } => add_backward(gout, a, b),
        Op::MulChannelGate { input, gate } => mul_channel_gate_backward(gout, input, gate),
        Op::L2L1Loss {
            pred,
            target,
            w2,
            w1,
        } => l2l1_backward(gout, pred, target, *w2, *w1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct six-nested-loop cross-correlation with zero padding 1.
    fn conv3d_oracle(
        x: &[f64],
        w: &[f64],
        bias: &[f64],
        (b, cin, cout): (usize, usize, usize),
        (nz, ny, nx): (usize, usize, usize),
    ) -> Vec<f64> {
        let slab = nz * ny * nx;
        let mut out = vec![0.0; b * cout * slab];
        for bi in 0..b {
            for co in 0..cout {
                for z in 0..nz as isize {
                    for y in 0..ny as isize {
                        for xo in 0..nx as isize {
                            let mut acc = bias[co];
                            for ci in 0..cin {
                                for kz in 0..3isize {
                                    for ky in 0..3isize {
                                        for kx in 0..3isize {
                                            let (sz, sy, sx) =
                                                (z + kz - 1, y + ky - 1, xo + kx - 1);
                                            if sz < 0
                                                || sy < 0
                                                || sx < 0
                                                || sz >= nz as isize
                                                || sy >= ny as isize
                                                || sx >= nx as isize
                                            {
                                                continue;
                                            }
                                            let xi = ((bi * cin + ci) * slab as usize)
                                                + ((sz as usize * ny + sy as usize) * nx
                                                    + sx as usize);
                                            let wi = ((co * cin + ci) * 27)
                                                + (kz * 9 + ky * 3 + kx) as usize;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(bi * cout + co) * slab
                                + (z as usize * ny + y as usize) * nx
                                + xo as usize] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::leaf(vec![1, 1, 3, 4, 5], randn_vec(&mut rng, 60));
        let mut wk = vec![0.0; 27];
        wk[13] = 1.0; // the (1,1,1) center tap
        let w = Tensor::leaf(vec![1, 1, 3, 3, 3], wk);
        let bias = Tensor::leaf(vec![1], vec![0.0]);
        let out = conv3d(&x, &w, &bias).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
    }

    #[test]
    fn conv3d_ones_kernel_counts_neighbours() {
        let x = Tensor::<f64>::leaf(vec![1, 1, 4, 4, 4], vec![1.0; 64]);
        let w = Tensor::leaf(vec![1, 1, 3, 3, 3], vec![1.0; 27]);
        let bias = Tensor::leaf(vec![1], vec![0.0]);
        let out = conv3d(&x, &w, &bias).unwrap();
        let d = out.data();
        // Interior voxels see the full 27-neighbourhood; corners see 8.
        assert_eq!(d[(1 * 4 + 1) * 4 + 1], 27.0);
        assert_eq!(d[0], 8.0);
        // Face-center (1,1,0): 18 in-bounds taps.
        assert_eq!(d[(1 * 4 + 1) * 4], 18.0);
    }

    #[test]
    fn conv3d_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (b, cin, cout) = (1, 2, 3);
        let (nz, ny, nx) = (4, 4, 4);
        let xv = randn_vec(&mut rng, b * cin * nz * ny * nx);
        let wv = randn_vec(&mut rng, cout * cin * 27);
        let bv = randn_vec(&mut rng, cout);
        let x = Tensor::leaf(vec![b, cin, nz, ny, nx], xv.clone());
        let w = Tensor::leaf(vec![cout, cin, 3, 3, 3], wv.clone());
        let bias = Tensor::leaf(vec![cout], bv.clone());
        let out = conv3d(&x, &w, &bias).unwrap();
        let expect = conv3d_oracle(&xv, &wv, &bv, (b, cin, cout), (nz, ny, nx));
        for (g, e) in out.data().iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-6);
        }
    }

    #[test]
    fn conv3d_is_linear_in_its_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let xv = randn_vec(&mut rng, 2 * 2 * 2 * 4 * 4);
        let wv = randn_vec(&mut rng, 2 * 2 * 27);
        let scale = 3.25;
        let scaled: Vec<f64> = xv.iter().map(|v| v * scale).collect();
        let w = Tensor::leaf(vec![2, 2, 3, 3, 3], wv);
        let zero_bias = Tensor::leaf(vec![2], vec![0.0; 2]);
        let a = conv3d(
            &Tensor::leaf(vec![2, 2, 2, 4, 4], xv),
            &w,
            &zero_bias,
        )
        .unwrap();
        let b = conv3d(
            &Tensor::leaf(vec![2, 2, 2, 4, 4], scaled),
            &w,
            &zero_bias,
        )
        .unwrap();
        for (av, bv) in a.data().iter().zip(b.data().iter()) {
            assert!((av * scale - bv).abs() < 1e-9);
        }
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (b, cin, cout, nz, ny, nx) = (1, 2, 3, 4, 4, 4);
        let x = Tensor::param(vec![b, cin, nz, ny, nx], randn_vec(&mut rng, b * cin * 64));
        let w = Tensor::param(vec![cout, cin, 3, 3, 3], randn_vec(&mut rng, cout * cin * 27));
        let bias = Tensor::param(vec![cout], randn_vec(&mut rng, cout));
        let target = Tensor::leaf(vec![b, cout, nz, ny, nx], randn_vec(&mut rng, b * cout * 64));
        let params = [x, w, bias];
        let report = grad_check(
            &mut |ps: &[Tensor<f64>]| {
                let out = conv3d(&ps[0], &ps[1], &ps[2]).unwrap();
                weighted_l2_l1_loss(&out, &target, 1.0, 0.0).unwrap()
            },
            &params,
            1e-4,
            1e-3,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv3d_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4, 4]);
        let w = Tensor::zeros(vec![3, 1, 3, 3, 3]); // wrong Cin
        let bias = Tensor::zeros(vec![3]);
        assert!(conv3d(&x, &w, &bias).is_err());
        let w5 = Tensor::zeros(vec![3, 2, 5, 5, 5]); // wrong kernel
        assert!(conv3d(&x, &w5, &bias).is_err());
    }

    #[test]
    fn conv1x1_mixes_channels() {
        // Two channels, weight rows [1, 2] and [0.5, -1].
        let x = Tensor::<f64>::leaf(vec![1, 2, 1, 1, 2], vec![1.0, 2.0, 10.0, 20.0]);
        let w = Tensor::leaf(vec![2, 2, 1, 1, 1], vec![1.0, 2.0, 0.5, -1.0]);
        let out = conv1x1(&x, &w, None).unwrap();
        assert_eq!(out.to_vec(), vec![21.0, 42.0, -9.5, -19.0]);
    }

    #[test]
    fn conv1x1_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let x = Tensor::param(vec![1, 3, 2, 2, 2], randn_vec(&mut rng, 24));
        let w = Tensor::param(vec![2, 3, 1, 1, 1], randn_vec(&mut rng, 6));
        let bias = Tensor::param(vec![2], randn_vec(&mut rng, 2));
        let target = Tensor::leaf(vec![1, 2, 2, 2, 2], randn_vec(&mut rng, 16));
        let params = [x, w, bias];
        let report = grad_check(
            &mut |ps: &[Tensor<f64>]| {
                let out = conv1x1(&ps[0], &ps[1], Some(&ps[2])).unwrap();
                weighted_l2_l1_loss(&out, &target, 1.0, 0.0).unwrap()
            },
            &params,
            1e-4,
            1e-3,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn avgpool_constant_and_block_mean() {
        let c = Tensor::<f64>::leaf(vec![1, 1, 2, 2, 2], vec![5.0; 8]);
        assert_eq!(avgpool2(&c).unwrap().to_vec(), vec![5.0]);

        let vals: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let x = Tensor::leaf(vec![1, 1, 2, 2, 2], vals);
        assert_eq!(avgpool2(&x).unwrap().to_vec(), vec![3.5]);

        let odd = Tensor::<f64>::zeros(vec![1, 1, 3, 2, 2]);
        assert!(matches!(
            avgpool2(&odd),
            Err(GraphError::OddSpatialDim { .. })
        ));
    }

    #[test]
    fn avgpool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let x = Tensor::param(vec![1, 2, 4, 4, 4], randn_vec(&mut rng, 128));
        let target = Tensor::leaf(vec![1, 2, 2, 2, 2], randn_vec(&mut rng, 16));
        let report = grad_check(
            &mut |ps: &[Tensor<f64>]| {
                let out = avgpool2(&ps[0]).unwrap();
                weighted_l2_l1_loss(&out, &target, 1.0, 0.0).unwrap()
            },
            std::slice::from_ref(&x),
            1e-4,
            1e-3,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn upsample_replicates_and_inverts_pooling() {
        let x = Tensor::<f64>::leaf(vec![1, 1, 1, 1, 1], vec![5.0]);
        let up = upsample_nn2(&x).unwrap();
        assert_eq!(up.shape(), &[1, 1, 2, 2, 2]);
        assert_eq!(up.to_vec(), vec![5.0; 8]);

        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let v = Tensor::leaf(vec![1, 2, 2, 2, 2], randn_vec(&mut rng, 16));
        let round = avgpool2(&upsample_nn2(&v).unwrap()).unwrap();
        for (a, b) in v.data().iter().zip(round.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let x = Tensor::param(vec![1, 2, 2, 2, 2], randn_vec(&mut rng, 16));
        let target = Tensor::leaf(vec![1, 2, 4, 4, 4], randn_vec(&mut rng, 128));
        let report = grad_check(
            &mut |ps: &[Tensor<f64>]| {
                let out = upsample_nn2(&ps[0]).unwrap();
                weighted_l2_l1_loss(&out, &target, 1.0, 0.0).unwrap()
            },
            std::slice::from_ref(&x),
            1e-4,
            1e-3,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn activation_values() {
        let x = Tensor::<f64>::leaf(vec![3], vec![-1.0, 0.0, 2.0]);
        let lr = leaky_relu(&x, 0.01);
        assert_eq!(lr.to_vec(), vec![-0.01, 0.0, 2.0]);
        let s = sigmoid(&Tensor::<f64>::leaf(vec![1], vec![0.0]));
        assert_eq!(s.to_vec(), vec![0.5]);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        // Keep values away from the ReLU kink so the FD is well-defined.
        let vals: Vec<f64> = (0..16)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::param(vec![1, 1, 2, 2, 4], vals);
        let target = Tensor::leaf(vec![1, 1, 2, 2, 4], randn_vec(&mut rng, 16));
        for use_sigmoid in [false, true] {
            let report = grad_check(
                &mut |ps: &[Tensor<f64>]| {
                    let out = if use_sigmoid {
                        sigmoid(&ps[0])
                    } else {
                        leaky_relu(&ps[0], 0.01)
                    };
                    weighted_l2_l1_loss(&out, &target, 1.0, 0.0).unwrap()
                },
                std::slice::from_ref(&x),
                1e-4,
                1e-3,
            );
            assert!(report.passed(), "max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = Tensor::<f64>::leaf(vec![2, 3, 2, 2, 2], randn_vec(&mut rng, 48));
        let eval = spatial_dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(eval.id(), x.id(), "eval mode passes the node through");
        let p0 = spatial_dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(p0.id(), x.id());
        assert!(spatial_dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_zeroes_whole_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let p = 0.4;
        let x = Tensor::<f64>::leaf(vec![4, 8, 2, 2, 2], vec![1.0; 4 * 8 * 8]);
        let out = spatial_dropout(&x, p, Mode::Train, &mut rng).unwrap();
        let d = out.data();
        let scale = 1.0 / (1.0 - p);
        for bc in 0..32 {
            let slice = &d[bc * 8..(bc + 1) * 8];
            let all_zero = slice.iter().all(|&v| v == 0.0);
            let all_scaled = slice.iter().all(|&v| (v - scale).abs() < 1e-12);
            assert!(all_zero || all_scaled, "slice {bc} is mixed: {slice:?}");
        }
    }

    #[test]
    fn dropout_rate_matches_probability() {
        // 10,000 (batch, channel) draws at p = 0.3.
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x = Tensor::<f64>::leaf(vec![10, 10, 1, 1, 1], vec![1.0; 100]);
        let mut zeroed = 0usize;
        for _ in 0..100 {
            let out = spatial_dropout(&x, 0.3, Mode::Train, &mut rng).unwrap();
            zeroed += out.data().iter().filter(|&&v| v == 0.0).count();
        }
        let frac = zeroed as f64 / 10_000.0;
        assert!((frac - 0.3).abs() < 0.02, "zeroed fraction {frac}");
    }

    #[test]
    fn dropout_mask_path_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let x = Tensor::param(vec![2, 4, 2, 2, 2], randn_vec(&mut rng, 64));
        let target = Tensor::leaf(vec![2, 4, 2, 2, 2], randn_vec(&mut rng, 64));
        // The closure fixes its own RNG seed so every evaluation sees the
        // same mask.
        let report = grad_check(
            &mut |ps: &[Tensor<f64>]| {
                let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
                let out = spatial_dropout(&ps[0], 0.5, Mode::Train, &mut drop_rng).unwrap();
                weighted_l2_l1_loss(&out, &target, 1.0, 0.0).unwrap()
            },
            std::slice::from_ref(&x),
            1e-4,
            1e-3,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn concat_preserves_order_and_splits_back() {
        let a = Tensor::<f64>::leaf(vec![1, 2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::leaf(
            vec![1, 3, 1, 1, 2],
            vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0],
        );
        let out = concat_channels(&a, &b).unwrap();
        assert_eq!(out.shape(), &[1, 5, 1, 1, 2]);
        let d = out.to_vec();
        assert_eq!(&d[..4], a.to_vec().as_slice());
        assert_eq!(&d[4..], b.to_vec().as_slice());

        let spatial_mismatch = Tensor::<f64>::zeros(vec![1, 2, 1, 1, 3]);
        assert!(concat_channels(&a, &spatial_mismatch).is_err());
    }

    #[test]
    fn concat_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let a = Tensor::param(vec![1, 2, 2, 2, 2], randn_vec(&mut rng, 16));
        let b = Tensor::param(vec![1, 1, 2, 2, 2], randn_vec(&mut rng, 8));
        let target = Tensor::leaf(vec![1, 3, 2, 2, 2], randn_vec(&mut rng, 24));
        let params = [a, b];
        let report = grad_check(
            &mut |ps: &[Tensor<f64>]| {
                let out = concat_channels(&ps[0], &ps[1]).unwrap();
                weighted_l2_l1_loss(&out, &target, 1.0, 0.0).unwrap()
            },
            &params,
            1e-4,
            1e-3,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let x = Tensor::param(vec![1, 3, 2, 2, 2], randn_vec(&mut rng, 24));
        let gate = Tensor::param(vec![1, 1, 2, 2, 2], randn_vec(&mut rng, 8));
        let target = Tensor::leaf(vec![1, 3, 2, 2, 2], randn_vec(&mut rng, 24));
        let params = [x, gate];
        let report = grad_check(
            &mut |ps: &[Tensor<f64>]| {
                let out = mul_channel_gate(&ps[0], &ps[1]).unwrap();
                weighted_l2_l1_loss(&out, &target, 1.0, 0.0).unwrap()
            },
            &params,
            1e-4,
            1e-3,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn loss_closed_forms() {
        let p = Tensor::<f64>::leaf(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let same = weighted_l2_l1_loss(&p, &p, 1.0, 1.0).unwrap();
        assert_eq!(same.item(), 0.0);

        let t = Tensor::<f64>::leaf(vec![4], vec![-1.0, 0.0, 1.0, 2.0]);
        // Every difference is exactly 2: L2 mean 4, L1 mean 2.
        let loss = weighted_l2_l1_loss(&p, &t, 1.0, 1.0).unwrap();
        assert!((loss.item() - 6.0).abs() < 1e-12);

        assert!(weighted_l2_l1_loss(&p, &t, 0.0, 0.0).is_err());
        let short = Tensor::<f64>::zeros(vec![3]);
        assert!(weighted_l2_l1_loss(&p, &short, 1.0, 0.0).is_err());
    }

    #[test]
    fn loss_gradients_away_from_the_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        // Differences bounded away from zero so the L1 term is smooth
        // within the finite-difference step.
        let pv: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..1.5)).collect();
        let tv: Vec<f64> = pv
            .iter()
            .map(|v| {
                if rng.random_bool(0.5) {
                    v + rng.random_range(0.05..0.5)
                } else {
                    v - rng.random_range(0.05..0.5)
                }
            })
            .collect();
        let p = Tensor::param(vec![12], pv);
        let t = Tensor::leaf(vec![12], tv);
        let report = grad_check(
            &mut |ps: &[Tensor<f64>]| weighted_l2_l1_loss(&ps[0], &t, 0.7, 0.3).unwrap(),
            std::slice::from_ref(&p),
            1e-4,
            1e-3,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn f32_ops_are_deterministic() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(57);
            let xv: Vec<f32> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wv: Vec<f32> = (0..54).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::leaf(vec![1, 2, 4, 4, 4], xv);
            let w = Tensor::leaf(vec![1, 2, 3, 3, 3], wv);
            let bias = Tensor::leaf(vec![1], vec![0.1f32]);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
            let c = conv3d(&x, &w, &bias).unwrap();
            let d = spatial_dropout(&c, 0.3, Mode::Train, &mut drop_rng).unwrap();
            let pooled = avgpool2(&leaky_relu(&d, 0.01)).unwrap();
            pooled.to_vec()
        };
        let a = mk();
        let b = mk();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
