//! Composite operations built from the primitive tape ops.

use std::rc::Rc;

use super::graph::Var;

/// Layer normalization across the channel axis of an `[N, C, H, W]` tensor,
/// independently at each spatial position.
pub fn layer_norm_channels<'g>(x: Var<'g>, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
    let shape = x.shape();
    let c = shape[1];
    let mu = x.mean_axis(1).expand(&shape);
    let xc = x.sub(mu);
    let var = xc.square().mean_axis(1).add_scalar(eps);
    let inv = var.sqrt().recip().expand(&shape);
    let g = gamma.reshape(&[1, c, 1, 1]).expand(&shape);
    let b = beta.reshape(&[1, c, 1, 1]).expand(&shape);
    xc.mul(inv).mul(g).add(b)
}

/// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
pub fn upsample_nearest2x(x: Var<'_>) -> Var<'_> {
    let shape = x.shape();
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (h2, w2) = (2 * h, 2 * w);
    let mut index = Vec::with_capacity(nc * h2 * w2);
    for p in 0..nc {
        for y in 0..h2 {
            for xx in 0..w2 {
                index.push((p * h + y / 2) * w + xx / 2);
            }
        }
    }
    x.gather(Rc::new(index), &[shape[0], shape[1], h2, w2])
}

/// `[N, C·r², H, W]` → `[N, C, H·r, W·r]`.
pub fn pixel_shuffle(x: Var<'_>, r: usize) -> Var<'_> {
    let shape = x.shape();
    let (n, cr, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(cr % (r * r), 0, "pixel_shuffle channel count");
    let c = cr / (r * r);
    let mut index = Vec::with_capacity(n * cr * h * w);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h * r {
                for xx in 0..w * r {
                    let src_c = ch * r * r + (y % r) * r + (xx % r);
                    index.push(((s * cr + src_c) * h + y / r) * w + xx / r);
                }
            }
        }
    }
    x.gather(Rc::new(index), &[n, c, h * r, w * r])
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// 3×3 mean filter with reflection padding over the last two axes.
pub fn box3_reflect(x: Var<'_>) -> Var<'_> {
    let shape = x.shape();
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let planes: usize = shape[..rank - 2].iter().product();
    let mut index = Vec::with_capacity(planes * h * w * 9);
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let sy = reflect(y as isize + dy, h);
                        let sx = reflect(xx as isize + dx, w);
                        index.push((p * h + sy) * w + sx);
                    }
                }
            }
        }
    }
    x.gather_sum(Rc::new(index), 9, 1.0 / 9.0, &shape)
}

/// `[N, C, H, W]` → `[N, C]`.
pub fn global_avg_pool(x: Var<'_>) -> Var<'_> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    x.reshape(&[n, c, shape[2] * shape[3]]).mean_axis(2).reshape(&[n, c])
}

/// Picks `index` entries of a tensor as a flat `[len]` vector.
pub fn select(x: Var<'_>, index: Vec<usize>) -> Var<'_> {
    let n = index.len();
    x.gather(Rc::new(index), &[n])
}
