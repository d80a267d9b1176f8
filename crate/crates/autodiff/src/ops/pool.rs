use crate::element::Element;

/// 2×2 stride-2 max pooling. Returns the pooled values and, for each output,
/// the flat input index that won. Ties go to the first element in row-major
/// window order.
pub(crate) fn max2x2_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn max2x2_backward<T: Element>(gout: &[T], arg: &[usize], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&g, &i) in gout.iter().zip(arg) {
        dx[i] = dx[i] + g;
    }
    dx
}

pub(crate) fn avg2x2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                out.push((x[i0] + x[i0 + 1] + x[i0 + w] + x[i0 + w + 1]) * quarter);
            }
        }
    }
    out
}

pub(crate) fn avg2x2_backward<T: Element>(gout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gout[(p * ho + oy) * wo + ox] * quarter;
                let i0 = base + 2 * oy * w + 2 * ox;
                for idx in [i0, i0 + 1, i0 + w, i0 + w + 1] {
                    dx[idx] = g;
                }
            }
        }
    }
    dx
}
