//! Separable linear resampling with half-pixel centers.
//!
//! Output sample `i` on an axis of length `src` resized to `dst` reads the
//! source coordinate `(i + 0.5) * src/dst - 0.5`, clamped to the valid range.
//! Channels are independent; the last axis is always the channel axis.

/// Per-output-sample interpolation taps for one axis: (lo index, hi index,
/// weight of hi). lo == hi at clamped edges and for identity axes.
pub(crate) fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    debug_assert!(src >= 1 && dst >= 1);
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = (i as f64 + 0.5) * scale - 0.5;
            let pos = pos.clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let w = pos - lo as f64;
            if lo == hi {
                (lo, hi, 0.0)
            } else {
                (lo, hi, w)
            }
        })
        .collect()
}

use super::Real;

/// Bilinear resize of an (h, w, ch) grid to (th, tw, ch).
pub(crate) fn bilinear_apply<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    ch: usize,
    th: usize,
    tw: usize,
) -> Vec<T> {
    if (h, w) == (th, tw) {
        return x.to_vec();
    }
    let ty = axis_taps(h, th);
    let tx = axis_taps(w, tw);
    let mut out = vec![T::ZERO; th * tw * ch];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let w00 = T::from_f64((1.0 - wy) * (1.0 - wx));
            let w01 = T::from_f64((1.0 - wy) * wx);
            let w10 = T::from_f64(wy * (1.0 - wx));
            let w11 = T::from_f64(wy * wx);
            let o = (oy * tw + ox) * ch;
            let i00 = (y0 * w + x0) * ch;
            let i01 = (y0 * w + x1) * ch;
            let i10 = (y1 * w + x0) * ch;
            let i11 = (y1 * w + x1) * ch;
            for c in 0..ch {
                out[o + c] =
                    w00 * x[i00 + c] + w01 * x[i01 + c] + w10 * x[i10 + c] + w11 * x[i11 + c];
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_apply`]: scatters output-side gradients back.
pub(crate) fn bilinear_scatter<T: Real>(
    grad_out: &[T],
    h: usize,
    w: usize,
    ch: usize,
    th: usize,
    tw: usize,
    grad_in: &mut [T],
) {
    if (h, w) == (th, tw) {
        for (g, &d) in grad_in.iter_mut().zip(grad_out) {
            *g += d;
        }
        return;
    }
    let ty = axis_taps(h, th);
    let tx = axis_taps(w, tw);
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let w00 = T::from_f64((1.0 - wy) * (1.0 - wx));
            let w01 = T::from_f64((1.0 - wy) * wx);
            let w10 = T::from_f64(wy * (1.0 - wx));
            let w11 = T::from_f64(wy * wx);
            let o = (oy * tw + ox) * ch;
            for c in 0..ch {
                let d = grad_out[o + c];
                grad_in[(y0 * w + x0) * ch + c] += w00 * d;
                grad_in[(y0 * w + x1) * ch + c] += w01 * d;
                grad_in[(y1 * w + x0) * ch + c] += w10 * d;
                grad_in[(y1 * w + x1) * ch + c] += w11 * d;
            }
        }
    }
}

/// Trilinear resize of a (t, h, w, ch) volume to (tt, th, tw, ch).
#[allow(clippy::too_many_arguments)]
pub(crate) fn trilinear_apply<T: Real>(
    x: &[T],
    t: usize,
    h: usize,
    w: usize,
    ch: usize,
    tt: usize,
    th: usize,
    tw: usize,
) -> Vec<T> {
    if (t, h, w) == (tt, th, tw) {
        return x.to_vec();
    }
    let taps_t = axis_taps(t, tt);
    let taps_y = axis_taps(h, th);
    let taps_x = axis_taps(w, tw);
    let mut out = vec![T::ZERO; tt * th * tw * ch];
    for (ot, &(t0, t1, wt)) in taps_t.iter().enumerate() {
        for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                let o = ((ot * th + oy) * tw + ox) * ch;
                // Clamped axes have a zero hi-weight, so the duplicate tap
                // contributes nothing; no special cases needed.
                for (ti, tv) in [(t0, 1.0 - wt), (t1, wt)] {
                    for (yi, yv) in [(y0, 1.0 - wy), (y1, wy)] {
                        for (xi, xv) in [(x0, 1.0 - wx), (x1, wx)] {
                            let weight = T::from_f64(tv * yv * xv);
                            let idx = ((ti * h + yi) * w + xi) * ch;
                            for c in 0..ch {
                                out[o + c] += weight * x[idx + c];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`trilinear_apply`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn trilinear_scatter<T: Real>(
    grad_out: &[T],
    t: usize,
    h: usize,
    w: usize,
    ch: usize,
    tt: usize,
    th: usize,
    tw: usize,
    grad_in: &mut [T],
) {
    if (t, h, w) == (tt, th, tw) {
        for (g, &d) in grad_in.iter_mut().zip(grad_out) {
            *g += d;
        }
        return;
    }
    let taps_t = axis_taps(t, tt);
    let taps_y = axis_taps(h, th);
    let taps_x = axis_taps(w, tw);
    for (ot, &(t0, t1, wt)) in taps_t.iter().enumerate() {
        for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                let o = ((ot * th + oy) * tw + ox) * ch;
                for (ti, tv) in [(t0, 1.0 - wt), (t1, wt)] {
                    for (yi, yv) in [(y0, 1.0 - wy), (y1, wy)] {
                        for (xi, xv) in [(x0, 1.0 - wx), (x1, wx)] {
                            let weight = T::from_f64(tv * yv * xv);
                            let idx = ((ti * h + yi) * w + xi) * ch;
                            for c in 0..ch {
                                grad_in[idx + c] += weight * grad_out[o + c];
                            }
                        }
                    }
                }
            }
        }
    }
}
