/// Corner-aligned source coordinate for output index `o` of `out` samples
/// over an axis of `len` input samples.
fn source_coord(o: usize, len: usize, out: usize) -> f64 {
    if out == 1 {
        (len - 1) as f64 / 2.0
    } else {
        (o * (len - 1)) as f64 / (out - 1) as f64
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + (b - a) * t).clamp(a.min(b), a.max(b))
}

/// Bilinear resize of a row-major `w×h` plane, sampling with the first and
/// last pixel centres aligned. The result of each sample is clamped to the
/// range of its four neighbours, so constants are reproduced exactly and no
/// output leaves the input range.
pub(crate) fn bilinear_plane(
    src: &[f64],
    w: usize,
    h: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), w * h);
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|ox| {
            let sx = source_coord(ox, w, out_w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            (x0, x1, sx - x0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let sy = source_coord(oy, h, out_h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = sy - y0 as f64;
        let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
        for &(x0, x1, tx) in &xs {
            let top = lerp(r0[x0], r0[x1], tx);
            let bottom = lerp(r1[x0], r1[x1], tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_alignment_hits_endpoints() {
        let src = [0.0, 10.0];
        let out = bilinear_plane(&src, 2, 1, 5, 1);
        assert_eq!(out, vec![0.0, 2.5, 5.0, 7.5, 10.0]);
    }

    #[test]
    fn downsample_to_single_pixel_uses_centre() {
        let src = [0.0, 2.0, 4.0, 6.0];
        assert_eq!(bilinear_plane(&src, 2, 2, 1, 1), vec![3.0]);
    }
}
