use crate::encoder::IMAGE_SIDE;

/// Fractional overlap weights of a box filter mapping `src` cells onto
/// `dst` cells. Row `i` lists `(src index, weight)` and sums to one.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = lo + ratio;
            let mut row = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src {
                let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    row.push((j, overlap / ratio));
                }
                j += 1;
            }
            row
        })
        .collect()
}

/// Area-average resize of a `sh x sw` image to `dh x dw`. Each output
/// pixel is the mean of the source area it covers, with fractional
/// coverage at the edges, so the image mean is preserved.
pub fn area_resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    assert_eq!(src.len(), sh * sw, "source buffer does not match its dimensions");
    let wy = box_weights(sh, dh);
    let wx = box_weights(sw, dw);
    // Columns first, then rows.
    let mut tmp = vec![0.0f64; sh * dw];
    for y in 0..sh {
        for (x, row) in wx.iter().enumerate() {
            tmp[y * dw + x] = row.iter().map(|&(j, w)| w * src[y * sw + j] as f64).sum();
        }
    }
    let mut out = vec![0.0f32; dh * dw];
    for (y, row) in wy.iter().enumerate() {
        for x in 0..dw {
            out[y * dw + x] = row.iter().map(|&(j, w)| w * tmp[j * dw + x]).sum::<f64>() as f32;
        }
    }
    out
}

/// Nearest-neighbour resize of a square `s x s` image to `d x d`.
pub fn nearest_resize(src: &[f32], s: usize, d: usize) -> Vec<f32> {
    let map = |i: usize| (((i as f64 + 0.5) * s as f64 / d as f64) as usize).min(s - 1);
    let mut out = Vec::with_capacity(d * d);
    for y in 0..d {
        for x in 0..d {
            out.push(src[map(y) * s + map(x)]);
        }
    }
    out
}

pub fn subtract_mean(img: &mut [f32]) {
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
    img.iter_mut().for_each(|v| *v = (*v as f64 - mean) as f32);
}

/// Turns a raw square 8-bit image into a `28 x 28` network input:
/// area-average down-sampling, scaling to `[0, 1]`, inversion so strokes
/// are bright, and subtraction of the image's own mean.
pub fn preprocess(pixels: &[u8], side: usize) -> Vec<f32> {
    let scaled: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let mut img = area_resize(&scaled, side, side, IMAGE_SIDE, IMAGE_SIDE);
    img.iter_mut().for_each(|v| *v = 1.0 - *v);
    subtract_mean(&mut img);
    img
}
