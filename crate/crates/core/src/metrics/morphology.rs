//! Binary morphology on `{0,1}` rasters.

use crate::pipeline::raster::Raster;

/// Dilation by the digital disc `dx² + dy² ≤ radius²`.
pub fn dilate_disc(mask: &Raster<u8>, radius: usize) -> Raster<u8> {
    let (h, w) = mask.dims();
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = Raster::filled(h, w, 0u8);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ty, tx) = (y as isize + dy, x as isize + dx);
                if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                    out.set(ty as usize, tx as usize, 1);
                }
            }
        }
    }
    out
}

/// Number of 8-connected foreground components.
pub fn count_components(mask: &Raster<u8>) -> usize {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..h * w {
        if mask.data()[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data()[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

/// Zhang–Suen thinning to one-pixel-wide curves. Pixels outside the raster
/// count as background.
pub fn zhang_suen(mask: &Raster<u8>) -> Raster<u8> {
    let (h, w) = mask.dims();
    let mut img = mask.map(|v| u8::from(v != 0));
    let at = |img: &Raster<u8>, y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0
        } else {
            img.get(y as usize, x as usize)
        }
    };
    loop {
        let mut changed = false;
        for step in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if img.get(y, x) == 0 {
                        continue;
                    }
                    let (yi, xi) = (y as isize, x as isize);
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&img, yi - 1, xi),
                        at(&img, yi - 1, xi + 1),
                        at(&img, yi, xi + 1),
                        at(&img, yi + 1, xi + 1),
                        at(&img, yi + 1, xi),
                        at(&img, yi + 1, xi - 1),
                        at(&img, yi, xi - 1),
                        at(&img, yi - 1, xi - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let cond = if step == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        remove.push((y, x));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (y, x) in remove {
                img.set(y, x, 0);
            }
        }
        if !changed {
            return img;
        }
    }
}
