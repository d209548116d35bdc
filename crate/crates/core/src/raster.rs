//! Integer rasterisation primitives shared by the action-map renderer and
//! the synthetic world.

use crate::image::RgbImage;

/// Coordinates beyond this magnitude are clamped before rasterising lines.
const COORD_LIMIT: i64 = 1 << 14;

pub fn round_px(v: f64) -> i64 {
    v.round().clamp(-(COORD_LIMIT as f64), COORD_LIMIT as f64) as i64
}

/// Every pixel with `dx^2 + dy^2 <= r^2` around the integer center.
pub fn fill_circle(img: &mut RgbImage, cx: i64, cy: i64, r: i64, rgb: [u8; 3]) {
    let r2 = r * r;
    let y0 = (cy - r).max(0);
    let y1 = (cy + r).min(img.height as i64 - 1);
    for y in y0..=y1 {
        let dy = y - cy;
        for x in (cx - r).max(0)..=(cx + r).min(img.width as i64 - 1) {
            let dx = x - cx;
            if dx * dx + dy * dy <= r2 {
                img.put(x, y, rgb);
            }
        }
    }
}

/// Bresenham line including both endpoints; out-of-raster pixels are skipped.
pub fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
    let (x0, y0) = (x0.clamp(-COORD_LIMIT, COORD_LIMIT), y0.clamp(-COORD_LIMIT, COORD_LIMIT));
    let (x1, y1) = (x1.clamp(-COORD_LIMIT, COORD_LIMIT), y1.clamp(-COORD_LIMIT, COORD_LIMIT));
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        img.put(x, y, rgb);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Scanline fill of a simple polygon given in pixel coordinates; a pixel is
/// filled when its center lies inside (even-odd rule).
pub fn fill_polygon(img: &mut RgbImage, pts: &[(f64, f64)], rgb: [u8; 3]) {
    if pts.len() < 3 {
        return;
    }
    let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as i64;
    let ymax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(img.height as f64 - 1.0) as i64;
    let mut xs = Vec::with_capacity(pts.len());
    for y in ymin..=ymax {
        let yc = y as f64;
        xs.clear();
        for i in 0..pts.len() {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            if (a.1 <= yc && b.1 > yc) || (b.1 <= yc && a.1 > yc) {
                let t = (yc - a.1) / (b.1 - a.1);
                xs.push(a.0 + t * (b.0 - a.0));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            let x0 = pair[0].ceil().max(0.0) as i64;
            let x1 = pair[1].floor().min(img.width as f64 - 1.0) as i64;
            for x in x0..=x1 {
                img.put(x, y, rgb);
            }
        }
    }
}

/// Convex hull (monotone chain), counter-clockwise in pixel coordinates.
pub fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(img: &RgbImage, rgb: [u8; 3]) -> usize {
        img.data.chunks(3).filter(|p| *p == rgb).count()
    }

    #[test]
    fn circle_pixel_count() {
        let mut img = RgbImage::new(20, 20);
        fill_circle(&mut img, 10, 10, 2, [1, 1, 1]);
        // lattice points with x^2 + y^2 <= 4
        assert_eq!(count(&img, [1, 1, 1]), 13);
    }

    #[test]
    fn line_endpoints_and_length() {
        let mut img = RgbImage::new(20, 20);
        draw_line(&mut img, 2, 3, 12, 7, [9, 9, 9]);
        assert_eq!(img.get(2, 3), [9, 9, 9]);
        assert_eq!(img.get(12, 7), [9, 9, 9]);
        assert_eq!(count(&img, [9, 9, 9]), 11);
    }

    #[test]
    fn far_away_line_terminates() {
        let mut img = RgbImage::new(8, 8);
        draw_line(&mut img, 4, 4, 1 << 40, -(1 << 40), [1, 2, 3]);
        assert_eq!(img.get(4, 4), [1, 2, 3]);
    }

    #[test]
    fn polygon_square() {
        let mut img = RgbImage::new(10, 10);
        fill_polygon(&mut img, &[(1.5, 1.5), (5.5, 1.5), (5.5, 5.5), (1.5, 5.5)], [5, 5, 5]);
        assert_eq!(count(&img, [5, 5, 5]), 16);
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let h = convex_hull(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)]);
        assert_eq!(h.len(), 4);
    }
}
