//! Software rasterizer for anti-aliased discs and rings on small RGB images.

/// Square RGB image, channels-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub size: usize,
    pub data: Vec<f32>,
}

/// Axis-aligned square window onto the world plane; `y` points up.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub center: [f64; 2],
    pub half_width: f64,
}

impl View {
    fn to_pixels(self, size: usize, p: [f64; 2]) -> (f64, f64) {
        let s = size as f64 / (2.0 * self.half_width);
        let col = (p[0] - self.center[0]) * s + size as f64 / 2.0;
        let row = (self.center[1] - p[1]) * s + size as f64 / 2.0;
        (col, row)
    }

    fn scale(&self, size: usize) -> f64 {
        size as f64 / (2.0 * self.half_width)
    }
}

impl Canvas {
    pub fn new(size: usize, background: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&background);
        }
        Canvas { size, data }
    }

    fn blend(&mut self, row: usize, col: usize, color: [f32; 3], coverage: f64) {
        let c = coverage.clamp(0.0, 1.0) as f32;
        if c == 0.0 {
            return;
        }
        let px = &mut self.data[(row * self.size + col) * 3..][..3];
        for (p, q) in px.iter_mut().zip(color) {
            *p = *p * (1.0 - c) + q * c;
        }
    }

    /// Pixel coverage is estimated from the signed distance at the pixel centre.
    fn shape(&mut self, view: &View, center: [f64; 2], color: [f32; 3], coverage: impl Fn(f64) -> f64, reach: f64) {
        let (cx, cy) = view.to_pixels(self.size, center);
        let lo_r = (cy - reach - 1.0).floor().max(0.0) as usize;
        let hi_r = ((cy + reach + 1.0).ceil().max(0.0) as usize).min(self.size);
        let lo_c = (cx - reach - 1.0).floor().max(0.0) as usize;
        let hi_c = ((cx + reach + 1.0).ceil().max(0.0) as usize).min(self.size);
        for row in lo_r..hi_r {
            for col in lo_c..hi_c {
                let d = ((col as f64 + 0.5 - cx).powi(2) + (row as f64 + 0.5 - cy).powi(2)).sqrt();
                self.blend(row, col, color, coverage(d));
            }
        }
    }

    pub fn disc(&mut self, view: &View, center: [f64; 2], radius: f64, color: [f32; 3]) {
        let r = radius * view.scale(self.size);
        self.shape(view, center, color, |d| r - d + 0.5, r);
    }

    pub fn ring(&mut self, view: &View, center: [f64; 2], radius: f64, thickness: f64, color: [f32; 3]) {
        let s = view.scale(self.size);
        let (r, half) = (radius * s, 0.5 * thickness * s);
        self.shape(view, center, color, |d| half - (d - r).abs() + 0.5, r + half);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disc_is_centered_and_bounded() {
        let view = View { center: [0.0, 0.0], half_width: 1.0 };
        let mut c = Canvas::new(16, [0.0; 3]);
        c.disc(&view, [0.0, 0.0], 0.25, [1.0, 0.0, 0.0]);
        let red = |r: usize, col: usize| c.data[(r * 16 + col) * 3];
        assert_eq!(red(7, 7), 1.0);
        assert_eq!(red(0, 0), 0.0);
        assert!(c.data.iter().all(|v| (0.0..=1.0).contains(v)));
        // Symmetric about the centre.
        assert_eq!(red(6, 8), red(9, 7));
    }

    #[test]
    fn y_axis_points_up() {
        let view = View { center: [0.0, 0.0], half_width: 1.0 };
        let mut c = Canvas::new(8, [0.0; 3]);
        c.disc(&view, [0.0, 0.75], 0.1, [0.0, 1.0, 0.0]);
        let top: f32 = c.data[..8 * 3 * 2].iter().sum();
        let bottom: f32 = c.data[8 * 3 * 6..].iter().sum();
        assert!(top > 0.0 && bottom == 0.0);
    }

    #[test]
    fn ring_leaves_hole() {
        let view = View { center: [0.0, 0.0], half_width: 1.0 };
        let mut c = Canvas::new(32, [0.0; 3]);
        c.ring(&view, [0.0, 0.0], 0.5, 0.1, [0.0, 0.0, 1.0]);
        assert_eq!(c.data[(16 * 32 + 16) * 3 + 2], 0.0);
        assert!(c.data[(16 * 32 + 24) * 3 + 2] > 0.5);
    }
}
