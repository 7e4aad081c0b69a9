//! Positional and view encodings for the BEV plane and the image grids.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numerics::{sinusoid_freqs, Real, Tensor};

/// Temperature of every sinusoidal encoding in the model.
pub const TEMPERATURE: f64 = 10_000.0;

/// BEV grid geometry and embedding widths.
///
/// Row `h` runs from the front edge (`x_range.1`) backwards; column `w` runs
/// from the left edge (`y_range.1`, ego +y) to the right. Ego frame: +x
/// forward, +y left, +z up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevConfig {
    pub height: usize,
    pub width: usize,
    pub pos_channels: usize,
    pub content_channels: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
}

impl BevConfig {
    /// Full-scale reference geometry: 64 × 64 × 256 over ±51.2 m.
    pub fn full_scale() -> Self {
        Self {
            height: 64,
            width: 64,
            pos_channels: 256,
            content_channels: 256,
            x_range: (-51.2, 51.2),
            y_range: (-51.2, 51.2),
            z_range: (-3.0, 5.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.pos_channels == 0 || self.content_channels == 0 {
            return Err(config_err("BEV extents and channel widths must be positive"));
        }
        if self.pos_channels % 4 != 0 {
            return Err(config_err(format!(
                "positional width {} must split into two even sin/cos halves",
                self.pos_channels
            )));
        }
        if self.z_range.0 >= self.z_range.1 {
            return Err(config_err(format!("degenerate z range {:?}", self.z_range)));
        }
        if self.x_range.0 >= self.x_range.1 || self.y_range.0 >= self.y_range.1 {
            return Err(config_err("degenerate perception range"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / self.height as f64,
            (self.y_range.1 - self.y_range.0) / self.width as f64,
        )
    }

    /// Metric `(x, y)` of the center of grid `(h, w)`.
    pub fn grid_center(&self, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = self.cell_size();
        (self.x_range.1 - (h as f64 + 0.5) * cx, self.y_range.1 - (w as f64 + 0.5) * cy)
    }

    /// Grid `(h, w)` containing the metric point, if inside the range.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (cx, cy) = self.cell_size();
        let h = ((self.x_range.1 - x) / cx).floor();
        let w = ((self.y_range.1 - y) / cy).floor();
        if h < 0.0 || w < 0.0 || h >= self.height as f64 || w >= self.width as f64 {
            None
        } else {
            Some((h as usize, w as usize))
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }
}

/// Interleaved `[sin, cos]` encoding of every scalar into `[n, dim]`.
/// Channel pair `i` uses angular frequency `temperature^(-2i/dim)`.
pub fn sinusoidal_encode<T: Real>(values: &[T], dim: usize, temperature: f64) -> Result<Tensor<T>> {
    let freqs = sinusoid_freqs::<T>(dim, temperature)?;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for &f in &freqs {
            out.push((v * f).sin());
            out.push((v * f).cos());
        }
    }
    Tensor::new(&[values.len(), dim], out)
}

/// Initial value of the learned BEV coordinate embedding `[H·W, C_p]`: the
/// first `C_p/2` channels encode the grid-center x, the rest encode y.
pub fn bev_coordinate_embedding<T: Real>(cfg: &BevConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let half = cfg.pos_channels / 2;
    let mut xs = Vec::with_capacity(cfg.cells());
    let mut ys = Vec::with_capacity(cfg.cells());
    for h in 0..cfg.height {
        for w in 0..cfg.width {
            let (x, y) = cfg.grid_center(h, w);
            xs.push(T::of(x));
            ys.push(T::of(y));
        }
    }
    let ex = sinusoidal_encode(&xs, half, TEMPERATURE)?;
    let ey = sinusoidal_encode(&ys, half, TEMPERATURE)?;
    Tensor::concat(&[&ex, &ey], 1)
}

/// Image-side position encodings for `N_v` views of `H_s × W_s` tokens.
///
/// `p_x` and `p_y` are fixed and identical across views; `p_v` is the initial
/// value of the learned per-view table. Tokens are ordered view-major, then
/// row-major within a view.
#[derive(Clone, Debug)]
pub struct PositionBundle<T> {
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub p_x: Tensor<T>,
    pub p_y: Tensor<T>,
    pub p_v: Tensor<T>,
    /// Token → view row of `p_v`, for broadcasting the view table.
    pub view_of_token: Arc<Vec<Option<usize>>>,
}

impl<T: Real> PositionBundle<T> {
    pub fn tokens_per_view(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens(&self) -> usize {
        self.n_views * self.tokens_per_view()
    }
}

/// Normalized pixel coordinate fed to the sinusoid: `2π · index / extent`.
pub fn normalized_pixel(index: usize, extent: usize) -> f64 {
    2.0 * PI * index as f64 / extent as f64
}

pub fn image_position_bundle<T: Real>(
    n_views: usize,
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut impl Rng,
) -> Result<PositionBundle<T>> {
    if n_views == 0 || height == 0 || width == 0 {
        return Err(config_err("image grid extents must be positive"));
    }
    let per_view = height * width;
    let mut xs = Vec::with_capacity(n_views * per_view);
    let mut ys = Vec::with_capacity(n_views * per_view);
    let mut view_of_token = Vec::with_capacity(n_views * per_view);
    for v in 0..n_views {
        for r in 0..height {
            for c in 0..width {
                xs.push(T::of(normalized_pixel(c, width)));
                ys.push(T::of(normalized_pixel(r, height)));
                view_of_token.push(Some(v));
            }
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_v = Tensor::from_fn(&[n_views, channels], |_| T::of(normal.sample(rng)));
    Ok(PositionBundle {
        n_views,
        height,
        width,
        channels,
        p_x: sinusoidal_encode(&xs, channels, TEMPERATURE)?,
        p_y: sinusoidal_encode(&ys, channels, TEMPERATURE)?,
        p_v,
        view_of_token: Arc::new(view_of_token),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn desk() -> BevConfig {
        BevConfig {
            height: 16,
            width: 16,
            pos_channels: 32,
            content_channels: 32,
            x_range: (-51.2, 51.2),
            y_range: (-51.2, 51.2),
            z_range: (-3.0, 5.0),
        }
    }

    #[test]
    fn zero_encodes_to_alternating_zero_one() {
        let e = sinusoidal_encode(&[0.0f64], 4, TEMPERATURE).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn quarter_turn_with_unit_temperature() {
        let e = sinusoidal_encode(&[FRAC_PI_2], 2, 1.0).unwrap();
        assert_eq!(e.data()[0], 1.0);
        assert!((e.data()[1] - 6.123233995736766e-17).abs() < 1e-30);
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(sinusoidal_encode(&[1.0f64], 3, TEMPERATURE).is_err());
    }

    #[test]
    fn first_channel_pair_has_period_two_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heights: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..5.0)).collect();
        let shifted: Vec<f64> = heights.iter().map(|h| h + 2.0 * PI).collect();
        let a = sinusoidal_encode(&heights, 8, TEMPERATURE).unwrap();
        let b = sinusoidal_encode(&shifted, 8, TEMPERATURE).unwrap();
        for i in 0..16 {
            for ch in 0..2 {
                assert!((a.at2(i, ch) - b.at2(i, ch)).abs() < 1e-12);
            }
            // lower frequencies are not 2π-periodic
            assert!((a.at2(i, 2) - b.at2(i, 2)).abs() > 1e-3);
            assert!(a.row(i).iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn coordinate_embedding_is_injective_on_the_grid() {
        let cfg = desk();
        let e = bev_coordinate_embedding::<f64>(&cfg).unwrap();
        assert_eq!(e.shape(), &[256, 32]);
        let mut min_d = f64::INFINITY;
        for i in 0..256 {
            for j in i + 1..256 {
                let d: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                min_d = min_d.min(d.sqrt());
            }
        }
        assert!(min_d > 1e-3, "min pairwise distance {min_d}");
    }

    #[test]
    fn grid_origin_embedding_matches_direct_encoding() {
        let cfg = desk();
        let e = bev_coordinate_embedding::<f64>(&cfg).unwrap();
        let (x, y) = cfg.grid_center(0, 0);
        assert_eq!((x, y), (48.0, 48.0));
        let ex = sinusoidal_encode(&[x], 16, TEMPERATURE).unwrap();
        let ey = sinusoidal_encode(&[y], 16, TEMPERATURE).unwrap();
        assert_eq!(&e.row(0)[..16], ex.data());
        assert_eq!(&e.row(0)[16..], ey.data());
    }

    #[test]
    fn cell_lookup_inverts_grid_center() {
        let cfg = desk();
        for h in 0..16 {
            for w in 0..16 {
                let (x, y) = cfg.grid_center(h, w);
                assert_eq!(cfg.cell_of(x, y), Some((h, w)));
            }
        }
        assert_eq!(cfg.cell_of(60.0, 0.0), None);
    }

    #[test]
    fn config_validation() {
        let mut c = desk();
        c.pos_channels = 30;
        assert!(c.validate().is_err());
        let mut c = desk();
        c.z_range = (2.0, 2.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn pixel_encodings_share_columns_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = image_position_bundle::<f64>(6, 4, 5, 8, &mut rng).unwrap();
        assert_eq!(b.p_x.shape(), &[120, 8]);
        assert_eq!(b.p_v.shape(), &[6, 8]);
        // same column, different rows and views
        assert_eq!(b.p_x.row(2), b.p_x.row(2 + 5));
        assert_eq!(b.p_x.row(2), b.p_x.row(2 + 3 * 20));
        assert_eq!(b.p_y.row(5), b.p_y.row(9));
        let zero = sinusoidal_encode(&[0.0f64], 8, TEMPERATURE).unwrap();
        assert_eq!(b.p_x.row(0), zero.data());
        assert_eq!(b.p_y.row(0), zero.data());
        assert_eq!(b.view_of_token[45], Some(2));
    }
}
