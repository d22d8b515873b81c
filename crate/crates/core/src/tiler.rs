//! Random circular-roll tiling.
//!
//! An `H x W` frame is rolled by a uniformly random origin, cut into a grid
//! of `T x T` tiles starting at the top-left of the rolled image, and the
//! leftover bottom/right band (`H % T` rows, `W % T` columns) is left alone.
//! Because the origin is uniform every pixel has the same probability of
//! landing in that band.

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg32;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::ConsistencyMask;
use crate::tensor::Tensor;

/// PCG-XSH-RR 64/32 generator; frame `i` draws from stream `i` of
/// `global_seed`, so frames are independent and reproducible.
#[derive(Clone, Debug)]
pub struct TileRng {
    rng: Pcg32,
}

impl TileRng {
    pub fn for_frame(global_seed: u64, frame: usize) -> Self {
        Self {
            rng: Pcg32::new(global_seed, frame as u64),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self {
            rng: Pcg32::seed_from_u64(seed),
        }
    }

    pub fn origin(&mut self, height: usize, width: usize) -> (usize, usize) {
        (
            self.rng.random_range(0..height),
            self.rng.random_range(0..width),
        )
    }
}

fn rolled_index(r: usize, c: usize, origin: (usize, usize), h: usize, w: usize) -> usize {
    ((r + origin.0) % h) * w + (c + origin.1) % w
}

/// `out[r][c] = input[(r + or) % H][(c + oc) % W]`.
pub fn roll(image: &Tensor, origin: (usize, usize)) -> Result<Tensor> {
    let (h, w, ch) = image.dims3()?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        for c in 0..w {
            let s = rolled_index(r, c, origin, h, w) * ch;
            out.extend_from_slice(&src[s..s + ch]);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Inverse of [`roll`].
pub fn unroll(image: &Tensor, origin: (usize, usize)) -> Result<Tensor> {
    let (h, w, ch) = image.dims3()?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let d = rolled_index(r, c, origin, h, w) * ch;
            let s = (r * w + c) * ch;
            out[d..d + ch].copy_from_slice(&src[s..s + ch]);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

pub fn roll_mask(mask: &ConsistencyMask, origin: (usize, usize)) -> ConsistencyMask {
    let (h, w) = (mask.height(), mask.width());
    let data = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .map(|(r, c)| mask.data()[rolled_index(r, c, origin, h, w)])
        .collect();
    ConsistencyMask::new(h, w, data).expect("rolled mask keeps its size")
}

/// `T x T x C` window at `(r0, c0)`.
pub fn crop(image: &Tensor, r0: usize, c0: usize, t: usize) -> Result<Tensor> {
    let (h, w, ch) = image.dims3()?;
    if r0 + t > h || c0 + t > w {
        return Err(Error::Shape(format!(
            "crop {t}x{t} at ({r0},{c0}) exceeds {h}x{w}"
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(t * t * ch);
    for r in r0..r0 + t {
        let s = (r * w + c0) * ch;
        out.extend_from_slice(&src[s..s + t * ch]);
    }
    Tensor::new(vec![t, t, ch], out)
}

pub fn crop_mask(mask: &ConsistencyMask, r0: usize, c0: usize, t: usize) -> Result<ConsistencyMask> {
    if r0 + t > mask.height() || c0 + t > mask.width() {
        return Err(Error::Shape(format!(
            "crop {t}x{t} at ({r0},{c0}) exceeds {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let data = (r0..r0 + t)
        .flat_map(|r| (c0..c0 + t).map(move |c| mask.get(r, c)))
        .collect();
    ConsistencyMask::new(t, t, data)
}

fn paste(image: &mut Tensor, tile: &Tensor, r0: usize, c0: usize) {
    let w = image.shape()[1];
    let ch = image.shape()[2];
    let t = tile.shape()[0];
    let dst = image.data_mut();
    for r in 0..t {
        let d = ((r0 + r) * w + c0) * ch;
        dst[d..d + t * ch].copy_from_slice(&tile.data()[r * t * ch..(r + 1) * t * ch]);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileSchedule {
    pub origin: (usize, usize),
    pub tile: usize,
    /// `(H / T, W / T)`.
    pub grid: (usize, usize),
    /// `(H % T, W % T)`.
    pub margin: (usize, usize),
    pub height: usize,
    pub width: usize,
}

pub fn make_schedule(height: usize, width: usize, tile: usize, rng: &mut TileRng) -> Result<TileSchedule> {
    if tile == 0 || tile > height || tile > width {
        return Err(Error::UnsupportedSize(format!(
            "a {height}x{width} image cannot hold a {tile}x{tile} tile"
        )));
    }
    let origin = rng.origin(height, width);
    Ok(TileSchedule {
        origin,
        tile,
        grid: (height / tile, width / tile),
        margin: (height % tile, width % tile),
        height,
        width,
    })
}

impl TileSchedule {
    /// Top-left corners of the grid tiles in rolled coordinates, row-major.
    pub fn tiles(&self) -> Vec<(usize, usize)> {
        (0..self.grid.0)
            .flat_map(|i| (0..self.grid.1).map(move |j| (i * self.tile, j * self.tile)))
            .collect()
    }

    pub fn tile_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Whether original pixel `(r, c)` falls inside some tile.
    pub fn covers(&self, r: usize, c: usize) -> bool {
        let rr = (r + self.height - self.origin.0 % self.height) % self.height;
        let rc = (c + self.width - self.origin.1 % self.width) % self.width;
        rr < self.grid.0 * self.tile && rc < self.grid.1 * self.tile
    }

    pub fn coverage(&self) -> Vec<bool> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .map(|(r, c)| self.covers(r, c))
            .collect()
    }

    fn check(&self, image: &Tensor) -> Result<()> {
        let (h, w, _) = image.dims3()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "schedule for {}x{} applied to {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn check_tile(out: &Tensor, expected: &[usize], index: usize) -> Result<()> {
    if out.shape() != expected {
        return Err(Error::Contract(format!(
            "tile update {index} changed shape {expected:?} to {:?}",
            out.shape()
        )));
    }
    Ok(())
}

/// Rolls `image`, replaces every grid tile with `update(index, corner, tile)`,
/// and unrolls. Margin pixels are untouched.
pub fn apply_tilewise(
    image: &Tensor,
    schedule: &TileSchedule,
    mut update: impl FnMut(usize, (usize, usize), Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    schedule.check(image)?;
    let mut rolled = roll(image, schedule.origin)?;
    for (idx, (r0, c0)) in schedule.tiles().into_iter().enumerate() {
        let tile = crop(&rolled, r0, c0, schedule.tile)?;
        let expected = tile.shape().to_vec();
        let out = update(idx, (r0, c0), tile)?;
        check_tile(&out, &expected, idx)?;
        paste(&mut rolled, &out, r0, c0);
    }
    unroll(&rolled, schedule.origin)
}

/// [`apply_tilewise`] with tiles updated concurrently; results are identical
/// because tiles are disjoint.
pub fn apply_tilewise_parallel(
    image: &Tensor,
    schedule: &TileSchedule,
    update: impl Fn(usize, (usize, usize), Tensor) -> Result<Tensor> + Sync,
) -> Result<Tensor> {
    schedule.check(image)?;
    let mut rolled = roll(image, schedule.origin)?;
    let corners = schedule.tiles();
    let tiles = corners
        .iter()
        .map(|&(r0, c0)| crop(&rolled, r0, c0, schedule.tile))
        .collect::<Result<Vec<_>>>()?;
    let outs = tiles
        .into_par_iter()
        .enumerate()
        .map(|(idx, tile)| {
            let expected = tile.shape().to_vec();
            let out = update(idx, corners[idx], tile)?;
            check_tile(&out, &expected, idx)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    for (out, &(r0, c0)) in outs.iter().zip(&corners) {
        paste(&mut rolled, out, r0, c0);
    }
    unroll(&rolled, schedule.origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[h, w, c], |i| i as f32)
    }

    #[test]
    fn roll_identity_origins() {
        let x = ramp(3, 5, 2);
        assert_eq!(roll(&x, (0, 0)).unwrap(), x);
        assert_eq!(roll(&x, (3, 5)).unwrap(), x);
        assert_eq!(unroll(&x, (0, 0)).unwrap(), x);
    }

    #[test]
    fn roll_two_by_two() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = roll(&x, (1, 1)).unwrap();
        let mut oracle = [0.0; 4];
        for row in 0..2 {
            for col in 0..2 {
                oracle[row * 2 + col] = x.data()[((row + 1) % 2) * 2 + (col + 1) % 2];
            }
        }
        assert_eq!(r.data(), &oracle);
        assert_eq!(r.data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    proptest! {
        #[test]
        fn unroll_inverts_roll(h in 1usize..9, w in 1usize..9, or in 0usize..20, oc in 0usize..20) {
            let x = ramp(h, w, 3);
            let r = roll(&x, (or, oc)).unwrap();
            prop_assert_eq!(&unroll(&r, (or, oc)).unwrap(), &x);
            let mut a = r.data().to_vec();
            let mut b = x.data().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn roll_mask_agrees_with_tensor_roll(bits in proptest::collection::vec(any::<bool>(), 20), or in 0usize..4, oc in 0usize..5) {
            let m = ConsistencyMask::new(4, 5, bits).unwrap();
            let t = Tensor::new(vec![4, 5, 1], m.to_f32()).unwrap();
            prop_assert_eq!(roll_mask(&m, (or, oc)).to_f32(), roll(&t, (or, oc)).unwrap().into_data());
        }
    }

    #[test]
    fn schedule_geometry() {
        let mut rng = TileRng::for_frame(1, 1);
        let s = make_schedule(448, 448, 224, &mut rng).unwrap();
        assert_eq!((s.grid, s.margin), ((2, 2), (0, 0)));
        let s = make_schedule(360, 480, 224, &mut rng).unwrap();
        assert_eq!((s.grid, s.margin), ((1, 2), (136, 32)));
        assert!(matches!(
            make_schedule(100, 480, 224, &mut rng),
            Err(Error::UnsupportedSize(_))
        ));
        assert!(make_schedule(480, 100, 224, &mut rng).is_err());
    }

    #[test]
    fn schedules_are_deterministic() {
        let draw = |seed, frame| {
            let mut rng = TileRng::for_frame(seed, frame);
            (0..5)
                .map(|_| make_schedule(40, 30, 8, &mut rng).unwrap().origin)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7, 3), draw(7, 3));
        assert_ne!(draw(7, 3), draw(7, 4));
    }

    #[test]
    fn identity_update_keeps_image() {
        let x = ramp(10, 13, 3);
        let mut rng = TileRng::from_seed(5);
        let s = make_schedule(10, 13, 4, &mut rng).unwrap();
        let y = apply_tilewise(&x, &s, |_, _, t| Ok(t)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn add_one_touches_exactly_the_covered_pixels() {
        let (h, w, t) = (11usize, 9usize, 4usize);
        let x = Tensor::zeros(&[h, w, 2]);
        let mut rng = TileRng::from_seed(11);
        for _ in 0..20 {
            let s = make_schedule(h, w, t, &mut rng).unwrap();
            let y = apply_tilewise(&x, &s, |_, _, tile| Ok(tile.map(|v| v + 1.0))).unwrap();
            let mut covered = 0;
            for r in 0..h {
                for c in 0..w {
                    // rolled position of (r, c), computed independently
                    let rr = (r as i64 - s.origin.0 as i64).rem_euclid(h as i64) as usize;
                    let rc = (c as i64 - s.origin.1 as i64).rem_euclid(w as i64) as usize;
                    let inside = rr < (h / t) * t && rc < (w / t) * t;
                    let expect = if inside { 1.0 } else { 0.0 };
                    covered += inside as usize;
                    for k in 0..2 {
                        assert_eq!(y.data()[(r * w + c) * 2 + k], expect);
                    }
                }
            }
            assert_eq!(covered, s.tile_count() * t * t);
            assert_eq!(h * w - covered, h * w - (h / t) * (w / t) * t * t);
        }
    }

    #[test]
    fn tile_order_does_not_matter() {
        let x = ramp(12, 12, 1);
        let mut rng = TileRng::from_seed(2);
        let s = make_schedule(12, 12, 5, &mut rng).unwrap();
        let f = |idx: usize, _: (usize, usize), t: Tensor| Ok(t.map(|v| v * (idx + 2) as f32));
        let seq = apply_tilewise(&x, &s, f).unwrap();
        let par = apply_tilewise_parallel(&x, &s, f).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn shape_changing_update_is_rejected() {
        let x = ramp(8, 8, 1);
        let mut rng = TileRng::from_seed(0);
        let s = make_schedule(8, 8, 4, &mut rng).unwrap();
        let r = apply_tilewise(&x, &s, |_, _, _| Ok(Tensor::zeros(&[3, 3, 1])));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn crops_match_rolled_indexing() {
        let x = ramp(6, 7, 2);
        let r = roll(&x, (2, 3)).unwrap();
        let t = crop(&r, 1, 2, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..2 {
                    let src = (((1 + i + 2) % 6) * 7 + (2 + j + 3) % 7) * 2 + k;
                    assert_eq!(t.data()[(i * 3 + j) * 2 + k], x.data()[src]);
                }
            }
        }
        assert!(crop(&r, 4, 0, 3).is_err());
    }
}
