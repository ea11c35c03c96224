//! Synthetic scenes: a moving rectangle of strong foreground tokens over a
//! weak textured background, with exact ground-truth masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::SceneSpec;
use crate::dit::{signature, Grid, LatentVideo, Signature};
use crate::error::{Error, Result};
use crate::profiler::ForegroundMask;
use crate::tensor::Tensor;

const TEXTURE_STREAM: u64 = 0x5EED_7E47_0000_0001;
const NOISE_STREAM: u64 = 0x5EED_7E47_0000_0002;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub x0: LatentVideo,
    pub truth: ForegroundMask,
}

/// Rectangle `(x, y, w, h)` of frame `f`.
pub fn frame_rect(spec: &SceneSpec, f: usize) -> (isize, isize, usize, usize) {
    let (x, y, w, h) = spec.rect;
    (
        x as isize + spec.motion.0 * f as isize,
        y as isize + spec.motion.1 * f as isize,
        w,
        h,
    )
}

pub fn truth_mask(spec: &SceneSpec, grid: Grid) -> Result<ForegroundMask> {
    let mut bits = vec![false; grid.tokens()];
    for f in 0..grid.frames {
        let (x, y, w, h) = frame_rect(spec, f);
        if w == 0 || h == 0 || x < 0 || y < 0 || x as usize + w > grid.width || y as usize + h > grid.height {
            return Err(Error::Config(format!(
                "scene rectangle ({x}, {y}, {w}, {h}) in frame {f} leaves the {}x{} grid",
                grid.width, grid.height
            )));
        }
        for yy in y as usize..y as usize + h {
            for xx in x as usize..x as usize + w {
                bits[grid.index(f, yy, xx)] = true;
            }
        }
    }
    Ok(ForegroundMask::external(bits))
}

fn normals(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Foreground tokens are `magnitude * u_fg`, background tokens
/// `background * u_bg`, both plus `texture`-scaled Gaussian texture.
pub fn generate_scene(spec: &SceneSpec, grid: Grid, channels: usize, seed: u64) -> Result<Scene> {
    let truth = truth_mask(spec, grid)?;
    let u_fg = signature(channels, Signature::Foreground);
    let u_bg = signature(channels, Signature::Background);
    let n = grid.tokens();
    let texture = normals(seed, TEXTURE_STREAM, n * channels);
    let mut tokens = Tensor::zeros(&[n, channels]);
    for t in 0..n {
        let (dir, level) = if truth.bits[t] {
            (&u_fg, spec.magnitude)
        } else {
            (&u_bg, spec.background)
        };
        for c in 0..channels {
            tokens.set(t, c, level * dir[c] + spec.texture * texture[t * channels + c]);
        }
    }
    Ok(Scene {
        x0: LatentVideo::from_tokens(&tokens, grid)?,
        truth,
    })
}

/// Standard-normal latent used to diffuse the scene to the start step.
pub fn start_noise(grid: Grid, channels: usize, seed: u64) -> LatentVideo {
    let data = normals(seed, NOISE_STREAM, grid.tokens() * channels);
    LatentVideo::new(Tensor::new(vec![channels, grid.frames, grid.height, grid.width], data).unwrap()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_rect_repeats_across_frames() {
        let spec = SceneSpec {
            motion: (0, 0),
            ..SceneSpec::default()
        };
        let g = Grid::new(3, 8, 8);
        let m = truth_mask(&spec, g).unwrap();
        let per = g.frame_tokens();
        assert_eq!(m.bits[..per], m.bits[per..2 * per]);
        assert_eq!(m.bits[..per], m.bits[2 * per..]);
        assert_eq!(m.count(), 18);
    }

    #[test]
    fn moving_rect_translates() {
        let spec = SceneSpec::default();
        let g = Grid::new(2, 8, 8);
        let m = truth_mask(&spec, g).unwrap();
        assert!(m.bits[g.index(0, 2, 2)] && !m.bits[g.index(1, 2, 2)]);
        assert!(m.bits[g.index(1, 2, 5)] && !m.bits[g.index(0, 2, 5)]);
    }

    #[test]
    fn out_of_bounds_rect_is_config_error() {
        let spec = SceneSpec {
            motion: (4, 0),
            ..SceneSpec::default()
        };
        assert!(matches!(truth_mask(&spec, Grid::new(2, 8, 8)), Err(Error::Config(_))));
    }

    #[test]
    fn scene_is_deterministic() {
        let spec = SceneSpec::default();
        let g = Grid::new(2, 8, 8);
        let a = generate_scene(&spec, g, 16, 1).unwrap();
        assert_eq!(a, generate_scene(&spec, g, 16, 1).unwrap());
        assert_ne!(a.x0, generate_scene(&spec, g, 16, 2).unwrap().x0);
    }
}
