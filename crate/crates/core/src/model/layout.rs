//! Index maps between the `C×H×W` feature layout and the token layouts the
//! attention blocks work in.
//!
//! Token layout is `[N×C]` with `N = H·W` pixels in raster order. Windows are
//! the non-overlapping `P×P` tiles in raster order; inside a window, pixels
//! are in raster order too.

use std::rc::Rc;

use super::ModelConfig;
use crate::error::Result;

pub struct Layout {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub patch: usize,
    pub heads: usize,
    /// `[C×H×W] → [N×C]`.
    pub to_tokens: Rc<Vec<u32>>,
    /// `[N×C] → [C×H×W]`.
    pub to_chw: Rc<Vec<u32>>,
    /// `[N×C] → [G·heads × P² × d]`: window pixels as tokens.
    pub pixel_heads: Rc<Vec<u32>>,
    pub pixel_heads_inv: Rc<Vec<u32>>,
    /// `[N×C] → [G·heads × d × P²]`: channels as tokens.
    pub channel_heads: Rc<Vec<u32>>,
    pub channel_heads_inv: Rc<Vec<u32>>,
    /// `[N×C] → [heads × N × d]`.
    pub global_heads: Rc<Vec<u32>>,
    pub global_heads_inv: Rc<Vec<u32>>,
}

fn invert(map: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; map.len()];
    for (i, &s) in map.iter().enumerate() {
        inv[s as usize] = i as u32;
    }
    inv
}

/// `[rows×C] → [heads × rows × d]` and its inverse.
pub fn head_split(rows: usize, channels: usize, heads: usize) -> (Vec<u32>, Vec<u32>) {
    let d = channels / heads;
    let mut map = Vec::with_capacity(rows * channels);
    for h in 0..heads {
        for r in 0..rows {
            for i in 0..d {
                map.push((r * channels + h * d + i) as u32);
            }
        }
    }
    let inv = invert(&map);
    (map, inv)
}

impl Layout {
    pub fn new(cfg: &ModelConfig, h: usize, w: usize) -> Result<Layout> {
        cfg.check_extent(h, w)?;
        let c = cfg.shallow_channels;
        let (p, heads) = (cfg.patch, cfg.heads);
        let d = c / heads;
        let n = h * w;

        let to_tokens: Vec<u32> = (0..n * c)
            .map(|i| ((i % c) * n + i / c) as u32)
            .collect();
        let to_chw = invert(&to_tokens);

        // Pixel index of token t in window g.
        let wins_x = w / p;
        let pixel = |g: usize, t: usize| {
            let (wy, wx) = (g / wins_x, g % wins_x);
            let (ty, tx) = (t / p, t % p);
            (wy * p + ty) * w + wx * p + tx
        };
        let groups = (h / p) * wins_x;
        let mut pixel_heads = Vec::with_capacity(n * c);
        let mut channel_heads = Vec::with_capacity(n * c);
        for g in 0..groups {
            for hd in 0..heads {
                for t in 0..p * p {
                    for i in 0..d {
                        pixel_heads.push((pixel(g, t) * c + hd * d + i) as u32);
                    }
                }
                for i in 0..d {
                    for t in 0..p * p {
                        channel_heads.push((pixel(g, t) * c + hd * d + i) as u32);
                    }
                }
            }
        }
        let pixel_heads_inv = invert(&pixel_heads);
        let channel_heads_inv = invert(&channel_heads);
        let (global_heads, global_heads_inv) = head_split(n, c, heads);
        Ok(Layout {
            h,
            w,
            channels: c,
            patch: p,
            heads,
            to_tokens: Rc::new(to_tokens),
            to_chw: Rc::new(to_chw),
            pixel_heads: Rc::new(pixel_heads),
            pixel_heads_inv: Rc::new(pixel_heads_inv),
            channel_heads: Rc::new(channel_heads),
            channel_heads_inv: Rc::new(channel_heads_inv),
            global_heads: Rc::new(global_heads),
            global_heads_inv: Rc::new(global_heads_inv),
        })
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn windows(&self) -> usize {
        (self.h / self.patch) * (self.w / self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}
