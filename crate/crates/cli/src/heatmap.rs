//! 8-bit grayscale renderings of single-channel maps.

use std::path::Path;

use sdaa_core::autodiff::bilinear;
use sdaa_core::pnm;
use sdaa_core::Tensor;

/// How map values are brought to `[0, 1]` before quantisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Range {
    /// Use the map's own minimum and maximum.
    MinMax,
    /// Fixed bounds, e.g. `[-1, 1]` for cosine similarities.
    Fixed(f32, f32),
}

/// Gray level of a constant map.
pub const CONSTANT_LEVEL: u8 = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl HeatmapImage {
    /// Render a `[1, 1, h, w]` map, optionally bilinearly resized first.
    pub fn render(map: &Tensor, range: Range, upsample_to: Option<(usize, usize)>) -> sdaa_core::Result<Self> {
        let (n, c, _, _) = map.dims4("heatmap")?;
        if n != 1 || c != 1 {
            return Err(sdaa_core::Error::InvalidArgument {
                op: "heatmap",
                reason: format!("expected a [1, 1, h, w] map, got {:?}", map.shape()),
            });
        }
        let map = match upsample_to {
            Some((h, w)) => bilinear(map, h, w, true)?,
            None => map.clone(),
        };
        let (_, _, height, width) = map.dims4("heatmap")?;
        let (lo, hi) = match range {
            Range::MinMax => map
                .data()
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
            Range::Fixed(lo, hi) => (lo, hi),
        };
        let pixels = if hi > lo {
            map.data()
                .iter()
                .map(|&v| (255.0 * ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8)
                .collect()
        } else {
            vec![CONSTANT_LEVEL; width * height]
        };
        Ok(Self { width, height, pixels })
    }

    pub fn to_pgm(&self) -> sdaa_core::Result<Vec<u8>> {
        pnm::encode_pgm(self.width, self.height, &self.pixels)
    }

    pub fn write(&self, path: &Path) -> sdaa_core::Result<()> {
        pnm::write_pgm(path, self.width, self.height, &self.pixels)
    }
}
