use std::path::Path;

use crate::image::ImageTensor;

use super::VisError;

pub const GRID_COLUMNS: usize = 5;
const PAD: usize = 2;
const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const LABEL_H: usize = GLYPH_H + 4;
/// Small tiles are upscaled (nearest neighbour) to at least this side.
const MIN_TILE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub cell_width: usize,
    pub cell_height: usize,
    pub width: usize,
    pub height: usize,
}

impl GridLayout {
    /// Up to five tiles per row; a partial last row is padded blank.
    pub fn for_count(n: usize, tile_h: usize, tile_w: usize) -> Self {
        let cols = n.clamp(1, GRID_COLUMNS);
        let rows = n.div_ceil(GRID_COLUMNS).max(1);
        let cell_width = tile_w + 2 * PAD;
        let cell_height = tile_h + LABEL_H + 2 * PAD;
        GridLayout {
            rows,
            cols,
            cell_width,
            cell_height,
            width: cols * cell_width,
            height: rows * cell_height,
        }
    }
}

/// Rows of a 5×7 glyph, most significant of the low 5 bits on the left.
fn glyph(c: char) -> [u8; GLYPH_H] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        ' ' => [0x00; GLYPH_H],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04],
    }
}

fn draw_text(canvas: &mut ImageTensor, text: &str, top: usize, left: usize, max_w: usize) {
    let max_chars = (max_w + 1) / (GLYPH_W + 1);
    for (i, ch) in text.chars().take(max_chars).enumerate() {
        let x0 = left + i * (GLYPH_W + 1);
        for (dy, bits) in glyph(ch).iter().enumerate() {
            for dx in 0..GLYPH_W {
                if bits & (0x10 >> dx) != 0 {
                    for c in 0..3 {
                        canvas.0[[c, top + dy, x0 + dx]] = 0.0;
                    }
                }
            }
        }
    }
}

/// Tile images five to a row with a text label under each and write a PNG.
/// Images are shown as pixels in `[0, 1]`; smaller tiles are centered.
pub fn render_grid(
    images: &[ImageTensor],
    labels: &[String],
    path: &Path,
) -> Result<GridLayout, VisError> {
    if images.is_empty() {
        return Err(VisError::Config("no images to render".into()));
    }
    let max_h = images.iter().map(ImageTensor::height).max().unwrap();
    let max_w = images.iter().map(ImageTensor::width).max().unwrap();
    let scale = MIN_TILE.div_ceil(max_h.max(max_w)).max(1);
    let (tile_h, tile_w) = (max_h * scale, max_w * scale);
    let layout = GridLayout::for_count(images.len(), tile_h, tile_w);
    let mut canvas = ImageTensor::filled(3, layout.height, layout.width, 1.0);
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / GRID_COLUMNS, i % GRID_COLUMNS);
        let top = r * layout.cell_height + PAD + (tile_h - img.height() * scale) / 2;
        let left = c * layout.cell_width + PAD + (tile_w - img.width() * scale) / 2;
        for ch in 0..3 {
            let src = ch.min(img.channels() - 1);
            for y in 0..img.height() * scale {
                for x in 0..img.width() * scale {
                    canvas.0[[ch, top + y, left + x]] =
                        img.0[[src, y / scale, x / scale]].clamp(0.0, 1.0);
                }
            }
        }
        if let Some(label) = labels.get(i) {
            let ty = r * layout.cell_height + PAD + tile_h + 2;
            draw_text(&mut canvas, label, ty, c * layout.cell_width + PAD, tile_w);
        }
    }
    canvas.save_png(path).map_err(|e| VisError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(layout)
}
