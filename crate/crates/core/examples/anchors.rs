//! Builds the anchor lattice for an image and shows where a few anchors sit.
//!
//! ```text
//! cargo run --example anchors -- [WIDTHxHEIGHT]
//! ```

use nnad::geom::{make_anchor_grid, paper_templates};
use nnad::net::BACKBONE_STRIDE;

fn main() -> nnad::Result<()> {
    let size = std::env::args().nth(1).unwrap_or_else(|| "64x64".into());
    let (w, h) = size.split_once('x').expect("WIDTHxHEIGHT");
    let (w, h): (usize, usize) = (w.parse().expect("width"), h.parse().expect("height"));

    let templates = paper_templates();
    let grid = make_anchor_grid(w, h, BACKBONE_STRIDE, &templates)?;
    println!(
        "{w}x{h} at stride {}: {} x {} cells, {} templates, {} anchors ({} reach outside the image)",
        grid.stride(),
        grid.rows(),
        grid.cols(),
        grid.anchors_per_cell(),
        grid.len(),
        grid.outside_count()
    );

    let (smallest, largest) = (0, templates.len() - 1);
    for (row, col, t) in [(0, 0, smallest), (grid.rows() / 2, grid.cols() / 2, largest)] {
        let i = grid.index(row, col, t);
        let b = grid.boxes()[i];
        println!(
            "anchor {i:>5} (row {row}, col {col}, ratio {:.2}, area {:>6.0}): [{:.1}, {:.1}, {:.1}, {:.1}]",
            templates[t].ratio, templates[t].area, b.x_min, b.y_min, b.x_max, b.y_max
        );
    }
    Ok(())
}
