//! Box algebra, IoU, the anchor lattice and R-CNN box deltas.
//!
//! Coordinates are continuous pixel positions with the origin at the top-left
//! image corner. The max edge is exclusive, so `width = x_max - x_min`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-ratio deltas are clamped to this magnitude before exponentiation.
pub const DELTA_CLAMP: f64 = 10.0;

/// Anchor box width/height ratios of the default template set.
pub const PAPER_RATIOS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Anchor box areas (pixel²) of the default template set.
pub const PAPER_AREAS: [f64; 29] = [
    32.0, 48.0, 64.0, 96.0, 128.0, 192.0, 256.0, 384.0, 512.0, 768.0, 1024.0, 1536.0, 2048.0,
    3072.0, 4096.0, 6144.0, 8192.0, 12288.0, 16384.0, 24576.0, 32768.0, 49152.0, 65536.0,
    98304.0, 131072.0, 196608.0, 262144.0, 393216.0, 524288.0,
];

/// Name of the embedded default template preset.
pub const PAPER_PRESET: &str = "paper-table1";

/// Axis-aligned box `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Checked constructor: rejects non-finite coordinates and inverted edges.
    pub fn try_new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox::new(x_min, y_min, x_max, y_max);
        if !b.is_valid() {
            return Err(Error::invalid("bbox", format!("{b:?} is not a valid box")));
        }
        Ok(b)
    }

    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    /// True when the box has zero width or zero height.
    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    /// True when any part of the box lies outside `[0, w] × [0, h]`.
    pub fn extends_outside(&self, image_w: f64, image_h: f64) -> bool {
        self.x_min < 0.0 || self.y_min < 0.0 || self.x_max > image_w || self.y_max > image_h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Dense row-major `rows × cols` matrix of IoU values.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl IouMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// IoU of every anchor against every ground-truth box (`anchors.len() × gts.len()`).
pub fn iou_matrix(anchors: &[BBox], gts: &[BBox]) -> IouMatrix {
    let mut values = Vec::with_capacity(anchors.len() * gts.len());
    for a in anchors {
        let area_a = a.area();
        for g in gts {
            let inter = a.intersection_area(g);
            let union = area_a + g.area() - inter;
            values.push(if union <= 0.0 {
                0.0
            } else {
                (inter / union).clamp(0.0, 1.0)
            });
        }
    }
    IouMatrix {
        rows: anchors.len(),
        cols: gts.len(),
        values,
    }
}

/// Anchor shape: width/height ratio and area in pixel².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorTemplate {
    pub ratio: f64,
    pub area: f64,
}

impl AnchorTemplate {
    pub fn new(ratio: f64, area: f64) -> Result<Self> {
        let t = AnchorTemplate { ratio, area };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio.is_finite() && self.ratio > 0.0) {
            return Err(Error::invalid("ratio", format!("{} must be > 0", self.ratio)));
        }
        if !(self.area.is_finite() && self.area > 0.0) {
            return Err(Error::invalid("area", format!("{} must be > 0", self.area)));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.area * self.ratio).sqrt()
    }

    pub fn height(&self) -> f64 {
        (self.area / self.ratio).sqrt()
    }
}

/// The default 5 ratios × 29 areas template set, ratio-major.
pub fn paper_templates() -> Vec<AnchorTemplate> {
    PAPER_RATIOS
        .iter()
        .flat_map(|&ratio| PAPER_AREAS.iter().map(move |&area| AnchorTemplate { ratio, area }))
        .collect()
}

/// Looks up a named template preset.
pub fn template_preset(name: &str) -> Result<Vec<AnchorTemplate>> {
    match name {
        PAPER_PRESET => Ok(paper_templates()),
        other => Err(Error::invalid(
            "preset",
            format!("unknown anchor preset `{other}` (available: {PAPER_PRESET})"),
        )),
    }
}

/// Parses a JSON array of `{ "ratio": .., "area": .. }` objects.
pub fn templates_from_json(text: &str) -> Result<Vec<AnchorTemplate>> {
    let templates: Vec<AnchorTemplate> = serde_json::from_str(text)?;
    if templates.is_empty() {
        return Err(Error::invalid("templates", "template list is empty"));
    }
    for t in &templates {
        t.validate()?;
    }
    Ok(templates)
}

/// Fixed anchor lattice over one feature map.
///
/// Anchor `(row, col, t)` lives at flat index `(row * cols + col) * T + t` and is
/// centered on the cell center `((col + 0.5) * stride, (row + 0.5) * stride)`.
/// Boxes are never clipped to the image; [`AnchorGrid::is_outside`] flags the
/// ones crossing the border.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    image_w: usize,
    image_h: usize,
    stride: usize,
    rows: usize,
    cols: usize,
    templates: Vec<AnchorTemplate>,
    boxes: Vec<BBox>,
    outside: Vec<bool>,
}

impl AnchorGrid {
    pub fn image_size(&self) -> (usize, usize) {
        (self.image_w, self.image_h)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn templates(&self) -> &[AnchorTemplate] {
        &self.templates
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.templates.len()
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn is_outside(&self, index: usize) -> bool {
        self.outside[index]
    }

    pub fn outside_count(&self) -> usize {
        self.outside.iter().filter(|&&o| o).count()
    }

    pub fn index(&self, row: usize, col: usize, template: usize) -> usize {
        (row * self.cols + col) * self.templates.len() + template
    }

    /// Inverse of [`AnchorGrid::index`]: `(row, col, template)`.
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let t = self.templates.len();
        let cell = index / t;
        (cell / self.cols, cell % self.cols, index % t)
    }
}

/// Builds the anchor lattice for an image, using ceiling division for the grid size.
pub fn make_anchor_grid(
    image_w: usize,
    image_h: usize,
    stride: usize,
    templates: &[AnchorTemplate],
) -> Result<AnchorGrid> {
    if image_w == 0 || image_h == 0 {
        return Err(Error::invalid(
            "image",
            format!("dimensions must be positive, got {image_w}x{image_h}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("stride", "must be positive"));
    }
    if templates.is_empty() {
        return Err(Error::invalid("templates", "template list is empty"));
    }
    for t in templates {
        t.validate()?;
    }

    let rows = image_h.div_ceil(stride);
    let cols = image_w.div_ceil(stride);
    let sizes: Vec<(f64, f64)> = templates.iter().map(|t| (t.width(), t.height())).collect();
    let n = rows * cols * templates.len();
    let mut boxes = Vec::with_capacity(n);
    let mut outside = Vec::with_capacity(n);
    let s = stride as f64;
    for row in 0..rows {
        let cy = (row as f64 + 0.5) * s;
        for col in 0..cols {
            let cx = (col as f64 + 0.5) * s;
            for &(w, h) in &sizes {
                let b = BBox::from_center_size(cx, cy, w, h);
                outside.push(b.extends_outside(image_w as f64, image_h as f64));
                boxes.push(b);
            }
        }
    }
    Ok(AnchorGrid {
        image_w,
        image_h,
        stride,
        rows,
        cols,
        templates: templates.to_vec(),
        boxes,
        outside,
    })
}

/// R-CNN regression offsets of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoxDelta {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode(anchor: &BBox, gt: &BBox) -> Result<BoxDelta> {
    if anchor.is_degenerate() || !anchor.is_valid() {
        return Err(Error::invalid("anchor", format!("{anchor:?} has zero size")));
    }
    if gt.is_degenerate() || !gt.is_valid() {
        return Err(Error::invalid("gt", format!("{gt:?} has zero size")));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(BoxDelta {
        tx: (gcx - acx) / aw,
        ty: (gcy - acy) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    })
}

/// Inverse of [`encode`]. `tw`/`th` are clamped to `±DELTA_CLAMP` first.
pub fn decode(anchor: &BBox, delta: &BoxDelta) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + delta.tx * aw;
    let cy = acy + delta.ty * ah;
    let w = aw * delta.tw.clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    let h = ah * delta.th.clamp(-DELTA_CLAMP, DELTA_CLAMP).exp();
    BBox::from_center_size(cx, cy, w, h)
}
